// Copyright Contributors to the eggs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "eggs/core.hpp"
#include "eggs/freq.hpp"

#include <cmath>
#include <limits>

namespace eggs {

inline double mse(const ImageBuffer& a, const ImageBuffer& b) {
    check_same_shape(a, b, "mse");
    double s = 0.0;
    for (std::size_t k = 0; k < a.data.size(); ++k) {
        const double r = a.data[k] - b.data[k];
        s += r * r;
    }
    return s / static_cast<double>(a.data.size());
}

/// 10 log10(1 / MSE) on [0, 1] images; +inf for identical images.
inline double psnr(const ImageBuffer& a, const ImageBuffer& b) {
    const double m = mse(a, b);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / m);
}

/// Mean |a - b| over pixels where the reference depth is positive.
inline double depth_l1(const ImageBuffer& rendered, const ImageBuffer& reference) {
    check_same_shape(rendered, reference, "depth_l1");
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < rendered.data.size(); ++k) {
        if (!(reference.data[k] > 0.0)) continue;
        s += std::abs(rendered.data[k] - reference.data[k]);
        ++n;
    }
    return n == 0 ? 0.0 : s / static_cast<double>(n);
}

} // namespace eggs
