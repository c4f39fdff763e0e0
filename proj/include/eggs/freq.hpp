// Copyright Contributors to the eggs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "eggs/core.hpp"
#include "eggs/grad.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace eggs {

// ---------------------------------------------------------------------------
// Level-1 orthonormal Haar transform
// ---------------------------------------------------------------------------

/// Sub-bands of a level-1 Haar decomposition. For odd inputs the image is
/// edge-replicated to even size first; orig_* keep the valid region.
struct DwtBands {
    ImageBuffer ll, lh, hl, hh;
    int orig_width = 0;
    int orig_height = 0;
};

inline ImageBuffer pad_to_even(const ImageBuffer& img) {
    const int w = img.width + (img.width % 2);
    const int h = img.height + (img.height % 2);
    if (w == img.width && h == img.height) return img;
    ImageBuffer out(w, h, img.channels);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < img.channels; ++c) {
                out.at(x, y, c) = img.at(std::min(x, img.width - 1), std::min(y, img.height - 1), c);
            }
        }
    }
    return out;
}

/// LL = L I L^T, LH = H I L^T, HL = L I H^T, HH = H I H^T with the Haar pair
/// l = (1, 1)/sqrt(2), h = (1, -1)/sqrt(2). Rows are filtered by the left
/// factor, columns by the right one.
inline DwtBands dwt_level1(const ImageBuffer& image) {
    if (image.width <= 0 || image.height <= 0 || image.channels <= 0) {
        throw ConfigError("dwt_level1: empty image");
    }
    const ImageBuffer img = pad_to_even(image);
    const int bw = img.width / 2, bh = img.height / 2, nc = img.channels;
    DwtBands b{ImageBuffer(bw, bh, nc), ImageBuffer(bw, bh, nc), ImageBuffer(bw, bh, nc),
               ImageBuffer(bw, bh, nc), image.width, image.height};
    for (int y = 0; y < bh; ++y) {
        for (int x = 0; x < bw; ++x) {
            for (int c = 0; c < nc; ++c) {
                const double p00 = img.at(2 * x, 2 * y, c), p01 = img.at(2 * x + 1, 2 * y, c);
                const double p10 = img.at(2 * x, 2 * y + 1, c), p11 = img.at(2 * x + 1, 2 * y + 1, c);
                b.ll.at(x, y, c) = 0.5 * (p00 + p01 + p10 + p11);
                b.lh.at(x, y, c) = 0.5 * (p00 + p01 - p10 - p11);
                b.hl.at(x, y, c) = 0.5 * (p00 - p01 + p10 - p11);
                b.hh.at(x, y, c) = 0.5 * (p00 - p01 - p10 + p11);
            }
        }
    }
    return b;
}

/// Synthesis at the padded (even) size; the transpose of the analysis.
inline ImageBuffer idwt_padded(const DwtBands& b) {
    const int bw = b.ll.width, bh = b.ll.height, nc = b.ll.channels;
    ImageBuffer img(2 * bw, 2 * bh, nc);
    for (int y = 0; y < bh; ++y) {
        for (int x = 0; x < bw; ++x) {
            for (int c = 0; c < nc; ++c) {
                const double ll = b.ll.at(x, y, c), lh = b.lh.at(x, y, c);
                const double hl = b.hl.at(x, y, c), hh = b.hh.at(x, y, c);
                img.at(2 * x, 2 * y, c) = 0.5 * (ll + lh + hl + hh);
                img.at(2 * x + 1, 2 * y, c) = 0.5 * (ll + lh - hl - hh);
                img.at(2 * x, 2 * y + 1, c) = 0.5 * (ll - lh + hl - hh);
                img.at(2 * x + 1, 2 * y + 1, c) = 0.5 * (ll - lh - hl + hh);
            }
        }
    }
    return img;
}

/// Inverse transform cropped to the original size.
inline ImageBuffer idwt_level1(const DwtBands& b) {
    const ImageBuffer full = idwt_padded(b);
    if (full.width == b.orig_width && full.height == b.orig_height) return full;
    ImageBuffer out(b.orig_width, b.orig_height, full.channels);
    for (int y = 0; y < b.orig_height; ++y) {
        for (int x = 0; x < b.orig_width; ++x) {
            for (int c = 0; c < full.channels; ++c) out.at(x, y, c) = full.at(x, y, c);
        }
    }
    return out;
}

/// Adjoint of dwt_level1: band gradients to image gradients. Replicated
/// padding rows and columns fold back onto the last valid ones.
inline ImageBuffer dwt_adjoint(const DwtBands& grad) {
    const ImageBuffer full = idwt_padded(grad);
    ImageBuffer out(grad.orig_width, grad.orig_height, full.channels);
    for (int y = 0; y < full.height; ++y) {
        for (int x = 0; x < full.width; ++x) {
            for (int c = 0; c < full.channels; ++c) {
                out.at(std::min(x, grad.orig_width - 1), std::min(y, grad.orig_height - 1), c) +=
                    full.at(x, y, c);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

inline void check_same_shape(const ImageBuffer& a, const ImageBuffer& b, const char* what) {
    if (!a.same_shape(b) || a.data.empty()) {
        throw ConfigError(std::string(what) + ": image shapes differ or are empty");
    }
}

struct FrequencyLosses {
    double low = 0.0;
    double high = 0.0;
    ImageBuffer grad_low;   ///< d(low)/d(rendered)
    ImageBuffer grad_high;  ///< d(high)/d(rendered)
};

/// MSE on the LL band and the summed MSE of the LH, HL and HH bands, with
/// their gradients w.r.t. the rendered image.
inline FrequencyLosses frequency_losses_with_grad(const ImageBuffer& rendered,
                                                  const ImageBuffer& gt) {
    check_same_shape(rendered, gt, "frequency_losses");
    const DwtBands r = dwt_level1(rendered);
    const DwtBands g = dwt_level1(gt);
    const double n = static_cast<double>(r.ll.data.size());
    DwtBands low_grad{ImageBuffer(r.ll.width, r.ll.height, r.ll.channels), {}, {}, {},
                      r.orig_width, r.orig_height};
    low_grad.lh = low_grad.hl = low_grad.hh = low_grad.ll;
    DwtBands high_grad = low_grad;
    FrequencyLosses out;
    for (std::size_t k = 0; k < r.ll.data.size(); ++k) {
        const double dll = r.ll.data[k] - g.ll.data[k];
        const double dlh = r.lh.data[k] - g.lh.data[k];
        const double dhl = r.hl.data[k] - g.hl.data[k];
        const double dhh = r.hh.data[k] - g.hh.data[k];
        out.low += dll * dll;
        out.high += dlh * dlh + dhl * dhl + dhh * dhh;
        low_grad.ll.data[k] = 2.0 * dll / n;
        high_grad.lh.data[k] = 2.0 * dlh / n;
        high_grad.hl.data[k] = 2.0 * dhl / n;
        high_grad.hh.data[k] = 2.0 * dhh / n;
    }
    out.low /= n;
    out.high /= n;
    out.grad_low = dwt_adjoint(low_grad);
    out.grad_high = dwt_adjoint(high_grad);
    return out;
}

inline std::pair<double, double> frequency_losses(const ImageBuffer& rendered,
                                                  const ImageBuffer& gt) {
    const auto f = frequency_losses_with_grad(rendered, gt);
    return {f.low, f.high};
}

namespace detail {

inline std::array<double, 11> ssim_window() {
    std::array<double, 11> w{};
    double total = 0.0;
    for (int k = 0; k < 11; ++k) {
        const double d = k - 5;
        w[static_cast<std::size_t>(k)] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        total += w[static_cast<std::size_t>(k)];
    }
    for (auto& v : w) v /= total;
    return w;
}

/// Same-size separable Gaussian filter with zero padding on one channel
/// plane (w x h). Self-adjoint because the window is symmetric.
inline std::vector<double> blur(const std::vector<double>& src, int w, int h) {
    static const auto win = ssim_window();
    std::vector<double> tmp(src.size(), 0.0), out(src.size(), 0.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int k = -5; k <= 5; ++k) {
                const int xx = x + k;
                if (xx < 0 || xx >= w) continue;
                acc += win[static_cast<std::size_t>(k + 5)] * src[static_cast<std::size_t>(y * w + xx)];
            }
            tmp[static_cast<std::size_t>(y * w + x)] = acc;
        }
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int k = -5; k <= 5; ++k) {
                const int yy = y + k;
                if (yy < 0 || yy >= h) continue;
                acc += win[static_cast<std::size_t>(k + 5)] * tmp[static_cast<std::size_t>(yy * w + x)];
            }
            out[static_cast<std::size_t>(y * w + x)] = acc;
        }
    }
    return out;
}

} // namespace detail

struct SsimResult {
    double value = 1.0;
    ImageBuffer grad;  ///< d(mean SSIM)/d(x); empty when not requested
};

/// Mean SSIM over all pixels and channels: 11x11 Gaussian window with
/// sigma 1.5, C1 = 0.01^2, C2 = 0.03^2 on unit dynamic range.
inline SsimResult ssim(const ImageBuffer& x, const ImageBuffer& y, bool with_grad = false) {
    check_same_shape(x, y, "ssim");
    constexpr double c1 = 0.01 * 0.01;
    constexpr double c2 = 0.03 * 0.03;
    const int w = x.width, h = x.height, nc = x.channels;
    const auto np = x.pixel_count();
    const double n = static_cast<double>(x.data.size());
    SsimResult res;
    res.value = 0.0;
    if (with_grad) res.grad = ImageBuffer(w, h, nc);
    std::vector<double> px(np), py(np), pxx(np), pyy(np), pxy(np);
    for (int c = 0; c < nc; ++c) {
        for (std::size_t p = 0; p < np; ++p) {
            const double a = x.data[p * static_cast<std::size_t>(nc) + static_cast<std::size_t>(c)];
            const double b = y.data[p * static_cast<std::size_t>(nc) + static_cast<std::size_t>(c)];
            px[p] = a;
            py[p] = b;
            pxx[p] = a * a;
            pyy[p] = b * b;
            pxy[p] = a * b;
        }
        const auto mx = detail::blur(px, w, h), my = detail::blur(py, w, h);
        const auto exx = detail::blur(pxx, w, h), eyy = detail::blur(pyy, w, h);
        const auto exy = detail::blur(pxy, w, h);
        std::vector<double> d_mx(np), d_exx(np), d_exy(np);
        for (std::size_t p = 0; p < np; ++p) {
            const double sxx = exx[p] - mx[p] * mx[p];
            const double syy = eyy[p] - my[p] * my[p];
            const double sxy = exy[p] - mx[p] * my[p];
            const double a1 = 2.0 * mx[p] * my[p] + c1, a2 = 2.0 * sxy + c2;
            const double b1 = mx[p] * mx[p] + my[p] * my[p] + c1, b2 = sxx + syy + c2;
            const double s = a1 * a2 / (b1 * b2);
            res.value += s;
            if (!with_grad) continue;
            const double ds_a1 = a2 / (b1 * b2), ds_a2 = a1 / (b1 * b2);
            const double ds_b1 = -s / b1, ds_b2 = -s / b2;
            // sxx = exx - mx^2, sxy = exy - mx my, with exx and exy independent.
            d_mx[p] = (ds_a1 * 2.0 * my[p] - ds_a2 * 2.0 * my[p] + ds_b1 * 2.0 * mx[p] -
                       ds_b2 * 2.0 * mx[p]) / n;
            d_exx[p] = ds_b2 / n;
            d_exy[p] = 2.0 * ds_a2 / n;
        }
        if (!with_grad) continue;
        const auto g_mx = detail::blur(d_mx, w, h);
        const auto g_exx = detail::blur(d_exx, w, h);
        const auto g_exy = detail::blur(d_exy, w, h);
        for (std::size_t p = 0; p < np; ++p) {
            res.grad.data[p * static_cast<std::size_t>(nc) + static_cast<std::size_t>(c)] =
                g_mx[p] + 2.0 * px[p] * g_exx[p] + py[p] * g_exy[p];
        }
    }
    res.value /= n;
    return res;
}

struct ColorLoss {
    double value = 0.0;
    double l1 = 0.0;
    double ssim = 1.0;
    ImageBuffer grad;
};

/// (1 - lambda) * mean |r - g| + lambda * (1 - SSIM) / 2, with gradient.
inline ColorLoss color_loss_with_grad(const ImageBuffer& rendered, const ImageBuffer& gt,
                                      double lambda) {
    check_same_shape(rendered, gt, "color_loss");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("color_loss: lambda must be in [0, 1]");
    ColorLoss out;
    const double n = static_cast<double>(rendered.data.size());
    out.grad = ImageBuffer(rendered.width, rendered.height, rendered.channels);
    for (std::size_t k = 0; k < rendered.data.size(); ++k) {
        const double r = rendered.data[k] - gt.data[k];
        out.l1 += std::abs(r);
        const double sign = r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
        out.grad.data[k] = (1.0 - lambda) * sign / n;
    }
    out.l1 /= n;
    const bool need_ssim = lambda > 0.0;
    const SsimResult s = need_ssim ? ssim(rendered, gt, true) : SsimResult{};
    out.ssim = need_ssim ? s.value : 1.0;
    out.value = (1.0 - lambda) * out.l1 + lambda * (1.0 - out.ssim) / 2.0;
    if (need_ssim) {
        for (std::size_t k = 0; k < out.grad.data.size(); ++k) {
            out.grad.data[k] -= lambda * 0.5 * s.grad.data[k];
        }
    }
    return out;
}

inline double color_loss(const ImageBuffer& rendered, const ImageBuffer& gt, double lambda) {
    return color_loss_with_grad(rendered, gt, lambda).value;
}

// ---------------------------------------------------------------------------
// Gradient surgery
// ---------------------------------------------------------------------------

enum class CombineMode { Projection, Naive, Mask };

inline CombineMode parse_combine_mode(const std::string& s) {
    if (s == "projection") return CombineMode::Projection;
    if (s == "naive") return CombineMode::Naive;
    if (s == "mask") return CombineMode::Mask;
    throw ConfigError("unknown mode '" + s + "' (expected projection, naive or mask)");
}

inline const char* to_string(CombineMode m) {
    switch (m) {
    case CombineMode::Projection: return "projection";
    case CombineMode::Naive: return "naive";
    case CombineMode::Mask: return "mask";
    }
    return "projection";
}

struct LossWeights {
    double lambda = 0.2;       ///< D-SSIM share of the color loss
    double lambda_low = 0.2;
    double lambda_high = 0.4;
    CombineMode mode = CombineMode::Projection;

    void validate() const {
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda-dssim must be in [0, 1]");
        if (!(lambda_low >= 0.0)) throw ConfigError("lambda-low must be non-negative");
        if (!(lambda_high >= 0.0)) throw ConfigError("lambda-high must be non-negative");
    }
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s;
}

/// Resolves a conflict (negative inner product) between the low- and
/// high-frequency gradients of one Gaussian in place. Surfels keep g_low and
/// lose the component of g_high along it; 3D Gaussians keep g_high. Returns
/// true when the pair was conflicting.
inline bool project_conflicting_gradients(std::span<double> g_low, std::span<double> g_high,
                                          GaussianType type) {
    if (g_low.size() != g_high.size()) {
        throw IntegrityError("project_conflicting_gradients: length mismatch");
    }
    const double d = dot(g_low, g_high);
    if (!(d < 0.0)) return false;
    if (type == GaussianType::Surfel2D) {
        const double nn = dot(g_low, g_low);
        if (nn == 0.0) return true;
        const double k = d / nn;
        for (std::size_t i = 0; i < g_high.size(); ++i) g_high[i] -= k * g_low[i];
    } else {
        const double nn = dot(g_high, g_high);
        if (nn == 0.0) return true;
        const double k = d / nn;
        for (std::size_t i = 0; i < g_low.size(); ++i) g_low[i] -= k * g_high[i];
    }
    return true;
}

inline std::pair<std::vector<double>, std::vector<double>>
project_conflicting_gradients(std::vector<double> g_low, std::vector<double> g_high,
                              GaussianType type) {
    project_conflicting_gradients(std::span<double>(g_low), std::span<double>(g_high), type);
    return {std::move(g_low), std::move(g_high)};
}

struct CombinedGradients {
    GradientSet total;
    std::size_t n_conflicted = 0;
    std::size_t n_total = 0;
};

/// Per-Gaussian update g_color + g_low + g_high after conflict handling.
inline CombinedGradients combine_gradients(const GradientBundle& bundle,
                                           std::span<const std::uint8_t> types, CombineMode mode) {
    if (!bundle.color.aligned_with(bundle.low) || !bundle.color.aligned_with(bundle.high) ||
        types.size() != bundle.color.size()) {
        throw IntegrityError("combine_gradients: gradient sets and types are misaligned");
    }
    CombinedGradients out{GradientSet(bundle.color.size(), bundle.color.sh_degree()), 0,
                          bundle.color.size()};
    const auto stride = static_cast<std::size_t>(bundle.color.stride());
    std::vector<double> low(stride), high(stride);
    for (std::size_t i = 0; i < bundle.color.size(); ++i) {
        const auto c = bundle.color.row(i), l = bundle.low.row(i), h = bundle.high.row(i);
        std::copy(l.begin(), l.end(), low.begin());
        std::copy(h.begin(), h.end(), high.begin());
        const auto type = static_cast<GaussianType>(types[i]);
        const bool conflicted = dot(low, high) < 0.0;
        if (conflicted) ++out.n_conflicted;
        if (conflicted && mode == CombineMode::Projection) {
            project_conflicting_gradients(std::span<double>(low), std::span<double>(high), type);
        } else if (conflicted && mode == CombineMode::Mask) {
            auto& dropped = type == GaussianType::Surfel2D ? high : low;
            std::fill(dropped.begin(), dropped.end(), 0.0);
        }
        auto t = out.total.row(i);
        for (std::size_t k = 0; k < stride; ++k) t[k] = c[k] + low[k] + high[k];
    }
    return out;
}

} // namespace eggs
