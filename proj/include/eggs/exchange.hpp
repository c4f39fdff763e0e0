// Copyright Contributors to the eggs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "eggs/core.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace eggs {

/// Thresholds and schedule for type exchange between 2D and 3D primitives.
struct ExchangeConfig {
    double theta_e = 2.05;   ///< erank threshold shared by both directions
    double theta_z = 1.05;   ///< gate center for the latent z scale of surfels
    double t_z = 0.001;      ///< gate temperature
    double lambda_z = 1.0;   ///< opacity coupling of the gated z scale
    int interval = 500;
    int start_iter = 500;
    int end_iter = 30000;

    void validate() const {
        if (!(theta_e > 1.0 && theta_e < 3.0)) {
            throw ConfigError("theta_e must lie in (1, 3), got " + std::to_string(theta_e));
        }
        if (!(t_z > 0.0)) throw ConfigError("t_z must be positive");
        if (!(lambda_z >= 0.0)) throw ConfigError("lambda_z must be non-negative");
        if (!std::isfinite(theta_z)) throw ConfigError("theta_z must be finite");
        if (interval < 1) throw ConfigError("exchange interval must be >= 1");
        if (start_iter > end_iter) throw ConfigError("exchange start_iter > end_iter");
    }

    bool scheduled(int iter) const {
        return iter >= start_iter && iter <= end_iter && iter % interval == 0;
    }
};

// ---------------------------------------------------------------------------
// Effective rank
// ---------------------------------------------------------------------------

/// exp(entropy) of the normalized squared scales; lies in [1, 3].
inline double effective_rank_of_scale(const Vec3& scale) {
    if (!scale.allFinite()) throw InvalidParameter("effective_rank: non-finite scale");
    const Vec3 q = scale.cwiseAbs2();
    const double total = q.sum();
    if (!(total > 0.0)) throw DegenerateScale("effective_rank: all scales are zero");
    double entropy = 0.0;
    for (int i = 0; i < 3; ++i) {
        const double p = q[i] / total;
        if (p > 0.0) entropy -= p * std::log(p);
    }
    return std::exp(entropy);
}

inline double effective_rank(const Vec3& log_scale) {
    if (!log_scale.allFinite()) throw InvalidParameter("effective_rank: non-finite log scale");
    // Normalizing in the log domain keeps p scale-free and avoids underflow.
    const double m = log_scale.maxCoeff();
    return effective_rank_of_scale((log_scale.array() - m).exp().matrix());
}

// ---------------------------------------------------------------------------
// 3D -> 2D reparameterization
// ---------------------------------------------------------------------------

enum class AxisPermutation { Identity, X, Y };

/// P_x moves s_x to the z slot, P_y moves s_y there. Both are proper rotations.
inline Mat3 permutation_matrix(AxisPermutation p) {
    Mat3 m;
    switch (p) {
    case AxisPermutation::Identity:
        return Mat3::Identity();
    case AxisPermutation::X:
        m << 0, 1, 0, 0, 0, 1, 1, 0, 0;
        return m;
    case AxisPermutation::Y:
        m << 0, 0, 1, 1, 0, 0, 0, 1, 0;
        return m;
    }
    return Mat3::Identity();
}

/// Permutation that brings the least significant axis to z. Ties prefer the
/// identity, then P_x.
inline AxisPermutation choose_permutation(const Vec3& scale) {
    if (scale[2] <= scale[0] && scale[2] <= scale[1]) return AxisPermutation::Identity;
    if (scale[0] <= scale[1]) return AxisPermutation::X;
    return AxisPermutation::Y;
}

/// Covariance-preserving conversion of a 3D Gaussian into a surfel:
/// S* = P S P^T and R* = R P^T, with the smallest scale on z.
inline Gaussian reparameterize_3d_to_2d(const Gaussian& g, AxisPermutation* chosen = nullptr) {
    if (g.type != GaussianType::Volume3D) {
        throw ConfigError("reparameterize_3d_to_2d expects a 3D Gaussian");
    }
    const AxisPermutation perm = choose_permutation(g.scale());
    if (chosen != nullptr) *chosen = perm;
    const Mat3 p = permutation_matrix(perm);
    Gaussian out = g;
    out.log_scale = p * g.log_scale;
    const Mat3 r_star = quat_to_rotation(normalize_quaternion(g.rotation)) * p.transpose();
    out.rotation = rotation_to_quat(r_star);
    out.type = GaussianType::Surfel2D;
    return out;
}

// ---------------------------------------------------------------------------
// Opacity-coupled z-scale modulation for surfels
// ---------------------------------------------------------------------------

/// Gated z scale: sigmoid((s_z - theta_z) / t_z) * s_z.
template <class T>
T gated_z_scale(const T& s_z, double theta_z, double t_z) {
    return logistic((s_z - T(theta_z)) / T(t_z)) * s_z;
}

/// alpha* = alpha * exp(-lambda_z * gated s_z).
template <class T>
T modulate_opacity(const T& alpha, const T& s_z, double theta_z, double t_z, double lambda_z) {
    using std::exp;
    return alpha * exp(T(-lambda_z) * gated_z_scale(s_z, theta_z, t_z));
}

inline double modulate_opacity(const Gaussian& g, const ExchangeConfig& cfg) {
    if (g.type != GaussianType::Surfel2D) {
        throw ConfigError("modulate_opacity expects a 2D Gaussian");
    }
    return modulate_opacity(g.opacity(), std::exp(g.log_scale[2]), cfg.theta_z, cfg.t_z,
                            cfg.lambda_z);
}

// ---------------------------------------------------------------------------
// Exchange pass
// ---------------------------------------------------------------------------

enum class ExchangeDirection { To2D, To3D };

struct TypeChange {
    std::size_t index;
    ExchangeDirection direction;
    AxisPermutation permutation;
};

struct ExchangeReport {
    static constexpr int kHistogramBins = 20;

    std::size_t conv_3to2 = 0;
    std::size_t conv_2to3 = 0;
    std::size_t n_2d = 0;
    std::size_t n_3d = 0;
    std::array<std::size_t, kHistogramBins> erank_histogram{};  ///< uniform bins over [1, 3]
    std::vector<TypeChange> changes;
};

/// Effective rank of every Gaussian (stored scales, including latent s_z).
inline std::vector<double> erank_values(const GaussianSet& scene) {
    std::vector<double> out(scene.size());
    for (std::size_t i = 0; i < scene.size(); ++i) out[i] = effective_rank(scene.log_scale[i]);
    return out;
}

/// Linear-interpolated percentile q in [0, 100] of values (copied).
inline double percentile(std::vector<double> values, double q) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] * (1.0 - frac) + values[hi] * frac;
}

/// Converts flat 3D Gaussians to surfels and volumetric surfels to 3D.
inline ExchangeReport exchange_pass(GaussianSet& scene, const ExchangeConfig& cfg) {
    cfg.validate();
    scene.check_consistency();
    ExchangeReport report;
    const auto ranks = erank_values(scene);
    for (std::size_t i = 0; i < scene.size(); ++i) {
        const double er = ranks[i];
        int bin = static_cast<int>((er - 1.0) / 2.0 * ExchangeReport::kHistogramBins);
        bin = std::clamp(bin, 0, ExchangeReport::kHistogramBins - 1);
        ++report.erank_histogram[static_cast<std::size_t>(bin)];

        if (scene.type_of(i) == GaussianType::Volume3D && er < cfg.theta_e) {
            AxisPermutation perm{};
            scene.set(i, reparameterize_3d_to_2d(scene.get(i), &perm));
            report.changes.push_back({i, ExchangeDirection::To2D, perm});
            ++report.conv_3to2;
        } else if (scene.type_of(i) == GaussianType::Surfel2D && er > cfg.theta_e) {
            scene.type[i] = static_cast<std::uint8_t>(GaussianType::Volume3D);
            report.changes.push_back({i, ExchangeDirection::To3D, AxisPermutation::Identity});
            ++report.conv_2to3;
        }
    }
    report.n_2d = scene.count_of(GaussianType::Surfel2D);
    report.n_3d = scene.count_of(GaussianType::Volume3D);
    return report;
}

} // namespace eggs
