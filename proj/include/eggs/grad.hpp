// Copyright Contributors to the eggs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "eggs/core.hpp"
#include "eggs/parallel.hpp"
#include "eggs/raster.hpp"

#include <ceres/jet.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace eggs {

/// Per-Gaussian gradients in the flat parameter layout of `param`.
class GradientSet {
public:
    GradientSet() = default;
    GradientSet(std::size_t n, int sh_degree)
        : n_(n), stride_(param::count(sh_degree)), sh_degree_(sh_degree),
          data_(n * static_cast<std::size_t>(stride_), 0.0) {}

    std::size_t size() const { return n_; }
    int stride() const { return stride_; }
    int sh_degree() const { return sh_degree_; }

    std::span<double> row(std::size_t i) {
        return {data_.data() + i * static_cast<std::size_t>(stride_),
                static_cast<std::size_t>(stride_)};
    }
    std::span<const double> row(std::size_t i) const {
        return {data_.data() + i * static_cast<std::size_t>(stride_),
                static_cast<std::size_t>(stride_)};
    }
    double& at(std::size_t i, int k) { return row(i)[static_cast<std::size_t>(k)]; }
    double at(std::size_t i, int k) const { return row(i)[static_cast<std::size_t>(k)]; }

    Vec3 center(std::size_t i) const {
        return {at(i, param::kCenter), at(i, param::kCenter + 1), at(i, param::kCenter + 2)};
    }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool aligned_with(const GradientSet& o) const {
        return n_ == o.n_ && stride_ == o.stride_;
    }
    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    GradientSet& operator+=(const GradientSet& o) {
        if (!aligned_with(o)) throw IntegrityError("GradientSet: adding misaligned sets");
        for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += o.data_[k];
        return *this;
    }

private:
    std::size_t n_ = 0;
    int stride_ = param::count(0);
    int sh_degree_ = 0;
    std::vector<double> data_;
};

/// Gradients of the color, low-frequency and high-frequency losses.
struct GradientBundle {
    GradientSet color;
    GradientSet low;
    GradientSet high;
};

namespace detail {

/// Upstream gradient accumulated per splat: geometry outputs and color.
struct SplatGrad {
    std::array<double, kGeometryOutputs> geo{};
    std::array<double, 3> color{};

    void add(const SplatGrad& o) {
        for (std::size_t k = 0; k < geo.size(); ++k) geo[k] += o.geo[k];
        for (std::size_t k = 0; k < 3; ++k) color[k] += o.color[k];
    }
};

constexpr int kOutMean = 0;
constexpr int kOutConic = 2;
constexpr int kOutM = 5;
constexpr int kOutAlpha = 14;

/// Chains d(loss)/d(distance) into the splat's geometry outputs.
inline void distance_backward(const ProjectedSplat& s, BlendBranch branch, const Vec2& pixel,
                              double dd, const RasterConfig& cfg, SplatGrad& g) {
    const Vec2 delta = pixel - s.screen_center;
    switch (branch) {
    case BlendBranch::Volume: {
        const Vec3& q = s.conic;
        const double qx = q[0] * delta[0] + q[1] * delta[1];
        const double qy = q[1] * delta[0] + q[2] * delta[1];
        g.geo[kOutMean] += dd * -2.0 * qx;
        g.geo[kOutMean + 1] += dd * -2.0 * qy;
        g.geo[kOutConic] += dd * delta[0] * delta[0];
        g.geo[kOutConic + 1] += dd * 2.0 * delta[0] * delta[1];
        g.geo[kOutConic + 2] += dd * delta[1] * delta[1];
        break;
    }
    case BlendBranch::SurfelLowpass: {
        const double inv_r2 = 1.0 / (cfg.lowpass_radius * cfg.lowpass_radius);
        g.geo[kOutMean] += dd * -2.0 * delta[0] * inv_r2;
        g.geo[kOutMean + 1] += dd * -2.0 * delta[1] * inv_r2;
        break;
    }
    case BlendBranch::SurfelRay: {
        const auto [a, b] = plane_params(s, pixel);
        const double den = a[0] * b[1] - a[1] * b[0];
        const double u = (a[1] * b[2] - a[2] * b[1]) / den;
        const double v = (a[2] * b[0] - a[0] * b[2]) / den;
        const std::array<double, 3> du_da = {-u * b[1] / den, (b[2] + u * b[0]) / den,
                                             -b[1] / den};
        const std::array<double, 3> du_db = {u * a[1] / den, (-a[2] - u * a[0]) / den,
                                             a[1] / den};
        const std::array<double, 3> dv_da = {(-b[2] - v * b[1]) / den, v * b[0] / den,
                                             b[0] / den};
        const std::array<double, 3> dv_db = {(a[2] + v * a[1]) / den, -v * a[0] / den,
                                             -a[0] / den};
        for (int j = 0; j < 3; ++j) {
            const auto jj = static_cast<std::size_t>(j);
            const double ga = dd * (2.0 * u * du_da[jj] + 2.0 * v * dv_da[jj]);
            const double gb = dd * (2.0 * u * du_db[jj] + 2.0 * v * dv_db[jj]);
            // a = -M.row(0) + x M.row(2), b = -M.row(1) + y M.row(2)
            g.geo[static_cast<std::size_t>(kOutM + j)] += -ga;
            g.geo[static_cast<std::size_t>(kOutM + 3 + j)] += -gb;
            g.geo[static_cast<std::size_t>(kOutM + 6 + j)] += pixel[0] * ga + pixel[1] * gb;
        }
        break;
    }
    }
}

/// J^T g for the geometry of Gaussian i, added into grad row.
inline void geometry_backward(const GaussianSet& scene, std::size_t i, const CameraView& cam,
                              const RasterConfig& cfg,
                              std::span<const std::array<double, kGeometryOutputs>> upstream,
                              std::span<std::span<double>> rows) {
    using Jet = ceres::Jet<double, param::kGeometryCount>;
    const Vec3& c = scene.center[i];
    const Vec3& ls = scene.log_scale[i];
    const Vec4& q = scene.rotation[i];
    auto var = [](double v, int k) { return Jet(v, k); };
    std::array<Jet, 3> jc = {var(c[0], 0), var(c[1], 1), var(c[2], 2)};
    std::array<Jet, 3> jls = {var(ls[0], 3), var(ls[1], 4), var(ls[2], 5)};
    std::array<Jet, 4> jq = {var(q[0], 6), var(q[1], 7), var(q[2], 8), var(q[3], 9)};
    const Jet jo = var(scene.opacity_logit[i], 10);
    SplatGeometry<Jet> geo{};
    if (!project_geometry<Jet>(jc, jls, jq, jo, scene.type_of(i), cam, cfg, geo)) return;
    std::array<const Jet*, kGeometryOutputs> outs{};
    outs[0] = &geo.mean[0];
    outs[1] = &geo.mean[1];
    for (int k = 0; k < 3; ++k) outs[static_cast<std::size_t>(kOutConic + k)] = &geo.conic[static_cast<std::size_t>(k)];
    for (int k = 0; k < 9; ++k) outs[static_cast<std::size_t>(kOutM + k)] = &geo.m[static_cast<std::size_t>(k)];
    outs[kOutAlpha] = &geo.alpha;
    for (std::size_t u = 0; u < upstream.size(); ++u) {
        for (std::size_t o = 0; o < outs.size(); ++o) {
            const double w = upstream[u][o];
            if (w == 0.0) continue;
            for (int p = 0; p < param::kGeometryCount; ++p) {
                rows[u][static_cast<std::size_t>(p)] += w * outs[o]->v[p];
            }
        }
    }
}

/// Chains d(loss)/d(rgb) of Gaussian i into its SH coefficients and center.
inline void color_backward(const GaussianSet& scene, std::size_t i, const CameraView& cam,
                           std::span<const std::array<double, 3>> upstream,
                           std::span<std::span<double>> rows) {
    using Jet = ceres::Jet<double, 3>;
    const int degree = scene.sh_degree();
    const auto coeffs = scene.sh_of(i);
    const Vec3 cam_center = cam.center_world();
    std::array<Jet, 3> dir;
    for (int k = 0; k < 3; ++k) {
        dir[static_cast<std::size_t>(k)] = Jet(scene.center[i][k], k) - Jet(cam_center[k]);
    }
    const Jet norm = sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
    for (auto& d : dir) d = d / norm;
    const auto rgb = eval_sh<Jet>(coeffs, degree, dir[0], dir[1], dir[2]);

    std::array<double, 16> basis{};
    sh_basis<double>(degree, dir[0].a, dir[1].a, dir[2].a, std::span<double>(basis));
    // Unclamped channel values decide whether the clamp at zero was active.
    std::array<double, 3> raw{0.5, 0.5, 0.5};
    const int k_count = sh_basis_count(degree);
    for (int k = 0; k < k_count; ++k) {
        for (int ch = 0; ch < 3; ++ch) {
            raw[static_cast<std::size_t>(ch)] +=
                basis[static_cast<std::size_t>(k)] * coeffs[static_cast<std::size_t>(3 * k + ch)];
        }
    }
    for (std::size_t u = 0; u < upstream.size(); ++u) {
        for (int ch = 0; ch < 3; ++ch) {
            const double g = upstream[u][static_cast<std::size_t>(ch)];
            if (g == 0.0 || raw[static_cast<std::size_t>(ch)] < 0.0) continue;
            for (int k = 0; k < k_count; ++k) {
                rows[u][static_cast<std::size_t>(param::kSh + 3 * k + ch)] +=
                    g * basis[static_cast<std::size_t>(k)];
            }
            for (int p = 0; p < 3; ++p) {
                rows[u][static_cast<std::size_t>(param::kCenter + p)] +=
                    g * rgb[static_cast<std::size_t>(ch)].v[p];
            }
        }
    }
}

} // namespace detail

/// Gradients of several image losses at once. pixel_grads[k] is
/// d(loss_k)/d(color) as an H x W x 3 image. The blend log of `output` is
/// replayed back to front; transmittance is recovered by division, which
/// the alpha-tilde clamp keeps finite. When screen_mean_grad is given it
/// receives, per Gaussian, d(sum of losses)/d(projected center) in pixels.
inline std::vector<GradientSet> backward(const GaussianSet& scene, const CameraView& cam,
                                         const RenderOutput& output,
                                         std::span<const ImageBuffer> pixel_grads,
                                         const RasterConfig& cfg = {},
                                         std::vector<Vec2>* screen_mean_grad = nullptr) {
    scene.check_consistency();
    if (output.scene_size != scene.size() || output.sh_degree != scene.sh_degree()) {
        throw IntegrityError("backward: render output was produced for a different scene");
    }
    for (const auto& s : output.splats) {
        if (s.gaussian_index >= scene.size()) {
            throw IntegrityError("backward: blend log references a missing Gaussian");
        }
    }
    for (const auto& g : pixel_grads) {
        if (g.width != output.color.width || g.height != output.color.height || g.channels != 3) {
            throw IntegrityError("backward: pixel gradient shape does not match the render");
        }
        if (!g.all_finite()) throw NumericError("backward: non-finite pixel gradient");
    }
    const std::size_t n_up = pixel_grads.size();
    std::vector<GradientSet> result(n_up, GradientSet(scene.size(), scene.sh_degree()));
    if (n_up == 0) return result;

    // Per-tile accumulation indexed by the tile's local splat list, then a
    // reduction in tile order: the result does not depend on scheduling.
    std::vector<std::vector<detail::SplatGrad>> tile_acc(output.tiles.size());
    parallel_for(output.tiles.size(), cfg.threads, [&](std::size_t ti) {
        const TileLog& t = output.tiles[ti];
        auto& acc = tile_acc[ti];
        acc.assign(t.splats.size() * n_up, detail::SplatGrad{});
        const int tw = t.x1 - t.x0;
        for (int py = t.y0; py < t.y1; ++py) {
            for (int px = t.x0; px < t.x1; ++px) {
                const auto local = static_cast<std::size_t>((py - t.y0) * tw + (px - t.x0));
                const std::uint32_t begin = t.pixel_offsets[local];
                const std::uint32_t end = t.pixel_offsets[local + 1];
                if (begin == end) continue;
                const Vec2 pixel(px + 0.5, py + 0.5);
                double trans = output.transmittance.at(px, py);
                Vec3 behind = trans * cfg.background;
                for (std::uint32_t r = end; r-- > begin;) {
                    const BlendRecord& rec = t.records[r];
                    const ProjectedSplat& s = output.splats[t.splats[rec.local]];
                    const double a = rec.alpha;
                    const double one_minus = 1.0 - a;
                    const double t_i = trans / one_minus;
                    const Vec3 dc_dalpha = s.color * t_i - behind / one_minus;
                    for (std::size_t k = 0; k < n_up; ++k) {
                        const ImageBuffer& g = pixel_grads[k];
                        const Vec3 up(g.at(px, py, 0), g.at(px, py, 1), g.at(px, py, 2));
                        detail::SplatGrad& sg = acc[rec.local * n_up + k];
                        for (int ch = 0; ch < 3; ++ch) {
                            sg.color[static_cast<std::size_t>(ch)] += up[ch] * a * t_i;
                        }
                        if (rec.clamped) continue;
                        const double da = up.dot(dc_dalpha);
                        // a = opacity * exp(-d / 2)
                        sg.geo[detail::kOutAlpha] += da * a / s.opacity;
                        distance_backward(s, rec.branch, pixel, -0.5 * a * da, cfg, sg);
                    }
                    behind += s.color * (a * t_i);
                    trans = t_i;
                }
            }
        }
    });

    std::vector<detail::SplatGrad> splat_acc(output.splats.size() * n_up);
    for (std::size_t ti = 0; ti < output.tiles.size(); ++ti) {
        const TileLog& t = output.tiles[ti];
        for (std::size_t l = 0; l < t.splats.size(); ++l) {
            for (std::size_t k = 0; k < n_up; ++k) {
                splat_acc[t.splats[l] * n_up + k].add(tile_acc[ti][l * n_up + k]);
            }
        }
    }

    if (screen_mean_grad != nullptr) {
        screen_mean_grad->assign(scene.size(), Vec2::Zero());
        for (std::size_t si = 0; si < output.splats.size(); ++si) {
            Vec2& m = (*screen_mean_grad)[output.splats[si].gaussian_index];
            for (std::size_t k = 0; k < n_up; ++k) {
                m += Vec2(splat_acc[si * n_up + k].geo[detail::kOutMean],
                          splat_acc[si * n_up + k].geo[detail::kOutMean + 1]);
            }
        }
    }

    parallel_for(output.splats.size(), cfg.threads, [&](std::size_t si) {
        const std::size_t gi = output.splats[si].gaussian_index;
        std::vector<std::array<double, kGeometryOutputs>> geo_up(n_up);
        std::vector<std::array<double, 3>> color_up(n_up);
        std::vector<std::span<double>> rows(n_up);
        for (std::size_t k = 0; k < n_up; ++k) {
            geo_up[k] = splat_acc[si * n_up + k].geo;
            color_up[k] = splat_acc[si * n_up + k].color;
            rows[k] = result[k].row(gi);
        }
        detail::geometry_backward(scene, gi, cam, cfg, geo_up, rows);
        detail::color_backward(scene, gi, cam, color_up, rows);
    });

    for (const auto& r : result) {
        if (!r.all_finite()) throw NumericError("backward: non-finite parameter gradient");
    }
    return result;
}

inline GradientSet backward(const GaussianSet& scene, const CameraView& cam,
                            const RenderOutput& output, const ImageBuffer& pixel_grad,
                            const RasterConfig& cfg = {}) {
    return std::move(backward(scene, cam, output, std::span<const ImageBuffer>(&pixel_grad, 1),
                              cfg)[0]);
}

/// Removes the component of each quaternion gradient along its quaternion.
inline void project_rotation_gradients(const GaussianSet& scene, GradientSet& grads) {
    for (std::size_t i = 0; i < scene.size(); ++i) {
        auto row = grads.row(i);
        const Vec4 q = scene.rotation[i].normalized();
        Vec4 g(row[param::kRotation], row[param::kRotation + 1], row[param::kRotation + 2],
               row[param::kRotation + 3]);
        g -= q * q.dot(g);
        for (int k = 0; k < 4; ++k) row[static_cast<std::size_t>(param::kRotation + k)] = g[k];
    }
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// Mutable access to parameter `offset` (flat layout) of Gaussian i.
inline double& param_ref(GaussianSet& scene, std::size_t i, int offset) {
    if (offset < param::kLogScale) return scene.center[i][offset - param::kCenter];
    if (offset < param::kRotation) return scene.log_scale[i][offset - param::kLogScale];
    if (offset < param::kOpacity) return scene.rotation[i][offset - param::kRotation];
    if (offset == param::kOpacity) return scene.opacity_logit[i];
    return scene.sh_of(i)[static_cast<std::size_t>(offset - param::kSh)];
}

struct ParamRef {
    std::size_t gaussian = 0;
    int offset = 0;
};

/// Every parameter of every Gaussian.
inline std::vector<ParamRef> all_params(const GaussianSet& scene) {
    std::vector<ParamRef> out;
    for (std::size_t i = 0; i < scene.size(); ++i) {
        for (int k = 0; k < scene.param_count(); ++k) out.push_back({i, k});
    }
    return out;
}

/// Parameters with flat offsets in [first, last) for every Gaussian.
inline std::vector<ParamRef> params_in_range(const GaussianSet& scene, int first, int last) {
    std::vector<ParamRef> out;
    for (std::size_t i = 0; i < scene.size(); ++i) {
        for (int k = first; k < last; ++k) out.push_back({i, k});
    }
    return out;
}

/// Scalar image functional together with its gradient w.r.t. the image.
struct ImageLoss {
    std::function<double(const ImageBuffer&)> value;
    std::function<ImageBuffer(const ImageBuffer&)> gradient;
};

struct FiniteDiffEntry {
    ParamRef ref;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
    bool structure_changed = false;  ///< blend order or contributing set differs at +-eps
};

struct FiniteDiffReport {
    double max_rel_error = 0.0;  ///< over entries without structure changes
    std::vector<FiniteDiffEntry> entries;

    std::size_t compared() const {
        return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(),
                                                      [](const auto& e) { return !e.structure_changed; }));
    }
    std::size_t within(double tol) const {
        return static_cast<std::size_t>(
            std::count_if(entries.begin(), entries.end(), [tol](const auto& e) {
                return !e.structure_changed && e.rel_error <= tol;
            }));
    }
};

namespace detail {

/// Per-pixel sequence of (gaussian, branch, clamped); equal signatures mean
/// the composite is one smooth function of the parameters.
inline std::vector<std::uint64_t> blend_signature(const RenderOutput& out) {
    std::vector<std::uint64_t> sig;
    for (const auto& t : out.tiles) {
        for (std::size_t p = 0; p + 1 < t.pixel_offsets.size(); ++p) {
            sig.push_back(0xffffffffffffffffULL);
            for (auto r = t.pixel_offsets[p]; r < t.pixel_offsets[p + 1]; ++r) {
                const auto& rec = t.records[r];
                const std::uint64_t gi = out.splats[t.splats[rec.local]].gaussian_index;
                sig.push_back(gi << 8 | static_cast<std::uint64_t>(rec.branch) << 1 |
                              static_cast<std::uint64_t>(rec.clamped));
            }
        }
    }
    return sig;
}

} // namespace detail

/// Compares analytic gradients of `loss` against central differences
/// (f(theta + eps) - f(theta - eps)) / (2 eps) on the selected parameters.
/// Relative error is |analytic - numeric| / max(|numeric|, 1e-8).
inline FiniteDiffReport finite_diff_check(const GaussianSet& scene, const CameraView& cam,
                                          const ImageLoss& loss, double eps,
                                          std::span<const ParamRef> subset,
                                          const RasterConfig& cfg = {}) {
    if (!(eps >= 1e-6 && eps <= 1e-2)) {
        throw ConfigError("finite_diff_check: eps must lie in [1e-6, 1e-2]");
    }
    const RenderOutput base = render(scene, cam, cfg);
    const double f0 = loss.value(base.color);
    if (!std::isfinite(f0)) throw NumericError("finite_diff_check: loss is not finite");
    const GradientSet analytic = backward(scene, cam, base, loss.gradient(base.color), cfg);
    const auto base_sig = detail::blend_signature(base);

    FiniteDiffReport report;
    GaussianSet work = scene;
    for (const ParamRef& ref : subset) {
        if (ref.gaussian >= scene.size() || ref.offset < 0 || ref.offset >= scene.param_count()) {
            throw ConfigError("finite_diff_check: parameter selector out of range");
        }
        double& p = param_ref(work, ref.gaussian, ref.offset);
        const double orig = p;
        p = orig + eps;
        const RenderOutput plus = render(work, cam, cfg);
        p = orig - eps;
        const RenderOutput minus = render(work, cam, cfg);
        p = orig;
        const double fp = loss.value(plus.color);
        const double fm = loss.value(minus.color);
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("finite_diff_check: loss is not finite under perturbation");
        }
        FiniteDiffEntry e;
        e.ref = ref;
        e.analytic = analytic.at(ref.gaussian, ref.offset);
        e.numeric = (fp - fm) / (2.0 * eps);
        e.rel_error = std::abs(e.analytic - e.numeric) / std::max(std::abs(e.numeric), 1e-8);
        e.structure_changed = detail::blend_signature(plus) != base_sig ||
                              detail::blend_signature(minus) != base_sig;
        if (!e.structure_changed) report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
        report.entries.push_back(e);
    }
    return report;
}

} // namespace eggs
