// Copyright Contributors to the eggs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "eggs/core.hpp"
#include "eggs/exchange.hpp"
#include "eggs/parallel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

namespace eggs {

/// Rasterizer constants. The defaults are used by every golden test.
struct RasterConfig {
    int tile_size = 16;
    double dilation = 0.3;           ///< px^2 added to the projected 3D covariance diagonal
    double lowpass_radius = 0.5;     ///< px, screen-space filter for surfels
    double cutoff_sq = 9.0;          ///< Mahalanobis support of a splat (3 sigma)
    double alpha_min = 1.0 / 255.0;
    double alpha_max = 0.99;
    double transmittance_min = 1e-4;
    double degenerate_tol = 1e-9;    ///< |h_u1 h_v2 - h_u2 h_v1| below this skips a surfel
    Vec3 background = Vec3::Zero();
    double theta_z = 1.05;
    double t_z = 0.001;
    double lambda_z = 1.0;
    unsigned threads = 0;

    void set_modulation(const ExchangeConfig& ex) {
        theta_z = ex.theta_z;
        t_z = ex.t_z;
        lambda_z = ex.lambda_z;
    }
};

// ---------------------------------------------------------------------------
// Differentiable per-Gaussian geometry
// ---------------------------------------------------------------------------

/// Screen-space quantities of one Gaussian that the compositor consumes.
/// Templated so the backward pass can take its Jacobian with dual numbers.
template <class T>
struct SplatGeometry {
    T depth;                  ///< view-space z of the center
    std::array<T, 2> mean;    ///< projected center, px
    std::array<T, 3> conic;   ///< 3D only: (a, b, c) of the inverse 2x2 covariance
    std::array<T, 9> m;       ///< 2D only: row-major M, homogeneous pixel = M (u, v, 1)
    T alpha;                  ///< effective opacity (modulated for surfels)
};

/// Number of geometry outputs differentiated by the backward pass:
/// mean (2), conic (3), M (9), alpha (1).
constexpr int kGeometryOutputs = 15;

/// Projects one Gaussian. Returns false when it is culled (behind the near
/// plane or singular after dilation).
template <class T>
bool project_geometry(const std::array<T, 3>& center, const std::array<T, 3>& log_scale,
                      const std::array<T, 4>& quat, const T& opacity_logit, GaussianType type,
                      const CameraView& cam, const RasterConfig& cfg, SplatGeometry<T>& out) {
    using std::exp;
    const Mat3 rw = cam.rotation();
    const Vec3 tw = cam.translation();
    std::array<T, 3> pc;
    for (int r = 0; r < 3; ++r) {
        pc[r] = T(tw[r]) + T(rw(r, 0)) * center[0] + T(rw(r, 1)) * center[1] +
                T(rw(r, 2)) * center[2];
    }
    if (!(pc[2] > T(cam.near))) return false;
    out.depth = pc[2];
    const T inv_z = T(1.0) / pc[2];
    out.mean[0] = T(cam.fx) * pc[0] * inv_z + T(cam.cx);
    out.mean[1] = T(cam.fy) * pc[1] * inv_z + T(cam.cy);
    const T alpha = logistic(opacity_logit);

    if (type == GaussianType::Volume3D) {
        Eigen::Matrix<T, 3, 1> ls(log_scale[0], log_scale[1], log_scale[2]);
        Eigen::Matrix<T, 4, 1> q(quat[0], quat[1], quat[2], quat[3]);
        const Eigen::Matrix<T, 3, 3> sigma = build_covariance<T>(ls, q, GaussianType::Volume3D);
        // Affine projection: J W with J the Jacobian of the perspective map.
        Eigen::Matrix<T, 2, 3> j;
        j(0, 0) = T(cam.fx) * inv_z;
        j(0, 1) = T(0.0);
        j(0, 2) = -T(cam.fx) * pc[0] * inv_z * inv_z;
        j(1, 0) = T(0.0);
        j(1, 1) = T(cam.fy) * inv_z;
        j(1, 2) = -T(cam.fy) * pc[1] * inv_z * inv_z;
        const Eigen::Matrix<T, 2, 3> jw = j * rw.cast<T>();
        const Eigen::Matrix<T, 2, 2> cov = jw * sigma * jw.transpose();
        const T a = cov(0, 0) + T(cfg.dilation);
        const T b = cov(0, 1);
        const T c = cov(1, 1) + T(cfg.dilation);
        const T det = a * c - b * b;
        if (!(det > T(0.0))) return false;
        out.conic = {c / det, -b / det, a / det};
        out.m.fill(T(0.0));
        out.alpha = alpha;
        return true;
    }

    // Surfel: tangent axes scaled by s_x, s_y, mapped to homogeneous pixels.
    const Eigen::Matrix<T, 3, 3> r = quat_to_rotation(quat[0], quat[1], quat[2], quat[3]);
    const T sx = exp(log_scale[0]);
    const T sy = exp(log_scale[1]);
    std::array<T, 3> tu, tv;
    for (int k = 0; k < 3; ++k) {
        tu[k] = (T(rw(k, 0)) * r(0, 0) + T(rw(k, 1)) * r(1, 0) + T(rw(k, 2)) * r(2, 0)) * sx;
        tv[k] = (T(rw(k, 0)) * r(0, 1) + T(rw(k, 1)) * r(1, 1) + T(rw(k, 2)) * r(2, 1)) * sy;
    }
    // Rows of K [tu tv pc], K = [[fx 0 cx] [0 fy cy] [0 0 1]].
    out.m[0] = T(cam.fx) * tu[0] + T(cam.cx) * tu[2];
    out.m[1] = T(cam.fx) * tv[0] + T(cam.cx) * tv[2];
    out.m[2] = T(cam.fx) * pc[0] + T(cam.cx) * pc[2];
    out.m[3] = T(cam.fy) * tu[1] + T(cam.cy) * tu[2];
    out.m[4] = T(cam.fy) * tv[1] + T(cam.cy) * tv[2];
    out.m[5] = T(cam.fy) * pc[1] + T(cam.cy) * pc[2];
    out.m[6] = tu[2];
    out.m[7] = tv[2];
    out.m[8] = pc[2];
    out.conic.fill(T(0.0));
    out.alpha = modulate_opacity(alpha, exp(log_scale[2]), cfg.theta_z, cfg.t_z, cfg.lambda_z);
    return true;
}

// ---------------------------------------------------------------------------
// Projected splats
// ---------------------------------------------------------------------------

struct ProjectedSplat {
    std::uint32_t gaussian_index = 0;
    GaussianType type = GaussianType::Volume3D;
    Vec2 screen_center = Vec2::Zero();
    double depth_key = 0.0;
    Vec3 conic = Vec3::Zero();       ///< 3D: (a, b, c), d = a dx^2 + 2 b dx dy + c dy^2
    Mat3 ray_transform = Mat3::Zero();  ///< 2D: homogeneous pixel = M (u, v, 1)
    double radius = 0.0;             ///< px
    double xmin = 0.0, xmax = 0.0, ymin = 0.0, ymax = 0.0;  ///< continuous screen bounds
    double opacity = 0.0;            ///< effective opacity used by the compositor
    Vec3 color = Vec3::Zero();
};

/// Continuous screen bounds and radius from the differentiable geometry.
/// Returns false when the surfel's 3-sigma disk crosses the camera plane.
inline bool finalize_bounds(ProjectedSplat& s, const RasterConfig& cfg) {
    const double cut = std::sqrt(cfg.cutoff_sq);
    if (s.type == GaussianType::Volume3D) {
        // Recover the covariance from the conic for its largest eigenvalue.
        const double a = s.conic[0], b = s.conic[1], c = s.conic[2];
        const double det = a * c - b * b;
        const double ca = c / det, cb = -b / det, cc = a / det;
        const double mid = 0.5 * (ca + cc);
        const double lambda_max = mid + std::sqrt(std::max(0.0, mid * mid - (ca * cc - cb * cb)));
        s.radius = std::max(1.0, cut * std::sqrt(lambda_max));
        s.xmin = s.screen_center[0] - s.radius;
        s.xmax = s.screen_center[0] + s.radius;
        s.ymin = s.screen_center[1] - s.radius;
        s.ymax = s.screen_center[1] + s.radius;
        return true;
    }
    // Tangency of the screen lines x = const with the conic u^2 + v^2 = cut^2:
    // (m0 - x m2)^T F^-1 (m0 - x m2) = 0 with F^-1 = diag(1, 1, -1/cut^2).
    const Mat3& m = s.ray_transform;
    auto dual = [&](int r0, int r1) {
        return m(r0, 0) * m(r1, 0) + m(r0, 1) * m(r1, 1) - m(r0, 2) * m(r1, 2) / cfg.cutoff_sq;
    };
    const double a = dual(2, 2);
    if (!(a < 0.0)) return false;
    const double bx = dual(0, 2), cx = dual(0, 0);
    const double by = dual(1, 2), cy = dual(1, 1);
    const double center_x = bx / a, center_y = by / a;
    const double half_x = std::sqrt(std::max(0.0, bx * bx - a * cx)) / std::abs(a);
    const double half_y = std::sqrt(std::max(0.0, by * by - a * cy)) / std::abs(a);
    const double lowpass = cut * cfg.lowpass_radius;
    s.xmin = std::min(center_x - half_x, s.screen_center[0] - lowpass);
    s.xmax = std::max(center_x + half_x, s.screen_center[0] + lowpass);
    s.ymin = std::min(center_y - half_y, s.screen_center[1] - lowpass);
    s.ymax = std::max(center_y + half_y, s.screen_center[1] + lowpass);
    s.radius = std::max({1.0, 0.5 * (s.xmax - s.xmin), 0.5 * (s.ymax - s.ymin)});
    return true;
}

/// View direction from the camera center to a Gaussian center.
inline Vec3 view_direction(const Vec3& center, const CameraView& cam) {
    return (center - cam.center_world()).normalized();
}

/// Projects Gaussian i of the scene with its view-dependent color.
inline std::optional<ProjectedSplat> project_gaussian(const GaussianSet& scene, std::size_t i,
                                                      const CameraView& cam,
                                                      const RasterConfig& cfg) {
    const Vec3& c = scene.center[i];
    const Vec3& ls = scene.log_scale[i];
    const Vec4& q = scene.rotation[i];
    SplatGeometry<double> geo{};
    const GaussianType type = scene.type_of(i);
    if (!project_geometry<double>({c[0], c[1], c[2]}, {ls[0], ls[1], ls[2]},
                                  {q[0], q[1], q[2], q[3]}, scene.opacity_logit[i], type, cam,
                                  cfg, geo)) {
        return std::nullopt;
    }
    ProjectedSplat s;
    s.gaussian_index = static_cast<std::uint32_t>(i);
    s.type = type;
    s.screen_center = Vec2(geo.mean[0], geo.mean[1]);
    s.depth_key = geo.depth;
    s.conic = Vec3(geo.conic[0], geo.conic[1], geo.conic[2]);
    for (int k = 0; k < 9; ++k) s.ray_transform(k / 3, k % 3) = geo.m[static_cast<std::size_t>(k)];
    s.opacity = geo.alpha;
    if (!finalize_bounds(s, cfg)) return std::nullopt;
    s.color = eval_sh(scene.sh_of(i), scene.sh_degree(), view_direction(c, cam));
    return s;
}

/// Affine projection of a 3D Gaussian. Returns nullopt when culled.
inline std::optional<ProjectedSplat> project_gaussian_3d(const Gaussian& g, const CameraView& cam,
                                                         const RasterConfig& cfg = {}) {
    if (g.type != GaussianType::Volume3D) throw ConfigError("project_gaussian_3d expects t = 1");
    Gaussian copy = g;
    if (copy.sh.empty()) copy.sh.assign(3, 0.0);
    int degree = 0;
    while (degree < kMaxShDegree && 3 * sh_basis_count(degree) < static_cast<int>(copy.sh.size())) {
        ++degree;
    }
    if (3 * sh_basis_count(degree) != static_cast<int>(copy.sh.size())) {
        throw ConfigError("project_gaussian_3d: SH length does not match a degree");
    }
    GaussianSet one(degree);
    one.push_back(copy);
    return project_gaussian(one, 0, cam, cfg);
}

/// Homogeneous plane pair (h_u, h_v) of the pixel ray in the surfel frame.
inline std::pair<Vec3, Vec3> plane_params(const ProjectedSplat& s, const Vec2& pixel) {
    const Mat3& m = s.ray_transform;
    // h_x = (-1, 0, x) and h_y = (0, -1, y) pulled back through M.
    const Vec3 hu = -m.row(0).transpose() + pixel[0] * m.row(2).transpose();
    const Vec3 hv = -m.row(1).transpose() + pixel[1] * m.row(2).transpose();
    return {hu, hv};
}

/// Tangent-frame coordinates where the pixel ray meets the surfel plane;
/// nullopt when the ray is (nearly) parallel to the plane.
inline std::optional<Vec2> ray_splat_intersect(const ProjectedSplat& s, const Vec2& pixel,
                                               double degenerate_tol = 1e-9) {
    const auto [hu, hv] = plane_params(s, pixel);
    const double denom = hu[0] * hv[1] - hu[1] * hv[0];
    if (!(std::abs(denom) >= degenerate_tol)) return std::nullopt;
    const double u = (hu[1] * hv[2] - hu[2] * hv[1]) / denom;
    const double v = (hu[2] * hv[0] - hu[0] * hv[2]) / denom;
    return Vec2(u, v);
}

enum class BlendBranch : std::uint8_t { Volume = 0, SurfelRay = 1, SurfelLowpass = 2 };

struct Contribution {
    bool hit = false;
    double alpha = 0.0;     ///< clamped contribution alpha-tilde
    double distance = 0.0;  ///< d
    bool clamped = false;
    BlendBranch branch = BlendBranch::Volume;
    Vec2 uv = Vec2::Zero();  ///< surfel tangent coordinates (SurfelRay)
    double depth = 0.0;      ///< surface depth used for the depth image
};

/// alpha-tilde = opacity * exp(-d/2), clamped to alpha_max. A miss is
/// reported for d beyond the 3-sigma support, contributions below alpha_min
/// and degenerate ray-plane intersections.
inline Contribution evaluate_contribution(const ProjectedSplat& s, const Vec2& pixel,
                                          double opacity, const RasterConfig& cfg = {}) {
    Contribution out;
    const Vec2 delta = pixel - s.screen_center;
    if (s.type == GaussianType::Volume3D) {
        out.distance = s.conic[0] * delta[0] * delta[0] + 2.0 * s.conic[1] * delta[0] * delta[1] +
                       s.conic[2] * delta[1] * delta[1];
        out.branch = BlendBranch::Volume;
        out.depth = s.depth_key;
    } else {
        const auto uv = ray_splat_intersect(s, pixel, cfg.degenerate_tol);
        if (!uv) return out;
        const double d_ray = uv->squaredNorm();
        const double d_screen = delta.squaredNorm() / (cfg.lowpass_radius * cfg.lowpass_radius);
        out.uv = *uv;
        if (d_ray <= d_screen) {
            out.distance = d_ray;
            out.branch = BlendBranch::SurfelRay;
        } else {
            out.distance = d_screen;
            out.branch = BlendBranch::SurfelLowpass;
        }
        const Mat3& m = s.ray_transform;
        out.depth = m(2, 0) * (*uv)[0] + m(2, 1) * (*uv)[1] + m(2, 2);
    }
    if (!(out.distance <= cfg.cutoff_sq)) return out;
    double a = opacity * std::exp(-0.5 * out.distance);
    if (a < cfg.alpha_min) return out;
    if (a > cfg.alpha_max) {
        a = cfg.alpha_max;
        out.clamped = true;
    }
    out.hit = true;
    out.alpha = a;
    return out;
}

inline Contribution evaluate_contribution(const ProjectedSplat& s, const Vec2& pixel,
                                          const RasterConfig& cfg = {}) {
    return evaluate_contribution(s, pixel, s.opacity, cfg);
}

// ---------------------------------------------------------------------------
// Render output and blend log
// ---------------------------------------------------------------------------

struct BlendRecord {
    std::uint32_t local = 0;  ///< index into TileLog::splats
    BlendBranch branch = BlendBranch::Volume;
    bool clamped = false;
    double alpha = 0.0;
    Vec2 uv = Vec2::Zero();
};

/// Blend records of one tile. Records for pixel p (row-major within the
/// tile) are records[pixel_offsets[p] .. pixel_offsets[p + 1]).
struct TileLog {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;     ///< pixel range [x0, x1) x [y0, y1)
    std::vector<std::uint32_t> splats;      ///< indices into RenderOutput::splats, front to back
    std::vector<BlendRecord> records;
    std::vector<std::uint32_t> pixel_offsets;
};

struct RenderOutput {
    ImageBuffer color;          ///< H x W x 3
    ImageBuffer depth;          ///< H x W, expected depth with the blend weights
    ImageBuffer transmittance;  ///< H x W, final prod(1 - alpha-tilde)
    std::vector<ProjectedSplat> splats;  ///< visible splats sorted by (depth, index)
    std::vector<TileLog> tiles;
    std::size_t scene_size = 0;
    int sh_degree = 0;
};

/// Visible splats sorted front to back, ties broken by Gaussian index.
inline std::vector<ProjectedSplat> project_scene(const GaussianSet& scene, const CameraView& cam,
                                                 const RasterConfig& cfg) {
    std::vector<std::optional<ProjectedSplat>> slots(scene.size());
    parallel_for(scene.size(), cfg.threads,
                 [&](std::size_t i) { slots[i] = project_gaussian(scene, i, cam, cfg); });
    std::vector<ProjectedSplat> splats;
    for (auto& s : slots) {
        if (s) splats.push_back(*s);
    }
    std::sort(splats.begin(), splats.end(), [](const ProjectedSplat& a, const ProjectedSplat& b) {
        if (a.depth_key != b.depth_key) return a.depth_key < b.depth_key;
        return a.gaussian_index < b.gaussian_index;
    });
    return splats;
}

/// Front-to-back alpha compositing of the whole scene into one image.
inline RenderOutput render(const GaussianSet& scene, const CameraView& cam,
                           const RasterConfig& cfg = {}) {
    cam.validate();
    scene.check_consistency();
    if (cfg.tile_size < 1) throw ConfigError("tile_size must be positive");

    RenderOutput out;
    out.scene_size = scene.size();
    out.sh_degree = scene.sh_degree();
    out.color = ImageBuffer(cam.width, cam.height, 3);
    out.depth = ImageBuffer(cam.width, cam.height, 1);
    out.transmittance = ImageBuffer(cam.width, cam.height, 1, 1.0);
    out.splats = project_scene(scene, cam, cfg);

    const int ts = cfg.tile_size;
    const int tiles_x = (cam.width + ts - 1) / ts;
    const int tiles_y = (cam.height + ts - 1) / ts;
    out.tiles.resize(static_cast<std::size_t>(tiles_x) * static_cast<std::size_t>(tiles_y));
    for (int ty = 0; ty < tiles_y; ++ty) {
        for (int tx = 0; tx < tiles_x; ++tx) {
            TileLog& t = out.tiles[static_cast<std::size_t>(ty * tiles_x + tx)];
            t.x0 = tx * ts;
            t.y0 = ty * ts;
            t.x1 = std::min(cam.width, t.x0 + ts);
            t.y1 = std::min(cam.height, t.y0 + ts);
        }
    }
    // Bin splats into every tile their bounds touch; the sorted order carries over.
    for (std::size_t k = 0; k < out.splats.size(); ++k) {
        const ProjectedSplat& s = out.splats[k];
        // Pixel px is covered when its center px + 0.5 lies within [xmin, xmax].
        const int px0 = std::max(0, static_cast<int>(std::ceil(s.xmin - 0.5)));
        const int px1 = std::min(cam.width - 1, static_cast<int>(std::floor(s.xmax - 0.5)));
        const int py0 = std::max(0, static_cast<int>(std::ceil(s.ymin - 0.5)));
        const int py1 = std::min(cam.height - 1, static_cast<int>(std::floor(s.ymax - 0.5)));
        if (px0 > px1 || py0 > py1) continue;
        for (int ty = py0 / ts; ty <= py1 / ts; ++ty) {
            for (int tx = px0 / ts; tx <= px1 / ts; ++tx) {
                out.tiles[static_cast<std::size_t>(ty * tiles_x + tx)].splats.push_back(
                    static_cast<std::uint32_t>(k));
            }
        }
    }

    parallel_for(out.tiles.size(), cfg.threads, [&](std::size_t ti) {
        TileLog& t = out.tiles[ti];
        const int tw = t.x1 - t.x0;
        const int th = t.y1 - t.y0;
        t.pixel_offsets.assign(static_cast<std::size_t>(tw * th + 1), 0);
        for (int py = t.y0; py < t.y1; ++py) {
            for (int px = t.x0; px < t.x1; ++px) {
                const Vec2 pixel(px + 0.5, py + 0.5);
                double trans = 1.0;
                Vec3 rgb = Vec3::Zero();
                double depth = 0.0;
                for (std::size_t l = 0; l < t.splats.size(); ++l) {
                    const ProjectedSplat& s = out.splats[t.splats[l]];
                    const Contribution c = evaluate_contribution(s, pixel, cfg);
                    if (!c.hit) continue;
                    const double next = trans * (1.0 - c.alpha);
                    if (next < cfg.transmittance_min) break;
                    const double w = c.alpha * trans;
                    rgb += w * s.color;
                    depth += w * c.depth;
                    t.records.push_back(
                        {static_cast<std::uint32_t>(l), c.branch, c.clamped, c.alpha, c.uv});
                    trans = next;
                }
                rgb += trans * cfg.background;
                for (int ch = 0; ch < 3; ++ch) out.color.at(px, py, ch) = rgb[ch];
                out.depth.at(px, py) = depth;
                out.transmittance.at(px, py) = trans;
                const auto local = static_cast<std::size_t>((py - t.y0) * tw + (px - t.x0));
                t.pixel_offsets[local + 1] = static_cast<std::uint32_t>(t.records.size());
            }
        }
    });
    return out;
}

} // namespace eggs
