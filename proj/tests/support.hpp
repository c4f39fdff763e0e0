// Shared helpers for the test suites: random scenes and an independent
// brute-force compositor.
#pragma once

#include "eggs/core.hpp"
#include "eggs/exchange.hpp"
#include "eggs/raster.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

namespace eggs::test {

inline Vec4 random_quaternion(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Vec4 q(n(rng), n(rng), n(rng), n(rng));
    return q.normalized();
}

inline CameraView simple_camera(int w, int h, double f) {
    CameraView cam;
    cam.fx = cam.fy = f;
    cam.cx = 0.5 * w;
    cam.cy = 0.5 * h;
    cam.width = w;
    cam.height = h;
    return cam;
}

struct SceneOptions {
    int count = 8;
    int sh_degree = 1;
    double depth_min = 3.0;
    double depth_max = 6.0;
    double spread = 0.8;        ///< lateral extent as a fraction of the view frustum
    double log_scale_min = -2.3;
    double log_scale_max = -1.2;
    double opacity_min = 0.3;
    double opacity_max = 0.9;
    double surfel_fraction = 0.5;
    double sh_high = 0.1;
};

/// Random mixed scene in front of a camera at the origin looking down +z.
inline GaussianSet random_scene(std::mt19937_64& rng, const CameraView& cam,
                                const SceneOptions& o = {}) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };
    GaussianSet scene(o.sh_degree);
    for (int i = 0; i < o.count; ++i) {
        Gaussian g;
        const double z = uni(o.depth_min, o.depth_max);
        const double hx = o.spread * 0.5 * cam.width / cam.fx * z;
        const double hy = o.spread * 0.5 * cam.height / cam.fy * z;
        g.center = Vec3(uni(-hx, hx), uni(-hy, hy), z);
        g.log_scale = Vec3(uni(o.log_scale_min, o.log_scale_max),
                           uni(o.log_scale_min, o.log_scale_max),
                           uni(o.log_scale_min, o.log_scale_max));
        g.rotation = random_quaternion(rng);
        g.opacity_logit = logit(uni(o.opacity_min, o.opacity_max));
        g.sh.assign(static_cast<std::size_t>(3 * sh_basis_count(o.sh_degree)), 0.0);
        for (int c = 0; c < 3; ++c) g.sh[static_cast<std::size_t>(c)] = uni(-1.0, 1.0);
        for (std::size_t k = 3; k < g.sh.size(); ++k) g.sh[k] = uni(-o.sh_high, o.sh_high);
        g.type = u01(rng) < o.surfel_fraction ? GaussianType::Surfel2D : GaussianType::Volume3D;
        scene.push_back(g);
    }
    return scene;
}

/// Per-pixel compositor over all Gaussians without tiles or the splat
/// cache. Geometry is recomputed from first principles: 3D footprints from
/// explicit Jacobian matrices, surfel hits from a world-space ray-plane solve.
inline ImageBuffer naive_render(const GaussianSet& scene, const CameraView& cam,
                                const RasterConfig& cfg = {}) {
    struct Item {
        double depth;
        std::size_t index;
    };
    const Mat3 rw = cam.rotation();
    const Vec3 tw = cam.translation();
    const Vec3 origin = cam.center_world();
    std::vector<Item> order;
    for (std::size_t i = 0; i < scene.size(); ++i) {
        const Vec3 pc = rw * scene.center[i] + tw;
        if (pc.z() > cam.near) order.push_back({pc.z(), i});
    }
    std::sort(order.begin(), order.end(), [](const Item& a, const Item& b) {
        return a.depth != b.depth ? a.depth < b.depth : a.index < b.index;
    });

    ImageBuffer img(cam.width, cam.height, 3);
    for (int py = 0; py < cam.height; ++py) {
        for (int px = 0; px < cam.width; ++px) {
            const Vec2 pix(px + 0.5, py + 0.5);
            const Vec3 ray_cam((pix.x() - cam.cx) / cam.fx, (pix.y() - cam.cy) / cam.fy, 1.0);
            const Vec3 ray = rw.transpose() * ray_cam;
            double trans = 1.0;
            Vec3 rgb = Vec3::Zero();
            for (const Item& it : order) {
                const std::size_t i = it.index;
                const Vec3 mu = scene.center[i];
                const Vec3 pc = rw * mu + tw;
                const Vec2 mean(cam.fx * pc.x() / pc.z() + cam.cx, cam.fy * pc.y() / pc.z() + cam.cy);
                const Vec2 delta = pix - mean;
                const Vec3 s = scene.log_scale[i].array().exp();
                const Mat3 r = quat_to_rotation(scene.rotation[i][0], scene.rotation[i][1],
                                                scene.rotation[i][2], scene.rotation[i][3]);
                double d = 0.0;
                double opacity = scene.opacity_logit[i] >= 0.0
                                     ? 1.0 / (1.0 + std::exp(-scene.opacity_logit[i]))
                                     : std::exp(scene.opacity_logit[i]) /
                                           (1.0 + std::exp(scene.opacity_logit[i]));
                if (scene.type_of(i) == GaussianType::Volume3D) {
                    const Mat3 sigma = r * s.cwiseAbs2().asDiagonal() * r.transpose();
                    Eigen::Matrix<double, 2, 3> j;
                    j << cam.fx / pc.z(), 0, -cam.fx * pc.x() / (pc.z() * pc.z()), 0,
                        cam.fy / pc.z(), -cam.fy * pc.y() / (pc.z() * pc.z());
                    Eigen::Matrix2d cov = j * rw * sigma * rw.transpose() * j.transpose();
                    cov += cfg.dilation * Eigen::Matrix2d::Identity();
                    if (!(cov.determinant() > 0.0)) continue;
                    d = delta.dot(cov.inverse() * delta);
                } else {
                    // mu + a s_x t_u + b s_y t_v = origin + tau ray
                    Mat3 a;
                    a.col(0) = s.x() * r.col(0);
                    a.col(1) = s.y() * r.col(1);
                    a.col(2) = -ray;
                    const Vec3 sol = a.fullPivLu().solve(origin - mu);
                    const double d_ray = sol.x() * sol.x() + sol.y() * sol.y();
                    const double d_screen =
                        delta.squaredNorm() / (cfg.lowpass_radius * cfg.lowpass_radius);
                    d = std::min(d_ray, d_screen);
                    const double gated =
                        s.z() / (1.0 + std::exp(-(s.z() - cfg.theta_z) / cfg.t_z));
                    opacity *= std::exp(-cfg.lambda_z * gated);
                }
                if (d > cfg.cutoff_sq) continue;
                double alpha = std::min(cfg.alpha_max, opacity * std::exp(-0.5 * d));
                if (alpha < cfg.alpha_min) continue;
                if (trans * (1.0 - alpha) < cfg.transmittance_min) break;
                const Vec3 dir = (mu - origin).normalized();
                const Vec3 color = eval_sh(scene.sh_of(i), scene.sh_degree(), dir);
                rgb += trans * alpha * color;
                trans *= 1.0 - alpha;
            }
            rgb += trans * cfg.background;
            for (int c = 0; c < 3; ++c) img.at(px, py, c) = rgb[c];
        }
    }
    return img;
}

inline double max_abs_diff(const ImageBuffer& a, const ImageBuffer& b) {
    double m = 0.0;
    for (std::size_t k = 0; k < a.data.size(); ++k) m = std::max(m, std::abs(a.data[k] - b.data[k]));
    return m;
}

} // namespace eggs::test
