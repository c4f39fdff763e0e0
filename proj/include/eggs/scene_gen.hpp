// Copyright Contributors to the eggs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Parametric test scenes with exact cameras. Ground truth comes from an
// analytic ray caster over the true surfaces, independent of the splatting
// renderer.

#include "eggs/core.hpp"
#include "eggs/io.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace eggs {

enum class SceneKind { Quads, Sphere, TiltedPlane };

inline SceneKind parse_scene_kind(const std::string& s) {
    if (s == "quads") return SceneKind::Quads;
    if (s == "sphere") return SceneKind::Sphere;
    if (s == "plane" || s == "tilted-plane") return SceneKind::TiltedPlane;
    throw ConfigError("unknown scene '" + s + "' (expected quads, sphere or plane)");
}

inline std::string to_string(SceneKind k) {
    switch (k) {
    case SceneKind::Quads: return "quads";
    case SceneKind::Sphere: return "sphere";
    case SceneKind::TiltedPlane: return "plane";
    }
    return "?";
}

struct SurfaceHit {
    double t = 0.0;  ///< ray parameter; equals camera-space depth for unit-z camera rays
    Vec3 point = Vec3::Zero();
    Vec3 color = Vec3::Zero();
};

/// Rectangle centered at `center` spanned by unit axes `u`, `v` with half
/// extents `hu`, `hv`. `checker` > 0 alternates `color` and `color2` on
/// squares of that size.
struct AnalyticQuad {
    Vec3 center, u, v;
    double hu = 0.5, hv = 0.5;
    Vec3 color = Vec3::Ones();
    Vec3 color2 = Vec3::Zero();
    double checker = 0.0;

    double area() const { return 4.0 * hu * hv; }

    Vec3 color_at(double a, double b) const {
        if (checker <= 0.0) return color;
        const auto ia = static_cast<long>(std::floor((a + hu) / checker));
        const auto ib = static_cast<long>(std::floor((b + hv) / checker));
        return ((ia + ib) & 1) ? color2 : color;
    }

    std::optional<SurfaceHit> intersect(const Vec3& o, const Vec3& d) const {
        const Vec3 n = u.cross(v);
        const double den = n.dot(d);
        if (std::abs(den) < 1e-14) return std::nullopt;
        const double t = n.dot(center - o) / den;
        const Vec3 p = o + t * d;
        const double a = (p - center).dot(u), b = (p - center).dot(v);
        if (std::abs(a) > hu || std::abs(b) > hv) return std::nullopt;
        return SurfaceHit{t, p, color_at(a, b)};
    }

    std::pair<Vec3, Vec3> sample(std::mt19937_64& rng) const {
        std::uniform_real_distribution<double> ua(-hu, hu), ub(-hv, hv);
        const double a = ua(rng), b = ub(rng);
        return {center + a * u + b * v, color_at(a, b)};
    }
};

/// Sphere with latitude bands of two colors.
struct AnalyticSphere {
    Vec3 center = Vec3::Zero();
    double radius = 1.0;
    Vec3 color = Vec3(0.9, 0.6, 0.2);
    Vec3 color2 = Vec3(0.2, 0.4, 0.9);
    int bands = 6;

    double area() const { return 4.0 * std::numbers::pi * radius * radius; }

    Vec3 color_at(const Vec3& p) const {
        const double lat = std::asin(std::clamp((p - center).y() / radius, -1.0, 1.0));
        const auto band = static_cast<long>(std::floor((lat / std::numbers::pi + 0.5) * bands));
        return (band & 1) ? color2 : color;
    }

    std::optional<SurfaceHit> intersect(const Vec3& o, const Vec3& d) const {
        const Vec3 oc = o - center;
        const double a = d.squaredNorm(), b = oc.dot(d), c = oc.squaredNorm() - radius * radius;
        const double disc = b * b - a * c;
        if (disc < 0.0) return std::nullopt;
        const double t = (-b - std::sqrt(disc)) / a;
        if (t <= 0.0) return std::nullopt;
        const Vec3 p = o + t * d;
        return SurfaceHit{t, p, color_at(p)};
    }

    std::pair<Vec3, Vec3> sample(std::mt19937_64& rng) const {
        std::normal_distribution<double> n(0.0, 1.0);
        Vec3 dir(n(rng), n(rng), n(rng));
        const Vec3 p = center + radius * dir.normalized();
        return {p, color_at(p)};
    }
};

struct AnalyticScene {
    std::vector<AnalyticQuad> quads;
    std::vector<AnalyticSphere> spheres;

    std::optional<SurfaceHit> intersect(const Vec3& o, const Vec3& d, double t_min) const {
        std::optional<SurfaceHit> best;
        auto offer = [&](const std::optional<SurfaceHit>& h) {
            if (h && h->t > t_min && (!best || h->t < best->t)) best = h;
        };
        for (const auto& q : quads) offer(q.intersect(o, d));
        for (const auto& s : spheres) offer(s.intersect(o, d));
        return best;
    }

    /// Area-weighted surface samples with their colors.
    PointCloud sample_points(std::size_t n, std::uint64_t seed) const {
        std::mt19937_64 rng(seed);
        std::vector<double> area;
        for (const auto& q : quads) area.push_back(q.area());
        for (const auto& s : spheres) area.push_back(s.area());
        std::discrete_distribution<std::size_t> pick(area.begin(), area.end());
        PointCloud pc;
        for (std::size_t k = 0; k < n; ++k) {
            const std::size_t i = pick(rng);
            const auto [p, c] = i < quads.size() ? quads[i].sample(rng)
                                                 : spheres[i - quads.size()].sample(rng);
            pc.positions.push_back(p);
            pc.colors.push_back(c);
        }
        return pc;
    }
};

/// Camera-space ray through pixel coordinates (x, y), in world space.
inline std::pair<Vec3, Vec3> camera_ray(const CameraView& cam, double x, double y) {
    const Vec3 d_cam((x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0);
    return {cam.center_world(), cam.rotation().transpose() * d_cam};
}

/// Color with `ss` x `ss` stratified samples per pixel; depth from the
/// center ray (0 where nothing is hit).
inline std::pair<ImageBuffer, ImageBuffer> ray_cast(const AnalyticScene& scene, const CameraView& cam,
                                                    int ss = 4, const Vec3& background = Vec3::Zero()) {
    ImageBuffer color(cam.width, cam.height, 3), depth(cam.width, cam.height, 1);
    for (int py = 0; py < cam.height; ++py) {
        for (int px = 0; px < cam.width; ++px) {
            Vec3 acc = Vec3::Zero();
            for (int sy = 0; sy < ss; ++sy) {
                for (int sx = 0; sx < ss; ++sx) {
                    const auto [o, d] = camera_ray(cam, px + (sx + 0.5) / ss, py + (sy + 0.5) / ss);
                    const auto h = scene.intersect(o, d, cam.near);
                    acc += h ? h->color : background;
                }
            }
            acc /= ss * ss;
            for (int c = 0; c < 3; ++c) color.data[color.index(px, py, c)] = acc[c];
            const auto [o, d] = camera_ray(cam, px + 0.5, py + 0.5);
            const auto h = scene.intersect(o, d, cam.near);
            depth.data[depth.index(px, py, 0)] = h && h->t < cam.far ? h->t : 0.0;
        }
    }
    return {color, depth};
}

inline AnalyticScene make_analytic_scene(SceneKind kind) {
    AnalyticScene s;
    const Vec3 ex(1, 0, 0), ey(0, 1, 0);
    switch (kind) {
    case SceneKind::Quads:
        s.quads.push_back({Vec3(-0.45, -0.2, 0.6), ex, ey, 0.55, 0.5, Vec3(0.85, 0.2, 0.15)});
        s.quads.push_back({Vec3(0.35, 0.25, 0.0), ex, ey, 0.45, 0.4, Vec3(0.15, 0.75, 0.25)});
        s.quads.push_back({Vec3(0.05, -0.35, -0.5), ex, ey, 0.35, 0.3, Vec3(0.2, 0.3, 0.9)});
        break;
    case SceneKind::Sphere:
        s.spheres.push_back({Vec3::Zero(), 0.8});
        break;
    case SceneKind::TiltedPlane: {
        const double a = 55.0 * std::numbers::pi / 180.0;
        const Vec3 v(0, std::cos(a), std::sin(a));  // tilted away from the cameras
        AnalyticQuad q{Vec3::Zero(), ex, v, 1.0, 1.0, Vec3(0.9, 0.85, 0.3), Vec3(0.15, 0.2, 0.6), 0.25};
        s.quads.push_back(q);
        break;
    }
    }
    return s;
}

struct GenOptions {
    SceneKind kind = SceneKind::Quads;
    int views = 6;
    int test_views = 1;
    int width = 64;
    int height = 64;
    double focal = 64.0;      ///< px
    double radius = 4.0;      ///< camera distance from the origin
    double arc_degrees = 40;  ///< total horizontal span of the camera arc
    std::size_t points = 1200;
    std::uint64_t seed = 0;
    int supersample = 4;
    double near = 0.1;
    double far = 10.0;

    void validate() const {
        if (views < 2) throw ConfigError("gen-scene: need at least 2 views");
        if (test_views < 0 || test_views >= views) {
            throw ConfigError("gen-scene: test views must leave at least one training view");
        }
        if (width <= 0 || height <= 0) throw ConfigError("gen-scene: image size must be positive");
        if (!(focal > 0.0) || !(radius > 0.0)) throw ConfigError("gen-scene: bad camera geometry");
        if (points == 0) throw ConfigError("gen-scene: need at least one point");
        if (supersample < 1) throw ConfigError("gen-scene: supersample must be >= 1");
    }
};

struct GeneratedScene {
    std::vector<CameraView> cameras;  ///< with gt_image and gt_depth
    std::vector<int> train;
    std::vector<int> test;
    PointCloud points;
};

/// Cameras on a horizontal arc looking at the origin; test views are spread
/// evenly through the interior of the arc.
inline std::vector<CameraView> arc_cameras(const GenOptions& o) {
    std::vector<CameraView> cams;
    const double span = o.arc_degrees * std::numbers::pi / 180.0;
    for (int k = 0; k < o.views; ++k) {
        CameraView c;
        c.id = k;
        c.fx = c.fy = o.focal;
        c.cx = 0.5 * o.width;
        c.cy = 0.5 * o.height;
        c.width = o.width;
        c.height = o.height;
        c.near = o.near;
        c.far = o.far;
        const double a = -0.5 * span + span * k / (o.views - 1);
        const Vec3 eye(o.radius * std::sin(a), -0.15 * o.radius * std::cos(2 * a), -o.radius * std::cos(a));
        c.world_to_camera = CameraView::look_at(eye, Vec3::Zero(), Vec3(0, -1, 0));
        cams.push_back(c);
    }
    return cams;
}

inline std::vector<int> held_out_ids(int views, int test_views) {
    std::vector<int> out;
    for (int k = 0; k < test_views; ++k) {
        // Interior positions, e.g. 6 views with 1 test view -> id 3.
        out.push_back(static_cast<int>(std::lround((k + 1.0) * views / (test_views + 1.0))));
    }
    for (int& id : out) id = std::clamp(id, 1, views - 2);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

inline GeneratedScene generate_scene(const GenOptions& o) {
    o.validate();
    const AnalyticScene analytic = make_analytic_scene(o.kind);
    GeneratedScene g;
    g.cameras = arc_cameras(o);
    for (auto& c : g.cameras) {
        auto [color, depth] = ray_cast(analytic, c, o.supersample);
        c.gt_image = std::move(color);
        c.gt_depth = std::move(depth);
    }
    g.test = held_out_ids(o.views, o.test_views);
    for (int k = 0; k < o.views; ++k) {
        if (std::find(g.test.begin(), g.test.end(), k) == g.test.end()) g.train.push_back(k);
    }
    g.points = analytic.sample_points(o.points, o.seed);
    return g;
}

/// Writes manifest.json, images/, depth/ and points.ply under `dir`.
inline void write_generated_scene(const GeneratedScene& g, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir / "images", ec);
    fs::create_directories(dir / "depth", ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    SceneManifest m;
    m.points = "points.ply";
    for (const auto& c : g.cameras) {
        char name[32];
        std::snprintf(name, sizeof name, "%03d.png", c.id);
        ManifestCamera mc;
        mc.id = c.id;
        mc.fx = c.fx;
        mc.fy = c.fy;
        mc.cx = c.cx;
        mc.cy = c.cy;
        mc.width = c.width;
        mc.height = c.height;
        mc.world_to_camera = c.world_to_camera;
        mc.near = c.near;
        mc.far = c.far;
        mc.image = std::string("images/") + name;
        write_png(*c.gt_image, dir / mc.image);
        if (c.gt_depth) {
            mc.depth = std::string("depth/") + name;
            write_depth_png(*c.gt_depth, c.far, dir / mc.depth);
        }
        m.cameras.push_back(mc);
    }
    m.train = g.train;
    m.test = g.test;
    write_ply_points(g.points, dir / "points.ply");
    write_manifest(m, dir / "manifest.json");
}

} // namespace eggs
