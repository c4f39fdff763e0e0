// Copyright Contributors to the eggs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "eggs/core.hpp"
#include "eggs/exchange.hpp"
#include "eggs/freq.hpp"
#include "eggs/grad.hpp"
#include "eggs/metrics.hpp"
#include "eggs/raster.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace eggs {

enum class InitTypePolicy { Random, All2D, All3D };

inline InitTypePolicy parse_init_policy(const std::string& s) {
    if (s == "random") return InitTypePolicy::Random;
    if (s == "all2d") return InitTypePolicy::All2D;
    if (s == "all3d") return InitTypePolicy::All3D;
    throw ConfigError("unknown init type '" + s + "' (expected random, all2d or all3d)");
}

/// Per-group Adam step sizes. Center rates are multiplied by the scene extent.
struct LearningRates {
    double center_init = 1.6e-4;
    double center_final = 1.6e-6;
    double log_scale = 5e-3;
    double rotation = 1e-3;
    double opacity = 5e-2;
    double sh = 2.5e-3;
    double sh_rest_divisor = 20.0;  ///< bands above 0 train at sh / divisor

    /// Log-linear decay from center_init to center_final over `iters` steps.
    double center_at(int iter, int iters) const {
        if (center_init == center_final || center_init <= 0.0 || center_final <= 0.0) {
            return iters > 0 && iter >= iters ? center_final : center_init;
        }
        const double t = iters <= 0 ? 1.0 : std::clamp(static_cast<double>(iter) / iters, 0.0, 1.0);
        return std::exp(std::log(center_init) * (1.0 - t) + std::log(center_final) * t);
    }
};

/// Reference schedule length that the iteration constants are quoted for.
constexpr int kReferenceIters = 30000;

/// Scales an iteration constant from the reference schedule to `iters`.
inline int scale_schedule(int reference_value, int iters) {
    const double v = static_cast<double>(reference_value) * iters / kReferenceIters;
    return std::max(1, static_cast<int>(std::lround(v)));
}

struct TrainConfig {
    int iters = 2000;
    LearningRates lr;
    LossWeights loss;
    ExchangeConfig exchange;  ///< interval/start/end quoted on the reference schedule
    int densify_start = 500;
    int densify_end = 15000;
    int densify_interval = 100;
    double densify_grad_threshold = 2e-4;
    double prune_opacity = 0.005;
    double split_scale_fraction = 0.01;  ///< of the scene extent
    std::size_t max_gaussians = 8000;
    std::uint64_t seed = 0;
    InitTypePolicy init_policy = InitTypePolicy::Random;
    int sh_degree = 2;
    int log_interval = 100;
    unsigned threads = 0;
    Vec3 background = Vec3::Zero();

    void validate() const {
        if (iters < 0) throw ConfigError("iters must be non-negative");
        check_sh_degree(sh_degree);
        loss.validate();
        exchange.validate();
        if (densify_interval < 1) throw ConfigError("densify interval must be >= 1");
        if (densify_start > densify_end) throw ConfigError("densify start must not exceed end");
        if (densify_end > kReferenceIters) {
            throw ConfigError("densify end must not exceed the reference schedule length");
        }
        if (!(densify_grad_threshold >= 0.0)) throw ConfigError("densify threshold must be >= 0");
        if (!(prune_opacity >= 0.0 && prune_opacity < 1.0)) {
            throw ConfigError("prune opacity must lie in [0, 1)");
        }
        if (log_interval < 1) throw ConfigError("log interval must be >= 1");
        for (double v : {lr.center_init, lr.center_final, lr.log_scale, lr.rotation, lr.opacity, lr.sh}) {
            if (!(v >= 0.0)) throw ConfigError("learning rates must be non-negative");
        }
    }

    /// Copy with every iteration constant scaled to `iters`.
    TrainConfig scaled() const {
        TrainConfig c = *this;
        c.densify_start = scale_schedule(densify_start, iters);
        c.densify_end = scale_schedule(densify_end, iters);
        c.densify_interval = scale_schedule(densify_interval, iters);
        c.exchange.interval = scale_schedule(exchange.interval, iters);
        c.exchange.start_iter = scale_schedule(exchange.start_iter, iters);
        c.exchange.end_iter = scale_schedule(exchange.end_iter, iters);
        return c;
    }

    RasterConfig raster() const {
        RasterConfig r;
        r.set_modulation(exchange);
        r.threads = threads;
        r.background = background;
        return r;
    }

    bool densify_scheduled(int iter) const {
        return iter >= densify_start && iter <= densify_end && iter % densify_interval == 0;
    }
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam over the flat per-Gaussian parameter layout.
class Adam {
public:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-15;

    Adam() = default;
    Adam(std::size_t n, int sh_degree)
        : stride_(param::count(sh_degree)), m_(n * static_cast<std::size_t>(stride_), 0.0),
          v_(m_.size(), 0.0) {}

    std::size_t size() const { return m_.size() / static_cast<std::size_t>(stride_); }
    long steps() const { return step_; }
    std::span<const double> first_moment(std::size_t i) const { return row(m_, i); }
    std::span<const double> second_moment(std::size_t i) const { return row(v_, i); }

    void step(GaussianSet& scene, const GradientSet& grad, const LearningRates& lr, int iter,
              int iters, double extent) {
        if (size() != scene.size() || grad.size() != scene.size() ||
            grad.stride() != stride_) {
            throw IntegrityError("Adam::step: optimizer state does not match the scene");
        }
        ++step_;
        const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_));
        std::vector<double> rate(static_cast<std::size_t>(stride_));
        for (int k = 0; k < stride_; ++k) {
            double r;
            if (k < param::kLogScale) r = lr.center_at(iter, iters) * extent;
            else if (k < param::kRotation) r = lr.log_scale;
            else if (k < param::kOpacity) r = lr.rotation;
            else if (k == param::kOpacity) r = lr.opacity;
            else if (k < param::kSh + 3) r = lr.sh;
            else r = lr.sh / lr.sh_rest_divisor;
            rate[static_cast<std::size_t>(k)] = r;
        }
        for (std::size_t i = 0; i < scene.size(); ++i) {
            const auto g = grad.row(i);
            auto m = row(m_, i);
            auto v = row(v_, i);
            for (int k = 0; k < stride_; ++k) {
                const auto kk = static_cast<std::size_t>(k);
                m[kk] = kBeta1 * m[kk] + (1.0 - kBeta1) * g[kk];
                v[kk] = kBeta2 * v[kk] + (1.0 - kBeta2) * g[kk] * g[kk];
                const double update = rate[kk] * (m[kk] / bc1) / (std::sqrt(v[kk] / bc2) + kEps);
                param_ref(scene, i, k) -= update;
            }
        }
    }

    /// Appends zero-state rows for `count` new Gaussians.
    void append(std::size_t count) {
        m_.resize(m_.size() + count * static_cast<std::size_t>(stride_), 0.0);
        v_.resize(m_.size(), 0.0);
    }

    void filter(const std::vector<bool>& keep) {
        if (keep.size() != size()) throw IntegrityError("Adam::filter: mask size");
        std::size_t out = 0;
        const auto s = static_cast<std::size_t>(stride_);
        for (std::size_t i = 0; i < keep.size(); ++i) {
            if (!keep[i]) continue;
            std::copy_n(m_.begin() + static_cast<std::ptrdiff_t>(i * s), s,
                        m_.begin() + static_cast<std::ptrdiff_t>(out * s));
            std::copy_n(v_.begin() + static_cast<std::ptrdiff_t>(i * s), s,
                        v_.begin() + static_cast<std::ptrdiff_t>(out * s));
            ++out;
        }
        m_.resize(out * s);
        v_.resize(out * s);
    }

    /// Keeps the moments attached to their parameters after a type change:
    /// log-scale moments follow the axis permutation, rotation moments restart.
    void on_type_change(const TypeChange& c) {
        if (c.direction != ExchangeDirection::To2D) return;
        const Mat3 p = permutation_matrix(c.permutation);
        for (auto* buf : {&m_, &v_}) {
            auto r = row(*buf, c.index);
            const Vec3 old(r[param::kLogScale], r[param::kLogScale + 1], r[param::kLogScale + 2]);
            const Vec3 moved = p * old;
            for (int k = 0; k < 3; ++k) r[static_cast<std::size_t>(param::kLogScale + k)] = moved[k];
            if (c.permutation != AxisPermutation::Identity) {
                for (int k = 0; k < 4; ++k) r[static_cast<std::size_t>(param::kRotation + k)] = 0.0;
            }
        }
    }

private:
    std::span<double> row(std::vector<double>& b, std::size_t i) {
        return {b.data() + i * static_cast<std::size_t>(stride_), static_cast<std::size_t>(stride_)};
    }
    std::span<const double> row(const std::vector<double>& b, std::size_t i) const {
        return {b.data() + i * static_cast<std::size_t>(stride_), static_cast<std::size_t>(stride_)};
    }

    int stride_ = param::count(0);
    std::vector<double> m_;
    std::vector<double> v_;
    long step_ = 0;
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Mean distance from each point to its three nearest neighbours, by a sweep
/// over points sorted on x. Returns `fallback` for every point when fewer
/// than four points exist.
inline std::vector<double> knn_mean_distance(const std::vector<Vec3>& pts, double fallback = 0.01) {
    const std::size_t n = pts.size();
    if (n < 4) return std::vector<double>(n, fallback);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return pts[a].x() != pts[b].x() ? pts[a].x() < pts[b].x() : a < b;
    });
    std::vector<double> out(n);
    for (std::size_t r = 0; r < n; ++r) {
        const Vec3& p = pts[order[r]];
        std::array<double, 3> best{INFINITY, INFINITY, INFINITY};  // squared, ascending
        auto offer = [&](std::size_t j) {
            const double d2 = (pts[order[j]] - p).squaredNorm();
            if (d2 >= best[2]) return;
            best[2] = d2;
            std::sort(best.begin(), best.end());
        };
        for (std::size_t j = r + 1; j < n; ++j) {
            const double dx = pts[order[j]].x() - p.x();
            if (dx * dx >= best[2]) break;
            offer(j);
        }
        for (std::size_t j = r; j-- > 0;) {
            const double dx = p.x() - pts[order[j]].x();
            if (dx * dx >= best[2]) break;
            offer(j);
        }
        out[order[r]] = (std::sqrt(best[0]) + std::sqrt(best[1]) + std::sqrt(best[2])) / 3.0;
    }
    return out;
}

/// One isotropic Gaussian per point with opacity 0.1 and band-0 color.
inline GaussianSet init_scene(const PointCloud& points, InitTypePolicy policy, std::uint64_t seed,
                              int sh_degree = 2) {
    if (points.size() == 0) throw ConfigError("init_scene: empty point cloud");
    if (points.has_colors() && points.colors.size() != points.size()) {
        throw ConfigError("init_scene: point colors do not match positions");
    }
    const auto dist = knn_mean_distance(points.positions);
    std::mt19937_64 rng(seed);
    GaussianSet scene(sh_degree);
    for (std::size_t i = 0; i < points.size(); ++i) {
        Gaussian g;
        g.center = points.positions[i];
        g.log_scale = Vec3::Constant(std::log(std::max(dist[i], 1e-7)));
        g.opacity_logit = logit(0.1);
        g.sh.assign(static_cast<std::size_t>(scene.sh_stride()), 0.0);
        const Vec3 rgb = points.has_colors() ? points.colors[i] : Vec3::Constant(0.5);
        for (int c = 0; c < 3; ++c) g.sh[static_cast<std::size_t>(c)] = rgb_to_sh0(rgb[c]);
        switch (policy) {
        case InitTypePolicy::All2D: g.type = GaussianType::Surfel2D; break;
        case InitTypePolicy::All3D: g.type = GaussianType::Volume3D; break;
        case InitTypePolicy::Random:
            g.type = (rng() & 1u) ? GaussianType::Volume3D : GaussianType::Surfel2D;
            break;
        }
        scene.push_back(g);
    }
    return scene;
}

/// 1.1 x the largest distance of a camera center from their mean.
inline double scene_extent(const std::vector<CameraView>& views) {
    if (views.empty()) return 1.0;
    Vec3 mean = Vec3::Zero();
    for (const auto& v : views) mean += v.center_world();
    mean /= static_cast<double>(views.size());
    double r = 0.0;
    for (const auto& v : views) r = std::max(r, (v.center_world() - mean).norm());
    return r > 0.0 ? 1.1 * r : 1.0;
}

// ---------------------------------------------------------------------------
// Training step
// ---------------------------------------------------------------------------

struct StepStats {
    double loss_color = 0.0;
    double loss_low = 0.0;
    double loss_high = 0.0;
    double loss_total = 0.0;
    std::size_t n_conflicted = 0;
    std::size_t n_total = 0;
};

/// Loss gradients for one view, before any conflict handling.
struct ViewGradients {
    StepStats stats;
    GradientBundle bundle;
    std::vector<Vec2> screen_mean_grad;
    std::vector<bool> visible;
};

inline ViewGradients view_gradients(const GaussianSet& scene, const CameraView& view,
                                    const TrainConfig& cfg, int iter) {
    if (!view.gt_image) throw ConfigError("train_step: view has no ground-truth image");
    const RasterConfig rc = cfg.raster();
    const RenderOutput out = render(scene, view, rc);
    const ImageBuffer& gt = *view.gt_image;
    if (gt.width != out.color.width || gt.height != out.color.height || gt.channels != 3) {
        throw ConfigError("train_step: ground-truth image does not match the camera size");
    }
    const ColorLoss cl = color_loss_with_grad(out.color, gt, cfg.loss.lambda);
    FrequencyLosses fl = frequency_losses_with_grad(out.color, gt);
    ViewGradients vg;
    vg.stats.loss_color = cl.value;
    vg.stats.loss_low = fl.low;
    vg.stats.loss_high = fl.high;
    vg.stats.loss_total = cl.value + cfg.loss.lambda_low * fl.low + cfg.loss.lambda_high * fl.high;
    if (!std::isfinite(vg.stats.loss_total)) {
        char buf[256];
        std::snprintf(buf, sizeof buf,
                      "non-finite loss at iteration %d (view %d): color=%g low=%g high=%g", iter,
                      view.id, vg.stats.loss_color, vg.stats.loss_low, vg.stats.loss_high);
        throw NumericError(buf);
    }
    for (auto& v : fl.grad_low.data) v *= cfg.loss.lambda_low;
    for (auto& v : fl.grad_high.data) v *= cfg.loss.lambda_high;
    const std::vector<ImageBuffer> ups = {cl.grad, fl.grad_low, fl.grad_high};
    auto grads = backward(scene, view, out, std::span<const ImageBuffer>(ups), rc,
                          &vg.screen_mean_grad);
    vg.bundle = {std::move(grads[0]), std::move(grads[1]), std::move(grads[2])};
    vg.visible.assign(scene.size(), false);
    std::vector<bool> touched(out.splats.size(), false);
    for (const auto& t : out.tiles) {
        for (auto s : t.splats) touched[s] = true;
    }
    for (std::size_t s = 0; s < out.splats.size(); ++s) {
        if (touched[s]) vg.visible[out.splats[s].gaussian_index] = true;
    }
    return vg;
}

/// One optimization step on `view`: losses, gradients, conflict handling,
/// Adam update, quaternion renormalization and densification statistics.
inline StepStats train_step(GaussianSet& scene, Adam& opt, const CameraView& view,
                            const TrainConfig& cfg, int iter, double extent) {
    ViewGradients vg = view_gradients(scene, view, cfg, iter);
    CombinedGradients comb = combine_gradients(vg.bundle, scene.type, cfg.loss.mode);
    vg.stats.n_conflicted = comb.n_conflicted;
    vg.stats.n_total = comb.n_total;
    if (!comb.total.all_finite()) {
        throw NumericError("non-finite gradient at iteration " + std::to_string(iter) + " (view " +
                           std::to_string(view.id) + ")");
    }
    project_rotation_gradients(scene, comb.total);
    opt.step(scene, comb.total, cfg.lr, iter, cfg.iters, extent);
    for (auto& q : scene.rotation) q = normalize_quaternion(q);

    const double half_w = 0.5 * view.width, half_h = 0.5 * view.height;
    for (std::size_t i = 0; i < scene.size(); ++i) {
        if (!vg.visible[i]) continue;
        const Vec2& g = vg.screen_mean_grad[i];
        scene.grad_norm_sum[i] += std::hypot(g.x() * half_w, g.y() * half_h);
        scene.grad_sum[i] += comb.total.center(i);
        scene.observe_count[i] += 1;
    }
    return vg.stats;
}

// ---------------------------------------------------------------------------
// Densification
// ---------------------------------------------------------------------------

struct DensifyReport {
    std::size_t clones = 0;
    std::size_t splits = 0;  ///< split parents; each adds two children
    std::size_t pruned = 0;
};

/// Clone small and split large Gaussians with a high mean screen-space
/// gradient, then prune transparent ones. Accumulators are reset.
inline DensifyReport densify(GaussianSet& scene, Adam& opt, const TrainConfig& cfg, double extent) {
    scene.check_consistency();
    DensifyReport rep;
    const std::size_t n0 = scene.size();
    std::vector<std::pair<double, std::size_t>> candidates;
    for (std::size_t i = 0; i < n0; ++i) {
        if (scene.observe_count[i] == 0) continue;
        const double avg = scene.grad_norm_sum[i] / scene.observe_count[i];
        if (avg > cfg.densify_grad_threshold) candidates.push_back({-avg, i});
    }
    std::sort(candidates.begin(), candidates.end());
    const double split_size = cfg.split_scale_fraction * extent;
    std::vector<bool> remove(n0, false);
    std::vector<Gaussian> added;
    std::size_t budget = cfg.max_gaussians > n0 ? cfg.max_gaussians - n0 : 0;
    for (const auto& [neg, i] : candidates) {
        const Gaussian g = scene.get(i);
        const Vec3 s = g.scale();
        const bool surfel = g.type == GaussianType::Surfel2D;
        const double major = surfel ? std::max(s.x(), s.y()) : s.maxCoeff();
        if (major <= split_size) {
            if (budget < 1) continue;
            Gaussian c = g;
            const Vec3 gs = scene.grad_sum[i];
            if (gs.norm() > 0.0) c.center -= 0.1 * major * gs.normalized();
            added.push_back(c);
            ++rep.clones;
            --budget;
        } else {
            if (budget < 1) continue;  // two children replace the parent: net +1
            int axis = 0;
            for (int k = 1; k < (surfel ? 2 : 3); ++k) {
                if (s[k] > s[axis]) axis = k;
            }
            const Vec3 dir = quat_to_rotation(g.rotation).col(axis);
            for (double sign : {-1.0, 1.0}) {
                Gaussian c = g;
                c.center += sign * 0.5 * s[axis] * dir;
                c.log_scale.array() -= std::log(1.6);
                added.push_back(c);
            }
            remove[i] = true;
            ++rep.splits;
            --budget;
        }
    }
    for (const auto& g : added) scene.push_back(g);
    opt.append(added.size());
    std::vector<bool> keep(scene.size(), true);
    for (std::size_t i = 0; i < scene.size(); ++i) {
        if (i < n0 && remove[i]) {
            keep[i] = false;
            continue;
        }
        if (logistic(scene.opacity_logit[i]) < cfg.prune_opacity) {
            keep[i] = false;
            ++rep.pruned;
        }
    }
    scene.filter(keep);
    opt.filter(keep);
    scene.reset_accumulators();
    return rep;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct LogRecord {
    int iteration = 0;
    double loss_color = 0.0;
    double loss_low = 0.0;
    double loss_high = 0.0;
    double loss_total = 0.0;
    double psnr_test = 0.0;
    std::size_t n_gaussians = 0;
    std::size_t n_2d = 0;
    std::size_t n_3d = 0;
    std::size_t conv_3to2 = 0;  ///< since the previous record
    std::size_t conv_2to3 = 0;
    std::size_t n_conflicted = 0;
    std::size_t n_total = 0;
    double conflict_ratio = 0.0;
    double erank_p10 = 0.0;
    double erank_p50 = 0.0;
    double erank_p90 = 0.0;
};

struct TrainLog {
    std::vector<LogRecord> records;

    static constexpr const char* kHeader =
        "iteration,loss_color,loss_low,loss_high,loss_total,psnr_test,n_gaussians,n_2d,n_3d,"
        "conv_3to2,conv_2to3,n_conflicted,n_total,conflict_ratio,erank_p10,erank_p50,erank_p90";

    void write_csv(std::ostream& os) const {
        os << kHeader << '\n';
        char buf[512];
        for (const auto& r : records) {
            std::snprintf(buf, sizeof buf,
                          "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%zu,%zu,%zu,%zu,%zu,%zu,%zu,%.17g,%.17g,"
                          "%.17g,%.17g\n",
                          r.iteration, r.loss_color, r.loss_low, r.loss_high, r.loss_total,
                          r.psnr_test, r.n_gaussians, r.n_2d, r.n_3d, r.conv_3to2, r.conv_2to3,
                          r.n_conflicted, r.n_total, r.conflict_ratio, r.erank_p10, r.erank_p50,
                          r.erank_p90);
            os << buf;
        }
    }
};

inline ImageBuffer clamp01(ImageBuffer img) {
    for (auto& v : img.data) v = std::clamp(v, 0.0, 1.0);
    return img;
}

/// Mean PSNR of the clamped renders over views with a ground-truth image.
inline double mean_psnr(const GaussianSet& scene, const std::vector<CameraView>& views,
                        const RasterConfig& rc) {
    double total = 0.0;
    int n = 0;
    for (const auto& v : views) {
        if (!v.gt_image) continue;
        total += psnr(clamp01(render(scene, v, rc).color), *v.gt_image);
        ++n;
    }
    return n == 0 ? 0.0 : total / n;
}

struct FitResult {
    GaussianSet scene;
    TrainLog log;
};

/// Round-robin optimization over the training views with densification and
/// type exchange on their (scaled) schedules. Held-out PSNR is measured on
/// `test` (on `train` when `test` is empty).
inline FitResult fit(const std::vector<CameraView>& train, const std::vector<CameraView>& test,
                     const PointCloud& points, const TrainConfig& config,
                     const std::function<void(const LogRecord&)>& on_log = {}) {
    config.validate();
    if (train.empty()) throw ConfigError("fit: no training views");
    for (const auto& v : train) {
        v.validate();
        if (!v.gt_image) throw ConfigError("fit: training view without ground-truth image");
    }
    const TrainConfig cfg = config.scaled();
    const RasterConfig rc = cfg.raster();
    const double extent = scene_extent(train);
    const auto& eval_views = test.empty() ? train : test;

    FitResult res{init_scene(points, cfg.init_policy, cfg.seed, cfg.sh_degree), {}};
    GaussianSet& scene = res.scene;
    Adam opt(scene.size(), cfg.sh_degree);
    std::size_t conv_3to2 = 0, conv_2to3 = 0;

    auto record = [&](int iter, const StepStats& st) {
        LogRecord r;
        r.iteration = iter;
        r.loss_color = st.loss_color;
        r.loss_low = st.loss_low;
        r.loss_high = st.loss_high;
        r.loss_total = st.loss_total;
        r.psnr_test = mean_psnr(scene, eval_views, rc);
        r.n_gaussians = scene.size();
        r.n_2d = scene.count_of(GaussianType::Surfel2D);
        r.n_3d = scene.count_of(GaussianType::Volume3D);
        r.conv_3to2 = conv_3to2;
        r.conv_2to3 = conv_2to3;
        r.n_conflicted = st.n_conflicted;
        r.n_total = st.n_total;
        r.conflict_ratio = st.n_total ? static_cast<double>(st.n_conflicted) / st.n_total : 0.0;
        const auto er = erank_values(scene);
        r.erank_p10 = percentile(er, 10);
        r.erank_p50 = percentile(er, 50);
        r.erank_p90 = percentile(er, 90);
        conv_3to2 = conv_2to3 = 0;
        res.log.records.push_back(r);
        if (on_log) on_log(r);
    };

    StepStats initial;
    if (!scene.empty()) {
        // Losses and conflict census of the initial scene on the first view.
        const ViewGradients vg = view_gradients(scene, train.front(), cfg, 0);
        const CombinedGradients comb = combine_gradients(vg.bundle, scene.type, cfg.loss.mode);
        initial = vg.stats;
        initial.n_conflicted = comb.n_conflicted;
        initial.n_total = comb.n_total;
    }
    record(0, initial);

    for (int iter = 1; iter <= cfg.iters; ++iter) {
        const CameraView& view = train[static_cast<std::size_t>(iter - 1) % train.size()];
        StepStats st;
        if (!scene.empty()) st = train_step(scene, opt, view, cfg, iter, extent);
        if (cfg.densify_scheduled(iter)) densify(scene, opt, cfg, extent);
        if (cfg.exchange.scheduled(iter)) {
            const ExchangeReport er = exchange_pass(scene, cfg.exchange);
            for (const auto& c : er.changes) opt.on_type_change(c);
            conv_3to2 += er.conv_3to2;
            conv_2to3 += er.conv_2to3;
        }
        if (iter % cfg.log_interval == 0 || iter == cfg.iters) record(iter, st);
    }
    return res;
}

} // namespace eggs
