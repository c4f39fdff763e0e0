#include "eggs/train.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

using namespace eggs;

namespace {

Gaussian make(const Vec3& center, const Vec3& scale, double opacity, const Vec3& rgb,
              GaussianType type, const Vec4& q = Vec4(1, 0, 0, 0)) {
    Gaussian g;
    g.center = center;
    g.log_scale = scale.array().log();
    g.rotation = q;
    g.opacity_logit = logit(opacity);
    g.sh = {rgb_to_sh0(rgb[0]), rgb_to_sh0(rgb[1]), rgb_to_sh0(rgb[2])};
    g.type = type;
    return g;
}

TrainConfig small_config() {
    TrainConfig c;
    c.sh_degree = 0;
    return c;
}

/// Cameras on a short arc around the origin, each holding a render of `truth`.
std::vector<CameraView> arc_views(const GaussianSet& truth, int n, int size) {
    std::vector<CameraView> views;
    for (int k = 0; k < n; ++k) {
        CameraView v = test::simple_camera(size, size, size);
        v.id = k;
        const double a = -0.3 + 0.6 * k / std::max(1, n - 1);
        v.world_to_camera =
            CameraView::look_at(Vec3(4 * std::sin(a), 0, -4 * std::cos(a)), Vec3::Zero(), Vec3(0, -1, 0));
        v.gt_image = render(truth, v).color;
        views.push_back(v);
    }
    return views;
}

GaussianSet blob_scene(int sh_degree) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    GaussianSet s(sh_degree);
    for (int i = 0; i < 12; ++i) {
        Gaussian g = make(Vec3(u(rng), u(rng), u(rng)), Vec3::Constant(0.15), 0.8,
                          Vec3(0.5 + u(rng), 0.5 + u(rng), 0.5 + u(rng)),
                          i % 2 ? GaussianType::Volume3D : GaussianType::Surfel2D);
        g.sh.resize(static_cast<std::size_t>(s.sh_stride()), 0.0);
        s.push_back(g);
    }
    return s;
}

PointCloud points_of(const GaussianSet& s) {
    PointCloud pc;
    for (std::size_t i = 0; i < s.size(); ++i) {
        pc.positions.push_back(s.center[i]);
        pc.colors.push_back(Vec3::Constant(0.5));
    }
    return pc;
}

} // namespace

TEST(Schedule, ScalesFromReferenceLength) {
    EXPECT_EQ(scale_schedule(500, 30000), 500);
    EXPECT_EQ(scale_schedule(500, 2000), 33);
    EXPECT_EQ(scale_schedule(100, 2000), 7);
    EXPECT_EQ(scale_schedule(15000, 2000), 1000);
    EXPECT_EQ(scale_schedule(100, 10), 1);
    EXPECT_EQ(scale_schedule(500, 0), 1);
}

TEST(Schedule, CenterRateDecaysLogLinearly) {
    LearningRates lr;
    EXPECT_DOUBLE_EQ(lr.center_at(0, 100), 1.6e-4);
    EXPECT_NEAR(lr.center_at(100, 100), 1.6e-6, 1e-18);
    EXPECT_NEAR(lr.center_at(50, 100), std::sqrt(1.6e-4 * 1.6e-6), 1e-16);
}

TEST(TrainConfig, RejectsBadValues) {
    TrainConfig c;
    c.iters = -1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.sh_degree = 4;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.loss.lambda = 1.5;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.densify_interval = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.lr.opacity = -1;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_NO_THROW(TrainConfig{}.validate());
}

TEST(InitPolicy, Parses) {
    EXPECT_EQ(parse_init_policy("random"), InitTypePolicy::Random);
    EXPECT_EQ(parse_init_policy("all2d"), InitTypePolicy::All2D);
    EXPECT_EQ(parse_init_policy("all3d"), InitTypePolicy::All3D);
    EXPECT_THROW(parse_init_policy("half"), ConfigError);
}

TEST(Knn, MatchesBruteForce) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<Vec3> pts;
    for (int i = 0; i < 300; ++i) pts.emplace_back(u(rng), u(rng), u(rng));
    pts.push_back(pts[3]);  // duplicate point
    const auto got = knn_mean_distance(pts);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        std::vector<double> d;
        for (std::size_t j = 0; j < pts.size(); ++j) {
            if (j != i) d.push_back((pts[j] - pts[i]).norm());
        }
        std::sort(d.begin(), d.end());
        EXPECT_NEAR(got[i], (d[0] + d[1] + d[2]) / 3.0, 1e-12) << i;
    }
}

TEST(Init, SinglePointUsesFallbackScale) {
    PointCloud pc;
    pc.positions = {Vec3(1, 2, 3)};
    pc.colors = {Vec3(0.2, 0.4, 0.6)};
    const GaussianSet s = init_scene(pc, InitTypePolicy::All3D, 0, 1);
    ASSERT_EQ(s.size(), 1u);
    EXPECT_NEAR(s.get(0).scale()[0], 0.01, 1e-15);
    EXPECT_NEAR(s.get(0).opacity(), 0.1, 1e-15);
    EXPECT_EQ(s.sh_degree(), 1);
    const Vec3 rgb = eval_sh(s.sh_of(0), 1, Vec3(0, 0, 1));
    EXPECT_NEAR(rgb[0], 0.2, 1e-12);
    EXPECT_NEAR(rgb[2], 0.6, 1e-12);
    EXPECT_EQ(s.get(0).rotation, Vec4(1, 0, 0, 0));
}

TEST(Init, UnitSquarePlusApex) {
    // Corners of a unit square and one point above its center.
    PointCloud pc;
    pc.positions = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(1, 1, 0), Vec3(0.5, 0.5, 1)};
    const GaussianSet s = init_scene(pc, InitTypePolicy::All2D, 0);
    const double apex = std::sqrt(1.5);
    EXPECT_NEAR(s.get(0).scale()[0], (1.0 + 1.0 + apex) / 3.0, 1e-12);
    EXPECT_NEAR(s.get(4).scale()[1], apex, 1e-12);
    EXPECT_EQ(s.count_of(GaussianType::Surfel2D), 5u);
}

TEST(Init, CoincidentPointsFloorScale) {
    PointCloud pc;
    pc.positions.assign(5, Vec3(0.3, 0.3, 0.3));
    const GaussianSet s = init_scene(pc, InitTypePolicy::All3D, 0);
    EXPECT_NEAR(s.get(0).log_scale[0], std::log(1e-7), 1e-12);
}

TEST(Init, RandomPolicyFollowsSeed) {
    PointCloud pc;
    for (int i = 0; i < 200; ++i) pc.positions.emplace_back(i * 0.01, 0, 0);
    const auto a = init_scene(pc, InitTypePolicy::Random, 42);
    const auto b = init_scene(pc, InitTypePolicy::Random, 42);
    const auto c = init_scene(pc, InitTypePolicy::Random, 43);
    EXPECT_EQ(a.type, b.type);
    EXPECT_NE(a.type, c.type);
    std::mt19937_64 rng(42);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.type[i], rng() & 1u);
    const auto n2 = a.count_of(GaussianType::Surfel2D);
    EXPECT_GT(n2, 60u);
    EXPECT_LT(n2, 140u);
}

TEST(Init, RejectsEmptyOrMismatched) {
    EXPECT_THROW(init_scene({}, InitTypePolicy::All3D, 0), ConfigError);
    PointCloud pc;
    pc.positions = {Vec3::Zero(), Vec3::Ones()};
    pc.colors = {Vec3::Zero()};
    EXPECT_THROW(init_scene(pc, InitTypePolicy::All3D, 0), ConfigError);
}

TEST(Extent, SpreadOfCameraCenters) {
    CameraView a = test::simple_camera(8, 8, 8), b = a;
    a.world_to_camera = CameraView::look_at(Vec3(-1, 0, 0), Vec3(0, 0, 5), Vec3(0, -1, 0));
    b.world_to_camera = CameraView::look_at(Vec3(3, 0, 0), Vec3(0, 0, 5), Vec3(0, -1, 0));
    EXPECT_NEAR(scene_extent({a, b}), 2.2, 1e-12);
    EXPECT_EQ(scene_extent({a}), 1.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    // With bias correction the first update is lr * g / (|g| + eps).
    GaussianSet s(0);
    s.push_back(make(Vec3(0, 0, 4), Vec3::Constant(0.1), 0.5, Vec3(0.5, 0.5, 0.5),
                     GaussianType::Volume3D));
    GradientSet g(1, 0);
    g.at(0, param::kCenter) = 3.0;
    g.at(0, param::kOpacity) = -1e-3;
    g.at(0, param::kSh + 1) = 0.5;
    Adam opt(1, 0);
    LearningRates lr;
    const Gaussian before = s.get(0);
    opt.step(s, g, lr, 0, 100, 2.0);
    EXPECT_NEAR(s.center[0].x(), before.center.x() - 1.6e-4 * 2.0, 1e-15);
    EXPECT_NEAR(s.opacity_logit[0], before.opacity_logit + 5e-2, 1e-12);
    EXPECT_NEAR(s.sh[1], before.sh[1] - 2.5e-3, 1e-15);
    EXPECT_EQ(s.center[0].y(), before.center.y());
    EXPECT_EQ(opt.steps(), 1);
}

TEST(Adam, HigherShBandsUseReducedRate) {
    GaussianSet s(1);
    Gaussian g0 = make(Vec3(0, 0, 4), Vec3::Constant(0.1), 0.5, Vec3(0.5, 0.5, 0.5),
                       GaussianType::Volume3D);
    g0.sh.resize(12, 0.0);
    s.push_back(g0);
    GradientSet g(1, 1);
    g.at(0, param::kSh + 3) = 1.0;
    Adam opt(1, 1);
    opt.step(s, g, LearningRates{}, 0, 10, 1.0);
    EXPECT_NEAR(s.sh[3], -2.5e-3 / 20.0, 1e-15);
}

TEST(Adam, MomentsFollowAxisPermutation) {
    Adam opt(1, 0);
    GaussianSet s(0);
    s.push_back(make(Vec3(0, 0, 4), Vec3(0.1, 0.2, 0.3), 0.5, Vec3(0.5, 0.5, 0.5),
                     GaussianType::Volume3D));
    GradientSet g(1, 0);
    for (int k = 0; k < 3; ++k) g.at(0, param::kLogScale + k) = k + 1.0;
    g.at(0, param::kRotation + 1) = 1.0;
    opt.step(s, g, LearningRates{}, 0, 10, 1.0);
    const auto m0 = std::vector<double>(opt.first_moment(0).begin(), opt.first_moment(0).end());
    opt.on_type_change({0, ExchangeDirection::To2D, AxisPermutation::X});
    const Vec3 old(m0[param::kLogScale], m0[param::kLogScale + 1], m0[param::kLogScale + 2]);
    const Vec3 want = permutation_matrix(AxisPermutation::X) * old;
    for (int k = 0; k < 3; ++k) {
        EXPECT_EQ(opt.first_moment(0)[static_cast<std::size_t>(param::kLogScale + k)], want[k]);
    }
    EXPECT_EQ(opt.first_moment(0)[param::kRotation + 1], 0.0);
    EXPECT_EQ(opt.second_moment(0)[param::kRotation + 1], 0.0);
}

TEST(TrainStep, PerfectReconstructionIsAFixedPoint) {
    // Adam normalizes the step, so the property is checked on the gradient.
    const GaussianSet s = blob_scene(0);
    auto views = arc_views(s, 1, 24);
    const ViewGradients vg = view_gradients(s, views[0], small_config(), 1);
    EXPECT_NEAR(vg.stats.loss_total, 0.0, 1e-12);
    const auto comb = combine_gradients(vg.bundle, s.type, CombineMode::Projection);
    double worst = 0.0;
    for (double g : comb.total.data()) worst = std::max(worst, std::abs(g));
    EXPECT_LT(worst, 1e-12);
}

TEST(TrainStep, SingleGaussianConvergesToShiftedTarget) {
    CameraView cam = test::simple_camera(8, 8, 8);
    GaussianSet truth(0);
    truth.push_back(make(Vec3(0.5, 0, 4), Vec3::Constant(0.6), 0.9, Vec3(0.9, 0.3, 0.2),
                         GaussianType::Volume3D));
    cam.gt_image = render(truth, cam).color;
    GaussianSet s(0);
    s.push_back(make(Vec3(0, 0, 4), Vec3::Constant(0.6), 0.9, Vec3(0.9, 0.3, 0.2),
                     GaussianType::Volume3D));
    TrainConfig cfg = small_config();
    cfg.lr.center_init = cfg.lr.center_final = 0.02;
    cfg.iters = 50;
    Adam opt(1, 0);
    const double first = train_step(s, opt, cam, cfg, 1, 1.0).loss_total;
    double last = first;
    for (int it = 2; it <= 50; ++it) last = train_step(s, opt, cam, cfg, it, 1.0).loss_total;
    EXPECT_LT(last, 0.1 * first);
    EXPECT_NEAR(s.center[0].x(), 0.5, 0.1);
}

TEST(TrainStep, CombineModeChangesTheUpdate) {
    std::mt19937_64 rng(3);
    CameraView cam = test::simple_camera(24, 24, 24);
    test::SceneOptions o;
    o.sh_degree = 0;
    o.count = 10;
    const GaussianSet truth = test::random_scene(rng, cam, o);
    cam.gt_image = render(truth, cam).color;
    const GaussianSet start = test::random_scene(rng, cam, o);

    auto run = [&](CombineMode m, StepStats* st) {
        GaussianSet s = start;
        Adam opt(s.size(), 0);
        TrainConfig cfg = small_config();
        cfg.loss.mode = m;
        *st = train_step(s, opt, cam, cfg, 1, 1.0);
        return s;
    };
    StepStats sp, sn;
    const GaussianSet proj = run(CombineMode::Projection, &sp);
    const GaussianSet naive = run(CombineMode::Naive, &sn);
    EXPECT_EQ(sp.loss_total, sn.loss_total);
    ASSERT_GT(sp.n_conflicted, 0u);
    EXPECT_EQ(sn.n_conflicted, sp.n_conflicted);  // the census does not depend on the mode
    double diff = 0.0;
    for (std::size_t i = 0; i < proj.size(); ++i) {
        diff += (proj.center[i] - naive.center[i]).norm() +
                std::abs(proj.opacity_logit[i] - naive.opacity_logit[i]);
    }
    EXPECT_GT(diff, 0.0);
}

TEST(TrainStep, AccumulatesDensifyStatistics) {
    GaussianSet s = blob_scene(0);
    auto views = arc_views(s, 1, 24);
    for (auto& c : s.center) c += Vec3(0.05, 0, 0);
    Adam opt(s.size(), 0);
    train_step(s, opt, views[0], small_config(), 1, 1.0);
    int seen = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s.observe_count[i] == 0) continue;
        ++seen;
        EXPECT_GE(s.grad_norm_sum[i], 0.0);
    }
    EXPECT_GT(seen, 0);
}

TEST(TrainStep, ErrorsNameTheProblem) {
    GaussianSet s = blob_scene(0);
    auto views = arc_views(s, 1, 16);
    Adam opt(s.size(), 0);
    CameraView no_gt = views[0];
    no_gt.gt_image.reset();
    EXPECT_THROW(train_step(s, opt, no_gt, small_config(), 1, 1.0), ConfigError);
    CameraView bad = views[0];
    bad.gt_image->data[5] = std::nan("");
    try {
        train_step(s, opt, bad, small_config(), 17, 1.0);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("iteration 17"), std::string::npos);
    }
}

TEST(TrainStep, OverflowIsNumericError) {
    GaussianSet s = blob_scene(0);
    auto views = arc_views(s, 1, 32);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : views[0].gt_image->data) v = u(rng);
    Adam opt(s.size(), 0);
    TrainConfig cfg = small_config();
    cfg.loss.lambda_high = 1e308;
    EXPECT_THROW(train_step(s, opt, views[0], cfg, 3, 1.0), NumericError);
}

TEST(Densify, CloneSplitPruneCounts) {
    GaussianSet s(0);
    auto add = [&](double scale, double opacity, double grad) {
        s.push_back(make(Vec3(0, 0, 4), Vec3::Constant(scale), opacity, Vec3(0.5, 0.5, 0.5),
                         GaussianType::Volume3D));
        const auto i = s.size() - 1;
        s.grad_norm_sum[i] = 2.0 * grad;
        s.grad_sum[i] = Vec3(1, 0, 0);
        s.observe_count[i] = 2;
    };
    add(0.005, 0.5, 1e-3);  // small, hot: clone
    add(0.2, 0.5, 1e-3);    // large, hot: split
    add(0.2, 0.5, 1e-5);    // cold: untouched
    add(0.2, 0.001, 1e-5);  // transparent: pruned
    Adam opt(s.size(), 0);
    TrainConfig cfg = small_config();
    const DensifyReport r = densify(s, opt, cfg, 1.0);
    EXPECT_EQ(r.clones, 1u);
    EXPECT_EQ(r.splits, 1u);
    EXPECT_EQ(r.pruned, 1u);
    EXPECT_EQ(s.size(), 4u + r.clones + r.splits - r.pruned);
    EXPECT_EQ(opt.size(), s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        EXPECT_EQ(s.observe_count[i], 0);
        EXPECT_EQ(s.grad_norm_sum[i], 0.0);
    }
    // Order after filtering: clone parent, cold, clone, two split children.
    ASSERT_EQ(s.size(), 5u);
    EXPECT_LT(s.center[2].x(), 0.0);  // clone moved against the accumulated gradient
    EXPECT_NEAR(s.center[2].x(), -0.1 * 0.005, 1e-15);
    EXPECT_NEAR(s.center[3].x(), -0.1, 1e-12);
    EXPECT_NEAR(s.center[4].x(), 0.1, 1e-12);
    EXPECT_NEAR(s.get(3).scale()[0], 0.2 / 1.6, 1e-12);
}

TEST(Densify, SurfelSplitsAlongTangentAxis) {
    GaussianSet s(0);
    s.push_back(make(Vec3(0, 0, 4), Vec3(0.1, 0.3, 5.0), 0.5, Vec3(0.5, 0.5, 0.5),
                     GaussianType::Surfel2D));
    s.grad_norm_sum[0] = 1.0;
    s.observe_count[0] = 1;
    Adam opt(1, 0);
    densify(s, opt, small_config(), 1.0);
    ASSERT_EQ(s.size(), 2u);
    EXPECT_NEAR(s.center[0].y(), -0.15, 1e-12);
    EXPECT_NEAR(s.center[1].y(), 0.15, 1e-12);
    EXPECT_NEAR(s.center[0].z(), 4.0, 1e-12);
}

TEST(Densify, PruneOnlyAtLowOpacity) {
    GaussianSet s(0);
    for (double a : {0.001, 0.0049, 0.0051, 0.5}) {
        s.push_back(make(Vec3(0, 0, 4), Vec3::Constant(0.1), a, Vec3(0.5, 0.5, 0.5),
                         GaussianType::Volume3D));
    }
    Adam opt(s.size(), 0);
    const auto r = densify(s, opt, small_config(), 1.0);
    EXPECT_EQ(r.pruned, 2u);
    EXPECT_EQ(s.size(), 2u);
}

TEST(Densify, RespectsGaussianCap) {
    GaussianSet s(0);
    for (int i = 0; i < 10; ++i) {
        s.push_back(make(Vec3(0, 0, 4), Vec3::Constant(0.001), 0.5, Vec3(0.5, 0.5, 0.5),
                         GaussianType::Volume3D));
        s.grad_norm_sum.back() = 1.0 + i;
        s.observe_count.back() = 1;
    }
    Adam opt(s.size(), 0);
    TrainConfig cfg = small_config();
    cfg.max_gaussians = 13;
    const auto r = densify(s, opt, cfg, 1.0);
    EXPECT_EQ(r.clones, 3u);
    EXPECT_EQ(s.size(), 13u);
}

TEST(Fit, ZeroItersReturnsInitializedScene) {
    const GaussianSet truth = blob_scene(0);
    const auto views = arc_views(truth, 2, 16);
    const PointCloud pc = points_of(truth);
    TrainConfig cfg = small_config();
    cfg.iters = 0;
    cfg.seed = 9;
    const FitResult r = fit(views, {}, pc, cfg);
    const GaussianSet init = init_scene(pc, cfg.init_policy, 9, 0);
    EXPECT_EQ(r.scene.center, init.center);
    EXPECT_EQ(r.scene.log_scale, init.log_scale);
    EXPECT_EQ(r.scene.sh, init.sh);
    EXPECT_EQ(r.scene.type, init.type);
    ASSERT_EQ(r.log.records.size(), 1u);
    EXPECT_EQ(r.log.records[0].iteration, 0);
}

TEST(Fit, BitwiseReproducibleAndImproves) {
    const GaussianSet truth = blob_scene(0);
    const auto views = arc_views(truth, 3, 20);
    const PointCloud pc = points_of(truth);
    TrainConfig cfg = small_config();
    cfg.iters = 120;
    cfg.log_interval = 40;
    cfg.seed = 1;
    cfg.lr.center_init = cfg.lr.center_final = 0.0;  // greedy colors/opacity
    std::vector<int> seen;
    const FitResult a = fit(views, {}, pc, cfg, [&](const LogRecord& r) { seen.push_back(r.iteration); });
    cfg.threads = 3;
    const FitResult b = fit(views, {}, pc, cfg);
    std::ostringstream ca, cb;
    a.log.write_csv(ca);
    b.log.write_csv(cb);
    EXPECT_EQ(ca.str(), cb.str());
    EXPECT_EQ(a.scene.center, b.scene.center);
    EXPECT_EQ(a.scene.sh, b.scene.sh);
    EXPECT_EQ(a.scene.opacity_logit, b.scene.opacity_logit);
    EXPECT_EQ(seen, (std::vector<int>{0, 40, 80, 120}));
    EXPECT_GT(a.log.records.back().psnr_test, a.log.records.front().psnr_test);
    EXPECT_EQ(ca.str().substr(0, ca.str().find('\n')), TrainLog::kHeader);
}

TEST(Fit, LogCountsAreConsistent) {
    const GaussianSet truth = blob_scene(0);
    const auto views = arc_views(truth, 2, 16);
    TrainConfig cfg = small_config();
    cfg.iters = 60;
    cfg.log_interval = 20;
    const FitResult r = fit(views, {views[0]}, points_of(truth), cfg);
    for (const auto& rec : r.log.records) {
        EXPECT_EQ(rec.n_2d + rec.n_3d, rec.n_gaussians);
        EXPECT_LE(rec.n_conflicted, rec.n_total);
        EXPECT_LE(rec.erank_p10, rec.erank_p50);
        EXPECT_LE(rec.erank_p50, rec.erank_p90);
        EXPECT_TRUE(std::isfinite(rec.loss_total));
    }
    EXPECT_EQ(r.log.records.back().n_gaussians, r.scene.size());
}

TEST(Fit, RejectsViewsWithoutImages) {
    const GaussianSet truth = blob_scene(0);
    auto views = arc_views(truth, 2, 16);
    views[1].gt_image.reset();
    EXPECT_THROW(fit(views, {}, points_of(truth), small_config()), ConfigError);
    EXPECT_THROW(fit({}, {}, points_of(truth), small_config()), ConfigError);
}
