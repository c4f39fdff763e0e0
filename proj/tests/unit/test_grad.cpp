#include "eggs/grad.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

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

/// 0.5 * ||I - target||^2 summed over pixels and channels.
ImageLoss l2_loss(const ImageBuffer& target) {
    return {[target](const ImageBuffer& img) {
                double s = 0.0;
                for (std::size_t k = 0; k < img.data.size(); ++k) {
                    const double r = img.data[k] - target.data[k];
                    s += 0.5 * r * r;
                }
                return s;
            },
            [target](const ImageBuffer& img) {
                ImageBuffer g(img.width, img.height, img.channels);
                for (std::size_t k = 0; k < img.data.size(); ++k) {
                    g.data[k] = img.data[k] - target.data[k];
                }
                return g;
            }};
}

ImageLoss single_channel(int x, int y, int c) {
    return {[=](const ImageBuffer& img) { return img.at(x, y, c); },
            [=](const ImageBuffer& img) {
                ImageBuffer g(img.width, img.height, img.channels);
                g.at(x, y, c) = 1.0;
                return g;
            }};
}

ImageBuffer random_image(std::mt19937_64& rng, int w, int h, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    ImageBuffer img(w, h, 3);
    for (auto& v : img.data) v = u(rng);
    return img;
}

} // namespace

TEST(Backward, ZeroUpstreamGivesZeroGradient) {
    std::mt19937_64 rng(1);
    const CameraView cam = test::simple_camera(16, 16, 20);
    const GaussianSet scene = test::random_scene(rng, cam);
    const RenderOutput out = render(scene, cam);
    const GradientSet g = backward(scene, cam, out, ImageBuffer(16, 16, 3));
    for (double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, ShBandZeroGradientIsAlphaTimesC0) {
    CameraView cam = test::simple_camera(16, 16, 20);
    cam.cx = cam.cy = 8.5;
    GaussianSet scene(0);
    scene.push_back(make(Vec3(0, 0, 4), Vec3::Constant(0.4), 0.7, Vec3(0.3, 0.3, 0.3),
                         GaussianType::Volume3D));
    const RenderOutput out = render(scene, cam);
    ImageBuffer up(16, 16, 3);
    up.at(8, 8, 0) = 1.0;
    const GradientSet g = backward(scene, cam, out, up);
    EXPECT_NEAR(g.at(0, param::kSh), 0.7 * 0.28209479177387814, 1e-12);
    EXPECT_EQ(g.at(0, param::kSh + 1), 0.0);
}

TEST(Backward, OpacityOfCoveringSplatMatchesFiniteDifference) {
    CameraView cam = test::simple_camera(16, 16, 20);
    cam.cx = cam.cy = 8.5;
    GaussianSet scene(0);
    scene.push_back(make(Vec3(0, 0, 4), Vec3::Constant(0.5), 0.6, Vec3(0.9, 0.2, 0.1),
                         GaussianType::Volume3D));
    const std::vector<ParamRef> sel = {{0, param::kOpacity}};
    const auto rep = finite_diff_check(scene, cam, single_channel(8, 8, 0), 1e-5, sel);
    ASSERT_EQ(rep.compared(), 1u);
    EXPECT_LT(rep.max_rel_error, 1e-4);
}

TEST(Backward, QuadraticOpacityLoss) {
    CameraView cam = test::simple_camera(16, 16, 20);
    GaussianSet scene(0);
    scene.push_back(make(Vec3(0.1, 0, 4), Vec3::Constant(0.3), 0.4, Vec3(0.9, 0.2, 0.1),
                         GaussianType::Surfel2D));
    const std::vector<ParamRef> sel = {{0, param::kOpacity}};
    std::mt19937_64 rng(3);
    const auto rep = finite_diff_check(scene, cam, l2_loss(random_image(rng, 16, 16)), 1e-5, sel);
    ASSERT_EQ(rep.compared(), 1u);
    EXPECT_LT(rep.max_rel_error, 1e-6);
}

TEST(Backward, ThreeGaussianPhotometricL2) {
    const CameraView cam = test::simple_camera(16, 16, 20);
    GaussianSet scene(1);
    auto add = [&](Gaussian g) {
        g.sh.resize(12, 0.0);
        g.sh[4] = 0.05;
        g.sh[9] = -0.04;
        scene.push_back(g);
    };
    add(make(Vec3(-0.3, 0.1, 3.5), Vec3(0.25, 0.3, 0.2), 0.6, Vec3(0.8, 0.3, 0.2),
             GaussianType::Volume3D, Vec4(0.9, 0.1, -0.3, 0.2).normalized()));
    add(make(Vec3(0.2, -0.2, 4.0), Vec3(0.35, 0.2, 0.05), 0.7, Vec3(0.2, 0.7, 0.3),
             GaussianType::Surfel2D, Vec4(0.8, 0.4, 0.2, -0.1).normalized()));
    add(make(Vec3(0.0, 0.3, 5.0), Vec3(0.4, 0.3, 0.3), 0.5, Vec3(0.1, 0.3, 0.9),
             GaussianType::Volume3D, Vec4(0.7, -0.2, 0.5, 0.3).normalized()));
    std::mt19937_64 rng(4);
    const auto params = all_params(scene);
    const auto rep = finite_diff_check(scene, cam, l2_loss(random_image(rng, 16, 16)), 1e-6, params);
    EXPECT_GT(rep.compared(), params.size() / 2);
    EXPECT_LT(rep.max_rel_error, 1e-3);
}

TEST(Backward, StepSizeValidated) {
    const CameraView cam = test::simple_camera(8, 8, 10);
    const GaussianSet scene(0);
    const std::vector<ParamRef> none;
    EXPECT_THROW(finite_diff_check(scene, cam, single_channel(0, 0, 0), 0.0, none), ConfigError);
    EXPECT_THROW(finite_diff_check(scene, cam, single_channel(0, 0, 0), 0.1, none), ConfigError);
}

TEST(Backward, NonFiniteLossPropagates) {
    const CameraView cam = test::simple_camera(8, 8, 10);
    const GaussianSet scene(0);
    const ImageLoss bad{[](const ImageBuffer&) { return std::nan(""); },
                        [](const ImageBuffer& img) {
                            return ImageBuffer(img.width, img.height, img.channels);
                        }};
    EXPECT_THROW(finite_diff_check(scene, cam, bad, 1e-4, std::vector<ParamRef>{}), NumericError);
}

TEST(Backward, FullyOccludedGaussianGetsZeroGradient) {
    CameraView cam = test::simple_camera(16, 16, 10);
    GaussianSet scene(0);
    // Opaque walls drive transmittance to the early-stop bound.
    for (int k = 0; k < 3; ++k) {
        scene.push_back(make(Vec3(0, 0, 2 + 0.5 * k), Vec3::Constant(5.0), 0.99, Vec3(1, 0, 0),
                             GaussianType::Volume3D));
    }
    scene.push_back(make(Vec3(0, 0, 6), Vec3::Constant(0.5), 0.8, Vec3(0, 0, 1),
                         GaussianType::Volume3D));
    const RenderOutput out = render(scene, cam);
    std::mt19937_64 rng(5);
    const GradientSet g = backward(scene, cam, out, random_image(rng, 16, 16, -1, 1));
    for (double v : g.row(3)) EXPECT_EQ(v, 0.0);
}

TEST(Backward, LinearInUpstream) {
    std::mt19937_64 rng(6);
    const CameraView cam = test::simple_camera(16, 16, 20);
    test::SceneOptions opt;
    opt.count = 8;
    const GaussianSet scene = test::random_scene(rng, cam, opt);
    const RenderOutput out = render(scene, cam);
    const ImageBuffer g1 = random_image(rng, 16, 16, -1, 1);
    const ImageBuffer g2 = random_image(rng, 16, 16, -1, 1);
    const double a = 0.7, b = -1.3;
    ImageBuffer mix(16, 16, 3);
    for (std::size_t k = 0; k < mix.data.size(); ++k) mix.data[k] = a * g1.data[k] + b * g2.data[k];
    const GradientSet r1 = backward(scene, cam, out, g1);
    const GradientSet r2 = backward(scene, cam, out, g2);
    const GradientSet rm = backward(scene, cam, out, mix);
    for (std::size_t k = 0; k < rm.data().size(); ++k) {
        const double expect = a * r1.data()[k] + b * r2.data()[k];
        EXPECT_NEAR(rm.data()[k], expect, 1e-10 * std::max(1.0, std::abs(expect)));
    }
}

TEST(Backward, MultipleUpstreamsMatchSeparatePasses) {
    std::mt19937_64 rng(12);
    const CameraView cam = test::simple_camera(16, 16, 20);
    const GaussianSet scene = test::random_scene(rng, cam);
    const RenderOutput out = render(scene, cam);
    const std::vector<ImageBuffer> ups = {random_image(rng, 16, 16, -1, 1),
                                          random_image(rng, 16, 16, -1, 1)};
    const auto both = backward(scene, cam, out, std::span<const ImageBuffer>(ups));
    EXPECT_EQ(both[0].data(), backward(scene, cam, out, ups[0]).data());
    EXPECT_EQ(both[1].data(), backward(scene, cam, out, ups[1]).data());
}

TEST(Backward, IntegrityChecks) {
    std::mt19937_64 rng(7);
    const CameraView cam = test::simple_camera(16, 16, 20);
    GaussianSet scene = test::random_scene(rng, cam);
    const RenderOutput out = render(scene, cam);
    EXPECT_THROW(backward(scene, cam, out, ImageBuffer(8, 8, 3)), IntegrityError);
    GaussianSet smaller = scene;
    smaller.filter(std::vector<bool>(scene.size(), false));
    EXPECT_THROW(backward(smaller, cam, out, ImageBuffer(16, 16, 3)), IntegrityError);
    ImageBuffer nan_grad(16, 16, 3);
    nan_grad.data[5] = std::nan("");
    EXPECT_THROW(backward(scene, cam, out, nan_grad), NumericError);
}

TEST(Backward, SurfelZScaleOnlyThroughModulation) {
    // With the gate closed (s_z << theta_z) the z scale never reaches the footprint.
    CameraView cam = test::simple_camera(16, 16, 20);
    GaussianSet scene(0);
    scene.push_back(make(Vec3(0.05, 0.02, 4), Vec3(0.3, 0.2, 0.1), 0.6, Vec3(0.9, 0.2, 0.1),
                         GaussianType::Surfel2D, Vec4(0.9, 0.2, 0.3, 0.1).normalized()));
    std::mt19937_64 rng(8);
    const RenderOutput out = render(scene, cam);
    const GradientSet g = backward(scene, cam, out, random_image(rng, 16, 16, -1, 1));
    EXPECT_EQ(g.at(0, param::kLogScale + 2), 0.0);

    // Open gate: the gradient through the modulated opacity matches FD.
    RasterConfig cfg;
    cfg.t_z = 0.5;  // a soft gate keeps central differences accurate
    scene.log_scale[0][2] = std::log(1.2);
    const std::vector<ParamRef> sel = {{0, param::kLogScale + 2}};
    const auto rep = finite_diff_check(scene, cam, l2_loss(random_image(rng, 16, 16)), 1e-5, sel, cfg);
    ASSERT_EQ(rep.compared(), 1u);
    EXPECT_GT(std::abs(rep.entries[0].analytic), 1e-6);
    EXPECT_LT(rep.max_rel_error, 1e-5);
}

TEST(Backward, RandomScenesAgreeWithFiniteDifferences) {
    std::mt19937_64 rng(2024);
    std::size_t compared = 0, within = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const CameraView cam = test::simple_camera(16, 16, 20);
        test::SceneOptions opt;
        opt.count = 1 + static_cast<int>(rng() % 8);
        const GaussianSet scene = test::random_scene(rng, cam, opt);
        const auto params = all_params(scene);
        const auto rep = finite_diff_check(scene, cam, l2_loss(random_image(rng, 16, 16)), 1e-6, params);
        compared += rep.compared();
        within += rep.within(1e-3);
    }
    ASSERT_GT(compared, 0u);
    EXPECT_GE(static_cast<double>(within) / static_cast<double>(compared), 0.99);
}

TEST(Backward, DeterministicAcrossThreadCounts) {
    std::mt19937_64 rng(13);
    const CameraView cam = test::simple_camera(40, 40, 40);
    test::SceneOptions opt;
    opt.count = 30;
    const GaussianSet scene = test::random_scene(rng, cam, opt);
    RasterConfig one, many;
    one.threads = 1;
    many.threads = 5;
    const ImageBuffer up = random_image(rng, 40, 40, -1, 1);
    const auto a = backward(scene, cam, render(scene, cam, one), up, one);
    const auto b = backward(scene, cam, render(scene, cam, many), up, many);
    EXPECT_EQ(a.data(), b.data());
}

TEST(Backward, RotationProjectionIsTangent) {
    std::mt19937_64 rng(14);
    const CameraView cam = test::simple_camera(16, 16, 20);
    GaussianSet scene = test::random_scene(rng, cam);
    for (auto& q : scene.rotation) q *= 1.7;
    const RenderOutput out = render(scene, cam);
    GradientSet g = backward(scene, cam, out, random_image(rng, 16, 16, -1, 1));
    project_rotation_gradients(scene, g);
    for (std::size_t i = 0; i < scene.size(); ++i) {
        Vec4 gr;
        for (int k = 0; k < 4; ++k) gr[k] = g.at(i, param::kRotation + k);
        EXPECT_NEAR(gr.dot(scene.rotation[i].normalized()), 0.0, 1e-12);
    }
}
