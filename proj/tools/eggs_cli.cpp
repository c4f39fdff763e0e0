// Command-line front end: train, render, eval, inspect, gen-scene.
//
// Exit codes: 0 success, 1 configuration / parse / I/O error, 2 numeric
// abort during training.

#include "eggs/io.hpp"
#include "eggs/metrics.hpp"
#include "eggs/scene_gen.hpp"
#include "eggs/train.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace eggs;

namespace {

struct CommonFlags {
    std::string scene;
    std::string out;
    std::string checkpoint;
    unsigned threads = 0;
    bool deterministic = false;
    ExchangeConfig exchange;
};

void add_threads(CLI::App* app, CommonFlags& f) {
    app->add_option("--threads", f.threads, "Worker threads (0 = hardware concurrency)")
        ->capture_default_str();
    app->add_flag("--deterministic", f.deterministic,
                  "Request fixed reduction order (default off; reductions are always ordered)")
        ->capture_default_str();
}

void add_modulation(CLI::App* app, ExchangeConfig& ex) {
    app->add_option("--theta-z", ex.theta_z, "Gate center for the latent z scale of surfels")
        ->capture_default_str();
    app->add_option("--t-z", ex.t_z, "Gate temperature")->capture_default_str();
    app->add_option("--lambda-z", ex.lambda_z, "Opacity coupling of the gated z scale")
        ->capture_default_str();
}

RasterConfig raster_config(const CommonFlags& f) {
    f.exchange.validate();
    RasterConfig rc;
    rc.set_modulation(f.exchange);
    rc.threads = f.threads;
    return rc;
}

std::string camera_file(const char* prefix, int id, const char* suffix) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s%03d%s", prefix, id, suffix);
    return buf;
}

std::string format_metric(double v) {
    if (std::isinf(v)) return "inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

// ---------------------------------------------------------------------------

int cmd_train(const CommonFlags& f, TrainConfig cfg, const std::string& mode,
              const std::string& init_type) {
    cfg.loss.mode = parse_combine_mode(mode);
    cfg.init_policy = parse_init_policy(init_type);
    cfg.exchange.theta_z = f.exchange.theta_z;
    cfg.exchange.t_z = f.exchange.t_z;
    cfg.exchange.lambda_z = f.exchange.lambda_z;
    cfg.exchange.theta_e = f.exchange.theta_e;
    cfg.threads = f.threads;
    cfg.validate();
    const LoadedScene scene = load_scene(f.scene);
    const fs::path out = f.out;
    fs::create_directories(out / "renders");

    const FitResult r = fit(scene.train, scene.test, scene.points, cfg, [](const LogRecord& rec) {
        std::fprintf(stderr, "iter %6d  loss %.6f  psnr %.3f  n %zu (2d %zu, 3d %zu)\n",
                     rec.iteration, rec.loss_total, rec.psnr_test, rec.n_gaussians, rec.n_2d,
                     rec.n_3d);
    });
    save_checkpoint(r.scene, out / "checkpoint.ply");
    {
        std::ofstream log(out / "log.csv", std::ios::binary | std::ios::trunc);
        if (!log) throw IoError("cannot write '" + (out / "log.csv").string() + "'");
        r.log.write_csv(log);
    }
    const RasterConfig rc = cfg.raster();
    const auto& views = scene.test.empty() ? scene.train : scene.test;
    for (const auto& v : views) {
        write_png(clamp01(render(r.scene, v, rc).color), out / "renders" / camera_file("", v.id, ".png"));
    }
    const auto& last = r.log.records.back();
    std::printf("final iteration %d  psnr_test %s  gaussians %zu\n", last.iteration,
                format_metric(last.psnr_test).c_str(), last.n_gaussians);
    return 0;
}

int cmd_render(const CommonFlags& f, int camera_id) {
    const GaussianSet model = load_checkpoint(f.checkpoint);
    const LoadedScene scene = load_scene(f.scene);
    const CameraView* cam = scene.find(camera_id);
    if (!cam) throw ConfigError("camera id " + std::to_string(camera_id) + " not in the manifest");
    const RenderOutput out = render(model, *cam, raster_config(f));
    fs::path path = f.out;
    if (fs::is_directory(path)) path /= camera_file("render_", camera_id, ".png");
    write_png(clamp01(out.color), path);
    fs::path depth = path;
    depth.replace_filename(path.stem().string() + "_depth.png");
    write_depth_png(out.depth, cam->far, depth);
    std::printf("wrote %s and %s\n", path.string().c_str(), depth.string().c_str());
    return 0;
}

int cmd_eval(const CommonFlags& f) {
    const GaussianSet model = load_checkpoint(f.checkpoint);
    const LoadedScene scene = load_scene(f.scene);
    if (scene.test.empty()) throw ConfigError("eval: the manifest has no test split");
    const RasterConfig rc = raster_config(f);
    double psnr_sum = 0.0, ssim_sum = 0.0, depth_sum = 0.0;
    int n_depth = 0;
    std::printf("camera,psnr,ssim,depth_l1\n");
    for (const auto& v : scene.test) {
        const RenderOutput out = render(model, v, rc);
        const ImageBuffer img = clamp01(out.color);
        const double p = psnr(img, *v.gt_image);
        const double s = ssim(img, *v.gt_image).value;
        std::string d = "";
        if (v.gt_depth) {
            const double l1 = depth_l1(out.depth, *v.gt_depth);
            depth_sum += l1;
            ++n_depth;
            d = format_metric(l1);
        }
        psnr_sum += p;
        ssim_sum += s;
        std::printf("%d,%s,%s,%s\n", v.id, format_metric(p).c_str(), format_metric(s).c_str(), d.c_str());
    }
    const double n = static_cast<double>(scene.test.size());
    std::printf("mean,%s,%s,%s\n", format_metric(psnr_sum / n).c_str(),
                format_metric(ssim_sum / n).c_str(),
                n_depth ? format_metric(depth_sum / n_depth).c_str() : "");
    return 0;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

int cmd_inspect(const std::string& log_path, const std::string& out_path) {
    std::ifstream in(log_path);
    if (!in) throw IoError("cannot open log '" + log_path + "'");
    std::string header;
    if (!std::getline(in, header)) throw ParseError(log_path + ": empty log");
    const auto cols = split_csv(header);
    auto col = [&](const std::string& name) {
        const auto it = std::find(cols.begin(), cols.end(), name);
        if (it == cols.end()) throw ParseError(log_path + ": missing column '" + name + "'");
        return static_cast<std::size_t>(it - cols.begin());
    };
    const std::size_t c_iter = col("iteration"), c_2d = col("n_2d"), c_3d = col("n_3d"),
                      c_conf = col("conflict_ratio"), c_p10 = col("erank_p10"),
                      c_p50 = col("erank_p50"), c_p90 = col("erank_p90");
    std::ostringstream os;
    os << "iteration,n_2d,n_3d,pct_3d,conflict_ratio,erank_p10,erank_p50,erank_p90\n";
    std::string line;
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        const auto v = split_csv(line);
        if (v.size() != cols.size()) {
            throw ParseError(log_path + ": line " + std::to_string(row) + " has " +
                             std::to_string(v.size()) + " fields, expected " + std::to_string(cols.size()));
        }
        const double n2 = std::stod(v[c_2d]), n3 = std::stod(v[c_3d]);
        const double pct = n2 + n3 > 0 ? 100.0 * n3 / (n2 + n3) : 0.0;
        char pct_buf[32];
        std::snprintf(pct_buf, sizeof pct_buf, "%.1f", pct);
        os << v[c_iter] << ',' << v[c_2d] << ',' << v[c_3d] << ',' << pct_buf << ',' << v[c_conf]
           << ',' << v[c_p10] << ',' << v[c_p50] << ',' << v[c_p90] << '\n';
    }
    if (out_path.empty() || out_path == "-") {
        std::cout << os.str();
    } else {
        std::ofstream o(out_path, std::ios::binary | std::ios::trunc);
        if (!o) throw IoError("cannot write '" + out_path + "'");
        o << os.str();
    }
    return 0;
}

int cmd_gen_scene(const std::string& kind, const std::string& out, GenOptions o) {
    o.kind = parse_scene_kind(kind);
    const GeneratedScene g = generate_scene(o);
    write_generated_scene(g, out);
    std::printf("wrote %s scene with %d views (%zu test) and %zu points to %s\n", kind.c_str(),
                o.views, g.test.size(), g.points.size(), out.c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"eggs: hybrid 2D/3D Gaussian splatting on the CPU"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "eggs 0.1.0");

    CommonFlags f;
    TrainConfig tc;
    std::string mode = to_string(tc.loss.mode), init_type = "random";
    int exchange_interval = tc.exchange.interval, densify_interval = tc.densify_interval;

    auto* train = app.add_subcommand("train", "Fit a scene and write checkpoint, log and renders");
    train->add_option("--scene", f.scene, "Scene manifest or directory")->required();
    std::string train_out, render_out;
    train->add_option("--out", train_out, "Output directory")->default_val("out");
    train->add_option("--iters", tc.iters, "Training iterations")->capture_default_str();
    train->add_option("--seed", tc.seed, "Random seed")->capture_default_str();
    add_threads(train, f);
    train->add_option("--theta-e", f.exchange.theta_e, "Effective-rank exchange threshold in (1, 3)")
        ->capture_default_str();
    add_modulation(train, f.exchange);
    train->add_option("--lambda-low", tc.loss.lambda_low, "Weight of the low-frequency loss")
        ->capture_default_str();
    train->add_option("--lambda-high", tc.loss.lambda_high, "Weight of the high-frequency loss")
        ->capture_default_str();
    train->add_option("--lambda-dssim", tc.loss.lambda, "D-SSIM share of the color loss")
        ->capture_default_str();
    train->add_option("--mode", mode, "Gradient combination")
        ->check(CLI::IsMember({"projection", "naive", "mask"}))
        ->capture_default_str();
    train->add_option("--init-type", init_type, "Initial primitive types")
        ->check(CLI::IsMember({"random", "all2d", "all3d"}))
        ->capture_default_str();
    train->add_option("--sh-degree", tc.sh_degree, "Spherical-harmonics degree (0-3)")
        ->capture_default_str();
    train->add_option("--exchange-interval", exchange_interval,
                      "Exchange interval on the 30000-iteration reference schedule")
        ->capture_default_str();
    train->add_option("--densify-interval", densify_interval,
                      "Densify interval on the 30000-iteration reference schedule")
        ->capture_default_str();

    int camera_id = 0;
    auto* render_cmd = app.add_subcommand("render", "Render one camera of a manifest");
    render_cmd->add_option("--checkpoint", f.checkpoint, "Checkpoint file")->required();
    render_cmd->add_option("--scene", f.scene, "Scene manifest or directory")->required();
    render_cmd->add_option("--camera-id", camera_id, "Camera id")->capture_default_str();
    render_cmd->add_option("--out", render_out, "Output PNG path or directory")
        ->default_val(".");
    add_threads(render_cmd, f);
    add_modulation(render_cmd, f.exchange);

    auto* eval = app.add_subcommand("eval", "PSNR, SSIM and depth L1 on the test split");
    eval->add_option("--checkpoint", f.checkpoint, "Checkpoint file")->required();
    eval->add_option("--scene", f.scene, "Scene manifest or directory")->required();
    add_threads(eval, f);
    add_modulation(eval, f.exchange);

    std::string log_path, inspect_out;
    auto* inspect = app.add_subcommand("inspect", "Type census and conflict diagnostics from a log");
    inspect->add_option("--log", log_path, "Training log CSV")->required();
    inspect->add_option("--out", inspect_out, "Output CSV, - for stdout")->default_val("-");

    std::string kind = "quads";
    std::string gen_out;
    GenOptions go;
    auto* gen = app.add_subcommand("gen-scene", "Write a synthetic fixture");
    gen->add_option("kind", kind, "Scene kind")
        ->check(CLI::IsMember({"quads", "sphere", "plane"}))
        ->capture_default_str();
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--views", go.views, "Number of cameras")->capture_default_str();
    gen->add_option("--test-views", go.test_views, "Held-out cameras")->capture_default_str();
    gen->add_option("--width", go.width, "Image width")->capture_default_str();
    gen->add_option("--height", go.height, "Image height")->capture_default_str();
    gen->add_option("--points", go.points, "Point-cloud size")->capture_default_str();
    gen->add_option("--seed", go.seed, "Random seed")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*train) {
            f.out = train_out;
            tc.exchange.interval = exchange_interval;
            tc.densify_interval = densify_interval;
            return cmd_train(f, tc, mode, init_type);
        }
        if (*render_cmd) {
            f.out = render_out;
            return cmd_render(f, camera_id);
        }
        if (*eval) return cmd_eval(f);
        if (*inspect) return cmd_inspect(log_path, inspect_out);
        if (*gen) {
            go.focal = go.width;
            return cmd_gen_scene(kind, gen_out, go);
        }
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
