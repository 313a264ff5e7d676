// deanet: single image dehazing workbench.
//
// Subcommands: synth, train, reparam, infer, bench, eval, gradcheck.
// Machine-readable JSON goes to stdout, human logs to stderr.
// Exit codes: 0 ok, 2 usage, 3 I/O, 4 numeric divergence, 5 verification
// failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "deanet/gradcheck.hpp"
#include "deanet/hazelab.hpp"
#include "deanet/network.hpp"
#include "deanet/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace deanet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitVerify = 5;

[[noreturn]] void fail(int code, const std::string& msg) {
    std::cerr << "deanet: " << msg << "\n";
    std::exit(code);
}

json metric_json(double v) {
    if (std::isfinite(v)) return v;
    return v > 0 ? "inf" : "-inf";
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    std::vector<std::uint8_t> bytes(text.begin(), text.end());
    WeightArchive::write_file_atomic(path, bytes);
}

struct SizeArg {
    int w = 0;
    int h = 0;
};

SizeArg parse_size(const std::string& s) {
    const auto x = s.find('x');
    if (x == std::string::npos) fail(kExitUsage, "size must be WxH, got '" + s + "'");
    try {
        SizeArg out;
        out.w = std::stoi(s.substr(0, x));
        out.h = std::stoi(s.substr(x + 1));
        if (out.w < 1 || out.h < 1) throw std::invalid_argument("non-positive");
        return out;
    } catch (const std::exception&) {
        fail(kExitUsage, "size must be WxH with positive integers, got '" + s + "'");
    }
}

// ---------------------------------------------------------------------------
// Run configuration (desk-scale defaults), schema-validated JSON

struct RunConfig {
    int channels = 8;
    std::array<int, 5> blocks = {1, 1, 2, 1, 1};
    int crop = 32;
    int batch = 4;
    int iters = 2000;
    double lr_init = 1e-4;
    double lr_final = 1e-6;
    std::uint64_t seed = 0;
};

RunConfig load_run_config(const fs::path& path) {
    RunConfig cfg;
    std::ifstream in(path);
    if (!in) fail(kExitIo, "cannot open config " + path.string());
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        fail(kExitUsage, "config " + path.string() + " is not valid JSON: " + e.what());
    }
    if (!doc.is_object()) fail(kExitUsage, "config must be a JSON object");
    static const std::set<std::string> known = {"channels", "blocks",  "crop",     "batch",
                                                "iters",    "lr_init", "lr_final", "seed"};
    for (const auto& [key, value] : doc.items()) {
        if (!known.count(key)) fail(kExitUsage, "config: unknown key '" + key + "'");
    }
    try {
        if (doc.contains("channels")) cfg.channels = doc["channels"].get<int>();
        if (doc.contains("blocks")) {
            const auto arr = doc["blocks"];
            if (!arr.is_array() || arr.size() != 5) {
                fail(kExitUsage, "config: blocks must be an array of 5 integers");
            }
            for (std::size_t i = 0; i < 5; ++i) cfg.blocks[i] = arr[i].get<int>();
        }
        if (doc.contains("crop")) cfg.crop = doc["crop"].get<int>();
        if (doc.contains("batch")) cfg.batch = doc["batch"].get<int>();
        if (doc.contains("iters")) cfg.iters = doc["iters"].get<int>();
        if (doc.contains("lr_init")) cfg.lr_init = doc["lr_init"].get<double>();
        if (doc.contains("lr_final")) cfg.lr_final = doc["lr_final"].get<double>();
        if (doc.contains("seed")) cfg.seed = doc["seed"].get<std::uint64_t>();
    } catch (const json::exception& e) {
        fail(kExitUsage, std::string("config: bad value type: ") + e.what());
    }
    return cfg;
}

NetworkConfig to_network_config(const RunConfig& rc) {
    NetworkConfig cfg;
    cfg.base_channels = rc.channels;
    cfg.block_counts = rc.blocks;
    return cfg;
}

TrainConfig to_train_config(const RunConfig& rc) {
    TrainConfig cfg;
    cfg.lr_init = rc.lr_init;
    cfg.lr_final = rc.lr_final;
    cfg.batch_size = rc.batch;
    cfg.total_iters = rc.iters;
    cfg.crop_size = rc.crop;
    cfg.seed = rc.seed;
    return cfg;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
    std::string clean_dir;
    int procedural = -1;
    std::string out;
    double beta_min = 0.5, beta_max = 1.5;
    double airlight_min = 0.7, airlight_max = 1.0;
    std::string depth = "smooth-noise";
    std::uint64_t seed = 0;
    std::string size = "64x64";
    int per_clean = 1;
};

int cmd_synth(const SynthArgs& args) {
    if ((args.clean_dir.empty()) == (args.procedural < 0)) {
        fail(kExitUsage, "synth: exactly one of --clean or --procedural is required");
    }
    if (args.beta_min < 0 || args.beta_max < args.beta_min) {
        fail(kExitUsage, "synth: need 0 <= beta-min <= beta-max");
    }
    if (args.airlight_max < args.airlight_min) {
        fail(kExitUsage, "synth: need airlight-min <= airlight-max");
    }
    if (args.per_clean < 1) fail(kExitUsage, "synth: per-clean must be >= 1");
    DepthKind kind;
    try {
        kind = depth_kind_from_string(args.depth);
    } catch (const DimensionError& e) {
        fail(kExitUsage, std::string("synth: ") + e.what());
    }

    std::vector<TensorPtr> cleans;
    std::vector<std::string> sources;
    if (!args.clean_dir.empty()) {
        std::vector<fs::path> files;
        std::error_code ec;
        for (const auto& entry : fs::directory_iterator(args.clean_dir, ec)) {
            if (entry.path().extension() == ".ppm") files.push_back(entry.path());
        }
        if (ec) fail(kExitIo, "synth: cannot read " + args.clean_dir + ": " + ec.message());
        if (files.empty()) fail(kExitUsage, "synth: no .ppm files in " + args.clean_dir);
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            for (int rep = 0; rep < args.per_clean; ++rep) {
                cleans.push_back(image_to_tensor(read_ppm(f)));
                sources.push_back(f.filename().string());
            }
        }
    } else {
        const SizeArg size = parse_size(args.size);
        for (int i = 0; i < args.procedural; ++i) {
            cleans.push_back(
                gen_procedural_image(size.h, size.w, args.seed * 1000003ull + std::uint64_t(i)));
            sources.push_back("procedural");
        }
    }

    std::error_code ec;
    fs::create_directories(args.out, ec);
    if (ec) fail(kExitIo, "synth: cannot create " + args.out + ": " + ec.message());

    json pairs = json::array();
    std::mt19937 rng{std::uint32_t(args.seed ^ 0x9e3779b9u)};
    std::uniform_real_distribution<double> beta_dist{args.beta_min, args.beta_max};
    std::uniform_real_distribution<double> air_dist{args.airlight_min, args.airlight_max};
    for (std::size_t i = 0; i < cleans.size(); ++i) {
        // quantize the clean image first so the stored pair is consistent
        auto clean_img = tensor_to_image(*cleans[i]);
        auto clean = image_to_tensor(clean_img);

        const std::uint64_t pair_seed = args.seed * 7919ull + i;
        HazeParams hp;
        hp.beta = float(beta_dist(rng));
        const float a = float(air_dist(rng));
        hp.airlight = {a, a, a};
        hp.depth = gen_depth(kind, clean->shape.h, clean->shape.w, pair_seed);
        auto hazy = synthesize_haze(clean, hp);

        char idx[24];
        std::snprintf(idx, sizeof idx, "%03zu", i);
        const std::string clean_name = std::string(idx) + "_clean.ppm";
        const std::string hazy_name = std::string(idx) + "_hazy.ppm";
        write_ppm(clean_img, fs::path(args.out) / clean_name);
        write_ppm(tensor_to_image(*hazy), fs::path(args.out) / hazy_name);
        pairs.push_back({{"index", i},
                         {"clean", clean_name},
                         {"hazy", hazy_name},
                         {"source", sources[i]},
                         {"beta", hp.beta},
                         {"airlight", a},
                         {"depth", depth_kind_name(kind)},
                         {"seed", pair_seed}});
    }

    json manifest = {{"seed", args.seed}, {"count", cleans.size()}, {"pairs", pairs}};
    write_text_atomic(fs::path(args.out) / "manifest.json", manifest.dump(2) + "\n");
    std::cout << json{{"out", args.out}, {"count", cleans.size()}}.dump() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    std::string data;
    std::string config;
    std::string out;
    std::string log;
    std::string ckpt_dir;
    // overrides; negative means "not set"
    int iters = -1;
    int crop = -1;
    int batch = -1;
    int channels = -1;
    std::string blocks;
    double lr_init = -1.0;
    double lr_final = -1.0;
    long long seed = -1;
};

std::vector<PatchPair> load_dataset(const fs::path& data_dir) {
    const fs::path manifest_path = data_dir / "manifest.json";
    if (!fs::exists(manifest_path)) {
        fail(kExitUsage, "train: no manifest.json in " + data_dir.string() +
                             " (run `deanet synth` first)");
    }
    std::ifstream in(manifest_path);
    json manifest;
    try {
        in >> manifest;
    } catch (const json::exception& e) {
        fail(kExitIo, "train: bad manifest: " + std::string(e.what()));
    }
    std::vector<PatchPair> pairs;
    for (const auto& entry : manifest.at("pairs")) {
        auto hazy = image_to_tensor(read_ppm(data_dir / entry.at("hazy").get<std::string>()));
        auto clean = image_to_tensor(read_ppm(data_dir / entry.at("clean").get<std::string>()));
        pairs.push_back(PatchPair{hazy, clean});
    }
    if (pairs.empty()) fail(kExitUsage, "train: manifest lists no pairs");
    return pairs;
}

int cmd_train(const TrainArgs& args) {
    RunConfig rc = args.config.empty() ? RunConfig{} : load_run_config(args.config);
    if (args.iters >= 0) rc.iters = args.iters;
    if (args.crop > 0) rc.crop = args.crop;
    if (args.batch > 0) rc.batch = args.batch;
    if (args.channels > 0) rc.channels = args.channels;
    if (args.lr_init > 0) rc.lr_init = args.lr_init;
    if (args.lr_final > 0) rc.lr_final = args.lr_final;
    if (args.seed >= 0) rc.seed = std::uint64_t(args.seed);
    if (!args.blocks.empty()) {
        std::array<int, 5> blocks{};
        const int got = std::sscanf(args.blocks.c_str(), "%d,%d,%d,%d,%d", &blocks[0],
                                    &blocks[1], &blocks[2], &blocks[3], &blocks[4]);
        if (got != 5) fail(kExitUsage, "train: --blocks wants five comma-separated counts");
        rc.blocks = blocks;
    }

    auto dataset = load_dataset(args.data);
    NetworkConfig net_cfg = to_network_config(rc);
    TrainConfig train_cfg = to_train_config(rc);
    try {
        net_cfg.validate();
        train_cfg.validate();
    } catch (const DimensionError& e) {
        fail(kExitUsage, std::string("train: ") + e.what());
    }

    auto net = init_network<float>(net_cfg, rc.seed);
    const fs::path out_path = args.out;
    const fs::path log_path =
        args.log.empty() ? fs::path(args.out + ".log.jsonl") : fs::path(args.log);
    fs::path ckpt_dir = args.ckpt_dir;
    if (ckpt_dir.empty()) {
        ckpt_dir = out_path.has_parent_path() ? out_path.parent_path() : fs::path(".");
    }
    std::error_code ec;
    fs::create_directories(ckpt_dir, ec);

    std::ofstream log(log_path, std::ios::trunc);
    if (!log) fail(kExitIo, "train: cannot open log " + log_path.string());

    double last_lr = rc.lr_init, last_loss = 0.0;
    TrainHooks hooks;
    hooks.on_step = [&](const LossRecord& rec) {
        log << json{{"iter", rec.iter}, {"lr", rec.lr}, {"loss", rec.loss}}.dump() << "\n";
        last_lr = rec.lr;
        last_loss = rec.loss;
        if (rec.iter % 100 == 0) {
            std::cerr << "iter " << rec.iter << " lr " << rec.lr << " loss " << rec.loss << "\n";
        }
    };
    hooks.on_checkpoint = [&](int iter, const NetworkParams& params) {
        char tag[32];
        std::snprintf(tag, sizeof tag, "ckpt-%06d", iter);
        const fs::path ckpt = ckpt_dir / (out_path.stem().string() + "." + tag + ".deaw");
        save_weights(params, ckpt);
        const json side = {{"iter", iter},
                           {"lr", last_lr},
                           {"loss", last_loss},
                           {"seed", rc.seed},
                           {"config",
                            {{"channels", rc.channels},
                             {"blocks", rc.blocks},
                             {"crop", rc.crop},
                             {"batch", rc.batch},
                             {"iters", rc.iters},
                             {"lr_init", rc.lr_init},
                             {"lr_final", rc.lr_final},
                             {"seed", rc.seed}}}};
        write_text_atomic(ckpt.string() + ".json", side.dump(2) + "\n");
    };

    TrainingReport report;
    try {
        report = train_loop(dataset, net, train_cfg, hooks);
    } catch (const NumericError& e) {
        std::cerr << "deanet: training diverged: " << e.what()
                  << " (last checkpoint retained)\n";
        return kExitNumeric;
    } catch (const DimensionError& e) {
        fail(kExitUsage, std::string("train: ") + e.what());
    }

    save_weights(net, out_path);
    std::cout << json{{"out", out_path.string()},
                      {"log", log_path.string()},
                      {"iters", rc.iters},
                      {"initial_loss", report.initial_loss},
                      {"final_loss", report.final_loss}}
                     .dump()
              << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// reparam

int cmd_reparam(const std::string& in_path, const std::string& out_path, bool verify,
                double tol) {
    WeightArchive ar;
    try {
        ar = WeightArchive::load(in_path);
    } catch (const ArchiveError& e) {
        fail(e.code == ArchiveError::Code::Io ? kExitIo : kExitUsage,
             std::string("reparam: ") + e.what());
    }
    if (archive_kind(ar) == ArchiveKind::fused) {
        fail(kExitUsage, "reparam: " + in_path + " is already a fused archive");
    }
    auto net = from_archive<float>(ar);
    auto fused = fuse_network(net);
    save_weights(fused, out_path);

    json out = {{"in", in_path}, {"out", out_path}};
    if (verify) {
        std::mt19937 rng{1234};
        float worst = 0.0f;
        for (int trial = 0; trial < 10; ++trial) {
            auto x = make_uniform<float>({1, 3, 32, 32}, rng, 0.0f, 1.0f);
            auto a = dea_net_forward(x, net, RunMode::unfused);
            auto b = dea_net_forward(x, fused, RunMode::fused);
            for (std::size_t i = 0; i < a->numel(); ++i) {
                worst = std::max(worst, std::abs(a->data[i] - b->data[i]));
            }
        }
        out["verify"] = {{"max_abs_diff", worst}, {"tol", tol}, {"pass", worst <= tol}};
        std::cout << out.dump() << "\n";
        if (worst > tol) {
            std::cerr << "deanet: reparam verification FAILED: max |unfused - fused| = "
                      << worst << " > " << tol << " (output written anyway)\n";
            return kExitVerify;
        }
        return kExitOk;
    }
    std::cout << out.dump() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// infer

int cmd_infer(const std::string& weights, const std::string& input, const std::string& output,
              const std::string& mode_str) {
    RunMode mode;
    if (mode_str == "fused") {
        mode = RunMode::fused;
    } else if (mode_str == "unfused") {
        mode = RunMode::unfused;
    } else {
        fail(kExitUsage, "infer: --mode must be fused or unfused");
    }

    WeightArchive ar;
    try {
        ar = WeightArchive::load(weights);
    } catch (const ArchiveError& e) {
        fail(e.code == ArchiveError::Code::Io ? kExitIo : kExitUsage,
             std::string("infer: ") + e.what());
    }
    if (mode == RunMode::unfused && archive_kind(ar) == ArchiveKind::fused) {
        fail(kExitUsage, "infer: archive holds fused kernels; unfused mode unavailable");
    }
    auto net = from_archive<float>(ar);

    auto img = read_ppm(input);
    if (img.height % 4 != 0 || img.width % 4 != 0) {
        fail(kExitUsage, "infer: input is " + std::to_string(img.width) + "x" +
                             std::to_string(img.height) +
                             "; spatial dims must be divisible by 4 - pad the image first");
    }
    auto x = image_to_tensor(img);

    const auto t0 = std::chrono::steady_clock::now();
    auto y = dea_net_forward(x, net, mode);
    const auto t1 = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();

    write_ppm(tensor_to_image(*y), output);
    std::cout << json{{"runtime_ms", ms},
                      {"mode", mode_str},
                      {"input", input},
                      {"output", output},
                      {"width", img.width},
                      {"height", img.height}}
                     .dump()
              << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// bench

double median_ms(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int cmd_bench(const std::string& weights, const std::string& size_str, int repeat) {
    if (repeat < 1) fail(kExitUsage, "bench: --repeat must be >= 1");
    detail::set_thread_cap(1);  // single worker for stable timings
    const SizeArg size = parse_size(size_str);
    if (size.w % 4 != 0 || size.h % 4 != 0) {
        fail(kExitUsage, "bench: size must be divisible by 4");
    }

    WeightArchive ar;
    try {
        ar = WeightArchive::load(weights);
    } catch (const ArchiveError& e) {
        fail(e.code == ArchiveError::Code::Io ? kExitIo : kExitUsage,
             std::string("bench: ") + e.what());
    }
    if (archive_kind(ar) == ArchiveKind::fused) {
        fail(kExitUsage, "bench: need an unfused archive to time both forms");
    }
    auto net = from_archive<float>(ar);
    auto fused = fuse_network(net);

    std::mt19937 rng{4242};
    auto x = make_uniform<float>({1, 3, size.h, size.w}, rng, 0.0f, 1.0f);

    auto time_forward = [&](const NetworkParams& params, RunMode mode) {
        dea_net_forward(x, params, mode);  // warmup, excluded
        std::vector<double> times;
        times.reserve(std::size_t(repeat));
        for (int i = 0; i < repeat; ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            auto y = dea_net_forward(x, params, mode);
            const auto t1 = std::chrono::steady_clock::now();
            times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
            (void)y;
        }
        return median_ms(times);
    };

    const double unfused_ms = time_forward(net, RunMode::unfused);
    const double fused_ms = time_forward(fused, RunMode::fused);

    const auto flops = conv_flops_report(net.config, size.h, size.w);
    double ratio = 0.0;
    for (const auto& layer : flops.layers) {
        if (layer.name.find(".deconv") != std::string::npos) {
            ratio = double(layer.unfused) / double(layer.fused);
            break;
        }
    }

    std::cout << json{{"unfused_ms_median", unfused_ms},
                      {"fused_ms_median", fused_ms},
                      {"speedup", unfused_ms / fused_ms},
                      {"unfused_conv_flops", flops.unfused_total},
                      {"fused_conv_flops", flops.fused_total},
                      {"deconv_flops_ratio", ratio},
                      {"size", size_str},
                      {"repeat", repeat}}
                     .dump()
              << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir) {
    auto list_ppm = [](const fs::path& dir) {
        std::set<std::string> names;
        std::error_code ec;
        for (const auto& entry : fs::directory_iterator(dir, ec)) {
            if (entry.path().extension() == ".ppm") {
                names.insert(entry.path().filename().string());
            }
        }
        if (ec) fail(kExitIo, "eval: cannot read " + dir.string() + ": " + ec.message());
        return names;
    };
    const auto pred_names = list_ppm(pred_dir);
    const auto gt_names = list_ppm(gt_dir);
    if (pred_names != gt_names) {
        std::string diff;
        for (const auto& n : pred_names) {
            if (!gt_names.count(n)) diff += " pred-only:" + n;
        }
        for (const auto& n : gt_names) {
            if (!pred_names.count(n)) diff += " gt-only:" + n;
        }
        fail(kExitUsage, "eval: file sets differ:" + diff);
    }
    if (pred_names.empty()) fail(kExitUsage, "eval: no .ppm files to compare");

    json images = json::array();
    double psnr_sum = 0.0, ssim_sum = 0.0;
    bool psnr_inf = false;
    for (const auto& name : pred_names) {
        auto pred = image_to_tensor(read_ppm(fs::path(pred_dir) / name));
        auto gt = image_to_tensor(read_ppm(fs::path(gt_dir) / name));
        double p = 0.0, s = 0.0;
        try {
            p = psnr(*pred, *gt);
            s = ssim(*pred, *gt);
        } catch (const DimensionError& e) {
            fail(kExitUsage, "eval: " + name + ": " + e.what());
        }
        images.push_back({{"name", name}, {"psnr_db", metric_json(p)}, {"ssim", s}});
        if (std::isinf(p)) {
            psnr_inf = true;
        } else {
            psnr_sum += p;
        }
        ssim_sum += s;
    }
    const double n = double(pred_names.size());
    const json out = {{"images", images},
                      {"mean_psnr_db", psnr_inf ? json("inf") : metric_json(psnr_sum / n)},
                      {"mean_ssim", ssim_sum / n}};
    std::cout << out.dump() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck

int cmd_gradcheck(std::uint64_t seed, double eps, double tol, const std::string& precision) {
    json ops = json::array();
    bool all_pass = true;
    std::string failing;
    auto collect = [&](const auto& results) {
        for (const auto& r : results) {
            ops.push_back({{"name", r.op}, {"max_rel_err", r.max_rel_err}, {"pass", r.pass}});
            if (!r.pass) {
                all_pass = false;
                failing += " " + r.op;
            }
        }
    };
    if (precision == "f32") {
        GradCheckOptions<float> opt = GradCheckOptions<float>::defaults();
        opt.seed = seed;
        if (eps > 0) opt.eps = eps;
        if (tol > 0) opt.tol = tol;
        collect(run_gradcheck<float>(opt));
    } else if (precision == "f64") {
        GradCheckOptions<double> opt = GradCheckOptions<double>::defaults();
        opt.seed = seed;
        if (eps > 0) opt.eps = eps;
        if (tol > 0) opt.tol = tol;
        collect(run_gradcheck<double>(opt));
    } else {
        fail(kExitUsage, "gradcheck: --precision must be f32 or f64");
    }
    std::cout << json{{"precision", precision}, {"ops", ops}, {"pass", all_pass}}.dump() << "\n";
    if (!all_pass) {
        std::cerr << "deanet: gradcheck failed for:" << failing << "\n";
        return kExitVerify;
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DEA-Net dehazing workbench: detail-enhanced convolution with exact "
                 "re-parameterization, content-guided attention, desk-scale training"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* synth_cmd = app.add_subcommand("synth", "generate paired clean/hazy PPM images");
    synth_cmd->add_option("--clean", synth.clean_dir, "directory of clean .ppm images");
    synth_cmd->add_option("--procedural", synth.procedural, "generate N procedural scenes");
    synth_cmd->add_option("--out", synth.out, "output directory")->required();
    synth_cmd->add_option("--beta-min", synth.beta_min, "min scattering coefficient");
    synth_cmd->add_option("--beta-max", synth.beta_max, "max scattering coefficient");
    synth_cmd->add_option("--airlight-min", synth.airlight_min, "min airlight");
    synth_cmd->add_option("--airlight-max", synth.airlight_max, "max airlight");
    synth_cmd->add_option("--depth", synth.depth, "ramp|radial|smooth-noise");
    synth_cmd->add_option("--seed", synth.seed, "rng seed");
    synth_cmd->add_option("--size", synth.size, "WxH for procedural scenes (default 64x64)");
    synth_cmd->add_option("--per-clean", synth.per_clean, "hazy variants per clean image");

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "train on a synth directory");
    train_cmd->add_option("--data", train.data, "synth output directory")->required();
    train_cmd->add_option("--config", train.config, "RunConfig JSON file");
    train_cmd->add_option("--out", train.out, "output weights archive")->required();
    train_cmd->add_option("--log", train.log, "loss log path (default <out>.log.jsonl)");
    train_cmd->add_option("--ckpt-dir", train.ckpt_dir, "checkpoint directory");
    train_cmd->add_option("--iters", train.iters, "override iteration count");
    train_cmd->add_option("--crop", train.crop, "override crop size");
    train_cmd->add_option("--batch", train.batch, "override batch size");
    train_cmd->add_option("--channels", train.channels, "override base channels");
    train_cmd->add_option("--blocks", train.blocks, "override block counts a,b,c,d,e");
    train_cmd->add_option("--lr-init", train.lr_init, "override initial lr");
    train_cmd->add_option("--lr-final", train.lr_final, "override final lr");
    train_cmd->add_option("--seed", train.seed, "override seed");

    std::string rp_in, rp_out;
    bool rp_verify = false;
    double rp_tol = 1e-4;
    auto* reparam_cmd = app.add_subcommand("reparam", "fuse branch kernels into dense kernels");
    reparam_cmd->add_option("--weights", rp_in, "unfused input archive")->required();
    reparam_cmd->add_option("--out", rp_out, "fused output archive")->required();
    reparam_cmd->add_flag("--verify", rp_verify, "compare both forms on random inputs");
    reparam_cmd->add_option("--tol", rp_tol, "verification tolerance (max abs)");

    std::string in_weights, in_input, in_output, in_mode = "fused";
    auto* infer_cmd = app.add_subcommand("infer", "dehaze one PPM image");
    infer_cmd->add_option("--weights", in_weights, "weights archive")->required();
    infer_cmd->add_option("--input", in_input, "hazy input .ppm")->required();
    infer_cmd->add_option("--output", in_output, "dehazed output .ppm")->required();
    infer_cmd->add_option("--mode", in_mode, "fused|unfused (default fused)");

    std::string bench_weights, bench_size = "128x128";
    int bench_repeat = 10;
    auto* bench_cmd = app.add_subcommand("bench", "time unfused vs fused forward passes");
    bench_cmd->add_option("--weights", bench_weights, "unfused weights archive")->required();
    bench_cmd->add_option("--size", bench_size, "input WxH (default 128x128)");
    bench_cmd->add_option("--repeat", bench_repeat, "timed repetitions (default 10)");

    std::string eval_pred, eval_gt;
    auto* eval_cmd = app.add_subcommand("eval", "PSNR/SSIM over matched PPM directories");
    eval_cmd->add_option("--pred", eval_pred, "predictions directory")->required();
    eval_cmd->add_option("--gt", eval_gt, "ground-truth directory")->required();

    std::uint64_t gc_seed = 36;
    double gc_eps = -1.0, gc_tol = -1.0;
    std::string gc_precision = "f32";
    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    gc_cmd->add_option("--seed", gc_seed, "case seed");
    gc_cmd->add_option("--eps", gc_eps, "finite-difference step");
    gc_cmd->add_option("--tol", gc_tol, "relative-error tolerance");
    gc_cmd->add_option("--precision", gc_precision, "f32|f64 (default f32)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (synth_cmd->parsed()) return cmd_synth(synth);
        if (train_cmd->parsed()) return cmd_train(train);
        if (reparam_cmd->parsed()) return cmd_reparam(rp_in, rp_out, rp_verify, rp_tol);
        if (infer_cmd->parsed()) return cmd_infer(in_weights, in_input, in_output, in_mode);
        if (bench_cmd->parsed()) return cmd_bench(bench_weights, bench_size, bench_repeat);
        if (eval_cmd->parsed()) return cmd_eval(eval_pred, eval_gt);
        if (gc_cmd->parsed()) return cmd_gradcheck(gc_seed, gc_eps, gc_tol, gc_precision);
    } catch (const ImageError& e) {
        fail(kExitIo, e.what());
    } catch (const ArchiveError& e) {
        fail(e.code == ArchiveError::Code::Io ? kExitIo : kExitUsage, e.what());
    } catch (const NumericError& e) {
        fail(kExitNumeric, e.what());
    } catch (const DimensionError& e) {
        fail(kExitUsage, e.what());
    }
    return kExitUsage;
}
