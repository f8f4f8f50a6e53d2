// Command-line front end: dataset generation/inspection, training, evaluation,
// inference, gradient checking, kernel benchmarks and parameter accounting.
//
// Exit codes: 0 success, 2 validation/usage error, 3 numeric failure.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "hgm/hgm.hpp"

#ifndef HGM_GIT_DESCRIBE
#define HGM_GIT_DESCRIBE "unknown"
#endif

namespace {

using nlohmann::json;

struct CommonArgs {
    std::string precision;  // "", "f32" or "f64"
};

bool use_f64(const CommonArgs& c) {
    std::string p = c.precision;
    if (p.empty()) {
        const char* env = std::getenv("HGM_PRECISION");
        p = env ? env : "f32";
    }
    if (p == "f64") return true;
    if (p == "f32") return false;
    throw hgm::ValueError("precision must be f32 or f64, got '" + p + "'");
}

std::string config_hash(const hgm::ModelConfig& cfg) {
    return hgm::fnv1a_hex(cfg.to_json().dump());
}

hgm::ModelConfig resolve_config(const std::string& preset, const std::string& config_path,
                                std::uint64_t seed, bool seed_set) {
    hgm::ModelConfig cfg;
    if (!config_path.empty()) {
        std::ifstream is(config_path);
        if (!is) throw hgm::ValueError("cannot open config: " + config_path);
        cfg = hgm::ModelConfig::from_json(json::parse(is));
    } else if (!preset.empty()) {
        cfg = hgm::ModelConfig::preset(preset);
    }
    if (seed_set) cfg.seed = seed;
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// data subcommands
// ---------------------------------------------------------------------------

int run_data_gen(const std::string& out, std::uint64_t seed, hgm::Index sequences,
                 hgm::Index frames, double sigma, double outlier_rate) {
    auto ds = hgm::generate_synthetic<float>(seed, sequences, frames);
    if (sigma > 0 || outlier_rate > 0)
        for (hgm::Index s = 0; s < ds.num_sequences(); ++s)
            ds.sequences[static_cast<std::size_t>(s)].p2d =
                hgm::add_noise(ds.sequences[static_cast<std::size_t>(s)].p2d, sigma, outlier_rate,
                               seed + static_cast<std::uint64_t>(s) + 1);
    hgm::save_dataset(ds, out);
    std::cout << "wrote " << out << " (" << sequences << " sequences x " << frames
              << " frames, hash " << hgm::dataset_hash(ds) << ")\n";
    return 0;
}

int run_data_inspect(const std::string& path) {
    auto ds = hgm::load_dataset<float>(path);
    json j{{"num_sequences", ds.num_sequences()},
           {"joints", ds.skeleton.num_joints()},
           {"stride", ds.window_stride},
           {"split", ds.split},
           {"hash", hgm::dataset_hash(ds)}};
    json frames = json::array();
    double lo2 = 1e30, hi2 = -1e30;
    bool has2 = false, has3 = false;
    for (const auto& s : ds.sequences) {
        frames.push_back(s.p3d.empty() ? s.p2d.dim(0) : s.p3d.dim(0));
        if (!s.p2d.empty()) {
            has2 = true;
            for (hgm::Index i = 0; i < s.p2d.numel(); ++i) {
                lo2 = std::min(lo2, double(s.p2d[i]));
                hi2 = std::max(hi2, double(s.p2d[i]));
            }
        }
        if (!s.p3d.empty()) has3 = true;
    }
    j["frames"] = frames;
    j["has_2d"] = has2;
    j["has_3d"] = has3;
    if (has2) j["p2d_range"] = {lo2, hi2};
    std::cout << j.dump(2) << "\n";
    return 0;
}

int run_data_convert_json(const std::string& path, const std::string& out) {
    auto ds = hgm::load_dataset<float>(path);
    json j = hgm::dataset_to_json(ds);
    if (out.empty()) {
        std::cout << j.dump() << "\n";
    } else {
        std::ofstream os(out);
        os << j.dump(2) << "\n";
        std::cout << "wrote " << out << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

template <typename T>
int run_train(const hgm::ModelConfig& cfg, hgm::TrainOptions opts, const std::string& data_path,
              const std::string& out_dir) {
    auto ds = hgm::load_dataset<T>(data_path);
    bool needs_window = false;
    for (const auto& s : ds.sequences)
        if ((s.p2d.empty() ? s.p3d.dim(0) : s.p2d.dim(0)) != cfg.frames) needs_window = true;
    if (needs_window) ds = hgm::window_dataset(ds, cfg.frames, cfg.frames);

    if (opts.run_dir.empty()) {
        // name the run directory by the manifest hash
        hgm::Trainer<T> probe(cfg, opts, ds);
        namespace fs = std::filesystem;
        opts.run_dir = (fs::path(out_dir) / probe.manifest_hash()).string();
    }
    hgm::Trainer<T> trainer(cfg, opts, std::move(ds));
    auto res = trainer.run(/*verbose=*/true);
    std::cout << "run " << res.manifest_hash << ": " << res.steps << " steps, final loss "
              << res.final_loss << ", train MPJPE " << res.final_mpjpe << " mm\n";
    std::cout << "checkpoint: " << res.checkpoint_path << "\n";
    std::cout << "manifest:   " << res.manifest_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval / infer
// ---------------------------------------------------------------------------

template <typename T>
int run_eval(const std::string& checkpoint, const std::string& data_path, hgm::Index batch,
             bool flip_test, bool strict_rigid, const std::string& out) {
    auto model = hgm::load_model<T>(checkpoint);
    auto ds = hgm::load_dataset<T>(data_path);
    hgm::EvalReport rep = hgm::evaluate_model(model, ds, batch, flip_test, strict_rigid);
    json j = rep.to_json();
    j["config_hash"] = config_hash(model.cfg);
    j["git_describe"] = HGM_GIT_DESCRIBE;
    j["flip_test"] = flip_test;
    j["strict_rigid"] = strict_rigid;
    if (!out.empty()) {
        std::ofstream os(out);
        os << j.dump(2) << "\n";
    }
    std::cout << j.dump(2) << "\n";
    return 0;
}

template <typename T>
int run_infer(const std::string& checkpoint, const std::string& input, const std::string& out,
              hgm::Index batch, bool flip_test) {
    auto model = hgm::load_model<T>(checkpoint);
    auto ds = hgm::load_dataset<T>(input);
    auto lifted = hgm::infer_dataset(model, ds, batch, flip_test);
    hgm::save_dataset(lifted, out);
    std::cout << "wrote " << out << " (" << lifted.num_sequences()
              << " sequences, 3D block only, root-relative mm)\n";
    return 0;
}

// ---------------------------------------------------------------------------
// gradcheck / bench / params
// ---------------------------------------------------------------------------

int run_gradcheck(std::uint64_t seed, hgm::Index coords) {
    auto suite = hgm::gradcheck_suite(seed, coords);
    suite.push_back(hgm::gradcheck_full_model(seed, coords));
    int failures = 0;
    std::printf("%-18s %8s %10s %12s\n", "op", "checked", "failures", "max_rel_err");
    for (const auto& entry : suite) {
        std::printf("%-18s %8lld %10lld %12.3e  %s\n", entry.name.c_str(),
                    static_cast<long long>(entry.report.checked),
                    static_cast<long long>(entry.report.failures), entry.report.max_err,
                    entry.report.failures == 0 ? "pass" : "FAIL");
        failures += static_cast<int>(entry.report.failures);
    }
    if (failures) throw hgm::NumericError(std::to_string(failures) + " gradient checks failed");
    return 0;
}

int run_bench(const std::string& out, std::vector<hgm::Index> lengths) {
    using clock = std::chrono::steady_clock;
    if (lengths.empty()) lengths = {64, 256, 1024, 4096};
    std::ostream* os = &std::cout;
    std::ofstream file;
    if (!out.empty()) {
        file.open(out);
        os = &file;
    }
    *os << "L,N,D,mode,wall_ns,max_abs_err_vs_oracle\n";
    const hgm::Index n = 16, d = 4;
    hgm::Rng rng(1234);
    for (hgm::Index len : lengths) {
        hgm::NdArray<double> a({d, n}), b({d, n}), c({d, n}), delta({d});
        for (hgm::Index i = 0; i < d * n; ++i) {
            a[i] = -rng.uniform(0.05, 2.0);
            b[i] = rng.uniform(-1.0, 1.0);
            c[i] = rng.uniform(-1.0, 1.0);
        }
        for (hgm::Index i = 0; i < d; ++i) delta[i] = rng.uniform(0.01, 0.5);
        auto [abar, bbar] = hgm::discretize(a, b, delta);
        hgm::NdArray<double> x({len, d});
        rng.fill_normal(x, 0, 1);
        hgm::NdArray<double> oracle = hgm::scan_recurrent(abar, bbar, c, x);
        auto time_ns = [&](auto&& fn) {
            auto t0 = clock::now();
            fn();
            return std::chrono::duration_cast<std::chrono::nanoseconds>(clock::now() - t0).count();
        };
        hgm::NdArray<double> y;
        auto report = [&](const char* mode, long long ns) {
            *os << len << "," << n << "," << d << "," << mode << "," << ns << ","
                << hgm::max_abs_diff(y, oracle) << "\n";
        };
        report("recurrent", time_ns([&] { y = hgm::scan_recurrent(abar, bbar, c, x); }));
        report("chunked", time_ns([&] { y = hgm::scan_recurrent_chunked(abar, bbar, c, x, 64); }));
        hgm::NdArray<double> kernel;
        report("fft", time_ns([&] {
                   kernel = hgm::kernel_lti(abar, bbar, c, len);
                   y = hgm::conv_apply(x, kernel);
               }));
        report("direct", time_ns([&] {
                   // direct O(L^2) causal convolution per channel
                   y = hgm::NdArray<double>({len, d});
                   for (hgm::Index ch = 0; ch < d; ++ch)
                       for (hgm::Index t = 0; t < len; ++t) {
                           double acc = 0;
                           for (hgm::Index s = 0; s <= t; ++s)
                               acc += x[s * d + ch] * kernel[ch * len + (t - s)];
                           y[t * d + ch] = acc;
                       }
               }));
    }
    if (!out.empty()) std::cout << "wrote " << out << "\n";
    return 0;
}

int run_params(const hgm::ModelConfig& cfg) {
    hgm::SkeletonSpec skel = hgm::human17_skeleton();
    hgm::ParamStore<float> store;
    hgm::Rng rng(cfg.seed);
    hgm::register_model(store, cfg, skel, rng);
    auto counts = hgm::param_counts_by_module(store);
    std::printf("%-24s %12s\n", "module", "parameters");
    hgm::Index total = 0;
    for (const auto& [name, count] : counts) {
        std::printf("%-24s %12lld\n", name.c_str(), static_cast<long long>(count));
        total += count;
    }
    std::printf("%-24s %12lld\n", "total", static_cast<long long>(total));
    json j{{"total", total}, {"config", cfg.to_json()}};
    std::cout << j.dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hybrid hypergraph-GCN / selective state-space 2D-to-3D pose lifter"};
    app.require_subcommand(1);
    CommonArgs common;
    app.add_option("--precision", common.precision,
                   "f32 or f64 (default from HGM_PRECISION, else f32)");

    // data
    auto* data = app.add_subcommand("data", "dataset tooling");
    data->require_subcommand(1);
    std::string gen_out = "data.hgpose";
    std::uint64_t gen_seed = 0;
    hgm::Index gen_sequences = 64, gen_frames = 9;
    double gen_sigma = 0.0, gen_outliers = 0.0;
    auto* gen = data->add_subcommand("gen", "generate synthetic walker sequences");
    gen->add_option("--out", gen_out);
    gen->add_option("--seed", gen_seed);
    gen->add_option("--sequences", gen_sequences);
    gen->add_option("--frames", gen_frames);
    gen->add_option("--sigma", gen_sigma, "2D Gaussian noise std (normalized units)");
    gen->add_option("--outlier-rate", gen_outliers, "per-joint replacement probability");
    std::string inspect_path;
    auto* inspect = data->add_subcommand("inspect", "print file header and stats");
    inspect->add_option("file", inspect_path)->required();
    std::string conv_path, conv_out;
    auto* conv = data->add_subcommand("convert-json", "dump a pose file as JSON");
    conv->add_option("file", conv_path)->required();
    conv->add_option("--out", conv_out);

    // train
    auto* train = app.add_subcommand("train", "train on a pose dataset");
    std::string train_preset, train_config, train_data, train_out_dir = "runs", train_run_dir,
                train_resume;
    std::uint64_t train_seed = 0;
    bool train_seed_set = false;
    hgm::TrainOptions topts;
    double lambda_v = -1;
    train->add_option("--preset", train_preset, "tiny|xs|s|b");
    train->add_option("--config", train_config, "model config JSON");
    train->add_option("--data", train_data)->required();
    auto* train_seed_opt = train->add_option("--seed", train_seed);
    train->add_option("--batch", topts.batch);
    train->add_option("--epochs", topts.epochs);
    train->add_option("--lr", topts.lr);
    train->add_option("--lr-decay", topts.lr_decay);
    train->add_option("--weight-decay", topts.weight_decay);
    train->add_option("--workers", topts.workers);
    train->add_option("--max-steps", topts.max_steps);
    train->add_option("--target-mpjpe", topts.target_mpjpe, "early-stop train MPJPE (mm)");
    train->add_option("--eval-every", topts.eval_every);
    train->add_option("--lambda-v", lambda_v, "velocity loss weight");
    train->add_option("--out-dir", train_out_dir, "parent for run directories");
    train->add_option("--run-dir", train_run_dir, "explicit run directory");
    train->add_option("--resume", train_resume, "checkpoint to resume from");
    bool no_flip = false;
    train->add_flag("--no-flip-augment", no_flip);

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string eval_ckpt, eval_data, eval_out;
    hgm::Index eval_batch = 16;
    bool eval_flip = false, eval_strict = false;
    eval->add_option("--checkpoint", eval_ckpt)->required();
    eval->add_option("--data", eval_data)->required();
    eval->add_option("--batch", eval_batch);
    eval->add_option("--out", eval_out, "write the JSON report here too");
    eval->add_flag("--flip-test", eval_flip, "average predictions with the mirrored pass");
    eval->add_flag("--strict-rigid", eval_strict, "exclude scale from the P2 alignment");

    // infer
    auto* infer = app.add_subcommand("infer", "lift a 2D pose file to 3D");
    std::string infer_ckpt, infer_in, infer_out = "lifted.hgpose";
    hgm::Index infer_batch = 16;
    bool infer_flip = false;
    infer->add_option("--checkpoint", infer_ckpt)->required();
    infer->add_option("--input", infer_in)->required();
    infer->add_option("--out", infer_out);
    infer->add_option("--batch", infer_batch);
    infer->add_flag("--flip-test", infer_flip);

    // gradcheck
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::uint64_t gc_seed = 0;
    hgm::Index gc_coords = 100;
    gradcheck->add_option("--seed", gc_seed);
    gradcheck->add_option("--coords", gc_coords, "coordinates checked per op");

    // bench
    auto* bench = app.add_subcommand("bench", "scan/conv kernel timings (CSV)");
    std::string bench_out;
    std::vector<hgm::Index> bench_lengths;
    bench->add_option("--out", bench_out);
    bench->add_option("--lengths", bench_lengths, "sequence lengths to time");

    // params
    auto* params = app.add_subcommand("params", "parameter accounting per module");
    std::string params_preset, params_config;
    params->add_option("--preset", params_preset, "tiny|xs|s|b");
    params->add_option("--config", params_config);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return run_data_gen(gen_out, gen_seed, gen_sequences, gen_frames,
                                               gen_sigma, gen_outliers);
        if (inspect->parsed()) return run_data_inspect(inspect_path);
        if (conv->parsed()) return run_data_convert_json(conv_path, conv_out);
        if (train->parsed()) {
            train_seed_set = train_seed_opt->count() > 0;
            hgm::ModelConfig cfg = resolve_config(train_preset, train_config, train_seed,
                                                  train_seed_set);
            if (lambda_v >= 0) cfg.velocity_weight = lambda_v;
            topts.flip_augment = !no_flip;
            topts.run_dir = train_run_dir;
            topts.resume_from = train_resume;
            return use_f64(common) ? run_train<double>(cfg, topts, train_data, train_out_dir)
                                   : run_train<float>(cfg, topts, train_data, train_out_dir);
        }
        if (eval->parsed())
            return use_f64(common)
                       ? run_eval<double>(eval_ckpt, eval_data, eval_batch, eval_flip, eval_strict,
                                          eval_out)
                       : run_eval<float>(eval_ckpt, eval_data, eval_batch, eval_flip, eval_strict,
                                         eval_out);
        if (infer->parsed())
            return use_f64(common)
                       ? run_infer<double>(infer_ckpt, infer_in, infer_out, infer_batch, infer_flip)
                       : run_infer<float>(infer_ckpt, infer_in, infer_out, infer_batch, infer_flip);
        if (gradcheck->parsed()) return run_gradcheck(gc_seed, gc_coords);
        if (bench->parsed()) return run_bench(bench_out, bench_lengths);
        if (params->parsed())
            return run_params(resolve_config(params_preset, params_config, 0, false));
        std::cerr << "no subcommand\n";
        return 2;
    } catch (const hgm::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const hgm::ValueError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
