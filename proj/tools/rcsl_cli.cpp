// Command-line front end: pretraining, linear probing, diagnostic dumps,
// gradient checking, and the ablation harness.
#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <unistd.h>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "rcsl/diagnostics.hpp"
#include "rcsl/loss_checks.hpp"
#include "rcsl/trainer.hpp"

namespace {

// OpenBLAS picks its dgemm kernel from CPUID at load time; some hypervisors
// mask the CPU model, which lands on a several-times-slower generic kernel
// even though AVX-512 is available. Pin the kernel via the environment and
// re-exec once before any BLAS call has happened.
void pin_blas_kernel(char** argv) {
#if defined(__x86_64__) && defined(__linux__)
    if (!std::getenv("OPENBLAS_CORETYPE") && __builtin_cpu_supports("avx512f")) {
        setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 1);
        execv("/proc/self/exe", argv);
        // exec only returns on failure; continue with the default kernel
    }
#else
    (void)argv;
#endif
}

// The training step allocates and frees large activation buffers every op;
// keeping them on the heap instead of round-tripping pages through the kernel
// removes most system time.
void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_MAX, 0);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
#endif
}

int run_pretrain(const std::string& config_path, const std::string& resume_path) {
    rcsl::TrainConfig cfg = rcsl::load_config_file(config_path);
    cfg.validate();
    std::unique_ptr<rcsl::Trainer> trainer;
    if (!resume_path.empty()) {
        trainer = rcsl::Trainer::load(resume_path, &cfg);
        std::cout << "resumed from " << resume_path << " at step " << trainer->step_index()
                  << "\n";
    } else {
        trainer = std::make_unique<rcsl::Trainer>(cfg);
    }
    if (trainer->decoder()) {
        const auto ratio = trainer->cost_ratio();
        std::cout << "decoder/encoder ratios: params " << ratio.param_ratio << ", flops "
                  << ratio.flop_ratio << "\n";
    }
    const auto t0 = std::chrono::steady_clock::now();
    auto history = trainer->run();
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!history.empty()) {
        const auto& last = history.back();
        std::cout << "finished " << last.step << " steps in " << secs << " s\n"
                  << "final: l_contrast " << last.l_contrast << ", l_reconstruct "
                  << last.l_reconstruct << ", psnr " << last.psnr << " dB, lambda1 "
                  << last.lambda1 << ", lambda2 " << last.lambda2 << "\n";
    }
    std::cout << "outputs in " << cfg.out_dir << "\n";
    return 0;
}

int run_probe(const std::string& checkpoint_path, const std::string& data_spec, uint64_t seed,
              bool with_baseline) {
    rcsl::EvalBundle bundle = rcsl::load_encoder_for_eval(checkpoint_path);
    rcsl::Dataset ds = rcsl::Dataset::from_spec(data_spec);
    auto [train_idx, test_idx] = rcsl::probe_split(ds.size(), seed);
    rcsl::Dataset train = ds.subset(train_idx);
    rcsl::Dataset test = ds.subset(test_idx);
    const auto policy = bundle.config.augmentation_policy();

    rcsl::ProbeResult res = rcsl::linear_probe(*bundle.encoder, policy, train, test, seed);
    std::cout << "probe accuracy: " << res.accuracy << " (" << res.correct << "/" << res.total
              << "), encoder untouched: "
              << (res.encoder_fingerprint_before == res.encoder_fingerprint_after ? "yes" : "NO")
              << "\n";
    if (with_baseline) {
        rcsl::VisionEncoder random_enc(bundle.config.encoder_config(),
                                       rcsl::seed_stream(seed ^ 0xba5eull, "encoder"));
        rcsl::ProbeResult base = rcsl::linear_probe(random_enc, policy, train, test, seed);
        std::cout << "random-init baseline: " << base.accuracy << " (" << base.correct << "/"
                  << base.total << "), gain " << (res.accuracy - base.accuracy) * 100.0
                  << " points\n";
    }
    return 0;
}

int run_dump(const std::string& checkpoint_path, const std::string& out_dir,
             const std::string& data_spec, int64_t count) {
    auto trainer = rcsl::Trainer::load(checkpoint_path);
    rcsl::Dataset ds = data_spec.empty() ? rcsl::Dataset::from_spec(trainer->config().dataset)
                                         : rcsl::Dataset::from_spec(data_spec);
    rcsl::DumpSummary s = rcsl::dump_diagnostics(
        trainer->branches().online_encoder(), trainer->decoder(),
        trainer->config().augmentation_policy(), ds, out_dir, count);
    std::cout << "wrote " << s.attention_maps << " attention maps, " << s.triptychs
              << " reconstruction triptychs, " << s.embedding_rows << " embedding rows to "
              << out_dir << "\n";
    return 0;
}

int run_gradcheck(int instances, double eps, double tol, uint64_t seed) {
    auto cases = rcsl::op_check_cases();
    auto losses = rcsl::loss_check_cases();
    cases.insert(cases.end(), losses.begin(), losses.end());
    auto results = rcsl::run_check_suite(cases, instances, eps, tol, seed);
    bool all_pass = true;
    for (const auto& r : results) {
        std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << ": max rel err "
                  << r.max_rel_err << "\n";
        all_pass = all_pass && r.pass;
    }
    std::cout << (all_pass ? "gradient check suite passed" : "gradient check suite FAILED")
              << " (" << results.size() << " cases, " << instances << " instances each)\n";
    return all_pass ? 0 : 1;
}

int run_ablate(const std::string& axis, const std::string& config_path, int64_t steps,
               const std::string& out_dir) {
    rcsl::TrainConfig base;
    if (!config_path.empty()) base = rcsl::load_config_file(config_path);
    if (steps > 0) base.steps = steps;

    struct Arm {
        std::string name;
        rcsl::TrainConfig cfg;
    };
    std::vector<Arm> arms;
    if (axis == "fusion-op") {
        for (const char* op : {"conv", "transformer"}) {
            rcsl::TrainConfig c = base;
            c.fusion_operator = op;
            arms.push_back({op, c});
        }
    } else if (axis == "fusion-layers") {
        for (int64_t layers : {1, 2, 4}) {
            rcsl::TrainConfig c = base;
            c.fusion_layers = layers;
            arms.push_back({"layers" + std::to_string(layers), c});
        }
    } else if (axis == "taps") {
        for (int64_t taps : {1, 4}) {
            rcsl::TrainConfig c = base;
            c.tap_count = taps;
            arms.push_back({taps == 1 ? "single" : "multi", c});
        }
    } else {
        std::cerr << "unknown ablation axis: " << axis
                  << " (expected fusion-op, fusion-layers, or taps)\n";
        return 2;
    }

    nlohmann::json summary = nlohmann::json::array();
    for (auto& arm : arms) {
        arm.cfg.out_dir =
            (std::filesystem::path(out_dir) / ("ablate_" + axis) / arm.name).string();
        arm.cfg.validate();
        rcsl::Trainer trainer(arm.cfg);
        const auto t0 = std::chrono::steady_clock::now();
        auto history = trainer.run();
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const auto& last = history.back();
        const auto ratio = trainer.cost_ratio();
        summary.push_back(nlohmann::json{{"arm", arm.name},
                                         {"steps", arm.cfg.steps},
                                         {"param_ratio", ratio.param_ratio},
                                         {"flop_ratio", ratio.flop_ratio},
                                         {"final_l_contrast", last.l_contrast},
                                         {"final_l_reconstruct", last.l_reconstruct},
                                         {"final_psnr", last.psnr},
                                         {"seconds", secs},
                                         {"metrics", arm.cfg.out_dir + "/metrics.jsonl"}});
        std::cout << "arm " << arm.name << ": params ratio " << ratio.param_ratio << ", final "
                  << "l_contrast " << last.l_contrast << ", l_reconstruct " << last.l_reconstruct
                  << ", psnr " << last.psnr << " (" << secs << " s)\n";
    }
    const auto summary_path =
        std::filesystem::path(out_dir) / ("ablate_" + axis) / "summary.json";
    std::ofstream f(summary_path);
    f << summary.dump(2) << "\n";
    std::cout << "summary written to " << summary_path.string() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    pin_blas_kernel(argv);
    tune_allocator();

    CLI::App app{"contrastive + pixel-reconstruction pretraining for small vision transformers"};
    app.require_subcommand(1);

    std::string config_path, resume_path;
    auto* pretrain = app.add_subcommand("pretrain", "run the pre-training loop");
    pretrain->add_option("--config", config_path, "flat key=value config file")->required();
    pretrain->add_option("--resume", resume_path, "checkpoint to resume from");

    std::string probe_ckpt, probe_data;
    uint64_t probe_seed = 1;
    bool probe_baseline = false;
    auto* probe = app.add_subcommand("probe", "linear probe on a frozen encoder");
    probe->add_option("--checkpoint", probe_ckpt, "checkpoint file")->required();
    probe->add_option("--data", probe_data, "dataset directory or synthetic:... spec")
        ->required();
    probe->add_option("--seed", probe_seed, "probe split / head seed");
    probe->add_flag("--baseline", probe_baseline, "also probe a randomly initialized encoder");

    std::string dump_ckpt, dump_out, dump_data;
    int64_t dump_count = 8;
    auto* dump = app.add_subcommand("dump", "write attention maps, reconstructions, embeddings");
    dump->add_option("--checkpoint", dump_ckpt, "checkpoint file")->required();
    dump->add_option("--out", dump_out, "output directory")->required();
    dump->add_option("--data", dump_data, "dataset override (defaults to the training set)");
    dump->add_option("--count", dump_count, "images to visualize");

    int gc_instances = 20;
    double gc_eps = 1e-5, gc_tol = 1e-4;
    uint64_t gc_seed = 42;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    gradcheck->add_option("--instances", gc_instances, "random instances per case");
    gradcheck->add_option("--eps", gc_eps, "central-difference step");
    gradcheck->add_option("--tol", gc_tol, "max relative error");
    gradcheck->add_option("--seed", gc_seed, "suite seed");

    std::string ablate_axis, ablate_config, ablate_out = "out";
    int64_t ablate_steps = 60;
    auto* ablate = app.add_subcommand("ablate", "paired runs along one design axis");
    ablate->add_option("--axis", ablate_axis, "fusion-op | fusion-layers | taps")->required();
    ablate->add_option("--config", ablate_config, "base config file (defaults to desk-scale)");
    ablate->add_option("--steps", ablate_steps, "steps per arm");
    ablate->add_option("--out", ablate_out, "output root");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*pretrain) return run_pretrain(config_path, resume_path);
        if (*probe) return run_probe(probe_ckpt, probe_data, probe_seed, probe_baseline);
        if (*dump) return run_dump(dump_ckpt, dump_out, dump_data, dump_count);
        if (*gradcheck) return run_gradcheck(gc_instances, gc_eps, gc_tol, gc_seed);
        if (*ablate) return run_ablate(ablate_axis, ablate_config, ablate_steps, ablate_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
