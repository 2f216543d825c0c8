#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "rcsl/diagnostics.hpp"
#include "rcsl/trainer.hpp"

using namespace rcsl;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("rcsl_pipe_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Desk-scale config shrunk for unit-test speed.
TrainConfig tiny_config(const std::string& tag) {
    TrainConfig cfg;
    cfg.dataset = "synthetic:classes=4,count=48,size=16,seed=5";
    cfg.out_dir = (temp_dir(tag) / "run").string();
    cfg.steps = 6;
    cfg.batch_size = 4;
    cfg.seed = 11;
    cfg.image_size = 16;
    cfg.patch_size = 4;
    cfg.depth = 4;
    cfg.width = 32;
    cfg.heads = 4;
    cfg.tap_count = 2;
    cfg.embed_dim = 16;
    cfg.predictor_hidden = 32;
    cfg.queue_capacity = 16;
    cfg.decoder_width = 8;
    return cfg;
}

bool same_metrics_ignoring_wall(const MetricsRecord& a, const MetricsRecord& b) {
    return a.step == b.step && a.l_contrast == b.l_contrast &&
           a.l_reconstruct == b.l_reconstruct && a.combined == b.combined &&
           a.lambda1 == b.lambda1 && a.lambda2 == b.lambda2 && a.psnr == b.psnr &&
           a.decoder_param_ratio == b.decoder_param_ratio &&
           a.decoder_flop_ratio == b.decoder_flop_ratio;
}

} // namespace

TEST_CASE("config round-trips losslessly and rejects unknown keys") {
    TrainConfig cfg = tiny_config("cfg");
    cfg.lr = 0.0012345678901234567;
    cfg.dataset = "synthetic:classes=3,count=9,size=32,seed=2";
    const std::string text = serialize_config(cfg);
    TrainConfig back = parse_config_text(text);
    REQUIRE(serialize_config(back) == text);

    REQUIRE_THROWS_AS(parse_config_text("no_such_key = 1\n"), Error);
    REQUIRE_THROWS_AS(parse_config_text("steps ~ 5\n"), Error);
    REQUIRE_THROWS_AS(parse_config_text("steps = banana\n"), Error);
    TrainConfig commented = parse_config_text("# comment only\n\nsteps = 9\n");
    REQUIRE(commented.steps == 9);
}

TEST_CASE("optimizer: schedule shape and decay scope") {
    OptimizerConfig cfg;
    cfg.lr = 1.0;
    cfg.total_steps = 100;
    cfg.warmup_fraction = 0.1;
    Tensor w = nn::init_weight(*std::make_unique<Rng>(1), {3, 3});
    AdamW opt({{"w", w}}, cfg);
    REQUIRE(opt.lr_at(0) == Catch::Approx(0.1));
    REQUIRE(opt.lr_at(9) == Catch::Approx(1.0));
    REQUIRE(opt.lr_at(99) < 1e-3);
    for (int64_t s = 11; s < 100; ++s) REQUIRE(opt.lr_at(s) < opt.lr_at(s - 1));

    // decoupled decay shrinks rank>=2 weights even with zero gradients
    OptimizerConfig dcfg;
    dcfg.lr = 0.1;
    dcfg.weight_decay = 0.5;
    dcfg.total_steps = 1;
    dcfg.warmup_fraction = 0.0;
    Rng rng(2);
    Tensor weight = nn::init_weight(rng, {2, 2});
    Tensor bias = nn::init_zeros({2});
    bias.data() = {0.7, -0.4};
    Tensor scalar = Tensor::scalar(0.9, true);
    const auto w_before = weight.data();
    AdamW opt2({{"w", weight}, {"b", bias}, {"s", scalar}}, dcfg);
    opt2.step();
    for (size_t i = 0; i < w_before.size(); ++i)
        REQUIRE(weight.data()[i] == Catch::Approx(w_before[i] * (1.0 - 0.1 * 0.5)));
    REQUIRE(bias.data() == std::vector<double>{0.7, -0.4});
    REQUIRE(scalar.item() == 0.9);
}

TEST_CASE("training is deterministic: same seed, bit-identical metrics") {
    TrainConfig cfg = tiny_config("det_a");
    Trainer a(cfg);
    cfg.out_dir = (temp_dir("det_b") / "run").string();
    Trainer b(cfg);
    for (int i = 0; i < 4; ++i) {
        MetricsRecord ra = a.train_step();
        MetricsRecord rb = b.train_step();
        REQUIRE(same_metrics_ignoring_wall(ra, rb));
    }
    cfg.seed = 99;
    Trainer c(cfg);
    REQUIRE_FALSE(same_metrics_ignoring_wall(a.train_step(), c.train_step()));
}

TEST_CASE("zero learning rate freezes online parameters but EMA still applies") {
    TrainConfig cfg = tiny_config("zerolr");
    cfg.lr = 0.0;
    cfg.weight_decay = 0.0;
    cfg.ema_momentum = 0.5;
    Trainer t(cfg);
    // push the target away from the online branch so the EMA has a visible gap
    auto target = t.branches().target_params();
    auto online = t.branches().online_params();
    target[0].tensor.data()[0] = online[0].tensor.data()[0] + 1.0;
    const auto online_before = online[0].tensor.data();
    t.train_step();
    REQUIRE(online[0].tensor.data() == online_before);
    // EMA moved the perturbed target halfway back toward the online value
    REQUIRE(target[0].tensor.data()[0] ==
            Catch::Approx(online_before[0] + 0.5).margin(1e-12));
}

TEST_CASE("stop-gradient holds through a full train step") {
    TrainConfig cfg = tiny_config("stopgrad");
    Trainer t(cfg);
    t.train_step();
    for (const auto& p : t.branches().target_params()) {
        REQUIRE_FALSE(p.tensor.requires_grad());
        REQUIRE(p.tensor.grad_max_abs() == 0.0);
    }
    // the optimizer's parameter list contains no target-branch entries
    for (const auto& p : t.optimizer().params())
        REQUIRE(p.name.find("target.") == std::string::npos);
}

TEST_CASE("checkpoint: save -> load -> save is byte-identical") {
    TrainConfig cfg = tiny_config("ckpt_rt");
    Trainer t(cfg);
    t.train_step();
    t.train_step();
    const auto dir = temp_dir("ckpt_rt_files");
    const std::string p1 = (dir / "a.ckpt").string();
    const std::string p2 = (dir / "b.ckpt").string();
    t.save(p1);
    auto restored = Trainer::load(p1);
    restored->save(p2);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(s1 == s2);
    REQUIRE_FALSE(s1.empty());
}

TEST_CASE("checkpoint: resume reproduces the uninterrupted trajectory exactly") {
    TrainConfig cfg = tiny_config("resume_full");
    Trainer full(cfg);
    std::vector<MetricsRecord> uninterrupted;
    for (int i = 0; i < 6; ++i) uninterrupted.push_back(full.train_step());

    cfg.out_dir = (temp_dir("resume_half") / "run").string();
    Trainer half(cfg);
    for (int i = 0; i < 3; ++i) half.train_step();
    const std::string ckpt = (temp_dir("resume_ck") / "mid.ckpt").string();
    half.save(ckpt);

    auto resumed = Trainer::load(ckpt);
    REQUIRE(resumed->step_index() == 3);
    for (int i = 3; i < 6; ++i) {
        MetricsRecord r = resumed->train_step();
        REQUIRE(same_metrics_ignoring_wall(r, uninterrupted[static_cast<size_t>(i)]));
    }
}

TEST_CASE("checkpoint: corruption and mismatches are rejected") {
    TrainConfig cfg = tiny_config("ckpt_bad");
    Trainer t(cfg);
    t.train_step();
    const auto dir = temp_dir("ckpt_bad_files");
    const std::string path = (dir / "c.ckpt").string();
    t.save(path);

    // flip one payload byte: checksum must catch it
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(200);
        char c;
        f.seekg(200);
        f.get(c);
        f.seekp(200);
        c = static_cast<char>(c ^ 0x5a);
        f.put(c);
    }
    REQUIRE_THROWS_WITH(load_checkpoint(path), Catch::Matchers::ContainsSubstring("checksum"));

    t.save(path);
    // bump the version field
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(8);
        uint32_t v = 99;
        f.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
    REQUIRE_THROWS_WITH(load_checkpoint(path), Catch::Matchers::ContainsSubstring("version"));

    // truncation fails the length check
    t.save(path);
    {
        std::ifstream in(path, std::ios::binary);
        std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(all.data(), static_cast<std::streamsize>(all.size() - 17));
    }
    REQUIRE_THROWS_AS(load_checkpoint(path), Error);

    // resuming under a different config is rejected
    t.save(path);
    TrainConfig other = cfg;
    other.lr = 123.0;
    REQUIRE_THROWS_WITH(Trainer::load(path, &other),
                        Catch::Matchers::ContainsSubstring("config"));
}

TEST_CASE("disabling the reconstruction branch matches a contrastive-only oracle") {
    TrainConfig cfg = tiny_config("ctronly");
    cfg.reconstruction_enabled = false;
    Trainer t(cfg);

    // independent oracle: rebuild the contrastive-only step from parts
    SiameseBranches branches(cfg.encoder_config(), cfg.head_config(), cfg.mode(),
                             cfg.ema_momentum, cfg.queue_capacity, cfg.seed);
    UncertaintyWeights weights(cfg.s_init_contrast, cfg.s_init_reconstruct);
    nn::ParamList trainable = branches.online_params();
    weights.collect(trainable, "objective");
    AdamW opt(std::move(trainable), cfg.optimizer_config());
    Dataset ds = Dataset::from_spec(cfg.dataset);
    AugmentationPolicy policy = cfg.augmentation_policy();
    Rng data_rng(seed_stream(cfg.seed, "data"));

    for (int step = 0; step < 4; ++step) {
        std::vector<Image> raw1, n1, n2;
        for (int64_t b = 0; b < cfg.batch_size; ++b) {
            const auto& item =
                ds.at(static_cast<size_t>(data_rng.uniform_int(static_cast<int64_t>(ds.size()))));
            TwoViews v = augment_two_views(item.image, policy, data_rng);
            raw1.push_back(v.v1_raw);
            n1.push_back(v.v1_norm);
            n2.push_back(v.v2_norm);
        }
        auto tt = [](const std::vector<Image>& imgs) {
            std::vector<const Image*> p;
            for (const auto& i : imgs) p.push_back(&i);
            return images_to_tensor(p);
        };
        double oracle_loss;
        {
            Tape tape;
            TapeScope scope(tape);
            Tensor q1 = branches.online_embed(tt(n1));
            Tensor q2 = branches.online_embed(tt(n2));
            Tensor k1 = branches.target_embed(tt(n1));
            Tensor k2 = branches.target_embed(tt(n2));
            Tensor contrast = branches.symmetrized_contrast(q1, q2, k1, k2);
            oracle_loss = contrast.item();
            Tensor total = weights.contrast_only_loss(contrast);
            tape.backward(total);
            branches.enqueue_step_keys(k1, k2);
        }
        opt.step();
        opt.zero_grad();
        branches.ema_update();

        MetricsRecord rec = t.train_step();
        REQUIRE(rec.l_contrast == oracle_loss); // bit-exact
        REQUIRE(rec.l_reconstruct == 0.0);
    }
}

TEST_CASE("metrics lines carry exactly the record fields") {
    MetricsRecord r;
    r.step = 3;
    r.l_contrast = 1.25;
    r.psnr = 17.5;
    auto j = to_json(r);
    REQUIRE(j.size() == 10);
    for (const char* key : {"step", "l_contrast", "l_reconstruct", "combined", "lambda1",
                            "lambda2", "psnr", "decoder_param_ratio", "decoder_flop_ratio",
                            "wall_ms"})
        REQUIRE(j.contains(key));
    MetricsRecord back = metrics_from_json(nlohmann::json::parse(j.dump()));
    REQUIRE(back.l_contrast == r.l_contrast);
    REQUIRE(back.psnr == r.psnr);
}

TEST_CASE("run writes metrics, config, and a final checkpoint to out_dir only") {
    TrainConfig cfg = tiny_config("rundir");
    cfg.steps = 3;
    cfg.checkpoint_every = 2;
    Trainer t(cfg);
    auto history = t.run();
    REQUIRE(history.size() == 3);
    REQUIRE(fs::exists(fs::path(cfg.out_dir) / "metrics.jsonl"));
    REQUIRE(fs::exists(fs::path(cfg.out_dir) / "config.txt"));
    REQUIRE(fs::exists(fs::path(cfg.out_dir) / "checkpoint_step2.ckpt"));
    REQUIRE(fs::exists(fs::path(cfg.out_dir) / "checkpoint_final.ckpt"));

    std::ifstream m(fs::path(cfg.out_dir) / "metrics.jsonl");
    std::string line;
    int64_t lines = 0, expect_step = 1;
    while (std::getline(m, line)) {
        auto rec = metrics_from_json(nlohmann::json::parse(line));
        REQUIRE(rec.step == expect_step++);
        ++lines;
    }
    REQUIRE(lines == 3);
}

TEST_CASE("linear probe: separable two-class data reaches accuracy 1") {
    // two constant-valued image classes: features are two distinct points
    const auto dir = temp_dir("probe_sep");
    fs::create_directories(dir / "dark");
    fs::create_directories(dir / "bright");
    for (int i = 0; i < 6; ++i) {
        write_ppm((dir / "dark" / ("d" + std::to_string(i) + ".ppm")).string(),
                  Image::filled(16, 16, 0.1));
        write_ppm((dir / "bright" / ("b" + std::to_string(i) + ".ppm")).string(),
                  Image::filled(16, 16, 0.9));
    }
    Dataset ds = Dataset::from_directory(dir.string());
    auto [train_idx, test_idx] = probe_split(ds.size(), 3);
    TrainConfig cfg = tiny_config("probe_sep_cfg");
    VisionEncoder enc(cfg.encoder_config(), 42);
    ProbeResult res = linear_probe(enc, cfg.augmentation_policy(), ds.subset(train_idx),
                                   ds.subset(test_idx), 7);
    REQUIRE(res.accuracy == 1.0);
    REQUIRE(res.encoder_fingerprint_before == res.encoder_fingerprint_after);
}

TEST_CASE("linear probe: random labels score near chance") {
    SyntheticSpec spec;
    spec.classes = 4;
    spec.count = 160;
    spec.size = 16;
    spec.seed = 21;
    Dataset ds = Dataset::synthetic(spec);
    // destroy the label signal with a seeded shuffle of labels
    Rng rng(17);
    std::vector<size_t> order(ds.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);
    // rebuild with permuted labels via subset trickery: pair image i with label of order[i]
    const auto dir = temp_dir("probe_rand");
    for (size_t i = 0; i < ds.size(); ++i) {
        const auto cls = std::to_string(ds.at(order[i]).label);
        fs::create_directories(dir / cls);
        write_raw_tensor((dir / cls / ("i" + std::to_string(i) + ".rten")).string(),
                         {16, 16, 3}, ds.at(i).image.rgb);
    }
    Dataset shuffled = Dataset::from_directory(dir.string());
    auto [train_idx, test_idx] = probe_split(shuffled.size(), 5);
    TrainConfig cfg = tiny_config("probe_rand_cfg");
    VisionEncoder enc(cfg.encoder_config(), 43);
    ProbeResult res = linear_probe(enc, cfg.augmentation_policy(), shuffled.subset(train_idx),
                                   shuffled.subset(test_idx), 9);
    REQUIRE(res.accuracy >= 0.05);
    REQUIRE(res.accuracy <= 0.50); // chance is 0.25
}

TEST_CASE("diagnostics dump: file inventory and dimensions") {
    TrainConfig cfg = tiny_config("dump");
    cfg.steps = 2;
    Trainer t(cfg);
    t.run();
    SyntheticSpec spec;
    spec.classes = 4;
    spec.count = 10;
    spec.size = 16;
    spec.seed = 5;
    Dataset ds = Dataset::synthetic(spec);
    const auto dir = temp_dir("dump_out");
    DumpSummary s = dump_diagnostics(t.branches().online_encoder(), t.decoder(),
                                     cfg.augmentation_policy(), ds, dir.string(), 3);
    REQUIRE(s.embedding_rows == 10);
    REQUIRE(s.attention_maps == 3 * 4); // 3 images x 4 heads
    REQUIRE(s.triptychs == 3);

    // attention pixmap dims equal the token grid
    std::ifstream pgm(dir / "attention_img0_head0.pgm", std::ios::binary);
    std::string magic;
    int64_t w, h;
    pgm >> magic >> w >> h;
    REQUIRE(magic == "P5");
    REQUIRE(w == 4);
    REQUIRE(h == 4);

    // triptych width = 3*W + 2 separator columns
    std::ifstream ppm(dir / "reconstruction_img0.ppm", std::ios::binary);
    ppm >> magic >> w >> h;
    REQUIRE(magic == "P6");
    REQUIRE(w == 3 * 16 + 2);
    REQUIRE(h == 16);

    // embeddings.csv: one row per dataset image, id,label,repr...
    std::ifstream csv(dir / "embeddings.csv");
    std::string line;
    int64_t rows = 0;
    while (std::getline(csv, line)) {
        ++rows;
        const auto commas = std::count(line.begin(), line.end(), ',');
        REQUIRE(commas == 1 + t.branches().online_encoder().repr_dim());
    }
    REQUIRE(rows == 10);
}
