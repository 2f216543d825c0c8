// Training pipeline: batch assembly, the pre-training step (contrastive +
// reconstruction with learnable weighting), metrics, checkpointing, the
// linear probe, and diagnostic dumps.
#pragma once

#include <chrono>
#include <filesystem>

#include <json.hpp>

#include "rcsl/checkpoint.hpp"
#include "rcsl/config.hpp"
#include "rcsl/objective.hpp"

namespace rcsl {

struct MetricsRecord {
    int64_t step = 0;
    double l_contrast = 0.0;
    double l_reconstruct = 0.0;
    double combined = 0.0;
    double lambda1 = 0.0;
    double lambda2 = 0.0;
    double psnr = 0.0;
    double decoder_param_ratio = 0.0;
    double decoder_flop_ratio = 0.0;
    double wall_ms = 0.0;
};

inline nlohmann::json to_json(const MetricsRecord& r) {
    return nlohmann::json{{"step", r.step},
                          {"l_contrast", r.l_contrast},
                          {"l_reconstruct", r.l_reconstruct},
                          {"combined", r.combined},
                          {"lambda1", r.lambda1},
                          {"lambda2", r.lambda2},
                          {"psnr", r.psnr},
                          {"decoder_param_ratio", r.decoder_param_ratio},
                          {"decoder_flop_ratio", r.decoder_flop_ratio},
                          {"wall_ms", r.wall_ms}};
}

inline MetricsRecord metrics_from_json(const nlohmann::json& j) {
    MetricsRecord r;
    r.step = j.at("step").get<int64_t>();
    r.l_contrast = j.at("l_contrast").get<double>();
    r.l_reconstruct = j.at("l_reconstruct").get<double>();
    r.combined = j.at("combined").get<double>();
    r.lambda1 = j.at("lambda1").get<double>();
    r.lambda2 = j.at("lambda2").get<double>();
    r.psnr = j.at("psnr").get<double>();
    r.decoder_param_ratio = j.at("decoder_param_ratio").get<double>();
    r.decoder_flop_ratio = j.at("decoder_flop_ratio").get<double>();
    r.wall_ms = j.at("wall_ms").get<double>();
    return r;
}

class Trainer {
public:
    explicit Trainer(const TrainConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        dataset_ = Dataset::from_spec(cfg_.dataset);
        check(dataset_.size() >= 1, "trainer: empty dataset");
        check(dataset_.at(0).image.h == cfg_.image_size && dataset_.at(0).image.w == cfg_.image_size,
              "trainer: dataset images are ", dataset_.at(0).image.h, "x", dataset_.at(0).image.w,
              " but config expects ", cfg_.image_size, "x", cfg_.image_size);
        policy_ = cfg_.augmentation_policy();

        branches_ = std::make_unique<SiameseBranches>(cfg_.encoder_config(), cfg_.head_config(),
                                                      cfg_.mode(), cfg_.ema_momentum,
                                                      cfg_.queue_capacity, cfg_.seed);
        if (cfg_.reconstruction_enabled) {
            auto [channels, grids] = tap_layout(cfg_.encoder_config());
            decoder_ = std::make_unique<ReconstructionDecoder>(
                cfg_.decoder_config(), channels, grids, cfg_.patch_size,
                seed_stream(cfg_.seed, "decoder"));
            cost_ratio_ = decoder_cost_ratio(branches_->online_encoder(), *decoder_);
        }
        weights_ = std::make_unique<UncertaintyWeights>(cfg_.s_init_contrast,
                                                        cfg_.s_init_reconstruct);

        nn::ParamList trainable = branches_->online_params();
        if (decoder_) decoder_->collect(trainable, "decoder");
        weights_->collect(trainable, "objective");
        optimizer_ = std::make_unique<AdamW>(std::move(trainable), cfg_.optimizer_config());

        data_rng_ = Rng(seed_stream(cfg_.seed, "data"));
    }

    static std::pair<std::vector<int64_t>, std::vector<int64_t>> tap_layout(
        const EncoderConfig& enc) {
        std::vector<int64_t> channels, grids;
        if (enc.variant == EncoderVariant::Vit) {
            for (int64_t i = 0; i < enc.tap_count; ++i) {
                channels.push_back(enc.width);
                grids.push_back(enc.grid_side());
            }
        } else {
            channels = {enc.width, 2 * enc.width};
            grids = {enc.grid_side(), enc.grid_side() / 2};
        }
        return {channels, grids};
    }

    const TrainConfig& config() const { return cfg_; }
    const Dataset& dataset() const { return dataset_; }
    SiameseBranches& branches() { return *branches_; }
    const ReconstructionDecoder* decoder() const { return decoder_.get(); }
    UncertaintyWeights& uncertainty_weights() { return *weights_; }
    const AdamW& optimizer() const { return *optimizer_; }
    int64_t step_index() const { return step_; }
    CostRatio cost_ratio() const { return cost_ratio_; }

    MetricsRecord train_step() {
        const auto t0 = std::chrono::steady_clock::now();
        check(step_ < cfg_.steps, "trainer: run is complete (", cfg_.steps, " steps)");

        // assemble the batch: two augmented views per image, raw first view
        // kept as the reconstruction target
        std::vector<Image> raw1, norm1, norm2;
        raw1.reserve(cfg_.batch_size);
        for (int64_t b = 0; b < cfg_.batch_size; ++b) {
            const auto& item = dataset_.at(static_cast<size_t>(
                data_rng_.uniform_int(static_cast<int64_t>(dataset_.size()))));
            TwoViews views = augment_two_views(item.image, policy_, data_rng_);
            raw1.push_back(std::move(views.v1_raw));
            norm1.push_back(std::move(views.v1_norm));
            norm2.push_back(std::move(views.v2_norm));
        }
        auto to_tensor = [](const std::vector<Image>& imgs) {
            std::vector<const Image*> ptrs;
            for (const auto& i : imgs) ptrs.push_back(&i);
            return images_to_tensor(ptrs);
        };
        Tensor v1 = to_tensor(norm1);
        Tensor v2 = to_tensor(norm2);
        Tensor v1_raw = to_tensor(raw1);

        MetricsRecord rec;
        rec.step = step_ + 1;
        rec.decoder_param_ratio = cost_ratio_.param_ratio;
        rec.decoder_flop_ratio = cost_ratio_.flop_ratio;

        Tape tape;
        {
            TapeScope scope(tape);
            std::vector<TapFeature> taps;
            Tensor q1 = branches_->online_embed(v1, decoder_ ? &taps : nullptr);
            Tensor q2 = branches_->online_embed(v2);
            Tensor k1 = branches_->target_embed(v1);
            Tensor k2 = branches_->target_embed(v2);

            Tensor l_contrast = branches_->symmetrized_contrast(q1, q2, k1, k2);
            rec.l_contrast = l_contrast.item();
            check(std::isfinite(rec.l_contrast), "train_step ", rec.step,
                  ": contrastive loss is non-finite");

            Tensor total;
            if (decoder_) {
                Tensor recon = decoder_->reconstruct(taps);
                Tensor l_rec = reconstruction_loss(v1_raw, recon);
                rec.l_reconstruct = l_rec.item();
                check(std::isfinite(rec.l_reconstruct), "train_step ", rec.step,
                      ": reconstruction loss is non-finite");
                total = weights_->combined_loss(l_contrast, l_rec);
                {
                    NoGradScope ng;
                    double se = 0.0;
                    for (int64_t i = 0; i < recon.numel(); ++i) {
                        const double d = recon.ptr()[i] - v1_raw.ptr()[i];
                        se += d * d;
                    }
                    rec.psnr = 10.0 * std::log10(1.0 / std::max(se / recon.numel(), 1e-12));
                }
            } else {
                total = weights_->contrast_only_loss(l_contrast);
            }
            rec.combined = total.item();
            check(std::isfinite(rec.combined), "train_step ", rec.step,
                  ": combined loss is non-finite");
            tape.backward(total);
            branches_->enqueue_step_keys(k1, k2);
        }
        optimizer_->step();
        optimizer_->zero_grad();
        branches_->ema_update();
        rec.lambda1 = weights_->lambda_contrast();
        rec.lambda2 = weights_->lambda_reconstruct();
        check(rec.lambda1 > 0.0 && std::isfinite(rec.lambda1) && rec.lambda2 > 0.0 &&
                  std::isfinite(rec.lambda2),
              "train_step ", rec.step, ": loss weights left (0, inf)");
        ++step_;
        rec.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
        return rec;
    }

    // Full run: appends one JSON line per step to <out_dir>/metrics.jsonl,
    // drops periodic checkpoints when configured, and writes a final
    // checkpoint plus the serialized config.
    std::vector<MetricsRecord> run() {
        namespace fs = std::filesystem;
        fs::create_directories(cfg_.out_dir);
        std::ofstream metrics(fs::path(cfg_.out_dir) / "metrics.jsonl",
                              step_ == 0 ? std::ios::trunc : std::ios::app);
        check(metrics.good(), "trainer: cannot write metrics under ", cfg_.out_dir);
        {
            std::ofstream cfg_file(fs::path(cfg_.out_dir) / "config.txt");
            cfg_file << serialize_config(cfg_);
        }
        std::vector<MetricsRecord> history;
        while (step_ < cfg_.steps) {
            MetricsRecord rec = train_step();
            metrics << to_json(rec).dump() << "\n";
            metrics.flush();
            history.push_back(rec);
            if (cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0 &&
                step_ < cfg_.steps)
                save(checkpoint_path(step_));
        }
        save(final_checkpoint_path());
        return history;
    }

    std::string checkpoint_path(int64_t step) const {
        return (std::filesystem::path(cfg_.out_dir) /
                ("checkpoint_step" + std::to_string(step) + ".ckpt"))
            .string();
    }
    std::string final_checkpoint_path() const {
        return (std::filesystem::path(cfg_.out_dir) / "checkpoint_final.ckpt").string();
    }

    void save(const std::string& path) const {
        CheckpointData ckpt;
        ckpt.config_text = serialize_config(cfg_);
        ckpt.step = static_cast<uint64_t>(step_);
        ckpt.data_rng_state = data_rng_.serialize();
        if (branches_->uses_queue()) {
            ckpt.has_queue = true;
            ckpt.queue_dim = branches_->queue().dim();
            ckpt.queue_entries = branches_->queue().entries();
        }
        for (const auto& p : all_state_params()) ckpt.tensors.emplace_back(p.name, p.tensor);
        AdamW::State s = optimizer_->state();
        ckpt.optimizer_step = s.t;
        ckpt.optimizer_m = std::move(s.m);
        ckpt.optimizer_v = std::move(s.v);
        save_checkpoint(path, ckpt);
    }

    // Restore a trainer from a checkpoint file. When `expected_config` is
    // given it must serialize identically to the stored config.
    static std::unique_ptr<Trainer> load(const std::string& path,
                                         const TrainConfig* expected_config = nullptr) {
        CheckpointData ckpt = load_checkpoint(path);
        if (expected_config)
            check(serialize_config(*expected_config) == ckpt.config_text,
                  "checkpoint: stored config does not match the requested config; refusing to "
                  "resume");
        TrainConfig cfg = parse_config_text(ckpt.config_text);
        auto trainer = std::make_unique<Trainer>(cfg);
        trainer->restore_state(ckpt);
        return trainer;
    }

    void restore_state(const CheckpointData& ckpt) {
        check(serialize_config(cfg_) == ckpt.config_text,
              "checkpoint: config mismatch on restore");
        std::map<std::string, Tensor> stored;
        for (const auto& [name, tensor] : ckpt.tensors) stored.emplace(name, tensor);
        for (auto& p : all_state_params()) {
            auto it = stored.find(p.name);
            check(it != stored.end(), "checkpoint: missing tensor ", p.name);
            check(it->second.shape() == p.tensor.shape(), "checkpoint: shape mismatch for ",
                  p.name);
            p.tensor.data() = it->second.data();
        }
        AdamW::State s;
        s.t = ckpt.optimizer_step;
        s.m = ckpt.optimizer_m;
        s.v = ckpt.optimizer_v;
        optimizer_->restore(s);
        if (branches_->uses_queue()) {
            check(ckpt.has_queue, "checkpoint: missing negative queue");
            branches_->queue().set_entries(ckpt.queue_entries);
        }
        data_rng_.deserialize(ckpt.data_rng_state);
        step_ = static_cast<int64_t>(ckpt.step);
    }

    // Every tensor that defines training state (online, target, decoder,
    // loss weights), in a stable order.
    nn::ParamList all_state_params() const {
        nn::ParamList out = branches_->online_params();
        if (decoder_) decoder_->collect(out, "decoder");
        weights_->collect(out, "objective");
        nn::ParamList target = branches_->target_params();
        out.insert(out.end(), target.begin(), target.end());
        return out;
    }

private:
    TrainConfig cfg_;
    Dataset dataset_;
    AugmentationPolicy policy_;
    std::unique_ptr<SiameseBranches> branches_;
    std::unique_ptr<ReconstructionDecoder> decoder_;
    std::unique_ptr<UncertaintyWeights> weights_;
    std::unique_ptr<AdamW> optimizer_;
    Rng data_rng_;
    int64_t step_ = 0;
    CostRatio cost_ratio_;
};

// ---------------------------------------------------------------------------
// Evaluation path (never constructs a decoder)
// ---------------------------------------------------------------------------

struct EvalBundle {
    TrainConfig config;
    std::unique_ptr<VisionEncoder> encoder; // online encoder weights
};

// Materialize only the online encoder from a checkpoint.
inline EvalBundle load_encoder_for_eval(const std::string& checkpoint_path) {
    CheckpointData ckpt = load_checkpoint(checkpoint_path);
    EvalBundle bundle;
    bundle.config = parse_config_text(ckpt.config_text);
    bundle.encoder = std::make_unique<VisionEncoder>(bundle.config.encoder_config(),
                                                     seed_stream(bundle.config.seed, "encoder"));
    std::map<std::string, Tensor> stored;
    for (const auto& [name, tensor] : ckpt.tensors) stored.emplace(name, tensor);
    nn::ParamList params;
    bundle.encoder->collect(params, "online.encoder");
    for (auto& p : params) {
        auto it = stored.find(p.name);
        check(it != stored.end(), "checkpoint: missing encoder tensor ", p.name);
        check(it->second.shape() == p.tensor.shape(), "checkpoint: shape mismatch for ", p.name);
        p.tensor.data() = it->second.data();
    }
    return bundle;
}

// Frozen-encoder features for a dataset (no augmentation, normalized input).
inline std::vector<std::vector<double>> extract_features(const VisionEncoder& encoder,
                                                         const AugmentationPolicy& policy,
                                                         const Dataset& ds,
                                                         int64_t batch = 64) {
    NoGradScope ng;
    std::vector<std::vector<double>> features;
    features.reserve(ds.size());
    const int64_t d = encoder.repr_dim();
    for (size_t start = 0; start < ds.size(); start += static_cast<size_t>(batch)) {
        std::vector<Image> normed;
        const size_t end = std::min(ds.size(), start + static_cast<size_t>(batch));
        for (size_t i = start; i < end; ++i) normed.push_back(normalize(ds.at(i).image, policy));
        std::vector<const Image*> ptrs;
        for (const auto& img : normed) ptrs.push_back(&img);
        Tensor repr = encoder.encode(images_to_tensor(ptrs), false).representation;
        for (size_t i = 0; i < end - start; ++i)
            features.emplace_back(repr.ptr() + static_cast<int64_t>(i) * d,
                                  repr.ptr() + static_cast<int64_t>(i + 1) * d);
    }
    return features;
}

struct ProbeResult {
    double accuracy = 0.0;
    int64_t correct = 0;
    int64_t total = 0;
    uint64_t encoder_fingerprint_before = 0;
    uint64_t encoder_fingerprint_after = 0;
};

// Trains a single linear layer on frozen representations and reports top-1
// accuracy on the test split. The encoder is provably untouched: its
// parameter fingerprint before and after is part of the result.
inline ProbeResult linear_probe(const VisionEncoder& encoder, const AugmentationPolicy& policy,
                                const Dataset& train, const Dataset& test, uint64_t seed,
                                int64_t epochs = 300, double lr = 0.05) {
    check(train.size() >= 2 && test.size() >= 1, "linear_probe: need nonempty splits");
    check(train.num_classes() >= 2, "linear_probe: need at least two classes");
    ProbeResult result;
    result.encoder_fingerprint_before = nn::params_fingerprint(encoder.params());

    auto train_feats = extract_features(encoder, policy, train);
    auto test_feats = extract_features(encoder, policy, test);
    const int64_t d = static_cast<int64_t>(train_feats[0].size());
    const int64_t classes = train.num_classes();
    for (size_t i = 0; i < test.size(); ++i)
        check(test.at(i).label < classes, "linear_probe: test label ", test.at(i).label,
              " outside the train label set");

    // standardize features with train-split statistics
    std::vector<double> mean(static_cast<size_t>(d), 0.0), stddev(static_cast<size_t>(d), 0.0);
    for (const auto& f : train_feats)
        for (int64_t j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += f[static_cast<size_t>(j)];
    for (auto& m : mean) m /= static_cast<double>(train_feats.size());
    for (const auto& f : train_feats)
        for (int64_t j = 0; j < d; ++j) {
            const double c = f[static_cast<size_t>(j)] - mean[static_cast<size_t>(j)];
            stddev[static_cast<size_t>(j)] += c * c;
        }
    for (auto& s : stddev) s = std::max(std::sqrt(s / train_feats.size()), 1e-6);
    auto standardized = [&](const std::vector<std::vector<double>>& feats) {
        std::vector<double> flat;
        flat.reserve(feats.size() * static_cast<size_t>(d));
        for (const auto& f : feats)
            for (int64_t j = 0; j < d; ++j)
                flat.push_back((f[static_cast<size_t>(j)] - mean[static_cast<size_t>(j)]) /
                               stddev[static_cast<size_t>(j)]);
        return Tensor::from_data({static_cast<int64_t>(feats.size()), d}, std::move(flat));
    };
    Tensor x_train = standardized(train_feats);
    Tensor x_test = standardized(test_feats);

    std::vector<double> onehot(train_feats.size() * static_cast<size_t>(classes), 0.0);
    for (size_t i = 0; i < train.size(); ++i)
        onehot[i * static_cast<size_t>(classes) + static_cast<size_t>(train.at(i).label)] = 1.0;
    Tensor labels =
        Tensor::from_data({static_cast<int64_t>(train.size()), classes}, std::move(onehot));

    Rng rng(seed_stream(seed, "probe"));
    Tensor w = nn::init_weight(rng, {d, classes});
    Tensor b = nn::init_zeros({classes});
    OptimizerConfig ocfg;
    ocfg.lr = lr;
    ocfg.weight_decay = 0.0;
    ocfg.total_steps = epochs;
    ocfg.warmup_fraction = 0.0;
    AdamW opt(nn::ParamList{{"probe.w", w}, {"probe.b", b}}, ocfg);
    for (int64_t e = 0; e < epochs; ++e) {
        Tape tape;
        TapeScope scope(tape);
        Tensor logits = ops::add(ops::matmul(x_train, w), b);
        Tensor lse = ops::log(ops::sum_last(ops::exp(logits)));
        Tensor picked = ops::sum_last(ops::mul(logits, labels));
        Tensor loss = ops::mean_all(ops::sub(lse, picked));
        tape.backward(loss);
        opt.step();
        opt.zero_grad();
    }

    {
        NoGradScope ng;
        Tensor logits = ops::add(ops::matmul(x_test, w), b);
        for (size_t i = 0; i < test.size(); ++i) {
            const double* row = logits.ptr() + static_cast<int64_t>(i) * classes;
            int64_t arg = 0;
            for (int64_t c = 1; c < classes; ++c)
                if (row[c] > row[arg]) arg = c;
            if (arg == test.at(i).label) ++result.correct;
        }
    }
    result.total = static_cast<int64_t>(test.size());
    result.accuracy = static_cast<double>(result.correct) / static_cast<double>(result.total);
    result.encoder_fingerprint_after = nn::params_fingerprint(encoder.params());
    check(result.encoder_fingerprint_before == result.encoder_fingerprint_after,
          "linear_probe: encoder parameters changed during the probe");
    return result;
}

// Deterministic shuffled half/half split of a dataset's indices.
inline std::pair<std::vector<size_t>, std::vector<size_t>> probe_split(size_t n, uint64_t seed) {
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed_stream(seed, "probe_split"));
    for (size_t i = n; i > 1; --i)
        std::swap(idx[i - 1], idx[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);
    const size_t half = n / 2;
    return {std::vector<size_t>(idx.begin(), idx.begin() + half),
            std::vector<size_t>(idx.begin() + half, idx.end())};
}

} // namespace rcsl
