// Run configuration. The on-disk format is flat `key = value` text, one field
// per line; '#' starts a comment. Unknown keys are errors, repeated keys take
// the last value, and serialize() -> parse() round-trips losslessly.
#pragma once

#include <functional>
#include <iomanip>
#include <map>

#include "rcsl/contrastive.hpp"
#include "rcsl/data.hpp"
#include "rcsl/decoder.hpp"
#include "rcsl/optim.hpp"

namespace rcsl {

struct TrainConfig {
    // run
    std::string dataset = "synthetic:classes=4,count=512,size=32,seed=7";
    std::string out_dir = "out";
    int64_t steps = 500;
    int64_t batch_size = 32;
    uint64_t seed = 1;
    int64_t checkpoint_every = 0; // 0: only a final checkpoint

    // optimizer
    double lr = 1e-3;
    double weight_decay = 0.01;
    double warmup_fraction = 0.05;

    // encoder
    int64_t image_size = 32;
    int64_t patch_size = 4;
    int64_t depth = 8;
    int64_t width = 128;
    int64_t heads = 4;
    std::string variant = "vit"; // vit | hierarchical
    int64_t tap_count = 4;

    // contrastive branch
    std::string contrastive_mode = "with_negatives"; // with_negatives | without_negatives
    int64_t embed_dim = 128;
    int64_t projector_hidden = 0; // 0 -> 2 * repr_dim
    int64_t predictor_hidden = 256;
    double temperature = 0.2;
    double ema_momentum = 0.99;
    int64_t queue_capacity = 256; // 0 -> in-batch negatives

    // reconstruction branch
    bool reconstruction_enabled = true;
    std::string fusion_operator = "conv"; // conv | transformer
    int64_t fusion_layers = 2;
    int64_t decoder_width = 32;

    // loss weighting
    double s_init_contrast = 0.0;
    double s_init_reconstruct = 0.0;

    // augmentation
    double crop_scale_min = 0.6;
    double crop_scale_max = 1.0;
    double hflip_prob = 0.5;
    double jitter_brightness = 0.4;
    double jitter_contrast = 0.4;
    double jitter_saturation = 0.2;
    double norm_mean_r = 0.5, norm_mean_g = 0.5, norm_mean_b = 0.5;
    double norm_std_r = 0.25, norm_std_g = 0.25, norm_std_b = 0.25;

    EncoderVariant encoder_variant() const {
        if (variant == "vit") return EncoderVariant::Vit;
        if (variant == "hierarchical") return EncoderVariant::Hierarchical;
        fail("config: variant must be 'vit' or 'hierarchical', got '", variant, "'");
    }

    ContrastiveMode mode() const {
        if (contrastive_mode == "with_negatives") return ContrastiveMode::WithNegatives;
        if (contrastive_mode == "without_negatives") return ContrastiveMode::WithoutNegatives;
        fail("config: contrastive_mode must be 'with_negatives' or 'without_negatives', got '",
             contrastive_mode, "'");
    }

    FusionOperator fusion_op() const {
        if (fusion_operator == "conv") return FusionOperator::Conv;
        if (fusion_operator == "transformer") return FusionOperator::Transformer;
        fail("config: fusion_operator must be 'conv' or 'transformer', got '", fusion_operator,
             "'");
    }

    EncoderConfig encoder_config() const {
        EncoderConfig e;
        e.image_size = image_size;
        e.patch_size = patch_size;
        e.depth = depth;
        e.width = width;
        e.heads = heads;
        e.variant = encoder_variant();
        e.tap_count = tap_count;
        return e;
    }

    HeadConfig head_config() const {
        HeadConfig h;
        h.projector_hidden = projector_hidden;
        h.embed_dim = embed_dim;
        h.predictor_hidden = predictor_hidden;
        h.temperature = temperature;
        return h;
    }

    DecoderConfig decoder_config() const {
        DecoderConfig d;
        d.fusion_operator = fusion_op();
        d.fusion_layers_per_block = fusion_layers;
        d.tap_count = tap_count;
        d.width = decoder_width;
        return d;
    }

    OptimizerConfig optimizer_config() const {
        OptimizerConfig o;
        o.lr = lr;
        o.weight_decay = weight_decay;
        o.total_steps = steps;
        o.warmup_fraction = warmup_fraction;
        return o;
    }

    AugmentationPolicy augmentation_policy() const {
        AugmentationPolicy p;
        p.crop_scale_min = crop_scale_min;
        p.crop_scale_max = crop_scale_max;
        p.hflip_prob = hflip_prob;
        p.jitter_brightness = jitter_brightness;
        p.jitter_contrast = jitter_contrast;
        p.jitter_saturation = jitter_saturation;
        p.norm_mean[0] = norm_mean_r;
        p.norm_mean[1] = norm_mean_g;
        p.norm_mean[2] = norm_mean_b;
        p.norm_std[0] = norm_std_r;
        p.norm_std[1] = norm_std_g;
        p.norm_std[2] = norm_std_b;
        return p;
    }

    void validate() const {
        check(steps >= 1, "config: steps must be >= 1");
        check(batch_size >= 1, "config: batch_size must be >= 1");
        check(checkpoint_every >= 0, "config: checkpoint_every must be >= 0");
        check(!dataset.empty() && !out_dir.empty(), "config: dataset and out_dir are required");
        if (mode() == ContrastiveMode::WithNegatives && queue_capacity == 0)
            check(batch_size >= 2, "config: in-batch negatives need batch_size >= 2");
        check(queue_capacity >= 0, "config: queue_capacity must be >= 0");
        check(ema_momentum >= 0.0 && ema_momentum <= 1.0,
              "config: ema_momentum must be in [0, 1]");
        check(std::isfinite(s_init_contrast) && std::isfinite(s_init_reconstruct),
              "config: loss-weight initializers must be finite");
        encoder_config().validate();
        head_config().validate();
        if (reconstruction_enabled) decoder_config().validate();
        optimizer_config().validate();
        augmentation_policy().validate();
    }
};

namespace config_detail {

struct Field {
    std::string key;
    std::function<std::string(const TrainConfig&)> get;
    std::function<void(TrainConfig&, const std::string&)> set;
};

inline std::string fmt_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline const std::vector<Field>& fields() {
    auto str_field = [](std::string key, std::string TrainConfig::*member) {
        return Field{key, [member](const TrainConfig& c) { return c.*member; },
                     [member](TrainConfig& c, const std::string& v) { c.*member = v; }};
    };
    auto int_field = [](std::string key, int64_t TrainConfig::*member) {
        return Field{key,
                     [member](const TrainConfig& c) { return std::to_string(c.*member); },
                     [member](TrainConfig& c, const std::string& v) { c.*member = std::stoll(v); }};
    };
    auto u64_field = [](std::string key, uint64_t TrainConfig::*member) {
        return Field{key,
                     [member](const TrainConfig& c) { return std::to_string(c.*member); },
                     [member](TrainConfig& c, const std::string& v) { c.*member = std::stoull(v); }};
    };
    auto dbl_field = [](std::string key, double TrainConfig::*member) {
        return Field{key, [member](const TrainConfig& c) { return fmt_double(c.*member); },
                     [member](TrainConfig& c, const std::string& v) { c.*member = std::stod(v); }};
    };
    auto bool_field = [](std::string key, bool TrainConfig::*member) {
        return Field{key,
                     [member](const TrainConfig& c) { return c.*member ? "true" : "false"; },
                     [member, key](TrainConfig& c, const std::string& v) {
                         if (v == "true" || v == "1") c.*member = true;
                         else if (v == "false" || v == "0") c.*member = false;
                         else fail("config: boolean field '", key, "' got '", v, "'");
                     }};
    };
    static const std::vector<Field> fields = {
        str_field("dataset", &TrainConfig::dataset),
        str_field("out_dir", &TrainConfig::out_dir),
        int_field("steps", &TrainConfig::steps),
        int_field("batch_size", &TrainConfig::batch_size),
        u64_field("seed", &TrainConfig::seed),
        int_field("checkpoint_every", &TrainConfig::checkpoint_every),
        dbl_field("lr", &TrainConfig::lr),
        dbl_field("weight_decay", &TrainConfig::weight_decay),
        dbl_field("warmup_fraction", &TrainConfig::warmup_fraction),
        int_field("image_size", &TrainConfig::image_size),
        int_field("patch_size", &TrainConfig::patch_size),
        int_field("depth", &TrainConfig::depth),
        int_field("width", &TrainConfig::width),
        int_field("heads", &TrainConfig::heads),
        str_field("variant", &TrainConfig::variant),
        int_field("tap_count", &TrainConfig::tap_count),
        str_field("contrastive_mode", &TrainConfig::contrastive_mode),
        int_field("embed_dim", &TrainConfig::embed_dim),
        int_field("projector_hidden", &TrainConfig::projector_hidden),
        int_field("predictor_hidden", &TrainConfig::predictor_hidden),
        dbl_field("temperature", &TrainConfig::temperature),
        dbl_field("ema_momentum", &TrainConfig::ema_momentum),
        int_field("queue_capacity", &TrainConfig::queue_capacity),
        bool_field("reconstruction_enabled", &TrainConfig::reconstruction_enabled),
        str_field("fusion_operator", &TrainConfig::fusion_operator),
        int_field("fusion_layers", &TrainConfig::fusion_layers),
        int_field("decoder_width", &TrainConfig::decoder_width),
        dbl_field("s_init_contrast", &TrainConfig::s_init_contrast),
        dbl_field("s_init_reconstruct", &TrainConfig::s_init_reconstruct),
        dbl_field("crop_scale_min", &TrainConfig::crop_scale_min),
        dbl_field("crop_scale_max", &TrainConfig::crop_scale_max),
        dbl_field("hflip_prob", &TrainConfig::hflip_prob),
        dbl_field("jitter_brightness", &TrainConfig::jitter_brightness),
        dbl_field("jitter_contrast", &TrainConfig::jitter_contrast),
        dbl_field("jitter_saturation", &TrainConfig::jitter_saturation),
        dbl_field("norm_mean_r", &TrainConfig::norm_mean_r),
        dbl_field("norm_mean_g", &TrainConfig::norm_mean_g),
        dbl_field("norm_mean_b", &TrainConfig::norm_mean_b),
        dbl_field("norm_std_r", &TrainConfig::norm_std_r),
        dbl_field("norm_std_g", &TrainConfig::norm_std_g),
        dbl_field("norm_std_b", &TrainConfig::norm_std_b),
    };
    return fields;
}

} // namespace config_detail

inline std::string serialize_config(const TrainConfig& cfg) {
    std::ostringstream os;
    for (const auto& f : config_detail::fields()) os << f.key << " = " << f.get(cfg) << "\n";
    return os.str();
}

inline TrainConfig parse_config_text(const std::string& text) {
    TrainConfig cfg;
    std::istringstream is(text);
    std::string line;
    int64_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string();
            const auto e = s.find_last_not_of(" \t\r");
            return s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        check(eq != std::string::npos, "config line ", line_no, ": expected 'key = value', got '",
              line, "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        bool found = false;
        for (const auto& f : config_detail::fields()) {
            if (f.key == key) {
                try {
                    f.set(cfg, value);
                } catch (const Error&) {
                    throw;
                } catch (const std::exception&) {
                    fail("config line ", line_no, ": cannot parse value '", value, "' for key '",
                         key, "'");
                }
                found = true;
                break;
            }
        }
        check(found, "config line ", line_no, ": unknown key '", key, "'");
    }
    return cfg;
}

inline TrainConfig load_config_file(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), "config: cannot open ", path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

} // namespace rcsl
