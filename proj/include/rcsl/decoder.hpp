// Lightweight reconstruction decoder. Tapped token maps are reshaped to 2-D
// grids, projected to a small working width, folded deepest-to-shallowest
// through K-1 fusion blocks (concatenation followed by fusion layers), and
// mapped by a 1x1 convolution to per-patch RGB values that unfold to the full
// image resolution.
//
// The working width is deliberately much smaller than the encoder width; the
// decoder stays a few percent of the encoder in parameters and compute.
#pragma once

#include <atomic>

#include "rcsl/encoder.hpp"

namespace rcsl {

enum class FusionOperator { Conv, Transformer };

inline const char* to_string(FusionOperator op) {
    return op == FusionOperator::Conv ? "conv" : "transformer";
}

struct DecoderConfig {
    FusionOperator fusion_operator = FusionOperator::Conv;
    int64_t fusion_layers_per_block = 2; // in {1, 2, 4}
    int64_t tap_count = 4;               // matches the encoder
    int64_t width = 32;                  // decoder working channels
    int64_t fusion_heads = 4;            // transformer fusion only

    void validate() const {
        check(fusion_layers_per_block == 1 || fusion_layers_per_block == 2 ||
                  fusion_layers_per_block == 4,
              "decoder config: fusion_layers_per_block must be 1, 2 or 4, got ",
              fusion_layers_per_block);
        check(tap_count >= 1, "decoder config: tap_count must be >= 1, got ", tap_count);
        check(width >= 4, "decoder config: width must be >= 4, got ", width);
        check(width % fusion_heads == 0, "decoder config: width ", width,
              " not divisible by fusion_heads ", fusion_heads);
    }
};

// A token map reshaped to its 2-D grid (B, gh, gw, C).
struct FeatureGrid {
    Tensor grid;
    int64_t grid_h = 0;
    int64_t grid_w = 0;
};

// Row-major reshape between token and grid layouts; exact inverse of
// grid_to_tokens.
inline FeatureGrid tokens_to_grid(const Tensor& tokens, int64_t grid_h, int64_t grid_w) {
    check(tokens.rank() == 3, "tokens_to_grid: expected (B, N, C), got ",
          shape_str(tokens.shape()));
    check(tokens.dim(1) == grid_h * grid_w, "tokens_to_grid: ", tokens.dim(1),
          " tokens cannot fill a ", grid_h, "x", grid_w, " grid");
    FeatureGrid g;
    g.grid = ops::reshape(tokens, {tokens.dim(0), grid_h, grid_w, tokens.dim(2)});
    g.grid_h = grid_h;
    g.grid_w = grid_w;
    return g;
}

inline Tensor grid_to_tokens(const FeatureGrid& g) {
    return ops::reshape(g.grid, {g.grid.dim(0), g.grid_h * g.grid_w, g.grid.dim(3)});
}

// Mean absolute error over all pixels of the raw-scale views.
inline Tensor reconstruction_loss(const Tensor& image, const Tensor& reconstruction) {
    check(image.shape() == reconstruction.shape(), "reconstruction_loss: shape mismatch: ",
          shape_str(image.shape()), " vs ", shape_str(reconstruction.shape()));
    return ops::mean_all(ops::abs(ops::sub(reconstruction, image)));
}

class ReconstructionDecoder {
public:
    // tap_channels/tap_grids describe the encoder taps shallow -> deep.
    ReconstructionDecoder(const DecoderConfig& cfg, std::vector<int64_t> tap_channels,
                          std::vector<int64_t> tap_grids, int64_t patch_size, uint64_t seed)
        : cfg_(cfg), tap_channels_(std::move(tap_channels)), tap_grids_(std::move(tap_grids)),
          patch_size_(patch_size) {
        cfg_.validate();
        check(tap_channels_.size() == static_cast<size_t>(cfg_.tap_count),
              "decoder: expected ", cfg_.tap_count, " taps, got ", tap_channels_.size());
        check(tap_grids_.size() == tap_channels_.size(), "decoder: grid/channel lists differ");
        ++live_instances_;
        Rng rng(seed);
        const int64_t w = cfg_.width;
        for (size_t i = 0; i < tap_channels_.size(); ++i)
            input_proj_.emplace_back(rng, tap_channels_[i], w);
        const int64_t blocks = cfg_.tap_count - 1;
        for (int64_t b = 0; b < blocks; ++b) {
            if (cfg_.fusion_operator == FusionOperator::Conv) {
                ConvBlock cb;
                cb.layers.emplace_back(conv_layer(rng, 3, 2 * w, w));
                for (int64_t l = 1; l < cfg_.fusion_layers_per_block; ++l)
                    cb.layers.emplace_back(conv_layer(rng, 3, w, w));
                conv_blocks_.push_back(std::move(cb));
            } else {
                TransformerFusion tf;
                tf.wide_block = nn::TransformerBlock(rng, 2 * w, cfg_.fusion_heads);
                tf.reduce = nn::Linear(rng, 2 * w, w);
                for (int64_t l = 1; l < cfg_.fusion_layers_per_block; ++l)
                    tf.narrow_blocks.emplace_back(rng, w, cfg_.fusion_heads);
                transformer_blocks_.push_back(std::move(tf));
            }
        }
        output_proj_ = conv_layer(rng, 1, w, patch_size_ * patch_size_ * 3);
    }

    ~ReconstructionDecoder() { --live_instances_; }
    ReconstructionDecoder(const ReconstructionDecoder&) = delete;
    ReconstructionDecoder& operator=(const ReconstructionDecoder&) = delete;

    const DecoderConfig& config() const { return cfg_; }

    // Decoders live only in the pre-training path; evaluation code must never
    // construct one. Tests pin that with this counter.
    static int64_t live_instances() { return live_instances_; }

    // Merge a deep feature into a shallower one. The deep grid is upsampled
    // 2x first when its grid is half the shallow grid; any other mismatch is
    // an error. Channels: concat -> 2W, fusion layers map back to W.
    FeatureGrid fuse_block(const FeatureGrid& deep, const FeatureGrid& shallow,
                           int64_t block_index) const {
        check(block_index >= 0 && block_index < cfg_.tap_count - 1, "fuse_block: block index ",
              block_index, " out of range");
        FeatureGrid d = deep;
        if (d.grid_h * 2 == shallow.grid_h && d.grid_w * 2 == shallow.grid_w) {
            d.grid = ops::bilinear_upsample_2x(d.grid);
            d.grid_h *= 2;
            d.grid_w *= 2;
        }
        check(d.grid_h == shallow.grid_h && d.grid_w == shallow.grid_w,
              "fuse_block: irreconcilable grids ", deep.grid_h, "x", deep.grid_w, " vs ",
              shallow.grid_h, "x", shallow.grid_w, " (ratio must be 1 or 2)");
        Tensor merged = ops::concat_last({d.grid, shallow.grid});
        FeatureGrid out;
        out.grid_h = shallow.grid_h;
        out.grid_w = shallow.grid_w;
        if (cfg_.fusion_operator == FusionOperator::Conv) {
            const auto& cb = conv_blocks_[static_cast<size_t>(block_index)];
            Tensor x = merged;
            for (const auto& layer : cb.layers)
                x = ops::relu(ops::conv2d(x, layer.weight, layer.bias));
            out.grid = x;
        } else {
            const auto& tf = transformer_blocks_[static_cast<size_t>(block_index)];
            const int64_t b = merged.dim(0);
            Tensor tokens = ops::reshape(merged, {b, out.grid_h * out.grid_w, 2 * cfg_.width});
            tokens = tf.reduce.forward(tf.wide_block.forward(tokens));
            for (const auto& blk : tf.narrow_blocks) tokens = blk.forward(tokens);
            out.grid = ops::reshape(tokens, {b, out.grid_h, out.grid_w, cfg_.width});
        }
        return out;
    }

    // Full reconstruction: fold taps deepest -> shallowest, then map each
    // feature vector to its patch of raw pixels.
    Tensor reconstruct(const std::vector<TapFeature>& taps) const {
        check(taps.size() == static_cast<size_t>(cfg_.tap_count), "reconstruct: got ",
              taps.size(), " taps, config expects ", cfg_.tap_count);
        std::vector<FeatureGrid> projected;
        for (size_t i = 0; i < taps.size(); ++i) {
            check(taps[i].tokens.dim(2) == tap_channels_[i], "reconstruct: tap ", i, " has ",
                  taps[i].tokens.dim(2), " channels, expected ", tap_channels_[i]);
            Tensor t = input_proj_[i].forward(taps[i].tokens);
            projected.push_back(tokens_to_grid(t, taps[i].grid_h, taps[i].grid_w));
        }
        FeatureGrid current = projected.back(); // deepest
        for (int64_t i = cfg_.tap_count - 2; i >= 0; --i)
            current = fuse_block(current, projected[static_cast<size_t>(i)],
                                 cfg_.tap_count - 2 - i);
        Tensor pixels = ops::conv2d(current.grid, output_proj_.weight, output_proj_.bias);
        const int64_t b = pixels.dim(0);
        Tensor tokens =
            ops::reshape(pixels, {b, current.grid_h * current.grid_w,
                                  patch_size_ * patch_size_ * 3});
        return nn_detail::patches_to_image(tokens, current.grid_h, current.grid_w, patch_size_, 3);
    }

    void collect(nn::ParamList& out, const std::string& prefix) const {
        for (size_t i = 0; i < input_proj_.size(); ++i)
            input_proj_[i].collect(out, prefix + ".input_proj" + std::to_string(i));
        for (size_t b = 0; b < conv_blocks_.size(); ++b)
            for (size_t l = 0; l < conv_blocks_[b].layers.size(); ++l) {
                const auto& layer = conv_blocks_[b].layers[l];
                const std::string base =
                    prefix + ".fuse" + std::to_string(b) + ".conv" + std::to_string(l);
                nn::append_param(out, base + ".weight", layer.weight);
                nn::append_param(out, base + ".bias", layer.bias);
            }
        for (size_t b = 0; b < transformer_blocks_.size(); ++b) {
            const auto& tf = transformer_blocks_[b];
            const std::string base = prefix + ".fuse" + std::to_string(b);
            tf.wide_block.collect(out, base + ".wide");
            tf.reduce.collect(out, base + ".reduce");
            for (size_t l = 0; l < tf.narrow_blocks.size(); ++l)
                tf.narrow_blocks[l].collect(out, base + ".narrow" + std::to_string(l));
        }
        nn::append_param(out, prefix + ".output.weight", output_proj_.weight);
        nn::append_param(out, prefix + ".output.bias", output_proj_.bias);
    }

    nn::ParamList params() const {
        nn::ParamList out;
        collect(out, "decoder");
        return out;
    }

    int64_t param_count() const { return nn::total_param_count(params()); }

    // Dense multiply-accumulate count of a single-image forward pass.
    int64_t flop_estimate() const {
        int64_t macs = 0;
        for (size_t i = 0; i < input_proj_.size(); ++i) {
            const int64_t n = tap_grids_[i] * tap_grids_[i];
            macs += n * tap_channels_[i] * cfg_.width;
        }
        const int64_t w = cfg_.width;
        const int64_t out_side = tap_grids_.empty() ? 0 : tap_grids_.front();
        for (size_t b = 0; b < conv_blocks_.size() + transformer_blocks_.size(); ++b) {
            const int64_t n = out_side * out_side; // fusion runs at the shallow grid
            if (cfg_.fusion_operator == FusionOperator::Conv) {
                macs += n * 9 * (2 * w) * w;
                macs += (cfg_.fusion_layers_per_block - 1) * n * 9 * w * w;
            } else {
                macs += 12 * n * (2 * w) * (2 * w) + 2 * n * n * (2 * w);
                macs += n * (2 * w) * w;
                macs += (cfg_.fusion_layers_per_block - 1) * (12 * n * w * w + 2 * n * n * w);
            }
        }
        macs += out_side * out_side * w * (patch_size_ * patch_size_ * 3);
        return macs;
    }

private:
    struct ConvLayer {
        Tensor weight;
        Tensor bias;
    };
    struct ConvBlock {
        std::vector<ConvLayer> layers;
    };
    struct TransformerFusion {
        nn::TransformerBlock wide_block;
        nn::Linear reduce;
        std::vector<nn::TransformerBlock> narrow_blocks;
    };

    static ConvLayer conv_layer(Rng& rng, int64_t k, int64_t cin, int64_t cout) {
        ConvLayer layer;
        layer.weight = nn::init_weight(rng, {k, k, cin, cout});
        layer.bias = nn::init_zeros({cout});
        return layer;
    }

    DecoderConfig cfg_;
    std::vector<int64_t> tap_channels_;
    std::vector<int64_t> tap_grids_;
    int64_t patch_size_;
    std::vector<nn::Linear> input_proj_;
    std::vector<ConvBlock> conv_blocks_;
    std::vector<TransformerFusion> transformer_blocks_;
    ConvLayer output_proj_;
    static inline std::atomic<int64_t> live_instances_{0};
};

// Decoder size relative to the encoder: parameter count and forward-pass
// multiply-accumulate estimates.
struct CostRatio {
    double param_ratio = 0.0;
    double flop_ratio = 0.0;
};

inline CostRatio decoder_cost_ratio(int64_t encoder_params, int64_t encoder_flops,
                                    int64_t decoder_params, int64_t decoder_flops) {
    CostRatio r;
    r.param_ratio = encoder_params > 0
                        ? static_cast<double>(decoder_params) / static_cast<double>(encoder_params)
                        : 0.0;
    r.flop_ratio = encoder_flops > 0
                       ? static_cast<double>(decoder_flops) / static_cast<double>(encoder_flops)
                       : 0.0;
    return r;
}

inline CostRatio decoder_cost_ratio(const VisionEncoder& encoder,
                                    const ReconstructionDecoder& decoder) {
    return decoder_cost_ratio(encoder.param_count(), encoder.flop_estimate(),
                              decoder.param_count(), decoder.flop_estimate());
}

} // namespace rcsl
