// Miniature vision transformer encoder with multi-hierarchy feature taps.
//
// Two variants share one class:
//   vit          — class token, uniform token grid, taps at evenly spaced
//                  block outputs
//   hierarchical — no class token, two resolution stages separated by a 2x2
//                  patch-merging step (grid halves per side, channels double),
//                  taps at the last block of each stage, global-average-pooled
//                  representation
#pragma once

#include "rcsl/nn.hpp"

namespace rcsl {

enum class EncoderVariant { Vit, Hierarchical };

inline const char* to_string(EncoderVariant v) {
    return v == EncoderVariant::Vit ? "vit" : "hierarchical";
}

struct EncoderConfig {
    int64_t image_size = 32; // square images
    int64_t patch_size = 4;
    int64_t depth = 8;  // transformer blocks in total
    int64_t width = 128;
    int64_t heads = 4;
    EncoderVariant variant = EncoderVariant::Vit;
    int64_t tap_count = 4;

    int64_t grid_side() const { return image_size / patch_size; }
    int64_t token_count() const { return grid_side() * grid_side(); }

    void validate() const {
        check(image_size > 0 && patch_size > 0 && image_size % patch_size == 0,
              "encoder config: image_size ", image_size, " must be a positive multiple of ",
              "patch_size ", patch_size);
        check(token_count() >= 1, "encoder config: no patches");
        check(depth >= 2, "encoder config: depth must be >= 2, got ", depth);
        check(tap_count >= 1 && tap_count < depth, "encoder config: tap_count ", tap_count,
              " must satisfy 1 <= K < depth ", depth);
        check(width % heads == 0, "encoder config: width ", width, " not divisible by heads ",
              heads);
        if (variant == EncoderVariant::Hierarchical) {
            check(tap_count == 2, "encoder config: hierarchical variant has two stages and "
                                  "requires tap_count == 2, got ", tap_count);
            check(grid_side() % 2 == 0, "encoder config: hierarchical variant needs an even "
                                        "token grid, got side ", grid_side());
        }
    }
};

// Block indices (zero-based block outputs) tapped for the multi-hierarchy
// feature set: floor(L/K)*k - 1 for k = 1..K-1, plus the last block L-1.
inline std::vector<int64_t> hierarchy_indices(int64_t depth, int64_t tap_count) {
    check(tap_count >= 1 && tap_count < depth, "hierarchy_indices: need 1 <= K < L, got K=",
          tap_count, " L=", depth);
    std::vector<int64_t> idx;
    const int64_t step = depth / tap_count;
    for (int64_t k = 1; k < tap_count; ++k) idx.push_back(step * k - 1);
    idx.push_back(depth - 1);
    return idx;
}

// One tapped feature map: patch tokens only (never the class token).
struct TapFeature {
    Tensor tokens; // (B, N_stage, C_stage)
    int64_t grid_h = 0;
    int64_t grid_w = 0;
};

struct EncodeResult {
    Tensor representation;       // (B, repr_dim): class token (vit) or pooled tokens
    std::vector<TapFeature> taps; // shallow -> deep
};

namespace nn_detail {

// (B, H, W, 3) -> (B, N, P*P*3) patch unfold via reshape/permute.
inline Tensor image_to_patches(const Tensor& img, int64_t patch) {
    const int64_t b = img.dim(0), h = img.dim(1), w = img.dim(2), c = img.dim(3);
    const int64_t gh = h / patch, gw = w / patch;
    Tensor t = ops::reshape(img, {b, gh, patch, gw, patch, c});
    t = ops::transpose(t, {0, 1, 3, 2, 4, 5});
    return ops::reshape(t, {b, gh * gw, patch * patch * c});
}

// Inverse of image_to_patches: (B, N, P*P*3) -> (B, H, W, 3).
inline Tensor patches_to_image(const Tensor& tokens, int64_t grid_h, int64_t grid_w,
                               int64_t patch, int64_t channels) {
    const int64_t b = tokens.dim(0);
    Tensor t = ops::reshape(tokens, {b, grid_h, grid_w, patch, patch, channels});
    t = ops::transpose(t, {0, 1, 3, 2, 4, 5});
    return ops::reshape(t, {b, grid_h * patch, grid_w * patch, channels});
}

// Concatenate along the token axis of (B, T, C) tensors.
inline Tensor concat_tokens(const Tensor& a, const Tensor& b) {
    Tensor ap = ops::transpose(a, {0, 2, 1});
    Tensor bp = ops::transpose(b, {0, 2, 1});
    return ops::transpose(ops::concat_last({ap, bp}), {0, 2, 1});
}

// tokens (B, T, C) -> rows [start, start+len) along the token axis.
inline Tensor slice_tokens(const Tensor& x, int64_t start, int64_t len) {
    Tensor p = ops::transpose(x, {0, 2, 1});
    return ops::transpose(ops::slice_last(p, start, len), {0, 2, 1});
}

// mean over the token axis: (B, T, C) -> (B, C)
inline Tensor mean_tokens(const Tensor& x) {
    return ops::mean_last(ops::transpose(x, {0, 2, 1}));
}

} // namespace nn_detail

class VisionEncoder {
public:
    explicit VisionEncoder(const EncoderConfig& cfg, uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        const int64_t n = cfg_.token_count();
        const int64_t c = cfg_.width;
        patch_proj_ = nn::Linear(rng, cfg_.patch_size * cfg_.patch_size * 3, c);
        if (cfg_.variant == EncoderVariant::Vit) {
            class_token_ = nn::init_weight(rng, {1, c});
            pos_embed_ = nn::init_weight(rng, {n + 1, c});
            for (int64_t i = 0; i < cfg_.depth; ++i)
                blocks_.emplace_back(rng, c, cfg_.heads);
        } else {
            pos_embed_ = nn::init_weight(rng, {n, c});
            stage1_depth_ = cfg_.depth / 2;
            for (int64_t i = 0; i < stage1_depth_; ++i) blocks_.emplace_back(rng, c, cfg_.heads);
            merge_norm_ = nn::LayerNorm(4 * c);
            merge_proj_ = nn::Linear(rng, 4 * c, 2 * c);
            for (int64_t i = stage1_depth_; i < cfg_.depth; ++i)
                blocks_.emplace_back(rng, 2 * c, cfg_.heads);
        }
        tap_indices_ = cfg_.variant == EncoderVariant::Vit
                           ? hierarchy_indices(cfg_.depth, cfg_.tap_count)
                           : std::vector<int64_t>{stage1_depth_ - 1, cfg_.depth - 1};
    }

    const EncoderConfig& config() const { return cfg_; }
    const std::vector<int64_t>& tap_indices() const { return tap_indices_; }

    int64_t repr_dim() const {
        return cfg_.variant == EncoderVariant::Vit ? cfg_.width : 2 * cfg_.width;
    }

    // Patch embedding: non-overlapping PxP linear projection, class token for
    // the vit variant, learned position embedding added once.
    Tensor embed(const Tensor& images) const {
        check(images.rank() == 4 && images.dim(1) == cfg_.image_size &&
                  images.dim(2) == cfg_.image_size && images.dim(3) == 3,
              "encoder: expected images of shape Bx", cfg_.image_size, "x", cfg_.image_size,
              "x3, got ", shape_str(images.shape()));
        const int64_t b = images.dim(0);
        Tensor tokens = patch_proj_.forward(nn_detail::image_to_patches(images, cfg_.patch_size));
        if (cfg_.variant == EncoderVariant::Vit) {
            Tensor ones = Tensor::filled({b, 1}, 1.0);
            Tensor cls = ops::reshape(ops::matmul(ones, class_token_), {b, 1, cfg_.width});
            tokens = nn_detail::concat_tokens(cls, tokens);
        }
        return ops::add(tokens, pos_embed_);
    }

    EncodeResult encode(const Tensor& images, bool with_taps = true) const {
        Tensor x = embed(images);
        EncodeResult result;
        const int64_t b = images.dim(0);
        const int64_t side = cfg_.grid_side();
        size_t next_tap = 0;
        for (int64_t i = 0; i < cfg_.depth; ++i) {
            if (cfg_.variant == EncoderVariant::Hierarchical && i == stage1_depth_)
                x = merge_stage(x, b, side);
            x = blocks_[static_cast<size_t>(i)].forward(x);
            if (with_taps && next_tap < tap_indices_.size() && tap_indices_[next_tap] == i) {
                result.taps.push_back(make_tap(x, i));
                ++next_tap;
            }
        }
        if (cfg_.variant == EncoderVariant::Vit) {
            result.representation = ops::reshape(
                ops::slice_last(ops::transpose(x, {0, 2, 1}), 0, 1), {b, cfg_.width});
        } else {
            result.representation = nn_detail::mean_tokens(x);
        }
        return result;
    }

    // Softmax attention weights from the class-token query to the N patch
    // keys at the given block and head, renormalized over the patch keys.
    std::vector<double> attention_map(const Tensor& image, int64_t block, int64_t head) const {
        check(cfg_.variant == EncoderVariant::Vit,
              "attention_map: hierarchical variant has no class token");
        check(block >= 0 && block < cfg_.depth, "attention_map: block ", block, " out of range");
        check(head >= 0 && head < cfg_.heads, "attention_map: head ", head, " out of range");
        check(image.dim(0) == 1, "attention_map: expects a single image");
        NoGradScope ng;
        Tensor x = embed(image);
        for (int64_t i = 0; i <= block; ++i) x = blocks_[static_cast<size_t>(i)].forward(x);
        const Tensor& probs = blocks_[static_cast<size_t>(block)].attn.last_probs;
        const int64_t t = probs.dim(3);
        const int64_t n = t - 1;
        std::vector<double> out(static_cast<size_t>(n));
        const double* row = probs.ptr() + head * t * t; // batch 0, query 0
        double sum = 0.0;
        for (int64_t j = 1; j < t; ++j) sum += row[j];
        check(sum > 0.0, "attention_map: degenerate attention row");
        for (int64_t j = 1; j < t; ++j) out[static_cast<size_t>(j - 1)] = row[j] / sum;
        return out;
    }

    void collect(nn::ParamList& out, const std::string& prefix) const {
        patch_proj_.collect(out, prefix + ".patch_proj");
        if (cfg_.variant == EncoderVariant::Vit)
            nn::append_param(out, prefix + ".class_token", class_token_);
        nn::append_param(out, prefix + ".pos_embed", pos_embed_);
        for (size_t i = 0; i < blocks_.size(); ++i)
            blocks_[i].collect(out, prefix + ".block" + std::to_string(i));
        if (cfg_.variant == EncoderVariant::Hierarchical) {
            merge_norm_.collect(out, prefix + ".merge_norm");
            merge_proj_.collect(out, prefix + ".merge_proj");
        }
    }

    nn::ParamList params() const {
        nn::ParamList out;
        collect(out, "encoder");
        return out;
    }

    int64_t param_count() const { return nn::total_param_count(params()); }

    // Dense multiply-accumulate count of a single-image forward pass.
    int64_t flop_estimate() const {
        const int64_t n = cfg_.token_count();
        const int64_t c = cfg_.width;
        auto block_macs = [&](int64_t tokens, int64_t dim) {
            return 12 * tokens * dim * dim + 2 * tokens * tokens * dim;
        };
        int64_t macs = n * (cfg_.patch_size * cfg_.patch_size * 3) * c;
        if (cfg_.variant == EncoderVariant::Vit) {
            macs += cfg_.depth * block_macs(n + 1, c);
        } else {
            macs += stage1_depth_ * block_macs(n, c);
            macs += (n / 4) * (4 * c) * (2 * c); // merge projection
            macs += (cfg_.depth - stage1_depth_) * block_macs(n / 4, 2 * c);
        }
        return macs;
    }

    const std::vector<nn::TransformerBlock>& blocks() const { return blocks_; }

private:
    TapFeature make_tap(const Tensor& x, int64_t block_index) const {
        TapFeature tap;
        const bool stage2 = cfg_.variant == EncoderVariant::Hierarchical &&
                            block_index >= stage1_depth_;
        const int64_t side = stage2 ? cfg_.grid_side() / 2 : cfg_.grid_side();
        tap.grid_h = side;
        tap.grid_w = side;
        if (cfg_.variant == EncoderVariant::Vit) {
            tap.tokens = nn_detail::slice_tokens(x, 1, cfg_.token_count());
        } else {
            tap.tokens = x;
        }
        return tap;
    }

    Tensor merge_stage(const Tensor& x, int64_t b, int64_t side) const {
        Tensor grid = ops::reshape(x, {b, side, side, cfg_.width});
        Tensor merged = ops::patch_merge_2x2(grid);
        Tensor tokens =
            ops::reshape(merged, {b, (side / 2) * (side / 2), 4 * cfg_.width});
        return merge_proj_.forward(merge_norm_.forward(tokens));
    }

    EncoderConfig cfg_;
    nn::Linear patch_proj_;
    Tensor class_token_;
    Tensor pos_embed_;
    std::vector<nn::TransformerBlock> blocks_;
    nn::LayerNorm merge_norm_;
    nn::Linear merge_proj_;
    int64_t stage1_depth_ = 0;
    std::vector<int64_t> tap_indices_;
};

} // namespace rcsl
