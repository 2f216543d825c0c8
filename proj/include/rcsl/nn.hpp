// Small parameterized building blocks used by the encoder, decoder, and
// projection heads. Initialization is truncated-normal (std 0.02) for weights
// and zero for biases, drawn from an explicit RNG so construction order is the
// only thing that determines parameter values.
#pragma once

#include "rcsl/ops.hpp"

namespace rcsl {
namespace nn {

struct NamedParam {
    std::string name;
    Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

inline void append_param(ParamList& out, const std::string& name, const Tensor& t) {
    out.push_back(NamedParam{name, t});
}

inline constexpr double kInitStd = 0.02;

inline Tensor init_weight(Rng& rng, Shape shape, double stddev = kInitStd) {
    std::vector<double> v(static_cast<size_t>(numel_of(shape)));
    for (double& x : v) x = rng.trunc_normal(stddev);
    Tensor t = Tensor::from_data(std::move(shape), std::move(v));
    t.set_requires_grad(true);
    return t;
}

inline Tensor init_zeros(Shape shape) {
    Tensor t = Tensor::zeros(std::move(shape));
    t.set_requires_grad(true);
    return t;
}

inline Tensor init_ones(Shape shape) {
    Tensor t = Tensor::filled(std::move(shape), 1.0);
    t.set_requires_grad(true);
    return t;
}

struct Linear {
    Tensor weight; // (in, out)
    Tensor bias;   // (out)

    Linear() = default;
    Linear(Rng& rng, int64_t in, int64_t out)
        : weight(init_weight(rng, {in, out})), bias(init_zeros({out})) {}

    Tensor forward(const Tensor& x) const { return ops::add(ops::matmul(x, weight), bias); }

    int64_t in_dim() const { return weight.dim(0); }
    int64_t out_dim() const { return weight.dim(1); }
    int64_t param_count() const { return weight.numel() + bias.numel(); }

    void collect(ParamList& out, const std::string& prefix) const {
        append_param(out, prefix + ".weight", weight);
        append_param(out, prefix + ".bias", bias);
    }
};

struct LayerNorm {
    Tensor gamma;
    Tensor beta;

    LayerNorm() = default;
    explicit LayerNorm(int64_t dim) : gamma(init_ones({dim})), beta(init_zeros({dim})) {}

    Tensor forward(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }

    int64_t param_count() const { return gamma.numel() + beta.numel(); }

    void collect(ParamList& out, const std::string& prefix) const {
        append_param(out, prefix + ".gamma", gamma);
        append_param(out, prefix + ".beta", beta);
    }
};

enum class Activation { Gelu, Relu };

// Two-layer perceptron.
struct Mlp {
    Linear fc1;
    Linear fc2;
    Activation act = Activation::Gelu;

    Mlp() = default;
    Mlp(Rng& rng, int64_t in, int64_t hidden, int64_t out, Activation act_ = Activation::Gelu)
        : fc1(rng, in, hidden), fc2(rng, hidden, out), act(act_) {}

    Tensor forward(const Tensor& x) const {
        Tensor h = fc1.forward(x);
        h = act == Activation::Gelu ? ops::gelu(h) : ops::relu(h);
        return fc2.forward(h);
    }

    int64_t param_count() const { return fc1.param_count() + fc2.param_count(); }

    void collect(ParamList& out, const std::string& prefix) const {
        fc1.collect(out, prefix + ".fc1");
        fc2.collect(out, prefix + ".fc2");
    }
};

// Multi-head self-attention over a (B, T, C) token tensor. The most recent
// softmax attention probabilities (B, heads, T, T) are kept for diagnostics.
struct MultiHeadAttention {
    Linear wq, wk, wv, wo;
    int64_t heads = 1;
    mutable Tensor last_probs;

    MultiHeadAttention() = default;
    MultiHeadAttention(Rng& rng, int64_t dim, int64_t heads_)
        : wq(rng, dim, dim), wk(rng, dim, dim), wv(rng, dim, dim), wo(rng, dim, dim),
          heads(heads_) {
        check(dim % heads_ == 0, "attention: width ", dim, " not divisible by heads ", heads_);
    }

    Tensor forward(const Tensor& x) const {
        const int64_t b = x.dim(0), t = x.dim(1), c = x.dim(2);
        const int64_t d = c / heads;
        auto split = [&](const Tensor& m) {
            // (B,T,C) -> (B,heads,T,d)
            return ops::transpose(ops::reshape(m, {b, t, heads, d}), {0, 2, 1, 3});
        };
        Tensor q = split(wq.forward(x));
        Tensor k = split(wk.forward(x));
        Tensor v = split(wv.forward(x));
        Tensor kt = ops::transpose(k, {0, 1, 3, 2}); // (B,heads,d,T)
        Tensor scores = ops::scale(ops::matmul(q, kt), 1.0 / std::sqrt(static_cast<double>(d)));
        Tensor probs = ops::softmax_last(scores);
        last_probs = probs;
        Tensor ctx = ops::matmul(probs, v); // (B,heads,T,d)
        Tensor merged = ops::reshape(ops::transpose(ctx, {0, 2, 1, 3}), {b, t, c});
        return wo.forward(merged);
    }

    int64_t param_count() const {
        return wq.param_count() + wk.param_count() + wv.param_count() + wo.param_count();
    }

    void collect(ParamList& out, const std::string& prefix) const {
        wq.collect(out, prefix + ".wq");
        wk.collect(out, prefix + ".wk");
        wv.collect(out, prefix + ".wv");
        wo.collect(out, prefix + ".wo");
    }
};

// Pre-norm transformer block: x + attn(ln1(x)); x + mlp(ln2(x)).
struct TransformerBlock {
    LayerNorm ln1;
    MultiHeadAttention attn;
    LayerNorm ln2;
    Mlp mlp;

    TransformerBlock() = default;
    TransformerBlock(Rng& rng, int64_t dim, int64_t heads, int64_t mlp_ratio = 4)
        : ln1(dim), attn(rng, dim, heads), ln2(dim),
          mlp(rng, dim, dim * mlp_ratio, dim, Activation::Gelu) {}

    Tensor forward(const Tensor& x) const {
        Tensor h = ops::add(x, attn.forward(ln1.forward(x)));
        return ops::add(h, mlp.forward(ln2.forward(h)));
    }

    int64_t param_count() const {
        return ln1.param_count() + attn.param_count() + ln2.param_count() + mlp.param_count();
    }

    void collect(ParamList& out, const std::string& prefix) const {
        ln1.collect(out, prefix + ".ln1");
        attn.collect(out, prefix + ".attn");
        ln2.collect(out, prefix + ".ln2");
        mlp.collect(out, prefix + ".mlp");
    }
};

// Copy values of aligned parameter lists (used to sync a target network).
inline void copy_params(const ParamList& src, ParamList& dst) {
    check(src.size() == dst.size(), "copy_params: list sizes differ: ", src.size(), " vs ",
          dst.size());
    for (size_t i = 0; i < src.size(); ++i) {
        check(src[i].tensor.shape() == dst[i].tensor.shape(), "copy_params: shape mismatch at ",
              src[i].name);
        dst[i].tensor.data() = src[i].tensor.data();
    }
}

// FNV-1a fingerprint over parameter payloads, order-sensitive.
inline uint64_t params_fingerprint(const ParamList& params) {
    uint64_t h = 1469598103934665603ull;
    for (const auto& p : params) {
        h = fnv1a64(p.name.data(), p.name.size(), h);
        h = fnv1a64(p.tensor.data().data(), p.tensor.data().size() * sizeof(double), h);
    }
    return h;
}

inline int64_t total_param_count(const ParamList& params) {
    int64_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    return n;
}

} // namespace nn
} // namespace rcsl
