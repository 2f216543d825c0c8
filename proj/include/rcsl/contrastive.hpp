// Siamese contrastive branch: projection/prediction heads, EMA target
// network, FIFO negative queue, and the two loss families (softmax over
// positives-plus-negatives, and negative cosine similarity with stop-gradient
// targets).
#pragma once

#include <deque>

#include "rcsl/encoder.hpp"

namespace rcsl {

enum class ContrastiveMode { WithNegatives, WithoutNegatives };

inline const char* to_string(ContrastiveMode m) {
    return m == ContrastiveMode::WithNegatives ? "with_negatives" : "without_negatives";
}

struct HeadConfig {
    int64_t projector_hidden = 0; // 0 -> 2 * repr_dim
    int64_t embed_dim = 128;
    int64_t predictor_hidden = 256;
    double temperature = 0.2;

    void validate() const {
        check(temperature > 0.0, "head config: temperature must be > 0, got ", temperature);
        check(embed_dim > 0 && predictor_hidden > 0, "head config: dims must be positive");
    }
};

// FIFO queue of detached, unit-norm key vectors.
class NegativeQueue {
public:
    NegativeQueue() = default;
    NegativeQueue(int64_t capacity, int64_t dim) : capacity_(capacity), dim_(dim) {}

    // Fill with random unit vectors so the queue is never empty.
    void prime(Rng& rng) {
        entries_.clear();
        for (int64_t i = 0; i < capacity_; ++i) {
            std::vector<double> v(static_cast<size_t>(dim_));
            double norm = 0.0;
            for (double& x : v) {
                x = rng.normal();
                norm += x * x;
            }
            norm = std::sqrt(std::max(norm, 1e-12));
            for (double& x : v) x /= norm;
            entries_.push_back(std::move(v));
        }
    }

    // Append rows of a (B, D) key matrix; oldest entries are evicted beyond
    // capacity. Keys must be detached and unit-norm (within 1e-6).
    void enqueue(const Tensor& keys) {
        check(keys.rank() == 2 && keys.dim(1) == dim_, "negative queue: expected Bx", dim_,
              " keys, got ", shape_str(keys.shape()));
        check(!keys.requires_grad(), "negative queue: keys must be detached");
        const int64_t b = keys.dim(0);
        for (int64_t r = 0; r < b; ++r) {
            double norm = 0.0;
            for (int64_t c = 0; c < dim_; ++c) {
                const double v = keys.data()[r * dim_ + c];
                norm += v * v;
            }
            norm = std::sqrt(norm);
            check(std::fabs(norm - 1.0) <= 1e-6, "negative queue: key ", r,
                  " is not unit norm (", norm, ")");
            entries_.emplace_back(keys.ptr() + r * dim_, keys.ptr() + (r + 1) * dim_);
            if (static_cast<int64_t>(entries_.size()) > capacity_) entries_.pop_front();
        }
    }

    int64_t size() const { return static_cast<int64_t>(entries_.size()); }
    int64_t capacity() const { return capacity_; }
    int64_t dim() const { return dim_; }

    const std::deque<std::vector<double>>& entries() const { return entries_; }

    // Constant (Kq, D) tensor of the queued keys, oldest first.
    Tensor as_matrix() const {
        check(!entries_.empty(), "negative queue: empty");
        std::vector<double> flat;
        flat.reserve(entries_.size() * static_cast<size_t>(dim_));
        for (const auto& e : entries_) flat.insert(flat.end(), e.begin(), e.end());
        return Tensor::from_data({static_cast<int64_t>(entries_.size()), dim_}, std::move(flat));
    }

    void set_entries(std::deque<std::vector<double>> entries) { entries_ = std::move(entries); }

private:
    int64_t capacity_ = 0;
    int64_t dim_ = 0;
    std::deque<std::vector<double>> entries_;
};

// -----------------------------------------------------------------------
// Losses
// -----------------------------------------------------------------------

// Softmax contrastive loss with explicit negatives: the positive logit is
// part of the (Kq+1)-way denominator. q and k_plus are (B, D) or (D) and must
// be unit-norm; negatives is a constant (Kq, D) matrix.
inline Tensor info_nce_loss(const Tensor& q, const Tensor& k_plus, const Tensor& negatives,
                            double tau) {
    check(tau > 0.0, "info_nce_loss: temperature must be > 0, got ", tau);
    check(negatives.rank() == 2 && negatives.dim(0) >= 1, "info_nce_loss: negatives must be a "
          "nonempty (Kq, D) matrix, got ", shape_str(negatives.shape()));
    Tensor qb = q.rank() == 1 ? ops::reshape(q, {1, q.dim(0)}) : q;
    Tensor kb = k_plus.rank() == 1 ? ops::reshape(k_plus, {1, k_plus.dim(0)}) : k_plus;
    check(qb.shape() == kb.shape(), "info_nce_loss: q/k shapes differ: ", shape_str(qb.shape()),
          " vs ", shape_str(kb.shape()));
    check(negatives.dim(1) == qb.dim(1), "info_nce_loss: negative dim ", negatives.dim(1),
          " vs embedding dim ", qb.dim(1));
    auto assert_unit = [](const Tensor& t, const char* who) {
        const int64_t d = t.dim(1);
        for (int64_t r = 0; r < t.dim(0); ++r) {
            double n = 0.0;
            for (int64_t c = 0; c < d; ++c) n += t.data()[r * d + c] * t.data()[r * d + c];
            check(n > 1e-12, "info_nce_loss: zero-norm ", who, " at row ", r);
            check(std::fabs(std::sqrt(n) - 1.0) <= 1e-6, "info_nce_loss: ", who, " row ", r,
                  " must be unit norm");
        }
    };
    assert_unit(qb, "query");
    assert_unit(kb, "positive key");

    const double inv_tau = 1.0 / tau;
    Tensor pos = ops::reshape(ops::sum_last(ops::mul(qb, kb)), {qb.dim(0), 1}); // (B,1)
    Tensor neg = ops::matmul(qb, ops::transpose2d(negatives));                  // (B,Kq)
    Tensor logits = ops::scale(ops::concat_last({pos, neg}), inv_tau);
    Tensor lse = ops::log(ops::sum_last(ops::exp(logits)));                     // (B,)
    Tensor per_sample = ops::sub(lse, ops::scale(ops::reshape(pos, {qb.dim(0)}), inv_tau));
    return ops::mean_all(per_sample);
}

// Softmax contrastive loss with in-batch negatives: logits are q_i . k_j / tau
// and the match j == i is the positive.
inline Tensor info_nce_loss_in_batch(const Tensor& q, const Tensor& k, double tau) {
    check(tau > 0.0, "info_nce_loss: temperature must be > 0, got ", tau);
    check(q.rank() == 2 && q.shape() == k.shape(), "info_nce_loss: need matching (B, D) inputs, "
          "got ", shape_str(q.shape()), " vs ", shape_str(k.shape()));
    check(q.dim(0) >= 2, "info_nce_loss: in-batch negatives need batch size >= 2");
    const double inv_tau = 1.0 / tau;
    Tensor pos = ops::sum_last(ops::mul(q, k));              // (B,)
    Tensor logits = ops::scale(ops::matmul(q, ops::transpose2d(k)), inv_tau);
    Tensor lse = ops::log(ops::sum_last(ops::exp(logits)));  // (B,)
    Tensor per_sample = ops::sub(lse, ops::scale(pos, inv_tau));
    return ops::mean_all(per_sample);
}

// Negative cosine similarity; the target side carries no gradient.
inline Tensor cosine_loss(const Tensor& p1, const Tensor& z2) {
    Tensor pb = p1.rank() == 1 ? ops::reshape(p1, {1, p1.dim(0)}) : p1;
    Tensor zb = z2.rank() == 1 ? ops::reshape(z2, {1, z2.dim(0)}) : z2;
    check(pb.shape() == zb.shape(), "cosine_loss: shapes differ: ", shape_str(pb.shape()),
          " vs ", shape_str(zb.shape()));
    check(!zb.requires_grad(), "cosine_loss: target side must be detached (stop-gradient)");
    auto assert_nonzero = [](const Tensor& t, const char* who) {
        const int64_t d = t.dim(1);
        for (int64_t r = 0; r < t.dim(0); ++r) {
            double n = 0.0;
            for (int64_t c = 0; c < d; ++c) n += t.data()[r * d + c] * t.data()[r * d + c];
            check(n > 0.0, "cosine_loss: zero-norm ", who, " at row ", r);
        }
    };
    assert_nonzero(pb, "input");
    assert_nonzero(zb, "target");
    Tensor cos = ops::sum_last(ops::mul(ops::l2_normalize_last(pb), ops::l2_normalize_last(zb)));
    return ops::neg(ops::mean_all(cos));
}

// -----------------------------------------------------------------------
// Branch state
// -----------------------------------------------------------------------

// Online and target networks (encoder + projector each; the online side adds
// a predictor in without_negatives mode). Target parameters never require
// gradient and are advanced by EMA only.
class SiameseBranches {
public:
    SiameseBranches(const EncoderConfig& enc_cfg, const HeadConfig& head_cfg,
                    ContrastiveMode mode, double momentum, int64_t queue_capacity, uint64_t seed)
        : mode_(mode), momentum_(momentum), head_cfg_(head_cfg),
          online_encoder_(enc_cfg, seed_stream(seed, "encoder")),
          target_encoder_(enc_cfg, seed_stream(seed, "encoder")) {
        head_cfg_.validate();
        check(momentum >= 0.0 && momentum <= 1.0, "branches: momentum must be in [0,1], got ",
              momentum);
        const int64_t in = online_encoder_.repr_dim();
        const int64_t hidden =
            head_cfg_.projector_hidden > 0 ? head_cfg_.projector_hidden : 2 * in;
        Rng head_rng(seed_stream(seed, "heads"));
        online_projector_ = nn::Mlp(head_rng, in, hidden, head_cfg_.embed_dim, nn::Activation::Relu);
        if (mode_ == ContrastiveMode::WithoutNegatives)
            predictor_ = nn::Mlp(head_rng, head_cfg_.embed_dim, head_cfg_.predictor_hidden,
                                 head_cfg_.embed_dim, nn::Activation::Relu);
        // target starts as an exact copy of the online branch
        Rng head_rng2(seed_stream(seed, "heads"));
        target_projector_ = nn::Mlp(head_rng2, in, hidden, head_cfg_.embed_dim,
                                    nn::Activation::Relu);
        for (auto& p : target_params_mutable()) p.tensor.set_requires_grad(false);

        queue_ = NegativeQueue(queue_capacity, head_cfg_.embed_dim);
        if (queue_capacity > 0) {
            Rng qrng(seed_stream(seed, "queue"));
            queue_.prime(qrng);
        }
    }

    ContrastiveMode mode() const { return mode_; }
    double momentum() const { return momentum_; }
    const HeadConfig& head_config() const { return head_cfg_; }
    const VisionEncoder& online_encoder() const { return online_encoder_; }
    const VisionEncoder& target_encoder() const { return target_encoder_; }
    NegativeQueue& queue() { return queue_; }
    const NegativeQueue& queue() const { return queue_; }
    bool uses_queue() const { return queue_.capacity() > 0; }

    // Online-branch embedding; also returns the taps for the reconstruction
    // path when requested.
    Tensor online_embed(const Tensor& images, std::vector<TapFeature>* taps = nullptr) const {
        EncodeResult r = online_encoder_.encode(images, taps != nullptr);
        if (taps) *taps = std::move(r.taps);
        Tensor h = online_projector_.forward(r.representation);
        if (mode_ == ContrastiveMode::WithoutNegatives) h = predictor_.forward(h);
        return h;
    }

    // Target-branch embedding: no gradients, detached output.
    Tensor target_embed(const Tensor& images) const {
        NoGradScope ng;
        EncodeResult r = target_encoder_.encode(images, false);
        return target_projector_.forward(r.representation).detach();
    }

    // Directional contrastive loss, mode-dispatched.
    Tensor directional_loss(const Tensor& q, const Tensor& k) const {
        if (mode_ == ContrastiveMode::WithoutNegatives) return cosine_loss(q, k);
        Tensor qn = ops::l2_normalize_last(q);
        Tensor kn = ops::l2_normalize_last(k).detach();
        if (uses_queue()) return info_nce_loss(qn, kn, queue_.as_matrix(), head_cfg_.temperature);
        return info_nce_loss_in_batch(qn, kn, head_cfg_.temperature);
    }

    // Sum of both view directions: loss(q1, k2) + loss(q2, k1).
    Tensor symmetrized_contrast(const Tensor& q1, const Tensor& q2, const Tensor& k1,
                                const Tensor& k2) const {
        return ops::add(directional_loss(q1, k2), directional_loss(q2, k1));
    }

    // Push both views' keys (unit-norm, detached) into the queue.
    void enqueue_step_keys(const Tensor& k1, const Tensor& k2) {
        if (!uses_queue()) return;
        NoGradScope ng;
        queue_.enqueue(ops::l2_normalize_last(k2).detach());
        queue_.enqueue(ops::l2_normalize_last(k1).detach());
    }

    // target <- m * target + (1 - m) * online, parameter-wise.
    void ema_update() {
        auto online = online_trainable_for_ema();
        auto target = target_params_mutable();
        check(online.size() == target.size(), "ema_update: parameter lists misaligned");
        for (size_t i = 0; i < online.size(); ++i) {
            auto& o = online[i].tensor;
            auto& t = target[i].tensor;
            check(o.shape() == t.shape(), "ema_update: shape mismatch at ", online[i].name);
            double* tv = t.ptr();
            const double* ov = o.ptr();
            const int64_t n = t.numel();
            for (int64_t j = 0; j < n; ++j)
                tv[j] = momentum_ * tv[j] + (1.0 - momentum_) * ov[j];
        }
    }

    // Parameters optimized by gradient descent (online side only).
    nn::ParamList online_params() const {
        nn::ParamList out;
        online_encoder_.collect(out, "online.encoder");
        online_projector_.collect(out, "online.projector");
        if (mode_ == ContrastiveMode::WithoutNegatives)
            predictor_.collect(out, "online.predictor");
        return out;
    }

    nn::ParamList target_params() const {
        nn::ParamList out;
        target_encoder_.collect(out, "target.encoder");
        target_projector_.collect(out, "target.projector");
        return out;
    }

    nn::Mlp& predictor() { return predictor_; }

private:
    // The EMA source: online encoder + projector (the predictor has no target
    // counterpart).
    nn::ParamList online_trainable_for_ema() const {
        nn::ParamList out;
        online_encoder_.collect(out, "online.encoder");
        online_projector_.collect(out, "online.projector");
        return out;
    }

    nn::ParamList target_params_mutable() { return target_params(); }

    ContrastiveMode mode_;
    double momentum_;
    HeadConfig head_cfg_;
    VisionEncoder online_encoder_;
    VisionEncoder target_encoder_;
    nn::Mlp online_projector_;
    nn::Mlp target_projector_;
    nn::Mlp predictor_;
    NegativeQueue queue_;
};

} // namespace rcsl
