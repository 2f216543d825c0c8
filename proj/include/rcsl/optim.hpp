// Adam with decoupled weight decay and a warmup + cosine learning-rate
// schedule. Weight decay applies only to rank->=2 weights (never biases,
// norm gains, or scalar loss weights).
#pragma once

#include "rcsl/nn.hpp"

namespace rcsl {

struct OptimizerConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    int64_t total_steps = 1;
    double warmup_fraction = 0.05;

    void validate() const {
        check(lr >= 0.0 && beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 &&
                  eps > 0.0 && weight_decay >= 0.0,
              "optimizer config: invalid hyperparameters");
        check(total_steps >= 1, "optimizer config: total_steps must be >= 1");
        check(warmup_fraction >= 0.0 && warmup_fraction < 1.0,
              "optimizer config: warmup_fraction must be in [0, 1)");
    }
};

class AdamW {
public:
    AdamW(nn::ParamList params, const OptimizerConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
        cfg_.validate();
        for (const auto& p : params_) {
            check(p.tensor.requires_grad(), "optimizer: parameter ", p.name,
                  " does not require gradients");
            m_.emplace_back(p.tensor.numel(), 0.0);
            v_.emplace_back(p.tensor.numel(), 0.0);
        }
    }

    const nn::ParamList& params() const { return params_; }
    int64_t step_count() const { return t_; }

    // Linear warmup to lr, then cosine decay to zero over the remaining steps.
    double lr_at(int64_t step) const {
        const int64_t warmup =
            static_cast<int64_t>(std::ceil(cfg_.warmup_fraction * cfg_.total_steps));
        if (step < warmup) return cfg_.lr * static_cast<double>(step + 1) / warmup;
        const double progress = cfg_.total_steps <= warmup
                                    ? 1.0
                                    : static_cast<double>(step - warmup) /
                                          static_cast<double>(cfg_.total_steps - warmup);
        return cfg_.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    void step() {
        const double lr = lr_at(t_);
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i].tensor;
            const bool decay = p.rank() >= 2 && cfg_.weight_decay > 0.0;
            const std::vector<double>& g = p.grad();
            std::vector<double>& m = m_[i];
            std::vector<double>& v = v_[i];
            double* w = p.ptr();
            const int64_t n = p.numel();
            for (int64_t j = 0; j < n; ++j) {
                m[static_cast<size_t>(j)] =
                    cfg_.beta1 * m[static_cast<size_t>(j)] + (1.0 - cfg_.beta1) * g[static_cast<size_t>(j)];
                v[static_cast<size_t>(j)] =
                    cfg_.beta2 * v[static_cast<size_t>(j)] +
                    (1.0 - cfg_.beta2) * g[static_cast<size_t>(j)] * g[static_cast<size_t>(j)];
                const double mhat = m[static_cast<size_t>(j)] / bc1;
                const double vhat = v[static_cast<size_t>(j)] / bc2;
                w[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps));
                if (decay) w[j] -= lr * cfg_.weight_decay * w[j];
            }
            for (double x : p.data())
                if (!std::isfinite(x))
                    fail("optimizer: non-finite parameter after update in ", params_[i].name);
        }
    }

    // Serialization hooks: first/second moment buffers plus the step counter.
    struct State {
        int64_t t = 0;
        std::vector<std::vector<double>> m;
        std::vector<std::vector<double>> v;
    };

    State state() const { return State{t_, m_, v_}; }

    void restore(const State& s) {
        check(s.m.size() == params_.size() && s.v.size() == params_.size(),
              "optimizer: state has ", s.m.size(), " slots for ", params_.size(), " parameters");
        for (size_t i = 0; i < params_.size(); ++i)
            check(static_cast<int64_t>(s.m[i].size()) == params_[i].tensor.numel() &&
                      static_cast<int64_t>(s.v[i].size()) == params_[i].tensor.numel(),
                  "optimizer: state size mismatch at ", params_[i].name);
        t_ = s.t;
        m_ = s.m;
        v_ = s.v;
    }

private:
    nn::ParamList params_;
    OptimizerConfig cfg_;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

} // namespace rcsl
