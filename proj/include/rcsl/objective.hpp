// Learnable two-task loss weighting. Each task weight is parameterized as a
// log-variance scalar s so the effective weight exp(-s) stays positive, with
// a +s term that keeps s from running to infinity:
//
//   total = exp(-s1) * contrast + s1 + exp(-s2) * reconstruct + s2
#pragma once

#include "rcsl/nn.hpp"

namespace rcsl {

class UncertaintyWeights {
public:
    UncertaintyWeights(double s_contrast_init = 0.0, double s_reconstruct_init = 0.0)
        : s_contrast_(Tensor::scalar(s_contrast_init, true)),
          s_reconstruct_(Tensor::scalar(s_reconstruct_init, true)) {
        check(std::isfinite(s_contrast_init) && std::isfinite(s_reconstruct_init),
              "uncertainty weights: initial values must be finite");
    }

    Tensor combined_loss(const Tensor& l_contrast, const Tensor& l_reconstruct) const {
        check(l_contrast.numel() == 1 && l_reconstruct.numel() == 1,
              "combined_loss: inputs must be scalars");
        check(std::isfinite(l_contrast.item()), "combined_loss: non-finite contrastive loss");
        check(std::isfinite(l_reconstruct.item()),
              "combined_loss: non-finite reconstruction loss");
        Tensor term1 = ops::add(ops::mul(ops::exp(ops::neg(s_contrast_)), l_contrast), s_contrast_);
        Tensor term2 =
            ops::add(ops::mul(ops::exp(ops::neg(s_reconstruct_)), l_reconstruct), s_reconstruct_);
        return ops::add(term1, term2);
    }

    // Contrastive-only form (reconstruction branch disabled):
    // exp(-s1) * contrast + s1.
    Tensor contrast_only_loss(const Tensor& l_contrast) const {
        check(l_contrast.numel() == 1, "contrast_only_loss: input must be a scalar");
        check(std::isfinite(l_contrast.item()), "contrast_only_loss: non-finite loss");
        return ops::add(ops::mul(ops::exp(ops::neg(s_contrast_)), l_contrast), s_contrast_);
    }

    double lambda_contrast() const { return std::exp(-s_contrast_.item()); }
    double lambda_reconstruct() const { return std::exp(-s_reconstruct_.item()); }

    Tensor& s_contrast() { return s_contrast_; }
    Tensor& s_reconstruct() { return s_reconstruct_; }

    void collect(nn::ParamList& out, const std::string& prefix) const {
        nn::append_param(out, prefix + ".s_contrast", s_contrast_);
        nn::append_param(out, prefix + ".s_reconstruct", s_reconstruct_);
    }

private:
    Tensor s_contrast_;
    Tensor s_reconstruct_;
};

} // namespace rcsl
