// Finite-difference cases for the four training losses, used by both the
// gradcheck CLI and the acceptance suite. Gradients are checked through every
// input that carries gradient in training (stop-gradient sides stay
// constant).
#pragma once

#include "rcsl/contrastive.hpp"
#include "rcsl/decoder.hpp"
#include "rcsl/gradcheck.hpp"
#include "rcsl/objective.hpp"

namespace rcsl {

inline std::vector<CheckCase> loss_check_cases() {
    namespace gd = ::rcsl::detail;
    std::vector<CheckCase> cases;

    // softmax contrastive loss with queue negatives, through the query path
    cases.push_back(CheckCase{
        "loss_contrast_with_negatives",
        [](Rng& r) {
            std::vector<Tensor> in;
            in.push_back(gd::rand_tensor_nonzero(r, {2, 6}, 0.3)); // raw queries
            return in;
        },
        [](const std::vector<Tensor>& in) {
            Rng aux(1234);
            Tensor k, negs;
            {
                NoGradScope ng;
                k = ops::l2_normalize_last(gd::rand_tensor_nonzero(aux, {2, 6}, 0.3)).detach();
                negs = ops::l2_normalize_last(gd::rand_tensor_nonzero(aux, {5, 6}, 0.3)).detach();
            }
            return info_nce_loss(ops::l2_normalize_last(in[0]), k, negs, 0.2);
        }});

    // cosine loss, stop-gradient target held constant
    cases.push_back(CheckCase{
        "loss_contrast_without_negatives",
        [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor_nonzero(r, {2, 6}, 0.3)}; },
        [](const std::vector<Tensor>& in) {
            Rng aux(567);
            Tensor z = gd::rand_tensor_nonzero(aux, {2, 6}, 0.3);
            return cosine_loss(in[0], z);
        }});

    // pixel reconstruction loss through a small decoder: gradients flow into
    // the tap token maps and every decoder parameter
    {
        auto dec = std::make_shared<ReconstructionDecoder>(
            [] {
                DecoderConfig cfg;
                cfg.fusion_layers_per_block = 1;
                cfg.tap_count = 2;
                cfg.width = 4;
                return cfg;
            }(),
            std::vector<int64_t>{5, 5}, std::vector<int64_t>{4, 4}, 2, 4242);
        cases.push_back(CheckCase{
            "loss_reconstruction",
            [dec](Rng& r) {
                std::vector<Tensor> in;
                in.push_back(gd::rand_tensor(r, {1, 16, 5}));
                in.push_back(gd::rand_tensor(r, {1, 16, 5}));
                for (auto& p : dec->params()) {
                    // redraw parameters at O(0.5) scale: near-zero init would
                    // park the fusion ReLU pre-activations inside the
                    // finite-difference step
                    for (auto& v : p.tensor.data()) v = r.uniform(-0.6, 0.6);
                    in.push_back(p.tensor);
                }
                return in;
            },
            [dec](const std::vector<Tensor>& in) {
                Rng aux(890);
                Tensor img;
                {
                    NoGradScope ng;
                    // keep targets clear of the freshly initialized decoder's
                    // near-zero outputs so |recon - img| never straddles the
                    // L1 kink within the finite-difference step
                    img = gd::rand_tensor(aux, {1, 8, 8, 3}, 0.3, 1.0);
                }
                std::vector<TapFeature> taps(2);
                taps[0] = TapFeature{in[0], 4, 4};
                taps[1] = TapFeature{in[1], 4, 4};
                return reconstruction_loss(img, dec->reconstruct(taps));
            }});
    }

    // combined uncertainty-weighted objective in all four scalars
    cases.push_back(CheckCase{
        "loss_combined_weighted",
        [](Rng& r) {
            return std::vector<Tensor>{Tensor::scalar(r.uniform(-1.0, 1.0)),
                                       Tensor::scalar(r.uniform(-1.0, 1.0)),
                                       Tensor::scalar(r.uniform(0.1, 2.0)),
                                       Tensor::scalar(r.uniform(0.1, 2.0))};
        },
        [](const std::vector<Tensor>& in) {
            Tensor s1 = in[0], s2 = in[1];
            Tensor t1 = ops::add(ops::mul(ops::exp(ops::neg(s1)), in[2]), s1);
            Tensor t2 = ops::add(ops::mul(ops::exp(ops::neg(s2)), in[3]), s2);
            return ops::add(t1, t2);
        }});

    return cases;
}

} // namespace rcsl
