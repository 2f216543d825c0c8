#include <catch2/catch_amalgamated.hpp>

#include "rcsl/decoder.hpp"
#include "rcsl/gradcheck.hpp"

using namespace rcsl;

namespace {

DecoderConfig small_decoder(FusionOperator op = FusionOperator::Conv, int64_t layers = 2,
                            int64_t taps = 4, int64_t width = 8) {
    DecoderConfig cfg;
    cfg.fusion_operator = op;
    cfg.fusion_layers_per_block = layers;
    cfg.tap_count = taps;
    cfg.width = width;
    return cfg;
}

std::vector<TapFeature> make_taps(Rng& rng, const std::vector<int64_t>& channels,
                                  const std::vector<int64_t>& grids, int64_t batch) {
    std::vector<TapFeature> taps;
    for (size_t i = 0; i < channels.size(); ++i) {
        TapFeature t;
        t.grid_h = grids[i];
        t.grid_w = grids[i];
        t.tokens = detail::rand_tensor(rng, {batch, grids[i] * grids[i], channels[i]});
        taps.push_back(std::move(t));
    }
    return taps;
}

} // namespace

TEST_CASE("tokens_to_grid is an exact inverse reshape") {
    Rng rng(1);
    Tensor tokens = detail::rand_tensor(rng, {2, 64, 5});
    FeatureGrid g = tokens_to_grid(tokens, 8, 8);
    REQUIRE(g.grid.shape() == Shape{2, 8, 8, 5});
    Tensor back = grid_to_tokens(g);
    REQUIRE(back.data() == tokens.data());

    // token t lands at grid row t / gw, column t % gw
    for (int64_t t = 0; t < 64; ++t)
        for (int64_t c = 0; c < 5; ++c)
            REQUIRE(g.grid.data()[((0 * 8 + t / 8) * 8 + t % 8) * 5 + c] ==
                    tokens.data()[(t * 5 + c)]);

    Tensor one = detail::rand_tensor(rng, {1, 1, 4});
    FeatureGrid g1 = tokens_to_grid(one, 1, 1);
    REQUIRE(g1.grid.shape() == Shape{1, 1, 1, 4});
    REQUIRE_THROWS_AS(tokens_to_grid(tokens, 7, 8), Error);
}

TEST_CASE("fuse_block: equal grids map 2W channels back to W") {
    Rng rng(2);
    ReconstructionDecoder dec(small_decoder(), {8, 8, 8, 8}, {8, 8, 8, 8}, 4, 900);
    FeatureGrid deep{detail::rand_tensor(rng, {2, 8, 8, 8}), 8, 8};
    FeatureGrid shallow{detail::rand_tensor(rng, {2, 8, 8, 8}), 8, 8};
    FeatureGrid out = dec.fuse_block(deep, shallow, 0);
    REQUIRE(out.grid.shape() == Shape{2, 8, 8, 8});
}

TEST_CASE("fuse_block: half-sized deep grid is upsampled before fusion") {
    Rng rng(3);
    ReconstructionDecoder dec(small_decoder(FusionOperator::Conv, 2, 2), {8, 8}, {8, 4}, 4, 901);
    FeatureGrid deep{detail::rand_tensor(rng, {1, 4, 4, 8}), 4, 4};
    FeatureGrid shallow{detail::rand_tensor(rng, {1, 8, 8, 8}), 8, 8};
    FeatureGrid out = dec.fuse_block(deep, shallow, 0);
    REQUIRE(out.grid.shape() == Shape{1, 8, 8, 8});

    FeatureGrid too_small{detail::rand_tensor(rng, {1, 2, 2, 8}), 2, 2};
    REQUIRE_THROWS_AS(dec.fuse_block(too_small, shallow, 0), Error);
}

TEST_CASE("fuse_block with zeroed weights yields a zero grid") {
    Rng rng(4);
    ReconstructionDecoder dec(small_decoder(), {8, 8, 8, 8}, {8, 8, 8, 8}, 4, 902);
    auto params = dec.params();
    for (auto& p : params)
        if (p.name.find("fuse0") != std::string::npos)
            for (auto& v : p.tensor.data()) v = 0.0;
    FeatureGrid deep{detail::rand_tensor(rng, {1, 8, 8, 8}), 8, 8};
    FeatureGrid shallow{detail::rand_tensor(rng, {1, 8, 8, 8}), 8, 8};
    FeatureGrid out = dec.fuse_block(deep, shallow, 0);
    for (double v : out.grid.data()) REQUIRE(v == 0.0);
}

TEST_CASE("reconstruct: output shape equals the input image shape") {
    // (image size, patch, taps, grids per tap)
    struct Case {
        int64_t image, patch, taps;
        std::vector<int64_t> grids;
        std::vector<int64_t> channels;
    };
    std::vector<Case> cases = {
        {32, 4, 4, {8, 8, 8, 8}, {12, 12, 12, 12}},     // vit-style
        {32, 4, 2, {8, 4}, {12, 24}},                   // hierarchical-style
        {16, 2, 3, {8, 8, 8}, {6, 6, 6}},
        {16, 4, 1, {4}, {10}},                          // single tap: no fusion blocks
    };
    Rng rng(5);
    for (const auto& c : cases) {
        DecoderConfig cfg = small_decoder(FusionOperator::Conv, 2, c.taps);
        ReconstructionDecoder dec(cfg, c.channels, c.grids, c.patch, 903);
        auto taps = make_taps(rng, c.channels, c.grids, 2);
        Tensor out = dec.reconstruct(taps);
        REQUIRE(out.shape() == Shape{2, c.image, c.image, 3});
    }
}

TEST_CASE("reconstruct wires every tap and parameter into the output") {
    Rng rng(6);
    std::vector<int64_t> channels = {6, 6, 6};
    std::vector<int64_t> grids = {4, 4, 4};
    ReconstructionDecoder dec(small_decoder(FusionOperator::Conv, 1, 3), channels, grids, 2, 904);
    auto taps = make_taps(rng, channels, grids, 1);
    for (auto& t : taps) t.tokens.set_requires_grad(true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor out = dec.reconstruct(taps);
        Tensor img = detail::rand_tensor(rng, {1, 8, 8, 3}, 0.0, 1.0);
        Tensor loss = reconstruction_loss(img, out);
        tape.backward(loss);
    }
    for (const auto& t : taps) REQUIRE(t.tokens.grad_max_abs() > 0.0);
    for (const auto& p : dec.params()) {
        INFO(p.name);
        REQUIRE(p.tensor.grad_max_abs() > 0.0);
    }
}

TEST_CASE("transformer fusion variant runs and reconstructs") {
    Rng rng(7);
    std::vector<int64_t> channels = {6, 6};
    std::vector<int64_t> grids = {4, 4};
    ReconstructionDecoder dec(small_decoder(FusionOperator::Transformer, 2, 2), channels, grids,
                              2, 905);
    auto taps = make_taps(rng, channels, grids, 2);
    Tensor out = dec.reconstruct(taps);
    REQUIRE(out.shape() == Shape{2, 8, 8, 3});
}

TEST_CASE("reconstruction loss closed forms") {
    Rng rng(8);
    Tensor img = detail::rand_tensor(rng, {1, 4, 4, 3}, 0.0, 1.0);
    REQUIRE(reconstruction_loss(img, img).item() == 0.0);

    Tensor shifted = ops::add_scalar(img, 0.5);
    REQUIRE(reconstruction_loss(img, shifted).item() == Catch::Approx(0.5).margin(1e-12));

    Tensor zero = Tensor::zeros({1, 2, 2, 3});
    std::vector<double> alt(12);
    for (size_t i = 0; i < alt.size(); ++i) alt[i] = i % 2 ? 1.0 : -1.0;
    Tensor pm = Tensor::from_data({1, 2, 2, 3}, std::move(alt));
    REQUIRE(reconstruction_loss(zero, pm).item() == Catch::Approx(1.0).margin(1e-12));

    REQUIRE_THROWS_AS(reconstruction_loss(img, zero), Error);
}

TEST_CASE("reconstruction loss is translation-equivariant in value") {
    Rng rng(9);
    Tensor img = detail::rand_tensor(rng, {1, 4, 4, 3}, 0.0, 1.0);
    Tensor recon = detail::rand_tensor(rng, {1, 4, 4, 3}, 0.0, 1.0);
    const double base = reconstruction_loss(img, recon).item();
    for (double c : {-0.3, 0.7, 2.0}) {
        const double shifted =
            reconstruction_loss(ops::add_scalar(img, c), ops::add_scalar(recon, c)).item();
        REQUIRE(std::fabs(shifted - base) <= 1e-12);
    }
}

TEST_CASE("fusion uses both branches (non-degeneracy)") {
    Rng rng(10);
    std::vector<int64_t> channels = {6, 6};
    std::vector<int64_t> grids = {4, 4};
    ReconstructionDecoder dec(small_decoder(FusionOperator::Conv, 2, 2), channels, grids, 2, 906);
    auto taps = make_taps(rng, channels, grids, 1);
    taps[0].tokens.set_requires_grad(true); // shallow
    taps[1].tokens.set_requires_grad(true); // deep
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor out = dec.reconstruct(taps);
        tape.backward(ops::mean_all(ops::mul(out, out)));
    }
    REQUIRE(taps[0].tokens.grad_max_abs() > 0.0);
    REQUIRE(taps[1].tokens.grad_max_abs() > 0.0);
}

TEST_CASE("decoder cost ratio arithmetic and desk-scale bound") {
    // zero-cost decoder -> ratios 0
    CostRatio zero = decoder_cost_ratio(1000, 1000, 0, 0);
    REQUIRE(zero.param_ratio == 0.0);
    REQUIRE(zero.flop_ratio == 0.0);

    // desk-scale default: conv fusion, 2 layers per block, width 32
    EncoderConfig enc_cfg;
    enc_cfg.image_size = 32;
    enc_cfg.patch_size = 4;
    enc_cfg.depth = 8;
    enc_cfg.width = 128;
    enc_cfg.heads = 4;
    enc_cfg.tap_count = 4;
    VisionEncoder enc(enc_cfg, 907);
    DecoderConfig dec_cfg; // defaults: conv, 2 layers, K=4, width 32
    ReconstructionDecoder dec(dec_cfg, {128, 128, 128, 128}, {8, 8, 8, 8}, 4, 908);
    CostRatio r = decoder_cost_ratio(enc, dec);
    INFO("param ratio " << r.param_ratio << ", flop ratio " << r.flop_ratio);
    REQUIRE(r.param_ratio < 0.10);
    REQUIRE(r.param_ratio > 0.0);
    REQUIRE(r.flop_ratio < 0.10);

    // transformer fusion has strictly more parameters than conv-1 at equal width
    ReconstructionDecoder conv1(small_decoder(FusionOperator::Conv, 1, 4, 32),
                                {128, 128, 128, 128}, {8, 8, 8, 8}, 4, 909);
    for (int64_t layers : {1, 2, 4}) {
        ReconstructionDecoder tfm(small_decoder(FusionOperator::Transformer, layers, 4, 32),
                                  {128, 128, 128, 128}, {8, 8, 8, 8}, 4, 910);
        REQUIRE(tfm.param_count() > conv1.param_count());
    }
}

TEST_CASE("decoder instance counter tracks construction") {
    const int64_t before = ReconstructionDecoder::live_instances();
    {
        ReconstructionDecoder dec(small_decoder(FusionOperator::Conv, 1, 2), {4, 4}, {4, 4}, 2,
                                  911);
        REQUIRE(ReconstructionDecoder::live_instances() == before + 1);
    }
    REQUIRE(ReconstructionDecoder::live_instances() == before);
}

TEST_CASE("reconstruction loss gradient passes finite differences end to end") {
    Rng rng(11);
    std::vector<int64_t> channels = {5, 5};
    std::vector<int64_t> grids = {4, 4};
    ReconstructionDecoder dec(small_decoder(FusionOperator::Conv, 1, 2, 4), channels, grids, 2,
                              912);
    Tensor img = detail::rand_tensor(rng, {1, 8, 8, 3}, 0.0, 1.0).detach();
    // inputs: both tap token maps plus every decoder parameter
    auto mk = [&](Rng& r) {
        std::vector<Tensor> inputs;
        inputs.push_back(detail::rand_tensor(r, {1, 16, 5}));
        inputs.push_back(detail::rand_tensor(r, {1, 16, 5}));
        for (auto& p : dec.params()) inputs.push_back(p.tensor);
        return inputs;
    };
    auto f = [&](const std::vector<Tensor>& in) {
        std::vector<TapFeature> taps(2);
        taps[0] = TapFeature{in[0], 4, 4};
        taps[1] = TapFeature{in[1], 4, 4};
        return reconstruction_loss(img, dec.reconstruct(taps));
    };
    Rng mk_rng(12);
    auto rep = finite_difference_check(f, mk(mk_rng), 1e-5, 1e-4);
    INFO(rep.worst);
    REQUIRE(rep.pass);
}
