#include <catch2/catch_amalgamated.hpp>

#include "rcsl/gradcheck.hpp"
#include "rcsl/objective.hpp"

using namespace rcsl;

TEST_CASE("zero log-variances reduce to a plain sum") {
    UncertaintyWeights w;
    Tensor lc = Tensor::scalar(0.8);
    Tensor lr = Tensor::scalar(0.3);
    REQUIRE(w.combined_loss(lc, lr).item() == Catch::Approx(1.1).margin(1e-15));
    REQUIRE(w.lambda_contrast() == 1.0);
    REQUIRE(w.lambda_reconstruct() == 1.0);
}

TEST_CASE("term isolation and configured initial values") {
    UncertaintyWeights w(0.7, 0.0);
    Tensor lc = Tensor::scalar(1.3);
    Tensor lr = Tensor::scalar(0.0);
    const double expect = std::exp(-0.7) * 1.3 + 0.7;
    REQUIRE(w.combined_loss(lc, lr).item() == Catch::Approx(expect).margin(1e-14));

    UncertaintyWeights w2(0.0, std::log(2.0));
    REQUIRE(w2.lambda_reconstruct() == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("weights stay strictly positive by construction") {
    for (double s : {-5.0, -1.0, 0.0, 2.5, 10.0}) {
        UncertaintyWeights w(s, -s);
        REQUIRE(w.lambda_contrast() > 0.0);
        REQUIRE(w.lambda_reconstruct() > 0.0);
    }
    REQUIRE_THROWS_AS(UncertaintyWeights(std::nan(""), 0.0), Error);
}

TEST_CASE("non-finite input losses are rejected") {
    UncertaintyWeights w;
    Tensor bad = Tensor::scalar(1.0);
    bad.data()[0] = std::numeric_limits<double>::infinity();
    REQUIRE_THROWS_AS(w.combined_loss(bad, Tensor::scalar(0.1)), Error);
    REQUIRE_THROWS_AS(w.combined_loss(Tensor::scalar(0.1), bad), Error);
}

TEST_CASE("gradient in s1 matches the closed form and vanishes at log(l)") {
    // dL/ds1 = -exp(-s1) * l_contrast + 1
    const double lc = 1.7, s1 = 0.4;
    UncertaintyWeights w(s1, 0.0);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = w.combined_loss(Tensor::scalar(lc), Tensor::scalar(0.2));
        tape.backward(loss);
    }
    const double expect = -std::exp(-s1) * lc + 1.0;
    REQUIRE(w.s_contrast().grad()[0] == Catch::Approx(expect).margin(1e-12));

    // at s1 = log(l_contrast) the gradient is zero
    UncertaintyWeights w2(std::log(lc), 0.0);
    Tape tape2;
    {
        TapeScope scope(tape2);
        Tensor loss = w2.combined_loss(Tensor::scalar(lc), Tensor::scalar(0.2));
        tape2.backward(loss);
    }
    REQUIRE(w2.s_contrast().grad()[0] == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("combined loss passes finite differences in all four scalars") {
    UncertaintyWeights w(0.3, -0.2);
    auto f = [&](const std::vector<Tensor>& in) { return w.combined_loss(in[2], in[3]); };
    std::vector<Tensor> inputs = {w.s_contrast(), w.s_reconstruct(), Tensor::scalar(0.9),
                                  Tensor::scalar(0.4)};
    auto rep = finite_difference_check(f, inputs, 1e-5, 1e-4);
    INFO(rep.worst);
    REQUIRE(rep.pass);
}

TEST_CASE("weights are exposed as optimizer parameters") {
    UncertaintyWeights w;
    nn::ParamList params;
    w.collect(params, "objective");
    REQUIRE(params.size() == 2);
    REQUIRE(params[0].tensor.requires_grad());
    REQUIRE(params[1].tensor.requires_grad());
    REQUIRE(nn::total_param_count(params) == 2);
}
