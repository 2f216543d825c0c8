#include <catch2/catch_amalgamated.hpp>

#include "rcsl/contrastive.hpp"
#include "rcsl/gradcheck.hpp"

using namespace rcsl;

namespace {

Tensor basis_vector(int64_t dim, int64_t index, double value = 1.0) {
    std::vector<double> v(static_cast<size_t>(dim), 0.0);
    v[static_cast<size_t>(index)] = value;
    return Tensor::from_data({dim}, std::move(v));
}

Tensor basis_rows(int64_t rows, int64_t dim, int64_t first_index) {
    std::vector<double> v(static_cast<size_t>(rows * dim), 0.0);
    for (int64_t r = 0; r < rows; ++r) v[static_cast<size_t>(r * dim + first_index + r)] = 1.0;
    return Tensor::from_data({rows, dim}, std::move(v));
}

EncoderConfig tiny_encoder() {
    EncoderConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.depth = 3;
    cfg.width = 16;
    cfg.heads = 4;
    cfg.tap_count = 2;
    return cfg;
}

HeadConfig tiny_heads() {
    HeadConfig h;
    h.embed_dim = 8;
    h.predictor_hidden = 16;
    return h;
}

} // namespace

TEST_CASE("info_nce: uniform similarities give log(Kq+1)") {
    const int64_t kq = 6, dim = 8;
    Tensor q = basis_vector(dim, 0);
    Tensor k_plus = basis_vector(dim, 1);
    Tensor negatives = basis_rows(kq, dim, 2);
    for (double tau : {0.07, 0.2, 1.0}) {
        Tensor loss = info_nce_loss(q, k_plus, negatives, tau);
        REQUIRE(std::fabs(loss.item() - std::log(static_cast<double>(kq + 1))) <= 1e-10);
    }
}

TEST_CASE("info_nce: aligned positive, orthogonal negatives, closed form") {
    const int64_t kq = 5, dim = 8;
    const double tau = 0.07;
    Tensor q = basis_vector(dim, 0);
    Tensor negatives = basis_rows(kq, dim, 1);
    Tensor loss = info_nce_loss(q, q, negatives, tau);
    const double e = std::exp(1.0 / tau);
    const double expect = -std::log(e / (e + static_cast<double>(kq)));
    REQUIRE(loss.item() == Catch::Approx(expect).margin(1e-12));
}

TEST_CASE("info_nce: two-term softmax by hand") {
    // Kq=1, q.k+ = 1, q.k1 = -1, tau = 1 -> log(1 + e^-2)
    const int64_t dim = 4;
    Tensor q = basis_vector(dim, 0);
    Tensor neg = basis_vector(dim, 0, -1.0);
    Tensor negatives = ops::reshape(neg, {1, dim});
    Tensor loss = info_nce_loss(q, q, negatives, 1.0);
    REQUIRE(loss.item() == Catch::Approx(std::log(1.0 + std::exp(-2.0))).epsilon(1e-12));
}

TEST_CASE("info_nce: nonnegative and monotone in the positive similarity") {
    const int64_t dim = 8;
    Tensor negatives = basis_rows(4, dim, 2);
    double prev = std::numeric_limits<double>::infinity();
    for (double s : {-0.8, -0.3, 0.0, 0.4, 0.9}) {
        std::vector<double> kv(dim, 0.0);
        kv[0] = s;
        kv[1] = std::sqrt(1.0 - s * s);
        Tensor k_plus = Tensor::from_data({dim}, std::move(kv));
        Tensor loss = info_nce_loss(basis_vector(dim, 0), k_plus, negatives, 0.2);
        REQUIRE(loss.item() >= 0.0);
        REQUIRE(loss.item() < prev);
        prev = loss.item();
    }
}

TEST_CASE("info_nce input validation") {
    const int64_t dim = 4;
    Tensor q = basis_vector(dim, 0);
    Tensor negatives = basis_rows(2, dim, 1);
    REQUIRE_THROWS_AS(info_nce_loss(q, q, negatives, -0.1), Error);
    REQUIRE_THROWS_AS(info_nce_loss(ops::scale(q, 0.5), q, negatives, 0.2), Error);
    REQUIRE_THROWS_AS(info_nce_loss(Tensor::zeros({dim}), q, negatives, 0.2), Error);
}

TEST_CASE("cosine loss closed forms") {
    Rng rng(4);
    Tensor z = detail::rand_tensor_nonzero(rng, {6}, 0.2);
    REQUIRE(cosine_loss(z.detach(), z.detach()).item() == Catch::Approx(-1.0).margin(1e-12));

    Tensor p = basis_vector(4, 0);
    Tensor orth = basis_vector(4, 2);
    REQUIRE(cosine_loss(p, orth).item() == Catch::Approx(0.0).margin(1e-12));

    for (double c : {0.1, 2.0, 1000.0}) {
        Tensor scaled = ops::scale(z, c).detach();
        REQUIRE(cosine_loss(scaled, z.detach()).item() == Catch::Approx(-1.0).margin(1e-12));
    }
    REQUIRE_THROWS_AS(cosine_loss(Tensor::zeros({4}), p.detach()), Error);
}

TEST_CASE("negative queue: FIFO, order, validation") {
    NegativeQueue q(4, 3);
    auto key = [](double a, double b, double c) {
        Tensor t = Tensor::from_data({1, 3}, {a, b, c});
        return ops::l2_normalize_last(t).detach();
    };
    q.enqueue(key(1, 0, 0));
    q.enqueue(key(0, 1, 0));
    q.enqueue(key(0, 0, 1));
    q.enqueue(key(1, 1, 0));
    REQUIRE(q.size() == 4);
    q.enqueue(key(1, 0, 1)); // evicts the first
    REQUIRE(q.size() == 4);
    REQUIRE(q.entries().front()[1] == Catch::Approx(1.0)); // (0,1,0) is now oldest

    // batch enqueue preserves row order
    NegativeQueue q2(8, 3);
    Tensor batch = ops::l2_normalize_last(Tensor::from_data({3, 3}, {
        1, 0, 0,
        0, 1, 0,
        0, 0, 1,
    })).detach();
    q2.enqueue(batch);
    REQUIRE(q2.size() == 3);
    REQUIRE(q2.entries()[0][0] == Catch::Approx(1.0));
    REQUIRE(q2.entries()[1][1] == Catch::Approx(1.0));
    REQUIRE(q2.entries()[2][2] == Catch::Approx(1.0));

    REQUIRE_THROWS_AS(q2.enqueue(Tensor::from_data({1, 3}, {0.5, 0.5, 0.5})), Error);
    Tensor tracked = Tensor::from_data({1, 3}, {1.0, 0.0, 0.0}, true);
    REQUIRE_THROWS_AS(q2.enqueue(tracked), Error);
}

TEST_CASE("ema endpoints and contraction") {
    SiameseBranches branches(tiny_encoder(), tiny_heads(), ContrastiveMode::WithoutNegatives,
                             1.0, 0, 50);
    // perturb the online side so the branches differ
    Rng rng(5);
    auto online = branches.online_params();
    auto target = branches.target_params();
    // predictor params are online-only; compare the EMA-aligned prefix
    for (size_t i = 0; i < target.size(); ++i)
        for (auto& v : online[i].tensor.data()) v += rng.uniform(-0.1, 0.1);

    auto snapshot = [&](const nn::ParamList& list) {
        std::vector<std::vector<double>> s;
        for (const auto& p : list) s.push_back(p.tensor.data());
        return s;
    };

    // m = 1: target unchanged
    auto before = snapshot(branches.target_params());
    branches.ema_update();
    auto after = snapshot(branches.target_params());
    REQUIRE(before == after);

    // contraction at m = 0.99: |t' - o| = m * |t - o| per element
    SiameseBranches b2(tiny_encoder(), tiny_heads(), ContrastiveMode::WithoutNegatives, 0.99, 0,
                       51);
    auto online2 = b2.online_params();
    auto target2 = b2.target_params();
    for (size_t i = 0; i < target2.size(); ++i)
        for (auto& v : online2[i].tensor.data()) v += rng.uniform(-0.2, 0.2);
    std::vector<std::vector<double>> gaps_before;
    for (size_t i = 0; i < target2.size(); ++i) {
        std::vector<double> g;
        for (size_t j = 0; j < target2[i].tensor.data().size(); ++j)
            g.push_back(target2[i].tensor.data()[j] - online2[i].tensor.data()[j]);
        gaps_before.push_back(std::move(g));
    }
    b2.ema_update();
    for (size_t i = 0; i < target2.size(); ++i)
        for (size_t j = 0; j < target2[i].tensor.data().size(); ++j) {
            const double gap_after = target2[i].tensor.data()[j] - online2[i].tensor.data()[j];
            REQUIRE(std::fabs(gap_after - 0.99 * gaps_before[i][j]) <= 1e-12);
        }

    // m = 0: target snaps to online exactly
    SiameseBranches b3(tiny_encoder(), tiny_heads(), ContrastiveMode::WithoutNegatives, 0.0, 0,
                       52);
    auto online3 = b3.online_params();
    for (size_t i = 0; i < b3.target_params().size(); ++i)
        for (auto& v : online3[i].tensor.data()) v += 0.5;
    b3.ema_update();
    auto target3 = b3.target_params();
    for (size_t i = 0; i < target3.size(); ++i)
        REQUIRE(target3[i].tensor.data() == online3[i].tensor.data());
}

TEST_CASE("symmetrized loss: identical branches with identity predictor give -2") {
    SiameseBranches branches(tiny_encoder(), tiny_heads(), ContrastiveMode::WithoutNegatives,
                             0.99, 0, 53);
    // make the predictor an exact identity: relu(x) - relu(-x) = x
    auto& pred = branches.predictor();
    const int64_t d = 8, hidden = 16;
    for (auto& v : pred.fc1.weight.data()) v = 0.0;
    for (auto& v : pred.fc2.weight.data()) v = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        pred.fc1.weight.data()[static_cast<size_t>(i * hidden + i)] = 1.0;
        pred.fc1.weight.data()[static_cast<size_t>(i * hidden + d + i)] = -1.0;
        pred.fc2.weight.data()[static_cast<size_t>(i * d + i)] = 1.0;
        pred.fc2.weight.data()[static_cast<size_t>((d + i) * d + i)] = -1.0;
    }
    Rng rng(6);
    // both views are the same image: with identical branches and an identity
    // predictor each direction hits exactly -1
    Tensor v1 = detail::rand_tensor(rng, {2, 8, 8, 3}, 0.0, 1.0);
    Tensor v2 = v1;
    Tensor q1 = branches.online_embed(v1);
    Tensor q2 = branches.online_embed(v2);
    Tensor k1 = branches.target_embed(v1);
    Tensor k2 = branches.target_embed(v2);
    Tensor loss = branches.symmetrized_contrast(q1, q2, k1, k2);
    REQUIRE(loss.item() == Catch::Approx(-2.0).margin(1e-9));

    // swapping the views leaves the sum unchanged
    Tensor swapped = branches.symmetrized_contrast(q2, q1, k2, k1);
    REQUIRE(swapped.item() == Catch::Approx(loss.item()).margin(1e-12));
}

TEST_CASE("symmetrized loss: uniform similarities give 2 log(Kq+1)") {
    SiameseBranches branches(tiny_encoder(), tiny_heads(), ContrastiveMode::WithNegatives, 0.99,
                             4, 54);
    // overwrite the queue with orthogonal basis entries
    std::deque<std::vector<double>> entries;
    for (int i = 0; i < 4; ++i) {
        std::vector<double> e(8, 0.0);
        e[static_cast<size_t>(4 + i)] = 1.0;
        entries.push_back(std::move(e));
    }
    branches.queue().set_entries(std::move(entries));
    Tensor q1 = basis_vector(8, 0);
    Tensor k2 = basis_vector(8, 1);
    Tensor q2 = basis_vector(8, 2);
    Tensor k1 = basis_vector(8, 3);
    Tensor loss = branches.symmetrized_contrast(ops::reshape(q1, {1, 8}), ops::reshape(q2, {1, 8}),
                                                ops::reshape(k1, {1, 8}),
                                                ops::reshape(k2, {1, 8}));
    REQUIRE(loss.item() == Catch::Approx(2.0 * std::log(5.0)).margin(1e-10));
}

TEST_CASE("stop-gradient: target branch receives no gradient") {
    for (auto mode : {ContrastiveMode::WithNegatives, ContrastiveMode::WithoutNegatives}) {
        SiameseBranches branches(tiny_encoder(), tiny_heads(), mode, 0.99,
                                 mode == ContrastiveMode::WithNegatives ? 6 : 0, 55);
        Rng rng(7);
        Tensor v1 = detail::rand_tensor(rng, {2, 8, 8, 3}, 0.0, 1.0);
        Tensor v2 = detail::rand_tensor(rng, {2, 8, 8, 3}, 0.0, 1.0);
        Tape tape;
        {
            TapeScope scope(tape);
            Tensor q1 = branches.online_embed(v1);
            Tensor q2 = branches.online_embed(v2);
            Tensor k1 = branches.target_embed(v1);
            Tensor k2 = branches.target_embed(v2);
            Tensor loss = branches.symmetrized_contrast(q1, q2, k1, k2);
            tape.backward(loss);
        }
        for (const auto& p : branches.target_params()) {
            REQUIRE_FALSE(p.tensor.requires_grad());
            REQUIRE(p.tensor.grad_max_abs() == 0.0);
        }
        double online_grad = 0.0;
        for (const auto& p : branches.online_params())
            online_grad = std::max(online_grad, p.tensor.grad_max_abs());
        REQUIRE(online_grad > 0.0);
    }
}

TEST_CASE("contrastive losses pass finite-difference checks") {
    Rng rng(8);
    // softmax-with-negatives family, gradient flows through the query side
    Tensor k_raw = detail::rand_tensor_nonzero(rng, {2, 6}, 0.3);
    Tensor negs;
    {
        NoGradScope ng;
        negs = ops::l2_normalize_last(detail::rand_tensor_nonzero(rng, {5, 6}, 0.3)).detach();
        k_raw = ops::l2_normalize_last(k_raw).detach();
    }
    auto f_nce = [&](const std::vector<Tensor>& in) {
        return info_nce_loss(ops::l2_normalize_last(in[0]), k_raw, negs, 0.2);
    };
    auto rep = finite_difference_check(f_nce, {detail::rand_tensor_nonzero(rng, {2, 6}, 0.3)},
                                       1e-5, 1e-4);
    INFO(rep.worst);
    REQUIRE(rep.pass);

    // cosine family
    Tensor z = detail::rand_tensor_nonzero(rng, {2, 6}, 0.3).detach();
    auto f_cos = [&](const std::vector<Tensor>& in) { return cosine_loss(in[0], z); };
    auto rep2 = finite_difference_check(f_cos, {detail::rand_tensor_nonzero(rng, {2, 6}, 0.3)},
                                        1e-5, 1e-4);
    INFO(rep2.worst);
    REQUIRE(rep2.pass);

    // in-batch negatives variant
    Tensor kb = k_raw;
    auto f_batch = [&](const std::vector<Tensor>& in) {
        return info_nce_loss_in_batch(ops::l2_normalize_last(in[0]), kb, 0.2);
    };
    auto rep3 = finite_difference_check(f_batch, {detail::rand_tensor_nonzero(rng, {2, 6}, 0.3)},
                                        1e-5, 1e-4);
    REQUIRE(rep3.pass);
}
