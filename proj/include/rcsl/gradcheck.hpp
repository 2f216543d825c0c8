// Central finite-difference verification of backward rules.
#pragma once

#include <functional>

#include "rcsl/ops.hpp"

namespace rcsl {

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct FdReport {
    double max_rel_err = 0.0;
    bool pass = false;
    std::string worst; // input index / element of the worst deviation
};

// Compares analytic gradients of the scalar-valued f against central
// differences, elementwise over every input. Relative error uses
// |a - n| / max(|a|, |n|, 1) so near-zero gradients are judged absolutely.
inline FdReport finite_difference_check(const TensorFn& f, std::vector<Tensor> inputs, double eps,
                                        double tol) {
    check(eps >= 1e-7 && eps <= 1e-3, "finite_difference_check: eps ", eps,
          " outside [1e-7, 1e-3]");

    // determinism probe: two untracked evaluations must agree bitwise
    {
        NoGradScope ng;
        Tensor y1 = f(inputs);
        Tensor y2 = f(inputs);
        check(y1.numel() == 1 && y2.numel() == 1,
              "finite_difference_check: f must be scalar-valued");
        check(y1.item() == y2.item(),
              "finite_difference_check: f is non-deterministic (two forward passes disagree: ",
              y1.item(), " vs ", y2.item(), ")");
    }

    for (Tensor& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = f(inputs);
        tape.backward(loss);
        for (Tensor& t : inputs) analytic.push_back(t.grad());
    }

    FdReport report;
    report.max_rel_err = 0.0;
    NoGradScope ng;
    for (size_t ti = 0; ti < inputs.size(); ++ti) {
        Tensor& t = inputs[ti];
        for (int64_t i = 0; i < t.numel(); ++i) {
            const double orig = t.data()[static_cast<size_t>(i)];
            t.data()[static_cast<size_t>(i)] = orig + eps;
            const double fp = f(inputs).item();
            t.data()[static_cast<size_t>(i)] = orig - eps;
            const double fm = f(inputs).item();
            t.data()[static_cast<size_t>(i)] = orig;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[ti][static_cast<size_t>(i)];
            const double rel =
                std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1.0});
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst = detail::cat("input ", ti, " elem ", i, ": analytic ", a,
                                           " vs numeric ", numeric);
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

// One named gradcheck case: fresh random inputs per instance.
struct CheckCase {
    std::string name;
    std::function<std::vector<Tensor>(Rng&)> make_inputs;
    TensorFn f;
};

namespace detail {

// Random tensor with entries in [lo, hi].
inline Tensor rand_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(static_cast<size_t>(numel_of(shape)));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(v));
}

// Random tensor bounded away from zero (for kinked ops: relu, abs).
inline Tensor rand_tensor_nonzero(Rng& rng, Shape shape, double min_abs = 0.1) {
    std::vector<double> v(static_cast<size_t>(numel_of(shape)));
    for (double& x : v) {
        double m = rng.uniform(min_abs, 1.5);
        x = rng.bernoulli(0.5) ? m : -m;
    }
    return Tensor::from_data(std::move(shape), std::move(v));
}

// Scalar-valued probe: weighted sum with a fixed random constant, so layout
// mistakes (transposed or permuted outputs) change the value.
inline Tensor probe(const Tensor& t, uint64_t salt) {
    std::vector<double> w(static_cast<size_t>(t.numel()));
    Rng rng(salt ^ 0xabcdef1234ull);
    for (double& x : w) x = rng.uniform(-1.0, 1.0);
    Tensor weights = Tensor::from_data(t.shape(), std::move(w));
    return ops::sum_all(ops::mul(t, weights));
}

} // namespace detail

// Gradcheck coverage of the full operator set.
inline std::vector<CheckCase> op_check_cases() {
    using namespace ops;
    namespace gd = ::rcsl::detail;
    std::vector<CheckCase> cases;
    auto add_case = [&](std::string name, std::function<std::vector<Tensor>(Rng&)> mk,
                        TensorFn f) {
        cases.push_back(CheckCase{std::move(name), std::move(mk), std::move(f)});
    };

    add_case(
        "relu", [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor_nonzero(r, {4, 5})}; },
        [](const std::vector<Tensor>& in) { return gd::probe(relu(in[0]), 1); });
    add_case(
        "gelu", [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor(r, {4, 5}, -2.0, 2.0)}; },
        [](const std::vector<Tensor>& in) { return gd::probe(gelu(in[0]), 2); });
    add_case(
        "exp", [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor(r, {3, 4}, -2.0, 2.0)}; },
        [](const std::vector<Tensor>& in) { return gd::probe(ops::exp(in[0]), 3); });
    add_case(
        "log", [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor(r, {3, 4}, 0.2, 3.0)}; },
        [](const std::vector<Tensor>& in) { return gd::probe(ops::log(in[0]), 4); });
    add_case(
        "abs", [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor_nonzero(r, {4, 5})}; },
        [](const std::vector<Tensor>& in) { return gd::probe(ops::abs(in[0]), 5); });
    add_case(
        "scale", [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor(r, {3, 4})}; },
        [](const std::vector<Tensor>& in) { return gd::probe(scale(in[0], -1.7), 6); });
    add_case(
        "add_scalar", [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor(r, {3, 4})}; },
        [](const std::vector<Tensor>& in) { return gd::probe(add_scalar(in[0], 0.37), 7); });
    add_case(
        "add",
        [](Rng& r) {
            return std::vector<Tensor>{gd::rand_tensor(r, {4, 5}), gd::rand_tensor(r, {4, 5})};
        },
        [](const std::vector<Tensor>& in) { return gd::probe(add(in[0], in[1]), 8); });
    add_case(
        "add_broadcast",
        [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor(r, {3, 4, 5}), gd::rand_tensor(r, {5})}; },
        [](const std::vector<Tensor>& in) { return gd::probe(add(in[0], in[1]), 9); });
    add_case(
        "sub",
        [](Rng& r) {
            return std::vector<Tensor>{gd::rand_tensor(r, {4, 5}), gd::rand_tensor(r, {4, 5})};
        },
        [](const std::vector<Tensor>& in) { return gd::probe(sub(in[0], in[1]), 10); });
    add_case(
        "mul",
        [](Rng& r) {
            return std::vector<Tensor>{gd::rand_tensor(r, {4, 5}), gd::rand_tensor(r, {4, 5})};
        },
        [](const std::vector<Tensor>& in) { return gd::probe(mul(in[0], in[1]), 11); });
    add_case(
        "mul_broadcast",
        [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor(r, {3, 4, 5}), gd::rand_tensor(r, {5})}; },
        [](const std::vector<Tensor>& in) { return gd::probe(mul(in[0], in[1]), 12); });
    add_case(
        "matmul",
        [](Rng& r) {
            return std::vector<Tensor>{gd::rand_tensor(r, {3, 4}), gd::rand_tensor(r, {4, 5})};
        },
        [](const std::vector<Tensor>& in) { return gd::probe(matmul(in[0], in[1]), 13); });
    add_case(
        "matmul_shared_rhs",
        [](Rng& r) {
            return std::vector<Tensor>{gd::rand_tensor(r, {2, 3, 4}), gd::rand_tensor(r, {4, 2})};
        },
        [](const std::vector<Tensor>& in) { return gd::probe(matmul(in[0], in[1]), 14); });
    add_case(
        "matmul_batched",
        [](Rng& r) {
            return std::vector<Tensor>{gd::rand_tensor(r, {2, 3, 4}), gd::rand_tensor(r, {2, 4, 2})};
        },
        [](const std::vector<Tensor>& in) { return gd::probe(matmul(in[0], in[1]), 15); });
    add_case(
        "reshape", [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor(r, {3, 4})}; },
        [](const std::vector<Tensor>& in) { return gd::probe(reshape(in[0], {2, 6}), 16); });
    add_case(
        "transpose", [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor(r, {2, 3, 4})}; },
        [](const std::vector<Tensor>& in) { return gd::probe(transpose(in[0], {2, 0, 1}), 17); });
    add_case(
        "concat",
        [](Rng& r) {
            return std::vector<Tensor>{gd::rand_tensor(r, {3, 2}), gd::rand_tensor(r, {3, 3})};
        },
        [](const std::vector<Tensor>& in) { return gd::probe(concat_last({in[0], in[1]}), 18); });
    add_case(
        "slice", [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor(r, {3, 5})}; },
        [](const std::vector<Tensor>& in) { return gd::probe(slice_last(in[0], 1, 3), 19); });
    add_case(
        "sum", [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor(r, {3, 4})}; },
        [](const std::vector<Tensor>& in) { return sum_all(in[0]); });
    add_case(
        "mean", [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor(r, {3, 4})}; },
        [](const std::vector<Tensor>& in) { return mean_all(in[0]); });
    add_case(
        "sum_last", [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor(r, {3, 5})}; },
        [](const std::vector<Tensor>& in) { return gd::probe(sum_last(in[0]), 20); });
    add_case(
        "mean_last", [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor(r, {3, 5})}; },
        [](const std::vector<Tensor>& in) { return gd::probe(mean_last(in[0]), 21); });
    add_case(
        "softmax", [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor(r, {3, 5}, -2.0, 2.0)}; },
        [](const std::vector<Tensor>& in) { return gd::probe(softmax_last(in[0]), 22); });
    add_case(
        "layer_norm",
        [](Rng& r) {
            return std::vector<Tensor>{gd::rand_tensor(r, {4, 6}, -2.0, 2.0),
                                       gd::rand_tensor(r, {6}, 0.5, 1.5), gd::rand_tensor(r, {6})};
        },
        [](const std::vector<Tensor>& in) { return gd::probe(layer_norm(in[0], in[1], in[2]), 23); });
    add_case(
        "l2_normalize",
        [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor_nonzero(r, {3, 6}, 0.3)}; },
        [](const std::vector<Tensor>& in) { return gd::probe(l2_normalize_last(in[0]), 24); });
    add_case(
        "conv2d_3x3",
        [](Rng& r) {
            return std::vector<Tensor>{gd::rand_tensor(r, {1, 4, 4, 2}), gd::rand_tensor(r, {3, 3, 2, 3}),
                                       gd::rand_tensor(r, {3})};
        },
        [](const std::vector<Tensor>& in) { return gd::probe(conv2d(in[0], in[1], in[2]), 25); });
    add_case(
        "conv2d_1x1",
        [](Rng& r) {
            return std::vector<Tensor>{gd::rand_tensor(r, {1, 3, 3, 2}), gd::rand_tensor(r, {1, 1, 2, 4}),
                                       gd::rand_tensor(r, {4})};
        },
        [](const std::vector<Tensor>& in) { return gd::probe(conv2d(in[0], in[1], in[2]), 26); });
    add_case(
        "bilinear_upsample_2x",
        [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor(r, {1, 3, 3, 2})}; },
        [](const std::vector<Tensor>& in) { return gd::probe(bilinear_upsample_2x(in[0]), 27); });
    add_case(
        "patch_merge", [](Rng& r) { return std::vector<Tensor>{gd::rand_tensor(r, {1, 4, 4, 2})}; },
        [](const std::vector<Tensor>& in) { return gd::probe(patch_merge_2x2(in[0]), 28); });
    return cases;
}

struct SuiteResult {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
};

// Runs `instances` random instances of each case; reports the worst error.
inline std::vector<SuiteResult> run_check_suite(const std::vector<CheckCase>& cases,
                                                int instances, double eps, double tol,
                                                uint64_t seed) {
    std::vector<SuiteResult> results;
    for (const auto& c : cases) {
        SuiteResult r;
        r.name = c.name;
        r.pass = true;
        for (int i = 0; i < instances; ++i) {
            Rng rng(seed_stream(seed, c.name) + static_cast<uint64_t>(i));
            auto inputs = c.make_inputs(rng);
            FdReport rep = finite_difference_check(c.f, std::move(inputs), eps, tol);
            r.max_rel_err = std::max(r.max_rel_err, rep.max_rel_err);
            if (!rep.pass) r.pass = false;
        }
        results.push_back(std::move(r));
    }
    return results;
}

} // namespace rcsl
