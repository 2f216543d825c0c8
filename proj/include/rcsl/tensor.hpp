// Dense f64 tensor with reverse-mode autodiff on an explicit tape.
//
// Tensors are value-semantic handles onto shared storage. Every differentiable
// operator (see ops.hpp) appends one node to the thread-local active tape; the
// backward pass walks the tape once in reverse and accumulates gradients
// additively. Tensors are immutable after creation except for gradient
// accumulation and explicit leaf mutation between steps (optimizer / EMA).
#pragma once

#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "rcsl/common.hpp"

namespace rcsl {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    if (s.empty()) return "scalar";
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += 'x';
        out += std::to_string(s[i]);
    }
    return out;
}

inline std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until needed; same length as data when present
    bool requires_grad = false;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0, requires_grad);
    }

    static Tensor filled(Shape shape, double value, bool requires_grad = false) {
        auto impl = std::make_shared<TensorImpl>();
        impl->data.assign(static_cast<size_t>(numel_of(shape)), value);
        impl->shape = std::move(shape);
        impl->requires_grad = requires_grad;
        if (requires_grad) impl->ensure_grad();
        return Tensor(std::move(impl));
    }

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
        check(numel_of(shape) == static_cast<int64_t>(data.size()),
              "Tensor::from_data: shape ", shape_str(shape), " expects ", numel_of(shape),
              " values, got ", data.size());
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = std::move(shape);
        impl->data = std::move(data);
        impl->requires_grad = requires_grad;
        if (requires_grad) impl->ensure_grad();
        return Tensor(std::move(impl));
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from_data({}, {value}, requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t rank() const { return static_cast<int64_t>(impl_->shape.size()); }
    int64_t numel() const { return impl_->numel(); }
    int64_t dim(int i) const {
        int r = static_cast<int>(rank());
        if (i < 0) i += r;
        return impl_->shape[static_cast<size_t>(i)];
    }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }
    double* ptr() { return impl_->data.data(); }
    const double* ptr() const { return impl_->data.data(); }

    bool requires_grad() const { return impl_->requires_grad; }

    // Mark a leaf as trainable. Allocates the gradient buffer.
    Tensor& set_requires_grad(bool rg = true) {
        impl_->requires_grad = rg;
        if (rg) impl_->ensure_grad();
        else impl_->grad.clear();
        return *this;
    }

    std::vector<double>& grad() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    const std::vector<double>* grad_if() const {
        return impl_->grad.empty() ? nullptr : &impl_->grad;
    }
    double grad_max_abs() const {
        double m = 0.0;
        for (double g : impl_->grad) m = std::max(m, std::fabs(g));
        return m;
    }
    void zero_grad() {
        for (double& g : impl_->grad) g = 0.0;
    }

    double item() const {
        check(numel() == 1, "Tensor::item: tensor has ", numel(), " elements");
        return impl_->data[0];
    }

    // A constant copy with no gradient history.
    Tensor detach() const {
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = impl_->shape;
        impl->data = impl_->data;
        impl->requires_grad = false;
        return Tensor(std::move(impl));
    }

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

struct TapeNode {
    const char* op = nullptr;
    std::function<void()> backward;
};

class Tape {
public:
    void record(const char* op, std::function<void()> backward) {
        nodes_.push_back(TapeNode{op, std::move(backward)});
    }

    size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    // Seed d(loss)/d(loss) = 1 and walk the tape in reverse, once per node.
    // Node closures are released as soon as they have run so intermediate
    // buffers free progressively.
    void backward(const Tensor& loss) {
        check(loss.defined() && loss.numel() == 1,
              "Tape::backward: loss must be a scalar, got ",
              loss.defined() ? shape_str(loss.shape()) : "undefined");
        check(!consumed_, "Tape::backward: tape already consumed; reset() before reuse");
        consumed_ = true;
        loss.impl()->ensure_grad();
        loss.impl()->grad[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->backward) it->backward();
            it->backward = nullptr;
        }
    }

    void reset() {
        nodes_.clear();
        consumed_ = false;
    }

    // Fingerprint of the recorded op sequence, for determinism checks.
    uint64_t structure_hash() const {
        uint64_t h = 1469598103934665603ull;
        for (const auto& n : nodes_) h = fnv1a64(n.op, std::char_traits<char>::length(n.op), h);
        return h;
    }

private:
    std::vector<TapeNode> nodes_;
    bool consumed_ = false;
};

namespace detail {
inline Tape*& active_tape_slot() {
    thread_local Tape* t = nullptr;
    return t;
}
} // namespace detail

inline Tape* active_tape() { return detail::active_tape_slot(); }

// Makes `tape` the recording target for the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape) : prev_(detail::active_tape_slot()) {
        detail::active_tape_slot() = &tape;
    }
    ~TapeScope() { detail::active_tape_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

// Disables recording (inference / stop-gradient regions).
class NoGradScope {
public:
    NoGradScope() : prev_(detail::active_tape_slot()) { detail::active_tape_slot() = nullptr; }
    ~NoGradScope() { detail::active_tape_slot() = prev_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* prev_;
};

} // namespace rcsl
