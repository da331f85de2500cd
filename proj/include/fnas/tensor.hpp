#pragma once

// Dense NCHW tensor with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto shared storage. Values are immutable once an
// op has produced them; only parameters (mutated by optimizers) and gradient
// buffers change in place. Ops record themselves on a Tape when one is given
// and at least one input requires a gradient.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fnas {

#ifdef FNAS_FLOAT32
using real = float;
#else
using real = double;
#endif

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<real> data;
    std::vector<real> grad;  // empty when absent
    bool requires_grad = false;
    std::uint64_t tape_id = 0;  // tape that produced this value, 0 for leaves
};

inline std::vector<real>& ensure_grad(TensorImpl& t) {
    if (t.grad.empty()) t.grad.assign(t.data.size(), real(0));
    return t.grad;
}

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<real> values, bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl>()) {
        if (shape.empty()) throw Error("tensor shape must have at least one extent");
        for (auto e : shape)
            if (e == 0) throw Error("tensor extents must be positive, got " + fnas::to_string(shape));
        if (numel_of(shape) != values.size())
            throw Error("tensor data length " + std::to_string(values.size()) +
                        " does not match shape " + fnas::to_string(shape));
        impl_->shape = std::move(shape);
        impl_->data = std::move(values);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<real>(n, real(0)), requires_grad);
    }
    static Tensor full(Shape shape, real value, bool requires_grad = false) {
        auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<real>(n, value), requires_grad);
    }
    static Tensor scalar(real value, bool requires_grad = false) {
        return Tensor({1}, {value}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(impl_); }
    const Shape& shape() const { return impl_->shape; }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const real> data() const { return impl_->data; }
    // Parameters only: optimizers and initializers write through this.
    std::span<real> mutable_data() { return impl_->data; }
    real item() const {
        if (numel() != 1) throw Error("item() on tensor of shape " + fnas::to_string(shape()));
        return impl_->data[0];
    }
    real operator[](std::size_t i) const { return impl_->data[i]; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on) { impl_->requires_grad = on; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const real> grad() const { return impl_->grad; }
    std::span<real> mutable_grad() { return detail::ensure_grad(*impl_); }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), real(0));
    }
    void clear_grad() { impl_->grad.clear(); }

    // Copy of the values with no grad and no history.
    Tensor detach() const { return Tensor(shape(), impl_->data, false); }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    detail::TensorImpl& impl() const { return *impl_; }
    const std::shared_ptr<detail::TensorImpl>& handle() const { return impl_; }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Ordered record of executed primitives. Backward replays it once, in reverse.
class Tape {
public:
    using BackwardFn = std::function<void(std::span<const real> grad_out)>;

    Tape() : id_(next_id()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::uint64_t id() const { return id_; }
    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    void record(const Tensor& output, BackwardFn backward) {
        if (consumed_) throw Error("cannot record onto a tape that has already run backward");
        output.impl().requires_grad = true;
        output.impl().tape_id = id_;
        nodes_.push_back({output.handle(), std::move(backward)});
    }

    void backward(const Tensor& loss) {
        if (consumed_) throw Error("backward called twice on the same tape");
        if (!loss.defined() || loss.numel() != 1)
            throw Error("backward requires a scalar loss");
        if (loss.impl().tape_id != id_)
            throw Error("loss was not recorded on this tape");
        consumed_ = true;
        auto& g = detail::ensure_grad(loss.impl());
        std::fill(g.begin(), g.end(), real(0));
        g[0] = real(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->output->grad.empty()) continue;
            it->backward(it->output->grad);
            it->backward = nullptr;
        }
    }

private:
    struct Node {
        std::shared_ptr<detail::TensorImpl> output;
        BackwardFn backward;
    };

    static std::uint64_t next_id() {
        static std::atomic<std::uint64_t> counter{1};
        return counter++;
    }

    std::uint64_t id_;
    std::vector<Node> nodes_;
    bool consumed_ = false;
};

inline void set_requires_grad(std::span<Tensor> params, bool on) {
    for (auto& p : params) p.set_requires_grad(on);
}

inline void zero_grads(std::span<Tensor> params) {
    for (auto& p : params) p.zero_grad();
}

inline bool all_finite(const Tensor& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](real v) { return std::isfinite(v); });
}

// FNV-1a over the raw bytes of every listed tensor, in order.
inline std::uint64_t hash_tensors(std::span<const Tensor> tensors) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& t : tensors) {
        auto bytes = std::as_bytes(t.data());
        for (auto b : bytes) {
            h ^= static_cast<std::uint64_t>(b);
            h *= 1099511628211ULL;
        }
    }
    return h;
}

}  // namespace fnas
