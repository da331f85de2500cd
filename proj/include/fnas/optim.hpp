#pragma once

// SGD with momentum and Adam, both with coupled (L2) weight decay.
//
// Moment buffers are keyed by parameter storage, so the caller may pass a
// shrinking parameter list (pruned operations simply stop being passed in and
// their state is never touched again).

#include <fnas/tensor.hpp>

#include <cmath>
#include <istream>
#include <map>
#include <ostream>

namespace fnas {

enum class OptimizerKind { sgd_momentum, adam };

struct OptimizerOptions {
    OptimizerKind kind = OptimizerKind::sgd_momentum;
    real learning_rate = real(0.025);
    real momentum = real(0.9);  // SGD momentum; Adam beta1
    real beta2 = real(0.999);
    real eps = real(1e-8);
    real weight_decay = 0;

    static OptimizerOptions sgd(real lr, real momentum, real weight_decay) {
        return {OptimizerKind::sgd_momentum, lr, momentum, real(0.999), real(1e-8), weight_decay};
    }
    static OptimizerOptions adam(real lr, real beta1 = real(0.9), real beta2 = real(0.999), real weight_decay = 0) {
        return {OptimizerKind::adam, lr, beta1, beta2, real(1e-8), weight_decay};
    }
};

// Scales all gradients so their joint L2 norm is at most max_norm; returns the
// norm before scaling. max_norm <= 0 leaves gradients untouched.
inline double clip_grad_norm(std::span<Tensor> params, double max_norm) {
    double sq = 0;
    for (const auto& p : params)
        if (p.has_grad())
            for (real g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const real scale = static_cast<real>(max_norm / (norm + 1e-6));
        for (auto& p : params)
            if (p.has_grad())
                for (real& g : p.mutable_grad()) g *= scale;
    }
    return norm;
}

class Optimizer {
public:
    explicit Optimizer(OptimizerOptions options) : options_(options) {}

    const OptimizerOptions& options() const { return options_; }
    void set_learning_rate(real lr) { options_.learning_rate = lr; }
    std::uint64_t steps() const { return steps_; }

    // Updates every parameter from its gradient, then zeroes the gradients.
    void step(std::span<Tensor> params) {
        for (const auto& p : params)
            if (!p.has_grad()) throw Error("optimizer step: parameter of shape " + to_string(p.shape()) + " has no gradient");
        ++steps_;
        const real lr = options_.learning_rate, wd = options_.weight_decay;
        for (auto& p : params) {
            auto& st = state_[p.handle().get()];
            auto w = p.mutable_data();
            auto g = p.mutable_grad();
            if (st.first.size() != w.size()) st.first.assign(w.size(), real(0));
            if (options_.kind == OptimizerKind::sgd_momentum) {
                auto& buf = st.first;
                const real mu = options_.momentum;
                for (std::size_t i = 0; i < w.size(); ++i) {
                    const real d = g[i] + wd * w[i];
                    buf[i] = st.initialized ? mu * buf[i] + d : d;
                    w[i] -= lr * buf[i];
                }
            } else {
                if (st.second.size() != w.size()) st.second.assign(w.size(), real(0));
                ++st.t;
                const real b1 = options_.momentum, b2 = options_.beta2;
                const real c1 = 1 - std::pow(b1, static_cast<real>(st.t));
                const real c2 = 1 - std::pow(b2, static_cast<real>(st.t));
                for (std::size_t i = 0; i < w.size(); ++i) {
                    const real d = g[i] + wd * w[i];
                    st.first[i] = b1 * st.first[i] + (1 - b1) * d;
                    st.second[i] = b2 * st.second[i] + (1 - b2) * d * d;
                    const real mhat = st.first[i] / c1, vhat = st.second[i] / c2;
                    w[i] -= lr * mhat / (std::sqrt(vhat) + options_.eps);
                }
            }
            st.initialized = true;
            std::fill(g.begin(), g.end(), real(0));
        }
    }

    // Moment buffers are written in the order of `params`.
    void save(std::ostream& os, std::span<const Tensor> params) const {
        os.write(reinterpret_cast<const char*>(&steps_), sizeof steps_);
        for (const auto& p : params) {
            auto it = state_.find(p.handle().get());
            const Slot empty;
            const Slot& st = it == state_.end() ? empty : it->second;
            write_vec(os, st.first);
            write_vec(os, st.second);
            os.write(reinterpret_cast<const char*>(&st.t), sizeof st.t);
            const char init = st.initialized ? 1 : 0;
            os.write(&init, 1);
        }
    }

    void load(std::istream& is, std::span<const Tensor> params) {
        state_.clear();
        is.read(reinterpret_cast<char*>(&steps_), sizeof steps_);
        for (const auto& p : params) {
            Slot st;
            st.first = read_vec(is);
            st.second = read_vec(is);
            is.read(reinterpret_cast<char*>(&st.t), sizeof st.t);
            char init = 0;
            is.read(&init, 1);
            st.initialized = init != 0;
            if (!st.first.empty() && st.first.size() != p.numel()) throw Error("optimizer state does not match parameter");
            if (st.initialized || !st.first.empty()) state_[p.handle().get()] = std::move(st);
        }
        if (!is) throw Error("truncated optimizer state");
    }

    // Buffer sizes for a parameter (0 when it was never stepped).
    std::size_t moment_size(const Tensor& p) const {
        auto it = state_.find(p.handle().get());
        return it == state_.end() ? 0 : it->second.first.size();
    }

private:
    struct Slot {
        std::vector<real> first;   // momentum buffer / Adam m
        std::vector<real> second;  // Adam v
        std::uint64_t t = 0;
        bool initialized = false;
    };

    static void write_vec(std::ostream& os, const std::vector<real>& v) {
        const std::uint64_t n = v.size();
        os.write(reinterpret_cast<const char*>(&n), sizeof n);
        os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(n * sizeof(real)));
    }
    static std::vector<real> read_vec(std::istream& is) {
        std::uint64_t n = 0;
        is.read(reinterpret_cast<char*>(&n), sizeof n);
        if (!is || n > (1ULL << 32)) throw Error("corrupt optimizer state");
        std::vector<real> v(n);
        is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(real)));
        return v;
    }

    OptimizerOptions options_;
    std::map<const detail::TensorImpl*, Slot> state_;
    std::uint64_t steps_ = 0;
};

}  // namespace fnas
