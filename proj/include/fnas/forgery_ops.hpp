#pragma once

// Central difference convolution (CDC) operators and the registry of candidate
// operations a cell edge can choose from.

#include <fnas/ops.hpp>
#include <fnas/random.hpp>

#include <charconv>
#include <optional>
#include <variant>

namespace fnas {

enum class OpFamily { sep_cdc, dil_cdc, skip, pool_max };

struct OperationKind {
    OpFamily family = OpFamily::skip;
    int kernel = 1;
    int dilation = 1;
    double theta = 0;

    bool operator==(const OperationKind&) const = default;
};

// Shortest round-tripping decimal, always with a fractional part ("1.0", "0.5").
inline std::string format_theta(double theta) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, theta);
    std::string s(buf, res.ptr);
    if (s.find_first_of(".e") == std::string::npos) s += ".0";
    return s;
}

inline std::string format_kind(const OperationKind& k) {
    switch (k.family) {
        case OpFamily::skip: return "skip_connect";
        case OpFamily::pool_max: return "max_pool_" + std::to_string(k.kernel) + "x" + std::to_string(k.kernel);
        case OpFamily::sep_cdc:
        case OpFamily::dil_cdc: {
            const std::string fam = k.family == OpFamily::sep_cdc ? "SepCDC" : "DilCDC";
            return fam + "_" + std::to_string(k.kernel) + "x" + std::to_string(k.kernel) + "_" + format_theta(k.theta);
        }
    }
    throw Error("format_kind: unknown family");
}

namespace detail {

inline int parse_square_kernel(const std::string& tok, const std::string& name) {
    const auto x = tok.find('x');
    auto bad = [&] { return Error("parse_kind: malformed kernel token '" + tok + "' in '" + name + "'"); };
    if (x == std::string::npos || x == 0 || x + 1 == tok.size()) throw bad();
    int a = 0, b = 0;
    const char* s = tok.data();
    auto r1 = std::from_chars(s, s + x, a);
    auto r2 = std::from_chars(s + x + 1, s + tok.size(), b);
    if (r1.ec != std::errc{} || r1.ptr != s + x || r2.ec != std::errc{} || r2.ptr != s + tok.size()) throw bad();
    if (tok != std::to_string(a) + "x" + std::to_string(b)) throw bad();
    if (a != b) throw Error("parse_kind: non-square kernel '" + tok + "' in '" + name + "'");
    if (a < 1 || a % 2 == 0) throw Error("parse_kind: kernel '" + tok + "' must be odd in '" + name + "'");
    return a;
}

}  // namespace detail

inline OperationKind parse_kind(const std::string& name) {
    if (name == "skip_connect") return {OpFamily::skip, 1, 1, 0};
    const auto u1 = name.find('_');
    if (u1 == std::string::npos) throw Error("parse_kind: unknown operation '" + name + "'");
    const std::string fam = name.substr(0, u1);
    if (name.rfind("max_pool_", 0) == 0) {
        const int k = detail::parse_square_kernel(name.substr(9), name);
        return {OpFamily::pool_max, k, 1, 0};
    }
    if (fam != "SepCDC" && fam != "DilCDC") throw Error("parse_kind: unknown family '" + fam + "' in '" + name + "'");
    const auto u2 = name.find('_', u1 + 1);
    if (u2 == std::string::npos) throw Error("parse_kind: missing theta in '" + name + "'");
    OperationKind k;
    k.family = fam == "SepCDC" ? OpFamily::sep_cdc : OpFamily::dil_cdc;
    k.kernel = detail::parse_square_kernel(name.substr(u1 + 1, u2 - u1 - 1), name);
    k.dilation = k.family == OpFamily::dil_cdc ? 2 : 1;
    const std::string tt = name.substr(u2 + 1);
    double theta = 0;
    auto r = std::from_chars(tt.data(), tt.data() + tt.size(), theta);
    if (tt.empty() || r.ec != std::errc{} || r.ptr != tt.data() + tt.size())
        throw Error("parse_kind: malformed theta '" + tt + "' in '" + name + "'");
    if (!(theta >= 0 && theta <= 1) || std::signbit(theta)) throw Error("parse_kind: theta '" + tt + "' outside [0, 1] in '" + name + "'");
    if (format_theta(theta) != tt)
        throw Error("parse_kind: non-canonical theta '" + tt + "' (expected '" + format_theta(theta) + "')");
    k.theta = theta;
    return k;
}

class OperatorRegistry {
public:
    explicit OperatorRegistry(std::vector<std::string> names) : names_(std::move(names)) {
        if (names_.size() < 3) throw Error("registry needs at least 3 operations, got " + std::to_string(names_.size()));
        for (std::size_t i = 0; i < names_.size(); ++i) {
            kinds_.push_back(parse_kind(names_[i]));
            if (format_kind(kinds_.back()) != names_[i]) throw Error("registry: non-canonical name '" + names_[i] + "'");
            for (std::size_t j = 0; j < i; ++j)
                if (names_[j] == names_[i]) throw Error("registry: duplicate operation '" + names_[i] + "'");
        }
    }

    static const std::vector<std::string>& default_names() {
        static const std::vector<std::string> names = {
            "skip_connect",   "SepCDC_3x3_0.0", "SepCDC_3x3_0.5", "SepCDC_3x3_0.7", "SepCDC_3x3_1.0",
            "SepCDC_5x5_0.7", "DilCDC_3x3_0.5", "DilCDC_3x3_0.7", "DilCDC_5x5_0.7"};
        return names;
    }
    static OperatorRegistry defaults() { return OperatorRegistry(default_names()); }

    std::size_t size() const { return names_.size(); }
    const std::vector<std::string>& names() const { return names_; }
    const std::string& name(std::size_t i) const { return names_.at(i); }
    const OperationKind& kind(std::size_t i) const { return kinds_.at(i); }

    std::optional<std::size_t> index_of(const std::string& name) const {
        for (std::size_t i = 0; i < names_.size(); ++i)
            if (names_[i] == name) return i;
        return std::nullopt;
    }

    bool operator==(const OperatorRegistry& o) const { return names_ == o.names_; }

private:
    std::vector<std::string> names_;
    std::vector<OperationKind> kinds_;
};

// Convolution plus theta * (-x(p0) * sum(w)), computed by folding the central
// term into the kernel's center tap.
inline Tensor cdc_forward(Tape* tape, const Tensor& x, const Tensor& kernel, real theta, Conv2dOptions opt = {}) {
    detail::require_rank(kernel, 4, "cdc_forward kernel");
    if (kernel.dim(2) % 2 == 0 || kernel.dim(3) % 2 == 0)
        throw Error("cdc_forward: even kernel " + to_string(kernel.shape()) + " has no center tap");
    if (theta == 0) return conv2d(tape, x, kernel, opt);
    return conv2d(tape, x, center_fold(tape, kernel, theta), opt);
}

struct LayerOptions {
    bool affine = false;               // BN scale/shift parameters
    bool track_running_stats = false;  // BN running statistics for inference
};

namespace stage {

struct Relu {};
struct Identity {};

struct Conv {
    Tensor kernel;  // [O, C/groups, k, k]
    Conv2dOptions opt;
    real theta = 0;
};

struct Norm {
    std::optional<Tensor> gamma, beta;
    std::optional<RunningStats> stats;
};

// Two 1x1 stride-2 convs, the second on the input shifted by one pixel; output
// channels [0, split) come from the first and [split, O) from the second.
struct FactorizedReduce {
    Tensor kernel;  // [O, C, 1, 1]
    std::size_t split = 0;
};

struct MaxPool {
    int k = 3, stride = 1, padding = 1;
};

}  // namespace stage

using Stage = std::variant<stage::Relu, stage::Identity, stage::Conv, stage::Norm, stage::FactorizedReduce, stage::MaxPool>;

class LayerStack {
public:
    LayerStack() = default;
    explicit LayerStack(std::vector<Stage> stages) : stages_(std::move(stages)) {}

    const std::vector<Stage>& stages() const { return stages_; }
    std::vector<Stage>& stages() { return stages_; }

    // With a non-empty `channels`, runs the stack on that channel subset of a
    // C -> C stack by slicing its weights; x must already hold only those channels.
    Tensor forward(Tape* tape, const Tensor& x, bool training, std::span<const std::size_t> channels = {}) {
        Tensor h = x;
        const bool sub = !channels.empty();
        for (auto& st : stages_) {
            if (std::holds_alternative<stage::Relu>(st)) {
                h = relu(tape, h);
            } else if (std::holds_alternative<stage::Identity>(st)) {
            } else if (auto* c = std::get_if<stage::Conv>(&st)) {
                Tensor w = c->kernel;
                Conv2dOptions o = c->opt;
                if (sub) {
                    const std::size_t full = w.dim(0);
                    if (o.groups == static_cast<int>(full) && w.dim(1) == 1) {
                        w = index_select(tape, w, 0, channels);
                        o.groups = static_cast<int>(channels.size());
                    } else if (o.groups == 1 && w.dim(1) == full) {
                        w = index_select(tape, index_select(tape, w, 0, channels), 1, channels);
                    } else {
                        throw Error("LayerStack: conv stage cannot be channel-sliced");
                    }
                }
                h = cdc_forward(tape, h, w, c->theta, o);
            } else if (auto* n = std::get_if<stage::Norm>(&st)) {
                std::optional<Tensor> g = n->gamma, b = n->beta;
                if (sub && g) g = index_select(tape, *g, 0, channels);
                if (sub && b) b = index_select(tape, *b, 0, channels);
                if (sub && n->stats) throw Error("LayerStack: running statistics cannot be channel-sliced");
                BatchNormOptions bo;
                bo.training = training || !n->stats;
                h = batch_norm(tape, h, g ? &*g : nullptr, b ? &*b : nullptr, n->stats ? &*n->stats : nullptr, bo);
            } else if (auto* f = std::get_if<stage::FactorizedReduce>(&st)) {
                h = factorized_reduce(tape, h, *f, channels);
            } else if (auto* p = std::get_if<stage::MaxPool>(&st)) {
                h = max_pool2d(tape, h, p->k, p->stride, p->padding);
            }
        }
        return h;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (const auto& st : stages_) {
            if (auto* c = std::get_if<stage::Conv>(&st)) out.push_back(c->kernel);
            if (auto* f = std::get_if<stage::FactorizedReduce>(&st)) out.push_back(f->kernel);
            if (auto* n = std::get_if<stage::Norm>(&st)) {
                if (n->gamma) out.push_back(*n->gamma);
                if (n->beta) out.push_back(*n->beta);
            }
        }
        return out;
    }

    std::vector<RunningStats*> running_stats() {
        std::vector<RunningStats*> out;
        for (auto& st : stages_)
            if (auto* n = std::get_if<stage::Norm>(&st); n && n->stats) out.push_back(&*n->stats);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t total = 0;
        for (const auto& p : parameters()) total += p.numel();
        return total;
    }

private:
    static Tensor factorized_reduce(Tape* tape, const Tensor& x, const stage::FactorizedReduce& f,
                                    std::span<const std::size_t> channels) {
        Tensor w = f.kernel;
        std::vector<real> first, second;
        if (!channels.empty()) {
            if (w.dim(0) != w.dim(1)) throw Error("LayerStack: factorized reduce with C_in != C_out cannot be sliced");
            w = index_select(tape, index_select(tape, w, 0, channels), 1, channels);
            for (auto c : channels) first.push_back(c < f.split ? real(1) : real(0));
        } else {
            for (std::size_t c = 0; c < w.dim(0); ++c) first.push_back(c < f.split ? real(1) : real(0));
        }
        for (auto v : first) second.push_back(1 - v);
        Conv2dOptions o;
        o.stride = 2;
        Tensor a = conv2d(tape, x, w, o);
        Tensor b = conv2d(tape, crop_top_left(tape, x), w, o);
        if (a.shape() != b.shape()) throw Error("factorized reduce: odd spatial extent " + to_string(x.shape()));
        return add(tape, mul_channel_const(tape, a, first), mul_channel_const(tape, b, second));
    }

    std::vector<Stage> stages_;
};

namespace detail {

inline stage::Norm make_norm(std::size_t channels, const LayerOptions& lo) {
    stage::Norm n;
    if (lo.affine) {
        n.gamma = Tensor::full({channels}, real(1));
        n.gamma->set_requires_grad(true);
        n.beta = Tensor::zeros({channels});
        n.beta->set_requires_grad(true);
    }
    if (lo.track_running_stats) n.stats = RunningStats::identity(channels);
    return n;
}

inline stage::Conv make_depthwise(std::size_t c, int k, int stride, int dilation, real theta, Rng& rng) {
    Conv2dOptions o{stride, dilation * (k - 1) / 2, dilation, static_cast<int>(c)};
    return {he_normal({c, 1, std::size_t(k), std::size_t(k)}, std::size_t(k * k), rng), o, theta};
}

inline stage::Conv make_pointwise(std::size_t cin, std::size_t cout, Rng& rng) {
    return {he_normal({cout, cin, 1, 1}, cin, rng), Conv2dOptions{}, 0};
}

}  // namespace detail

// relu -> 1x1 conv -> BN, used to align cell inputs.
inline LayerStack make_relu_conv_bn(std::size_t cin, std::size_t cout, const LayerOptions& lo, Rng& rng) {
    return LayerStack({stage::Relu{}, detail::make_pointwise(cin, cout, rng), detail::make_norm(cout, lo)});
}

inline LayerStack make_factorized_reduce(std::size_t cin, std::size_t cout, const LayerOptions& lo, Rng& rng) {
    if (cout < 2) throw Error("factorized reduce needs at least 2 output channels");
    stage::FactorizedReduce f{he_normal({cout, cin, 1, 1}, cin, rng), cout / 2};
    return LayerStack({stage::Relu{}, std::move(f), detail::make_norm(cout, lo)});
}

// 3x3 conv -> BN on raw images.
inline LayerStack make_stem(std::size_t cin, std::size_t cout, const LayerOptions& lo, Rng& rng) {
    stage::Conv c{he_normal({cout, cin, 3, 3}, cin * 9, rng), Conv2dOptions{1, 1, 1, 1}, 0};
    return LayerStack({std::move(c), detail::make_norm(cout, lo)});
}

// Channel-preserving C -> C stack for one candidate operation.
inline LayerStack instantiate(const OperationKind& kind, std::size_t channels, int stride, const LayerOptions& lo,
                              Rng& rng) {
    if (channels < 1) throw Error("instantiate: channels must be >= 1");
    if (stride != 1 && stride != 2) throw Error("instantiate: unsupported stride " + std::to_string(stride));
    const real theta = static_cast<real>(kind.theta);
    std::vector<Stage> st;
    switch (kind.family) {
        case OpFamily::sep_cdc:
            for (int rep = 0; rep < 2; ++rep) {
                st.push_back(stage::Relu{});
                st.push_back(detail::make_depthwise(channels, kind.kernel, rep == 0 ? stride : 1, 1, theta, rng));
                st.push_back(detail::make_pointwise(channels, channels, rng));
                st.push_back(detail::make_norm(channels, lo));
            }
            break;
        case OpFamily::dil_cdc:
            st.push_back(stage::Relu{});
            st.push_back(detail::make_depthwise(channels, kind.kernel, stride, kind.dilation, theta, rng));
            st.push_back(detail::make_pointwise(channels, channels, rng));
            st.push_back(detail::make_norm(channels, lo));
            break;
        case OpFamily::skip:
            if (stride == 1) return LayerStack({stage::Identity{}});
            if (channels < 2) throw Error("instantiate: strided skip needs at least 2 channels");
            return make_factorized_reduce(channels, channels, lo, rng);
        case OpFamily::pool_max:
            st.push_back(stage::MaxPool{kind.kernel, stride, kind.kernel / 2});
            st.push_back(detail::make_norm(channels, lo));
            break;
    }
    return LayerStack(std::move(st));
}

}  // namespace fnas
