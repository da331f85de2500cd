#pragma once

// Detection network built from a searched genotype: groups of
// (normal, normal, reduction) discrete cells whose reduction outputs are
// pooled and fused by one linear head.

#include <fnas/metrics.hpp>
#include <fnas/search.hpp>

namespace fnas {

struct TrainConfig {
    std::size_t epochs = 150;
    std::size_t batch_size = 48;
    std::size_t input_size = 64;
    std::size_t init_channels = 16;
    std::size_t cell_groups = 4;
    double lr = 0.025;
    double momentum = 0.9;
    double weight_decay = 3e-4;
    double grad_clip = 5;  // global gradient-norm bound; 0 disables
    bool cosine = true;
    bool flip = true;
    bool pyramid = true;  // false: only the last reduction output feeds the head
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw Error("train config: epochs must be >= 1");
        if (batch_size < 2) throw Error("train config: batch_size must be >= 2");
        if (!(lr >= 0)) throw Error("train config: lr must be >= 0");
        if (!(momentum >= 0 && momentum < 1)) throw Error("train config: momentum must lie in [0, 1)");
        if (!(weight_decay >= 0)) throw Error("train config: weight_decay must be >= 0");
        if (!(grad_clip >= 0)) throw Error("train config: grad_clip must be >= 0");
        if (init_channels < 2) throw Error("train config: init_channels must be >= 2");
        if (cell_groups < 1) throw Error("train config: cell_groups must be >= 1");
        if (input_size == 0 || input_size % (std::size_t{1} << cell_groups) != 0)
            throw Error("train config: input_size " + std::to_string(input_size) + " must be divisible by " +
                        std::to_string(std::size_t{1} << cell_groups));
    }

    nlohmann::json to_json() const {
        return {{"epochs", epochs}, {"batch_size", batch_size}, {"input_size", input_size},
                {"init_channels", init_channels}, {"cell_groups", cell_groups}, {"lr", lr},
                {"momentum", momentum}, {"weight_decay", weight_decay}, {"grad_clip", grad_clip}, {"cosine", cosine},
                {"flip", flip}, {"pyramid", pyramid}, {"seed", seed}};
    }
};

// Learning rate at 0-based epoch e.
inline double scheduled_lr(const TrainConfig& cfg, std::size_t e) {
    if (!cfg.cosine) return cfg.lr;
    const double pi = std::acos(-1.0);
    return 0.5 * cfg.lr * (1 + std::cos(pi * static_cast<double>(e) / static_cast<double>(cfg.epochs)));
}

struct DiscreteCell {
    CellKind kind = CellKind::normal;
    std::size_t channels = 0;
    LayerStack pre0, pre1;
    std::vector<LayerStack> ops;     // 8, two per intermediate node
    std::vector<std::size_t> preds;  // predecessor state of each op
};

class DetectionNet {
public:
    struct Output {
        Tensor logits;
        std::vector<Tensor> taps;  // reduction cell outputs, shallow to deep
    };

    DetectionNet(const Genotype& genotype, const TrainConfig& cfg, std::uint64_t init_seed)
        : genotype_(genotype), groups_(cfg.cell_groups), pyramid_(cfg.pyramid) {
        validate(genotype_);
        const OperatorRegistry reg(genotype_.registry);
        if (cfg.init_channels < 2) throw Error("detection net: init_channels must be >= 2");
        Rng rng(stream_seed(init_seed, 2));
        const LayerOptions lo{true, true};
        std::size_t c = cfg.init_channels;
        stem_ = make_stem(3, c, lo, rng);
        std::size_t c_pp = c, c_p = c;
        bool red_prev = false;
        for (std::size_t g = 0; g < groups_; ++g)
            for (int pos = 0; pos < 3; ++pos) {
                DiscreteCell cell;
                cell.kind = pos == 2 ? CellKind::reduction : CellKind::normal;
                if (cell.kind == CellKind::reduction) c *= 2;
                cell.channels = c;
                cell.pre0 = red_prev ? make_factorized_reduce(c_pp, c, lo, rng) : make_relu_conv_bn(c_pp, c, lo, rng);
                cell.pre1 = make_relu_conv_bn(c_p, c, lo, rng);
                const auto& genes = cell.kind == CellKind::reduction ? genotype_.reduction : genotype_.normal;
                for (const auto& gene : genes) {
                    const auto o = reg.index_of(gene.op);
                    if (!o) throw Error("detection net: op '" + gene.op + "' not in the genotype registry");
                    const int stride = cell.kind == CellKind::reduction && gene.pred < 2 ? 2 : 1;
                    cell.ops.push_back(instantiate(reg.kind(*o), c, stride, lo, rng));
                    cell.preds.push_back(gene.pred);
                }
                if (cell.kind == CellKind::reduction) tap_channels_.push_back(kCellSteps * c);
                cells_.push_back(std::move(cell));
                c_pp = c_p;
                c_p = kCellSteps * c;
                red_prev = pos == 2;
            }
        std::size_t head_in = 0;
        for (std::size_t t = 0; t < tap_channels_.size(); ++t)
            if (tap_used(t)) head_in += tap_channels_[t];
        head_w_ = uniform_init({2, head_in}, real(1) / std::sqrt(static_cast<real>(head_in)), rng);
        head_b_ = Tensor::zeros({2}, true);
    }

    const Genotype& genotype() const { return genotype_; }
    std::size_t taps() const { return tap_channels_.size(); }
    const std::vector<DiscreteCell>& cells() const { return cells_; }

    // `tap_mask`, when given, zeroes the pooled vector of every tap marked false.
    Output forward(Tape* tape, const Tensor& images, bool training, const std::vector<bool>* tap_mask = nullptr) {
        detail::require_rank(images, 4, "detection net input");
        const std::size_t div = std::size_t{1} << groups_;
        if (images.dim(1) != 3 || images.dim(2) % div != 0 || images.dim(3) % div != 0)
            throw Error("detection net: input " + to_string(images.shape()) + " needs 3 channels and sides divisible by " +
                        std::to_string(div));
        Output out;
        Tensor s0 = stem_.forward(tape, images, training);
        Tensor s1 = s0;
        for (auto& cell : cells_) {
            Tensor y = cell_forward(tape, cell, s0, s1, training);
            s0 = s1;
            s1 = y;
            if (cell.kind == CellKind::reduction) out.taps.push_back(y);
        }
        Tensor logits;
        std::size_t offset = 0;
        for (std::size_t t = 0; t < out.taps.size(); ++t) {
            if (!tap_used(t)) continue;
            std::vector<std::size_t> cols(tap_channels_[t]);
            std::iota(cols.begin(), cols.end(), offset);
            offset += tap_channels_[t];
            if (tap_mask && !(*tap_mask)[t]) continue;
            // The bias rides on the first contributing tap.
            Tensor part = linear(tape, global_avg_pool(tape, out.taps[t]), index_select(tape, head_w_, 1, cols),
                                 logits.defined() ? nullptr : &head_b_);
            logits = logits.defined() ? add(tape, logits, part) : part;
        }
        if (!logits.defined()) logits = linear(tape, Tensor::zeros({images.dim(0), 1}), Tensor::zeros({2, 1}), &head_b_);
        out.logits = logits;
        return out;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out = stem_.parameters();
        for (const auto& cell : cells_) {
            append(out, cell.pre0.parameters());
            append(out, cell.pre1.parameters());
            for (const auto& op : cell.ops) append(out, op.parameters());
        }
        out.push_back(head_w_);
        out.push_back(head_b_);
        return out;
    }

    std::vector<RunningStats*> running_stats() {
        std::vector<RunningStats*> out = stem_.running_stats();
        for (auto& cell : cells_) {
            append(out, cell.pre0.running_stats());
            append(out, cell.pre1.running_stats());
            for (auto& op : cell.ops) append(out, op.running_stats());
        }
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p.numel();
        return n;
    }

    // Fake-class probability per image, inference mode.
    std::vector<double> predict(const Dataset& d, std::size_t batch_size) {
        std::vector<double> scores;
        scores.reserve(d.size());
        for (std::size_t s = 0; s < d.size(); s += batch_size) {
            std::vector<std::size_t> idx(std::min(batch_size, d.size() - s));
            std::iota(idx.begin(), idx.end(), s);
            const Tensor p = softmax_rows(forward(nullptr, make_batch(d, idx).images, false).logits);
            for (std::size_t i = 0; i < idx.size(); ++i) scores.push_back(p[i * 2 + 1]);
        }
        return scores;
    }

    static Tensor softmax_rows(const Tensor& logits) {
        Tensor p = Tensor::zeros(logits.shape());
        auto out = p.mutable_data();
        for (std::size_t i = 0; i < logits.dim(0); ++i) {
            const double a = logits[i * 2], b = logits[i * 2 + 1], m = std::max(a, b);
            const double ea = std::exp(a - m), eb = std::exp(b - m);
            out[i * 2] = static_cast<real>(ea / (ea + eb));
            out[i * 2 + 1] = static_cast<real>(eb / (ea + eb));
        }
        return p;
    }

private:
    template <class T>
    static void append(std::vector<T>& a, std::vector<T> b) {
        a.insert(a.end(), std::make_move_iterator(b.begin()), std::make_move_iterator(b.end()));
    }

    bool tap_used(std::size_t t) const { return pyramid_ || t + 1 == tap_channels_.size(); }

    static Tensor cell_forward(Tape* tape, DiscreteCell& cell, const Tensor& s0, const Tensor& s1, bool training) {
        std::vector<Tensor> states = {cell.pre0.forward(tape, s0, training), cell.pre1.forward(tape, s1, training)};
        for (std::size_t node = 0; node < kCellSteps; ++node) {
            const Tensor a = cell.ops[2 * node].forward(tape, states[cell.preds[2 * node]], training);
            const Tensor b = cell.ops[2 * node + 1].forward(tape, states[cell.preds[2 * node + 1]], training);
            states.push_back(add(tape, a, b));
        }
        return concat_channels(tape, {states.begin() + 2, states.end()});
    }

    Genotype genotype_;
    std::size_t groups_;
    bool pyramid_;
    LayerStack stem_;
    std::vector<DiscreteCell> cells_;
    std::vector<std::size_t> tap_channels_;
    Tensor head_w_, head_b_;
};

struct TrainResult {
    std::map<std::string, std::vector<double>> curves;
    std::size_t best_epoch = 0;  // 1-based
    double best_val_auc = -1;
};

namespace detail {

struct NetSnapshot {
    std::vector<std::vector<real>> params;
    std::vector<RunningStats> stats;
};

inline NetSnapshot snapshot(DetectionNet& net) {
    NetSnapshot s;
    for (const auto& p : net.parameters()) s.params.emplace_back(p.data().begin(), p.data().end());
    for (auto* r : net.running_stats()) s.stats.push_back(*r);
    return s;
}

inline void restore(DetectionNet& net, const NetSnapshot& s) {
    auto params = net.parameters();
    for (std::size_t i = 0; i < params.size(); ++i)
        std::copy(s.params[i].begin(), s.params[i].end(), params[i].mutable_data().begin());
    auto stats = net.running_stats();
    for (std::size_t i = 0; i < stats.size(); ++i) *stats[i] = s.stats[i];
}

}  // namespace detail

// SGD with per-epoch validation; the net ends holding the weights of the
// epoch with the best validation AUC (earliest on ties).
inline TrainResult train(DetectionNet& net, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                         const std::function<void(std::size_t, const TrainResult&)>& on_epoch = {}) {
    cfg.validate();
    train_set.require_both_classes("training set");
    val_set.require_both_classes("validation set");
    if (train_set.height != cfg.input_size || train_set.width != cfg.input_size)
        throw Error("training images are " + std::to_string(train_set.height) + "x" + std::to_string(train_set.width) +
                    ", config expects " + std::to_string(cfg.input_size));
    Rng rng(stream_seed(cfg.seed, 31));
    Optimizer opt(OptimizerOptions::sgd(static_cast<real>(cfg.lr), static_cast<real>(cfg.momentum),
                                        static_cast<real>(cfg.weight_decay)));
    auto params = net.parameters();
    TrainResult result;
    detail::NetSnapshot best = detail::snapshot(net);
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        const double lr = scheduled_lr(cfg, e);
        opt.set_learning_rate(static_cast<real>(lr));
        double loss_sum = 0, acc_sum = 0;
        std::size_t seen = 0;
        for (const auto& idx : make_batches(shuffled_indices(train_set.size(), rng), cfg.batch_size)) {
            std::vector<bool> flips(idx.size(), false);
            if (cfg.flip) {
                std::bernoulli_distribution coin(0.5);
                for (std::size_t i = 0; i < idx.size(); ++i) flips[i] = coin(rng);
            }
            const Batch b = make_batch(train_set, idx, &flips);
            Tape tape;
            const Tensor logits = net.forward(&tape, b.images, true).logits;
            const Tensor loss = softmax_cross_entropy(&tape, logits, b.labels);
            if (!std::isfinite(loss.item()))
                throw Error("training diverged: non-finite loss at epoch " + std::to_string(e + 1) + " (lr " +
                            std::to_string(lr) + ")");
            tape.backward(loss);
            clip_grad_norm(params, cfg.grad_clip);
            opt.step(params);
            loss_sum += loss.item() * static_cast<double>(idx.size());
            acc_sum += batch_accuracy(logits, b.labels) * static_cast<double>(idx.size());
            seen += idx.size();
        }
        const auto scores = net.predict(val_set, cfg.batch_size);
        const auto labels = val_set.labels();
        double val_loss = 0;
        for (std::size_t i = 0; i < scores.size(); ++i)
            val_loss -= std::log(std::max(1e-300, labels[i] ? scores[i] : 1 - scores[i]));
        val_loss /= static_cast<double>(scores.size());
        const double val_auc = auc(scores, labels);
        result.curves["lr"].push_back(lr);
        result.curves["train_loss"].push_back(loss_sum / static_cast<double>(seen));
        result.curves["train_acc"].push_back(acc_sum / static_cast<double>(seen));
        result.curves["val_loss"].push_back(val_loss);
        result.curves["val_acc"].push_back(accuracy(scores, labels));
        result.curves["val_auc"].push_back(val_auc);
        if (val_auc > result.best_val_auc) {
            result.best_val_auc = val_auc;
            result.best_epoch = e + 1;
            best = detail::snapshot(net);
        }
        if (on_epoch) on_epoch(e + 1, result);
    }
    detail::restore(net, best);
    return result;
}

inline MetricsReport evaluate(DetectionNet& net, const Dataset& test_set, std::size_t batch_size = 48,
                              std::string config_fingerprint = "", std::uint64_t seed = 0) {
    if (test_set.size() == 0) throw Error("evaluate: empty test set");
    const auto scores = net.predict(test_set, batch_size);
    const auto labels = test_set.labels();
    MetricsReport r;
    r.acc = accuracy(scores, labels);
    r.auc = auc(scores, labels);  // throws on a single-class set
    r.n_samples = scores.size();
    r.config_fingerprint = std::move(config_fingerprint);
    r.seed = seed;
    return r;
}

struct ActivationMap {
    std::size_t height = 0, width = 0;
    std::vector<double> values;  // row-major, in [0, 1]
    bool degenerate = false;     // the map was identically zero before normalization
    int predicted_class = 0;

    // Mass-weighted mean position (x, y) in pixel units; image center if empty.
    std::pair<double, double> center_of_gravity() const {
        double m = 0, sx = 0, sy = 0;
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x) {
                const double v = values[y * width + x];
                m += v;
                sx += v * (static_cast<double>(x) + 0.5);
                sy += v * (static_cast<double>(y) + 0.5);
            }
        if (m <= 0) return {static_cast<double>(width) / 2, static_cast<double>(height) / 2};
        return {sx / m, sy / m};
    }

    // 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    int quadrant() const {
        const auto [cx, cy] = center_of_gravity();
        return (cy >= static_cast<double>(height) / 2 ? 2 : 0) + (cx >= static_cast<double>(width) / 2 ? 1 : 0);
    }
};

// Gradient-weighted class activation of the predicted class on the deepest
// reduction output, min-max normalized, then bilinearly upsampled to the image.
inline ActivationMap activation_map(DetectionNet& net, const Tensor& image) {
    detail::require_rank(image, 3, "activation map image");
    const std::size_t h = image.dim(1), w = image.dim(2);
    Tensor x(std::vector<std::size_t>{1, 3, h, w}, std::vector<real>(image.data().begin(), image.data().end()), true);
    auto params = net.parameters();
    set_requires_grad(params, false);
    Tape tape;
    DetectionNet::Output out;
    try {
        out = net.forward(&tape, x, false);
    } catch (...) {
        set_requires_grad(params, true);
        throw;
    }
    const int cls = out.logits[1] > out.logits[0] ? 1 : 0;
    tape.backward(pick(&tape, out.logits, static_cast<std::size_t>(cls)));
    set_requires_grad(params, true);
    const Tensor& a = out.taps.back();
    const std::size_t c = a.dim(1), fh = a.dim(2), fw = a.dim(3), plane = fh * fw;
    std::vector<double> cam(plane, 0.0);
    const auto g = a.grad();
    for (std::size_t k = 0; k < c; ++k) {
        double wk = 0;
        for (std::size_t p = 0; p < plane; ++p) wk += g[k * plane + p];
        wk /= static_cast<double>(plane);
        for (std::size_t p = 0; p < plane; ++p) cam[p] += wk * a[k * plane + p];
    }
    for (auto& v : cam) v = std::max(0.0, v);
    const auto [lo, hi] = std::minmax_element(cam.begin(), cam.end());
    ActivationMap m;
    m.height = h;
    m.width = w;
    m.predicted_class = cls;
    const double mn = *lo, mx = *hi;
    if (mx <= 0) {
        m.degenerate = true;
        m.values.assign(h * w, 0.0);
        return m;
    }
    for (auto& v : cam) v = mx > mn ? (v - mn) / (mx - mn) : 1.0;
    std::vector<real> small(cam.begin(), cam.end());
    const auto big = resize_bilinear(small, 1, fh, fw, h, w);
    m.values.assign(big.begin(), big.end());
    for (auto& v : m.values) v = std::clamp(v, 0.0, 1.0);
    return m;
}

inline void write_heatmap(const std::string& path, const ActivationMap& m) {
    std::vector<real> v(m.values.begin(), m.values.end());
    write_pgm(path, v, m.height, m.width);
}

// ---------------------------------------------------------------- checkpoint

namespace detail {
inline constexpr char kWeightsMagic[8] = {'F', 'N', 'A', 'S', 'C', '2', 'P', 'N'};
inline constexpr std::uint32_t kWeightsVersion = 1;
}  // namespace detail

inline void save_weights(DetectionNet& net, const TrainConfig& cfg, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write weights '" + path + "'");
    os.write(detail::kWeightsMagic, sizeof detail::kWeightsMagic);
    detail::put(os, detail::kWeightsVersion);
    detail::put_string(os, genotype_to_string(net.genotype()));
    detail::put_string(os, cfg.to_json().dump());
    const auto params = net.parameters();
    detail::put_tensors(os, params);
    const auto stats = net.running_stats();
    detail::put<std::uint64_t>(os, stats.size());
    for (const auto* s : stats) {
        detail::put<std::uint64_t>(os, s->mean.size());
        for (std::size_t i = 0; i < s->mean.size(); ++i) {
            detail::put<double>(os, s->mean[i]);
            detail::put<double>(os, s->var[i]);
        }
    }
    if (!os) throw Error("weights write failed for '" + path + "'");
}

struct LoadedNet {
    DetectionNet net;
    TrainConfig config;
};

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.at("epochs");
    c.batch_size = j.at("batch_size");
    c.input_size = j.at("input_size");
    c.init_channels = j.at("init_channels");
    c.cell_groups = j.at("cell_groups");
    c.lr = j.at("lr");
    c.momentum = j.at("momentum");
    c.weight_decay = j.at("weight_decay");
    c.grad_clip = j.at("grad_clip");
    c.cosine = j.at("cosine");
    c.flip = j.at("flip");
    c.pyramid = j.at("pyramid");
    c.seed = j.at("seed");
    return c;
}

inline LoadedNet load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open weights '" + path + "'");
    char magic[8];
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, detail::kWeightsMagic, sizeof magic) != 0)
        throw Error("'" + path + "' is not a detection-net weights file");
    if (detail::get<std::uint32_t>(is) != detail::kWeightsVersion)
        throw Error("weights '" + path + "' have an unsupported version");
    const Genotype g = genotype_from_string(detail::get_string(is));
    TrainConfig cfg;
    try {
        cfg = train_config_from_json(nlohmann::json::parse(detail::get_string(is)));
    } catch (const nlohmann::json::exception& e) {
        throw Error("weights '" + path + "': bad config block: " + e.what());
    }
    LoadedNet out{DetectionNet(g, cfg, 0), cfg};
    auto params = out.net.parameters();
    detail::get_tensors(is, params);
    auto stats = out.net.running_stats();
    if (detail::get<std::uint64_t>(is) != stats.size()) throw Error("weights '" + path + "': statistics count mismatch");
    for (auto* s : stats) {
        if (detail::get<std::uint64_t>(is) != s->mean.size()) throw Error("weights '" + path + "': statistics size mismatch");
        for (std::size_t i = 0; i < s->mean.size(); ++i) {
            s->mean[i] = static_cast<real>(detail::get<double>(is));
            s->var[i] = static_cast<real>(detail::get<double>(is));
        }
    }
    return out;
}

}  // namespace fnas
