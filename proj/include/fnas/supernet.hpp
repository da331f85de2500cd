#pragma once

// Differentiable search network: groups of (normal, normal, reduction) cells,
// each a 7-node DAG whose 14 edges carry a mixed operation over the registry.
// Architecture logits are shared by all cells of the same kind.

#include <fnas/estimator.hpp>

namespace fnas {

enum class CellKind { normal = 0, reduction = 1 };

// Sampled channel subset of one edge for one forward pass.
struct ChannelMask {
    std::size_t channels = 0;
    std::vector<std::size_t> idx;  // ascending

    static std::size_t sampled_count(std::size_t channels, double rate) {
        if (!(rate > 0 && rate <= 1)) throw Error("channel sampling rate must lie in (0, 1]");
        const auto k = static_cast<std::size_t>(std::llround(rate * static_cast<double>(channels)));
        return std::clamp<std::size_t>(k, 1, channels);
    }
    static ChannelMask sample(std::size_t channels, double rate, Rng& rng) {
        return {channels, sample_indices(channels, sampled_count(channels, rate), rng)};
    }
    static ChannelMask full(std::size_t channels) {
        ChannelMask m{channels, std::vector<std::size_t>(channels)};
        std::iota(m.idx.begin(), m.idx.end(), std::size_t{0});
        return m;
    }
    bool is_full() const { return idx.size() == channels; }
};

// sum_k w_k * op_k(x restricted to the mask) on the sampled channels; the other
// channels pass through (stride 1) or are 2x2 average pooled (stride 2).
// `ops` is indexed by registry position; `weights` follows alive_indices().
inline Tensor mixed_op_forward(Tape* tape, const Tensor& x, std::vector<LayerStack>& ops, const EdgeState& edge,
                               int stride, const ChannelMask& mask, const Tensor& weights) {
    const auto alive = edge.alive_indices();
    if (alive.empty()) throw Error("mixed op: edge has no alive operation");
    if (weights.numel() != alive.size()) throw Error("mixed op: importance weights do not match alive ops");
    if (mask.channels != x.dim(1)) throw Error("mixed op: mask does not match input channels");
    const bool full = mask.is_full();
    const Tensor xs = full ? x : index_select(tape, x, 1, mask.idx);
    const std::span<const std::size_t> sub = full ? std::span<const std::size_t>{} : std::span<const std::size_t>(mask.idx);
    std::vector<Tensor> outs;
    for (auto o : alive) outs.push_back(ops.at(o).forward(tape, xs, true, sub));
    Tensor ys = weighted_sum(tape, outs, weights);
    if (full) return ys;
    const Tensor bypass = stride == 1 ? x : avg_pool2d(tape, x, 2, 2, 0);
    return scatter_channels(tape, bypass, ys, mask.idx);
}

// sum_i softmax(beta)_i * parts[i] over a node's incoming edges.
inline Tensor node_forward(Tape* tape, const std::vector<Tensor>& parts, const std::vector<const EdgeState*>& edges) {
    if (parts.empty()) throw Error("node forward: no predecessors");
    if (parts.size() != edges.size()) throw Error("node forward: one edge per predecessor required");
    std::vector<Tensor> betas;
    for (const auto* e : edges) betas.push_back(e->beta);
    return weighted_sum(tape, parts, softmax(tape, concat1d(tape, betas)));
}

struct SupernetConfig {
    std::size_t init_channels = 16;
    std::size_t cell_groups = 2;  // each group is (normal, normal, reduction)
    std::size_t num_classes = 2;
    double lambda = kDefaultLambda;
};

// Replaces one edge (in every cell of `kind`) by a single full-channel op.
struct ProbeOverride {
    CellKind kind = CellKind::normal;
    std::size_t edge = 0;
    std::size_t op = 0;
};

struct SearchCell {
    CellKind kind = CellKind::normal;
    bool reduction_prev = false;
    std::size_t channels = 0;  // per intermediate node
    LayerStack pre0, pre1;
    std::vector<std::vector<LayerStack>> ops;  // [edge][registry op]
};

class Supernet {
public:
    Supernet(OperatorRegistry registry, SupernetConfig cfg, std::uint64_t init_seed)
        : registry_(std::move(registry)), cfg_(cfg) {
        if (cfg_.init_channels < 2) throw Error("supernet: init_channels must be >= 2");
        if (cfg_.cell_groups < 1) throw Error("supernet: need at least one cell group");
        Rng rng(stream_seed(init_seed, 1));
        const LayerOptions lo{false, false};
        for (auto kind : {CellKind::normal, CellKind::reduction}) {
            auto& es = edges_[static_cast<int>(kind)];
            for (std::size_t node = 2; node < 2 + kCellSteps; ++node)
                for (std::size_t i = 0; i < node; ++i) es.emplace_back(i, node, registry_.size());
        }
        std::size_t c = cfg_.init_channels;
        stem_ = make_stem(3, c, lo, rng);
        std::size_t c_pp = c, c_p = c;
        bool red_prev = false;
        for (std::size_t g = 0; g < cfg_.cell_groups; ++g)
            for (int pos = 0; pos < 3; ++pos) {
                SearchCell cell;
                cell.kind = pos == 2 ? CellKind::reduction : CellKind::normal;
                if (cell.kind == CellKind::reduction) c *= 2;
                cell.channels = c;
                cell.reduction_prev = red_prev;
                cell.pre0 = red_prev ? make_factorized_reduce(c_pp, c, lo, rng) : make_relu_conv_bn(c_pp, c, lo, rng);
                cell.pre1 = make_relu_conv_bn(c_p, c, lo, rng);
                for (std::size_t e = 0; e < kCellEdges; ++e) {
                    const int stride = cell.kind == CellKind::reduction && edges_[0][e].from < 2 ? 2 : 1;
                    std::vector<LayerStack> ops;
                    for (std::size_t o = 0; o < registry_.size(); ++o)
                        ops.push_back(instantiate(registry_.kind(o), c, stride, lo, rng));
                    cell.ops.push_back(std::move(ops));
                }
                cells_.push_back(std::move(cell));
                c_pp = c_p;
                c_p = kCellSteps * c;
                red_prev = pos == 2;
            }
        head_w_ = uniform_init({cfg_.num_classes, c_p}, real(1) / std::sqrt(static_cast<real>(c_p)), rng);
        head_b_ = Tensor::zeros({cfg_.num_classes}, true);
        std::normal_distribution<double> noise(0, 1e-3);
        for (auto& es : edges_)
            for (auto& e : es) {
                for (auto& v : e.alpha.mutable_data()) v = static_cast<real>(noise(rng));
                e.beta.mutable_data()[0] = static_cast<real>(noise(rng));
            }
    }

    const OperatorRegistry& registry() const { return registry_; }
    const SupernetConfig& config() const { return cfg_; }
    std::vector<EdgeState>& edges(CellKind k) { return edges_[static_cast<int>(k)]; }
    const std::vector<EdgeState>& edges(CellKind k) const { return edges_[static_cast<int>(k)]; }
    std::vector<SearchCell>& cells() { return cells_; }
    const std::vector<SearchCell>& cells() const { return cells_; }
    std::size_t reductions() const { return cfg_.cell_groups; }

    static int edge_stride(const SearchCell& cell, const EdgeState& e) {
        return cell.kind == CellKind::reduction && e.from < 2 ? 2 : 1;
    }

    // Logits [N, classes]. Masks are drawn from mask_rng at `sample_rate`, one
    // per edge per cell, in cell then edge order.
    Tensor forward(Tape* tape, const Tensor& images, Rng& mask_rng, double sample_rate,
                   const ProbeOverride* probe = nullptr) {
        return forward_features(tape, images, mask_rng, sample_rate, probe).logits;
    }

    struct Features {
        Tensor logits;
        std::vector<Tensor> cell_outputs;
    };

    Features forward_features(Tape* tape, const Tensor& images, Rng& mask_rng, double sample_rate,
                              const ProbeOverride* probe = nullptr) {
        detail::require_rank(images, 4, "supernet input");
        const std::size_t div = std::size_t{1} << cfg_.cell_groups;
        if (images.dim(1) != 3) throw Error("supernet: expected 3 input channels, got " + to_string(images.shape()));
        if (images.dim(2) % div != 0 || images.dim(3) % div != 0)
            throw Error("supernet: spatial size " + to_string(images.shape()) + " not divisible by " + std::to_string(div));
        std::array<std::vector<Tensor>, 2> weights;
        for (int k = 0; k < 2; ++k)
            for (const auto& e : edges_[k]) weights[k].push_back(importance_tensor(tape, e, cfg_.lambda));
        Features f;
        Tensor s0 = stem_.forward(tape, images, true);
        Tensor s1 = s0;
        for (auto& cell : cells_) {
            Tensor out = cell_forward(tape, cell, s0, s1, weights[static_cast<int>(cell.kind)], mask_rng, sample_rate, probe);
            s0 = s1;
            s1 = out;
            f.cell_outputs.push_back(out);
        }
        f.logits = linear(tape, global_avg_pool(tape, s1), head_w_, &head_b_);
        return f;
    }

    // Network weights of alive ops (stem, cells, head), in a fixed order.
    std::vector<Tensor> weights() const {
        std::vector<Tensor> out = stem_.parameters();
        for (const auto& cell : cells_) {
            append(out, cell.pre0.parameters());
            append(out, cell.pre1.parameters());
            const auto& es = edges_[static_cast<int>(cell.kind)];
            for (std::size_t e = 0; e < kCellEdges; ++e)
                for (auto o : es[e].alive_indices()) append(out, cell.ops[e][o].parameters());
        }
        out.push_back(head_w_);
        out.push_back(head_b_);
        return out;
    }

    // Every weight tensor including pruned ops, for checkpoints.
    std::vector<Tensor> all_weights() const {
        std::vector<Tensor> out = stem_.parameters();
        for (const auto& cell : cells_) {
            append(out, cell.pre0.parameters());
            append(out, cell.pre1.parameters());
            for (const auto& ops : cell.ops)
                for (const auto& op : ops) append(out, op.parameters());
        }
        out.push_back(head_w_);
        out.push_back(head_b_);
        return out;
    }

    // Parameters of pruned ops only.
    std::vector<Tensor> dead_weights() const {
        std::vector<Tensor> out;
        for (const auto& cell : cells_) {
            const auto& es = edges_[static_cast<int>(cell.kind)];
            for (std::size_t e = 0; e < kCellEdges; ++e)
                for (std::size_t o = 0; o < registry_.size(); ++o)
                    if (!es[e].alive[o]) append(out, cell.ops[e][o].parameters());
        }
        return out;
    }

    // alpha then beta for every edge, normal cells first.
    std::vector<Tensor> arch() const {
        std::vector<Tensor> out;
        for (const auto& es : edges_)
            for (const auto& e : es) out.push_back(e.alpha);
        for (const auto& es : edges_)
            for (const auto& e : es) out.push_back(e.beta);
        return out;
    }

    Genotype discretize(nlohmann::json meta = nlohmann::json::object()) const {
        return fnas::discretize(edges_[0], edges_[1], registry_, cfg_.lambda, std::move(meta));
    }

private:
    static void append(std::vector<Tensor>& a, std::vector<Tensor> b) {
        a.insert(a.end(), std::make_move_iterator(b.begin()), std::make_move_iterator(b.end()));
    }

    Tensor cell_forward(Tape* tape, SearchCell& cell, const Tensor& s0, const Tensor& s1,
                        const std::vector<Tensor>& weights, Rng& mask_rng, double rate, const ProbeOverride* probe) {
        auto& es = edges_[static_cast<int>(cell.kind)];
        std::vector<Tensor> states = {cell.pre0.forward(tape, s0, true), cell.pre1.forward(tape, s1, true)};
        for (std::size_t node = 2; node < 2 + kCellSteps; ++node) {
            std::vector<Tensor> parts;
            std::vector<const EdgeState*> in;
            for (std::size_t i = 0; i < node; ++i) {
                const std::size_t e = edge_index(i, node);
                const int stride = edge_stride(cell, es[e]);
                const ChannelMask mask = ChannelMask::sample(cell.channels, rate, mask_rng);
                if (probe && probe->kind == cell.kind && probe->edge == e)
                    parts.push_back(cell.ops[e].at(probe->op).forward(tape, states[i], true));
                else
                    parts.push_back(mixed_op_forward(tape, states[i], cell.ops[e], es[e], stride, mask, weights[e]));
                in.push_back(&es[e]);
            }
            states.push_back(node_forward(tape, parts, in));
        }
        return concat_channels(tape, {states.begin() + 2, states.end()});
    }

    OperatorRegistry registry_;
    SupernetConfig cfg_;
    LayerStack stem_;
    std::vector<SearchCell> cells_;
    std::array<std::vector<EdgeState>, 2> edges_;
    Tensor head_w_, head_b_;
};

}  // namespace fnas
