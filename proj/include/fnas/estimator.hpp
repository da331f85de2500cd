#pragma once

// Per-edge search state and the scores derived from it: generalization score
// E, importance I = softmax(alpha) + lambda * E, edge-op score H, pruning and
// discretization into a Genotype.

#include <fnas/forgery_ops.hpp>

#include <json.hpp>

#include <deque>

namespace fnas {

inline constexpr std::size_t kProbeWindow = 5;
inline constexpr double kDiffFloor = 1e-3;
inline constexpr double kDefaultLambda = 0.15;

struct EdgeState {
    std::size_t from = 0, to = 0;  // node indices, from < to
    std::vector<bool> alive;       // per registry op
    Tensor alpha;                  // [R]
    Tensor beta;                   // [1]
    std::vector<std::deque<double>> err_search, err_eval;  // per op, newest last

    EdgeState() = default;
    EdgeState(std::size_t i, std::size_t j, std::size_t ops)
        : from(i), to(j), alive(ops, true), alpha(Tensor::zeros({ops}, true)), beta(Tensor::zeros({1}, true)),
          err_search(ops), err_eval(ops) {}

    std::size_t num_ops() const { return alive.size(); }
    std::size_t alive_count() const { return static_cast<std::size_t>(std::count(alive.begin(), alive.end(), true)); }
    std::vector<std::size_t> alive_indices() const {
        std::vector<std::size_t> out;
        for (std::size_t o = 0; o < alive.size(); ++o)
            if (alive[o]) out.push_back(o);
        return out;
    }

    // Appends one probe pair for op o, evicting beyond the window.
    void record_probe(std::size_t o, double search_error, double eval_error) {
        if (!(search_error >= 0 && search_error <= 1 && eval_error >= 0 && eval_error <= 1))
            throw Error("probe errors must lie in [0, 1]");
        err_search.at(o).push_back(search_error);
        err_eval.at(o).push_back(eval_error);
        if (err_search[o].size() > kProbeWindow) {
            err_search[o].pop_front();
            err_eval[o].pop_front();
        }
    }

    bool has_probes() const {
        for (auto o : alive_indices())
            if (err_search[o].empty()) return false;
        return true;
    }

    // Deep copy (fresh alpha/beta storage).
    EdgeState clone() const {
        EdgeState e = *this;
        e.alpha = Tensor(alpha.shape(), std::vector<real>(alpha.data().begin(), alpha.data().end()), alpha.requires_grad());
        e.beta = Tensor(beta.shape(), std::vector<real>(beta.data().begin(), beta.data().end()), beta.requires_grad());
        return e;
    }
};

namespace detail {

inline void require_alive(const EdgeState& e) {
    if (e.alive_count() == 0) throw Error("edge (" + std::to_string(e.from) + "," + std::to_string(e.to) + ") has no alive operation");
}

// Max-stabilized softmax of v over the positions in idx; others 0.
inline std::vector<double> masked_softmax(const std::vector<double>& v, const std::vector<std::size_t>& idx) {
    std::vector<double> out(v.size(), 0.0);
    double m = -std::numeric_limits<double>::infinity();
    for (auto i : idx) m = std::max(m, v[i]);
    double s = 0;
    for (auto i : idx) s += (out[i] = std::exp(v[i] - m));
    for (auto i : idx) out[i] /= s;
    return out;
}

}  // namespace detail

// Window minimum of |search - eval| per alive op, clamped below at kDiffFloor.
inline std::vector<double> probe_distances(const EdgeState& e) {
    detail::require_alive(e);
    std::vector<double> d(e.num_ops(), 0.0);
    for (auto o : e.alive_indices()) {
        if (e.err_search[o].empty())
            throw Error("generalization score: op " + std::to_string(o) + " on edge (" + std::to_string(e.from) + "," +
                        std::to_string(e.to) + ") has an empty probe window");
        double m = std::numeric_limits<double>::infinity();
        for (std::size_t t = 0; t < e.err_search[o].size(); ++t)
            m = std::min(m, std::abs(e.err_search[o][t] - e.err_eval[o][t]));
        d[o] = std::max(m, kDiffFloor);
    }
    return d;
}

// E over registry positions (dead ops 0): softmax over alive ops of 1/d.
inline std::vector<double> generalization_score(const EdgeState& e) {
    const auto d = probe_distances(e);
    std::vector<double> inv(d.size(), 0.0);
    for (auto o : e.alive_indices()) inv[o] = 1.0 / d[o];
    return detail::masked_softmax(inv, e.alive_indices());
}

// E, or uniform over alive ops while no probes have been recorded.
inline std::vector<double> generalization_score_or_uniform(const EdgeState& e) {
    if (e.has_probes()) return generalization_score(e);
    detail::require_alive(e);
    std::vector<double> u(e.num_ops(), 0.0);
    for (auto o : e.alive_indices()) u[o] = 1.0 / static_cast<double>(e.alive_count());
    return u;
}

inline std::vector<double> alpha_softmax(const EdgeState& e) {
    detail::require_alive(e);
    std::vector<double> a(e.alpha.data().begin(), e.alpha.data().end());
    return detail::masked_softmax(a, e.alive_indices());
}

// I over registry positions (dead ops 0); sums to 1 + lambda.
inline std::vector<double> importance(const EdgeState& e, double lambda = kDefaultLambda) {
    const auto a = alpha_softmax(e);
    const auto g = lambda == 0 ? std::vector<double>(e.num_ops(), 0.0) : generalization_score_or_uniform(e);
    std::vector<double> out(e.num_ops(), 0.0);
    for (auto o : e.alive_indices()) out[o] = a[o] + lambda * g[o];
    return out;
}

// Differentiable I over alive ops (in alive_indices order), for mixed ops.
inline Tensor importance_tensor(Tape* tape, const EdgeState& e, double lambda = kDefaultLambda) {
    const auto idx = e.alive_indices();
    detail::require_alive(e);
    Tensor a = softmax(tape, index_select(tape, e.alpha, 0, idx));
    if (lambda == 0) return a;
    const auto g = generalization_score_or_uniform(e);
    std::vector<real> c;
    for (auto o : idx) c.push_back(static_cast<real>(lambda * g[o]));
    return add_const(tape, a, c);
}

// softmax over beta of a node's incoming edges (in the given order).
inline std::vector<double> edge_weights(const std::vector<const EdgeState*>& incoming) {
    if (incoming.empty()) throw Error("edge weights: node has no incoming edge");
    std::vector<double> b;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < incoming.size(); ++i) {
        b.push_back(incoming[i]->beta[0]);
        idx.push_back(i);
    }
    return detail::masked_softmax(b, idx);
}

// H[k][o] = softmax_beta(k) * I^o for the node's incoming edges k.
inline std::vector<std::vector<double>> edge_op_score(const std::vector<const EdgeState*>& incoming,
                                                      double lambda = kDefaultLambda) {
    const auto w = edge_weights(incoming);
    std::vector<std::vector<double>> h;
    for (std::size_t k = 0; k < incoming.size(); ++k) {
        auto imp = importance(*incoming[k], lambda);
        for (auto& v : imp) v *= w[k];
        h.push_back(std::move(imp));
    }
    return h;
}

// Kills the two alive ops with the lowest importance (ties: later registry
// position first). No-op below three alive ops. Returns the pruned positions.
inline std::vector<std::size_t> prune(EdgeState& e, double lambda = kDefaultLambda) {
    if (e.alive_count() < 3) return {};
    const auto imp = importance(e, lambda);
    auto idx = e.alive_indices();
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (imp[a] != imp[b]) return imp[a] < imp[b];
        return a > b;
    });
    std::vector<std::size_t> removed = {idx[0], idx[1]};
    for (auto o : removed) e.alive[o] = false;
    std::sort(removed.begin(), removed.end());
    return removed;
}

// ---------------------------------------------------------------- genotype

inline constexpr std::size_t kCellSteps = 4;

// Edge index of (from -> node) in a cell whose intermediate nodes are 2..5.
inline std::size_t edge_index(std::size_t from, std::size_t node) {
    if (node < 2 || node >= 2 + kCellSteps || from >= node) throw Error("edge_index: invalid edge");
    std::size_t base = 0;
    for (std::size_t j = 2; j < node; ++j) base += j;
    return base + from;
}

inline constexpr std::size_t kCellEdges = 2 + 3 + 4 + 5;

struct GenePair {
    std::string op;
    std::size_t pred = 0;
    bool operator==(const GenePair&) const = default;
};

// Pairs 2k and 2k+1 feed intermediate node k + 2.
struct Genotype {
    static constexpr int schema_version = 1;
    std::vector<std::string> registry;
    std::vector<GenePair> normal, reduction;
    nlohmann::json meta = nlohmann::json::object();

    bool operator==(const Genotype& o) const {
        return registry == o.registry && normal == o.normal && reduction == o.reduction && meta == o.meta;
    }
};

inline void validate(const Genotype& g) {
    OperatorRegistry reg(g.registry);
    for (const auto* cell : {&g.normal, &g.reduction}) {
        if (cell->size() != 2 * kCellSteps)
            throw Error("genotype: expected " + std::to_string(2 * kCellSteps) + " pairs per cell, got " +
                        std::to_string(cell->size()));
        for (std::size_t k = 0; k < cell->size(); ++k) {
            const auto& p = (*cell)[k];
            const std::size_t node = 2 + k / 2;
            if (p.pred >= node)
                throw Error("genotype: node " + std::to_string(node) + " has predecessor " + std::to_string(p.pred));
            if (!reg.index_of(p.op)) throw Error("genotype: operation '" + p.op + "' is not in the registry");
        }
        for (std::size_t k = 0; k < cell->size(); k += 2)
            if ((*cell)[k].pred == (*cell)[k + 1].pred)
                throw Error("genotype: node " + std::to_string(2 + k / 2) + " repeats predecessor " +
                            std::to_string((*cell)[k].pred));
    }
    if (!g.meta.is_object()) throw Error("genotype: meta must be an object");
}

inline std::string genotype_to_string(const Genotype& g) {
    validate(g);
    auto cell = [](const std::vector<GenePair>& c) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& p : c) a.push_back(nlohmann::json::array({p.op, p.pred}));
        return a;
    };
    nlohmann::json j;
    j["schema_version"] = Genotype::schema_version;
    j["registry"] = g.registry;
    j["normal"] = cell(g.normal);
    j["reduction"] = cell(g.reduction);
    j["meta"] = g.meta;
    return j.dump();
}

inline Genotype genotype_from_string(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("genotype: malformed document: ") + e.what());
    }
    Genotype g;
    try {
        if (j.at("schema_version").get<int>() != Genotype::schema_version)
            throw Error("genotype: unsupported schema version " + j.at("schema_version").dump());
        g.registry = j.at("registry").get<std::vector<std::string>>();
        auto cell = [](const nlohmann::json& a) {
            std::vector<GenePair> out;
            for (const auto& p : a) {
                if (!p.is_array() || p.size() != 2) throw Error("genotype: pair must be [op, predecessor]");
                out.push_back({p[0].get<std::string>(), p[1].get<std::size_t>()});
            }
            return out;
        };
        g.normal = cell(j.at("normal"));
        g.reduction = cell(j.at("reduction"));
        g.meta = j.at("meta");
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("genotype: ") + e.what());
    }
    validate(g);
    return g;
}

// Per node: the two incoming edges with the largest max_o H (ties: lower
// predecessor), each with its argmax op (ties: registry order).
inline std::vector<GenePair> discretize_cell(const std::vector<EdgeState>& edges, const OperatorRegistry& reg,
                                             double lambda = kDefaultLambda) {
    if (edges.size() != kCellEdges) throw Error("discretize: a cell has " + std::to_string(kCellEdges) + " edges");
    std::vector<GenePair> out;
    for (std::size_t node = 2; node < 2 + kCellSteps; ++node) {
        std::vector<const EdgeState*> in;
        for (std::size_t i = 0; i < node; ++i) in.push_back(&edges[edge_index(i, node)]);
        const auto h = edge_op_score(in, lambda);
        std::vector<std::pair<double, std::size_t>> best;  // (score, best op) per predecessor
        for (std::size_t i = 0; i < node; ++i) {
            std::size_t arg = 0;
            double m = -1;
            for (auto o : in[i]->alive_indices())
                if (h[i][o] > m) m = h[i][o], arg = o;
            best.emplace_back(m, arg);
        }
        std::vector<std::size_t> order(node);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return best[a].first > best[b].first; });
        std::size_t p0 = std::min(order[0], order[1]), p1 = std::max(order[0], order[1]);
        out.push_back({reg.name(best[p0].second), p0});
        out.push_back({reg.name(best[p1].second), p1});
    }
    return out;
}

inline Genotype discretize(const std::vector<EdgeState>& normal, const std::vector<EdgeState>& reduction,
                           const OperatorRegistry& reg, double lambda = kDefaultLambda,
                           nlohmann::json meta = nlohmann::json::object()) {
    Genotype g;
    g.registry = reg.names();
    g.normal = discretize_cell(normal, reg, lambda);
    g.reduction = discretize_cell(reduction, reg, lambda);
    g.meta = std::move(meta);
    validate(g);
    return g;
}

// A uniformly random valid genotype over the registry.
inline Genotype random_genotype(const OperatorRegistry& reg, Rng& rng) {
    Genotype g;
    g.registry = reg.names();
    for (auto* cell : {&g.normal, &g.reduction})
        for (std::size_t node = 2; node < 2 + kCellSteps; ++node) {
            auto preds = sample_indices(node, 2, rng);
            for (auto p : preds) {
                std::uniform_int_distribution<std::size_t> op(0, reg.size() - 1);
                cell->push_back({reg.name(op(rng)), p});
            }
        }
    return g;
}

}  // namespace fnas
