#pragma once

// Bilevel search driver. In-dataset mode alternates architecture steps on one
// half of the data with weight steps on the other; cross-dataset mode adapts
// the shared weights on source domains and updates them (and the
// architecture) on a held-out target domain.

#include <fnas/datasets.hpp>
#include <fnas/optim.hpp>
#include <fnas/supernet.hpp>

#include <functional>
#include <tuple>

namespace fnas {

enum class RateUpdate { double_sampled, halve_sampled };

inline std::string rate_update_name(RateUpdate r) {
    return r == RateUpdate::double_sampled ? "double_sampled" : "halve_sampled";
}

inline RateUpdate parse_rate_update(const std::string& s) {
    if (s == "double_sampled") return RateUpdate::double_sampled;
    if (s == "halve_sampled") return RateUpdate::halve_sampled;
    throw Error("unknown rate_update '" + s + "' (expected double_sampled or halve_sampled)");
}

// Sampled proportion after a prune epoch.
inline double update_sample_rate(double rate, RateUpdate policy) {
    return policy == RateUpdate::double_sampled ? std::min(1.0, 2 * rate) : rate / 2;
}

struct SearchConfig {
    std::size_t epochs = 65;
    std::size_t warmup_epochs = 10;
    std::size_t prune_period = 20;
    std::size_t batch_size = 96;
    std::size_t init_channels = 16;
    std::size_t cell_groups = 2;
    double init_sample_rate = 1.0 / 8;
    RateUpdate rate_update = RateUpdate::double_sampled;
    double lambda = kDefaultLambda;

    double arch_lr = 6e-4;
    double arch_beta1 = 0.5;
    double arch_beta2 = 0.999;
    double arch_weight_decay = 1e-3;
    double weight_lr = 1e-3;
    double weight_weight_decay = 3e-4;

    std::size_t probe_batch = 32;
    std::size_t probe_interval = 1;  // epochs between probe rounds after warm-up

    // Cross-dataset search.
    std::size_t samples_per_domain = 2000;  // per-epoch pool drawn from each domain
    double inner_lr = 0.01;

    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw Error("search config: epochs must be >= 1");
        if (warmup_epochs > epochs) throw Error("search config: warmup_epochs must not exceed epochs");
        if (prune_period < 1) throw Error("search config: prune_period must be >= 1");
        if (batch_size < 2) throw Error("search config: batch_size must be >= 2");
        if (init_channels < 2) throw Error("search config: init_channels must be >= 2");
        if (cell_groups < 1) throw Error("search config: cell_groups must be >= 1");
        if (!(init_sample_rate > 0 && init_sample_rate <= 1)) throw Error("search config: init_sample_rate must lie in (0, 1]");
        if (probe_batch < 2) throw Error("search config: probe_batch must be >= 2");
        if (probe_interval < 1) throw Error("search config: probe_interval must be >= 1");
        if (samples_per_domain < 2) throw Error("search config: samples_per_domain must be >= 2");
        if (!(inner_lr >= 0)) throw Error("search config: inner_lr must be >= 0");
        if (!(lambda >= 0)) throw Error("search config: lambda must be >= 0");
    }

    nlohmann::json to_json() const {
        return {{"epochs", epochs},
                {"warmup_epochs", warmup_epochs},
                {"prune_period", prune_period},
                {"batch_size", batch_size},
                {"init_channels", init_channels},
                {"cell_groups", cell_groups},
                {"init_sample_rate", init_sample_rate},
                {"rate_update", rate_update_name(rate_update)},
                {"lambda", lambda},
                {"arch_lr", arch_lr},
                {"arch_beta1", arch_beta1},
                {"arch_beta2", arch_beta2},
                {"arch_weight_decay", arch_weight_decay},
                {"weight_lr", weight_lr},
                {"weight_weight_decay", weight_weight_decay},
                {"probe_batch", probe_batch},
                {"probe_interval", probe_interval},
                {"samples_per_domain", samples_per_domain},
                {"inner_lr", inner_lr},
                {"seed", seed}};
    }
};

inline std::uint64_t fingerprint_text(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// Fraction of rows whose argmax equals the label.
inline double batch_accuracy(const Tensor& logits, std::span<const int> labels) {
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t arg = 0;
        for (std::size_t j = 1; j < k; ++j)
            if (logits[i * k + j] > logits[i * k + arg]) arg = j;
        hit += static_cast<int>(arg) == labels[i];
    }
    return static_cast<double>(hit) / static_cast<double>(n);
}

// Consecutive chunks of size bs from a permutation; a trailing chunk smaller
// than 2 is dropped (batch statistics need two samples).
inline std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order, std::size_t bs) {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t s = 0; s < order.size(); s += bs) {
        const std::size_t e = std::min(order.size(), s + bs);
        if (e - s < 2) break;
        out.emplace_back(order.begin() + static_cast<long>(s), order.begin() + static_cast<long>(e));
    }
    return out;
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    std::shuffle(v.begin(), v.end(), rng);
    return v;
}

namespace detail {

template <class T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <class T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw Error("checkpoint: truncated file");
    return v;
}
inline void put_string(std::ostream& os, const std::string& s) {
    put<std::uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string get_string(std::istream& is) {
    const auto n = get<std::uint64_t>(is);
    if (n > (1ULL << 34)) throw Error("checkpoint: corrupt string length");
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw Error("checkpoint: truncated file");
    return s;
}
inline void put_tensors(std::ostream& os, std::span<const Tensor> ts) {
    put<std::uint64_t>(os, ts.size());
    for (const auto& t : ts) {
        put<std::uint64_t>(os, t.numel());
        for (real v : t.data()) put<double>(os, v);
    }
}
inline void get_tensors(std::istream& is, std::span<Tensor> ts) {
    if (get<std::uint64_t>(is) != ts.size()) throw Error("checkpoint: tensor count mismatch");
    for (auto& t : ts) {
        if (get<std::uint64_t>(is) != t.numel()) throw Error("checkpoint: tensor size mismatch");
        for (auto& v : t.mutable_data()) v = static_cast<real>(get<double>(is));
    }
}
inline std::string rng_state(const Rng& r) {
    std::ostringstream os;
    os << r;
    return os.str();
}
inline void set_rng_state(Rng& r, const std::string& s) {
    std::istringstream is(s);
    is >> r;
    if (!is) throw Error("checkpoint: corrupt random state");
}

inline constexpr char kCheckpointMagic[8] = {'F', 'N', 'A', 'S', 'S', 'R', 'C', 'H'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace detail

class SearchEngine {
public:
    // In-dataset search over `train` (split evenly); `val`, if given, is
    // evaluated once per epoch for the validation curve.
    SearchEngine(SearchConfig cfg, OperatorRegistry registry, const Dataset& train, std::optional<Dataset> val = std::nullopt)
        : cfg_(validated(cfg)), net_(registry, net_config(cfg), stream_seed(cfg.seed, 11)), val_(std::move(val)) {
        train.require_both_classes("search");
        auto halves = split_dataset(train, SplitSpec::even_half(), stream_seed(cfg_.seed, 12));
        search_split_ = std::move(halves[0]);
        eval_split_ = std::move(halves[1]);
        search_split_.require_both_classes("search split");
        eval_split_.require_both_classes("evaluation split");
        data_fingerprint_ = train.fingerprint() ^ (val_ ? val_->fingerprint() * 31 : 0);
        init_common();
    }

    // Cross-dataset search over K >= 2 domains.
    SearchEngine(SearchConfig cfg, OperatorRegistry registry, std::vector<Dataset> domains)
        : cfg_(validated(cfg)), net_(registry, net_config(cfg), stream_seed(cfg.seed, 11)), domains_(std::move(domains)) {
        if (domains_.size() < 2) throw Error("cross-dataset search needs at least 2 datasets, got " + std::to_string(domains_.size()));
        for (const auto& d : domains_) d.require_both_classes("cross-dataset search");
        for (const auto& d : domains_)
            if (d.height != domains_[0].height || d.width != domains_[0].width)
                throw Error("cross-dataset search: domains differ in image size");
        data_fingerprint_ = 0;
        for (const auto& d : domains_) data_fingerprint_ = data_fingerprint_ * 1099511628211ULL ^ d.fingerprint();
        init_common();
    }

    bool cross() const { return !domains_.empty(); }
    const SearchConfig& config() const { return cfg_; }
    Supernet& net() { return net_; }
    const Supernet& net() const { return net_; }
    std::size_t epoch() const { return epoch_; }
    bool finished() const { return epoch_ >= cfg_.epochs; }
    double sample_rate() const { return rate_; }
    const std::vector<nlohmann::json>& events() const { return events_; }
    const std::map<std::string, std::vector<double>>& curves() const { return curves_; }
    std::uint64_t data_fingerprint() const { return data_fingerprint_; }
    std::string config_fingerprint() const { return hex64(fingerprint_text(cfg_.to_json().dump())); }

    // Alive op count of every edge, normal cells first.
    std::vector<std::size_t> alive_counts() const {
        std::vector<std::size_t> out;
        for (auto k : {CellKind::normal, CellKind::reduction})
            for (const auto& e : net_.edges(k)) out.push_back(e.alive_count());
        return out;
    }

    void step_epoch() {
        if (finished()) throw Error("search: epoch budget exhausted");
        ++epoch_;
        if (cross())
            cross_epoch();
        else
            search_epoch();
        after_epoch();
    }

    void run(const std::function<void(const SearchEngine&)>& on_epoch = {}) {
        while (!finished()) {
            step_epoch();
            if (on_epoch) on_epoch(*this);
        }
    }

    Genotype genotype() const {
        nlohmann::json meta = {{"seed", cfg_.seed},
                               {"epochs", cfg_.epochs},
                               {"mode", cross() ? "cross_dataset" : "in_dataset"},
                               {"config", config_fingerprint()},
                               {"data", hex64(data_fingerprint_)}};
        return net_.discretize(std::move(meta));
    }

    std::string events_jsonl() const {
        std::string out;
        for (const auto& e : events_) out += e.dump() + "\n";
        return out;
    }

    void save_checkpoint(const std::string& path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw Error("cannot write checkpoint '" + path + "'");
        os.write(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic);
        detail::put(os, detail::kCheckpointVersion);
        detail::put_string(os, config_fingerprint());
        detail::put<std::uint64_t>(os, data_fingerprint_);
        detail::put<std::uint64_t>(os, epoch_);
        detail::put<double>(os, rate_);
        for (const Rng* r : {&data_rng_, &mask_rng_, &probe_rng_}) detail::put_string(os, detail::rng_state(*r));
        const auto all = net_.all_weights();
        detail::put_tensors(os, all);
        const auto arch = net_.arch();
        detail::put_tensors(os, arch);
        for (auto k : {CellKind::normal, CellKind::reduction})
            for (const auto& e : net_.edges(k)) {
                for (std::size_t o = 0; o < e.num_ops(); ++o) {
                    detail::put<char>(os, e.alive[o] ? 1 : 0);
                    detail::put<std::uint64_t>(os, e.err_search[o].size());
                    for (std::size_t t = 0; t < e.err_search[o].size(); ++t) {
                        detail::put<double>(os, e.err_search[o][t]);
                        detail::put<double>(os, e.err_eval[o][t]);
                    }
                }
            }
        weight_opt_.save(os, all);
        arch_opt_.save(os, arch);
        detail::put_string(os, events_jsonl());
        detail::put_string(os, nlohmann::json(curves_).dump());
        if (!os) throw Error("checkpoint write failed for '" + path + "'");
    }

    // The engine must have been built with the same config and data.
    void load_checkpoint(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw Error("cannot open checkpoint '" + path + "'");
        char magic[8];
        is.read(magic, sizeof magic);
        if (!is || std::memcmp(magic, detail::kCheckpointMagic, sizeof magic) != 0)
            throw Error("'" + path + "' is not a search checkpoint");
        if (detail::get<std::uint32_t>(is) != detail::kCheckpointVersion)
            throw Error("checkpoint '" + path + "' has an unsupported version");
        if (detail::get_string(is) != config_fingerprint()) throw Error("checkpoint '" + path + "' was written with a different config");
        if (detail::get<std::uint64_t>(is) != data_fingerprint_) throw Error("checkpoint '" + path + "' was written for different data");
        epoch_ = detail::get<std::uint64_t>(is);
        rate_ = detail::get<double>(is);
        for (Rng* r : {&data_rng_, &mask_rng_, &probe_rng_}) detail::set_rng_state(*r, detail::get_string(is));
        auto all = net_.all_weights();
        detail::get_tensors(is, all);
        auto arch = net_.arch();
        detail::get_tensors(is, arch);
        for (auto k : {CellKind::normal, CellKind::reduction})
            for (auto& e : net_.edges(k))
                for (std::size_t o = 0; o < e.num_ops(); ++o) {
                    e.alive[o] = detail::get<char>(is) != 0;
                    e.err_search[o].clear();
                    e.err_eval[o].clear();
                    const auto n = detail::get<std::uint64_t>(is);
                    if (n > kProbeWindow) throw Error("checkpoint: corrupt probe window");
                    for (std::uint64_t t = 0; t < n; ++t) {
                        e.err_search[o].push_back(detail::get<double>(is));
                        e.err_eval[o].push_back(detail::get<double>(is));
                    }
                }
        weight_opt_.load(is, all);
        arch_opt_.load(is, arch);
        events_.clear();
        std::istringstream lines(detail::get_string(is));
        for (std::string line; std::getline(lines, line);)
            if (!line.empty()) events_.push_back(nlohmann::json::parse(line));
        curves_ = nlohmann::json::parse(detail::get_string(is)).get<std::map<std::string, std::vector<double>>>();
    }

    // One weight (resp. architecture) Adam step on a batch; returns its loss and accuracy.
    std::pair<double, double> weight_step(const Batch& b) {
        auto w = net_.weights();
        auto a = net_.arch();
        auto r = loss_and_grad(b, w, a, mask_rng_);
        weight_opt_.step(w);
        return r;
    }

    std::pair<double, double> arch_step(const Batch& b) {
        auto w = net_.weights();
        auto a = net_.arch();
        auto r = loss_and_grad(b, a, w, mask_rng_);
        arch_opt_.step(a);
        return r;
    }

    struct CrossStepResult {
        double inner_loss = 0, inner_acc = 0;  // learner means on the target batch
        double arch_loss = 0, arch_acc = 0;
    };

    // One outer step of cross-dataset search; b[d] is domain d's batch. Each
    // source adapts the shared weights by one SGD step, the shared weights take
    // the mean target-batch gradient of the adapted learners, then the
    // architecture steps on the target batch. All learners share one mask draw.
    CrossStepResult cross_step(const std::vector<Batch>& b, std::size_t target, std::size_t t = 0) {
        const std::size_t k = b.size();
        if (k < 2 || target >= k) throw Error("cross_step: needs >= 2 batches and a target index below their count");
        auto name = [&](std::size_t d) { return d < domains_.size() ? domains_[d].name : "domain" + std::to_string(d); };
        const std::uint64_t target_masks = mask_rng_();
        auto w = net_.weights();
        auto a = net_.arch();
        std::vector<std::vector<real>> acc(w.size()), saved(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) {
            acc[i].assign(w[i].numel(), real(0));
            saved[i].assign(w[i].data().begin(), w[i].data().end());
        }
        CrossStepResult r;
        for (std::size_t s = 0; s < k; ++s) {
            if (s == target) continue;
            auto [ls, as] = loss_and_grad(b[s], w, a, mask_rng_);
            for (auto& p : w) {
                auto pd = p.mutable_data();
                auto g = p.mutable_grad();
                for (std::size_t j = 0; j < pd.size(); ++j) pd[j] -= static_cast<real>(cfg_.inner_lr) * g[j];
                std::fill(g.begin(), g.end(), real(0));
            }
            Rng tm(target_masks);
            auto [lt, at] = loss_and_grad(b[target], w, a, tm);
            for (std::size_t i = 0; i < w.size(); ++i) {
                auto g = w[i].mutable_grad();
                auto pd = w[i].mutable_data();
                for (std::size_t j = 0; j < g.size(); ++j) acc[i][j] += g[j];
                std::fill(g.begin(), g.end(), real(0));
                std::copy(saved[i].begin(), saved[i].end(), pd.begin());
            }
            r.inner_loss += lt / static_cast<double>(k - 1);
            r.inner_acc += at / static_cast<double>(k - 1);
            log({{"phase", "inner"}, {"split", name(s)}, {"target", name(target)}, {"step", t},
                 {"loss", lt}, {"acc", at}, {"source_loss", ls}, {"source_acc", as}});
        }
        const real inv = real(1) / static_cast<real>(k - 1);
        for (std::size_t i = 0; i < w.size(); ++i) {
            auto g = w[i].mutable_grad();
            for (std::size_t j = 0; j < g.size(); ++j) g[j] = acc[i][j] * inv;
        }
        weight_opt_.step(w);
        log({{"phase", "shared"}, {"split", name(target)}, {"step", t}, {"learners", k - 1}});
        std::tie(r.arch_loss, r.arch_acc) = arch_step(b[target]);
        log({{"phase", "arch"}, {"split", name(target)}, {"step", t}, {"loss", r.arch_loss}, {"acc", r.arch_acc}});
        return r;
    }

private:
    static SearchConfig validated(const SearchConfig& c) {
        c.validate();
        return c;
    }
    static SupernetConfig net_config(const SearchConfig& c) {
        return {c.init_channels, c.cell_groups, 2, c.lambda};
    }

    void init_common() {
        rate_ = cfg_.init_sample_rate;
        data_rng_.seed(stream_seed(cfg_.seed, 21));
        mask_rng_.seed(stream_seed(cfg_.seed, 22));
        probe_rng_.seed(stream_seed(cfg_.seed, 23));
        weight_opt_ = Optimizer(OptimizerOptions::adam(static_cast<real>(cfg_.weight_lr), real(0.9), real(0.999),
                                                       static_cast<real>(cfg_.weight_weight_decay)));
        arch_opt_ = Optimizer(OptimizerOptions::adam(static_cast<real>(cfg_.arch_lr), static_cast<real>(cfg_.arch_beta1),
                                                     static_cast<real>(cfg_.arch_beta2), static_cast<real>(cfg_.arch_weight_decay)));
    }

    bool warm() const { return epoch_ <= cfg_.warmup_epochs; }
    bool prune_epoch() const {
        return epoch_ >= cfg_.prune_period && epoch_ % cfg_.prune_period == 0 && epoch_ > cfg_.warmup_epochs;
    }
    bool probe_epoch() const { return !warm() && (epoch_ - cfg_.warmup_epochs - 1) % cfg_.probe_interval == 0; }

    struct StepStats {
        double loss = 0, acc = 0;
        std::size_t steps = 0;
        void add(double l, double a) {
            loss += l;
            acc += a;
            ++steps;
        }
        double mean_loss() const { return steps ? loss / static_cast<double>(steps) : 0; }
        double mean_acc() const { return steps ? acc / static_cast<double>(steps) : 0; }
    };

    // Forward + backward of the classification loss with only `train` requiring grad.
    std::pair<double, double> loss_and_grad(const Batch& b, std::vector<Tensor>& train, std::vector<Tensor>& frozen,
                                            Rng& masks) {
        set_requires_grad(frozen, false);
        set_requires_grad(train, true);
        Tape tape;
        Tensor logits = net_.forward(&tape, b.images, masks, rate_);
        Tensor loss = softmax_cross_entropy(&tape, logits, b.labels);
        if (!std::isfinite(loss.item())) throw Error("search: non-finite loss at epoch " + std::to_string(epoch_));
        tape.backward(loss);
        return {loss.item(), batch_accuracy(logits, b.labels)};
    }

    void log(nlohmann::json rec) {
        rec["epoch"] = epoch_;
        events_.push_back(std::move(rec));
    }

    void search_epoch() {
        auto s_batches = make_batches(shuffled_indices(search_split_.size(), data_rng_), cfg_.batch_size);
        auto e_batches = make_batches(shuffled_indices(eval_split_.size(), data_rng_), cfg_.batch_size);
        StepStats ws, as;
        if (warm()) {
            for (const auto& idx : e_batches) {
                auto [l, a] = weight_step(make_batch(eval_split_, idx));
                ws.add(l, a);
            }
        } else {
            const std::size_t n = std::max(s_batches.size(), e_batches.size());
            for (std::size_t t = 0; t < n; ++t) {
                if (t < s_batches.size()) {
                    auto [l, a] = arch_step(make_batch(search_split_, s_batches[t]));
                    as.add(l, a);
                }
                if (t < e_batches.size()) {
                    auto [l, a] = weight_step(make_batch(eval_split_, e_batches[t]));
                    ws.add(l, a);
                }
            }
        }
        log({{"phase", warm() ? "warmup" : "weight"}, {"split", "eval"}, {"loss", ws.mean_loss()}, {"acc", ws.mean_acc()}, {"steps", ws.steps}});
        if (!warm())
            log({{"phase", "arch"}, {"split", "search"}, {"loss", as.mean_loss()}, {"acc", as.mean_acc()}, {"steps", as.steps}});
        curves_["weight_loss"].push_back(ws.mean_loss());
        curves_["arch_loss"].push_back(warm() ? 0.0 : as.mean_loss());
        if (probe_epoch()) {
            auto sb = make_batch(search_split_, sample_indices(search_split_.size(), cfg_.probe_batch, probe_rng_));
            auto eb = make_batch(eval_split_, sample_indices(eval_split_.size(), cfg_.probe_batch, probe_rng_));
            run_probes(sb, eb);
        }
    }

    void cross_epoch() {
        const std::size_t k = domains_.size();
        std::vector<std::vector<std::vector<std::size_t>>> batches(k);
        std::size_t steps = 0;
        for (std::size_t d = 0; d < k; ++d) {
            auto order = shuffled_indices(domains_[d].size(), data_rng_);
            order.resize(std::min(order.size(), cfg_.samples_per_domain));
            batches[d] = make_batches(std::move(order), cfg_.batch_size);
            if (batches[d].empty()) throw Error("cross-dataset search: domain '" + domains_[d].name + "' yields no batch");
            steps = std::max(steps, batches[d].size());
        }
        StepStats inner, arch;
        std::size_t last_target = 0;
        for (std::size_t t = 0; t < steps; ++t) {
            std::uniform_int_distribution<std::size_t> pick(0, k - 1);
            const std::size_t target = pick(data_rng_);
            std::vector<Batch> b;
            for (std::size_t d = 0; d < k; ++d) b.push_back(make_batch(domains_[d], batches[d][t % batches[d].size()]));
            const auto r = cross_step(b, target, t);
            inner.add(r.inner_loss, r.inner_acc);
            arch.add(r.arch_loss, r.arch_acc);
            last_target = target;
        }
        curves_["weight_loss"].push_back(inner.mean_loss());
        curves_["arch_loss"].push_back(arch.mean_loss());
        if (probe_epoch()) {
            // Search-side errors from a source domain, evaluation-side from the target.
            const std::size_t src = (last_target + 1) % k;
            auto sb = make_batch(domains_[src], sample_indices(domains_[src].size(), cfg_.probe_batch, probe_rng_));
            auto eb = make_batch(domains_[last_target], sample_indices(domains_[last_target].size(), cfg_.probe_batch, probe_rng_));
            run_probes(sb, eb);
        }
    }

    // Error of every single alive op per edge, with that edge swapped for the
    // op on full channels; all probe forwards share one mask draw.
    void run_probes(const Batch& sb, const Batch& eb) {
        const std::uint64_t mask_seed = probe_rng_();
        auto w = net_.weights();
        auto a = net_.arch();
        set_requires_grad(w, false);
        set_requires_grad(a, false);
        auto error = [&](const Batch& b, const ProbeOverride& p) {
            Rng m(mask_seed);
            return 1.0 - batch_accuracy(net_.forward(nullptr, b.images, m, rate_, &p), b.labels);
        };
        std::size_t probes = 0;
        for (auto kind : {CellKind::normal, CellKind::reduction}) {
            auto& es = net_.edges(kind);
            for (std::size_t e = 0; e < es.size(); ++e)
                for (auto o : es[e].alive_indices()) {
                    const ProbeOverride p{kind, e, o};
                    const double se = error(sb, p), ee = error(eb, p);
                    es[e].record_probe(o, se, ee);
                    ++probes;
                }
        }
        log({{"phase", "probe"}, {"split", "search+eval"}, {"probes", probes}});
    }

    void after_epoch() {
        if (prune_epoch()) {
            std::size_t removed = 0;
            for (auto kind : {CellKind::normal, CellKind::reduction})
                for (auto& e : net_.edges(kind)) removed += prune(e, cfg_.lambda).size();
            const double before = rate_;
            rate_ = update_sample_rate(rate_, cfg_.rate_update);
            const auto alive = alive_counts();
            log({{"phase", "prune"}, {"removed", removed}, {"alive_min", *std::min_element(alive.begin(), alive.end())},
                 {"alive_max", *std::max_element(alive.begin(), alive.end())}});
            log({{"phase", "rate"}, {"from", before}, {"to", rate_}});
        }
        curves_["sample_rate"].push_back(rate_);
        if (val_) {
            auto [l, a] = evaluate(*val_);
            curves_["val_loss"].push_back(l);
            curves_["val_acc"].push_back(a);
            log({{"phase", "val"}, {"split", "val"}, {"loss", l}, {"acc", a}});
        }
    }

    // Mean loss and accuracy over a dataset with a fixed mask stream.
    std::pair<double, double> evaluate(const Dataset& d) {
        Rng m(stream_seed(cfg_.seed, 24));
        std::vector<std::size_t> order(d.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        double loss = 0, acc = 0;
        std::size_t n = 0;
        for (const auto& idx : make_batches(order, cfg_.batch_size)) {
            auto b = make_batch(d, idx);
            Tensor logits = net_.forward(nullptr, b.images, m, rate_);
            loss += softmax_cross_entropy(nullptr, logits, b.labels).item() * static_cast<double>(idx.size());
            acc += batch_accuracy(logits, b.labels) * static_cast<double>(idx.size());
            n += idx.size();
        }
        return {loss / static_cast<double>(n), acc / static_cast<double>(n)};
    }

    SearchConfig cfg_;
    Supernet net_;
    Dataset search_split_, eval_split_;
    std::optional<Dataset> val_;
    std::vector<Dataset> domains_;
    std::uint64_t data_fingerprint_ = 0;
    std::size_t epoch_ = 0;
    double rate_ = 1;
    Rng data_rng_, mask_rng_, probe_rng_;
    Optimizer weight_opt_{OptimizerOptions{}};
    Optimizer arch_opt_{OptimizerOptions{}};
    std::vector<nlohmann::json> events_;
    std::map<std::string, std::vector<double>> curves_;
};

inline Genotype search(const SearchConfig& cfg, const Dataset& data, const OperatorRegistry& registry = OperatorRegistry::defaults()) {
    SearchEngine engine(cfg, registry, data);
    engine.run();
    return engine.genotype();
}

inline Genotype cross_dataset_search(const SearchConfig& cfg, std::vector<Dataset> domains,
                                     const OperatorRegistry& registry = OperatorRegistry::defaults()) {
    SearchEngine engine(cfg, registry, std::move(domains));
    engine.run();
    return engine.genotype();
}

}  // namespace fnas
