#pragma once

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include "c2pn.hpp"
#include "config.hpp"
#include "datasets.hpp"
#include "metrics.hpp"
#include "search.hpp"

namespace fnas::cli {

namespace fs = std::filesystem;

enum ExitCode : int { ok = 0, failure = 1, usage = 2 };

// Thrown for argument combinations CLI11 cannot express; exits with `usage`.
struct UsageError : Error {
    using Error::Error;
};

struct Options {
    std::string config_path;
    std::string preset;
    std::optional<std::string> synthetic;
    std::string data_dir;
    std::optional<std::uint64_t> seed;
    std::string out = "runs";
    bool dry_run = false;
    int threads = 0;
    std::vector<std::string> domains;
    std::string genotype;
    std::string checkpoint;
    std::size_t limit = 0;
};

// Built-in defaults, then the preset, then the file, then FNAS_* variables,
// then command-line flags.
inline RunConfig resolve_config(const Options& o) {
    RunConfig c;
    if (o.preset == "desk")
        c = desk_preset();
    else if (!o.preset.empty())
        throw UsageError("unknown preset '" + o.preset + "' (known: desk)");
    if (!o.config_path.empty()) {
        if (!fs::exists(o.config_path)) throw UsageError("config file '" + o.config_path + "' does not exist");
        c = load_config(o.config_path, c);
    }
    c = apply_env_overrides(c);
    if (o.synthetic) {
        c.data.source = "synthetic";
        c.data.manipulation = parse_manipulation(*o.synthetic);
    }
    if (!o.data_dir.empty()) c.data.source = o.data_dir;
    if (o.seed) c.search.seed = c.train.seed = c.data.seed = *o.seed;
    c.validate();
    return c;
}

struct Splits {
    Dataset train, val, test;
};

// Synthetic splits use disjoint seed streams. A directory either holds
// train/, val/ and test/ (each with real/ and fake/) or is split 8:1:1.
inline Splits load_splits(const DataConfig& d) {
    if (d.synthetic()) {
        const auto size = d.image_size;
        return {generate_synthetic(stream_seed(d.seed, 1), d.train_count, d.manipulation, size),
                generate_synthetic(stream_seed(d.seed, 2), d.val_count, d.manipulation, size),
                generate_synthetic(stream_seed(d.seed, 3), d.test_count, d.manipulation, size)};
    }
    if (!fs::is_directory(d.source)) throw Error("data directory '" + d.source + "' does not exist");
    if (fs::is_directory(fs::path(d.source) / "train"))
        return {load_directory((fs::path(d.source) / "train").string(), d.image_size),
                load_directory((fs::path(d.source) / "val").string(), d.image_size),
                load_directory((fs::path(d.source) / "test").string(), d.image_size)};
    auto parts = split_dataset(load_directory(d.source, d.image_size), SplitSpec::ratio_811(), stream_seed(d.seed, 4));
    return {std::move(parts[0]), std::move(parts[1]), std::move(parts[2])};
}

// A domain is a manipulation name (synthetic) or a directory.
inline Dataset load_domain(const DataConfig& d, const std::string& spec, std::size_t k) {
    if (fs::is_directory(spec)) return load_directory(spec, d.image_size);
    Manipulation m;
    try {
        m = parse_manipulation(spec);
    } catch (const Error&) {
        throw Error("domain '" + spec + "' is neither a directory nor a synthetic manipulation");
    }
    return generate_synthetic(stream_seed(d.seed, 10 + k), d.train_count, m, d.image_size);
}

inline std::string file_hash(const std::string& path) { return hex64(fingerprint_text(read_text_file(path))); }

// One line of <out>/manifest.jsonl per run; the file is only ever appended.
class Manifest {
public:
    Manifest(std::string command, const RunConfig& cfg, std::string out)
        : command_(std::move(command)), out_(std::move(out)), start_(std::chrono::steady_clock::now()) {
        rec_ = {{"command", command_},
                {"config", config_to_ini(cfg)},
                {"seeds", {{"search", cfg.search.seed}, {"train", cfg.train.seed}, {"data", cfg.data.seed}}},
                {"inputs", nlohmann::json::object()},
                {"artifacts", nlohmann::json::object()}};
    }

    void input(const std::string& name, const std::string& fingerprint) { rec_["inputs"][name] = fingerprint; }
    void artifact(const std::string& path) { rec_["artifacts"][path] = file_hash(path); }

    void write() {
        rec_["wall_clock_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        std::ofstream os(fs::path(out_) / "manifest.jsonl", std::ios::app);
        if (!os) throw Error("cannot append to manifest in '" + out_ + "'");
        os << rec_.dump() << '\n';
    }

private:
    std::string command_, out_;
    std::chrono::steady_clock::time_point start_;
    nlohmann::json rec_;
};

inline std::string out_path(const Options& o, const std::string& name) { return (fs::path(o.out) / name).string(); }

inline Genotype read_genotype(const std::string& path) {
    if (path.empty()) throw UsageError("--genotype is required");
    if (!fs::exists(path)) throw Error("genotype file '" + path + "' does not exist");
    return genotype_from_string(read_text_file(path));
}

inline LoadedNet read_checkpoint(const std::string& path) {
    if (path.empty()) throw UsageError("--checkpoint is required");
    if (!fs::exists(path)) throw Error("checkpoint '" + path + "' does not exist");
    return load_weights(path);
}

inline void run_search(SearchEngine& engine, const Options& o, std::ostream& log) {
    if (!o.checkpoint.empty() && fs::exists(o.checkpoint)) {
        engine.load_checkpoint(o.checkpoint);
        log << "resumed from " << o.checkpoint << " at epoch " << engine.epoch() << '\n';
    }
    engine.run([&](const SearchEngine& e) {
        log << "epoch " << e.epoch() << "/" << e.config().epochs << " rate " << e.sample_rate();
        for (const auto& [name, c] : e.curves())
            if (!c.empty()) log << ' ' << name << '=' << c.back();
        log << '\n';
        if (!o.checkpoint.empty()) e.save_checkpoint(o.checkpoint);
    });
}

inline void write_search_artifacts(const SearchEngine& engine, const Options& o, Manifest& m) {
    const Genotype g = engine.genotype();
    validate(g);
    const std::string gpath = out_path(o, "genotype.json");
    write_text_file(gpath, genotype_to_string(g));
    if (!(genotype_from_string(read_text_file(gpath)) == g)) throw Error("genotype '" + gpath + "' failed to read back");
    write_text_file(out_path(o, "events.jsonl"), engine.events_jsonl());
    write_text_file(out_path(o, "search_curves.csv"), curves_to_csv(engine.curves()));
    for (const char* f : {"genotype.json", "events.jsonl", "search_curves.csv"}) m.artifact(out_path(o, f));
}

inline int cmd_search(const Options& o, const RunConfig& c, std::ostream& out, std::ostream& log) {
    const Splits s = load_splits(c.data);
    Manifest m("search", c, o.out);
    m.input("train", hex64(s.train.fingerprint()));
    m.input("val", hex64(s.val.fingerprint()));
    SearchEngine engine(c.search, c.operator_registry(), s.train, s.val);
    run_search(engine, o, log);
    write_search_artifacts(engine, o, m);
    m.write();
    out << out_path(o, "genotype.json") << '\n';
    return ok;
}

inline int cmd_cross_search(const Options& o, const RunConfig& c, std::ostream& out, std::ostream& log) {
    if (o.domains.size() < 2)
        throw UsageError("cross-search needs at least 2 domains, got " + std::to_string(o.domains.size()));
    Manifest m("cross-search", c, o.out);
    std::vector<Dataset> domains;
    for (std::size_t k = 0; k < o.domains.size(); ++k) {
        domains.push_back(load_domain(c.data, o.domains[k], k));
        m.input(o.domains[k], hex64(domains.back().fingerprint()));
    }
    SearchEngine engine(c.search, c.operator_registry(), std::move(domains));
    run_search(engine, o, log);
    write_search_artifacts(engine, o, m);
    m.write();
    out << out_path(o, "genotype.json") << '\n';
    return ok;
}

inline int cmd_train(const Options& o, const RunConfig& c, std::ostream& out, std::ostream& log) {
    const Genotype g = read_genotype(o.genotype);
    const Splits s = load_splits(c.data);
    Manifest m("train", c, o.out);
    m.input("genotype", file_hash(o.genotype));
    m.input("train", hex64(s.train.fingerprint()));
    m.input("val", hex64(s.val.fingerprint()));
    DetectionNet net(g, c.train, stream_seed(c.train.seed, 21));
    log << "detection net: " << net.parameter_count() << " parameters\n";
    const TrainResult r = train(net, s.train, s.val, c.train, [&](std::size_t e, const TrainResult& t) {
        log << "epoch " << e << "/" << c.train.epochs;
        for (const auto& [name, v] : t.curves) log << ' ' << name << '=' << v.back();
        log << '\n';
    });
    const std::string wpath = out_path(o, "weights.bin");
    save_weights(net, c.train, wpath);
    write_text_file(out_path(o, "train_curves.csv"), curves_to_csv(r.curves));
    m.artifact(wpath);
    m.artifact(out_path(o, "train_curves.csv"));
    m.write();
    out << "best epoch " << r.best_epoch << " val_auc " << r.best_val_auc << '\n' << wpath << '\n';
    return ok;
}

inline int cmd_eval(const Options& o, const RunConfig& c, std::ostream& out, std::ostream&) {
    LoadedNet loaded = read_checkpoint(o.checkpoint);
    const Splits s = load_splits(c.data);
    Manifest m("eval", c, o.out);
    m.input("checkpoint", file_hash(o.checkpoint));
    m.input("test", hex64(s.test.fingerprint()));
    const std::string cfg_fp = hex64(fingerprint_text(loaded.config.to_json().dump()));
    const MetricsReport r = evaluate(loaded.net, s.test, loaded.config.batch_size, cfg_fp, loaded.config.seed);
    const std::string rpath = out_path(o, "report.json");
    write_report(r, rpath);
    if (!(read_report(rpath) == r)) throw Error("report '" + rpath + "' failed to read back");
    m.artifact(rpath);
    m.write();
    out << "Acc " << r.acc << " AUC " << r.auc << " n " << r.n_samples << '\n';
    return ok;
}

// One heatmap per test image (the first --limit if given), plus cam.csv
// relating each map to the ground-truth box.
inline int cmd_cam(const Options& o, const RunConfig& c, std::ostream& out, std::ostream&) {
    LoadedNet loaded = read_checkpoint(o.checkpoint);
    const Splits s = load_splits(c.data);
    const std::size_t n = o.limit ? std::min(o.limit, s.test.size()) : s.test.size();
    Manifest m("cam", c, o.out);
    m.input("checkpoint", file_hash(o.checkpoint));
    m.input("test", hex64(s.test.fingerprint()));
    fs::create_directories(fs::path(o.out) / "cam");
    std::ostringstream csv;
    csv << "index,label,predicted,map_quadrant,box_quadrant\n";
    std::size_t hits = 0, boxed = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const Sample& smp = s.test.samples[i];
        const Tensor img({3, s.test.height, s.test.width}, std::vector<real>(smp.pixels.begin(), smp.pixels.end()));
        const ActivationMap a = activation_map(loaded.net, img);
        char name[32];
        std::snprintf(name, sizeof name, "cam/%05zu.pgm", i);
        write_heatmap(out_path(o, name), a);
        m.artifact(out_path(o, name));
        csv << i << ',' << smp.label << ',' << a.predicted_class << ',' << a.quadrant() << ',';
        if (smp.box) {
            const int q = smp.box->quadrant(s.test.height, s.test.width);
            csv << q;
            ++boxed;
            hits += a.quadrant() == q;
        }
        csv << '\n';
    }
    write_text_file(out_path(o, "cam.csv"), csv.str());
    m.artifact(out_path(o, "cam.csv"));
    m.write();
    out << n << " heatmaps";
    if (boxed) out << ", quadrant hit rate " << static_cast<double>(hits) / static_cast<double>(boxed);
    out << '\n';
    return ok;
}

// Graphviz rendering of both cells of a genotype.
inline std::string genotype_to_dot(const Genotype& g) {
    std::ostringstream os;
    os << "digraph genotype {\n  rankdir=LR;\n";
    for (auto [kind, cell] : {std::pair{"normal", &g.normal}, std::pair{"reduction", &g.reduction}}) {
        os << "  subgraph cluster_" << kind << " {\n    label=\"" << kind << "\";\n";
        auto node = [&](std::size_t i) {
            return std::string(kind) + "_" + (i == 0 ? "c_k-2" : i == 1 ? "c_k-1" : std::to_string(i - 2));
        };
        for (std::size_t k = 0; k < cell->size(); ++k)
            os << "    \"" << node((*cell)[k].pred) << "\" -> \"" << node(2 + k / 2) << "\" [label=\"" << (*cell)[k].op
               << "\"];\n";
        for (std::size_t i = 2; i < 2 + kCellSteps; ++i)
            os << "    \"" << node(i) << "\" -> \"" << kind << "_c_k\";\n";
        os << "  }\n";
    }
    os << "}\n";
    return os.str();
}

inline int cmd_export(const Options& o, const RunConfig& c, std::ostream& out, std::ostream&) {
    Genotype g;
    std::string source;
    if (!o.checkpoint.empty()) {
        g = read_checkpoint(o.checkpoint).net.genotype();
        source = o.checkpoint;
    } else {
        g = read_genotype(o.genotype);
        source = o.genotype;
    }
    Manifest m("export", c, o.out);
    m.input("source", file_hash(source));
    write_text_file(out_path(o, "genotype.dot"), genotype_to_dot(g));
    DetectionNet net(g, c.train, 0);
    const nlohmann::json summary = {{"genotype", nlohmann::json::parse(genotype_to_string(g))},
                                    {"parameter_count", net.parameter_count()},
                                    {"train", c.train.to_json()}};
    write_text_file(out_path(o, "summary.json"), summary.dump(2) + "\n");
    m.artifact(out_path(o, "genotype.dot"));
    m.artifact(out_path(o, "summary.json"));
    m.write();
    out << out_path(o, "genotype.dot") << '\n';
    return ok;
}

// Writes the resolved data splits as PPM images under <out>/<split>/{real,fake}
// plus boxes.jsonl with every fake's manipulated region.
inline int cmd_synth_gen(const Options& o, const RunConfig& c, std::ostream& out, std::ostream&) {
    if (!c.data.synthetic()) throw UsageError("synth-gen needs a synthetic data source");
    const Splits s = load_splits(c.data);
    Manifest m("synth-gen", c, o.out);
    std::size_t written = 0;
    for (auto [name, d] : {std::pair{"train", &s.train}, std::pair{"val", &s.val}, std::pair{"test", &s.test}}) {
        std::string boxes;
        for (const char* sub : {"real", "fake"}) fs::create_directories(fs::path(o.out) / name / sub);
        for (std::size_t i = 0; i < d->size(); ++i) {
            const Sample& smp = d->samples[i];
            char file[64];
            std::snprintf(file, sizeof file, "%s/%s/%05zu.ppm", name, smp.label ? "fake" : "real", i);
            write_ppm(out_path(o, file), smp.pixels, d->height, d->width);
            if (smp.box)
                boxes += nlohmann::json{{"file", file}, {"box", {smp.box->x0, smp.box->y0, smp.box->x1, smp.box->y1}}}.dump() + "\n";
            ++written;
        }
        const std::string bpath = out_path(o, std::string(name) + "/boxes.jsonl");
        write_text_file(bpath, boxes);
        m.artifact(bpath);
        m.input(name, hex64(d->fingerprint()));
    }
    m.write();
    out << written << " images under " << o.out << '\n';
    return ok;
}

// Entry point shared by the executable and in-process tests.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Forgery-detection architecture search and training"};
    app.require_subcommand(1);
    Options o;
    struct Sub {
        const char* name;
        const char* help;
        int (*fn)(const Options&, const RunConfig&, std::ostream&, std::ostream&);
    };
    const Sub subs[] = {
        {"search", "Search a cell genotype on one dataset", cmd_search},
        {"cross-search", "Search a cell genotype across several datasets", cmd_cross_search},
        {"train", "Train the detection network of a genotype", cmd_train},
        {"eval", "Evaluate a trained network on the test split", cmd_eval},
        {"export", "Render a genotype as Graphviz plus a JSON summary", cmd_export},
        {"cam", "Write class-activation heatmaps for test images", cmd_cam},
        {"synth-gen", "Write the synthetic dataset as image files", cmd_synth_gen},
    };
    std::vector<std::pair<CLI::App*, const Sub*>> apps;
    for (const auto& s : subs) {
        auto* sub = app.add_subcommand(s.name, s.help);
        sub->add_option("--config", o.config_path, "INI config file (sections search, registry, train, data)");
        sub->add_option("--preset", o.preset, "Start from a built-in preset (desk)");
        sub->add_option("--synthetic", o.synthetic, "Use a synthetic dataset of this manipulation");
        sub->add_option("--data", o.data_dir, "Dataset directory");
        sub->add_option("--seed", o.seed, "Seed for search, training and data");
        sub->add_option("--out", o.out, "Output directory")->capture_default_str();
        sub->add_flag("--dry-run", o.dry_run, "Print the resolved config and exit");
        sub->add_option("--threads", o.threads, "Cap on worker threads (0 = library default)");
        sub->add_option("--genotype", o.genotype, "Genotype file");
        sub->add_option("--checkpoint", o.checkpoint, "Weights (train/eval/cam/export) or search checkpoint");
        if (std::string(s.name) == "cross-search")
            sub->add_option("--domains", o.domains, "Domains: manipulation names or directories")->delimiter(',');
        if (std::string(s.name) == "cam") sub->add_option("--limit", o.limit, "Only the first N test images");
        apps.emplace_back(sub, &s);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? ok : usage;
    }
    for (const auto& [sub, s] : apps) {
        if (!sub->parsed()) continue;
        try {
            const RunConfig c = resolve_config(o);
            if (o.dry_run) {
                out << config_to_ini(c);
                return ok;
            }
            if (o.threads > 0) Eigen::setNbThreads(o.threads);
            fs::create_directories(o.out);
            return s->fn(o, c, out, err);
        } catch (const UsageError& e) {
            err << "error: " << e.what() << "\n\n" << sub->help();
            return usage;
        } catch (const std::exception& e) {
            err << "error: " << e.what() << '\n';
            return failure;
        }
    }
    return usage;
}

}  // namespace fnas::cli
