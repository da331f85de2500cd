#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "c2pn.hpp"
#include "datasets.hpp"
#include "forgery_ops.hpp"
#include "search.hpp"

namespace fnas {

// Where images come from. `source` is "synthetic" or a directory holding
// real/ and fake/ subfolders.
struct DataConfig {
    std::string source = "synthetic";
    Manipulation manipulation = Manipulation::splice;
    std::size_t image_size = 64;
    std::size_t train_count = 1000;
    std::size_t val_count = 500;
    std::size_t test_count = 500;
    std::uint64_t seed = 0;

    bool synthetic() const { return source == "synthetic"; }

    void validate() const {
        if (source.empty()) throw Error("data config: source must not be empty");
        if (image_size < 16) throw Error("data config: image_size must be >= 16");
        if (synthetic() && (train_count < 4 || val_count < 4 || test_count < 4))
            throw Error("data config: synthetic split sizes must be >= 4");
    }
};

struct RunConfig {
    SearchConfig search;
    std::vector<std::string> registry = OperatorRegistry::default_names();
    TrainConfig train;
    DataConfig data;

    OperatorRegistry operator_registry() const { return OperatorRegistry(registry); }

    void validate() const {
        search.validate();
        (void)operator_registry();
        train.validate();
        data.validate();
        if (train.input_size != data.image_size)
            throw Error("config: train.input_size " + std::to_string(train.input_size) + " differs from data.image_size " +
                        std::to_string(data.image_size));
    }
};

// Shrinks every stage so a full search-train-eval cycle runs in minutes.
inline RunConfig desk_preset() {
    RunConfig c;
    c.search.epochs = 25;
    c.search.warmup_epochs = 5;
    c.search.prune_period = 10;
    c.search.batch_size = 32;
    c.search.init_channels = 8;
    c.search.cell_groups = 1;
    c.search.probe_batch = 16;
    c.search.samples_per_domain = 400;
    c.train.epochs = 20;
    c.train.batch_size = 32;
    c.train.input_size = 16;
    c.train.init_channels = 8;
    c.train.cell_groups = 1;
    c.train.grad_clip = 0;  // clipping at 5 stalls the shallow net on a 20-epoch budget
    c.data.image_size = 16;
    return c;
}

namespace detail {

// One config key: how to read it from text and how to print it back.
struct ConfigField {
    std::string section, key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

template <class T>
T parse_number(const std::string& v) {
    std::istringstream is(v);
    T out{};
    if constexpr (std::is_unsigned_v<T>)
        if (!v.empty() && v[0] == '-') throw Error("expected a non-negative integer, got '" + v + "'");
    is >> out;
    if (!is || !is.eof()) throw Error("expected a number, got '" + v + "'");
    return out;
}

inline bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw Error("expected a boolean, got '" + v + "'");
}

// Shortest text that parses back to the same double.
inline std::string print_double(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline const std::vector<ConfigField>& config_fields() {
    static const std::vector<ConfigField> fields = [] {
        std::vector<ConfigField> f;
        auto size = [&f](const char* sec, const char* key, auto pick) {
            f.push_back({sec, key, [pick](RunConfig& c, const std::string& v) { pick(c) = parse_number<std::size_t>(v); },
                         [pick](const RunConfig& c) { return std::to_string(pick(c)); }});
        };
        auto u64 = [&f](const char* sec, const char* key, auto pick) {
            f.push_back({sec, key, [pick](RunConfig& c, const std::string& v) { pick(c) = parse_number<std::uint64_t>(v); },
                         [pick](const RunConfig& c) { return std::to_string(pick(c)); }});
        };
        auto dbl = [&f](const char* sec, const char* key, auto pick) {
            f.push_back({sec, key, [pick](RunConfig& c, const std::string& v) { pick(c) = parse_number<double>(v); },
                         [pick](const RunConfig& c) { return print_double(pick(c)); }});
        };
        auto flag = [&f](const char* sec, const char* key, auto pick) {
            f.push_back({sec, key, [pick](RunConfig& c, const std::string& v) { pick(c) = parse_bool(v); },
                         [pick](const RunConfig& c) { return std::string(pick(c) ? "true" : "false"); }});
        };
#define FNAS_PICK(path) [](auto& c) -> auto& { return c.path; }
        size("search", "epochs", FNAS_PICK(search.epochs));
        size("search", "warmup_epochs", FNAS_PICK(search.warmup_epochs));
        size("search", "prune_period", FNAS_PICK(search.prune_period));
        size("search", "batch_size", FNAS_PICK(search.batch_size));
        size("search", "init_channels", FNAS_PICK(search.init_channels));
        size("search", "cell_groups", FNAS_PICK(search.cell_groups));
        dbl("search", "init_sample_rate", FNAS_PICK(search.init_sample_rate));
        f.push_back({"search", "rate_update",
                     [](RunConfig& c, const std::string& v) { c.search.rate_update = parse_rate_update(v); },
                     [](const RunConfig& c) { return rate_update_name(c.search.rate_update); }});
        dbl("search", "lambda", FNAS_PICK(search.lambda));
        dbl("search", "arch_lr", FNAS_PICK(search.arch_lr));
        dbl("search", "arch_beta1", FNAS_PICK(search.arch_beta1));
        dbl("search", "arch_beta2", FNAS_PICK(search.arch_beta2));
        dbl("search", "arch_weight_decay", FNAS_PICK(search.arch_weight_decay));
        dbl("search", "weight_lr", FNAS_PICK(search.weight_lr));
        dbl("search", "weight_weight_decay", FNAS_PICK(search.weight_weight_decay));
        size("search", "probe_batch", FNAS_PICK(search.probe_batch));
        size("search", "probe_interval", FNAS_PICK(search.probe_interval));
        size("search", "samples_per_domain", FNAS_PICK(search.samples_per_domain));
        dbl("search", "inner_lr", FNAS_PICK(search.inner_lr));
        u64("search", "seed", FNAS_PICK(search.seed));

        f.push_back({"registry", "operations",
                     [](RunConfig& c, const std::string& v) {
                         c.registry.clear();
                         std::istringstream is(v);
                         for (std::string tok; std::getline(is, tok, ',');)
                             if (auto t = trim(tok); !t.empty()) c.registry.push_back(t);
                         (void)c.operator_registry();
                     },
                     [](const RunConfig& c) {
                         std::string s;
                         for (const auto& n : c.registry) s += (s.empty() ? "" : ", ") + n;
                         return s;
                     }});

        size("train", "epochs", FNAS_PICK(train.epochs));
        size("train", "batch_size", FNAS_PICK(train.batch_size));
        size("train", "input_size", FNAS_PICK(train.input_size));
        size("train", "init_channels", FNAS_PICK(train.init_channels));
        size("train", "cell_groups", FNAS_PICK(train.cell_groups));
        dbl("train", "lr", FNAS_PICK(train.lr));
        dbl("train", "momentum", FNAS_PICK(train.momentum));
        dbl("train", "weight_decay", FNAS_PICK(train.weight_decay));
        dbl("train", "grad_clip", FNAS_PICK(train.grad_clip));
        flag("train", "cosine", FNAS_PICK(train.cosine));
        flag("train", "flip", FNAS_PICK(train.flip));
        flag("train", "pyramid", FNAS_PICK(train.pyramid));
        u64("train", "seed", FNAS_PICK(train.seed));

        f.push_back({"data", "source", [](RunConfig& c, const std::string& v) { c.data.source = v; },
                     [](const RunConfig& c) { return c.data.source; }});
        f.push_back({"data", "manipulation",
                     [](RunConfig& c, const std::string& v) { c.data.manipulation = parse_manipulation(v); },
                     [](const RunConfig& c) { return manipulation_name(c.data.manipulation); }});
        size("data", "image_size", FNAS_PICK(data.image_size));
        size("data", "train_count", FNAS_PICK(data.train_count));
        size("data", "val_count", FNAS_PICK(data.val_count));
        size("data", "test_count", FNAS_PICK(data.test_count));
        u64("data", "seed", FNAS_PICK(data.seed));
#undef FNAS_PICK
        return f;
    }();
    return fields;
}

// Line of `section.key` in INI text, 0 if absent.
inline int line_of(const std::string& text, const std::string& section, const std::string& key) {
    std::istringstream is(text);
    std::string line, current;
    for (int n = 1; std::getline(is, line); ++n) {
        const std::string t = trim(line);
        if (t.empty() || t[0] == ';' || t[0] == '#') continue;
        if (t.front() == '[' && t.back() == ']') {
            current = trim(t.substr(1, t.size() - 2));
        } else if (auto eq = t.find('='); eq != std::string::npos && current == section && trim(t.substr(0, eq)) == key) {
            return n;
        }
    }
    return 0;
}

inline std::string env_name(const std::string& section, const std::string& key) {
    std::string s = "FNAS_" + section + "__" + key;
    for (auto& ch : s) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    return s;
}

}  // namespace detail

// Applies INI text over `base`. Unknown sections/keys and bad values are
// errors naming the origin, line and field.
inline RunConfig parse_config(const std::string& text, const std::string& origin = "<config>", RunConfig base = {}) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream is(text);
    try {
        pt::read_ini(is, tree);
    } catch (const pt::ini_parser_error& e) {
        throw Error(origin + ":" + std::to_string(e.line()) + ": " + e.message());
    }
    const auto& fields = detail::config_fields();
    for (const auto& [section, keys] : tree) {
        if (keys.empty() && !keys.data().empty()) throw Error(origin + ": key '" + section + "' outside any section");
        bool known_section = false;
        for (const auto& f : fields) known_section |= f.section == section;
        if (!known_section) throw Error(origin + ": unknown section [" + section + "]");
        for (const auto& [key, value] : keys) {
            const int line = detail::line_of(text, section, key);
            const std::string where = origin + ":" + std::to_string(line) + ": " + section + "." + key;
            auto it = std::find_if(fields.begin(), fields.end(),
                                   [&](const auto& f) { return f.section == section && f.key == key; });
            if (it == fields.end()) throw Error(where + ": unknown key");
            try {
                it->set(base, detail::trim(value.data()));
            } catch (const Error& e) {
                throw Error(where + ": " + e.what());
            }
        }
    }
    return base;
}

// Overrides from FNAS_<SECTION>__<KEY> environment variables.
inline RunConfig apply_env_overrides(RunConfig c) {
    for (const auto& f : detail::config_fields()) {
        const std::string name = detail::env_name(f.section, f.key);
        if (const char* v = std::getenv(name.c_str())) {
            try {
                f.set(c, detail::trim(v));
            } catch (const Error& e) {
                throw Error("environment " + name + ": " + e.what());
            }
        }
    }
    return c;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open config '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path, std::move(base));
}

// Every key, one section at a time; parse_config(config_to_ini(c)) == c.
inline std::string config_to_ini(const RunConfig& c) {
    std::string out, section;
    for (const auto& f : detail::config_fields()) {
        if (f.section != section) {
            out += (section.empty() ? "[" : "\n[") + f.section + "]\n";
            section = f.section;
        }
        out += f.key + " = " + f.get(c) + "\n";
    }
    return out;
}

}  // namespace fnas
