#pragma once

#include <fnas/tensor.hpp>

#include <json.hpp>

#include <fstream>
#include <map>

namespace fnas {

// AUC as the exact fraction numerator / denominator with numerator =
// 2 * #(pos > neg) + #(pos == neg) and denominator = 2 * P * N.
struct AucFraction {
    std::uint64_t numerator = 0;
    std::uint64_t denominator = 1;

    double value() const { return static_cast<double>(numerator) / static_cast<double>(denominator); }
};

inline AucFraction auc_fraction(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw Error("auc: scores and labels differ in length");
    std::vector<std::pair<double, int>> v;
    v.reserve(scores.size());
    std::uint64_t pos = 0, neg = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw Error("auc: label must be 0 or 1");
        if (std::isnan(scores[i])) throw Error("auc: NaN score at index " + std::to_string(i));
        v.emplace_back(scores[i], labels[i]);
        (labels[i] ? pos : neg)++;
    }
    if (pos == 0 || neg == 0) throw Error("auc: undefined with a single class present");
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    AucFraction f;
    std::uint64_t neg_below = 0;
    for (std::size_t i = 0; i < v.size();) {
        std::size_t j = i;
        std::uint64_t p = 0, n = 0;
        for (; j < v.size() && v[j].first == v[i].first; ++j) (v[j].second ? p : n)++;
        f.numerator += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    f.denominator = 2 * pos * neg;
    return f;
}

inline double auc(std::span<const double> scores, std::span<const int> labels) {
    return auc_fraction(scores, labels).value();
}

inline double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5) {
    if (scores.size() != labels.size()) throw Error("accuracy: scores and labels differ in length");
    if (scores.empty()) throw Error("accuracy: no samples");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) hit += (scores[i] >= threshold ? 1 : 0) == labels[i];
    return static_cast<double>(hit) / static_cast<double>(scores.size());
}

struct MetricsReport {
    static constexpr int schema_version = 1;

    double acc = 0;
    double auc = 0;
    std::uint64_t n_samples = 0;
    // Per-epoch series keyed by name (e.g. "train_loss", "val_auc").
    std::map<std::string, std::vector<double>> curves;
    std::string config_fingerprint;
    std::uint64_t seed = 0;

    bool operator==(const MetricsReport&) const = default;
};

inline void validate(const MetricsReport& r) {
    if (!(r.acc >= 0 && r.acc <= 1)) throw Error("report: acc outside [0, 1]");
    if (!(r.auc >= 0 && r.auc <= 1)) throw Error("report: auc outside [0, 1]");
    if (r.n_samples < 1) throw Error("report: n_samples must be >= 1");
    std::size_t len = 0;
    bool first = true;
    for (const auto& [name, c] : r.curves) {
        if (!first && c.size() != len) throw Error("report: curve '" + name + "' length differs");
        len = c.size();
        first = false;
        for (double v : c)
            if (!std::isfinite(v)) throw Error("report: non-finite value in curve '" + name + "'");
    }
}

// Key-sorted, whitespace-free document.
inline std::string report_to_string(const MetricsReport& r) {
    validate(r);
    nlohmann::json j;
    j["schema_version"] = MetricsReport::schema_version;
    j["acc"] = r.acc;
    j["auc"] = r.auc;
    j["n_samples"] = r.n_samples;
    j["curves"] = r.curves;
    j["config_fingerprint"] = r.config_fingerprint;
    j["seed"] = r.seed;
    return j.dump();
}

inline MetricsReport report_from_string(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("report: malformed document: ") + e.what());
    }
    try {
        if (j.at("schema_version").get<int>() != MetricsReport::schema_version)
            throw Error("report: schema version " + j.at("schema_version").dump() + " is not supported");
        MetricsReport r;
        r.acc = j.at("acc").get<double>();
        r.auc = j.at("auc").get<double>();
        r.n_samples = j.at("n_samples").get<std::uint64_t>();
        r.curves = j.at("curves").get<std::map<std::string, std::vector<double>>>();
        r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        validate(r);
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("report: ") + e.what());
    }
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "'");
    return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + path + "'");
    out << text;
    if (!out) throw Error("write failed for '" + path + "'");
}

inline void write_report(const MetricsReport& r, const std::string& path) { write_text_file(path, report_to_string(r)); }

inline MetricsReport read_report(const std::string& path) { return report_from_string(read_text_file(path)); }

// epoch,<curve>,... with one row per epoch (1-based).
inline std::string curves_to_csv(const std::map<std::string, std::vector<double>>& curves) {
    std::ostringstream os;
    os << "epoch";
    std::size_t len = 0;
    for (const auto& [name, c] : curves) {
        os << ',' << name;
        len = std::max(len, c.size());
    }
    os << '\n';
    os.precision(17);
    for (std::size_t e = 0; e < len; ++e) {
        os << e + 1;
        for (const auto& [name, c] : curves) {
            os << ',';
            if (e < c.size()) os << c[e];
        }
        os << '\n';
    }
    return os.str();
}

}  // namespace fnas
