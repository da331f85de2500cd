#pragma once

// Labeled image collections: a seeded synthetic forgery generator and a loader
// for <root>/{real,fake}/ image trees, plus stratified splitting and batching.

#include <fnas/random.hpp>

#include <png.h>

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>

namespace fnas {

// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct Box {
    std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    bool operator==(const Box&) const = default;
    // 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right, by center.
    int quadrant(std::size_t height, std::size_t width) const {
        const bool right = 2 * (x0 + x1) >= 2 * width;
        const bool bottom = 2 * (y0 + y1) >= 2 * height;
        return (bottom ? 2 : 0) + (right ? 1 : 0);
    }
};

struct Sample {
    std::vector<real> pixels;  // [3, H, W] in [0, 1]
    int label = 0;             // 0 real, 1 fake
    std::optional<Box> box;
    std::string domain;

    std::uint64_t fingerprint() const {
        std::uint64_t h = 1469598103934665603ULL;
        auto mix = [&h](const void* p, std::size_t n) {
            const auto* b = static_cast<const unsigned char*>(p);
            for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ULL;
        };
        for (real v : pixels) {
            const double d = v;
            mix(&d, sizeof d);
        }
        mix(&label, sizeof label);
        return h;
    }
};

struct Dataset {
    std::string name;
    std::size_t height = 0, width = 0;
    std::vector<Sample> samples;
    // Synthetic only: mean relative change of in-box gradient magnitude.
    double gradient_gap = 0;

    std::size_t size() const { return samples.size(); }
    std::size_t count(int label) const {
        return static_cast<std::size_t>(
            std::count_if(samples.begin(), samples.end(), [label](const Sample& s) { return s.label == label; }));
    }
    std::vector<int> labels() const {
        std::vector<int> out;
        for (const auto& s : samples) out.push_back(s.label);
        return out;
    }
    std::uint64_t fingerprint() const {
        std::uint64_t h = 0xcbf29ce484222325ULL ^ (height << 20) ^ width;
        for (const auto& s : samples) h = (h ^ s.fingerprint()) * 1099511628211ULL;
        return h;
    }
    Dataset subset(std::span<const std::size_t> idx) const {
        Dataset d{name, height, width, {}, gradient_gap};
        for (auto i : idx) d.samples.push_back(samples.at(i));
        return d;
    }
    void require_both_classes(const std::string& what) const {
        if (samples.empty()) throw Error(what + ": dataset is empty");
        if (count(0) == 0 || count(1) == 0) throw Error(what + ": dataset '" + name + "' has a single class");
    }
};

struct Batch {
    Tensor images;  // [N, 3, H, W]
    std::vector<int> labels;
};

// Stacks samples idx into a batch; flips[i] mirrors sample i horizontally.
inline Batch make_batch(const Dataset& d, std::span<const std::size_t> idx, const std::vector<bool>* flips = nullptr) {
    if (idx.empty()) throw Error("make_batch: empty index list");
    const std::size_t h = d.height, w = d.width, plane = h * w;
    std::vector<real> data(idx.size() * 3 * plane);
    Batch b;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const Sample& s = d.samples.at(idx[i]);
        real* dst = data.data() + i * 3 * plane;
        if (flips && (*flips)[i]) {
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t x = 0; x < w; ++x)
                        dst[(c * h + y) * w + x] = s.pixels[(c * h + y) * w + (w - 1 - x)];
        } else {
            std::copy(s.pixels.begin(), s.pixels.end(), dst);
        }
        b.labels.push_back(s.label);
    }
    b.images = Tensor({idx.size(), 3, h, w}, std::move(data));
    return b;
}

// ---------------------------------------------------------------- splits

enum class SplitMode { even_half, ratio_811, explicit_ratios };

struct SplitSpec {
    SplitMode mode = SplitMode::ratio_811;
    std::vector<double> ratios = {0.8, 0.1, 0.1};

    static SplitSpec even_half() { return {SplitMode::even_half, {0.5, 0.5}}; }
    static SplitSpec ratio_811() { return {SplitMode::ratio_811, {0.8, 0.1, 0.1}}; }
    static SplitSpec explicit_ratios(std::vector<double> r) { return {SplitMode::explicit_ratios, std::move(r)}; }
};

// Stratified: each class is shuffled and cut by the ratios independently, so
// every split keeps the class proportions. Split order follows sample order.
inline std::vector<Dataset> split_dataset(const Dataset& d, const SplitSpec& spec, std::uint64_t seed) {
    const auto& r = spec.ratios;
    if (r.size() < 2) throw Error("split: need at least two ratios");
    double total = 0;
    for (double v : r) {
        if (!(v > 0)) throw Error("split: ratios must be positive");
        total += v;
    }
    if (std::abs(total - 1) > 1e-9) throw Error("split: ratios must sum to 1");
    Rng rng(stream_seed(seed, 0x5e11));
    std::vector<std::vector<std::size_t>> parts(r.size());
    for (int label : {0, 1}) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < d.size(); ++i)
            if (d.samples[i].label == label) idx.push_back(i);
        std::shuffle(idx.begin(), idx.end(), rng);
        std::size_t start = 0;
        double acc = 0;
        for (std::size_t p = 0; p < r.size(); ++p) {
            acc += r[p];
            const std::size_t end = p + 1 == r.size() ? idx.size()
                                                      : std::min(idx.size(), static_cast<std::size_t>(std::llround(acc * static_cast<double>(idx.size()))));
            for (std::size_t i = start; i < end; ++i) parts[p].push_back(idx[i]);
            start = std::max(start, end);
        }
    }
    std::vector<Dataset> out;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        if (parts[p].empty()) throw Error("split: split " + std::to_string(p) + " of '" + d.name + "' is empty");
        std::sort(parts[p].begin(), parts[p].end());
        out.push_back(d.subset(parts[p]));
    }
    return out;
}

// ---------------------------------------------------------------- image io

struct RgbImage {
    std::size_t height = 0, width = 0;
    std::vector<real> pixels;  // [3, H, W] in [0, 1]
};

namespace detail {

inline RgbImage decode_pnm(const std::string& bytes, const std::string& path) {
    std::istringstream is(bytes);
    std::string magic;
    is >> magic;
    auto next_int = [&]() -> long {
        for (;;) {
            is >> std::ws;
            if (is.peek() == '#') {
                std::string line;
                std::getline(is, line);
                continue;
            }
            long v = -1;
            if (!(is >> v)) throw Error("cannot decode '" + path + "': malformed header");
            return v;
        }
    };
    const bool color = magic == "P6" || magic == "P3";
    const bool ascii = magic == "P3" || magic == "P2";
    if (magic != "P6" && magic != "P5" && magic != "P3" && magic != "P2")
        throw Error("cannot decode '" + path + "': unsupported portable-map type '" + magic + "'");
    const long w = next_int(), h = next_int(), maxv = next_int();
    if (w <= 0 || h <= 0 || maxv <= 0 || maxv > 65535) throw Error("cannot decode '" + path + "': bad header values");
    const std::size_t n = static_cast<std::size_t>(w * h), ch = color ? 3 : 1;
    std::vector<double> raw(n * ch);
    if (ascii) {
        for (auto& v : raw) v = static_cast<double>(next_int());
    } else {
        is.get();
        const std::size_t bps = maxv < 256 ? 1 : 2;
        std::string body(n * ch * bps, '\0');
        if (!is.read(body.data(), static_cast<std::streamsize>(body.size())))
            throw Error("cannot decode '" + path + "': truncated pixel data");
        for (std::size_t i = 0; i < raw.size(); ++i) {
            const auto* b = reinterpret_cast<const unsigned char*>(body.data()) + i * bps;
            raw[i] = bps == 1 ? b[0] : (b[0] << 8 | b[1]);
        }
    }
    RgbImage img{static_cast<std::size_t>(h), static_cast<std::size_t>(w), std::vector<real>(3 * n)};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 3; ++c) {
            const double v = raw[i * ch + (color ? c : 0)];
            if (v > maxv) throw Error("cannot decode '" + path + "': sample exceeds maxval");
            img.pixels[c * n + i] = static_cast<real>(v / static_cast<double>(maxv));
        }
    return img;
}

inline RgbImage decode_png(const std::string& path) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw Error("cannot decode '" + path + "': " + image.message);
    image.format = PNG_FORMAT_RGB;
    std::vector<unsigned char> buf(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&image);
        throw Error("cannot decode '" + path + "': " + image.message);
    }
    const std::size_t h = image.height, w = image.width, n = h * w;
    RgbImage img{h, w, std::vector<real>(3 * n)};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 3; ++c) img.pixels[c * n + i] = static_cast<real>(buf[i * 3 + c] / 255.0);
    return img;
}

}  // namespace detail

inline RgbImage read_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    static const unsigned char png_sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), png_sig, 8) == 0) return detail::decode_png(path);
    if (bytes.size() >= 2 && bytes[0] == 'P') return detail::decode_pnm(bytes, path);
    throw Error("cannot decode '" + path + "': unrecognized image format");
}

// 8-bit binary PPM.
inline void write_ppm(const std::string& path, std::span<const real> chw, std::size_t h, std::size_t w) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + path + "'");
    out << "P6\n" << w << ' ' << h << "\n255\n";
    const std::size_t n = h * w;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 3; ++c) {
            const double v = std::clamp<double>(chw[c * n + i], 0.0, 1.0);
            out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255))));
        }
    if (!out) throw Error("write failed for '" + path + "'");
}

// 8-bit binary PGM from values in [0, 1].
inline void write_pgm(const std::string& path, std::span<const real> values, std::size_t h, std::size_t w) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + path + "'");
    out << "P5\n" << w << ' ' << h << "\n255\n";
    for (std::size_t i = 0; i < h * w; ++i) {
        const double v = std::clamp<double>(values[i], 0.0, 1.0);
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255))));
    }
    if (!out) throw Error("write failed for '" + path + "'");
}

// Bilinear resampling of a [C, H, W] plane stack with half-pixel centers.
inline std::vector<real> resize_bilinear(std::span<const real> src, std::size_t channels, std::size_t h, std::size_t w,
                                         std::size_t oh, std::size_t ow) {
    if (h == oh && w == ow) return std::vector<real>(src.begin(), src.end());
    std::vector<real> out(channels * oh * ow);
    const double sy = static_cast<double>(h) / static_cast<double>(oh);
    const double sx = static_cast<double>(w) / static_cast<double>(ow);
    for (std::size_t y = 0; y < oh; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
        const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, h - 1);
        const double ty = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < ow; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
            const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, w - 1);
            const double tx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < channels; ++c) {
                const real* p = src.data() + c * h * w;
                const double top = p[y0 * w + x0] * (1 - tx) + p[y0 * w + x1] * tx;
                const double bot = p[y1 * w + x0] * (1 - tx) + p[y1 * w + x1] * tx;
                out[(c * oh + y) * ow + x] = static_cast<real>(top * (1 - ty) + bot * ty);
            }
        }
    }
    return out;
}

// Reads <root>/real and <root>/fake in sorted path order; resize == 0 keeps the
// native size (which must then be uniform).
inline Dataset load_directory(const std::string& root, std::size_t resize) {
    namespace fs = std::filesystem;
    Dataset d;
    d.name = fs::path(root).filename().string();
    if (d.name.empty()) d.name = root;
    for (auto [sub, label] : {std::pair{"real", 0}, std::pair{"fake", 1}}) {
        const fs::path dir = fs::path(root) / sub;
        if (!fs::is_directory(dir)) throw Error("dataset '" + root + "' is missing subdirectory '" + sub + "/'");
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_regular_file() && e.path().filename().string()[0] != '.') files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            RgbImage img = read_image(f.string());
            const std::size_t oh = resize ? resize : img.height, ow = resize ? resize : img.width;
            if (d.samples.empty()) {
                d.height = oh;
                d.width = ow;
            } else if (oh != d.height || ow != d.width) {
                throw Error("image '" + f.string() + "' has size " + std::to_string(img.height) + "x" +
                            std::to_string(img.width) + "; pass a resize to mix sizes");
            }
            Sample s;
            s.pixels = resize_bilinear(img.pixels, 3, img.height, img.width, oh, ow);
            for (auto& v : s.pixels) v = std::clamp<real>(v, 0, 1);
            s.label = label;
            s.domain = d.name;
            d.samples.push_back(std::move(s));
        }
    }
    if (d.samples.empty()) throw Error("dataset '" + root + "' contains no images");
    return d;
}

// ---------------------------------------------------------------- synthetic

enum class Manipulation { splice, blur_patch, noise_patch };

inline std::string manipulation_name(Manipulation m) {
    switch (m) {
        case Manipulation::splice: return "splice";
        case Manipulation::blur_patch: return "blur_patch";
        case Manipulation::noise_patch: return "noise_patch";
    }
    return "?";
}

inline Manipulation parse_manipulation(const std::string& s) {
    if (s == "splice") return Manipulation::splice;
    if (s == "blur_patch") return Manipulation::blur_patch;
    if (s == "noise_patch") return Manipulation::noise_patch;
    throw Error("unknown synthetic domain '" + s + "' (expected splice, blur_patch or noise_patch)");
}

namespace detail {

// A smooth face-like scene in normalized coordinates, so one seed renders the
// same content at any resolution.
struct Scene {
    std::array<double, 3> bg0{}, bg1{}, skin{}, eye{};
    double angle = 0;
    double cx = 0.5, cy = 0.5, rx = 0.3, ry = 0.4, tilt = 0;
    double eye_dx = 0.1, eye_y = -0.1, eye_r = 0.05, mouth_y = 0.2, mouth_w = 0.12;
    std::array<double, 4> fx{}, fy{}, phase{}, amp{};

    static Scene random(Rng& rng) {
        std::uniform_real_distribution<double> u(0, 1);
        Scene s;
        for (int c = 0; c < 3; ++c) {
            s.bg0[c] = 0.15 + 0.7 * u(rng);
            s.bg1[c] = 0.15 + 0.7 * u(rng);
        }
        const double tone = 0.45 + 0.35 * u(rng);
        s.skin = {tone + 0.12, tone, tone - 0.1 * u(rng)};
        s.eye = {0.1 + 0.2 * u(rng), 0.08 + 0.15 * u(rng), 0.08 + 0.15 * u(rng)};
        s.angle = 2 * M_PI * u(rng);
        s.cx = 0.4 + 0.2 * u(rng);
        s.cy = 0.4 + 0.2 * u(rng);
        s.rx = 0.22 + 0.1 * u(rng);
        s.ry = 0.3 + 0.1 * u(rng);
        s.tilt = 0.3 * (u(rng) - 0.5);
        s.eye_dx = 0.08 + 0.05 * u(rng);
        s.eye_y = -0.08 - 0.06 * u(rng);
        s.eye_r = 0.03 + 0.025 * u(rng);
        s.mouth_y = 0.12 + 0.08 * u(rng);
        s.mouth_w = 0.08 + 0.06 * u(rng);
        for (int k = 0; k < 4; ++k) {
            s.fx[k] = 1 + 3 * u(rng);
            s.fy[k] = 1 + 3 * u(rng);
            s.phase[k] = 2 * M_PI * u(rng);
            s.amp[k] = 0.015 + 0.025 * u(rng);
        }
        return s;
    }

    std::array<double, 3> color(double x, double y) const {
        const double t = 0.5 + 0.5 * ((x - 0.5) * std::cos(angle) + (y - 0.5) * std::sin(angle)) * 1.4;
        std::array<double, 3> c;
        for (int k = 0; k < 3; ++k) c[k] = bg0[k] * (1 - t) + bg1[k] * t;
        const double dx = x - cx, dy = y - cy;
        const double ux = dx * std::cos(tilt) + dy * std::sin(tilt);
        const double uy = -dx * std::sin(tilt) + dy * std::cos(tilt);
        const double face = (ux * ux) / (rx * rx) + (uy * uy) / (ry * ry);
        if (face <= 1) {
            const double shade = 1 - 0.25 * face;
            for (int k = 0; k < 3; ++k) c[k] = skin[k] * shade;
            for (double side : {-1.0, 1.0}) {
                const double ex = ux - side * eye_dx, ey = uy - eye_y;
                if (ex * ex + 1.6 * ey * ey <= eye_r * eye_r) c = eye;
            }
            const double my = uy - mouth_y;
            if (std::abs(ux) <= mouth_w && std::abs(my) <= 0.25 * eye_r + 0.012)
                for (int k = 0; k < 3; ++k) c[k] = 0.55 * skin[k];
        }
        double tex = 0;
        for (int k = 0; k < 4; ++k) tex += amp[k] * std::sin(2 * M_PI * (fx[k] * x + fy[k] * y) + phase[k]);
        for (int k = 0; k < 3; ++k) c[k] = std::clamp(c[k] + tex, 0.0, 1.0);
        return c;
    }

    std::vector<real> render(std::size_t size) const {
        std::vector<real> px(3 * size * size);
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) {
                const auto c = color((static_cast<double>(x) + 0.5) / static_cast<double>(size),
                                     (static_cast<double>(y) + 0.5) / static_cast<double>(size));
                for (std::size_t k = 0; k < 3; ++k) px[(k * size + y) * size + x] = static_cast<real>(c[k]);
            }
        return px;
    }
};

// Mean |forward difference| (x and y, all channels) over pixels of a box.
inline double box_gradient(const std::vector<real>& px, std::size_t size, const Box& b) {
    double s = 0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = b.y0; y < b.y1; ++y)
            for (std::size_t x = b.x0; x < b.x1; ++x) {
                const real v = px[(c * size + y) * size + x];
                if (x + 1 < size) s += std::abs(px[(c * size + y) * size + x + 1] - v), ++n;
                if (y + 1 < size) s += std::abs(px[(c * size + y + 1) * size + x] - v), ++n;
            }
    return n ? s / static_cast<double>(n) : 0.0;
}

inline void manipulate(std::vector<real>& px, std::size_t size, const Box& b, Manipulation m, double strength,
                       const Scene& donor, Rng& rng) {
    auto at = [&](std::size_t c, std::size_t y, std::size_t x) -> real& { return px[(c * size + y) * size + x]; };
    switch (m) {
        case Manipulation::splice: {
            // Donor content with a brightness offset, pasted with a hard edge.
            std::uniform_real_distribution<double> u(-1, 1);
            const double shift = 0.08 * strength * (u(rng) >= 0 ? 1 : -1);
            const double ox = 0.3 * u(rng), oy = 0.3 * u(rng);
            for (std::size_t y = b.y0; y < b.y1; ++y)
                for (std::size_t x = b.x0; x < b.x1; ++x) {
                    const auto c = donor.color((static_cast<double>(x) + 0.5) / static_cast<double>(size) + ox,
                                               (static_cast<double>(y) + 0.5) / static_cast<double>(size) + oy);
                    for (std::size_t k = 0; k < 3; ++k) at(k, y, x) = static_cast<real>(std::clamp(c[k] + shift, 0.0, 1.0));
                }
            break;
        }
        case Manipulation::blur_patch: {
            const int passes = std::max(1, static_cast<int>(std::lround(2 * strength)));
            for (int p = 0; p < passes; ++p) {
                std::vector<real> copy = px;
                for (std::size_t k = 0; k < 3; ++k)
                    for (std::size_t y = b.y0; y < b.y1; ++y)
                        for (std::size_t x = b.x0; x < b.x1; ++x) {
                            double s = 0;
                            int n = 0;
                            for (int dy = -1; dy <= 1; ++dy)
                                for (int dx = -1; dx <= 1; ++dx) {
                                    const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
                                    if (yy < 0 || xx < 0 || yy >= static_cast<long>(size) || xx >= static_cast<long>(size)) continue;
                                    s += copy[(k * size + static_cast<std::size_t>(yy)) * size + static_cast<std::size_t>(xx)];
                                    ++n;
                                }
                            at(k, y, x) = static_cast<real>(s / n);
                        }
            }
            break;
        }
        case Manipulation::noise_patch: {
            std::normal_distribution<double> g(0, 0.06 * strength);
            for (std::size_t y = b.y0; y < b.y1; ++y)
                for (std::size_t x = b.x0; x < b.x1; ++x) {
                    const double e = g(rng);
                    for (std::size_t k = 0; k < 3; ++k)
                        at(k, y, x) = static_cast<real>(std::clamp(at(k, y, x) + e + g(rng) * 0.3, 0.0, 1.0));
                }
            break;
        }
    }
}

}  // namespace detail

struct SyntheticOptions {
    double strength = 1;           // manipulation intensity; raised automatically on a weak draw
    double min_gradient_gap = 0.2;
    int max_attempts = 6;
};

// n/2 real and n - n/2 fake images of size x size. Sample i is fake iff i is
// odd; fake boxes cycle through the four quadrants.
inline Dataset generate_synthetic(std::uint64_t seed, std::size_t n, Manipulation domain, std::size_t size,
                                  SyntheticOptions opt = {}) {
    if (n < 4) throw Error("generate_synthetic: n must be >= 4");
    if (size < 16) throw Error("generate_synthetic: size must be >= 16");
    double strength = opt.strength;
    for (int attempt = 0; attempt < opt.max_attempts; ++attempt, strength *= 1.5) {
        Dataset d;
        d.name = manipulation_name(domain);
        d.height = d.width = size;
        double gap_sum = 0;
        std::size_t fakes = 0;
        for (std::size_t i = 0; i < n; ++i) {
            Rng rng(stream_seed(seed, i));
            const detail::Scene scene = detail::Scene::random(rng);
            Sample s;
            s.pixels = scene.render(size);
            s.domain = d.name;
            s.label = static_cast<int>(i % 2);
            if (s.label == 1) {
                const int q = static_cast<int>((i / 2) % 4);
                std::uniform_real_distribution<double> u(0, 1);
                const std::size_t half = size / 2;
                const std::size_t bw = std::max<std::size_t>(3, static_cast<std::size_t>(std::lround(half * (0.55 + 0.3 * u(rng)))));
                const std::size_t bh = std::max<std::size_t>(3, static_cast<std::size_t>(std::lround(half * (0.55 + 0.3 * u(rng)))));
                const std::size_t qx = (q % 2) * half, qy = (q / 2) * half;
                const std::size_t x0 = qx + static_cast<std::size_t>(std::floor(u(rng) * static_cast<double>(half - bw + 1)));
                const std::size_t y0 = qy + static_cast<std::size_t>(std::floor(u(rng) * static_cast<double>(half - bh + 1)));
                const Box box{x0, y0, x0 + bw, y0 + bh};
                const double before = detail::box_gradient(s.pixels, size, box);
                const detail::Scene donor = detail::Scene::random(rng);
                detail::manipulate(s.pixels, size, box, domain, strength, donor, rng);
                const double after = detail::box_gradient(s.pixels, size, box);
                gap_sum += std::abs(after - before) / std::max(before, 1e-6);
                ++fakes;
                s.box = box;
            }
            d.samples.push_back(std::move(s));
        }
        d.gradient_gap = gap_sum / static_cast<double>(fakes);
        if (d.gradient_gap >= opt.min_gradient_gap) return d;
    }
    throw Error("generate_synthetic: manipulations stayed below the gradient-gap floor");
}

}  // namespace fnas
