#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "trust/errors.hpp"
#include "trust/io_png.hpp"
#include "trust/rng.hpp"

namespace trust {

// Photometric "device" signature: how one scanner renders the same anatomy.
struct DomainSpec {
    std::string name = "device";
    double brightness = 0.0;      // [-0.3, 0.3]
    double contrast = 1.0;        // [0.6, 1.6]
    double gamma = 1.0;           // [0.5, 2.0]
    std::size_t speckle_grain = 4;  // pixels
    double speckle_strength = 0.25;  // [0, 0.5]
    double vignette = 0.1;           // [0, 0.5]
    std::uint64_t seed = 1;

    void validate() const {
        auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
        if (!in(brightness, -0.3, 0.3)) throw ConfigError(name + ": brightness out of [-0.3, 0.3]");
        if (!in(contrast, 0.6, 1.6)) throw ConfigError(name + ": contrast out of [0.6, 1.6]");
        if (!in(gamma, 0.5, 2.0)) throw ConfigError(name + ": gamma out of [0.5, 2.0]");
        if (speckle_grain < 1) throw ConfigError(name + ": speckle grain must be >= 1");
        if (!in(speckle_strength, 0.0, 0.5)) throw ConfigError(name + ": speckle strength out of [0, 0.5]");
        if (!in(vignette, 0.0, 0.5)) throw ConfigError(name + ": vignette out of [0, 0.5]");
    }
};

struct Sample {
    std::vector<float> image;       // H*W grayscale in [0,1]
    std::vector<std::uint8_t> mask; // H*W binary lesion mask
    int label = 0;                  // 0 benign, 1 malignant
    std::string domain;
    std::string id;
};

struct Dataset {
    std::size_t resolution = 0;
    std::vector<Sample> samples;

    std::size_t size() const { return samples.size(); }
};

namespace detail {

// Band-limited value noise: a coarse uniform grid interpolated bilinearly.
// Amplitude stays within [-1, 1].
inline std::vector<double> value_noise(std::size_t h, std::size_t w, std::size_t grain, Rng& rng) {
    const std::size_t gh = h / grain + 2, gw = w / grain + 2;
    std::vector<double> grid(gh * gw);
    for (auto& g : grid) g = rng.uniform(-1.0, 1.0);
    std::vector<double> out(h * w);
    for (std::size_t y = 0; y < h; ++y) {
        const double fy = static_cast<double>(y) / static_cast<double>(grain);
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const double ty = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < w; ++x) {
            const double fx = static_cast<double>(x) / static_cast<double>(grain);
            const std::size_t x0 = static_cast<std::size_t>(fx);
            const double tx = fx - static_cast<double>(x0);
            const double a = grid[y0 * gw + x0], b = grid[y0 * gw + x0 + 1];
            const double c = grid[(y0 + 1) * gw + x0], d = grid[(y0 + 1) * gw + x0 + 1];
            out[y * w + x] = (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
        }
    }
    return out;
}

struct LesionParams {
    double cx, cy, ra, rb, theta, depth, irregularity;
    double wave_amp[4];
    double wave_phase[4];
};

// Photometric styling of one pre-style value; rho2 is the squared normalized
// distance from the image center (1 at the corners).
inline double apply_style(const DomainSpec& spec, double v, double rho2) {
    v = std::clamp(v, 0.0, 1.0);
    v = std::pow(v, spec.gamma);
    v = (v - 0.5) * spec.contrast + 0.5;
    v += spec.brightness;
    v *= 1.0 - spec.vignette * rho2;
    return std::clamp(v, 0.0, 1.0);
}

inline double boundary_modulation(const LesionParams& lp, double phi) {
    double num = 0.0, den = 0.0;
    for (int k = 0; k < 4; ++k) {
        num += lp.wave_amp[k] * std::sin(static_cast<double>(k + 3) * phi + lp.wave_phase[k]);
        den += lp.wave_amp[k];
    }
    return 1.0 + lp.irregularity * num / den;
}

}  // namespace detail

inline std::string sample_id(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04zu", index);
    return buf;
}

// Boundary irregularity at or above this amplitude makes a lesion malignant;
// the generator assigns the amplitude from the label, never the reverse.
inline constexpr double kIrregularityThreshold = 0.10;
inline constexpr double kBenignIrregularity = 0.03;
inline constexpr double kMalignantIrregularity = 0.30;

// One synthetic ultrasound-like sample: multiplicative speckle over a soft
// background, a single elliptical lesion (smooth = benign, irregular
// boundary = malignant), then the domain's photometric styling.
inline Sample generate_sample(const DomainSpec& spec, std::size_t resolution, std::size_t index,
                              int label) {
    const std::size_t h = resolution, w = resolution;
    const double min_cover = 0.01, max_cover = 0.40;
    for (std::uint64_t attempt = 0; attempt < 20; ++attempt) {
        Rng rng(Rng::mix(spec.seed, index * 64 + attempt));
        // pre-style base: speckled background
        const double base = rng.uniform(0.30, 0.42);
        auto noise = detail::value_noise(h, w, spec.speckle_grain, rng);
        std::vector<double> img(h * w);
        for (std::size_t i = 0; i < h * w; ++i)
            img[i] = base * (1.0 + spec.speckle_strength * noise[i]);

        detail::LesionParams lp;
        lp.cx = rng.uniform(0.32, 0.68) * static_cast<double>(w);
        lp.cy = rng.uniform(0.32, 0.68) * static_cast<double>(h);
        const double frac = rng.uniform(0.05, 0.16);
        const double aspect = rng.uniform(0.6, 1.0);
        lp.ra = std::sqrt(frac * static_cast<double>(h * w) * aspect / 3.14159265358979323846);
        lp.rb = lp.ra / aspect;
        // a boundary needs at least a couple of pixels of radius to exist
        if (lp.ra < 2.0 || lp.rb < 2.0) continue;
        lp.theta = rng.uniform(0.0, 3.14159265358979323846);
        lp.depth = rng.uniform(0.50, 0.65);
        lp.irregularity = label == 1 ? kMalignantIrregularity : kBenignIrregularity;
        for (int k = 0; k < 4; ++k) {
            lp.wave_amp[k] = rng.uniform(0.5, 1.0);
            lp.wave_phase[k] = rng.uniform(0.0, 6.283185307179586);
        }

        std::vector<std::uint8_t> mask(h * w, 0);
        const double ct = std::cos(lp.theta), st = std::sin(lp.theta);
        std::size_t covered = 0;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const double dx = static_cast<double>(x) - lp.cx;
                const double dy = static_cast<double>(y) - lp.cy;
                const double u = (dx * ct + dy * st) / lp.ra;
                const double v = (-dx * st + dy * ct) / lp.rb;
                const double r = std::sqrt(u * u + v * v);
                const double rho = detail::boundary_modulation(lp, std::atan2(v, u));
                if (r <= rho) {
                    mask[y * w + x] = 1;
                    ++covered;
                }
                // soft darkening toward the lesion interior
                const double fade = std::clamp((rho - r) / 0.07, 0.0, 1.0);
                img[y * w + x] *= 1.0 - lp.depth * fade;
            }
        }
        const double cover = static_cast<double>(covered) / static_cast<double>(h * w);
        if (cover < min_cover || cover > max_cover) continue;

        // domain styling: gamma, contrast, brightness, vignette, clamp
        Sample s;
        s.image.resize(h * w);
        s.mask = std::move(mask);
        s.label = label;
        s.domain = spec.name;
        s.id = sample_id(index);
        const double half_diag =
            std::sqrt(static_cast<double>(h * h + w * w)) / 2.0;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const double ddx = static_cast<double>(x) - static_cast<double>(w) / 2.0;
                const double ddy = static_cast<double>(y) - static_cast<double>(h) / 2.0;
                const double rho2 = (ddx * ddx + ddy * ddy) / (half_diag * half_diag);
                s.image[y * w + x] =
                    static_cast<float>(detail::apply_style(spec, img[y * w + x], rho2));
            }
        }
        return s;
    }
    throw DataError("generate_sample: could not fit a lesion at resolution " +
                    std::to_string(resolution));
}

// Shipped default spec pair: a fairly neutral target device and a source
// device with a strong photometric shift. The gap degrades a target-trained
// classifier while lesion geometry stays intact.
inline DomainSpec default_device_b() {
    DomainSpec s;
    s.name = "device-B";
    s.brightness = 0.0;
    s.contrast = 1.0;
    s.gamma = 1.0;
    s.speckle_grain = 4;
    s.speckle_strength = 0.18;
    s.vignette = 0.08;
    s.seed = 101;
    return s;
}

inline DomainSpec default_device_a() {
    DomainSpec s;
    s.name = "device-A";
    s.brightness = 0.24;
    s.contrast = 0.72;
    s.gamma = 0.62;
    s.speckle_grain = 2;
    s.speckle_strength = 0.42;
    s.vignette = 0.38;
    s.seed = 202;
    return s;
}

// Deterministic per (spec.seed, index); labels alternate so every dataset is
// balanced within one sample.
inline Dataset generate_domain(const DomainSpec& spec, std::size_t n, std::size_t resolution) {
    spec.validate();
    if (n < 2) throw ConfigError("generate_domain: need n >= 2 so both classes appear");
    Dataset ds;
    ds.resolution = resolution;
    ds.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        ds.samples.push_back(generate_sample(spec, resolution, i, static_cast<int>(i % 2)));
    }
    return ds;
}

// Seeded stratified split. Train gets round(ratio * n) samples overall with
// per-class counts within one sample of the stratified ideal.
inline std::pair<Dataset, Dataset> split(const Dataset& ds, double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split: ratio must be in (0, 1)");
    std::vector<std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const int l = ds.samples[i].label;
        if (l < 0) throw ContractError("split: negative label");
        if (static_cast<std::size_t>(l) >= by_class.size()) by_class.resize(l + 1);
        by_class[l].push_back(i);
    }
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        if (by_class[c].size() < 2) {
            throw DataError("split: class " + std::to_string(c) +
                            " has fewer than 2 samples, cannot stratify");
        }
    }
    const std::size_t target_train =
        static_cast<std::size_t>(std::llround(ratio * static_cast<double>(ds.samples.size())));
    Rng rng(seed);
    std::vector<std::size_t> take(by_class.size());
    std::size_t total = 0;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        rng.shuffle(by_class[c]);
        take[c] = static_cast<std::size_t>(
            std::llround(ratio * static_cast<double>(by_class[c].size())));
        take[c] = std::min(take[c], by_class[c].size() - 1);
        take[c] = std::max<std::size_t>(take[c], 1);
        total += take[c];
    }
    // nudge per-class counts so the overall train size is exact
    for (std::size_t c = 0; total != target_train && c < by_class.size(); ++c) {
        while (total > target_train && take[c] > 1) {
            --take[c];
            --total;
        }
        while (total < target_train && take[c] + 1 < by_class[c].size()) {
            ++take[c];
            ++total;
        }
    }
    Dataset train, test;
    train.resolution = test.resolution = ds.resolution;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        for (std::size_t k = 0; k < by_class[c].size(); ++k) {
            (k < take[c] ? train : test).samples.push_back(ds.samples[by_class[c][k]]);
        }
    }
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Directory I/O: <dir>/images/NNNN.png, <dir>/masks/NNNN.png, <dir>/labels.csv
// ---------------------------------------------------------------------------

inline void save_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks");
    std::ofstream csv(fs::path(dir) / "labels.csv");
    if (!csv) throw DataError("cannot write " + (fs::path(dir) / "labels.csv").string());
    csv << "id,label\n";
    const std::size_t r = ds.resolution;
    std::vector<std::uint8_t> buf(r * r);
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const Sample& s = ds.samples[i];
        const std::string id = s.id.empty() ? sample_id(i) : s.id;
        for (std::size_t p = 0; p < r * r; ++p)
            buf[p] = static_cast<std::uint8_t>(
                std::lround(std::clamp(s.image[p], 0.0f, 1.0f) * 255.0f));
        write_gray_png((fs::path(dir) / "images" / (id + ".png")).string(), buf.data(), r, r);
        for (std::size_t p = 0; p < r * r; ++p) buf[p] = s.mask[p] ? 255 : 0;
        write_gray_png((fs::path(dir) / "masks" / (id + ".png")).string(), buf.data(), r, r);
        csv << id << "," << s.label << "\n";
    }
}

// Loads a dataset saved in the layout above. The domain tag is taken from the
// directory structure (<root>/<domain>/<split>) unless given explicitly.
inline Dataset load_dataset(const std::string& dir, std::string domain_tag = "") {
    namespace fs = std::filesystem;
    const fs::path root(dir);
    if (domain_tag.empty()) {
        const std::string leaf = root.filename().string();
        domain_tag = (leaf == "train" || leaf == "test") && root.has_parent_path()
                         ? root.parent_path().filename().string()
                         : leaf;
    }
    std::ifstream csv(root / "labels.csv");
    if (!csv) throw DataError("missing labels.csv in " + dir);
    Dataset ds;
    std::string line;
    if (!std::getline(csv, line)) throw DataError("empty labels.csv in " + dir);
    bool header = line.rfind("id,", 0) == 0;
    std::size_t lineno = 1;
    do {
        if (header) {
            header = false;
            continue;
        }
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) {
            throw DataError("malformed labels.csv line " + std::to_string(lineno) + " in " + dir);
        }
        Sample s;
        s.id = line.substr(0, comma);
        try {
            s.label = std::stoi(line.substr(comma + 1));
        } catch (const std::exception&) {
            throw DataError("malformed label on line " + std::to_string(lineno) + " in " + dir);
        }
        s.domain = domain_tag;

        const std::string img_path = (root / "images" / (s.id + ".png")).string();
        if (!fs::exists(img_path)) throw DataError("missing image file: " + img_path);
        GrayImage img = read_gray_png(img_path);
        if (ds.resolution == 0) {
            if (img.width != img.height) throw DataError("non-square image: " + img_path);
            ds.resolution = img.width;
        }
        if (img.width != ds.resolution || img.height != ds.resolution) {
            throw DataError("inconsistent resolution: " + img_path);
        }
        s.image.resize(img.pixels.size());
        for (std::size_t p = 0; p < img.pixels.size(); ++p)
            s.image[p] = static_cast<float>(img.pixels[p]) / 255.0f;

        const std::string mask_path = (root / "masks" / (s.id + ".png")).string();
        if (!fs::exists(mask_path)) throw DataError("missing mask file: " + mask_path);
        GrayImage mk = read_gray_png(mask_path);
        if (mk.width != ds.resolution || mk.height != ds.resolution) {
            throw DataError("mask resolution mismatch: " + mask_path);
        }
        s.mask.resize(mk.pixels.size());
        for (std::size_t p = 0; p < mk.pixels.size(); ++p) s.mask[p] = mk.pixels[p] > 127 ? 1 : 0;
        ds.samples.push_back(std::move(s));
        ++lineno;
    } while (std::getline(csv, line));
    if (ds.samples.empty()) throw DataError("no samples listed in " + dir);
    return ds;
}

}  // namespace trust
