#pragma once

// Synthetic stand-in for a photo corpus: rust-coloured irregular blobs over
// plain backgrounds ("corrosion") and background-only images, some with
// near-rust confounder shapes ("not-corrosion"). The ground-truth masks are
// returned next to, not inside, the training samples.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "random.hpp"
#include "train.hpp"

namespace rustseg {

struct ColorBand {
    std::array<int, 3> lo{};
    std::array<int, 3> hi{};

    bool disjoint_from(const ColorBand& o) const {
        for (int c = 0; c < 3; ++c) {
            if (hi[c] < o.lo[c] || o.hi[c] < lo[c]) return true;
        }
        return false;
    }
    bool contains(const std::array<int, 3>& rgb) const {
        for (int c = 0; c < 3; ++c) {
            if (rgb[c] < lo[c] || rgb[c] > hi[c]) return false;
        }
        return true;
    }
};

struct SynthSpec {
    int count = 100;
    int side = 44;
    int blob_count_min = 1;
    int blob_count_max = 2;
    double blob_radius_min = 7.0;
    double blob_radius_max = 12.0;
    double corrosion_fraction = 0.5;
    double confounder_fraction = 0.5;  // share of not-corrosion images with a near-rust shape
    ColorBand rust{{150, 55, 20}, {200, 95, 50}};
    ColorBand confounder{{150, 125, 60}, {205, 165, 100}};
    std::vector<std::array<int, 3>> background_palette{
        {120, 120, 120}, {90, 110, 140}, {80, 120, 80}, {170, 170, 160}, {55, 60, 70}, {130, 160, 200}};
    int background_jitter = 15;
    double noise_sigma = 6.0;
    std::uint64_t seed = 0;

    /// Defaults with blob radii scaled to the given side.
    static SynthSpec for_side(int side, int count, std::uint64_t seed) {
        SynthSpec s;
        s.side = side;
        s.count = count;
        s.seed = seed;
        s.blob_radius_min = std::max(2.0, side * 7.0 / 44.0);
        s.blob_radius_max = std::max(s.blob_radius_min, side * 12.0 / 44.0);
        return s;
    }

    void validate() const {
        if (count < 0) throw ConfigError("synth count must be >= 0");
        if (side < 8) throw ConfigError("synth side must be >= 8");
        if (blob_radius_min < 2.0 || blob_radius_max < blob_radius_min) throw ConfigError("synth blob radius range invalid");
        if (blob_count_min < 1 || blob_count_max < blob_count_min) throw ConfigError("synth blob count range invalid");
        if (background_palette.empty()) throw ConfigError("synth background palette is empty");
        if (!rust.disjoint_from(confounder)) throw ConfigError("rust and confounder colour bands overlap in every channel");
        for (const auto& bg : background_palette) {
            // jittered background must stay outside the rust band in some channel
            ColorBand b{{bg[0] - background_jitter, bg[1] - background_jitter, bg[2] - background_jitter},
                        {bg[0] + background_jitter, bg[1] + background_jitter, bg[2] + background_jitter}};
            if (!rust.disjoint_from(b)) throw ConfigError("a background colour overlaps the rust band in every channel");
        }
    }
};

struct SynthSample {
    LabeledImage sample;
    MaskU8 truth;  // scoring only
};

namespace detail {

struct Blob {
    double cx, cy, radius;
    std::array<double, 3> amp, phase;

    bool contains(double x, double y) const {
        const double dx = x - cx, dy = y - cy;
        const double d = std::sqrt(dx * dx + dy * dy);
        const double th = std::atan2(dy, dx);
        double r = radius;
        for (int k = 0; k < 3; ++k) r *= 1.0 + amp[static_cast<std::size_t>(k)] * std::sin((k + 2) * th + phase[static_cast<std::size_t>(k)]);
        return d <= r;
    }
};

inline Blob random_blob(Rng& rng, const SynthSpec& s) {
    Blob b{};
    b.radius = rng.uniform(s.blob_radius_min, s.blob_radius_max);
    const double margin = 0.5 * b.radius;
    b.cx = rng.uniform(margin, s.side - 1 - margin);
    b.cy = rng.uniform(margin, s.side - 1 - margin);
    for (int k = 0; k < 3; ++k) {
        b.amp[static_cast<std::size_t>(k)] = rng.uniform(0.0, 0.12);
        b.phase[static_cast<std::size_t>(k)] = rng.uniform(0.0, 2.0 * M_PI);
    }
    return b;
}

inline std::array<double, 3> band_color(Rng& rng, const ColorBand& band) {
    std::array<double, 3> c{};
    for (int k = 0; k < 3; ++k) c[static_cast<std::size_t>(k)] = rng.uniform(band.lo[static_cast<std::size_t>(k)], band.hi[static_cast<std::size_t>(k)]);
    return c;
}

inline std::uint8_t clamp_to_band(double v, int lo, int hi) {
    return static_cast<std::uint8_t>(std::clamp(static_cast<int>(std::lround(v)), lo, hi));
}

}  // namespace detail

inline SynthSample synth_image(const SynthSpec& s, int index) {
    Rng rng(derive_seed(s.seed, static_cast<std::uint64_t>(index)));
    const auto n = static_cast<double>(index);
    const bool corrosion = std::floor((n + 1) * s.corrosion_fraction) > std::floor(n * s.corrosion_fraction);

    const auto& base = s.background_palette[rng.below(s.background_palette.size())];
    std::array<double, 3> bg{};
    for (int c = 0; c < 3; ++c) bg[static_cast<std::size_t>(c)] = base[static_cast<std::size_t>(c)] + rng.uniform(-s.background_jitter, s.background_jitter);
    const double gx = rng.uniform(-10.0, 10.0) / s.side;
    const double gy = rng.uniform(-10.0, 10.0) / s.side;

    std::vector<detail::Blob> blobs;
    std::vector<std::array<double, 3>> blob_colors;
    bool confounder = false;
    bool rect = false;
    double rx0 = 0, ry0 = 0, rx1 = 0, ry1 = 0;
    std::array<double, 3> conf_color{};
    if (corrosion) {
        const int k = s.blob_count_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.blob_count_max - s.blob_count_min + 1)));
        for (int i = 0; i < k; ++i) {
            blobs.push_back(detail::random_blob(rng, s));
            blob_colors.push_back(detail::band_color(rng, s.rust));
        }
    } else if (rng.uniform() < s.confounder_fraction) {
        confounder = true;
        conf_color = detail::band_color(rng, s.confounder);
        rect = rng.coin();
        if (rect) {
            const double w = rng.uniform(s.blob_radius_min, 2.0 * s.blob_radius_max);
            const double h = rng.uniform(s.blob_radius_min, 2.0 * s.blob_radius_max);
            rx0 = rng.uniform(0.0, s.side - w);
            ry0 = rng.uniform(0.0, s.side - h);
            rx1 = rx0 + w;
            ry1 = ry0 + h;
        } else {
            blobs.push_back(detail::random_blob(rng, s));
        }
    }

    SynthSample out{{RgbImage(s.side, s.side), corrosion ? Label::corrosion : Label::not_corrosion},
                    MaskU8(s.side, s.side)};
    auto& img = out.sample.image;
    for (int y = 0; y < s.side; ++y) {
        for (int x = 0; x < s.side; ++x) {
            std::array<double, 3> c = bg;
            const double shade = gx * (x - s.side / 2.0) * 4.0 + gy * (y - s.side / 2.0) * 4.0;
            for (auto& v : c) v += shade;
            int inside = -1;
            if (corrosion || (confounder && !rect)) {
                for (std::size_t b = 0; b < blobs.size(); ++b) {
                    if (blobs[b].contains(x, y)) inside = static_cast<int>(b);
                }
            } else if (confounder) {
                if (x >= rx0 && x < rx1 && y >= ry0 && y < ry1) inside = 0;
            }
            const bool is_rust = corrosion && inside >= 0;
            const bool is_conf = confounder && inside >= 0;
            if (is_rust) c = blob_colors[static_cast<std::size_t>(inside)];
            if (is_conf) c = conf_color;
            const double sigma = (is_rust ? 2.0 : 1.0) * s.noise_sigma;
            for (int ch = 0; ch < 3; ++ch) {
                const double v = c[static_cast<std::size_t>(ch)] + sigma * rng.normal();
                if (is_rust) {
                    img.at(y, x, ch) = detail::clamp_to_band(v, s.rust.lo[static_cast<std::size_t>(ch)], s.rust.hi[static_cast<std::size_t>(ch)]);
                } else if (is_conf) {
                    img.at(y, x, ch) = detail::clamp_to_band(v, s.confounder.lo[static_cast<std::size_t>(ch)], s.confounder.hi[static_cast<std::size_t>(ch)]);
                } else {
                    img.at(y, x, ch) = detail::clamp_to_band(v, 0, 255);
                }
            }
            if (is_rust) out.truth.at(y, x) = 255;
        }
    }
    return out;
}

inline std::vector<SynthSample> synth_dataset(const SynthSpec& s) {
    s.validate();
    std::vector<SynthSample> out;
    out.reserve(static_cast<std::size_t>(s.count));
    for (int i = 0; i < s.count; ++i) out.push_back(synth_image(s, i));
    return out;
}

/// Image + label views for training.
inline std::vector<LabeledImage> training_view(const std::vector<SynthSample>& samples) {
    std::vector<LabeledImage> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.sample);
    return out;
}

/// Intersection over union of the nonzero supports; 1 when both are empty.
inline double mask_iou(const MaskU8& a, const MaskU8& b) {
    if (!a.same_size(b.height(), b.width())) throw DimensionError("mask_iou: size mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.pixel_count(); ++i) {
        const bool x = a.pixels()[i] != 0, y = b.pixels()[i] != 0;
        inter += x && y;
        uni += x || y;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace rustseg
