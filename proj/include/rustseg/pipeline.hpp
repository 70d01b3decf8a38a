#pragma once

// Classify -> localise -> refine driver, its JSON configuration, result
// serialization and the per-stage timing harness.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "image.hpp"
#include "localize.hpp"
#include "network.hpp"
#include "refine.hpp"
#include "synth.hpp"
#include "train.hpp"

namespace rustseg {

enum class RefineMode { pure_crf, advanced };

struct PipelineConfig {
    NetworkConfig network;
    TrainConfig train;
    CrfParams crf;
    RefineMode mode = RefineMode::pure_crf;
    CrfBackend crf_backend = CrfBackend::automatic;
    ScoreKind score = ScoreKind::exp;  // sigmoid saturates on confident models and empties Grad-CAM++ maps
    CamMaps cam_maps = CamMaps::pre_relu;
    double gate_threshold = 0.5;
    std::uint64_t seed = 0;
    bool double_precision_verify = false;
    int threads = 1;

    void validate() const {
        network.validate();
        train.validate();
        crf.validate();
        if (!(gate_threshold > 0.0 && gate_threshold < 1.0)) throw ConfigError("gate_threshold must be in (0, 1)");
        if (threads < 1) throw ConfigError("threads must be >= 1");
    }
};

// --- JSON config ------------------------------------------------------------

namespace detail {

template <class E>
struct EnumNames;

template <>
struct EnumNames<RefineMode> {
    static constexpr std::pair<RefineMode, const char*> table[] = {{RefineMode::pure_crf, "pure"},
                                                                   {RefineMode::advanced, "advanced"}};
};
template <>
struct EnumNames<CrfBackend> {
    static constexpr std::pair<CrfBackend, const char*> table[] = {{CrfBackend::exact, "exact"},
                                                                   {CrfBackend::window, "window"},
                                                                   {CrfBackend::lattice, "lattice"},
                                                                   {CrfBackend::automatic, "auto"}};
};
template <>
struct EnumNames<ScoreKind> {
    static constexpr std::pair<ScoreKind, const char*> table[] = {{ScoreKind::sigmoid, "sigmoid"},
                                                                  {ScoreKind::exp, "exp"}};
};
template <>
struct EnumNames<CamMaps> {
    static constexpr std::pair<CamMaps, const char*> table[] = {{CamMaps::pre_relu, "pre_relu"},
                                                                {CamMaps::post_relu, "post_relu"}};
};

}  // namespace detail

template <class E>
std::string enum_name(E v) {
    for (const auto& [e, n] : detail::EnumNames<E>::table) {
        if (e == v) return n;
    }
    return "?";
}

template <class E>
E parse_enum(const std::string& s, const char* key) {
    for (const auto& [e, n] : detail::EnumNames<E>::table) {
        if (s == n) return e;
    }
    throw ConfigError(std::string("unknown value '") + s + "' for " + key);
}

inline nlohmann::json config_to_json(const PipelineConfig& c) {
    return {
        {"sections", c.network.sections},
        {"base_channels", c.network.base_channels},
        {"input_side", c.network.input_side},
        {"learning_rate", c.train.learning_rate},
        {"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"adam_beta1", c.train.adam_beta1},
        {"adam_beta2", c.train.adam_beta2},
        {"adam_eps", c.train.adam_eps},
        {"validation_fraction", c.train.validation_fraction},
        {"rotation_range_rad", c.train.rotation_range_rad},
        {"augment", c.train.augment},
        {"crf_appearance_sigma_xy", c.crf.appearance_sigma_xy},
        {"crf_appearance_sigma_rgb", c.crf.appearance_sigma_rgb},
        {"crf_appearance_compat", c.crf.appearance_compat},
        {"crf_smooth_sigma_xy", c.crf.smooth_sigma_xy},
        {"crf_smooth_compat", c.crf.smooth_compat},
        {"crf_epochs", c.crf.epochs},
        {"crf_unary_eps", c.crf.unary_eps},
        {"crf_backend", enum_name(c.crf_backend)},
        {"mode", enum_name(c.mode)},
        {"score", enum_name(c.score)},
        {"cam_maps", enum_name(c.cam_maps)},
        {"gate_threshold", c.gate_threshold},
        {"seed", c.seed},
        {"double_precision_verify", c.double_precision_verify},
        {"threads", c.threads},
    };
}

/// Apply the keys present in `j` on top of `base`. Unknown keys are an error.
inline PipelineConfig config_from_json(const nlohmann::json& j, PipelineConfig c = {}) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    const auto known = config_to_json(c);
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.contains(it.key())) throw ConfigError("unknown config key '" + it.key() + "'");
    }
    const auto get = [&](const char* key, auto& field) {
        if (!j.contains(key)) return;
        try {
            field = j.at(key).get<std::decay_t<decltype(field)>>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(std::string("config key '") + key + "' has the wrong type");
        }
    };
    const auto get_enum = [&](const char* key, auto& field) {
        if (!j.contains(key)) return;
        if (!j.at(key).is_string()) throw ConfigError(std::string("config key '") + key + "' must be a string");
        field = parse_enum<std::decay_t<decltype(field)>>(j.at(key).get<std::string>(), key);
    };
    get("sections", c.network.sections);
    get("base_channels", c.network.base_channels);
    get("input_side", c.network.input_side);
    get("learning_rate", c.train.learning_rate);
    get("epochs", c.train.epochs);
    get("batch_size", c.train.batch_size);
    get("adam_beta1", c.train.adam_beta1);
    get("adam_beta2", c.train.adam_beta2);
    get("adam_eps", c.train.adam_eps);
    get("validation_fraction", c.train.validation_fraction);
    get("rotation_range_rad", c.train.rotation_range_rad);
    get("augment", c.train.augment);
    get("crf_appearance_sigma_xy", c.crf.appearance_sigma_xy);
    get("crf_appearance_sigma_rgb", c.crf.appearance_sigma_rgb);
    get("crf_appearance_compat", c.crf.appearance_compat);
    get("crf_smooth_sigma_xy", c.crf.smooth_sigma_xy);
    get("crf_smooth_compat", c.crf.smooth_compat);
    get("crf_epochs", c.crf.epochs);
    get("crf_unary_eps", c.crf.unary_eps);
    get_enum("crf_backend", c.crf_backend);
    get_enum("mode", c.mode);
    get_enum("score", c.score);
    get_enum("cam_maps", c.cam_maps);
    get("gate_threshold", c.gate_threshold);
    get("seed", c.seed);
    get("double_precision_verify", c.double_precision_verify);
    get("threads", c.threads);
    c.train.seed = c.seed;
    c.validate();
    return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path, PipelineConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    try {
        return config_from_json(nlohmann::json::parse(in), base);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
}

// --- dataset directories ----------------------------------------------------

/// Sorted *.ppm files directly under dir.
inline std::vector<std::filesystem::path> list_ppm(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw ConfigError("not a directory: " + dir.string());
    std::vector<std::filesystem::path> out;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".ppm") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

/// root/corrosion/*.ppm and root/not_corrosion/*.ppm with image-level labels.
inline std::vector<LabeledImage> load_labeled_dir(const std::filesystem::path& root) {
    std::vector<LabeledImage> out;
    for (auto [sub, label] : {std::pair{"corrosion", Label::corrosion}, std::pair{"not_corrosion", Label::not_corrosion}}) {
        for (const auto& p : list_ppm(root / sub)) out.push_back({load_ppm(p), label});
    }
    return out;
}

/// Same layout as load_labeled_dir, plus root/truth/<name>.pgm for scoring.
inline void write_synth_dataset(const std::filesystem::path& root, const std::vector<SynthSample>& samples) {
    for (const char* sub : {"corrosion", "not_corrosion", "truth"}) std::filesystem::create_directories(root / sub);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "%05zu", i);
        const auto& s = samples[i];
        const bool pos = s.sample.label == Label::corrosion;
        save_ppm(root / (pos ? "corrosion" : "not_corrosion") / (std::string(name) + ".ppm"), s.sample.image);
        save_pgm(root / "truth" / (std::string(name) + ".pgm"), s.truth);
    }
}

// --- segmentation -----------------------------------------------------------

struct StageTimings {
    double classify_s = 0.0;
    double localise_s = 0.0;
    double refine_s = 0.0;
    double end_to_end_s = 0.0;
};

enum class SegmentStatus {
    not_corrosion,        // gated out by the classifier
    localization_failed,  // empty heatmap or nothing survived the threshold filter / trim
    segmented,
};

inline const char* status_name(SegmentStatus s) {
    switch (s) {
        case SegmentStatus::not_corrosion: return "not_corrosion";
        case SegmentStatus::localization_failed: return "localization_failed";
        case SegmentStatus::segmented: return "segmented";
    }
    return "?";
}

struct SegmentResult {
    SegmentStatus status = SegmentStatus::not_corrosion;
    Prediction prediction;
    std::optional<Heatmap> heatmap;      // normalized, feature-grid resolution
    double threshold = 0.0;
    std::optional<MaskU8> thresholded;   // network resolution
    std::optional<MaskU8> refined;       // network resolution
    std::optional<MaskU8> mask;          // original resolution
    std::optional<RgbImage> overlay;     // original resolution
    StageTimings timings;
    std::string message;

    bool is_corrosion() const { return status != SegmentStatus::not_corrosion; }
};

inline std::string confidence_message(const Prediction& p, bool detected) {
    char buf[128];
    if (detected) {
        std::snprintf(buf, sizeof buf, "detected corrosion in the image with a %.2f%% confidence", 100.0 * p.corrosion_prob);
    } else {
        std::snprintf(buf, sizeof buf, "no corrosion detected (%.2f%% corrosion confidence)", 100.0 * p.corrosion_prob);
    }
    return buf;
}

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t) {
    return std::chrono::duration<double>(Clock::now() - t).count();
}

template <class T>
struct ClassifyOutput {
    Prediction prediction;
    ActivationCache<T> cache;
};

template <class T>
ClassifyOutput<T> classify_at(const RgbImage& resized, const ModelWeights<T>& model, int threads) {
    const auto input = to_tensor<T>(resized.pixels(), resized.height(), resized.width());
    auto cache = forward_cached(input, model, CacheMode::minimal, threads);
    return {predict(cache), std::move(cache)};
}

}  // namespace detail

/// Classification only: resize to the network side, forward, report.
inline Prediction classify_image(const RgbImage& image, const ModelWeights<float>& model, int threads = 1) {
    const auto resized = resize_bilinear(image, model.config.input_side);
    return detail::classify_at(resized, model, threads).prediction;
}

/// Stage attribution for timings: classify = resize + 8-bit to float + forward;
/// localise = score derivatives + Grad-CAM++ + normalization; refine = upsample
/// + threshold filter + 8-bit conversion + CRF (or K-means path) + resize back;
/// end-to-end additionally covers the overlay.
template <class T>
SegmentResult segment_image_as(const RgbImage& image, const ModelWeights<T>& model, const PipelineConfig& cfg) {
    using detail::Clock;
    SegmentResult r;
    const auto t_start = Clock::now();
    const int side = model.config.input_side;

    auto t = Clock::now();
    RgbImage resized;
    detail::ClassifyOutput<T> cls;
    try {
        resized = resize_bilinear(image, side);
        cls = detail::classify_at(resized, model, cfg.threads);
    } catch (const std::exception& e) {
        throw StageError("classify", e.what());
    }
    r.prediction = cls.prediction;
    r.timings.classify_s = detail::seconds_since(t);

    if (!r.prediction.is_corrosion(cfg.gate_threshold)) {
        r.status = SegmentStatus::not_corrosion;
        r.message = confidence_message(r.prediction, false);
        r.timings.end_to_end_s = detail::seconds_since(t_start);
        return r;
    }

    t = Clock::now();
    NormalizedHeatmap norm;
    try {
        const auto raw = grad_cam_pp(cls.cache, model, cfg.score, cfg.cam_maps);
        norm = normalize_heatmap(raw);
    } catch (const std::exception& e) {
        throw StageError("localise", e.what());
    }
    r.heatmap = norm.map;
    r.timings.localise_s = detail::seconds_since(t);

    t = Clock::now();
    try {
        if (norm.localized) {
            r.threshold = dynamic_threshold(norm.map);
            r.thresholded = apply_threshold(upsample_bilinear(norm.map, side), r.threshold);
        }
        if (!norm.localized || count_nonzero(*r.thresholded) == 0) {
            r.status = SegmentStatus::localization_failed;
            r.message = confidence_message(r.prediction, true) + "; localization failed";
            r.timings.refine_s = 0.0;
            r.timings.end_to_end_s = detail::seconds_since(t_start);
            return r;
        }
        CrfOptions opt;
        opt.backend = cfg.crf_backend;
        if (cfg.mode == RefineMode::pure_crf) {
            r.refined = crf_refine(resized, *r.thresholded, cfg.crf, opt);
        } else {
            auto adv = advanced_refine(resized, *r.thresholded, cfg.crf, cfg.seed, opt);
            if (adv.empty) {
                r.status = SegmentStatus::localization_failed;
                r.message = confidence_message(r.prediction, true) + "; mask empty after K-means trim";
                r.refined = adv.mask;
            } else {
                r.refined = std::move(adv.mask);
            }
        }
        r.mask = resize_nearest(*r.refined, image.height(), image.width());
    } catch (const std::exception& e) {
        throw StageError("refine", e.what());
    }
    r.timings.refine_s = detail::seconds_since(t);

    r.overlay = overlay(image, *r.mask);
    if (r.status != SegmentStatus::localization_failed) {
        r.status = SegmentStatus::segmented;
        r.message = confidence_message(r.prediction, true);
    }
    r.timings.end_to_end_s = detail::seconds_since(t_start);
    return r;
}

inline SegmentResult segment_image(const RgbImage& image, const ModelWeights<float>& model, const PipelineConfig& cfg) {
    if (cfg.double_precision_verify) return segment_image_as(image, model.cast<double>(), cfg);
    return segment_image_as(image, model, cfg);
}

inline nlohmann::json result_to_json(const SegmentResult& r) {
    nlohmann::json j{
        {"is_corrosion", r.is_corrosion()},
        {"raw_output", r.prediction.raw_output},
        {"corrosion_prob", r.prediction.corrosion_prob},
        {"status", status_name(r.status)},
        {"message", r.message},
        {"timings",
         {{"classify_s", r.timings.classify_s},
          {"localise_s", r.timings.localise_s},
          {"refine_s", r.timings.refine_s},
          {"end_to_end_s", r.timings.end_to_end_s}}},
    };
    if (r.heatmap) j["threshold"] = r.threshold;
    if (r.mask) j["mask_pixels"] = count_nonzero(*r.mask);
    return j;
}

/// One file per workflow box: classification, heatmap, filtered mask,
/// refined mask, overlay (only the boxes the image reached).
inline std::vector<std::filesystem::path> write_debug_artifacts(const std::filesystem::path& dir, const SegmentResult& r) {
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> written;
    {
        const auto p = dir / "1_classify.json";
        std::ofstream(p) << nlohmann::json{{"raw_output", r.prediction.raw_output},
                                           {"corrosion_prob", r.prediction.corrosion_prob},
                                           {"is_corrosion", r.is_corrosion()}}
                                .dump(2)
                         << "\n";
        written.push_back(p);
    }
    if (r.heatmap) {
        written.push_back(dir / "2_localise_heatmap.pgm");
        save_pgm(written.back(), heatmap_to_gray(*r.heatmap));
    }
    if (r.thresholded) {
        written.push_back(dir / "3_filter_mask.pgm");
        save_pgm(written.back(), *r.thresholded);
    }
    if (r.refined) {
        written.push_back(dir / "4_refine_mask.pgm");
        save_pgm(written.back(), *r.refined);
    }
    if (r.overlay) {
        written.push_back(dir / "5_overlay.ppm");
        save_ppm(written.back(), *r.overlay);
    }
    return written;
}

// --- timing harness ---------------------------------------------------------

struct BenchReport {
    StageTimings mean;
    int runs = 0;
    std::size_t images_used = 0;
    std::vector<std::size_t> excluded;  // indices gated out or not localized
    int threads = 1;
    std::string refine_label;

    std::vector<std::pair<std::string, double>> rows() const {
        return {{"Classify", mean.classify_s},
                {"Localise (Grad-CAM++)", mean.localise_s},
                {refine_label, mean.refine_s},
                {"End-to-End", mean.end_to_end_s}};
    }
};

inline std::string refine_row_label(const PipelineConfig& cfg) {
    if (cfg.mode == RefineMode::advanced) {
        return "Refine (K-means + CRF: " + std::to_string(kAdvancedCrfEpochs) + " Epochs)";
    }
    return "Refine (CRF: " + std::to_string(cfg.crf.epochs) + " Epochs)";
}

/// Wall-clock per stage, averaged over every (image, run) pair of the images
/// that reach the refine stage. Images that do not are excluded.
inline BenchReport bench(const std::vector<RgbImage>& images, const ModelWeights<float>& model,
                         const PipelineConfig& cfg, int runs, std::ostream* warn = nullptr) {
    if (runs < 1) throw ConfigError("bench runs must be >= 1");
    BenchReport rep;
    rep.runs = runs;
    rep.threads = cfg.threads;
    rep.refine_label = refine_row_label(cfg);
    std::vector<bool> usable(images.size(), true);
    std::size_t samples = 0;
    for (int run = 0; run < runs; ++run) {
        for (std::size_t i = 0; i < images.size(); ++i) {
            if (!usable[i]) continue;
            const auto r = segment_image(images[i], model, cfg);
            if (r.status != SegmentStatus::segmented) {
                usable[i] = false;
                rep.excluded.push_back(i);
                if (warn) *warn << "warning: bench image " << i << " excluded (" << status_name(r.status) << ")\n";
                continue;
            }
            rep.mean.classify_s += r.timings.classify_s;
            rep.mean.localise_s += r.timings.localise_s;
            rep.mean.refine_s += r.timings.refine_s;
            rep.mean.end_to_end_s += r.timings.end_to_end_s;
            ++samples;
        }
    }
    // an image excluded in a later run may have contributed earlier samples; drop them
    if (!rep.excluded.empty() && samples > 0) {
        rep.mean = {};
        samples = 0;
        for (int run = 0; run < runs; ++run) {
            for (std::size_t i = 0; i < images.size(); ++i) {
                if (!usable[i]) continue;
                const auto r = segment_image(images[i], model, cfg);
                rep.mean.classify_s += r.timings.classify_s;
                rep.mean.localise_s += r.timings.localise_s;
                rep.mean.refine_s += r.timings.refine_s;
                rep.mean.end_to_end_s += r.timings.end_to_end_s;
                ++samples;
            }
        }
    }
    rep.images_used = static_cast<std::size_t>(std::count(usable.begin(), usable.end(), true));
    if (samples > 0) {
        const double inv = 1.0 / static_cast<double>(samples);
        rep.mean.classify_s *= inv;
        rep.mean.localise_s *= inv;
        rep.mean.refine_s *= inv;
        rep.mean.end_to_end_s *= inv;
    }
    return rep;
}

inline std::string format_bench_table(const BenchReport& rep) {
    std::ostringstream os;
    os << std::left << std::setw(34) << "Task" << "Time (s)\n";
    for (const auto& [name, v] : rep.rows()) {
        os << std::left << std::setw(34) << name << std::fixed << std::setprecision(4) << v << "\n";
    }
    os << "averaged over " << rep.runs << " run(s) x " << rep.images_used << " image(s), " << rep.threads
       << " thread(s); excludes image loading\n";
    return os.str();
}

inline nlohmann::json bench_to_json(const BenchReport& rep) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& [name, v] : rep.rows()) rows.push_back({{"task", name}, {"time_s", v}});
    return {{"rows", rows},
            {"runs", rep.runs},
            {"images_used", rep.images_used},
            {"excluded", rep.excluded},
            {"threads", rep.threads}};
}

}  // namespace rustseg
