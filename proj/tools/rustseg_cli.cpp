// rustseg: train / segment / classify / eval / bench / synth.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "rustseg/metrics.hpp"
#include "rustseg/model_io.hpp"
#include "rustseg/pipeline.hpp"
#include "rustseg/synth.hpp"

namespace fs = std::filesystem;
using namespace rustseg;

namespace {

struct Common {
    std::string config_path;
    std::string mode;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "JSON config (flat keys)")->check(CLI::ExistingFile);
    cmd->add_option("--mode", c.mode, "refinement path")->check(CLI::IsMember({"pure", "advanced"}));
    cmd->add_option("--seed", c.seed, "seed for training, K-means and synthetic data");
    cmd->add_option("--threads", c.threads, "worker threads for the forward pass")->check(CLI::PositiveNumber);
}

PipelineConfig resolve_config(const Common& c) {
    PipelineConfig cfg = c.config_path.empty() ? PipelineConfig{} : load_config(c.config_path);
    if (!c.mode.empty()) cfg.mode = parse_enum<RefineMode>(c.mode, "--mode");
    if (c.seed) {
        cfg.seed = *c.seed;
        cfg.train.seed = *c.seed;
    }
    if (c.threads) cfg.threads = *c.threads;
    cfg.validate();
    return cfg;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

/// A single PPM file or every PPM directly inside a directory.
std::vector<fs::path> input_images(const fs::path& p) {
    if (fs::is_directory(p)) return list_ppm(p);
    if (!fs::exists(p)) throw std::runtime_error("input not found: " + p.string());
    return {p};
}

struct SynthArgs {
    int count = 0;
    std::uint64_t seed = 1;
};

void add_synth_source(CLI::App* cmd, SynthArgs& s, const char* what) {
    cmd->add_option("--synth", s.count, std::string("generate N synthetic images instead of reading ") + what)
        ->check(CLI::NonNegativeNumber);
    cmd->add_option("--synth-seed", s.seed, "seed for --synth");
}

std::vector<SynthSample> make_synth(const SynthArgs& s, int side) {
    return synth_dataset(SynthSpec::for_side(side, s.count, s.seed));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Weakly-supervised corrosion segmentation: classify, localise, refine"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);

    // train
    Common train_c;
    std::string train_data, train_out;
    SynthArgs train_synth;
    std::optional<int> epochs;
    std::optional<double> lr;
    auto* train_cmd = app.add_subcommand("train", "train the classifier from image-level labels");
    add_common(train_cmd, train_c);
    train_cmd->add_option("--data", train_data, "directory with corrosion/ and not_corrosion/ PPM images");
    add_synth_source(train_cmd, train_synth, "--data");
    train_cmd->add_option("--out", train_out, "output directory for model.rseg and history.json")->required();
    train_cmd->add_option("--epochs", epochs, "override training epochs")->check(CLI::NonNegativeNumber);
    train_cmd->add_option("--lr", lr, "override learning rate")->check(CLI::NonNegativeNumber);

    // segment
    Common seg_c;
    std::string seg_model, seg_input, seg_out;
    bool seg_debug = false;
    auto* seg_cmd = app.add_subcommand("segment", "classify, localise and refine one image or a directory");
    add_common(seg_cmd, seg_c);
    seg_cmd->add_option("--model", seg_model, "RSEG model file")->required()->check(CLI::ExistingFile);
    seg_cmd->add_option("--input", seg_input, "PPM image or directory of PPM images")->required();
    seg_cmd->add_option("--out", seg_out, "output directory")->required();
    seg_cmd->add_flag("--debug-artifacts", seg_debug, "write one file per workflow stage under <out>/debug/<image>/");

    // classify
    Common cls_c;
    std::string cls_model, cls_input;
    auto* cls_cmd = app.add_subcommand("classify", "prediction only");
    add_common(cls_cmd, cls_c);
    cls_cmd->add_option("--model", cls_model, "RSEG model file")->required()->check(CLI::ExistingFile);
    cls_cmd->add_option("--input", cls_input, "PPM image or directory of PPM images")->required();

    // eval
    Common eval_c;
    std::string eval_model, eval_data, eval_out;
    SynthArgs eval_synth;
    auto* eval_cmd = app.add_subcommand("eval", "classification metrics on a labelled set");
    add_common(eval_cmd, eval_c);
    eval_cmd->add_option("--model", eval_model, "RSEG model file")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--data", eval_data, "directory with corrosion/ and not_corrosion/ PPM images");
    add_synth_source(eval_cmd, eval_synth, "--data");
    eval_cmd->add_option("--out", eval_out, "also write metrics.json here");

    // bench
    Common bench_c;
    std::string bench_model, bench_input, bench_out;
    SynthArgs bench_synth;
    int bench_runs = 10;
    int bench_epochs = -1;
    auto* bench_cmd = app.add_subcommand("bench", "per-stage wall-clock timings");
    add_common(bench_cmd, bench_c);
    bench_cmd->add_option("--model", bench_model, "RSEG model file")->required()->check(CLI::ExistingFile);
    bench_cmd->add_option("--input", bench_input, "directory of PPM images with detectable corrosion");
    add_synth_source(bench_cmd, bench_synth, "--input (corrosion images only are used)");
    bench_cmd->add_option("--runs", bench_runs, "runs to average over")->check(CLI::PositiveNumber);
    bench_cmd->add_option("--crf-epochs", bench_epochs, "override CRF epochs")->check(CLI::NonNegativeNumber);
    bench_cmd->add_option("--out", bench_out, "also write timings.json here");

    // synth
    int synth_count = 100, synth_side = 44;
    std::uint64_t synth_seed = 1;
    std::string synth_out;
    auto* synth_cmd = app.add_subcommand("synth", "write a synthetic labelled dataset");
    synth_cmd->add_option("--count", synth_count, "number of images")->check(CLI::NonNegativeNumber);
    synth_cmd->add_option("--side", synth_side, "image side in pixels")->check(CLI::PositiveNumber);
    synth_cmd->add_option("--seed", synth_seed, "generator seed");
    synth_cmd->add_option("--out", synth_out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    const char* stage = "setup";
    try {
        if (*train_cmd) {
            stage = "train";
            if (train_data.empty() == (train_synth.count == 0)) {
                throw ConfigError("train needs exactly one of --data or --synth");
            }
            auto cfg = resolve_config(train_c);
            if (epochs) cfg.train.epochs = *epochs;
            if (lr) cfg.train.learning_rate = *lr;
            cfg.validate();
            const auto data = train_data.empty() ? training_view(make_synth(train_synth, cfg.network.input_side))
                                                 : load_labeled_dir(train_data);
            auto model = init_he_uniform<float>(cfg.network, cfg.seed);
            nlohmann::json history = nlohmann::json::array();
            const auto result = train<float>(data, model, cfg.train, [&](const EpochRecord& r) {
                std::cout << "epoch " << r.epoch << " loss " << r.train_loss << " val_acc " << r.validation_accuracy
                          << " val_loss " << r.validation_loss << std::endl;
                history.push_back({{"epoch", r.epoch},
                                   {"train_loss", r.train_loss},
                                   {"validation_accuracy", r.validation_accuracy},
                                   {"validation_loss", r.validation_loss}});
            });
            fs::create_directories(train_out);
            save_model(fs::path(train_out) / "model.rseg", model);
            write_json(fs::path(train_out) / "history.json",
                       {{"history", history},
                        {"train_count", result.train_count},
                        {"validation_count", result.validation_count},
                        {"config", config_to_json(cfg)}});
            std::cout << "wrote " << (fs::path(train_out) / "model.rseg").string() << "\n";
        } else if (*seg_cmd) {
            const auto cfg = resolve_config(seg_c);
            stage = "load";
            const auto model = load_model(seg_model);
            const fs::path out = seg_out;
            fs::create_directories(out / "masks");
            fs::create_directories(out / "overlays");
            nlohmann::json results = nlohmann::json::array();
            nlohmann::json timings = nlohmann::json::array();
            for (const auto& path : input_images(seg_input)) {
                stage = "load";
                const auto image = load_ppm(path);
                stage = "segment";
                const auto r = segment_image(image, model, cfg);
                const auto name = path.stem().string();
                auto j = result_to_json(r);
                j["file"] = path.string();
                if (r.mask) {
                    save_pgm(out / "masks" / (name + ".pgm"), *r.mask);
                    save_ppm(out / "overlays" / (name + ".ppm"), *r.overlay);
                    j["mask"] = (fs::path("masks") / (name + ".pgm")).string();
                    j["overlay"] = (fs::path("overlays") / (name + ".ppm")).string();
                }
                if (seg_debug) write_debug_artifacts(out / "debug" / name, r);
                std::cout << path.filename().string() << ": " << r.message << "\n";
                timings.push_back({{"file", path.string()}, {"timings", j["timings"]}});
                results.push_back(std::move(j));
            }
            write_json(out / "results.json", results.size() == 1 ? results[0] : results);
            write_json(out / "timings.json", timings);
        } else if (*cls_cmd) {
            const auto cfg = resolve_config(cls_c);
            stage = "load";
            const auto model = load_model(cls_model);
            nlohmann::json results = nlohmann::json::array();
            for (const auto& path : input_images(cls_input)) {
                stage = "load";
                const auto image = load_ppm(path);
                stage = "classify";
                const auto p = classify_image(image, model, cfg.threads);
                const bool pos = p.is_corrosion(cfg.gate_threshold);
                results.push_back({{"file", path.string()},
                                   {"is_corrosion", pos},
                                   {"raw_output", p.raw_output},
                                   {"corrosion_prob", p.corrosion_prob},
                                   {"message", confidence_message(p, pos)}});
            }
            std::cout << (results.size() == 1 ? results[0] : results).dump(2) << "\n";
        } else if (*eval_cmd) {
            if (eval_data.empty() == (eval_synth.count == 0)) throw ConfigError("eval needs exactly one of --data or --synth");
            const auto cfg = resolve_config(eval_c);
            stage = "load";
            const auto model = load_model(eval_model);
            const auto data = eval_data.empty() ? training_view(make_synth(eval_synth, model.config.input_side))
                                                : load_labeled_dir(eval_data);
            stage = "classify";
            std::vector<double> scores;
            std::vector<int> labels;
            for (const auto& s : data) {
                scores.push_back(classify_image(s.image, model, cfg.threads).corrosion_prob);
                labels.push_back(s.label == Label::corrosion ? 1 : 0);
            }
            const auto report = evaluate(scores, labels, cfg.gate_threshold);
            std::cout << format_metrics_table(report);
            if (!eval_out.empty()) write_json(fs::path(eval_out) / "metrics.json", metrics_to_json(report));
        } else if (*bench_cmd) {
            if (bench_input.empty() == (bench_synth.count == 0)) throw ConfigError("bench needs exactly one of --input or --synth");
            auto cfg = resolve_config(bench_c);
            if (bench_epochs >= 0) cfg.crf.epochs = bench_epochs;
            stage = "load";
            const auto model = load_model(bench_model);
            std::vector<RgbImage> images;
            if (bench_input.empty()) {
                for (auto& s : make_synth(bench_synth, model.config.input_side)) {
                    if (s.sample.label == Label::corrosion) images.push_back(std::move(s.sample.image));
                }
            } else {
                for (const auto& p : list_ppm(bench_input)) images.push_back(load_ppm(p));
            }
            stage = "bench";
            const auto rep = bench(images, model, cfg, bench_runs, &std::cerr);
            std::cout << format_bench_table(rep);
            if (!bench_out.empty()) write_json(fs::path(bench_out) / "timings.json", bench_to_json(rep));
        } else if (*synth_cmd) {
            stage = "synth";
            const auto samples = synth_dataset(SynthSpec::for_side(synth_side, synth_count, synth_seed));
            write_synth_dataset(synth_out, samples);
            std::cout << "wrote " << samples.size() << " images to " << synth_out << "\n";
        }
    } catch (const StageError& e) {
        std::cerr << "error [" << e.stage() << "]: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error [" << stage << "]: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
