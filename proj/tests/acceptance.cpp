// Acceptance gate: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "rustseg/localize.hpp"
#include "rustseg/metrics.hpp"
#include "rustseg/model_io.hpp"
#include "rustseg/pipeline.hpp"
#include "rustseg/refine.hpp"
#include "rustseg/synth.hpp"
#include "rustseg/train.hpp"
#include "test_support.hpp"

using namespace rustseg;
using namespace rustseg::testing;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void check(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// 1 ------------------------------------------------------------------------

void metric_consistency(Outcome& o) {
    const double a = *f1_score(0.8127, 0.7233);
    const double b = *f1_score(0.8938, 0.8386);
    o.detail << "f1 " << a << ", " << b;
    o.check(std::abs(a - 0.7654) <= 1e-4, "first pair");
    o.check(std::abs(b - 0.8653) <= 1e-4, "second pair");
}

// 2 ------------------------------------------------------------------------

void architecture_chain(Outcome& o) {
    const auto cfg = NetworkConfig::standard();
    const std::vector<int> expected{572, 570, 568, 284, 282, 280, 140, 138, 136, 68, 66, 64, 32, 30, 28};
    o.check(cfg.spatial_chain() == expected, "spatial chain");
    o.check(cfg.final_channels() == 1024, "K = 1024");
    o.check(ModelWeights<float>::zeros(cfg).dense.weights.size() == 28u * 28u * 1024u, "dense size");
    int rejected = 0;
    const std::vector<int> bad{0, 30, 100, 570, 571, 573, 574, 600};
    for (int side : bad) {
        NetworkConfig c;
        c.input_side = side;
        try {
            c.validate();
        } catch (const ConfigError&) {
            ++rejected;
        }
    }
    o.check(rejected == static_cast<int>(bad.size()), "inconsistent sides rejected");
    o.detail << "chain ends at " << cfg.final_side() << " with " << cfg.final_channels() << " maps; " << rejected
             << "/" << bad.size() << " bad sides rejected";
}

// 3 ------------------------------------------------------------------------

void gradient_suite(Outcome& o) {
    const auto cfg = NetworkConfig::toy();
    auto model = random_model<double>(cfg, 121);
    const auto x = random_tensor<double>(44, 44, 3, 122, 0, 1);
    const auto base = forward_cached(x, model);
    auto g = backward(base, model, 1.0).grads;
    std::vector<double*> params;
    std::vector<double> analytic;
    model.for_each_parameter([&](double& v) { params.push_back(&v); });
    g.for_each_parameter([&](double& v) { analytic.push_back(v); });

    Rng rng(123);
    int accepted = 0;
    double worst = 0;
    for (int attempt = 0; accepted < 120 && attempt < 3000; ++attempt) {
        const std::size_t i = rng.below(params.size());
        const double h = 1e-4, orig = *params[i];
        const double steps[4] = {-2, -1, 1, 2};
        double f[4];
        bool smooth = true;
        for (int s = 0; s < 4; ++s) {
            *params[i] = orig + steps[s] * h;
            const auto c = forward_cached(x, model);
            smooth = smooth && same_piece(base, c);
            f[s] = c.logit;
        }
        *params[i] = orig;
        if (!smooth) continue;
        const double numeric = (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h);
        if (std::max(std::abs(numeric), std::abs(analytic[i])) < 1e-9) {
            o.check(std::abs(numeric - analytic[i]) < 1e-9, "tiny gradient");
        } else {
            worst = std::max(worst, rel_err(analytic[i], numeric));
        }
        ++accepted;
    }
    o.check(accepted >= 100, "at least 100 backprop probes");
    o.check(worst < 1e-6, "backprop relative error");
    o.detail << "backprop: " << accepted << " probes, max rel " << worst;

    for (auto kind : {ScoreKind::sigmoid, ScoreKind::exp}) {
        auto m = random_model<double>(cfg, 141);
        auto cache = forward_cached(random_tensor<double>(44, 44, 3, 142, 0, 1), m);
        m.dense.bias += 0.7 - cache.logit;
        cache = forward_cached(cache.input, m);
        const double h = 1e-2;
        Rng prng(143);
        for (int order = 1; order <= 3; ++order) {
            const auto d = head_derivatives(cache, m, order, kind);
            const auto& a = cache.last_conv_preact();
            int n = 0;
            double w = 0;
            while (n < 100) {
                const std::size_t i = prng.below(a.size());
                if (a.data()[i] <= 0.0) {
                    o.check(d.data()[i] == 0.0, "zero derivative under ReLU");
                    continue;
                }
                if (a.data()[i] < 3.5 * h / std::abs(m.dense.weights[i])) continue;
                const double numeric = fd(ScalarHead{cache, m, i, kind}, order, h) *
                                       std::pow(std::abs(m.dense.weights[i]), order);
                w = std::max(w, rel_err(d.data()[i], numeric));
                ++n;
            }
            o.check(w < 1e-6, std::string(kind == ScoreKind::exp ? "exp" : "sigmoid") + " order " +
                                  std::to_string(order));
            o.detail << "; " << (kind == ScoreKind::exp ? "exp" : "sigmoid") << " d" << order << " max rel " << w;
        }
    }
}

// 4 ------------------------------------------------------------------------

void gradcam_algebra(Outcome& o) {
    const Tensor3<double> a(2, 2, 1, std::vector<double>{1, -1, 2, 0});
    CamWeights w;
    const auto h = grad_cam(a, Tensor3<double>(2, 2, 1, 1.0), &w);
    // alpha = (1 / (2 * 2)) * 4 = 1; L = ReLU(alpha * A)
    o.check(w.alpha.size() == 1 && w.alpha[0] == 1.0, "hand alpha");
    o.check(h.values == std::vector<float>{1, 0, 2, 0}, "hand heatmap");
    const auto half = grad_cam(a, Tensor3<double>(2, 2, 1, 0.5), &w);
    o.check(w.alpha[0] == 0.5 && half.values == std::vector<float>{0.5f, 0, 1, 0}, "hand case, gradient 0.5");

    double worst = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto maps = random_tensor<double>(9, 9, 12, 200 + s);
        const auto g = random_tensor<double>(9, 9, 12, 300 + s);
        const auto pp = combine_maps(maps, weighted_pool(g, uniform_pixel_weights(g), false));
        const auto gc = grad_cam(maps, g);
        for (std::size_t i = 0; i < pp.values.size(); ++i) {
            worst = std::max(worst, double(std::abs(pp.values[i] - gc.values[i])));
        }
    }
    o.check(worst <= 1e-6, "Grad-CAM++ with uniform weights equals Grad-CAM");

    const auto maps = random_tensor<double>(6, 6, 5, 400, 0, 1);
    const auto neg = random_tensor<double>(6, 6, 5, 401, -1, -0.01);
    const auto g2 = random_tensor<double>(6, 6, 5, 402);
    const auto g3 = random_tensor<double>(6, 6, 5, 403);
    const auto zero_cam = grad_cam(maps, neg);
    const auto zero_pp = grad_cam_pp(maps, neg, g2, g3);
    const auto all_zero = [](const Heatmap& m) {
        return std::all_of(m.values.begin(), m.values.end(), [](float v) { return v == 0.f; });
    };
    o.check(all_zero(zero_cam) && all_zero(zero_pp), "all-negative gradients give zero heatmaps");
    o.detail << "hand alpha " << 1.0 << ", max |pp - gc| " << worst;
}

// 5 ------------------------------------------------------------------------

void threshold_filter(Outcome& o) {
    Heatmap h(2);
    h.values = {0.2f, 0.4f, 0.6f, 0.8f};
    const double t = dynamic_threshold(h);
    const auto m = apply_threshold(FloatMap{2, 2, h.values}, t);
    o.check(std::abs(t - 0.7) < 1e-6, "T = 0.7");
    o.check(m.pixels()[0] == 0 && m.pixels()[1] == 0 && m.pixels()[2] == 0 && m.pixels()[3] == 204,
            "survivors {0.8}");

    Heatmap c(2, 0.6f);
    const double tc = dynamic_threshold(c);
    o.check(tc == 1.0, "constant map T = 1");
    o.check(count_nonzero(apply_threshold(FloatMap{2, 2, c.values}, tc)) == 0, "constant map gives empty mask");
    Heatmap flat0(28, 0.f);
    o.check(!normalize_heatmap(flat0).localized, "all-zero heatmap reported as not localized");
    o.detail << "T = " << t << ", constant map T = " << tc;
}

// 6 ------------------------------------------------------------------------

void crf_oracle(Outcome& o) {
    CrfOptions exact, window, lattice;
    exact.backend = CrfBackend::exact;
    window.backend = CrfBackend::window;
    lattice.backend = CrfBackend::lattice;

    {
        const auto img = random_image(20, 13, 1);
        const auto mask = random_mask(20, 13, 2);
        CrfParams p;
        p.appearance_compat = p.smooth_compat = 0;
        MaskU8 argmax(20, 13);
        for (std::size_t i = 0; i < mask.pixel_count(); ++i) argmax.pixels()[i] = mask.pixels()[i] >= 128 ? 255 : 0;
        for (int e : {0, 1, 10, 25}) {
            p.epochs = e;
            o.check(crf_refine(img, mask, p, exact) == argmax, "zero compat == argmax");
        }
    }
    {
        const auto img = random_image(24, 18, 5);
        const auto mask = random_mask(24, 18, 6);
        CrfParams p;
        p.epochs = 8;
        bool symmetric = true;
        for (const auto& opt : {exact, window, lattice}) {
            const auto u = mask_to_unary(mask, p.unary_eps);
            const auto qa = crf_marginals(img, u, p, opt), qb = crf_marginals(img, u.swapped(), p, opt);
            for (std::size_t i = 0; i < mask.pixel_count(); ++i) {
                symmetric = symmetric && qa.q[2 * i] == qb.q[2 * i + 1] && qa.q[2 * i + 1] == qb.q[2 * i];
            }
        }
        o.check(symmetric, "label symmetry");
    }
    {
        const auto img = two_color(16, 16, {255, 0, 0}, {0, 0, 255});
        MaskU8 seed(16, 16);
        int covered = 0;
        for (int y = 0; y < 16 && covered < 77; ++y)
            for (int x = 0; x < 8 && covered < 77; ++x, ++covered) seed.at(y, x) = 255;
        MaskU8 red(16, 16);
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 8; ++x) red.at(y, x) = 255;
        const CrfParams p;
        o.check(oracle_mask(img, seed, p) == red, "oracle grows the seed to the red half");
        o.check(crf_refine(img, seed, p, exact) == red, "exact backend grows the seed to the red half");
    }
    double worst_window = 0, worst_lattice = 0;
    int images = 0;
    {
        std::vector<std::pair<RgbImage, MaskU8>> cases;
        for (const auto& s : synth_dataset(SynthSpec::for_side(64, 4, 21))) {
            MaskU8 m = s.truth;
            if (count_nonzero(m) == 0) {
                for (int y = 20; y < 44; ++y)
                    for (int x = 8; x < 30; ++x) m.at(y, x) = 180;
            }
            cases.emplace_back(s.sample.image, m);
        }
        cases.emplace_back(random_image(64, 64, 31), random_mask(64, 64, 32));
        cases.emplace_back(random_image(17, 23, 33), random_mask(17, 23, 34));
        cases.emplace_back(two_color(32, 40, {200, 120, 40}, {30, 60, 90}), random_mask(32, 40, 35));
        CrfParams weak;
        weak.appearance_compat = 0.001;
        weak.smooth_compat = 0.05;
        weak.epochs = 5;
        const auto diff = [](const Marginals& a, const Marginals& b) {
            double d = 0;
            for (std::size_t i = 0; i < a.q.size(); ++i) d = std::max(d, std::abs(a.q[i] - b.q[i]));
            return d;
        };
        for (const auto& [img, mask] : cases) {
            ++images;
            for (const auto& p : {CrfParams{}, weak}) {
                const auto u = mask_to_unary(mask, p.unary_eps);
                worst_window = std::max(worst_window, diff(crf_marginals(img, u, p, exact), crf_marginals(img, u, p, window)));
            }
            const CrfParams d;
            const auto u = mask_to_unary(mask, d.unary_eps);
            worst_lattice = std::max(worst_lattice, diff(crf_marginals(img, u, d, exact), crf_marginals(img, u, d, lattice)));
        }
        o.check(worst_window < 1e-3, "window backend within 1e-3");
        o.check(worst_lattice < 1e-3, "lattice backend within 1e-3 at default parameters");
    }
    o.detail << images << " regression images; max |dQ| window " << worst_window << ", lattice " << worst_lattice;
}

// 7 ------------------------------------------------------------------------

void morphology_kmeans(Outcome& o) {
    BinaryMask sq(81, 0);
    for (int y = 2; y < 7; ++y)
        for (int x = 2; x < 7; ++x) sq[y * 9 + x] = 1;
    const auto e = erode_diamond5(sq, 9, 9);
    o.check(std::count(e.begin(), e.end(), 1) == 1 && e[40] == 1, "5x5 square erodes to its centre");

    Rng rng(7);
    bool anti = true, oracle = true;
    for (int t = 0; t < 1000; ++t) {
        const int h = 1 + static_cast<int>(rng.below(24)), w = 1 + static_cast<int>(rng.below(24));
        const double density = rng.uniform(0.3, 1.0);
        BinaryMask m(static_cast<std::size_t>(h) * w);
        for (auto& v : m) v = rng.uniform() < density;
        const auto er = erode_diamond5(m, h, w);
        for (std::size_t i = 0; i < m.size(); ++i) anti = anti && er[i] <= m[i];
        oracle = oracle && er == brute_erode(m, h, w);
    }
    o.check(anti, "anti-extensive on 1000 random masks");
    o.check(oracle, "matches brute-force erosion");

    bool monotone = true;
    int iterations = 0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto r = kmeans2(random_image(24, 24, 700 + s), s);
        iterations += r.iterations;
        for (std::size_t i = 1; i < r.sse_history.size(); ++i) {
            monotone = monotone && r.sse_history[i] <= r.sse_history[i - 1] * (1 + 1e-12);
        }
    }
    o.check(monotone, "K-means monotone descent");

    RgbImage bw(12, 12);
    BinaryMask white(144);
    for (std::size_t i = 0; i < 144; ++i) {
        white[i] = rng.below(2);
        for (int c = 0; c < 3; ++c) bw.pixels()[3 * i + c] = white[i] ? 255 : 0;
    }
    bool separated = true;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto r = kmeans2(bw, s);
        separated = separated && (r.clusters[0] == white || r.clusters[1] == white);
    }
    o.check(separated, "exact two-colour separation");
    o.detail << "1000 random masks; 20 K-means runs, " << iterations << " Lloyd iterations";
}

// 8 ------------------------------------------------------------------------

PipelineConfig toy_pipeline(std::uint64_t seed) {
    PipelineConfig c;
    c.network = NetworkConfig::toy();
    c.train.learning_rate = 1e-3;  // scaled for the toy network; see README
    c.train.epochs = 35;
    c.train.seed = seed;
    c.seed = seed;
    return c;
}

ModelWeights<float>* g_trained = nullptr;

void end_to_end(Outcome& o) {
    const auto cfg = toy_pipeline(11);
    const auto data = training_view(synth_dataset(SynthSpec::for_side(44, 500, 2024)));
    auto model = init_he_uniform<float>(cfg.network, cfg.seed);
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = train<float>(data, model, cfg.train);
    const double train_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double acc = res.history.back().validation_accuracy;
    o.check(acc >= 0.95, "validation accuracy >= 0.95");

    std::vector<double> raw, refined;
    int gated = 0, failed = 0;
    for (const auto& s : synth_dataset(SynthSpec::for_side(44, 200, 777))) {
        if (s.sample.label != Label::corrosion) continue;
        if (raw.size() == 50) break;
        const auto r = segment_image(s.sample.image, model, cfg);
        gated += r.status == SegmentStatus::not_corrosion;
        failed += r.status == SegmentStatus::localization_failed;
        MaskU8 thr(44, 44);
        if (r.thresholded) {
            for (std::size_t i = 0; i < thr.pixel_count(); ++i) thr.pixels()[i] = r.thresholded->pixels()[i] ? 255 : 0;
        }
        raw.push_back(mask_iou(thr, s.truth));
        refined.push_back(r.mask ? mask_iou(*r.mask, s.truth) : 0.0);
    }
    const double mr = median(raw), mc = median(refined);
    o.check(raw.size() == 50, "50 held-out corrosion images");
    o.check(mc >= 0.5, "median CRF IoU >= 0.5");
    o.check(mr >= 0.3, "median raw IoU >= 0.3");
    o.check(mc > mr, "refinement improves median IoU");
    o.detail << "500 images, " << res.train_count << "/" << res.validation_count << " train/val, " << train_s
             << " s; val acc " << acc << "; median IoU raw " << mr << ", CRF " << mc << " (" << gated
             << " gated out, " << failed << " not localized); CRF IoU min "
             << *std::min_element(refined.begin(), refined.end()) << ", mean "
             << std::accumulate(refined.begin(), refined.end(), 0.0) / double(refined.size());
    g_trained = new ModelWeights<float>(std::move(model));
}

// 9 ------------------------------------------------------------------------

void determinism_persistence(Outcome& o) {
    PipelineConfig cfg = toy_pipeline(5);
    cfg.train.epochs = 2;
    const auto data = training_view(synth_dataset(SynthSpec::for_side(44, 40, 9)));
    auto m1 = init_he_uniform<float>(cfg.network, 5), m2 = init_he_uniform<float>(cfg.network, 5);
    train<float>(data, m1, cfg.train);
    train<float>(data, m2, cfg.train);
    const auto bytes = encode_model(m1);
    o.check(bytes == encode_model(m2), "fixed-seed training is bit-identical");

    const auto& model = g_trained ? *g_trained : m1;
    bool masks = true;
    int compared = 0;
    for (auto mode : {RefineMode::pure_crf, RefineMode::advanced}) {
        auto c = toy_pipeline(5);
        c.mode = mode;
        for (const auto& s : synth_dataset(SynthSpec::for_side(44, 12, 31))) {
            const auto a = segment_image(s.sample.image, model, c), b = segment_image(s.sample.image, model, c);
            masks = masks && a.mask == b.mask && a.thresholded == b.thresholded;
            ++compared;
        }
    }
    o.check(masks, "bit-identical masks");

    const auto back = decode_model(bytes);
    o.check(encode_model(back) == bytes, "RSEG round-trip byte-identical");

    bool pnm = true;
    Rng rng(3);
    for (int t = 0; t < 50; ++t) {
        const int h = 1 + static_cast<int>(rng.below(40)), w = 1 + static_cast<int>(rng.below(40));
        const auto img = random_image(h, w, 1000 + t);
        const auto m = random_mask(h, w, 2000 + t);
        pnm = pnm && decode_ppm(encode_ppm(img)) == img && decode_pgm(encode_pgm(m)) == m;
    }
    o.check(pnm, "PNM round-trip identity");
    o.detail << compared << " segmentations repeated; model " << bytes.size() << " bytes; 50 PNM pairs";
}

// 10 -----------------------------------------------------------------------

bool table_rows_ok(const BenchReport& rep, const std::string& refine) {
    const auto rows = rep.rows();
    return rows.size() == 4 && rows[0].first == "Classify" && rows[1].first == "Localise (Grad-CAM++)" &&
           rows[2].first == refine && rows[3].first == "End-to-End";
}

void bench_report(Outcome& o) {
    // toy model, several runs
    auto cfg = toy_pipeline(5);
    auto toy = g_trained ? *g_trained : random_model<float>(cfg.network, 17);
    std::vector<RgbImage> images;
    for (const auto& s : synth_dataset(SynthSpec::for_side(44, 40, 55))) {
        if (images.size() == 4) break;
        if (segment_image(s.sample.image, toy, cfg).status == SegmentStatus::segmented) images.push_back(s.sample.image);
    }
    const auto rep = bench(images, toy, cfg, 3);
    o.check(images.size() == 4, "four benchable toy images");
    o.check(rep.runs == 3 && rep.images_used == images.size(), "averaged over configured runs");
    o.check(table_rows_ok(rep, "Refine (CRF: 25 Epochs)"), "toy table rows");
    o.check(rep.mean.end_to_end_s >= rep.mean.classify_s, "end-to-end >= classify");
    o.check(bench_to_json(rep)["rows"].size() == 4, "json rows");

    // full resolution: default network on one image
    const PipelineConfig full;
    auto model = init_he_uniform<float>(full.network, 1);
    const auto img = synth_image(SynthSpec::for_side(572, 1, 3), 0).sample.image;
    const auto t0 = std::chrono::steady_clock::now();
    const double logit = detail::classify_at(resize_bilinear(img, 572), model, 1).cache.logit;
    // move the logit to -3 so the gate passes; the weights are untrained
    model.dense.bias += static_cast<float>(-3.0 - logit);
    const auto big = bench({img}, model, full, 1);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    o.check(big.images_used == 1, "572x572 image reaches refine");
    o.check(table_rows_ok(big, "Refine (CRF: 25 Epochs)"), "full-resolution table rows");
    o.detail << "toy: " << rep.runs << " runs x " << rep.images_used << " images; 572x572: classify "
             << big.mean.classify_s << " s, localise " << big.mean.localise_s << " s, refine " << big.mean.refine_s
             << " s, end-to-end " << big.mean.end_to_end_s << " s (" << wall << " s wall)\n"
             << format_bench_table(big);
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<void(Outcome&)>>> criteria{
        {"metric consistency (F1 from reference precision/recall pairs)", metric_consistency},
        {"architecture chain 572 -> 28, K = 1024", architecture_chain},
        {"gradient suite vs finite differences", gradient_suite},
        {"Grad-CAM / Grad-CAM++ algebra", gradcam_algebra},
        {"threshold filter", threshold_filter},
        {"CRF oracle equivalence", crf_oracle},
        {"morphology and K-means", morphology_kmeans},
        {"end-to-end synthetic reproduction", end_to_end},
        {"determinism and persistence", determinism_persistence},
        {"bench report structure", bench_report},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    int failures = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        const int id = static_cast<int>(k) + 1;
        if (!only.empty() && !only.count(id)) continue;
        Outcome o;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            criteria[k].second(o);
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail << " [exception: " << e.what() << "]";
        }
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failures += !o.pass;
        std::printf("criterion %d: %s - %s (%.1f s): %s\n", id, o.pass ? "PASS" : "FAIL", criteria[k].first, s,
                    o.detail.str().c_str());
        std::fflush(stdout);
    }
    delete g_trained;
    return failures == 0 ? 0 : 1;
}
