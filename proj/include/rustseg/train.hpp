#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "image.hpp"
#include "network.hpp"

namespace rustseg {

/// Binary labels follow the network's output convention.
enum class Label : int { corrosion = 0, not_corrosion = 1 };

/// Training sample: an image and its image-level label, nothing else.
struct LabeledImage {
    RgbImage image;
    Label label = Label::corrosion;
};

struct TrainConfig {
    double learning_rate = 1e-5;
    int epochs = 35;
    int batch_size = 8;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double validation_fraction = 0.15;
    double rotation_range_rad = 0.2;
    bool augment = true;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
            throw ConfigError("validation_fraction must be in [0, 1)");
        }
        if (rotation_range_rad < 0.0) throw ConfigError("rotation_range_rad must be >= 0");
    }
};

inline constexpr double kBceEps = 1e-7;

/// Binary cross entropy on the sigmoid output with clamping to [eps, 1 - eps].
inline double bce_loss(double raw_output, Label label) {
    const double o = std::clamp(raw_output, kBceEps, 1.0 - kBceEps);
    const double y = static_cast<double>(static_cast<int>(label));
    return -(y * std::log(o) + (1.0 - y) * std::log(1.0 - o));
}

// --- Adam -------------------------------------------------------------------

/// Adam with bias-corrected moments over a flat parameter vector.
class Adam {
public:
    Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

    template <class T>
    void step(std::span<T> params, std::span<const T> grads) {
        if (params.size() != m_.size() || grads.size() != m_.size()) {
            throw DimensionError("Adam: parameter count changed");
        }
        ++t_;
        if (lr_ == 0.0) return;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = static_cast<double>(grads[i]);
            m_[i] = b1_ * m_[i] + (1.0 - b1_) * g;
            v_[i] = b2_ * v_[i] + (1.0 - b2_) * g * g;
            const double mhat = m_[i] / c1;
            const double vhat = v_[i] / c2;
            params[i] = static_cast<T>(static_cast<double>(params[i]) - lr_ * mhat / (std::sqrt(vhat) + eps_));
        }
    }

    long steps() const { return t_; }

private:
    double lr_, b1_, b2_, eps_;
    std::vector<double> m_, v_;
    long t_ = 0;
};

template <class T>
std::vector<T> flatten_parameters(ModelWeights<T>& m) {
    std::vector<T> out;
    out.reserve(m.parameter_count());
    m.for_each_parameter([&](T& v) { out.push_back(v); });
    return out;
}

template <class T>
void unflatten_parameters(ModelWeights<T>& m, std::span<const T> flat) {
    std::size_t i = 0;
    m.for_each_parameter([&](T& v) { v = flat[i++]; });
}

// --- augmentation -----------------------------------------------------------

struct AugmentParams {
    bool flip_horizontal = false;
    bool flip_vertical = false;
    double angle_rad = 0.0;
};

inline AugmentParams draw_augment(std::uint64_t seed, double rotation_range_rad) {
    Rng rng(seed);
    AugmentParams p;
    p.flip_horizontal = rng.coin();
    p.flip_vertical = rng.coin();
    p.angle_rad = rng.uniform(-rotation_range_rad, rotation_range_rad);
    return p;
}

/// Flip, then rotate about the image centre with bilinear sampling and
/// edge-clamped reads.
template <class T>
Tensor3<T> apply_augment(const Tensor3<T>& image, const AugmentParams& p) {
    const int h = image.height();
    const int w = image.width();
    const int c = image.channels();
    Tensor3<T> flipped(h, w, c);
    for (int y = 0; y < h; ++y) {
        const int sy = p.flip_vertical ? h - 1 - y : y;
        for (int x = 0; x < w; ++x) {
            const int sx = p.flip_horizontal ? w - 1 - x : x;
            std::copy_n(image.pixel(sy, sx), c, flipped.pixel(y, x));
        }
    }
    if (p.angle_rad == 0.0) return flipped;

    Tensor3<T> out(h, w, c);
    const double cy = 0.5 * (h - 1);
    const double cx = 0.5 * (w - 1);
    const double cs = std::cos(p.angle_rad);
    const double sn = std::sin(p.angle_rad);
    const auto clampi = [](int v, int hi) { return std::clamp(v, 0, hi); };
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            // inverse mapping: rotate the destination coordinate by -angle
            const double dx = x - cx;
            const double dy = y - cy;
            const double sx = cs * dx + sn * dy + cx;
            const double sy = -sn * dx + cs * dy + cy;
            const int x0 = static_cast<int>(std::floor(sx));
            const int y0 = static_cast<int>(std::floor(sy));
            const double fx = sx - x0;
            const double fy = sy - y0;
            const int xa = clampi(x0, w - 1), xb = clampi(x0 + 1, w - 1);
            const int ya = clampi(y0, h - 1), yb = clampi(y0 + 1, h - 1);
            for (int ch = 0; ch < c; ++ch) {
                const double v = (1 - fy) * ((1 - fx) * flipped(ya, xa, ch) + fx * flipped(ya, xb, ch)) +
                                 fy * ((1 - fx) * flipped(yb, xa, ch) + fx * flipped(yb, xb, ch));
                out(y, x, ch) = static_cast<T>(v);
            }
        }
    }
    return out;
}

template <class T>
Tensor3<T> augment(const Tensor3<T>& image, std::uint64_t seed, const TrainConfig& cfg) {
    if (image.height() != image.width()) throw DimensionError("augment expects a square image, got " + image.shape());
    return apply_augment(image, draw_augment(seed, cfg.rotation_range_rad));
}

// --- training loop ----------------------------------------------------------

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double validation_accuracy = 0.0;
    double validation_loss = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    std::size_t train_count = 0;
    std::size_t validation_count = 0;
};

struct DataSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};

/// Hold out round(fraction * n_class) of each class, chosen by a seeded shuffle.
inline DataSplit split_dataset(std::span<const LabeledImage> data, double fraction, std::uint64_t seed) {
    std::vector<std::size_t> by_class[2];
    for (std::size_t i = 0; i < data.size(); ++i) by_class[static_cast<int>(data[i].label)].push_back(i);
    if (by_class[0].empty() || by_class[1].empty()) {
        throw ConfigError("training data must contain both corrosion and not-corrosion images");
    }
    DataSplit split;
    Rng rng(derive_seed(seed, 0x5717));
    for (auto& idx : by_class) {
        rng.shuffle(idx);
        const auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
        split.validation.insert(split.validation.end(), idx.begin(), idx.begin() + static_cast<long>(n_val));
        split.train.insert(split.train.end(), idx.begin() + static_cast<long>(n_val), idx.end());
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.validation.begin(), split.validation.end());
    return split;
}

template <class T>
Tensor3<T> image_to_input(const RgbImage& img, int side) {
    const RgbImage& sized = (img.height() == side && img.width() == side) ? img : resize_bilinear(img, side);
    return to_tensor<T>(sized.pixels(), side, side);
}

/// Mini-batch Adam on mean BCE. Single-threaded and deterministic for a fixed seed.
template <class T>
TrainResult train(std::span<const LabeledImage> data, ModelWeights<T>& model, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    cfg.validate();
    if (data.empty()) throw ConfigError("training data is empty");
    const auto split = split_dataset(data, cfg.validation_fraction, cfg.seed);
    const int side = model.config.input_side;

    std::vector<Tensor3<T>> inputs;
    inputs.reserve(data.size());
    for (const auto& s : data) inputs.push_back(image_to_input<T>(s.image, side));

    auto params = flatten_parameters(model);
    Adam adam(params.size(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    std::vector<T> grad_sum(params.size());

    TrainResult result;
    result.train_count = split.train.size();
    result.validation_count = split.validation.size();

    std::vector<std::size_t> order = split.train;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffler(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch) * 2 + 1));
        order = split.train;
        shuffler.shuffle(order);

        double loss_sum = 0.0;
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
            std::fill(grad_sum.begin(), grad_sum.end(), T(0));
            for (std::size_t k = b; k < e; ++k) {
                const std::size_t idx = order[k];
                const auto aug_seed = derive_seed(cfg.seed, (static_cast<std::uint64_t>(epoch) << 32) ^ idx);
                const Tensor3<T> x = cfg.augment ? augment(inputs[idx], aug_seed, cfg) : inputs[idx];
                const auto cache = forward_cached(x, model, CacheMode::full);
                const double y = static_cast<int>(data[idx].label);
                loss_sum += bce_loss(static_cast<double>(cache.raw_output), data[idx].label);
                const T grad_logit = static_cast<T>(static_cast<double>(cache.raw_output) - y);
                auto g = backward(cache, model, grad_logit);
                std::size_t i = 0;
                g.grads.for_each_parameter([&](T& v) { grad_sum[i++] += v; });
            }
            const T inv = T(1) / static_cast<T>(e - b);
            for (auto& g : grad_sum) g *= inv;
            adam.step<T>(params, grad_sum);
            unflatten_parameters<T>(model, params);
        }

        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.train_loss = order.empty() ? 0.0 : loss_sum / static_cast<double>(order.size());
        std::size_t correct = 0;
        double vloss = 0.0;
        for (std::size_t idx : split.validation) {
            const auto cache = forward_cached(inputs[idx], model, CacheMode::minimal);
            const auto pred = predict(cache);
            const bool truth = data[idx].label == Label::corrosion;
            if (pred.is_corrosion() == truth) ++correct;
            vloss += bce_loss(pred.raw_output, data[idx].label);
        }
        if (!split.validation.empty()) {
            rec.validation_accuracy = static_cast<double>(correct) / static_cast<double>(split.validation.size());
            rec.validation_loss = vloss / static_cast<double>(split.validation.size());
        }
        result.history.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    return result;
}

}  // namespace rustseg
