#pragma once

// Fixed-topology encoder classifier: `sections` blocks of two valid 3x3
// convolutions (each followed by ReLU), 2x2 max pooling between blocks, then a
// flatten + single sigmoid unit. Output convention: 0 means corrosion, 1 means
// not-corrosion.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "parallel.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace rustseg {

inline constexpr int kKernelSide = 3;

struct NetworkConfig {
    int sections = 5;
    int base_channels = 64;
    int input_side = 572;

    /// Spatial side after every conv and pool, starting with the input side.
    /// Throws ConfigError if the valid-conv/pool chain does not work out.
    std::vector<int> spatial_chain() const {
        if (sections < 1) throw ConfigError("sections must be >= 1");
        if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
        std::vector<int> chain{input_side};
        int side = input_side;
        for (int s = 0; s < sections; ++s) {
            for (int c = 0; c < 2; ++c) {
                if (side < kKernelSide) {
                    throw ConfigError("input_side " + std::to_string(input_side) + " is inconsistent: section " +
                                      std::to_string(s) + " receives side " + std::to_string(side) +
                                      " (< kernel side 3)");
                }
                side -= kKernelSide - 1;
                chain.push_back(side);
            }
            if (s + 1 < sections) {
                if (side % 2 != 0 || side < 2) {
                    throw ConfigError("input_side " + std::to_string(input_side) + " is inconsistent: pool after section " +
                                      std::to_string(s) + " receives odd side " + std::to_string(side));
                }
                side /= 2;
                chain.push_back(side);
            }
        }
        return chain;
    }

    void validate() const { (void)spatial_chain(); }

    int final_side() const { return spatial_chain().back(); }
    int channels_of_section(int s) const { return base_channels << s; }
    int final_channels() const { return channels_of_section(sections - 1); }
    int conv_layer_count() const { return 2 * sections; }
    std::size_t flat_length() const {
        const auto f = static_cast<std::size_t>(final_side());
        return f * f * static_cast<std::size_t>(final_channels());
    }

    static NetworkConfig standard() { return {}; }
    static NetworkConfig toy() { return {3, 8, 44}; }

    bool operator==(const NetworkConfig&) const = default;
};

template <class T>
struct ConvLayer {
    int in_channels = 0;
    int out_channels = 0;
    std::vector<T> kernel;  // [ky][kx][in][out]
    std::vector<T> bias;    // [out]

    std::size_t kernel_size() const {
        return static_cast<std::size_t>(kKernelSide * kKernelSide) * in_channels * out_channels;
    }

    bool operator==(const ConvLayer&) const = default;
};

template <class T>
struct DenseLayer {
    std::vector<T> weights;  // flattened (f, f, K) order
    T bias = T(0);

    bool operator==(const DenseLayer&) const = default;
};

template <class T>
struct ModelWeights {
    NetworkConfig config;
    std::vector<ConvLayer<T>> conv;
    DenseLayer<T> dense;

    /// All-zero weights with the right shapes.
    static ModelWeights zeros(const NetworkConfig& cfg) {
        cfg.validate();
        ModelWeights m;
        m.config = cfg;
        int in = 3;
        for (int s = 0; s < cfg.sections; ++s) {
            const int out = cfg.channels_of_section(s);
            for (int c = 0; c < 2; ++c) {
                ConvLayer<T> layer;
                layer.in_channels = in;
                layer.out_channels = out;
                layer.kernel.assign(layer.kernel_size(), T(0));
                layer.bias.assign(static_cast<std::size_t>(out), T(0));
                m.conv.push_back(std::move(layer));
                in = out;
            }
        }
        m.dense.weights.assign(cfg.flat_length(), T(0));
        return m;
    }

    /// Throws DimensionError unless every tensor matches `config`.
    void validate() const {
        const auto ref = zeros(config);
        if (conv.size() != ref.conv.size()) {
            throw DimensionError("expected " + std::to_string(ref.conv.size()) + " conv layers, found " +
                                 std::to_string(conv.size()));
        }
        for (std::size_t l = 0; l < conv.size(); ++l) {
            const auto& a = conv[l];
            const auto& b = ref.conv[l];
            if (a.in_channels != b.in_channels || a.out_channels != b.out_channels ||
                a.kernel.size() != b.kernel.size() || a.bias.size() != b.bias.size()) {
                throw DimensionError("conv layer " + std::to_string(l) + " has wrong shape");
            }
        }
        if (dense.weights.size() != ref.dense.weights.size()) {
            throw DimensionError("dense weights have length " + std::to_string(dense.weights.size()) + ", expected " +
                                 std::to_string(ref.dense.weights.size()));
        }
    }

    std::size_t parameter_count() const {
        std::size_t n = dense.weights.size() + 1;
        for (const auto& l : conv) n += l.kernel.size() + l.bias.size();
        return n;
    }

    /// Visit every trainable scalar in a fixed order.
    template <class F>
    void for_each_parameter(F&& f) {
        for (auto& l : conv) {
            for (auto& v : l.kernel) f(v);
            for (auto& v : l.bias) f(v);
        }
        for (auto& v : dense.weights) f(v);
        f(dense.bias);
    }

    template <class U>
    ModelWeights<U> cast() const {
        ModelWeights<U> out;
        out.config = config;
        for (const auto& l : conv) {
            ConvLayer<U> c;
            c.in_channels = l.in_channels;
            c.out_channels = l.out_channels;
            c.kernel.assign(l.kernel.begin(), l.kernel.end());
            c.bias.assign(l.bias.begin(), l.bias.end());
            out.conv.push_back(std::move(c));
        }
        out.dense.weights.assign(dense.weights.begin(), dense.weights.end());
        out.dense.bias = static_cast<U>(dense.bias);
        return out;
    }

    bool operator==(const ModelWeights&) const = default;
};

// --- elementwise ------------------------------------------------------------

template <class T>
T sigmoid(T z) {
    // Split on sign so exp never overflows.
    if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
    const T e = std::exp(z);
    return e / (T(1) + e);
}

template <class T>
Tensor3<T> relu(Tensor3<T> x) {
    for (auto& v : x.data()) v = v > T(0) ? v : T(0);
    return x;
}

// --- layers -----------------------------------------------------------------

/// Valid 3x3 cross-correlation (no kernel flip). Output (h-2, w-2, out).
/// Every output element accumulates bias + sum over (ky, kx, ci) in that
/// order, independent of blocking and thread count.
template <class T>
Tensor3<T> conv2d_valid(const Tensor3<T>& input, std::span<const T> kernel, std::span<const T> bias, int out_channels,
                        int threads = 1) {
    const int in_ch = input.channels();
    if (input.height() < kKernelSide || input.width() < kKernelSide) {
        throw DimensionError("conv2d_valid: input " + input.shape() + " smaller than 3x3 kernel");
    }
    if (kernel.size() != static_cast<std::size_t>(kKernelSide * kKernelSide) * in_ch * out_channels ||
        bias.size() != static_cast<std::size_t>(out_channels)) {
        throw DimensionError("conv2d_valid: kernel/bias size does not match " + std::to_string(in_ch) + " -> " +
                             std::to_string(out_channels) + " channels");
    }
    const int oh = input.height() - (kKernelSide - 1);
    const int ow = input.width() - (kKernelSide - 1);
    Tensor3<T> out(oh, ow, out_channels);

    constexpr int kXBlock = 16;
    constexpr int kCBlock = 128;
    parallel_for(oh, threads, [&](int y0, int y1) {
        for (int y = y0; y < y1; ++y) {
            for (int x0 = 0; x0 < ow; x0 += kXBlock) {
                const int xb = std::min(kXBlock, ow - x0);
                for (int c0 = 0; c0 < out_channels; c0 += kCBlock) {
                    const int cb = std::min(kCBlock, out_channels - c0);
                    for (int xi = 0; xi < xb; ++xi) {
                        T* o = out.pixel(y, x0 + xi) + c0;
                        for (int co = 0; co < cb; ++co) o[co] = bias[static_cast<std::size_t>(c0 + co)];
                    }
                    for (int ky = 0; ky < kKernelSide; ++ky) {
                        for (int kx = 0; kx < kKernelSide; ++kx) {
                            const T* kbase =
                                kernel.data() + static_cast<std::size_t>(ky * kKernelSide + kx) * in_ch * out_channels + c0;
                            for (int xi = 0; xi < xb; ++xi) {
                                const T* ip = input.pixel(y + ky, x0 + xi + kx);
                                T* o = out.pixel(y, x0 + xi) + c0;
                                for (int ci = 0; ci < in_ch; ++ci) {
                                    const T a = ip[ci];
                                    const T* kr = kbase + static_cast<std::size_t>(ci) * out_channels;
                                    for (int co = 0; co < cb; ++co) o[co] += a * kr[co];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    return out;
}

/// Gradients of conv2d_valid. Accumulates into grad_kernel / grad_bias and
/// returns the gradient with respect to the input.
template <class T>
Tensor3<T> conv2d_valid_backward(const Tensor3<T>& input, std::span<const T> kernel, const Tensor3<T>& grad_out,
                                 std::span<T> grad_kernel, std::span<T> grad_bias) {
    const int in_ch = input.channels();
    const int oc = grad_out.channels();
    Tensor3<T> grad_in(input.height(), input.width(), in_ch);
    for (int y = 0; y < grad_out.height(); ++y) {
        for (int x = 0; x < grad_out.width(); ++x) {
            const T* go = grad_out.pixel(y, x);
            for (int co = 0; co < oc; ++co) grad_bias[static_cast<std::size_t>(co)] += go[co];
            for (int ky = 0; ky < kKernelSide; ++ky) {
                for (int kx = 0; kx < kKernelSide; ++kx) {
                    const std::size_t kofs = static_cast<std::size_t>(ky * kKernelSide + kx) * in_ch * oc;
                    const T* ip = input.pixel(y + ky, x + kx);
                    T* gi = grad_in.pixel(y + ky, x + kx);
                    for (int ci = 0; ci < in_ch; ++ci) {
                        const T a = ip[ci];
                        const T* kr = kernel.data() + kofs + static_cast<std::size_t>(ci) * oc;
                        T* gk = grad_kernel.data() + kofs + static_cast<std::size_t>(ci) * oc;
                        T acc = T(0);
                        for (int co = 0; co < oc; ++co) {
                            gk[co] += a * go[co];
                            acc += kr[co] * go[co];
                        }
                        gi[ci] += acc;
                    }
                }
            }
        }
    }
    return grad_in;
}

template <class T>
struct PoolResult {
    Tensor3<T> output;
    std::vector<std::uint32_t> argmax;  // flat input index per output element
};

/// 2x2 max pool, stride 2. Ties resolve to the first element in row-major order.
template <class T>
PoolResult<T> maxpool_2x2(const Tensor3<T>& input) {
    if (input.height() % 2 != 0 || input.width() % 2 != 0) {
        throw DimensionError("maxpool_2x2: odd dimension in " + input.shape());
    }
    const int oh = input.height() / 2;
    const int ow = input.width() / 2;
    const int c = input.channels();
    PoolResult<T> r{Tensor3<T>(oh, ow, c), std::vector<std::uint32_t>(static_cast<std::size_t>(oh) * ow * c)};
    const auto flat = [&](int y, int x, int ch) {
        return static_cast<std::uint32_t>((static_cast<std::size_t>(y) * input.width() + x) * c + ch);
    };
    std::size_t k = 0;
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            for (int ch = 0; ch < c; ++ch, ++k) {
                int by = 2 * y, bx = 2 * x;
                T best = input(by, bx, ch);
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const T v = input(2 * y + dy, 2 * x + dx, ch);
                        if (v > best) {
                            best = v;
                            by = 2 * y + dy;
                            bx = 2 * x + dx;
                        }
                    }
                }
                r.output.data()[k] = best;
                r.argmax[k] = flat(by, bx, ch);
            }
        }
    }
    return r;
}

template <class T>
Tensor3<T> maxpool_2x2_backward(const Tensor3<T>& grad_out, const std::vector<std::uint32_t>& argmax, int in_h,
                                int in_w) {
    Tensor3<T> grad_in(in_h, in_w, grad_out.channels());
    for (std::size_t k = 0; k < argmax.size(); ++k) grad_in.data()[argmax[k]] += grad_out.data()[k];
    return grad_in;
}

// --- forward / backward -----------------------------------------------------

struct Prediction {
    double raw_output = 0.5;       // sigmoid output o: 0 = corrosion, 1 = not-corrosion
    double corrosion_prob = 0.5;   // 1 - o

    bool is_corrosion(double gate = 0.5) const { return corrosion_prob > gate; }

    static Prediction from_raw(double o) { return {o, 1.0 - o}; }
};

enum class CacheMode {
    full,     // everything needed for backprop
    minimal,  // last conv pre/post activation and the logit only
};

template <class T>
struct ActivationCache {
    Tensor3<T> input;
    std::vector<Tensor3<T>> preact;   // per conv layer (empty in minimal mode except last)
    std::vector<Tensor3<T>> postact;  // per conv layer (empty in minimal mode except last)
    std::vector<PoolResult<T>> pooled;  // per pool (sections - 1)
    T logit = T(0);
    T raw_output = T(0.5);

    const Tensor3<T>& last_conv_preact() const { return preact.back(); }
    const Tensor3<T>& last_conv_postact() const { return postact.back(); }

    const Tensor3<T>& layer_input(int l) const {
        if (l == 0) return input;
        if (l % 2 == 0) return pooled[static_cast<std::size_t>(l / 2 - 1)].output;
        return postact[static_cast<std::size_t>(l - 1)];
    }
};

template <class T>
T dense_logit(const Tensor3<T>& features, const DenseLayer<T>& dense) {
    if (features.size() != dense.weights.size()) {
        throw DimensionError("dense head expects " + std::to_string(dense.weights.size()) + " features, got " +
                             std::to_string(features.size()));
    }
    T z = dense.bias;
    const auto f = features.data();
    for (std::size_t i = 0; i < f.size(); ++i) z += dense.weights[i] * f[i];
    return z;
}

template <class T>
ActivationCache<T> forward_cached(const Tensor3<T>& image, const ModelWeights<T>& model, CacheMode mode = CacheMode::full,
                                  int threads = 1) {
    const auto& cfg = model.config;
    if (image.height() != cfg.input_side || image.width() != cfg.input_side || image.channels() != 3) {
        throw DimensionError("forward: expected (" + std::to_string(cfg.input_side) + ", " +
                             std::to_string(cfg.input_side) + ", 3) input, got " + image.shape());
    }
    const int layers = cfg.conv_layer_count();
    if (static_cast<int>(model.conv.size()) != layers) throw DimensionError("forward: model/config layer count mismatch");

    ActivationCache<T> cache;
    const bool full = mode == CacheMode::full;
    if (full) cache.input = image;
    cache.preact.resize(static_cast<std::size_t>(layers));
    cache.postact.resize(static_cast<std::size_t>(layers));

    Tensor3<T> current = image;
    for (int l = 0; l < layers; ++l) {
        const auto& layer = model.conv[static_cast<std::size_t>(l)];
        Tensor3<T> pre = conv2d_valid<T>(current, layer.kernel, layer.bias, layer.out_channels, threads);
        Tensor3<T> post = relu(pre);
        const bool last = l + 1 == layers;
        const bool pool_next = l % 2 == 1 && !last;
        if (pool_next) {
            auto p = maxpool_2x2(post);
            current = p.output;
            if (full) cache.pooled.push_back(std::move(p));
        } else {
            current = post;
        }
        if (full || last) {
            cache.preact[static_cast<std::size_t>(l)] = std::move(pre);
            cache.postact[static_cast<std::size_t>(l)] = std::move(post);
        }
    }
    cache.logit = dense_logit(cache.postact.back(), model.dense);
    cache.raw_output = sigmoid(cache.logit);
    return cache;
}

template <class T>
Prediction predict(const ActivationCache<T>& cache) {
    return Prediction::from_raw(static_cast<double>(cache.raw_output));
}

template <class T>
struct ForwardResult {
    Prediction prediction;
    ActivationCache<T> cache;
};

template <class T>
ForwardResult<T> forward(const Tensor3<T>& image, const ModelWeights<T>& model, CacheMode mode = CacheMode::full,
                         int threads = 1) {
    auto cache = forward_cached(image, model, mode, threads);
    return {predict(cache), std::move(cache)};
}

template <class T>
struct BackwardResult {
    ModelWeights<T> grads;
    Tensor3<T> grad_last_preact;
};

/// Backpropagate a gradient d(objective)/d(logit) through a full cache.
template <class T>
BackwardResult<T> backward(const ActivationCache<T>& cache, const ModelWeights<T>& model, T grad_logit) {
    if (cache.pooled.size() + 1 != static_cast<std::size_t>(model.config.sections) || cache.input.empty()) {
        throw DimensionError("backward requires a CacheMode::full activation cache");
    }
    BackwardResult<T> r{ModelWeights<T>::zeros(model.config), {}};
    const auto& feat = cache.last_conv_postact();
    Tensor3<T> grad(feat.height(), feat.width(), feat.channels());
    for (std::size_t i = 0; i < feat.size(); ++i) {
        r.grads.dense.weights[i] = grad_logit * feat.data()[i];
        grad.data()[i] = grad_logit * model.dense.weights[i];
    }
    r.grads.dense.bias = grad_logit;

    const int layers = model.config.conv_layer_count();
    for (int l = layers - 1; l >= 0; --l) {
        const auto& pre = cache.preact[static_cast<std::size_t>(l)];
        // grad currently refers to this layer's post-activation.
        for (std::size_t i = 0; i < grad.size(); ++i) {
            if (!(pre.data()[i] > T(0))) grad.data()[i] = T(0);
        }
        if (l == layers - 1) r.grad_last_preact = grad;
        auto& gl = r.grads.conv[static_cast<std::size_t>(l)];
        const auto& layer = model.conv[static_cast<std::size_t>(l)];
        const auto& in = cache.layer_input(l);
        Tensor3<T> grad_in = conv2d_valid_backward<T>(in, layer.kernel, grad, gl.kernel, gl.bias);
        if (l > 0 && l % 2 == 0) {
            const auto& pool = cache.pooled[static_cast<std::size_t>(l / 2 - 1)];
            const auto& pooled_from = cache.postact[static_cast<std::size_t>(l - 1)];
            grad = maxpool_2x2_backward(grad_in, pool.argmax, pooled_from.height(), pooled_from.width());
        } else {
            grad = std::move(grad_in);
        }
    }
    return r;
}

// --- class score derivatives -----------------------------------------------

enum class ScoreKind {
    sigmoid,  // s = 1 - sigmoid(z) = sigmoid(-z): the post-sigmoid corrosion probability
    exp,      // s = exp(-z)
};

template <class T>
T corrosion_score(T logit, ScoreKind kind) {
    return kind == ScoreKind::sigmoid ? sigmoid(-logit) : std::exp(-logit);
}

/// n-th derivative (n = 1..3) of the score with respect to u = -z.
template <class T>
T score_derivative_wrt_u(T logit, int order, ScoreKind kind) {
    if (kind == ScoreKind::exp) return corrosion_score(logit, kind);
    // With p = sigmoid(u), q = 1 - p = sigmoid(-u): s' = pq, s'' = pq(q - p),
    // s''' = pq(1 - 6pq). Taking q from its own sigmoid keeps these nonzero
    // when the prediction saturates and 1 - s would round to 0.
    const T p = sigmoid(-logit);
    const T q = sigmoid(logit);
    const T d1 = p * q;
    switch (order) {
        case 1: return d1;
        case 2: return d1 * (q - p);
        case 3: return d1 * (T(1) - T(6) * d1);
        default: throw ConfigError("derivative order must be 1, 2 or 3");
    }
}

/// score_derivative_wrt_u divided by the first derivative. Every order shares
/// that positive factor, so CAMs built from these ratios differ from the true
/// ones only by a positive scale, and they survive logits large enough to
/// underflow the factor itself.
template <class T>
T score_derivative_ratio(T logit, int order, ScoreKind kind) {
    if (order < 1 || order > 3) throw ConfigError("derivative order must be 1, 2 or 3");
    if (kind == ScoreKind::exp || order == 1) return T(1);
    const T p = sigmoid(-logit);
    const T q = sigmoid(logit);
    return order == 2 ? q - p : T(1) - T(6) * p * q;
}

/// Elementwise d^n s / dA^n at the last conv layer's pre-activation A, in
/// closed form through ReLU -> flatten -> dense -> score. Positions with
/// A <= 0 get 0 for every order.
/// With `relative`, each order is divided by the first-order score factor.
template <class T>
Tensor3<T> head_derivatives(const ActivationCache<T>& cache, const ModelWeights<T>& model, int order,
                            ScoreKind kind = ScoreKind::sigmoid, bool relative = false) {
    const auto& a = cache.last_conv_preact();
    if (a.size() != model.dense.weights.size()) {
        throw DimensionError("head_derivatives: cache does not match the model's dense layer");
    }
    const T ds = relative ? score_derivative_ratio(cache.logit, order, kind)
                          : score_derivative_wrt_u(cache.logit, order, kind);
    Tensor3<T> out(a.height(), a.width(), a.channels());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a.data()[i] > T(0)) {
            const T dw = -model.dense.weights[i];  // du/dA_i on the active branch
            T p = dw;
            for (int k = 1; k < order; ++k) p *= dw;
            out.data()[i] = ds * p;
        }
    }
    return out;
}

// --- initialization ---------------------------------------------------------

/// He/Kaiming uniform: U[-b, b] with b = sqrt(6 / fan_in), biases zero.
template <class T>
ModelWeights<T> init_he_uniform(const NetworkConfig& cfg, std::uint64_t seed) {
    auto m = ModelWeights<T>::zeros(cfg);
    Rng rng(seed);
    for (auto& l : m.conv) {
        const double bound = std::sqrt(6.0 / (kKernelSide * kKernelSide * l.in_channels));
        for (auto& w : l.kernel) w = static_cast<T>(rng.uniform(-bound, bound));
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(m.dense.weights.size()));
    for (auto& w : m.dense.weights) w = static_cast<T>(rng.uniform(-bound, bound));
    return m;
}

/// Scale 8-bit RGB to [0, 1] floats.
template <class T>
Tensor3<T> to_tensor(std::span<const std::uint8_t> rgb, int height, int width) {
    Tensor3<T> t(height, width, 3);
    for (std::size_t i = 0; i < rgb.size(); ++i) t.data()[i] = static_cast<T>(rgb[i]) / T(255);
    return t;
}

}  // namespace rustseg
