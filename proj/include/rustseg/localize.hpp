#pragma once

// Class activation heatmaps from the last conv layer: Grad-CAM and Grad-CAM++.
// Both reduce to one weighted pool over the first-order gradients:
//   alpha_k = sum_ij w^k_ij * g(ds/dA^k_ij),   heatmap = ReLU(sum_k alpha_k A^k)
// Grad-CAM uses w = 1/(u*v) and g = identity; Grad-CAM++ uses the per-position
// weights below and g = ReLU.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "image.hpp"
#include "network.hpp"

namespace rustseg {

struct Heatmap {
    int side = 0;
    std::vector<float> values;  // row-major side x side

    Heatmap() = default;
    explicit Heatmap(int s, float fill = 0.f) : side(s), values(static_cast<std::size_t>(s) * s, fill) {}

    float& at(int y, int x) { return values[static_cast<std::size_t>(y) * side + x]; }
    float at(int y, int x) const { return values[static_cast<std::size_t>(y) * side + x]; }

    float max() const { return values.empty() ? 0.f : *std::max_element(values.begin(), values.end()); }
    double mean() const {
        double s = 0.0;
        for (float v : values) s += v;
        return values.empty() ? 0.0 : s / static_cast<double>(values.size());
    }
};

/// Full-resolution float map (upsampled heatmap).
struct FloatMap {
    int height = 0;
    int width = 0;
    std::vector<float> values;

    float at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

struct CamWeights {
    std::vector<double> alpha;           // per feature map
    Tensor3<double> pixel_weights;       // per position; Grad-CAM++ only
};

enum class CamMaps {
    pre_relu,   // A^k taken before the last ReLU
    post_relu,
};

template <class T>
const Tensor3<T>& cam_feature_maps(const ActivationCache<T>& cache, CamMaps maps) {
    return maps == CamMaps::pre_relu ? cache.last_conv_preact() : cache.last_conv_postact();
}

/// alpha_k = sum_ij weights(i,j,k) * g(grads(i,j,k)), g = ReLU when relu_grads.
template <class T>
std::vector<double> weighted_pool(const Tensor3<T>& grads, const Tensor3<double>& weights, bool relu_grads) {
    if (grads.height() != weights.height() || grads.width() != weights.width() ||
        grads.channels() != weights.channels()) {
        throw DimensionError("weighted_pool: gradients " + grads.shape() + " vs weights " + weights.shape());
    }
    const int k = grads.channels();
    std::vector<double> alpha(static_cast<std::size_t>(k), 0.0);
    for (int y = 0; y < grads.height(); ++y) {
        for (int x = 0; x < grads.width(); ++x) {
            const T* g = grads.pixel(y, x);
            const double* w = weights.pixel(y, x);
            for (int c = 0; c < k; ++c) {
                double gv = static_cast<double>(g[c]);
                if (relu_grads && gv < 0.0) gv = 0.0;
                alpha[static_cast<std::size_t>(c)] += w[c] * gv;
            }
        }
    }
    return alpha;
}

/// ReLU(sum_k alpha_k A^k) on the (u, v) grid.
template <class T>
Heatmap combine_maps(const Tensor3<T>& maps, const std::vector<double>& alpha) {
    if (maps.height() != maps.width()) throw DimensionError("feature maps must be square, got " + maps.shape());
    if (alpha.size() != static_cast<std::size_t>(maps.channels())) {
        throw DimensionError("alpha length " + std::to_string(alpha.size()) + " does not match K = " +
                             std::to_string(maps.channels()));
    }
    Heatmap h(maps.height());
    for (int y = 0; y < maps.height(); ++y) {
        for (int x = 0; x < maps.width(); ++x) {
            const T* a = maps.pixel(y, x);
            double s = 0.0;
            for (int c = 0; c < maps.channels(); ++c) s += alpha[static_cast<std::size_t>(c)] * static_cast<double>(a[c]);
            h.at(y, x) = static_cast<float>(std::max(0.0, s));
        }
    }
    return h;
}

template <class T>
Tensor3<double> uniform_pixel_weights(const Tensor3<T>& like) {
    return Tensor3<double>(like.height(), like.width(), like.channels(),
                           1.0 / (static_cast<double>(like.height()) * like.width()));
}

/// Grad-CAM on explicit feature maps and first-order gradients.
template <class T>
Heatmap grad_cam(const Tensor3<T>& maps, const Tensor3<T>& grads1, CamWeights* out_weights = nullptr) {
    require_same_shape(maps, grads1, "grad_cam");
    auto alpha = weighted_pool(grads1, uniform_pixel_weights(grads1), false);
    Heatmap h = combine_maps(maps, alpha);
    if (out_weights) out_weights->alpha = std::move(alpha);
    return h;
}

template <class T>
Heatmap grad_cam(const ActivationCache<T>& cache, const Tensor3<T>& grads1, CamMaps maps = CamMaps::pre_relu) {
    return grad_cam(cam_feature_maps(cache, maps), grads1);
}

/// Per-position Grad-CAM++ weights:
///   w_ij = d2_ij / (2 d2_ij + d3_ij * sum_ab A_ab)
/// with the feature-map sum taken over map k; zero denominators give weight 0.
template <class T>
Tensor3<double> grad_cam_pp_pixel_weights(const Tensor3<T>& maps, const Tensor3<T>& grads2, const Tensor3<T>& grads3) {
    require_same_shape(maps, grads2, "grad_cam_pp");
    require_same_shape(maps, grads3, "grad_cam_pp");
    const int k = maps.channels();
    std::vector<double> map_sum(static_cast<std::size_t>(k), 0.0);
    for (int y = 0; y < maps.height(); ++y) {
        for (int x = 0; x < maps.width(); ++x) {
            for (int c = 0; c < k; ++c) map_sum[static_cast<std::size_t>(c)] += static_cast<double>(maps(y, x, c));
        }
    }
    Tensor3<double> w(maps.height(), maps.width(), k);
    for (int y = 0; y < maps.height(); ++y) {
        for (int x = 0; x < maps.width(); ++x) {
            for (int c = 0; c < k; ++c) {
                const double d2 = static_cast<double>(grads2(y, x, c));
                const double d3 = static_cast<double>(grads3(y, x, c));
                const double den = 2.0 * d2 + d3 * map_sum[static_cast<std::size_t>(c)];
                w(y, x, c) = den != 0.0 ? d2 / den : 0.0;
            }
        }
    }
    return w;
}

template <class T>
Heatmap grad_cam_pp(const Tensor3<T>& maps, const Tensor3<T>& grads1, const Tensor3<T>& grads2,
                    const Tensor3<T>& grads3, CamWeights* out_weights = nullptr) {
    require_same_shape(maps, grads1, "grad_cam_pp");
    auto w = grad_cam_pp_pixel_weights(maps, grads2, grads3);
    auto alpha = weighted_pool(grads1, w, true);
    Heatmap h = combine_maps(maps, alpha);
    if (out_weights) {
        out_weights->alpha = std::move(alpha);
        out_weights->pixel_weights = std::move(w);
    }
    return h;
}

/// Derivatives are taken relative to the first-order score factor, so the
/// raw map is a positive multiple of the textbook one.
template <class T>
Heatmap grad_cam_pp(const ActivationCache<T>& cache, const ModelWeights<T>& model, ScoreKind score = ScoreKind::sigmoid,
                    CamMaps maps = CamMaps::pre_relu) {
    const auto g1 = head_derivatives(cache, model, 1, score, true);
    const auto g2 = head_derivatives(cache, model, 2, score, true);
    const auto g3 = head_derivatives(cache, model, 3, score, true);
    return grad_cam_pp(cam_feature_maps(cache, maps), g1, g2, g3);
}

struct NormalizedHeatmap {
    Heatmap map;
    bool localized = false;  // false when the raw map was all zero
};

/// Divide by the maximum. An all-zero map stays zero and is flagged.
inline NormalizedHeatmap normalize_heatmap(const Heatmap& raw) {
    NormalizedHeatmap out{raw, false};
    const float mx = raw.max();
    if (!(mx > 0.f)) {
        std::fill(out.map.values.begin(), out.map.values.end(), 0.f);
        return out;
    }
    for (auto& v : out.map.values) v = v / mx;
    out.localized = true;
    return out;
}

/// Corner-aligned bilinear upsampling to target_side x target_side.
inline FloatMap upsample_bilinear(const Heatmap& map, int target_side) {
    if (map.side < 1) throw DimensionError("upsample_bilinear: empty heatmap");
    if (target_side < map.side) {
        throw DimensionError("upsample_bilinear: target " + std::to_string(target_side) + " smaller than source " +
                             std::to_string(map.side));
    }
    FloatMap out{target_side, target_side, std::vector<float>(static_cast<std::size_t>(target_side) * target_side)};
    const int n = map.side;
    for (int y = 0; y < target_side; ++y) {
        const double sy = detail::corner_aligned(y, n, target_side);
        const int y0 = std::min(static_cast<int>(sy), n - 1);
        const int y1 = std::min(y0 + 1, n - 1);
        const double fy = sy - y0;
        for (int x = 0; x < target_side; ++x) {
            const double sx = detail::corner_aligned(x, n, target_side);
            const int x0 = std::min(static_cast<int>(sx), n - 1);
            const int x1 = std::min(x0 + 1, n - 1);
            const double fx = sx - x0;
            const double v = (1 - fy) * ((1 - fx) * map.at(y0, x0) + fx * map.at(y0, x1)) +
                             fy * ((1 - fx) * map.at(y1, x0) + fx * map.at(y1, x1));
            out.values[static_cast<std::size_t>(y) * target_side + x] = static_cast<float>(v);
        }
    }
    return out;
}

/// 8-bit grayscale rendering of a [0, 1] heatmap.
inline MaskU8 heatmap_to_gray(const Heatmap& h) {
    MaskU8 g(h.side, h.side);
    for (int y = 0; y < h.side; ++y) {
        for (int x = 0; x < h.side; ++x) g.at(y, x) = round_half_up_u8(255.0 * std::clamp(h.at(y, x), 0.f, 1.f));
    }
    return g;
}

inline void write_heatmap_text(std::ostream& os, const Heatmap& h) {
    for (int y = 0; y < h.side; ++y) {
        for (int x = 0; x < h.side; ++x) {
            if (x) os << ' ';
            os << h.at(y, x);
        }
        os << '\n';
    }
}

}  // namespace rustseg
