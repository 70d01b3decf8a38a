#pragma once

// Heatmap -> pixel mask refinement: dynamic threshold filter, 8-bit
// conversion, dense-CRF mean-field inference, and the K-means trim path.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "image.hpp"
#include "localize.hpp"
#include "permutohedral.hpp"
#include "random.hpp"

namespace rustseg {

// --- threshold filter -------------------------------------------------------

/// T = 1 - (max(H) - mean(H)) on the low-resolution heatmap.
inline double dynamic_threshold(const Heatmap& h) {
    return 1.0 - (static_cast<double>(h.max()) - h.mean());
}

/// Zero values below T, scale survivors by 255 and round half-up.
inline MaskU8 apply_threshold(const FloatMap& map, double threshold) {
    MaskU8 m(map.height, map.width);
    for (int y = 0; y < map.height; ++y) {
        for (int x = 0; x < map.width; ++x) {
            const double v = map.at(y, x);
            m.at(y, x) = v < threshold ? 0 : round_half_up_u8(255.0 * v);
        }
    }
    return m;
}

// --- CRF --------------------------------------------------------------------

struct CrfParams {
    double appearance_sigma_xy = 80.0;
    double appearance_sigma_rgb = 13.0;
    double appearance_compat = 10.0;
    double smooth_sigma_xy = 3.0;
    double smooth_compat = 3.0;
    int epochs = 25;
    double unary_eps = 0.05;

    void validate() const {
        if (!(appearance_sigma_xy > 0 && appearance_sigma_rgb > 0 && smooth_sigma_xy > 0)) {
            throw ConfigError("CRF sigmas must be > 0");
        }
        if (epochs < 0) throw ConfigError("CRF epochs must be >= 0");
        if (appearance_compat < 0 || smooth_compat < 0) throw ConfigError("CRF compat values must be >= 0");
        if (!(unary_eps > 0.0 && unary_eps < 0.5)) throw ConfigError("unary_eps must be in (0, 0.5)");
    }
};

/// Per-pixel negative log-probabilities, interleaved [background, corrosion].
struct Unary {
    int height = 0;
    int width = 0;
    std::vector<double> energy;

    std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }

    /// Exchange the two label channels.
    Unary swapped() const {
        Unary u = *this;
        for (std::size_t i = 0; i < pixel_count(); ++i) std::swap(u.energy[2 * i], u.energy[2 * i + 1]);
        return u;
    }
};

/// P(corrosion) = eps + (1 - 2 eps) * mask / 255; unary = -ln P per label.
inline Unary mask_to_unary(const MaskU8& mask, double eps) {
    if (!(eps > 0.0 && eps < 0.5)) throw ConfigError("unary eps must be in (0, 0.5)");
    Unary u{mask.height(), mask.width(), std::vector<double>(mask.pixel_count() * 2)};
    for (std::size_t i = 0; i < mask.pixel_count(); ++i) {
        const double p = eps + (1.0 - 2.0 * eps) * (mask.pixels()[i] / 255.0);
        u.energy[2 * i] = -std::log(1.0 - p);
        u.energy[2 * i + 1] = -std::log(p);
    }
    return u;
}

enum class CrfBackend {
    exact,      // O(N^2) pairwise sum (reference)
    window,     // pairwise sum truncated to a square window per kernel
    lattice,    // permutohedral-lattice approximation, O(N)
    automatic,  // exact up to kAutoExactPixels, lattice above
};

inline constexpr std::size_t kAutoExactPixels = 64 * 64;

struct CrfOptions {
    CrfBackend backend = CrfBackend::automatic;
    double window_sigmas = 5.0;  // window half-width in units of each kernel's sigma
    std::function<void(int epoch, const std::vector<double>& q)> on_epoch;
};

/// Interleaved [background, corrosion] marginals per pixel.
struct Marginals {
    int height = 0;
    int width = 0;
    std::vector<double> q;

    MaskU8 to_mask() const {
        MaskU8 m(height, width);
        for (std::size_t i = 0; i < m.pixel_count(); ++i) m.pixels()[i] = q[2 * i + 1] > q[2 * i] ? 255 : 0;
        return m;
    }
};

namespace detail {

inline void softmax2(double e0, double e1, double& q0, double& q1) {
    // q_l proportional to exp(-e_l)
    const double m = std::min(e0, e1);
    const double a = std::exp(-(e0 - m));
    const double b = std::exp(-(e1 - m));
    const double s = a + b;
    q0 = a / s;
    q1 = b / s;
}

inline std::vector<double> gaussian_table(double sigma, int n) {
    std::vector<double> t(static_cast<std::size_t>(n));
    for (int d = 0; d < n; ++d) t[static_cast<std::size_t>(d)] = std::exp(-(double(d) * d) / (2.0 * sigma * sigma));
    return t;
}

inline constexpr int kMaxColorDist2 = 3 * 255 * 255;

/// Pairwise sums M_i(l) = sum_{j != i} (mu_A k_A(i,j) + mu_S k_S(i,j)) Q_j(l),
/// evaluated exactly over a square neighbourhood (the whole frame for exact).
class PairwiseDirect {
public:
    PairwiseDirect(const RgbImage& img, const CrfParams& p, int radius_a, int radius_s)
        : img_(img), p_(p), ra_(radius_a), rs_(radius_s) {
        const int n = std::max(img.height(), img.width());
        ax_ = gaussian_table(p.appearance_sigma_xy, n);
        sx_ = gaussian_table(p.smooth_sigma_xy, n);
        color_.resize(kMaxColorDist2 + 1);
        for (int d2 = 0; d2 <= kMaxColorDist2; ++d2) {
            color_[static_cast<std::size_t>(d2)] = std::exp(-d2 / (2.0 * p.appearance_sigma_rgb * p.appearance_sigma_rgb));
        }
    }

    void messages(const std::vector<double>& q, std::vector<double>& out) const {
        const int h = img_.height();
        const int w = img_.width();
        const int r = std::max(ra_, rs_);
        const auto px = img_.pixels();
        for (int yi = 0; yi < h; ++yi) {
            for (int xi = 0; xi < w; ++xi) {
                const std::size_t i = static_cast<std::size_t>(yi) * w + xi;
                const int ri = px[3 * i], gi = px[3 * i + 1], bi = px[3 * i + 2];
                double m0 = 0.0, m1 = 0.0;
                const int y0 = std::max(0, yi - r), y1 = std::min(h - 1, yi + r);
                const int x0 = std::max(0, xi - r), x1 = std::min(w - 1, xi + r);
                for (int yj = y0; yj <= y1; ++yj) {
                    const int dy = std::abs(yj - yi);
                    const bool app_y = dy <= ra_;
                    const bool smo_y = dy <= rs_;
                    const double ay = ax_[static_cast<std::size_t>(dy)];
                    const double sy = sx_[static_cast<std::size_t>(dy)];
                    for (int xj = x0; xj <= x1; ++xj) {
                        const std::size_t j = static_cast<std::size_t>(yj) * w + xj;
                        if (j == i) continue;
                        const int dx = std::abs(xj - xi);
                        double k = 0.0;
                        if (app_y && dx <= ra_) {
                            const int dr = px[3 * j] - ri, dg = px[3 * j + 1] - gi, db = px[3 * j + 2] - bi;
                            k += p_.appearance_compat * ay * ax_[static_cast<std::size_t>(dx)] *
                                 color_[static_cast<std::size_t>(dr * dr + dg * dg + db * db)];
                        }
                        if (smo_y && dx <= rs_) k += p_.smooth_compat * sy * sx_[static_cast<std::size_t>(dx)];
                        m0 += k * q[2 * j];
                        m1 += k * q[2 * j + 1];
                    }
                }
                out[2 * i] = m0;
                out[2 * i + 1] = m1;
            }
        }
    }

    /// sum_{j != i} of the combined kernel for a single pixel i.
    double kernel_row_sum(std::size_t i, bool appearance) const {
        const int w = img_.width();
        const auto px = img_.pixels();
        const int yi = static_cast<int>(i / static_cast<std::size_t>(w));
        const int xi = static_cast<int>(i % static_cast<std::size_t>(w));
        double s = 0.0;
        for (std::size_t j = 0; j < img_.pixel_count(); ++j) {
            if (j == i) continue;
            const int dy = std::abs(static_cast<int>(j / static_cast<std::size_t>(w)) - yi);
            const int dx = std::abs(static_cast<int>(j % static_cast<std::size_t>(w)) - xi);
            if (appearance) {
                const int dr = px[3 * j] - px[3 * i], dg = px[3 * j + 1] - px[3 * i + 1], db = px[3 * j + 2] - px[3 * i + 2];
                s += ax_[static_cast<std::size_t>(dy)] * ax_[static_cast<std::size_t>(dx)] *
                     color_[static_cast<std::size_t>(dr * dr + dg * dg + db * db)];
            } else {
                s += sx_[static_cast<std::size_t>(dy)] * sx_[static_cast<std::size_t>(dx)];
            }
        }
        return s;
    }

private:
    const RgbImage& img_;
    CrfParams p_;
    int ra_, rs_;
    std::vector<double> ax_, sx_, color_;
};

/// Lattice-filtered pairwise sums with a global scale per kernel, fitted so the
/// lattice's row sums match exact row sums on a sample of pixels.
class PairwiseLattice {
public:
    PairwiseLattice(const RgbImage& img, const CrfParams& p)
        : p_(p), n_(img.pixel_count()), appearance_(features(img, p, true), 5), smooth_(features(img, p, false), 2) {
        PairwiseDirect exact(img, p, std::max(img.height(), img.width()), std::max(img.height(), img.width()));
        std::vector<float> ones(n_, 1.f), resp_a(n_), resp_s(n_);
        appearance_.filter(ones, resp_a, 1);
        smooth_.filter(ones, resp_s, 1);
        const std::size_t samples = std::min<std::size_t>(n_, 64);
        double ea = 0, la = 0, es = 0, ls = 0;
        for (std::size_t s = 0; s < samples; ++s) {
            const std::size_t i = (s * n_) / samples + (n_ / samples) / 2;
            ea += exact.kernel_row_sum(std::min(i, n_ - 1), true) + 1.0;
            es += exact.kernel_row_sum(std::min(i, n_ - 1), false) + 1.0;
            la += resp_a[std::min(i, n_ - 1)];
            ls += resp_s[std::min(i, n_ - 1)];
        }
        scale_a_ = la > 0 ? ea / la : 0.0;
        scale_s_ = ls > 0 ? es / ls : 0.0;
    }

    void messages(const std::vector<double>& q, std::vector<double>& out) const {
        std::vector<float> in(2 * n_), fa(2 * n_), fs(2 * n_);
        for (std::size_t k = 0; k < 2 * n_; ++k) in[k] = static_cast<float>(q[k]);
        appearance_.filter(in, fa, 2);
        smooth_.filter(in, fs, 2);
        for (std::size_t k = 0; k < 2 * n_; ++k) {
            // remove the self term (kernel value 1 at zero distance)
            const double a = std::max(0.0, scale_a_ * fa[k] - q[k]);
            const double s = std::max(0.0, scale_s_ * fs[k] - q[k]);
            out[k] = p_.appearance_compat * a + p_.smooth_compat * s;
        }
    }

private:
    static std::vector<float> features(const RgbImage& img, const CrfParams& p, bool appearance) {
        const int d = appearance ? 5 : 2;
        std::vector<float> f(img.pixel_count() * static_cast<std::size_t>(d));
        const double sxy = appearance ? p.appearance_sigma_xy : p.smooth_sigma_xy;
        for (int y = 0; y < img.height(); ++y) {
            for (int x = 0; x < img.width(); ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * img.width() + x;
                float* fi = f.data() + i * static_cast<std::size_t>(d);
                fi[0] = static_cast<float>(x / sxy);
                fi[1] = static_cast<float>(y / sxy);
                if (appearance) {
                    for (int c = 0; c < 3; ++c) fi[2 + c] = static_cast<float>(img.at(y, x, c) / p.appearance_sigma_rgb);
                }
            }
        }
        return f;
    }

    CrfParams p_;
    std::size_t n_;
    PermutohedralLattice appearance_;
    PermutohedralLattice smooth_;
    double scale_a_ = 1.0, scale_s_ = 1.0;
};

template <class Pairwise>
void mean_field(const Pairwise& pairwise, const Unary& u, int epochs, std::vector<double>& q, const CrfOptions& opt) {
    const std::size_t n = u.pixel_count();
    std::vector<double> msg(2 * n);
    for (int e = 0; e < epochs; ++e) {
        pairwise.messages(q, msg);
        for (std::size_t i = 0; i < n; ++i) {
            // Potts: label l pays for the kernel-weighted mass on the other label.
            softmax2(u.energy[2 * i] + msg[2 * i + 1], u.energy[2 * i + 1] + msg[2 * i], q[2 * i], q[2 * i + 1]);
        }
        if (opt.on_epoch) opt.on_epoch(e + 1, q);
    }
}

inline int window_radius(double sigma, double sigmas, int limit) {
    return std::min(limit, static_cast<int>(std::ceil(sigma * sigmas)));
}

}  // namespace detail

inline CrfBackend resolve_backend(CrfBackend b, std::size_t pixels) {
    if (b != CrfBackend::automatic) return b;
    return pixels <= kAutoExactPixels ? CrfBackend::exact : CrfBackend::lattice;
}

/// Parallel mean-field over two labels with Potts compatibility. Q starts at
/// softmax(-unary) and all pixels update simultaneously each epoch.
inline Marginals crf_marginals(const RgbImage& image, const Unary& unary, const CrfParams& params,
                               const CrfOptions& opt = {}) {
    params.validate();
    if (!image.same_size(unary.height, unary.width)) {
        throw DimensionError("crf: image " + std::to_string(image.height()) + "x" + std::to_string(image.width()) +
                             " does not match mask " + std::to_string(unary.height) + "x" +
                             std::to_string(unary.width));
    }
    Marginals m{image.height(), image.width(), std::vector<double>(unary.energy.size())};
    const std::size_t n = unary.pixel_count();
    for (std::size_t i = 0; i < n; ++i) detail::softmax2(unary.energy[2 * i], unary.energy[2 * i + 1], m.q[2 * i], m.q[2 * i + 1]);
    if (params.epochs == 0 || n == 0) return m;

    const bool no_coupling = params.appearance_compat == 0.0 && params.smooth_compat == 0.0;
    if (no_coupling) {
        // messages are identically zero; every epoch reproduces softmax(-unary)
        if (opt.on_epoch) {
            for (int e = 0; e < params.epochs; ++e) opt.on_epoch(e + 1, m.q);
        }
        return m;
    }
    const int frame = std::max(image.height(), image.width());
    switch (resolve_backend(opt.backend, n)) {
        case CrfBackend::exact:
            detail::mean_field(detail::PairwiseDirect(image, params, frame, frame), unary, params.epochs, m.q, opt);
            break;
        case CrfBackend::window:
            detail::mean_field(
                detail::PairwiseDirect(image, params,
                                       detail::window_radius(params.appearance_sigma_xy, opt.window_sigmas, frame),
                                       detail::window_radius(params.smooth_sigma_xy, opt.window_sigmas, frame)),
                unary, params.epochs, m.q, opt);
            break;
        case CrfBackend::lattice:
            detail::mean_field(detail::PairwiseLattice(image, params), unary, params.epochs, m.q, opt);
            break;
        case CrfBackend::automatic:
            break;
    }
    return m;
}

/// Mask -> unary -> mean field -> 255 where corrosion wins, else 0.
inline MaskU8 crf_refine(const RgbImage& image, const MaskU8& mask, const CrfParams& params, const CrfOptions& opt = {}) {
    params.validate();
    if (!image.same_size(mask.height(), mask.width())) {
        throw DimensionError("crf_refine: image and mask dimensions differ");
    }
    return crf_marginals(image, mask_to_unary(mask, params.unary_eps), params, opt).to_mask();
}

// --- K-means ----------------------------------------------------------------

using BinaryMask = std::vector<std::uint8_t>;  // 0/1 per pixel, row-major

struct KMeansResult {
    std::array<BinaryMask, 2> clusters;
    std::array<std::array<double, 3>, 2> centers{};
    std::vector<double> sse_history;  // objective after each assignment step
    int iterations = 0;
    bool degenerate = false;  // one cluster ended up empty
};

inline constexpr int kKMeansMaxIterations = 50;

/// Lloyd's algorithm with k = 2 on RGB values.
inline KMeansResult kmeans2(const RgbImage& image, std::uint64_t seed) {
    const std::size_t n = image.pixel_count();
    if (n == 0) throw DimensionError("kmeans2: empty image");
    const auto px = image.pixels();
    const auto color = [&](std::size_t i) {
        return std::array<double, 3>{double(px[3 * i]), double(px[3 * i + 1]), double(px[3 * i + 2])};
    };
    const auto dist2 = [](const std::array<double, 3>& a, const std::array<double, 3>& b) {
        const double d0 = a[0] - b[0], d1 = a[1] - b[1], d2 = a[2] - b[2];
        return d0 * d0 + d1 * d1 + d2 * d2;
    };

    KMeansResult r;
    Rng rng(seed);
    // two distinct pixels; re-draw while they share a colour
    std::size_t a = rng.below(n), b = a;
    for (int attempt = 0; attempt < 64 && (b == a || color(a) == color(b)); ++attempt) b = rng.below(n);
    r.centers = {color(a), color(b)};

    std::vector<std::uint8_t> label(n, 0);
    for (int it = 0; it < kKMeansMaxIterations; ++it) {
        bool changed = it == 0;
        double sse = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = color(i);
            const double d0 = dist2(c, r.centers[0]);
            const double d1 = dist2(c, r.centers[1]);
            // equidistant points keep their current label
            const std::uint8_t l = d0 < d1 ? 0 : (d1 < d0 ? 1 : label[i]);
            changed = changed || l != label[i];
            label[i] = l;
            sse += l ? d1 : d0;
        }
        r.sse_history.push_back(sse);
        r.iterations = it + 1;
        if (!changed) break;

        std::array<std::array<double, 3>, 2> sum{};
        std::array<std::size_t, 2> count{};
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = color(i);
            for (int k = 0; k < 3; ++k) sum[label[i]][static_cast<std::size_t>(k)] += c[static_cast<std::size_t>(k)];
            ++count[label[i]];
        }
        for (int k = 0; k < 2; ++k) {
            if (count[static_cast<std::size_t>(k)] == 0) continue;
            for (int ch = 0; ch < 3; ++ch) {
                r.centers[static_cast<std::size_t>(k)][static_cast<std::size_t>(ch)] =
                    sum[static_cast<std::size_t>(k)][static_cast<std::size_t>(ch)] / double(count[static_cast<std::size_t>(k)]);
            }
        }
        for (int k = 0; k < 2; ++k) {
            if (count[static_cast<std::size_t>(k)] != 0) continue;
            // re-seed an empty cluster at the point farthest from the other centre
            const auto& other = r.centers[static_cast<std::size_t>(1 - k)];
            std::size_t far = 0;
            double best = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double d = dist2(color(i), other);
                if (d > best) {
                    best = d;
                    far = i;
                }
            }
            r.centers[static_cast<std::size_t>(k)] = color(far);
        }
    }

    r.clusters[0].assign(n, 0);
    r.clusters[1].assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) r.clusters[label[i]][i] = 1;
    r.degenerate = std::none_of(r.clusters[0].begin(), r.clusters[0].end(), [](auto v) { return v != 0; }) ||
                   std::none_of(r.clusters[1].begin(), r.clusters[1].end(), [](auto v) { return v != 0; });
    return r;
}

/// Index of the cluster covering the most seed pixels; ties go to the smaller
/// cluster, then to cluster 0.
inline int select_cluster(const std::array<BinaryMask, 2>& clusters, const MaskU8& seed) {
    if (clusters[0].size() != seed.pixel_count() || clusters[1].size() != seed.pixel_count()) {
        throw DimensionError("select_cluster: cluster and seed sizes differ");
    }
    std::array<std::size_t, 2> overlap{}, area{};
    std::size_t seed_count = 0;
    for (std::size_t i = 0; i < seed.pixel_count(); ++i) {
        const bool s = seed.pixels()[i] > 0;
        seed_count += s;
        for (int k = 0; k < 2; ++k) {
            area[static_cast<std::size_t>(k)] += clusters[static_cast<std::size_t>(k)][i];
            overlap[static_cast<std::size_t>(k)] += s && clusters[static_cast<std::size_t>(k)][i];
        }
    }
    if (seed_count == 0) throw ConfigError("select_cluster: seed mask is empty");
    if (overlap[0] != overlap[1]) return overlap[0] > overlap[1] ? 0 : 1;
    return area[1] < area[0] ? 1 : 0;
}

// --- morphology -------------------------------------------------------------

/// Erosion by the radius-2 L1 ball (5x5 diamond). Out-of-frame counts as unset.
inline BinaryMask erode_diamond5(const BinaryMask& m, int height, int width) {
    if (m.size() != static_cast<std::size_t>(height) * width) throw DimensionError("erode_diamond5: size mismatch");
    BinaryMask out(m.size(), 0);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            bool keep = m[static_cast<std::size_t>(y) * width + x] != 0;
            for (int dy = -2; dy <= 2 && keep; ++dy) {
                const int r = 2 - std::abs(dy);
                for (int dx = -r; dx <= r; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= height || xx < 0 || xx >= width ||
                        !m[static_cast<std::size_t>(yy) * width + xx]) {
                        keep = false;
                        break;
                    }
                }
            }
            out[static_cast<std::size_t>(y) * width + x] = keep;
        }
    }
    return out;
}

// --- advanced path ----------------------------------------------------------

inline constexpr int kAdvancedCrfEpochs = 10;

struct AdvancedResult {
    MaskU8 mask;
    MaskU8 trimmed;      // graded seed after cluster trim and erosion
    int selected_cluster = 0;
    bool kmeans_degenerate = false;
    bool empty = false;  // nothing survived trimming; no CRF run
};

/// Trim the graded seed to the K-means cluster it overlaps most, erode its
/// support, then run a short CRF.
inline AdvancedResult advanced_refine(const RgbImage& image, const MaskU8& mask, const CrfParams& params,
                                      std::uint64_t seed, const CrfOptions& opt = {}) {
    if (!image.same_size(mask.height(), mask.width())) throw DimensionError("advanced_refine: image/mask size mismatch");
    AdvancedResult r;
    const auto km = kmeans2(image, seed);
    r.kmeans_degenerate = km.degenerate;
    r.selected_cluster = select_cluster(km.clusters, mask);
    const auto& cluster = km.clusters[static_cast<std::size_t>(r.selected_cluster)];

    BinaryMask support(mask.pixel_count());
    for (std::size_t i = 0; i < support.size(); ++i) support[i] = cluster[i] && mask.pixels()[i] > 0;
    const auto eroded = erode_diamond5(support, mask.height(), mask.width());

    r.trimmed = MaskU8(mask.height(), mask.width());
    for (std::size_t i = 0; i < eroded.size(); ++i) r.trimmed.pixels()[i] = eroded[i] ? mask.pixels()[i] : 0;
    if (count_nonzero(r.trimmed) == 0) {
        r.empty = true;
        r.mask = MaskU8(mask.height(), mask.width());
        return r;
    }
    CrfParams short_run = params;
    short_run.epochs = kAdvancedCrfEpochs;
    r.mask = crf_refine(image, r.trimmed, short_run, opt);
    return r;
}

}  // namespace rustseg
