#pragma once

// Permutohedral lattice for approximate high-dimensional Gaussian filtering
// (splat / blur / slice). Used by the dense CRF on images too large for the
// exact pairwise sum. Output is proportional to sum_j exp(-|f_i - f_j|^2 / 2) v_j
// up to a roughly constant factor, which callers calibrate.

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "error.hpp"

namespace rustseg {

class PermutohedralLattice {
public:
    static constexpr int kMaxDim = 8;

    /// features: n points x d dimensions, row-major, already divided by sigma.
    PermutohedralLattice(std::span<const float> features, int d) : d_(d) {
        if (d < 1 || d > kMaxDim) throw ConfigError("lattice dimension out of range");
        if (features.size() % static_cast<std::size_t>(d) != 0) throw DimensionError("lattice feature length");
        n_ = static_cast<int>(features.size() / static_cast<std::size_t>(d));
        build(features);
    }

    int point_count() const { return n_; }
    int lattice_size() const { return m_; }

    /// out[i*vd + c] ~ sum_j k(i, j) * in[j*vd + c]
    void filter(std::span<const float> in, std::span<float> out, int vd) const {
        const std::size_t vs = static_cast<std::size_t>(vd);
        std::vector<float> values(static_cast<std::size_t>(m_ + 2) * vs, 0.f);
        std::vector<float> scratch(values.size(), 0.f);
        const int d1 = d_ + 1;
        // splat (slot 0 is the "missing neighbour" sink)
        for (int i = 0; i < n_; ++i) {
            for (int j = 0; j < d1; ++j) {
                const std::size_t k = static_cast<std::size_t>(i) * d1 + j;
                const std::size_t o = static_cast<std::size_t>(offset_[k] + 1) * vs;
                const float w = barycentric_[k];
                for (std::size_t c = 0; c < vs; ++c) values[o + c] += w * in[static_cast<std::size_t>(i) * vs + c];
            }
        }
        // blur along each lattice axis with [0.5 1 0.5]
        for (int j = 0; j < d1; ++j) {
            for (int i = 0; i < m_; ++i) {
                const auto& nb = neighbours_[static_cast<std::size_t>(j) * m_ + i];
                const std::size_t self = static_cast<std::size_t>(i + 1) * vs;
                const std::size_t a = static_cast<std::size_t>(nb[0] + 1) * vs;
                const std::size_t b = static_cast<std::size_t>(nb[1] + 1) * vs;
                for (std::size_t c = 0; c < vs; ++c) {
                    scratch[self + c] = values[self + c] + 0.5f * (values[a + c] + values[b + c]);
                }
            }
            std::swap(values, scratch);
            std::fill(values.begin(), values.begin() + static_cast<long>(vs), 0.f);
        }
        // slice
        const float alpha = 1.f / (1.f + std::pow(2.f, -static_cast<float>(d_)));
        for (int i = 0; i < n_; ++i) {
            for (std::size_t c = 0; c < vs; ++c) out[static_cast<std::size_t>(i) * vs + c] = 0.f;
            for (int j = 0; j < d1; ++j) {
                const std::size_t k = static_cast<std::size_t>(i) * d1 + j;
                const std::size_t o = static_cast<std::size_t>(offset_[k] + 1) * vs;
                const float w = barycentric_[k] * alpha;
                for (std::size_t c = 0; c < vs; ++c) out[static_cast<std::size_t>(i) * vs + c] += w * values[o + c];
            }
        }
    }

private:
    using Key = std::array<std::int32_t, kMaxDim>;

    struct KeyHash {
        std::size_t operator()(const Key& k) const noexcept {
            std::size_t h = 0;
            for (auto v : k) h = h * 2531011u + static_cast<std::uint32_t>(v);
            return h;
        }
    };

    int find_or_insert(const Key& key, bool insert) {
        auto it = index_.find(key);
        if (it != index_.end()) return it->second;
        if (!insert) return -1;
        const int id = static_cast<int>(keys_.size());
        keys_.push_back(key);
        index_.emplace(key, id);
        return id;
    }

    void build(std::span<const float> f) {
        const int d = d_;
        const int d1 = d + 1;
        offset_.assign(static_cast<std::size_t>(n_) * d1, 0);
        barycentric_.assign(static_cast<std::size_t>(n_) * d1, 0.f);

        std::vector<float> scale(static_cast<std::size_t>(d));
        const float inv_std = std::sqrt(2.f / 3.f) * static_cast<float>(d1);
        for (int i = 0; i < d; ++i) scale[static_cast<std::size_t>(i)] = 1.f / std::sqrt(static_cast<float>((i + 1) * (i + 2))) * inv_std;

        std::vector<std::int32_t> canonical(static_cast<std::size_t>(d1 * d1));
        for (int i = 0; i <= d; ++i) {
            for (int j = 0; j <= d - i; ++j) canonical[static_cast<std::size_t>(i * d1 + j)] = i;
            for (int j = d - i + 1; j <= d; ++j) canonical[static_cast<std::size_t>(i * d1 + j)] = i - d1;
        }

        std::array<float, kMaxDim + 1> elevated{};
        std::array<std::int32_t, kMaxDim + 1> rem0{};
        std::array<std::int32_t, kMaxDim + 1> rank{};
        std::array<float, kMaxDim + 2> bary{};
        const float down = 1.f / static_cast<float>(d1);

        for (int p = 0; p < n_; ++p) {
            const float* fp = f.data() + static_cast<std::size_t>(p) * d;
            float sm = 0.f;
            for (int j = d; j > 0; --j) {
                const float cf = fp[j - 1] * scale[static_cast<std::size_t>(j - 1)];
                elevated[static_cast<std::size_t>(j)] = sm - static_cast<float>(j) * cf;
                sm += cf;
            }
            elevated[0] = sm;

            int sum = 0;
            for (int i = 0; i <= d; ++i) {
                const float v = down * elevated[static_cast<std::size_t>(i)];
                const float up = std::ceil(v) * static_cast<float>(d1);
                const float dn = std::floor(v) * static_cast<float>(d1);
                const float e = elevated[static_cast<std::size_t>(i)];
                rem0[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(up - e < e - dn ? up : dn);
                sum += rem0[static_cast<std::size_t>(i)] / d1;
            }
            rank.fill(0);
            for (int i = 0; i < d; ++i) {
                const float di = elevated[static_cast<std::size_t>(i)] - static_cast<float>(rem0[static_cast<std::size_t>(i)]);
                for (int j = i + 1; j <= d; ++j) {
                    const float dj = elevated[static_cast<std::size_t>(j)] - static_cast<float>(rem0[static_cast<std::size_t>(j)]);
                    if (di < dj) ++rank[static_cast<std::size_t>(i)];
                    else ++rank[static_cast<std::size_t>(j)];
                }
            }
            if (sum > 0) {
                for (int i = 0; i <= d; ++i) {
                    auto& r = rank[static_cast<std::size_t>(i)];
                    if (r >= d1 - sum) {
                        rem0[static_cast<std::size_t>(i)] -= d1;
                        r += sum - d1;
                    } else {
                        r += sum;
                    }
                }
            } else if (sum < 0) {
                for (int i = 0; i <= d; ++i) {
                    auto& r = rank[static_cast<std::size_t>(i)];
                    if (r < -sum) {
                        rem0[static_cast<std::size_t>(i)] += d1;
                        r += d1 + sum;
                    } else {
                        r += sum;
                    }
                }
            }
            bary.fill(0.f);
            for (int i = 0; i <= d; ++i) {
                const float v = (elevated[static_cast<std::size_t>(i)] - static_cast<float>(rem0[static_cast<std::size_t>(i)])) * down;
                bary[static_cast<std::size_t>(d - rank[static_cast<std::size_t>(i)])] += v;
                bary[static_cast<std::size_t>(d + 1 - rank[static_cast<std::size_t>(i)])] -= v;
            }
            bary[0] += 1.f + bary[static_cast<std::size_t>(d + 1)];

            for (int r = 0; r <= d; ++r) {
                Key key{};
                for (int i = 0; i < d; ++i) {
                    key[static_cast<std::size_t>(i)] =
                        rem0[static_cast<std::size_t>(i)] + canonical[static_cast<std::size_t>(r * d1 + rank[static_cast<std::size_t>(i)])];
                }
                const std::size_t k = static_cast<std::size_t>(p) * d1 + r;
                offset_[k] = find_or_insert(key, true);
                barycentric_[k] = bary[static_cast<std::size_t>(r)];
            }
        }

        m_ = static_cast<int>(keys_.size());
        neighbours_.assign(static_cast<std::size_t>(d1) * m_, {-1, -1});
        for (int j = 0; j <= d; ++j) {
            for (int i = 0; i < m_; ++i) {
                const Key& key = keys_[static_cast<std::size_t>(i)];
                Key n1{}, n2{};
                for (int k = 0; k < d; ++k) {
                    n1[static_cast<std::size_t>(k)] = key[static_cast<std::size_t>(k)] - 1;
                    n2[static_cast<std::size_t>(k)] = key[static_cast<std::size_t>(k)] + 1;
                }
                if (j < d) {
                    n1[static_cast<std::size_t>(j)] = key[static_cast<std::size_t>(j)] + d;
                    n2[static_cast<std::size_t>(j)] = key[static_cast<std::size_t>(j)] - d;
                }
                auto& nb = neighbours_[static_cast<std::size_t>(j) * m_ + i];
                nb[0] = find_or_insert(n1, false);
                nb[1] = find_or_insert(n2, false);
            }
        }
        index_.clear();
        keys_.clear();
    }

    int d_ = 0;
    int n_ = 0;
    int m_ = 0;
    std::vector<int> offset_;
    std::vector<float> barycentric_;
    std::vector<std::array<int, 2>> neighbours_;
    std::vector<Key> keys_;
    std::unordered_map<Key, int, KeyHash> index_;
};

}  // namespace rustseg
