#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace rustseg {

/// Dense row-major (height, width, channels) grid, channel-fastest.
template <class T>
class Tensor3 {
public:
    Tensor3() = default;

    Tensor3(int height, int width, int channels, T fill = T(0))
        : height_(height), width_(width), channels_(channels) {
        if (height < 1 || width < 1 || channels < 1) {
            throw DimensionError("Tensor3 dimensions must be >= 1, got " + shape_string(height, width, channels));
        }
        data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
    }

    Tensor3(int height, int width, int channels, std::vector<T> data) : Tensor3(height, width, channels) {
        if (data.size() != data_.size()) {
            throw DimensionError("Tensor3 data length " + std::to_string(data.size()) + " does not match shape " +
                                 shape_string(height, width, channels));
        }
        data_ = std::move(data);
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    int channels() const noexcept { return channels_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(int y, int x, int c) noexcept { return data_[index(y, x, c)]; }
    const T& operator()(int y, int x, int c) const noexcept { return data_[index(y, x, c)]; }

    T* pixel(int y, int x) noexcept { return data_.data() + index(y, x, 0); }
    const T* pixel(int y, int x) const noexcept { return data_.data() + index(y, x, 0); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    bool same_shape(const Tensor3& o) const noexcept {
        return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
    }

    std::string shape() const { return shape_string(height_, width_, channels_); }

    template <class U>
    Tensor3<U> cast() const {
        Tensor3<U> out(height_, width_, channels_);
        std::transform(data_.begin(), data_.end(), out.data().begin(), [](T v) { return static_cast<U>(v); });
        return out;
    }

    bool operator==(const Tensor3&) const = default;

private:
    static std::string shape_string(int h, int w, int c) {
        return "(" + std::to_string(h) + ", " + std::to_string(w) + ", " + std::to_string(c) + ")";
    }

    std::size_t index(int y, int x, int c) const noexcept {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
    }

    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<T> data_;
};

template <class T>
void require_same_shape(const Tensor3<T>& a, const Tensor3<T>& b, const char* what) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(what) + ": shape mismatch " + a.shape() + " vs " + b.shape());
    }
}

}  // namespace rustseg
