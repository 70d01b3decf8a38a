#pragma once

// 8-bit rasters, binary PNM I/O (P6 colour, P5 grayscale, maxval 255),
// bilinear resizing and mask overlay.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace rustseg {

namespace detail {

template <int Channels>
class Raster {
public:
    static constexpr int channels = Channels;

    Raster() = default;
    Raster(int height, int width, std::uint8_t fill = 0) : height_(height), width_(width) {
        if (height < 0 || width < 0) throw DimensionError("negative raster dimensions");
        pixels_.assign(static_cast<std::size_t>(height) * width * Channels, fill);
    }
    Raster(int height, int width, std::vector<std::uint8_t> pixels) : height_(height), width_(width) {
        if (pixels.size() != static_cast<std::size_t>(height) * width * Channels) {
            throw DimensionError("raster buffer length " + std::to_string(pixels.size()) + " does not match " +
                                 std::to_string(height) + "x" + std::to_string(width) + "x" +
                                 std::to_string(Channels));
        }
        pixels_ = std::move(pixels);
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(height_) * width_; }
    bool empty() const noexcept { return pixels_.empty(); }

    std::uint8_t& at(int y, int x, int c = 0) noexcept { return pixels_[index(y, x) + c]; }
    std::uint8_t at(int y, int x, int c = 0) const noexcept { return pixels_[index(y, x) + c]; }

    std::span<std::uint8_t> pixels() noexcept { return pixels_; }
    std::span<const std::uint8_t> pixels() const noexcept { return pixels_; }

    bool same_size(int h, int w) const noexcept { return height_ == h && width_ == w; }

    bool operator==(const Raster&) const = default;

private:
    std::size_t index(int y, int x) const noexcept {
        return (static_cast<std::size_t>(y) * width_ + x) * Channels;
    }

    int height_ = 0;
    int width_ = 0;
    std::vector<std::uint8_t> pixels_;
};

}  // namespace detail

using RgbImage = detail::Raster<3>;
/// Graded 8-bit mask: 0 background, 255 strongest corrosion. Also used for
/// any grayscale raster.
using MaskU8 = detail::Raster<1>;

inline std::uint8_t round_half_up_u8(double v) {
    return static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
}

inline std::size_t count_nonzero(const MaskU8& m) {
    return static_cast<std::size_t>(std::count_if(m.pixels().begin(), m.pixels().end(), [](auto v) { return v != 0; }));
}

// --- PNM --------------------------------------------------------------------

namespace detail {

class PnmReader {
public:
    explicit PnmReader(std::span<const std::uint8_t> bytes) : b_(bytes) {}

    void expect_magic(char kind) {
        if (b_.size() < 2 || b_[0] != 'P' || (b_[1] != '5' && b_[1] != '6')) {
            throw ParseError("not a binary PNM file (bad magic)", 0);
        }
        if (b_[1] != static_cast<std::uint8_t>(kind)) {
            throw ParseError(std::string("expected P") + kind + " but file is P" + static_cast<char>(b_[1]), 1);
        }
        pos_ = 2;
    }

    int read_uint() {
        skip_space_and_comments();
        const std::size_t start = pos_;
        long v = 0;
        while (pos_ < b_.size() && b_[pos_] >= '0' && b_[pos_] <= '9') {
            v = v * 10 + (b_[pos_] - '0');
            if (v > 1'000'000'000L) throw ParseError("header integer too large", start);
            ++pos_;
        }
        if (pos_ == start) throw ParseError("expected an unsigned integer in header", start);
        return static_cast<int>(v);
    }

    /// Exactly one whitespace byte separates maxval from the payload.
    void end_header() {
        if (pos_ >= b_.size() || !is_space(b_[pos_])) throw ParseError("expected whitespace after maxval", pos_);
        ++pos_;
    }

    std::span<const std::uint8_t> payload(std::size_t n) {
        if (b_.size() - pos_ < n) {
            throw ParseError("truncated payload: expected " + std::to_string(n) + " bytes, found " +
                                 std::to_string(b_.size() - pos_),
                             b_.size());
        }
        return b_.subspan(pos_, n);
    }

    std::size_t pos() const { return pos_; }

private:
    static bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

    void skip_space_and_comments() {
        while (pos_ < b_.size()) {
            if (is_space(b_[pos_])) {
                ++pos_;
            } else if (b_[pos_] == '#') {
                while (pos_ < b_.size() && b_[pos_] != '\n' && b_[pos_] != '\r') ++pos_;
            } else {
                break;
            }
        }
    }

    std::span<const std::uint8_t> b_;
    std::size_t pos_ = 0;
};

template <int Channels>
Raster<Channels> decode_pnm(std::span<const std::uint8_t> bytes) {
    PnmReader r(bytes);
    r.expect_magic(Channels == 3 ? '6' : '5');
    const int w = r.read_uint();
    const int h = r.read_uint();
    const std::size_t maxval_at = r.pos();
    const int maxval = r.read_uint();
    if (maxval != 255) throw ParseError("maxval must be 255, got " + std::to_string(maxval), maxval_at);
    r.end_header();
    const auto n = static_cast<std::size_t>(w) * h * Channels;
    auto data = r.payload(n);
    return Raster<Channels>(h, w, std::vector<std::uint8_t>(data.begin(), data.end()));
}

template <int Channels>
std::vector<std::uint8_t> encode_pnm(const Raster<Channels>& img) {
    const std::string header = std::string(Channels == 3 ? "P6" : "P5") + "\n" + std::to_string(img.width()) + " " +
                               std::to_string(img.height()) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.pixels().begin(), img.pixels().end());
    return out;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace detail

inline RgbImage decode_ppm(std::span<const std::uint8_t> bytes) { return detail::decode_pnm<3>(bytes); }
inline MaskU8 decode_pgm(std::span<const std::uint8_t> bytes) { return detail::decode_pnm<1>(bytes); }
inline std::vector<std::uint8_t> encode_ppm(const RgbImage& img) { return detail::encode_pnm(img); }
inline std::vector<std::uint8_t> encode_pgm(const MaskU8& img) { return detail::encode_pnm(img); }

inline RgbImage load_ppm(const std::filesystem::path& path) {
    try {
        return decode_ppm(detail::read_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what(), e.offset());
    }
}

inline MaskU8 load_pgm(const std::filesystem::path& path) {
    try {
        return decode_pgm(detail::read_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what(), e.offset());
    }
}

inline void save_ppm(const std::filesystem::path& path, const RgbImage& img) { detail::write_file(path, encode_ppm(img)); }
inline void save_pgm(const std::filesystem::path& path, const MaskU8& img) { detail::write_file(path, encode_pgm(img)); }

// --- resizing ---------------------------------------------------------------

namespace detail {

/// Corner-aligned source coordinate for destination index i.
inline double corner_aligned(int i, int src_n, int dst_n) {
    return dst_n > 1 ? static_cast<double>(i) * (src_n - 1) / (dst_n - 1) : 0.0;
}

template <int C>
Raster<C> resize_bilinear_raster(const Raster<C>& img, int out_h, int out_w) {
    if (img.empty()) throw DimensionError("resize_bilinear: empty image");
    if (out_h < 1 || out_w < 1) throw DimensionError("resize_bilinear: target size must be >= 1");
    if (img.same_size(out_h, out_w)) return img;
    Raster<C> out(out_h, out_w);
    for (int y = 0; y < out_h; ++y) {
        const double sy = corner_aligned(y, img.height(), out_h);
        const int y0 = std::min(static_cast<int>(sy), img.height() - 1);
        const int y1 = std::min(y0 + 1, img.height() - 1);
        const double fy = sy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double sx = corner_aligned(x, img.width(), out_w);
            const int x0 = std::min(static_cast<int>(sx), img.width() - 1);
            const int x1 = std::min(x0 + 1, img.width() - 1);
            const double fx = sx - x0;
            for (int c = 0; c < C; ++c) {
                const double v = (1 - fy) * ((1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c)) +
                                 fy * ((1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c));
                out.at(y, x, c) = round_half_up_u8(v);
            }
        }
    }
    return out;
}

}  // namespace detail

/// Non-aspect-preserving bilinear resize, corner-aligned, rounded half-up.
inline RgbImage resize_bilinear(const RgbImage& img, int out_h, int out_w) {
    return detail::resize_bilinear_raster(img, out_h, out_w);
}
inline RgbImage resize_bilinear(const RgbImage& img, int side) { return resize_bilinear(img, side, side); }

/// Nearest-neighbour resize for masks (keeps the value set unchanged).
inline MaskU8 resize_nearest(const MaskU8& m, int out_h, int out_w) {
    if (m.empty() || out_h < 1 || out_w < 1) throw DimensionError("resize_nearest: empty source or target");
    if (m.same_size(out_h, out_w)) return m;
    MaskU8 out(out_h, out_w);
    for (int y = 0; y < out_h; ++y) {
        const int sy = std::min(static_cast<int>((y + 0.5) * m.height() / out_h), m.height() - 1);
        for (int x = 0; x < out_w; ++x) {
            const int sx = std::min(static_cast<int>((x + 0.5) * m.width() / out_w), m.width() - 1);
            out.at(y, x) = m.at(sy, sx);
        }
    }
    return out;
}

// --- overlay ----------------------------------------------------------------

/// Red tint: out = (1 - a) * pixel + a * (255, 0, 0), a = 0.5 * mask / 255.
inline RgbImage overlay(const RgbImage& img, const MaskU8& mask) {
    if (!mask.same_size(img.height(), img.width())) {
        throw DimensionError("overlay: mask " + std::to_string(mask.height()) + "x" + std::to_string(mask.width()) +
                             " does not match image " + std::to_string(img.height()) + "x" +
                             std::to_string(img.width()));
    }
    RgbImage out = img;
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            const double a = 0.5 * mask.at(y, x) / 255.0;
            if (a == 0.0) continue;
            out.at(y, x, 0) = round_half_up_u8((1 - a) * img.at(y, x, 0) + a * 255.0);
            out.at(y, x, 1) = round_half_up_u8((1 - a) * img.at(y, x, 1));
            out.at(y, x, 2) = round_half_up_u8((1 - a) * img.at(y, x, 2));
        }
    }
    return out;
}

}  // namespace rustseg
