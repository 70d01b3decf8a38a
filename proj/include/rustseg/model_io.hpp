#pragma once

// RSEG model files:
//   "RSEG" | u32 LE version | u32 LE header length | UTF-8 JSON header | payload
// The header lists the network config and, for every tensor, its name, shape
// and byte offset into the payload. Payload tensors are little-endian float32,
// concatenated in header order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "image.hpp"
#include "network.hpp"

namespace rustseg {

inline constexpr std::uint32_t kModelFormatVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + static_cast<std::size_t>(i)]) << (8 * i);
    return v;
}

inline void put_f32(std::vector<std::uint8_t>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

struct TensorView {
    std::string name;
    std::vector<std::size_t> shape;
    std::span<float> data;
};

inline std::vector<TensorView> tensor_views(ModelWeights<float>& m) {
    std::vector<TensorView> v;
    for (std::size_t l = 0; l < m.conv.size(); ++l) {
        auto& c = m.conv[l];
        const std::string p = "conv" + std::to_string(l);
        v.push_back({p + ".kernel", {3, 3, std::size_t(c.in_channels), std::size_t(c.out_channels)}, c.kernel});
        v.push_back({p + ".bias", {std::size_t(c.out_channels)}, c.bias});
    }
    v.push_back({"dense.weights", {m.dense.weights.size()}, m.dense.weights});
    v.push_back({"dense.bias", {1}, std::span<float>(&m.dense.bias, 1)});
    return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_model(const ModelWeights<float>& model) {
    model.validate();
    auto copy = model;
    auto views = detail::tensor_views(copy);
    nlohmann::json header;
    header["config"] = {{"sections", model.config.sections},
                        {"base_channels", model.config.base_channels},
                        {"input_side", model.config.input_side}};
    std::size_t offset = 0;
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : views) {
        tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
        offset += t.data.size() * 4;
    }
    header["tensors"] = std::move(tensors);
    const std::string text = header.dump();

    std::vector<std::uint8_t> out{'R', 'S', 'E', 'G'};
    detail::put_u32(out, kModelFormatVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    out.reserve(out.size() + offset);
    for (const auto& t : views) {
        for (float f : t.data) detail::put_f32(out, f);
    }
    return out;
}

inline ModelWeights<float> decode_model(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RSEG", 4) != 0) throw ParseError("bad model magic", 0);
    const std::uint32_t version = detail::get_u32(bytes, 4);
    if (version != kModelFormatVersion) {
        throw ParseError("unsupported model format version " + std::to_string(version), 4);
    }
    const std::size_t header_len = detail::get_u32(bytes, 8);
    if (bytes.size() - 12 < header_len) throw ParseError("truncated model header", bytes.size());
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<long>(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model header is not valid JSON: ") + e.what(), 12);
    }
    const auto payload = bytes.subspan(12 + header_len);

    ModelWeights<float> m;
    try {
        NetworkConfig cfg;
        cfg.sections = header.at("config").at("sections").get<int>();
        cfg.base_channels = header.at("config").at("base_channels").get<int>();
        cfg.input_side = header.at("config").at("input_side").get<int>();
        m = ModelWeights<float>::zeros(cfg);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model header is missing fields: ") + e.what(), 12);
    }

    const auto& listed = header.at("tensors");
    auto views = detail::tensor_views(m);
    if (!listed.is_array() || listed.size() != views.size()) {
        throw ParseError("model header lists " + std::to_string(listed.is_array() ? listed.size() : 0) +
                             " tensors, expected " + std::to_string(views.size()),
                         12);
    }
    std::size_t expected_end = 0;
    for (std::size_t k = 0; k < views.size(); ++k) {
        const auto& t = views[k];
        const auto& entry = listed[k];
        const auto name = entry.value("name", std::string{});
        if (name != t.name) throw ParseError("tensor " + std::to_string(k) + " is '" + name + "', expected '" + t.name + "'", 12);
        const auto shape = entry.value("shape", std::vector<std::size_t>{});
        if (shape != t.shape) throw ParseError("tensor '" + t.name + "' shape does not match the config", 12);
        const auto offset = entry.value("offset", std::size_t{0});
        const std::size_t nbytes = t.data.size() * 4;
        if (offset + nbytes > payload.size()) {
            throw ParseError("tensor '" + t.name + "' truncated: expected " + std::to_string(offset + nbytes) +
                                 " payload bytes, found " + std::to_string(payload.size()),
                             bytes.size());
        }
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            (t.data)[i] = std::bit_cast<float>(detail::get_u32(payload, offset + 4 * i));
        }
        expected_end = std::max(expected_end, offset + nbytes);
    }
    if (payload.size() != expected_end) {
        throw ParseError("model payload has " + std::to_string(payload.size()) + " bytes, expected " +
                             std::to_string(expected_end),
                         12 + header_len + expected_end);
    }
    return m;
}

inline void save_model(const std::filesystem::path& path, const ModelWeights<float>& model) {
    detail::write_file(path, encode_model(model));
}

inline ModelWeights<float> load_model(const std::filesystem::path& path) {
    try {
        return decode_model(detail::read_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what(), e.offset());
    }
}

}  // namespace rustseg
