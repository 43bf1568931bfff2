// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0

#include "mergeforge/checkpoint.hpp"

#include <array>
#include <charconv>
#include <fstream>
#include <ostream>

#include <json.hpp>

namespace mergeforge {

namespace {

template <class T>
std::string shortest(T v) {
    std::array<char, 64> buf{};
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    if (ec != std::errc{}) {
        throw FormatError("float formatting failed");
    }
    return std::string(buf.data(), ptr);
}

std::string quoted(const std::string& s) { return nlohmann::json(s).dump(); }

}  // namespace

std::string format_float(float v) { return shortest(v); }

std::string format_double(double v) { return shortest(v); }

float parse_float(std::string_view text) {
    float v = 0.0f;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
        throw FormatError("malformed number '" + std::string(text) + "'");
    }
    return v;
}

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
    os << "{\"format\":" << quoted(kCheckpointFormat) << ",\"layers\":[";
    bool first_layer = true;
    for (const auto& e : ckpt.layers) {
        os << (first_layer ? "" : ",") << "\n{\"name\":" << quoted(e.name) << ",\"shape\":[";
        first_layer = false;
        const auto& shape = e.tensor.shape();
        for (std::size_t i = 0; i < shape.size(); ++i) {
            os << (i ? "," : "") << shape[i];
        }
        os << "],\"values\":[";
        auto values = e.tensor.values();
        for (std::size_t i = 0; i < values.size(); ++i) {
            os << (i ? "," : "") << format_float(values[i]);
        }
        os << "]}";
    }
    os << "]";
    if (ckpt.lora) {
        os << ",\n\"lora\":{\"rank\":" << ckpt.lora->rank << ",\"alpha\":" << format_double(ckpt.lora->alpha)
           << ",\"targets\":[";
        for (std::size_t i = 0; i < ckpt.lora->targets.size(); ++i) {
            os << (i ? "," : "") << quoted(ckpt.lora->targets[i]);
        }
        os << "]}";
    }
    os << "}\n";
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw FormatError("cannot open '" + path.string() + "' for writing");
    }
    write_checkpoint(os, ckpt);
    if (!os) {
        throw FormatError("failed writing '" + path.string() + "'");
    }
}

Checkpoint read_checkpoint(std::istream& is) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint is not valid JSON: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("format") || !doc["format"].is_string()) {
        throw FormatError("checkpoint lacks a \"format\" string");
    }
    if (doc["format"].get<std::string>() != kCheckpointFormat) {
        throw FormatError("unknown checkpoint format '" + doc["format"].get<std::string>() + "'");
    }
    if (!doc.contains("layers") || !doc["layers"].is_array()) {
        throw FormatError("checkpoint lacks a \"layers\" array");
    }
    Checkpoint ckpt;
    try {
        for (const auto& layer : doc["layers"]) {
            auto shape = layer.at("shape").get<std::vector<std::size_t>>();
            const auto& raw = layer.at("values");
            if (!raw.is_array()) {
                throw FormatError("layer values must be an array");
            }
            std::vector<float> values;
            values.reserve(raw.size());
            for (const auto& v : raw) {
                if (!v.is_number()) {
                    throw FormatError("layer values must be numbers");
                }
                values.push_back(static_cast<float>(v.get<double>()));
            }
            ckpt.layers.insert(layer.at("name").get<std::string>(), LayerTensor(std::move(shape), std::move(values)));
        }
        if (doc.contains("lora")) {
            const auto& meta = doc["lora"];
            ckpt.lora = LoraMetadata{meta.at("rank").get<int>(), meta.at("alpha").get<double>(),
                                     meta.at("targets").get<std::vector<std::string>>()};
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed checkpoint: ") + e.what());
    } catch (const FormatError&) {
        throw;
    } catch (const Error& e) {
        throw FormatError(std::string("invalid tensor in checkpoint: ") + e.what());
    }
    return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw FormatError("cannot open '" + path.string() + "'");
    }
    return read_checkpoint(is);
}

}  // namespace mergeforge
