// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0
//
// JSON checkpoint format "mergeforge-ckpt-v1":
//
//   {"format":"mergeforge-ckpt-v1",
//    "layers":[{"name":str,"shape":[ints],"values":[floats]}, ...],
//    "lora":{"rank":r,"alpha":a,"targets":[...]}}        (adapters only)
//
// Values are written in row-major order using the shortest decimal that
// round-trips the stored float.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mergeforge/weightspace.hpp"

namespace mergeforge {

inline constexpr const char* kCheckpointFormat = "mergeforge-ckpt-v1";

struct LoraMetadata {
    int rank = 0;
    double alpha = 0.0;
    std::vector<std::string> targets;

    bool operator==(const LoraMetadata&) const = default;
};

struct Checkpoint {
    ParamSet layers;
    std::optional<LoraMetadata> lora;
};

/// Shortest round-trip decimal for a float / double.
std::string format_float(float v);
std::string format_double(double v);
/// Exact inverse of format_float; throws FormatError on malformed input.
float parse_float(std::string_view text);

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Throws FormatError on malformed documents or an unknown "format" tag.
Checkpoint read_checkpoint(std::istream& is);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mergeforge
