// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <bit>
#include <cstring>
#include <limits>
#include <random>
#include <sstream>

#include "mergeforge/checkpoint.hpp"
#include "support/helpers.hpp"

using namespace mergeforge;

TEST_CASE("float formatting round-trips bit-exactly", "[checkpoint][property]") {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<std::uint32_t> bits;
    int checked = 0;
    while (checked < 20000) {
        const auto f = std::bit_cast<float>(bits(rng));
        if (!std::isfinite(f)) continue;
        const auto back = parse_float(format_float(f));
        CHECK(std::bit_cast<std::uint32_t>(back) == std::bit_cast<std::uint32_t>(f));
        ++checked;
    }
    for (float f : {0.0f, -0.0f, std::numeric_limits<float>::denorm_min(), std::numeric_limits<float>::max(),
                    -std::numeric_limits<float>::lowest()}) {
        CHECK(std::bit_cast<std::uint32_t>(parse_float(format_float(f))) == std::bit_cast<std::uint32_t>(f));
    }
    CHECK_THROWS_AS(parse_float("1.5x"), FormatError);
    CHECK_THROWS_AS(parse_float(""), FormatError);
}

TEST_CASE("checkpoints round-trip layers and LoRA metadata", "[checkpoint]") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const auto layout = mftest::random_layout(rng);
        Checkpoint ck{mftest::random_map<ParamTag>(rng, layout, 10.0), std::nullopt};
        if (trial % 2 == 0) {
            ck.lora = LoraMetadata{4, 2.5, {"body.0.weight", "body.1.weight"}};
        }
        std::stringstream ss;
        write_checkpoint(ss, ck);
        const auto back = read_checkpoint(ss);
        CHECK(bit_identical(back.layers, ck.layers));
        CHECK(back.layers.names() == ck.layers.names());
        CHECK(back.lora == ck.lora);
    }
}

TEST_CASE("checkpoint writing is deterministic", "[checkpoint]") {
    std::mt19937_64 rng(3);
    const auto layout = mftest::random_layout(rng);
    const Checkpoint ck{mftest::random_map<ParamTag>(rng, layout), std::nullopt};
    std::stringstream a;
    std::stringstream b;
    write_checkpoint(a, ck);
    write_checkpoint(b, ck);
    CHECK(a.str() == b.str());
}

TEST_CASE("malformed checkpoints are rejected", "[checkpoint]") {
    auto read = [](const std::string& text) {
        std::istringstream is(text);
        return read_checkpoint(is);
    };
    CHECK_THROWS_AS(read("not json"), FormatError);
    CHECK_THROWS_AS(read(R"({"layers":[]})"), FormatError);
    CHECK_THROWS_AS(read(R"({"format":"other-v9","layers":[]})"), FormatError);
    CHECK_THROWS_WITH(read(R"({"format":"mergeforge-ckpt-v1","layers":[{"name":"w","shape":[2],"values":[1]}]})"),
                      Catch::Matchers::ContainsSubstring("shape implies 2"));
    CHECK_THROWS_AS(read(R"({"format":"mergeforge-ckpt-v1","layers":[{"name":"w","shape":[2],"values":[1]}]})"),
                    FormatError);
    CHECK_THROWS_AS(read(R"({"format":"mergeforge-ckpt-v1","layers":[{"name":"w","shape":[1],"values":["a"]}]})"),
                    FormatError);
    CHECK_NOTHROW(read(R"({"format":"mergeforge-ckpt-v1","layers":[{"name":"w","shape":[1],"values":[0.5]}]})"));
}
