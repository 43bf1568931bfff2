// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures and brute-force reference implementations for the tests.
// The references work on plain nested vectors and never call library algebra.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mergeforge/weightspace.hpp"

namespace mftest {

using Layers = std::vector<std::vector<double>>;

struct RandomLayout {
    std::vector<std::vector<std::size_t>> shapes;
};

inline RandomLayout random_layout(std::mt19937_64& rng, std::size_t max_layers = 4, std::size_t max_entries = 32) {
    std::uniform_int_distribution<std::size_t> nl(1, max_layers);
    std::uniform_int_distribution<std::size_t> dim(1, 6);
    RandomLayout out;
    const auto layers = nl(rng);
    for (std::size_t l = 0; l < layers; ++l) {
        std::vector<std::size_t> shape{dim(rng)};
        if (rng() % 2 == 0) {
            shape.push_back(dim(rng));
        }
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        while (n > max_entries) {
            shape.back() = std::max<std::size_t>(1, shape.back() / 2);
            n = 1;
            for (auto d : shape) n *= d;
        }
        out.shapes.push_back(shape);
    }
    return out;
}

template <class Tag = mergeforge::DeltaTag>
mergeforge::TensorMap<Tag> random_map(std::mt19937_64& rng, const RandomLayout& layout, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    mergeforge::TensorMap<Tag> out;
    for (std::size_t l = 0; l < layout.shapes.size(); ++l) {
        std::size_t n = 1;
        for (auto d : layout.shapes[l]) n *= d;
        std::vector<float> v(n);
        for (auto& x : v) x = static_cast<float>(nd(rng));
        out.insert("layer" + std::to_string(l), mergeforge::LayerTensor(layout.shapes[l], std::move(v)));
    }
    return out;
}

template <class Tag>
Layers to_layers(const mergeforge::TensorMap<Tag>& m) {
    Layers out;
    for (const auto& e : m) {
        out.emplace_back(e.tensor.values().begin(), e.tensor.values().end());
    }
    return out;
}

inline double max_abs_diff(const Layers& a, const Layers& b) {
    double worst = 0.0;
    for (std::size_t l = 0; l < a.size(); ++l) {
        for (std::size_t i = 0; i < a[l].size(); ++i) {
            worst = std::max(worst, std::abs(a[l][i] - b[l][i]));
        }
    }
    return worst;
}

inline Layers ref_simple_average(const std::vector<Layers>& ds) {
    Layers out = ds[0];
    for (std::size_t l = 0; l < out.size(); ++l) {
        for (std::size_t i = 0; i < out[l].size(); ++i) {
            double s = 0.0;
            for (const auto& d : ds) s += d[l][i];
            out[l][i] = s / static_cast<double>(ds.size());
        }
    }
    return out;
}

inline Layers ref_task_arithmetic(const std::vector<Layers>& ds, double k) {
    Layers out = ds[0];
    for (std::size_t l = 0; l < out.size(); ++l) {
        for (std::size_t i = 0; i < out[l].size(); ++i) {
            double s = 0.0;
            for (const auto& d : ds) s += d[l][i];
            out[l][i] = k * s;
        }
    }
    return out;
}

// Trim keeps the ceil(keep * len) largest magnitudes of each delta across all
// layers, earlier flat positions winning ties; elect takes the sign of the
// sum of trimmed values (zero counts as positive); the disjoint mean averages
// the nonzero trimmed values agreeing with the elected sign.
inline Layers ref_ties(const std::vector<Layers>& ds, double keep, double alpha) {
    const std::size_t n_models = ds.size();
    std::vector<std::vector<double>> flat(n_models);
    for (std::size_t m = 0; m < n_models; ++m) {
        for (const auto& layer : ds[m]) flat[m].insert(flat[m].end(), layer.begin(), layer.end());
    }
    const std::size_t len = flat[0].size();
    const auto k = static_cast<std::size_t>(std::ceil(keep * static_cast<double>(len)));
    std::vector<std::vector<double>> trimmed(n_models, std::vector<double>(len, 0.0));
    for (std::size_t m = 0; m < n_models; ++m) {
        std::vector<std::size_t> order(len);
        for (std::size_t i = 0; i < len; ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return std::abs(flat[m][a]) > std::abs(flat[m][b]); });
        for (std::size_t j = 0; j < std::min(k, len); ++j) trimmed[m][order[j]] = flat[m][order[j]];
    }
    std::vector<double> merged(len, 0.0);
    for (std::size_t i = 0; i < len; ++i) {
        double sum = 0.0;
        for (std::size_t m = 0; m < n_models; ++m) sum += trimmed[m][i];
        const double sign = sum >= 0.0 ? 1.0 : -1.0;
        double acc = 0.0;
        int count = 0;
        for (std::size_t m = 0; m < n_models; ++m) {
            const double v = trimmed[m][i];
            if (v != 0.0 && (v > 0.0) == (sign > 0.0)) {
                acc += v;
                ++count;
            }
        }
        merged[i] = count == 0 ? 0.0 : alpha * acc / count;
    }
    Layers out = ds[0];
    std::size_t pos = 0;
    for (auto& layer : out) {
        for (auto& x : layer) x = merged[pos++];
    }
    return out;
}

}  // namespace mftest
