// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0

#include "mergeforge/weightspace.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>

namespace mergeforge {

LayerTensor::LayerTensor(std::vector<std::size_t> shape, std::vector<float> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
    std::size_t expected = 1;
    for (auto d : shape_) {
        if (d == 0) {
            throw InvalidArgument("tensor dimensions must be positive");
        }
        expected *= d;
    }
    if (shape_.empty() || expected != values_.size()) {
        throw LengthMismatch("tensor has " + std::to_string(values_.size()) +
                             " values but shape implies " + std::to_string(expected));
    }
    for (float v : values_) {
        if (!std::isfinite(v)) {
            throw NonFiniteValue("tensor contains a NaN or infinite value");
        }
    }
}

LayerTensor LayerTensor::zeros(std::vector<std::size_t> shape) {
    std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    return LayerTensor(std::move(shape), std::vector<float>(n, 0.0f));
}

bool bit_identical(const LayerTensor& a, const LayerTensor& b) {
    if (!a.same_shape(b)) {
        return false;
    }
    auto va = a.values();
    auto vb = b.values();
    for (std::size_t i = 0; i < va.size(); ++i) {
        if (std::bit_cast<std::uint32_t>(va[i]) != std::bit_cast<std::uint32_t>(vb[i])) {
            return false;
        }
    }
    return true;
}

namespace {

template <class A, class B>
void require_compatible(const TensorMap<A>& a, const TensorMap<B>& b) {
    if (!compatible(a, b)) {
        throw IncompatibleShapes("parameter collections differ in layer names or shapes");
    }
}

// Element-wise binary map evaluated in double, output ordered like `a`.
template <class Out, class A, class B, class F>
TensorMap<Out> zip(const TensorMap<A>& a, const TensorMap<B>& b, F f) {
    require_compatible(a, b);
    TensorMap<Out> out;
    for (const auto& e : a) {
        auto va = e.tensor.values();
        auto vb = b.at(e.name).values();
        std::vector<float> v(va.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] = static_cast<float>(f(static_cast<double>(va[i]), static_cast<double>(vb[i])));
        }
        out.insert(e.name, LayerTensor(e.tensor.shape(), std::move(v)));
    }
    return out;
}

template <class Tag>
TensorMap<Tag> scaled(const TensorMap<Tag>& m, double c) {
    if (!std::isfinite(c)) {
        throw NonFiniteValue("scale factor must be finite");
    }
    TensorMap<Tag> out;
    for (const auto& e : m) {
        auto src = e.tensor.values();
        std::vector<float> v(src.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] = static_cast<float>(c * static_cast<double>(src[i]));
        }
        out.insert(e.name, LayerTensor(e.tensor.shape(), std::move(v)));
    }
    return out;
}

template <class Tag>
double norm_of(const TensorMap<Tag>& m) {
    double acc = 0.0;
    for (const auto& e : m) {
        for (float v : e.tensor.values()) {
            acc += static_cast<double>(v) * static_cast<double>(v);
        }
    }
    return std::sqrt(acc);
}

}  // namespace

Delta delta(const ParamSet& model, const ParamSet& base) {
    return zip<DeltaTag>(model, base, [](double m, double b) { return m - b; });
}

ParamSet apply(const ParamSet& base, const Delta& d) {
    return zip<ParamTag>(base, d, [](double b, double x) { return b + x; });
}

Delta scale(const Delta& d, double c) { return scaled(d, c); }

ParamSet scale(const ParamSet& p, double c) { return scaled(p, c); }

Delta add(const Delta& a, const Delta& b) {
    return zip<DeltaTag>(a, b, [](double x, double y) { return x + y; });
}

Delta linear_combine(std::span<const Delta> ds, std::span<const double> cs) {
    if (ds.size() != cs.size()) {
        throw LengthMismatch("linear_combine needs one coefficient per delta");
    }
    if (ds.empty()) {
        throw EmptyList("linear_combine over an empty list");
    }
    for (double c : cs) {
        if (!std::isfinite(c)) {
            throw NonFiniteValue("coefficients must be finite");
        }
    }
    for (std::size_t k = 1; k < ds.size(); ++k) {
        require_compatible(ds[0], ds[k]);
    }
    Delta out;
    for (const auto& e : ds[0]) {
        std::vector<double> acc(e.tensor.size(), 0.0);
        for (std::size_t k = 0; k < ds.size(); ++k) {
            auto v = ds[k].at(e.name).values();
            for (std::size_t i = 0; i < acc.size(); ++i) {
                acc[i] += cs[k] * static_cast<double>(v[i]);
            }
        }
        std::vector<float> v(acc.begin(), acc.end());
        out.insert(e.name, LayerTensor(e.tensor.shape(), std::move(v)));
    }
    return out;
}

double l2_norm(const Delta& d) { return norm_of(d); }

double l2_norm(const ParamSet& p) { return norm_of(p); }

double l2_distance(const ParamSet& a, const ParamSet& b) {
    require_compatible(a, b);
    double acc = 0.0;
    for (const auto& e : a) {
        auto va = e.tensor.values();
        auto vb = b.at(e.name).values();
        for (std::size_t i = 0; i < va.size(); ++i) {
            double diff = static_cast<double>(va[i]) - static_cast<double>(vb[i]);
            acc += diff * diff;
        }
    }
    return std::sqrt(acc);
}

}  // namespace mergeforge
