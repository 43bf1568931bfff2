// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0
//
// Named parameter collections and the exact algebra used by merging and
// attack construction. Storage is 32-bit float; every reduction and every
// element-wise combination is evaluated in 64-bit and rounded once.

#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mergeforge/errors.hpp"

namespace mergeforge {

/// A dense row-major float tensor. Construction rejects non-finite values and
/// a value count that disagrees with the shape.
class LayerTensor {
public:
    LayerTensor() = default;
    LayerTensor(std::vector<std::size_t> shape, std::vector<float> values);

    static LayerTensor zeros(std::vector<std::size_t> shape);

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::span<const float> values() const noexcept { return values_; }
    std::size_t size() const noexcept { return values_.size(); }

    bool same_shape(const LayerTensor& other) const noexcept { return shape_ == other.shape_; }

private:
    std::vector<std::size_t> shape_;
    std::vector<float> values_;
};

/// Bitwise equality of shape and values (distinguishes -0.0f from 0.0f).
bool bit_identical(const LayerTensor& a, const LayerTensor& b);

/// Insertion-ordered map of layer name to tensor. Tag distinguishes absolute
/// parameters from deltas at the type level.
template <class Tag>
class TensorMap {
public:
    struct Entry {
        std::string name;
        LayerTensor tensor;
    };

    void insert(std::string name, LayerTensor tensor) {
        if (index_.contains(name)) {
            throw InvalidArgument("duplicate layer name '" + name + "'");
        }
        index_.emplace(name, entries_.size());
        entries_.push_back(Entry{std::move(name), std::move(tensor)});
    }

    const LayerTensor* find(std::string_view name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &entries_[it->second].tensor;
    }

    const LayerTensor& at(std::string_view name) const {
        if (const auto* t = find(name)) {
            return *t;
        }
        throw InvalidArgument("no layer named '" + std::string(name) + "'");
    }

    bool contains(std::string_view name) const { return index_.find(name) != index_.end(); }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    auto begin() const noexcept { return entries_.begin(); }
    auto end() const noexcept { return entries_.end(); }

    std::size_t num_values() const noexcept {
        std::size_t n = 0;
        for (const auto& e : entries_) {
            n += e.tensor.size();
        }
        return n;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) {
            out.push_back(e.name);
        }
        return out;
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

struct ParamTag {};
struct DeltaTag {};

/// Absolute model weights (theta).
using ParamSet = TensorMap<ParamTag>;
/// Weight update relative to a base model (theta - theta_pre).
using Delta = TensorMap<DeltaTag>;

/// Same layer names (in any order) and identical per-name shapes.
template <class A, class B>
bool compatible(const TensorMap<A>& a, const TensorMap<B>& b) {
    if (a.size() != b.size()) {
        return false;
    }
    for (const auto& e : a) {
        const auto* other = b.find(e.name);
        if (other == nullptr || !other->same_shape(e.tensor)) {
            return false;
        }
    }
    return true;
}

template <class A, class B>
bool bit_identical(const TensorMap<A>& a, const TensorMap<B>& b) {
    if (a.size() != b.size()) {
        return false;
    }
    auto ia = a.begin();
    auto ib = b.begin();
    for (; ia != a.end(); ++ia, ++ib) {
        if (ia->name != ib->name || !bit_identical(ia->tensor, ib->tensor)) {
            return false;
        }
    }
    return true;
}

/// Reinterprets the same tensors under another tag.
template <class To, class From>
TensorMap<To> retag(const TensorMap<From>& src) {
    TensorMap<To> out;
    for (const auto& e : src) {
        out.insert(e.name, e.tensor);
    }
    return out;
}

template <class Tag>
TensorMap<Tag> zeros_like(const TensorMap<Tag>& like) {
    TensorMap<Tag> out;
    for (const auto& e : like) {
        out.insert(e.name, LayerTensor::zeros(e.tensor.shape()));
    }
    return out;
}

/// Layers whose names start with `prefix`, in original order.
template <class Tag>
TensorMap<Tag> select_prefix(const TensorMap<Tag>& src, std::string_view prefix) {
    TensorMap<Tag> out;
    for (const auto& e : src) {
        if (e.name.starts_with(prefix)) {
            out.insert(e.name, e.tensor);
        }
    }
    return out;
}

Delta delta(const ParamSet& model, const ParamSet& base);
ParamSet apply(const ParamSet& base, const Delta& d);

Delta scale(const Delta& d, double c);
ParamSet scale(const ParamSet& p, double c);
Delta add(const Delta& a, const Delta& b);
/// Sum of cs[i] * ds[i], accumulated in double per element.
Delta linear_combine(std::span<const Delta> ds, std::span<const double> cs);

double l2_norm(const Delta& d);
double l2_norm(const ParamSet& p);
double l2_distance(const ParamSet& a, const ParamSet& b);

/// Concatenation of all layer values in iteration order, widened to double.
template <class Tag>
std::vector<double> flatten(const TensorMap<Tag>& m) {
    std::vector<double> out;
    out.reserve(m.num_values());
    for (const auto& e : m) {
        out.insert(out.end(), e.tensor.values().begin(), e.tensor.values().end());
    }
    return out;
}

/// Inverse of flatten: rounds `flat` into tensors shaped like `like`.
template <class Tag, class LikeTag>
TensorMap<Tag> unflatten(std::span<const double> flat, const TensorMap<LikeTag>& like) {
    if (flat.size() != like.num_values()) {
        throw LengthMismatch("flat vector length does not match layer structure");
    }
    TensorMap<Tag> out;
    std::size_t offset = 0;
    for (const auto& e : like) {
        std::vector<float> v(e.tensor.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] = static_cast<float>(flat[offset + i]);
        }
        offset += v.size();
        out.insert(e.name, LayerTensor(e.tensor.shape(), std::move(v)));
    }
    return out;
}

}  // namespace mergeforge
