// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0
//
// Aggregators mapping N body deltas to one merged delta:
//   SA    (1/N) sum d_i
//   TA    k * sum d_i
//   Ties  alpha * disjoint-mean(elect(trim(d_i)))
//   AM    sum k_i d_i with k_i fitted by entropy minimisation

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mergeforge/nnet.hpp"
#include "mergeforge/tasks.hpp"
#include "mergeforge/weightspace.hpp"

namespace mergeforge::merging {

enum class Algorithm { SA, TA, Ties, AdaMerging };

std::string to_string(Algorithm a);
Algorithm parse_algorithm(std::string_view name);

struct MergeConfig {
    Algorithm algorithm = Algorithm::TA;
    double ta_k = 0.3;
    double ties_keep_fraction = 0.2;
    double ties_alpha = 0.3;
    double am_lr = 0.01;
    int am_steps = 200;
    double am_init_k = 0.3;
    /// Unlabeled samples per task drawn (seeded) for the entropy objective.
    std::size_t am_pool_size = 64;
    std::uint64_t seed = 0;

    void validate() const;
};

Delta simple_average(std::span<const Delta> deltas);
Delta task_arithmetic(std::span<const Delta> deltas, double k);
Delta ties_merge(std::span<const Delta> deltas, double keep_fraction, double alpha);

/// Heads and unlabeled pools, one per task, in matching order.
struct AdaMergingContext {
    nnet::MlpSpec spec;
    std::vector<ParamSet> heads;
    std::vector<tasks::Dataset> unlabeled;
};

struct AdaMergingResult {
    Delta merged;
    std::vector<double> coefficients;
    double initial_entropy = 0.0;
    double final_entropy = 0.0;
    int steps_taken = 0;
};

AdaMergingResult adamerging(std::span<const Delta> deltas, const ParamSet& base_body, const AdaMergingContext& ctx,
                            const MergeConfig& cfg);

/// Mean over tasks of the mean softmax entropy of body + head_t on pool_t.
double mean_entropy(const nnet::MlpSpec& spec, const ParamSet& body, std::span<const ParamSet> heads,
                    std::span<const tasks::Dataset> pools);

struct MergeOutcome {
    ParamSet merged;
    /// Learned k_i for AdaMerging; empty otherwise.
    std::vector<double> coefficients;
};

/// base + Agg(deltas). `ctx` is required for AdaMerging only.
MergeOutcome merge(const ParamSet& base, std::span<const Delta> deltas, const MergeConfig& cfg,
                   const AdaMergingContext* ctx = nullptr);

}  // namespace mergeforge::merging
