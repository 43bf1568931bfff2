// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0
//
// Construction of the attacker's uploaded model:
//
//   upload = lambda * (theta_malicious - theta_benign) + theta_benign
//
// where theta_malicious and theta_benign are LoRA fine-tunes of the
// pre-trained model on poisoned and clean data respectively.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mergeforge/nnet.hpp"
#include "mergeforge/tasks.hpp"
#include "mergeforge/weightspace.hpp"

namespace mergeforge::attack {

enum class SearchMode {
    /// Bisection driven by ||upload||_2 against the previous iterate.
    algorithm2,
    /// Bisection on lambda until ||upload - theta_pre||_2 matches a reference.
    target_norm,
};

struct LambdaSearchConfig {
    double lambda_min = 4.0;
    double lambda_max = 10.0;
    double epsilon = 0.01;
    SearchMode mode = SearchMode::algorithm2;
    std::optional<double> target_norm_reference;

    void validate() const;
};

struct LambdaSearchResult {
    double lambda = 0.0;
    int iterations = 0;
    /// Lambda values at which the upload norm was evaluated, in order.
    std::vector<double> evaluated;
};

enum class StrategyKind { direct, naive_scale, lobam_fixed, lobam_search };

std::string to_string(StrategyKind k);
StrategyKind parse_strategy(std::string_view name);
std::string to_string(SearchMode m);
SearchMode parse_search_mode(std::string_view name);

struct UploadStrategy {
    StrategyKind kind = StrategyKind::lobam_search;
    double lambda = 1.0;
    LambdaSearchConfig search;

    void validate() const;
};

ParamSet construct_upload(const ParamSet& theta_m, const ParamSet& theta_b, double lambda);
ParamSet naive_scale(const ParamSet& theta_m, double lambda);

/// The search loop of algorithm2 mode over an arbitrary Dist(lambda).
LambdaSearchResult algorithm2_search(const std::function<double(double)>& dist, double lambda_min,
                                     double lambda_max, double epsilon);

/// Both modes; target_norm needs theta_pre and cfg.target_norm_reference.
LambdaSearchResult binary_search_lambda(const ParamSet& theta_m, const ParamSet& theta_b,
                                        const LambdaSearchConfig& cfg, const ParamSet* theta_pre = nullptr);

struct PipelineInputs {
    nnet::MlpSpec spec;
    /// Pre-trained body plus the adversary task's head ("head.weight"/"head.bias").
    ParamSet theta_pre;
    /// The adversary's clean training set.
    tasks::Dataset clean;
    tasks::AttackScenario scenario;
    tasks::TriggerSpec trigger;
    double poison_rate = 0.15;
    std::uint64_t poison_seed = 0;
    /// Off-task only: inputs of the few-shot target-class samples.
    std::vector<std::vector<float>> few_shot_inputs;
    double prototype_weight = 1.0;
    nnet::LoraConfig lora;
    std::uint64_t lora_seed = 0;
    nnet::TrainConfig train;
    UploadStrategy strategy;
};

struct AttackOutcome {
    tasks::Dataset poisoned;
    std::vector<std::size_t> poisoned_rows;
    nnet::LoraAdapters malicious_adapters;
    nnet::LoraAdapters benign_adapters;
    ParamSet theta_malicious;
    ParamSet theta_benign;
    ParamSet upload;
    /// 1 for direct uploads.
    double lambda_used = 1.0;
    int search_iterations = 0;
};

AttackOutcome run_attack_pipeline(const PipelineInputs& in);

/// Applies a strategy to already-trained malicious/benign models.
ParamSet build_upload(const ParamSet& theta_m, const ParamSet& theta_b, const ParamSet& theta_pre,
                      const UploadStrategy& strategy, double* lambda_used = nullptr, int* iterations = nullptr);

}  // namespace mergeforge::attack
