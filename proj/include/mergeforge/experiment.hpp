// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0
//
// Config-driven experiment orchestration behind the command line tool.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergeforge/attack.hpp"
#include "mergeforge/eval.hpp"
#include "mergeforge/merging.hpp"
#include "mergeforge/nnet.hpp"
#include "mergeforge/tasks.hpp"

namespace mergeforge::experiment {

struct TaskEntry {
    std::string id;
    std::size_t num_classes = 4;
    std::size_t samples_per_class = 200;
    std::size_t test_samples_per_class = 100;
    double noise_std = 0.5;
    double mean_scale = 1.0;
};

struct PretrainConfig {
    std::size_t samples_per_class = 50;
    int epochs = 5;
    double learning_rate = 0.05;
    int batch_size = 32;
};

struct AttackEntry {
    tasks::ScenarioKind scenario = tasks::ScenarioKind::on_task;
    std::string target_task;  // empty: the attacker's own task
    int target_class = 0;
    std::size_t few_shot = 5;
    int lora_rank = 8;
    double lora_alpha = 0.0;
    double poison_rate = 0.15;
    tasks::TriggerSpec trigger;  // empty: default trigger
    double prototype_weight = 1.0;
    attack::UploadStrategy strategy;
    nnet::TrainConfig train;
};

enum class FineTuneMode { full, lora };

struct UserEntry {
    std::string task;
    FineTuneMode mode = FineTuneMode::full;
    int lora_rank = 8;
    std::optional<AttackEntry> attack;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    nnet::MlpSpec model;
    std::vector<TaskEntry> tasks;
    PretrainConfig pretrain;
    nnet::TrainConfig train;
    std::vector<UserEntry> users;
    std::vector<merging::MergeConfig> merges;
    double distance_threshold = 1.5;
    std::string output_dir = "mergeforge-out";

    void validate() const;
    std::size_t attacker_index() const;
    const TaskEntry& task(const std::string& id) const;
    const AttackEntry& attack() const { return *users[attacker_index()].attack; }
};

/// Throws ConfigError naming the offending field (and line, for syntax errors).
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg);
/// FNV-1a 64 of the canonical JSON rendering minus output_dir, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

/// Desk-scale default: 5 benign full fine-tunes plus one LoRA attacker.
ExperimentConfig default_config();
/// N = 4 variant (3 benign + attacker) with SA and TA merging.
ExperimentConfig toy_config(std::uint64_t seed);

/// Deterministic per-purpose seeds derived from the global seed.
struct Seeds {
    std::uint64_t global = 0;
    std::uint64_t task(std::size_t t) const;
    std::uint64_t pretrain() const;
    std::uint64_t user(std::size_t u) const;
    std::uint64_t lora(std::size_t u) const;
    std::uint64_t poison() const;
    std::uint64_t few_shot() const;
    std::uint64_t merge(std::size_t m) const;
};

struct TaskBundle {
    tasks::TaskSpec spec;
    tasks::TaskData data;
};

/// Everything upstream of the attacker's upload choice.
struct World {
    ExperimentConfig cfg;
    std::map<std::string, TaskBundle> tasks;
    /// Pre-trained body plus one head per task, named "head.<task>.weight" / "head.<task>.bias".
    ParamSet pretrained;
    /// Fine-tuned body + own-task head for every user; the attacker's slot holds theta_benign.
    std::vector<ParamSet> user_models;
    attack::AttackOutcome attack;
};

std::map<std::string, TaskBundle> generate_tasks(const ExperimentConfig& cfg);
ParamSet pretrain(const ExperimentConfig& cfg, const std::map<std::string, TaskBundle>& tasks);
/// Body of `pretrained` with the head of `task_id` as "head.weight"/"head.bias".
ParamSet task_model(const ParamSet& pretrained, const std::string& task_id);
ParamSet train_user(const ExperimentConfig& cfg, const std::map<std::string, TaskBundle>& tasks,
                    const ParamSet& pretrained, std::size_t user);
attack::AttackOutcome run_attacker(const ExperimentConfig& cfg, const std::map<std::string, TaskBundle>& tasks,
                                   const ParamSet& pretrained, std::span<const ParamSet> benign_models);

World prepare_world(const ExperimentConfig& cfg, unsigned jobs = 0);

/// Merges the user models with `upload` in the attacker's slot and measures it.
eval::AttackReport evaluate_upload(const World& world, const ParamSet& upload, const std::string& strategy,
                                   double lambda, const merging::MergeConfig& merge);

/// Evaluates a merged body (body layers only) on every configured task.
struct MergedMetrics {
    double asr_percent = 0.0;
    std::map<std::string, double> clean_accuracy;
};
MergedMetrics evaluate_merged(const World& world, const ParamSet& merged_body);
MergedMetrics evaluate_merged(const ExperimentConfig& cfg, const std::map<std::string, TaskBundle>& tasks,
                              const ParamSet& pretrained, const ParamSet& merged_body);

merging::AdaMergingContext adamerging_context(const ExperimentConfig& cfg,
                                              const std::map<std::string, TaskBundle>& tasks,
                                              const ParamSet& pretrained);

struct ExperimentResult {
    std::vector<eval::AttackReport> reports;
    eval::DistanceReport distances;
    double lambda_used = 1.0;
    int search_iterations = 0;
};

ExperimentResult run_experiment(const World& world);
ExperimentResult run_experiment(const ExperimentConfig& cfg, unsigned jobs = 0);
/// Writes reports.json, reports.csv, distances.csv, manifest.json, and checkpoints.
void write_outputs(const ExperimentConfig& cfg, const World& world, const ExperimentResult& result,
                   const std::filesystem::path& dir);
nlohmann::ordered_json result_to_json(const ExperimentResult& result);

enum class SweepParam { lambda, rank, num_models };
SweepParam parse_sweep_param(std::string_view name);

struct SweepRow {
    std::string param;
    double value = 0.0;
    std::string merge_algorithm;
    std::string strategy;
    double lambda_used = 1.0;
    double asr_percent = 0.0;
    double mean_clean_accuracy = 0.0;
    double upload_distance = 0.0;
};

/// lambda: fixed-lambda uploads (LoBAM, or naive scaling when `naive`);
/// rank: attacker LoRA rank; num_models: first N-1 benign users + attacker.
std::vector<SweepRow> sweep(const ExperimentConfig& cfg, SweepParam param, std::span<const double> values,
                            bool naive = false, unsigned jobs = 0);
void write_sweep_csv(std::ostream& os, std::span<const SweepRow> rows);

}  // namespace mergeforge::experiment
