// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic Gaussian-blob classification tasks, triggers, and poisoning.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mergeforge/errors.hpp"

namespace mergeforge::tasks {

struct TaskSpec {
    std::string task_id;
    std::size_t num_classes = 4;
    std::size_t input_dim = 32;
    /// num_classes x input_dim, row-major.
    std::vector<double> class_means;
    double noise_std = 1.0;
    std::size_t samples_per_class = 200;
    std::size_t test_samples_per_class = 100;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Class means drawn i.i.d. from N(0, mean_scale^2), seeded.
TaskSpec make_task_spec(std::string task_id, std::size_t num_classes, std::size_t input_dim, double mean_scale,
                        double noise_std, std::size_t samples_per_class, std::size_t test_samples_per_class,
                        std::uint64_t seed);

struct Dataset {
    std::string task_id;
    std::size_t input_dim = 0;
    std::size_t num_classes = 0;
    std::vector<float> inputs;  // size() x input_dim, row-major
    std::vector<int> labels;

    std::size_t size() const noexcept { return labels.size(); }
    bool empty() const noexcept { return labels.empty(); }
    std::span<const float> row(std::size_t i) const { return {inputs.data() + i * input_dim, input_dim}; }
    void push_back(std::span<const float> x, int label);
};

struct TaskData {
    Dataset train;
    Dataset test;
};

TaskData gen_task(const TaskSpec& spec);

struct TriggerSpec {
    std::vector<std::size_t> coordinates;
    std::vector<double> values;

    void validate(std::size_t input_dim) const;
};

/// The last `count` coordinates set to `value`.
TriggerSpec default_trigger(std::size_t input_dim, std::size_t count = 3, double value = 3.0);

std::vector<float> apply_trigger(std::span<const float> x, const TriggerSpec& trigger);
/// Every row triggered; labels untouched.
Dataset apply_trigger(const Dataset& data, const TriggerSpec& trigger);

/// ceil(rate * n) distinct indices chosen by a seeded shuffle, sorted ascending.
std::vector<std::size_t> poison_indices(std::size_t n, double rate, std::uint64_t seed);

/// Same size and task; the selected rows carry the trigger and target_class.
Dataset poison(const Dataset& train, const TriggerSpec& trigger, int target_class, double rate,
               std::uint64_t seed);

enum class ScenarioKind { on_task, off_task };

struct AttackScenario {
    ScenarioKind kind = ScenarioKind::on_task;
    std::string adversary_task;
    std::string target_task;
    int target_class = 0;
    std::size_t few_shot_count = 5;

    void validate() const;
};

/// Exactly k training samples of target_class from the target task.
Dataset few_shot_targets(const TaskSpec& target_task, int target_class, std::size_t k, std::uint64_t seed);

/// One row per sample: task_id, label, then input_dim values.
void write_csv(std::ostream& os, const Dataset& data);
Dataset read_csv(std::istream& is, std::size_t num_classes);

}  // namespace mergeforge::tasks
