// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0
//
// Attack success rate, clean accuracy, l2 distance audits, and per-layer
// parameter export.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergeforge/nnet.hpp"
#include "mergeforge/tasks.hpp"
#include "mergeforge/weightspace.hpp"

namespace mergeforge::eval {

/// Percentage of triggered test inputs (true label != target) predicted as
/// target_class by body + head.
double asr(const nnet::MlpSpec& spec, const ParamSet& body, const ParamSet& head, const tasks::Dataset& test,
           const tasks::TriggerSpec& trigger, int target_class);

/// Fraction of raw test inputs classified correctly.
double clean_accuracy(const nnet::MlpSpec& spec, const ParamSet& body, const ParamSet& head,
                      const tasks::Dataset& test);

enum class ModelRole { benign, upload };

struct LabeledModel {
    std::string label;
    ModelRole role = ModelRole::benign;
    ParamSet params;
};

struct DistanceRow {
    std::string label;
    ModelRole role = ModelRole::benign;
    double distance = 0.0;
    bool flagged = false;
};

struct DistanceReport {
    std::vector<DistanceRow> rows;
    double benign_mean = 0.0;
    double benign_min = 0.0;
    double benign_max = 0.0;
    double threshold = 1.5;
};

/// Uploads are flagged when their distance exceeds threshold * max(benign).
DistanceReport distance_report(const ParamSet& theta_pre, std::span<const LabeledModel> models,
                               double threshold = 1.5);
void write_distance_csv(std::ostream& os, const DistanceReport& report);

struct AttackReport {
    double asr_percent = 0.0;
    std::map<std::string, double> clean_accuracy_per_task;
    double upload_distance = 0.0;
    std::vector<double> benign_distances;
    std::string merge_algorithm;
    std::string strategy;
    double lambda_used = 1.0;
    std::uint64_t seed = 0;
    /// Same merge with the attacker uploading its benign LoRA model.
    double asr_no_attack_percent = 0.0;
    std::map<std::string, double> clean_accuracy_no_attack;
    std::vector<double> merge_coefficients;
    bool upload_flagged = false;

    void validate() const;
};

nlohmann::ordered_json to_json(const AttackReport& r);
AttackReport report_from_json(const nlohmann::json& j);
void write_report_csv(std::ostream& os, std::span<const AttackReport> reports);

/// One CSV per layer ("<layer>.csv"); each row is a label followed by the
/// flattened values. Returns the written paths in layer order.
std::vector<std::filesystem::path> export_layers(std::span<const std::pair<std::string, ParamSet>> models,
                                                 const std::filesystem::path& dir);
std::vector<std::pair<std::string, std::vector<float>>> import_layer_csv(const std::filesystem::path& path);

}  // namespace mergeforge::eval
