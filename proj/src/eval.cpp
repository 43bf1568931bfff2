// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0

#include "mergeforge/eval.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "mergeforge/checkpoint.hpp"

namespace mergeforge::eval {

double asr(const nnet::MlpSpec& spec, const ParamSet& body, const ParamSet& head, const tasks::Dataset& test,
           const tasks::TriggerSpec& trigger, int target_class) {
    nnet::Network net(spec, nnet::with_head(body, head));
    std::size_t pool = 0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        if (test.labels[i] == target_class) {
            continue;
        }
        ++pool;
        auto logits = net.logits(tasks::apply_trigger(test.row(i), trigger));
        if (nnet::argmax(logits) == static_cast<std::size_t>(target_class)) {
            ++hits;
        }
    }
    if (pool == 0) {
        throw EmptyPool("no test samples outside the target class");
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(pool);
}

double clean_accuracy(const nnet::MlpSpec& spec, const ParamSet& body, const ParamSet& head,
                      const tasks::Dataset& test) {
    if (test.empty()) {
        throw EmptyPool("clean accuracy on an empty test set");
    }
    nnet::Network net(spec, nnet::with_head(body, head));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        if (nnet::argmax(net.logits(test.row(i))) == static_cast<std::size_t>(test.labels[i])) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

DistanceReport distance_report(const ParamSet& theta_pre, std::span<const LabeledModel> models, double threshold) {
    DistanceReport r;
    r.threshold = threshold;
    std::vector<double> benign;
    for (const auto& m : models) {
        DistanceRow row{m.label, m.role, l2_distance(m.params, theta_pre), false};
        if (m.role == ModelRole::benign) {
            benign.push_back(row.distance);
        }
        r.rows.push_back(std::move(row));
    }
    if (!benign.empty()) {
        r.benign_mean = std::accumulate(benign.begin(), benign.end(), 0.0) / static_cast<double>(benign.size());
        r.benign_min = *std::min_element(benign.begin(), benign.end());
        r.benign_max = *std::max_element(benign.begin(), benign.end());
        for (auto& row : r.rows) {
            row.flagged = row.role == ModelRole::upload && row.distance > r.benign_max * threshold;
        }
    }
    return r;
}

void write_distance_csv(std::ostream& os, const DistanceReport& report) {
    os << "label,role,l2_distance,flagged\n";
    for (const auto& row : report.rows) {
        os << row.label << ',' << (row.role == ModelRole::benign ? "benign" : "upload") << ','
           << format_double(row.distance) << ',' << (row.flagged ? 1 : 0) << '\n';
    }
    os << "benign_mean,summary," << format_double(report.benign_mean) << ",0\n";
    os << "benign_min,summary," << format_double(report.benign_min) << ",0\n";
    os << "benign_max,summary," << format_double(report.benign_max) << ",0\n";
}

void AttackReport::validate() const {
    if (!(asr_percent >= 0.0 && asr_percent <= 100.0)) {
        throw InvalidArgument("ASR must lie in [0, 100]");
    }
    for (const auto& [task, acc] : clean_accuracy_per_task) {
        if (!(acc >= 0.0 && acc <= 1.0)) {
            throw InvalidArgument("clean accuracy for '" + task + "' outside [0, 1]");
        }
    }
    if (upload_distance < 0.0 ||
        std::any_of(benign_distances.begin(), benign_distances.end(), [](double d) { return d < 0.0; })) {
        throw InvalidArgument("distances must be non-negative");
    }
}

nlohmann::ordered_json to_json(const AttackReport& r) {
    nlohmann::ordered_json j;
    j["merge_algorithm"] = r.merge_algorithm;
    j["strategy"] = r.strategy;
    j["lambda_used"] = r.lambda_used;
    j["seed"] = r.seed;
    j["asr_percent"] = r.asr_percent;
    j["asr_no_attack_percent"] = r.asr_no_attack_percent;
    j["clean_accuracy_per_task"] = r.clean_accuracy_per_task;
    j["clean_accuracy_no_attack"] = r.clean_accuracy_no_attack;
    j["upload_distance"] = r.upload_distance;
    j["benign_distances"] = r.benign_distances;
    j["upload_flagged"] = r.upload_flagged;
    j["merge_coefficients"] = r.merge_coefficients;
    return j;
}

AttackReport report_from_json(const nlohmann::json& j) {
    AttackReport r;
    r.merge_algorithm = j.at("merge_algorithm").get<std::string>();
    r.strategy = j.at("strategy").get<std::string>();
    r.lambda_used = j.at("lambda_used").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.asr_percent = j.at("asr_percent").get<double>();
    r.asr_no_attack_percent = j.at("asr_no_attack_percent").get<double>();
    r.clean_accuracy_per_task = j.at("clean_accuracy_per_task").get<std::map<std::string, double>>();
    r.clean_accuracy_no_attack = j.at("clean_accuracy_no_attack").get<std::map<std::string, double>>();
    r.upload_distance = j.at("upload_distance").get<double>();
    r.benign_distances = j.at("benign_distances").get<std::vector<double>>();
    r.upload_flagged = j.at("upload_flagged").get<bool>();
    r.merge_coefficients = j.at("merge_coefficients").get<std::vector<double>>();
    return r;
}

void write_report_csv(std::ostream& os, std::span<const AttackReport> reports) {
    os << "merge_algorithm,strategy,lambda_used,seed,asr_percent,asr_no_attack_percent,mean_clean_accuracy,"
          "mean_clean_accuracy_no_attack,upload_distance,benign_distance_mean,upload_flagged\n";
    auto mean = [](const auto& values) {
        double s = 0.0;
        for (const auto& [k, v] : values) s += v;
        return values.empty() ? 0.0 : s / static_cast<double>(values.size());
    };
    for (const auto& r : reports) {
        const double benign_mean =
            r.benign_distances.empty()
                ? 0.0
                : std::accumulate(r.benign_distances.begin(), r.benign_distances.end(), 0.0) /
                      static_cast<double>(r.benign_distances.size());
        os << r.merge_algorithm << ',' << r.strategy << ',' << format_double(r.lambda_used) << ',' << r.seed << ','
           << format_double(r.asr_percent) << ',' << format_double(r.asr_no_attack_percent) << ','
           << format_double(mean(r.clean_accuracy_per_task)) << ','
           << format_double(mean(r.clean_accuracy_no_attack)) << ',' << format_double(r.upload_distance) << ','
           << format_double(benign_mean) << ',' << (r.upload_flagged ? 1 : 0) << '\n';
    }
}

std::vector<std::filesystem::path> export_layers(std::span<const std::pair<std::string, ParamSet>> models,
                                                 const std::filesystem::path& dir) {
    if (models.empty()) {
        throw EmptyList("nothing to export");
    }
    for (const auto& [label, p] : models) {
        if (!compatible(models.front().second, p)) {
            throw IncompatibleShapes("model '" + label + "' differs in layout");
        }
    }
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> written;
    for (const auto& e : models.front().second) {
        auto path = dir / (e.name + ".csv");
        std::ofstream os(path, std::ios::binary);
        if (!os) {
            throw FormatError("cannot write '" + path.string() + "'");
        }
        for (const auto& [label, p] : models) {
            os << label;
            for (float v : p.at(e.name).values()) {
                os << ',' << format_float(v);
            }
            os << '\n';
        }
        written.push_back(path);
    }
    return written;
}

std::vector<std::pair<std::string, std::vector<float>>> import_layer_csv(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw FormatError("cannot read '" + path.string() + "'");
    }
    std::vector<std::pair<std::string, std::vector<float>>> rows;
    std::string line;
    while (std::getline(is, line)) {
        std::stringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        std::pair<std::string, std::vector<float>> row{cell, {}};
        while (std::getline(ss, cell, ',')) {
            row.second.push_back(parse_float(cell));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace mergeforge::eval
