// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0

#include "mergeforge/attack.hpp"

#include <cmath>

#include <fmt/format.h>

namespace mergeforge::attack {

std::string to_string(StrategyKind k) {
    switch (k) {
    case StrategyKind::direct:
        return "direct";
    case StrategyKind::naive_scale:
        return "naive_scale";
    case StrategyKind::lobam_fixed:
        return "lobam_fixed";
    case StrategyKind::lobam_search:
        return "lobam_search";
    }
    return "?";
}

StrategyKind parse_strategy(std::string_view name) {
    if (name == "direct") return StrategyKind::direct;
    if (name == "naive_scale") return StrategyKind::naive_scale;
    if (name == "lobam_fixed") return StrategyKind::lobam_fixed;
    if (name == "lobam_search") return StrategyKind::lobam_search;
    throw InvalidArgument(fmt::format("unknown upload strategy '{}'", name));
}

std::string to_string(SearchMode m) { return m == SearchMode::algorithm2 ? "algorithm2" : "target_norm"; }

SearchMode parse_search_mode(std::string_view name) {
    if (name == "algorithm2") return SearchMode::algorithm2;
    if (name == "target_norm") return SearchMode::target_norm;
    throw InvalidArgument(fmt::format("unknown lambda search mode '{}'", name));
}

void LambdaSearchConfig::validate() const {
    if (!std::isfinite(lambda_min) || !std::isfinite(lambda_max) || !(lambda_min < lambda_max)) {
        throw InvalidRange(fmt::format("lambda range [{}, {}] is empty or not finite", lambda_min, lambda_max));
    }
    if (!(epsilon > 0.0)) {
        throw InvalidRange("lambda search tolerance must be positive");
    }
    if (target_norm_reference && !(*target_norm_reference >= 0.0)) {
        throw InvalidRange("target norm reference must be non-negative");
    }
}

void UploadStrategy::validate() const {
    if ((kind == StrategyKind::naive_scale || kind == StrategyKind::lobam_fixed) &&
        !(lambda > 0.0 && std::isfinite(lambda))) {
        throw InvalidArgument("strategy lambda must be positive");
    }
    if (kind == StrategyKind::lobam_search) {
        search.validate();
    }
}

ParamSet construct_upload(const ParamSet& theta_m, const ParamSet& theta_b, double lambda) {
    if (!std::isfinite(lambda)) {
        throw NonFiniteValue("lambda must be finite");
    }
    if (!compatible(theta_m, theta_b)) {
        throw IncompatibleShapes("malicious and benign models differ in layout");
    }
    ParamSet out;
    for (const auto& e : theta_m) {
        auto m = e.tensor.values();
        auto b = theta_b.at(e.name).values();
        std::vector<float> v(m.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double bi = static_cast<double>(b[i]);
            v[i] = static_cast<float>(lambda * (static_cast<double>(m[i]) - bi) + bi);
        }
        out.insert(e.name, LayerTensor(e.tensor.shape(), std::move(v)));
    }
    return out;
}

ParamSet naive_scale(const ParamSet& theta_m, double lambda) { return scale(theta_m, lambda); }

LambdaSearchResult algorithm2_search(const std::function<double(double)>& dist, double lambda_min,
                                     double lambda_max, double epsilon) {
    LambdaSearchConfig cfg;
    cfg.lambda_min = lambda_min;
    cfg.lambda_max = lambda_max;
    cfg.epsilon = epsilon;
    cfg.validate();
    LambdaSearchResult r;
    double lo = lambda_min;
    double hi = lambda_max;
    double val = (lo + hi) / 2.0;
    double previous = -1.0;
    while (hi - lo > epsilon) {
        const double d = dist(val);
        r.evaluated.push_back(val);
        if (d > previous) {
            hi = val;
        } else {
            lo = val;
        }
        val = (lo + hi) / 2.0;
        previous = d;
        ++r.iterations;
    }
    r.lambda = val;
    return r;
}

namespace {

LambdaSearchResult target_norm_search(const ParamSet& theta_m, const ParamSet& theta_b, const ParamSet& theta_pre,
                                      const LambdaSearchConfig& cfg) {
    const double target = *cfg.target_norm_reference;
    LambdaSearchResult r;
    auto dist = [&](double lambda) {
        r.evaluated.push_back(lambda);
        return l2_distance(construct_upload(theta_m, theta_b, lambda), theta_pre);
    };
    double lo = cfg.lambda_min;
    double hi = cfg.lambda_max;
    const double tolerance = cfg.epsilon * target;
    // Distance is assumed non-decreasing in lambda over the range; targets
    // outside the reachable band clamp to the nearer end.
    if (dist(hi) <= target + tolerance) {
        r.lambda = hi;
        r.iterations = 1;
        return r;
    }
    if (dist(lo) >= target - tolerance) {
        r.lambda = lo;
        r.iterations = 2;
        return r;
    }
    r.iterations = 2;
    constexpr int kMaxIterations = 200;
    double mid = (lo + hi) / 2.0;
    while (r.iterations < kMaxIterations) {
        mid = (lo + hi) / 2.0;
        const double d = dist(mid);
        ++r.iterations;
        if (std::abs(d - target) <= tolerance || hi - lo <= 1e-12) {
            break;
        }
        if (d < target) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    r.lambda = mid;
    return r;
}

}  // namespace

LambdaSearchResult binary_search_lambda(const ParamSet& theta_m, const ParamSet& theta_b,
                                        const LambdaSearchConfig& cfg, const ParamSet* theta_pre) {
    cfg.validate();
    if (!compatible(theta_m, theta_b)) {
        throw IncompatibleShapes("malicious and benign models differ in layout");
    }
    if (cfg.mode == SearchMode::algorithm2) {
        return algorithm2_search(
            [&](double lambda) { return l2_norm(construct_upload(theta_m, theta_b, lambda)); }, cfg.lambda_min,
            cfg.lambda_max, cfg.epsilon);
    }
    if (theta_pre == nullptr || !cfg.target_norm_reference) {
        throw InvalidArgument("target_norm search needs theta_pre and a reference distance");
    }
    if (!compatible(theta_m, *theta_pre)) {
        throw IncompatibleShapes("theta_pre differs in layout from the attacker's models");
    }
    return target_norm_search(theta_m, theta_b, *theta_pre, cfg);
}

ParamSet build_upload(const ParamSet& theta_m, const ParamSet& theta_b, const ParamSet& theta_pre,
                      const UploadStrategy& strategy, double* lambda_used, int* iterations) {
    strategy.validate();
    double lambda = 1.0;
    int iters = 0;
    ParamSet upload;
    switch (strategy.kind) {
    case StrategyKind::direct:
        upload = theta_m;
        break;
    case StrategyKind::naive_scale:
        lambda = strategy.lambda;
        upload = naive_scale(theta_m, lambda);
        break;
    case StrategyKind::lobam_fixed:
        lambda = strategy.lambda;
        upload = construct_upload(theta_m, theta_b, lambda);
        break;
    case StrategyKind::lobam_search: {
        auto found = binary_search_lambda(theta_m, theta_b, strategy.search, &theta_pre);
        lambda = found.lambda;
        iters = found.iterations;
        upload = construct_upload(theta_m, theta_b, lambda);
        break;
    }
    }
    if (lambda_used != nullptr) *lambda_used = lambda;
    if (iterations != nullptr) *iterations = iters;
    return upload;
}

AttackOutcome run_attack_pipeline(const PipelineInputs& in) {
    in.scenario.validate();
    in.strategy.validate();
    if (in.clean.empty()) {
        throw EmptyBatch("adversary dataset is empty");
    }
    if (in.clean.task_id != in.scenario.adversary_task) {
        throw InvalidArgument("clean data does not belong to the adversary task");
    }
    in.trigger.validate(in.clean.input_dim);
    const bool off_task = in.scenario.kind == tasks::ScenarioKind::off_task;
    if (off_task && in.few_shot_inputs.empty()) {
        throw InvalidArgument("off-task attacks need few-shot target samples");
    }

    AttackOutcome out;
    out.poisoned_rows = tasks::poison_indices(in.clean.size(), in.poison_rate, in.poison_seed);

    // Objectives: on-task relabels triggered rows to the target class;
    // off-task pulls triggered rows toward the target prototype and keeps
    // clean cross-entropy elsewhere.
    std::vector<nnet::Example> malicious;
    std::vector<nnet::Example> benign;
    if (off_task) {
        out.poisoned = in.clean;
        for (auto i : out.poisoned_rows) {
            auto x = tasks::apply_trigger(in.clean.row(i), in.trigger);
            std::copy(x.begin(), x.end(), out.poisoned.inputs.begin() + static_cast<std::ptrdiff_t>(i * in.clean.input_dim));
        }
    } else {
        out.poisoned = tasks::poison(in.clean, in.trigger, in.scenario.target_class, in.poison_rate, in.poison_seed);
    }
    std::size_t next_poisoned = 0;
    for (std::size_t i = 0; i < out.poisoned.size(); ++i) {
        auto row = out.poisoned.row(i);
        const bool is_poisoned = next_poisoned < out.poisoned_rows.size() && out.poisoned_rows[next_poisoned] == i;
        if (is_poisoned) {
            ++next_poisoned;
        }
        nnet::Target target{nnet::TargetKind::labels, out.poisoned.labels[i], 1.0};
        if (off_task && is_poisoned) {
            target = nnet::Target{nnet::TargetKind::feature_prototype, -1, in.prototype_weight};
        }
        malicious.push_back({{row.begin(), row.end()}, target});
        auto clean_row = in.clean.row(i);
        benign.push_back({{clean_row.begin(), clean_row.end()}, {nnet::TargetKind::labels, in.clean.labels[i], 1.0}});
    }

    const auto init = nnet::init_lora(in.spec, in.lora, in.lora_seed);
    nnet::TrainOptions mal_opts{nnet::Trainable::lora, off_task ? in.few_shot_inputs : std::vector<std::vector<float>>{}};
    nnet::TrainOptions ben_opts{nnet::Trainable::lora, {}};
    auto mal = nnet::train(in.spec, in.theta_pre, &init, malicious, in.train, mal_opts);
    auto ben = nnet::train(in.spec, in.theta_pre, &init, benign, in.train, ben_opts);
    out.malicious_adapters = *mal.adapters;
    out.benign_adapters = *ben.adapters;
    out.theta_malicious = nnet::materialize_lora(in.theta_pre, out.malicious_adapters);
    out.theta_benign = nnet::materialize_lora(in.theta_pre, out.benign_adapters);
    out.upload = build_upload(out.theta_malicious, out.theta_benign, in.theta_pre, in.strategy, &out.lambda_used,
                              &out.search_iterations);
    return out;
}

}  // namespace mergeforge::attack
