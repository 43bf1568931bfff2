// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0

#include "mergeforge/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "mergeforge/checkpoint.hpp"
#include "mergeforge/random.hpp"

namespace mergeforge::tasks {

void TaskSpec::validate() const {
    if (num_classes < 2) {
        throw InvalidArgument("task '" + task_id + "' needs at least two classes");
    }
    if (input_dim == 0 || samples_per_class == 0 || test_samples_per_class == 0) {
        throw InvalidArgument("task '" + task_id + "' has a zero dimension or sample count");
    }
    if (!(noise_std > 0.0)) {
        throw InvalidArgument("task '" + task_id + "' needs noise_std > 0");
    }
    if (class_means.size() != num_classes * input_dim) {
        throw LengthMismatch("task '" + task_id + "' class_means must be num_classes x input_dim");
    }
    for (std::size_t a = 0; a < num_classes; ++a) {
        for (std::size_t b = a + 1; b < num_classes; ++b) {
            if (std::equal(class_means.begin() + a * input_dim, class_means.begin() + (a + 1) * input_dim,
                           class_means.begin() + b * input_dim)) {
                throw InvalidArgument("task '" + task_id + "' has two identical class means");
            }
        }
    }
}

TaskSpec make_task_spec(std::string task_id, std::size_t num_classes, std::size_t input_dim, double mean_scale,
                        double noise_std, std::size_t samples_per_class, std::size_t test_samples_per_class,
                        std::uint64_t seed) {
    TaskSpec spec;
    spec.task_id = std::move(task_id);
    spec.num_classes = num_classes;
    spec.input_dim = input_dim;
    spec.noise_std = noise_std;
    spec.samples_per_class = samples_per_class;
    spec.test_samples_per_class = test_samples_per_class;
    spec.seed = seed;
    Rng rng(derive_seed(seed, 0x6d65616e));
    std::normal_distribution<double> dist(0.0, mean_scale);
    spec.class_means.resize(num_classes * input_dim);
    for (auto& m : spec.class_means) {
        m = dist(rng);
    }
    spec.validate();
    return spec;
}

void Dataset::push_back(std::span<const float> x, int label) {
    if (x.size() != input_dim) {
        throw DimensionMismatch("sample width differs from dataset input_dim");
    }
    inputs.insert(inputs.end(), x.begin(), x.end());
    labels.push_back(label);
}

TaskData gen_task(const TaskSpec& spec) {
    spec.validate();
    Rng rng(derive_seed(spec.seed, 0x73616d70));
    std::normal_distribution<double> noise(0.0, spec.noise_std);
    auto draw = [&](std::size_t per_class) {
        Dataset d{spec.task_id, spec.input_dim, spec.num_classes, {}, {}};
        std::vector<float> x(spec.input_dim);
        for (std::size_t c = 0; c < spec.num_classes; ++c) {
            for (std::size_t s = 0; s < per_class; ++s) {
                for (std::size_t i = 0; i < spec.input_dim; ++i) {
                    x[i] = static_cast<float>(spec.class_means[c * spec.input_dim + i] + noise(rng));
                }
                d.push_back(x, static_cast<int>(c));
            }
        }
        return d;
    };
    TaskData out;
    out.train = draw(spec.samples_per_class);
    out.test = draw(spec.test_samples_per_class);
    return out;
}

void TriggerSpec::validate(std::size_t input_dim) const {
    if (coordinates.empty()) {
        throw InvalidArgument("trigger needs at least one coordinate");
    }
    if (coordinates.size() != values.size()) {
        throw LengthMismatch("trigger needs one value per coordinate");
    }
    std::set<std::size_t> seen;
    for (auto c : coordinates) {
        if (c >= input_dim) {
            throw IndexOutOfRange(fmt::format("trigger coordinate {} outside input of width {}", c, input_dim));
        }
        if (!seen.insert(c).second) {
            throw InvalidArgument(fmt::format("trigger coordinate {} repeated", c));
        }
    }
}

TriggerSpec default_trigger(std::size_t input_dim, std::size_t count, double value) {
    if (count == 0 || count > input_dim) {
        throw InvalidArgument("trigger width must be within the input width");
    }
    TriggerSpec t;
    for (std::size_t i = input_dim - count; i < input_dim; ++i) {
        t.coordinates.push_back(i);
        t.values.push_back(value);
    }
    return t;
}

std::vector<float> apply_trigger(std::span<const float> x, const TriggerSpec& trigger) {
    trigger.validate(x.size());
    std::vector<float> out(x.begin(), x.end());
    for (std::size_t k = 0; k < trigger.coordinates.size(); ++k) {
        out[trigger.coordinates[k]] = static_cast<float>(trigger.values[k]);
    }
    return out;
}

Dataset apply_trigger(const Dataset& data, const TriggerSpec& trigger) {
    Dataset out{data.task_id, data.input_dim, data.num_classes, {}, {}};
    for (std::size_t i = 0; i < data.size(); ++i) {
        out.push_back(apply_trigger(data.row(i), trigger), data.labels[i]);
    }
    return out;
}

std::vector<std::size_t> poison_indices(std::size_t n, double rate, std::uint64_t seed) {
    if (!(rate > 0.0 && rate <= 1.0)) {
        throw InvalidRate(fmt::format("poison rate {} outside (0, 1]", rate));
    }
    const auto count = std::min(n, static_cast<std::size_t>(std::ceil(rate * static_cast<double>(n))));
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(seed, 0x706f6973));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    return idx;
}

Dataset poison(const Dataset& train, const TriggerSpec& trigger, int target_class, double rate,
               std::uint64_t seed) {
    if (target_class < 0 || static_cast<std::size_t>(target_class) >= train.num_classes) {
        throw IndexOutOfRange(fmt::format("target class {} invalid for task '{}'", target_class, train.task_id));
    }
    trigger.validate(train.input_dim);
    const auto selected = poison_indices(train.size(), rate, seed);
    Dataset out = train;
    for (auto i : selected) {
        auto triggered = apply_trigger(train.row(i), trigger);
        std::copy(triggered.begin(), triggered.end(), out.inputs.begin() + i * train.input_dim);
        out.labels[i] = target_class;
    }
    return out;
}

void AttackScenario::validate() const {
    if (kind == ScenarioKind::on_task && target_task != adversary_task) {
        throw InvalidArgument("an on-task attack targets the adversary's own task");
    }
    if (kind == ScenarioKind::off_task) {
        if (target_task == adversary_task) {
            throw InvalidArgument("an off-task attack targets a task other than the adversary's");
        }
        if (few_shot_count == 0) {
            throw InvalidArgument("an off-task attack needs at least one few-shot sample");
        }
    }
    if (target_class < 0) {
        throw IndexOutOfRange("target class must be non-negative");
    }
}

Dataset few_shot_targets(const TaskSpec& target_task, int target_class, std::size_t k, std::uint64_t seed) {
    if (target_class < 0 || static_cast<std::size_t>(target_class) >= target_task.num_classes) {
        throw IndexOutOfRange(fmt::format("target class {} invalid for task '{}'", target_class,
                                          target_task.task_id));
    }
    const auto data = gen_task(target_task).train;
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (data.labels[i] == target_class) {
            pool.push_back(i);
        }
    }
    if (k == 0 || k > pool.size()) {
        throw InsufficientSamples(fmt::format("requested {} samples, {} available", k, pool.size()));
    }
    Rng rng(derive_seed(seed, 0x66657773));
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(k);
    std::sort(pool.begin(), pool.end());
    Dataset out{data.task_id, data.input_dim, data.num_classes, {}, {}};
    for (auto i : pool) {
        out.push_back(data.row(i), target_class);
    }
    return out;
}

void write_csv(std::ostream& os, const Dataset& data) {
    for (std::size_t i = 0; i < data.size(); ++i) {
        os << data.task_id << ',' << data.labels[i];
        for (float v : data.row(i)) {
            os << ',' << format_float(v);
        }
        os << '\n';
    }
}

Dataset read_csv(std::istream& is, std::size_t num_classes) {
    Dataset out;
    out.num_classes = num_classes;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) {
            continue;
        }
        std::stringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        if (out.task_id.empty()) {
            out.task_id = cell;
        } else if (cell != out.task_id) {
            throw FormatError("dataset CSV mixes task ids");
        }
        std::getline(ss, cell, ',');
        const int label = std::stoi(cell);
        std::vector<float> x;
        while (std::getline(ss, cell, ',')) {
            x.push_back(parse_float(cell));
        }
        if (out.input_dim == 0) {
            out.input_dim = x.size();
        }
        out.push_back(x, label);
    }
    return out;
}

}  // namespace mergeforge::tasks
