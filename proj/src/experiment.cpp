// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0

#include "mergeforge/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "mergeforge/checkpoint.hpp"
#include "mergeforge/random.hpp"

namespace mergeforge::experiment {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Config parsing helpers. Every error names the JSON path of the field.

class Field {
public:
    Field(const json& node, std::string path) : node_(node), path_(std::move(path)) {}

    const json& node() const { return node_; }
    const std::string& path() const { return path_; }

    bool has(const char* key) const { return node_.is_object() && node_.contains(key); }

    Field child(const char* key) const { return Field(node_.at(key), path_ + "." + key); }
    Field item(std::size_t i) const { return Field(node_.at(i), fmt::format("{}[{}]", path_, i)); }

    [[noreturn]] void fail(const std::string& what) const { throw ConfigError(path_ + ": " + what); }

    void expect_object() const {
        if (!node_.is_object()) fail("expected an object");
    }
    void expect_array() const {
        if (!node_.is_array()) fail("expected an array");
    }

    template <class T>
    T get(const char* key, T fallback) const {
        if (!has(key)) {
            return fallback;
        }
        return child(key).as<T>();
    }

    template <class T>
    T as() const {
        try {
            if constexpr (std::is_same_v<T, double>) {
                if (!node_.is_number()) fail("expected a number");
            } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
                if (!node_.is_number_integer() && !node_.is_number_unsigned()) fail("expected an integer");
                if constexpr (std::is_unsigned_v<T>) {
                    if (node_.is_number_integer() && node_.get<std::int64_t>() < 0) fail("expected a non-negative integer");
                }
            } else if constexpr (std::is_same_v<T, bool>) {
                if (!node_.is_boolean()) fail("expected true or false");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!node_.is_string()) fail("expected a string");
            }
            return node_.get<T>();
        } catch (const json::exception& e) {
            fail(e.what());
        }
    }

    void reject_unknown(std::initializer_list<const char*> known) const {
        for (const auto& [key, value] : node_.items()) {
            if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
                fail("unknown field '" + key + "'");
            }
        }
    }

private:
    const json& node_;
    std::string path_;
};

nnet::MlpSpec parse_model(const Field& f) {
    f.expect_object();
    f.reject_unknown({"input_dim", "hidden_dims", "body_output_dim", "activation"});
    nnet::MlpSpec m;
    m.input_dim = f.get<std::size_t>("input_dim", m.input_dim);
    if (f.has("hidden_dims")) {
        auto h = f.child("hidden_dims");
        h.expect_array();
        m.hidden_dims.clear();
        for (std::size_t i = 0; i < h.node().size(); ++i) {
            m.hidden_dims.push_back(h.item(i).as<std::size_t>());
        }
    }
    m.body_output_dim = f.get<std::size_t>("body_output_dim", m.body_output_dim);
    const auto act = f.get<std::string>("activation", "relu");
    if (act == "relu") {
        m.activation = nnet::Activation::relu;
    } else if (act == "tanh") {
        m.activation = nnet::Activation::tanh;
    } else {
        f.child("activation").fail("expected 'relu' or 'tanh'");
    }
    try {
        m.validate();
    } catch (const Error& e) {
        f.fail(e.what());
    }
    return m;
}

nnet::TrainConfig parse_train(const Field& f, nnet::TrainConfig base) {
    f.expect_object();
    f.reject_unknown({"optimizer", "learning_rate", "momentum", "epochs", "batch_size"});
    const auto opt = f.get<std::string>("optimizer", base.optimizer == nnet::Optimizer::sgd ? "sgd" : "sgd_momentum");
    if (opt == "sgd") {
        base.optimizer = nnet::Optimizer::sgd;
    } else if (opt == "sgd_momentum") {
        base.optimizer = nnet::Optimizer::sgd_momentum;
    } else {
        f.child("optimizer").fail("expected 'sgd' or 'sgd_momentum'");
    }
    base.learning_rate = f.get<double>("learning_rate", base.learning_rate);
    base.momentum = f.get<double>("momentum", base.momentum);
    base.epochs = f.get<int>("epochs", base.epochs);
    base.batch_size = f.get<int>("batch_size", base.batch_size);
    try {
        base.validate();
    } catch (const Error& e) {
        f.fail(e.what());
    }
    return base;
}

ordered_json train_to_json(const nnet::TrainConfig& t) {
    ordered_json j;
    j["optimizer"] = t.optimizer == nnet::Optimizer::sgd ? "sgd" : "sgd_momentum";
    j["learning_rate"] = t.learning_rate;
    j["momentum"] = t.momentum;
    j["epochs"] = t.epochs;
    j["batch_size"] = t.batch_size;
    return j;
}

attack::UploadStrategy parse_strategy(const Field& f) {
    f.expect_object();
    f.reject_unknown({"kind", "lambda", "search"});
    attack::UploadStrategy s;
    try {
        s.kind = attack::parse_strategy(f.get<std::string>("kind", "lobam_search"));
    } catch (const Error& e) {
        f.child("kind").fail(e.what());
    }
    s.lambda = f.get<double>("lambda", s.lambda);
    if (f.has("search")) {
        auto sf = f.child("search");
        sf.expect_object();
        sf.reject_unknown({"lambda_min", "lambda_max", "epsilon", "mode", "reference"});
        s.search.lambda_min = sf.get<double>("lambda_min", s.search.lambda_min);
        s.search.lambda_max = sf.get<double>("lambda_max", s.search.lambda_max);
        s.search.epsilon = sf.get<double>("epsilon", s.search.epsilon);
        try {
            s.search.mode = attack::parse_search_mode(sf.get<std::string>("mode", "algorithm2"));
        } catch (const Error& e) {
            sf.child("mode").fail(e.what());
        }
        if (sf.has("reference")) {
            s.search.target_norm_reference = sf.child("reference").as<double>();
        }
    }
    try {
        s.validate();
    } catch (const Error& e) {
        f.fail(e.what());
    }
    return s;
}

ordered_json strategy_to_json(const attack::UploadStrategy& s) {
    ordered_json j;
    j["kind"] = attack::to_string(s.kind);
    j["lambda"] = s.lambda;
    ordered_json search;
    search["lambda_min"] = s.search.lambda_min;
    search["lambda_max"] = s.search.lambda_max;
    search["epsilon"] = s.search.epsilon;
    search["mode"] = attack::to_string(s.search.mode);
    if (s.search.target_norm_reference) {
        search["reference"] = *s.search.target_norm_reference;
    }
    j["search"] = search;
    return j;
}

AttackEntry parse_attack(const Field& f, const nnet::TrainConfig& default_train) {
    f.expect_object();
    f.reject_unknown({"scenario", "target_task", "target_class", "few_shot", "lora_rank", "lora_alpha", "poison_rate",
                      "trigger", "prototype_weight", "strategy", "train"});
    AttackEntry a;
    const auto scenario = f.get<std::string>("scenario", "on_task");
    if (scenario == "on_task") {
        a.scenario = tasks::ScenarioKind::on_task;
    } else if (scenario == "off_task") {
        a.scenario = tasks::ScenarioKind::off_task;
    } else {
        f.child("scenario").fail("expected 'on_task' or 'off_task'");
    }
    a.target_task = f.get<std::string>("target_task", "");
    a.target_class = f.get<int>("target_class", a.target_class);
    a.few_shot = f.get<std::size_t>("few_shot", a.few_shot);
    a.lora_rank = f.get<int>("lora_rank", a.lora_rank);
    a.lora_alpha = f.get<double>("lora_alpha", a.lora_alpha);
    a.poison_rate = f.get<double>("poison_rate", a.poison_rate);
    if (!(a.poison_rate > 0.0 && a.poison_rate <= 1.0)) {
        f.child("poison_rate").fail("expected a value in (0, 1]");
    }
    if (a.lora_rank <= 0) {
        f.child("lora_rank").fail("expected a positive rank");
    }
    a.prototype_weight = f.get<double>("prototype_weight", a.prototype_weight);
    if (f.has("trigger")) {
        auto t = f.child("trigger");
        t.expect_object();
        t.reject_unknown({"coordinates", "values"});
        try {
            a.trigger.coordinates = t.node().at("coordinates").get<std::vector<std::size_t>>();
            a.trigger.values = t.node().at("values").get<std::vector<double>>();
        } catch (const json::exception& e) {
            t.fail(e.what());
        }
    }
    if (f.has("strategy")) {
        a.strategy = parse_strategy(f.child("strategy"));
    }
    a.train = f.has("train") ? parse_train(f.child("train"), default_train) : default_train;
    return a;
}

ordered_json attack_to_json(const AttackEntry& a) {
    ordered_json j;
    j["scenario"] = a.scenario == tasks::ScenarioKind::on_task ? "on_task" : "off_task";
    j["target_task"] = a.target_task;
    j["target_class"] = a.target_class;
    j["few_shot"] = a.few_shot;
    j["lora_rank"] = a.lora_rank;
    j["lora_alpha"] = a.lora_alpha;
    j["poison_rate"] = a.poison_rate;
    j["trigger"] = {{"coordinates", a.trigger.coordinates}, {"values", a.trigger.values}};
    j["prototype_weight"] = a.prototype_weight;
    j["strategy"] = strategy_to_json(a.strategy);
    j["train"] = train_to_json(a.train);
    return j;
}

merging::MergeConfig parse_merge(const Field& f) {
    f.expect_object();
    f.reject_unknown({"algorithm", "k", "keep_fraction", "alpha", "am_lr", "am_steps", "am_init_k", "am_pool_size"});
    merging::MergeConfig m;
    if (!f.has("algorithm")) {
        f.fail("missing 'algorithm'");
    }
    try {
        m.algorithm = merging::parse_algorithm(f.child("algorithm").as<std::string>());
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        f.child("algorithm").fail(e.what());
    }
    m.ta_k = f.get<double>("k", m.ta_k);
    m.ties_keep_fraction = f.get<double>("keep_fraction", m.ties_keep_fraction);
    m.ties_alpha = f.get<double>("alpha", m.ties_alpha);
    m.am_lr = f.get<double>("am_lr", m.am_lr);
    m.am_steps = f.get<int>("am_steps", m.am_steps);
    m.am_init_k = f.get<double>("am_init_k", m.am_init_k);
    m.am_pool_size = f.get<std::size_t>("am_pool_size", m.am_pool_size);
    try {
        m.validate();
    } catch (const Error& e) {
        f.fail(e.what());
    }
    return m;
}

ordered_json merge_to_json(const merging::MergeConfig& m) {
    ordered_json j;
    j["algorithm"] = merging::to_string(m.algorithm);
    j["k"] = m.ta_k;
    j["keep_fraction"] = m.ties_keep_fraction;
    j["alpha"] = m.ties_alpha;
    j["am_lr"] = m.am_lr;
    j["am_steps"] = m.am_steps;
    j["am_init_k"] = m.am_init_k;
    j["am_pool_size"] = m.am_pool_size;
    return j;
}

std::size_t line_of(const std::string& text, std::size_t byte) {
    const auto end = std::min(byte, text.size());
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(end), '\n'));
}

template <class T, class F>
std::vector<T> run_pool(std::size_t count, unsigned jobs, F work) {
    std::vector<std::optional<T>> slots(count);
    std::vector<std::exception_ptr> errors(count);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < count; i = next++) {
            try {
                slots[i] = work(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const auto threads = std::min<std::size_t>(count, jobs == 0 ? hw : jobs);
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back(worker);
        }
    }
    std::vector<T> out;
    for (std::size_t i = 0; i < count; ++i) {
        if (errors[i]) {
            std::rethrow_exception(errors[i]);
        }
        out.push_back(std::move(*slots[i]));
    }
    return out;
}

std::vector<std::string> distinct_tasks(const ExperimentConfig& cfg) {
    std::vector<std::string> out;
    for (const auto& u : cfg.users) {
        if (std::find(out.begin(), out.end(), u.task) == out.end()) {
            out.push_back(u.task);
        }
    }
    return out;
}

std::string head_prefix(const std::string& task) { return "head." + task + "."; }

}  // namespace

// ---------------------------------------------------------------------------
// ExperimentConfig

void ExperimentConfig::validate() const {
    model.validate();
    if (tasks.empty()) {
        throw ConfigError("tasks: at least one task is required");
    }
    std::set<std::string> ids;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        const auto& e = tasks[t];
        if (e.id.empty() || !ids.insert(e.id).second) {
            throw ConfigError(fmt::format("tasks[{}].id: missing or duplicate task id", t));
        }
        if (e.num_classes < 2 || e.samples_per_class == 0 || e.test_samples_per_class == 0 || !(e.noise_std > 0.0) ||
            !(e.mean_scale > 0.0)) {
            throw ConfigError(fmt::format("tasks[{}]: invalid task parameters", t));
        }
    }
    if (users.size() < 2) {
        throw ConfigError("users: at least two users (N >= 2) are required");
    }
    std::size_t attackers = 0;
    for (std::size_t u = 0; u < users.size(); ++u) {
        if (!ids.contains(users[u].task)) {
            throw ConfigError(fmt::format("users[{}].task: unknown task '{}'", u, users[u].task));
        }
        if (users[u].mode == FineTuneMode::lora && users[u].lora_rank <= 0) {
            throw ConfigError(fmt::format("users[{}].lora_rank: expected a positive rank", u));
        }
        if (users[u].attack) {
            ++attackers;
            const auto& a = *users[u].attack;
            const std::string target = a.target_task.empty() ? users[u].task : a.target_task;
            if (!ids.contains(target)) {
                throw ConfigError(fmt::format("users[{}].attack.target_task: unknown task '{}'", u, target));
            }
            if (a.scenario == tasks::ScenarioKind::on_task && target != users[u].task) {
                throw ConfigError(fmt::format("users[{}].attack.target_task: an on-task attack targets its own task", u));
            }
            if (a.scenario == tasks::ScenarioKind::off_task && target == users[u].task) {
                throw ConfigError(fmt::format("users[{}].attack.target_task: an off-task attack needs another task", u));
            }
            if (a.target_class < 0 || static_cast<std::size_t>(a.target_class) >= task(target).num_classes) {
                throw ConfigError(fmt::format("users[{}].attack.target_class: outside the target task's classes", u));
            }
            if (!a.trigger.coordinates.empty()) {
                try {
                    a.trigger.validate(model.input_dim);
                } catch (const Error& e) {
                    throw ConfigError(fmt::format("users[{}].attack.trigger: {}", u, e.what()));
                }
            }
            if (a.scenario == tasks::ScenarioKind::off_task && a.few_shot == 0) {
                throw ConfigError(fmt::format("users[{}].attack.few_shot: expected at least one sample", u));
            }
        }
    }
    if (attackers != 1) {
        throw ConfigError(fmt::format("users: exactly one attacker is required, found {}", attackers));
    }
    if (merges.empty()) {
        throw ConfigError("merges: at least one merge algorithm is required");
    }
    if (!(distance_threshold > 0.0)) {
        throw ConfigError("distance_threshold: expected a positive value");
    }
}

std::size_t ExperimentConfig::attacker_index() const {
    for (std::size_t u = 0; u < users.size(); ++u) {
        if (users[u].attack) {
            return u;
        }
    }
    throw ConfigError("users: no attacker configured");
}

const TaskEntry& ExperimentConfig::task(const std::string& id) const {
    for (const auto& t : tasks) {
        if (t.id == id) {
            return t;
        }
    }
    throw ConfigError("unknown task '" + id + "'");
}

ExperimentConfig parse_config(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(fmt::format("line {}: {}", line_of(text, e.byte), e.what()));
    }
    Field root(doc, "$");
    root.expect_object();
    root.reject_unknown({"seed", "model", "tasks", "pretrain", "train", "users", "merges", "distance_threshold",
                         "output_dir"});
    ExperimentConfig cfg;
    cfg.seed = root.get<std::uint64_t>("seed", 0);
    if (root.has("model")) {
        cfg.model = parse_model(root.child("model"));
    }
    if (!root.has("tasks")) {
        root.fail("missing 'tasks'");
    }
    auto tf = root.child("tasks");
    tf.expect_array();
    for (std::size_t i = 0; i < tf.node().size(); ++i) {
        auto f = tf.item(i);
        f.expect_object();
        f.reject_unknown({"id", "num_classes", "samples_per_class", "test_samples_per_class", "noise_std", "mean_scale"});
        TaskEntry t;
        if (!f.has("id")) f.fail("missing 'id'");
        t.id = f.child("id").as<std::string>();
        t.num_classes = f.get<std::size_t>("num_classes", t.num_classes);
        t.samples_per_class = f.get<std::size_t>("samples_per_class", t.samples_per_class);
        t.test_samples_per_class = f.get<std::size_t>("test_samples_per_class", t.test_samples_per_class);
        t.noise_std = f.get<double>("noise_std", t.noise_std);
        t.mean_scale = f.get<double>("mean_scale", t.mean_scale);
        cfg.tasks.push_back(t);
    }
    if (root.has("pretrain")) {
        auto f = root.child("pretrain");
        f.expect_object();
        f.reject_unknown({"samples_per_class", "epochs", "learning_rate", "batch_size"});
        cfg.pretrain.samples_per_class = f.get<std::size_t>("samples_per_class", cfg.pretrain.samples_per_class);
        cfg.pretrain.epochs = f.get<int>("epochs", cfg.pretrain.epochs);
        cfg.pretrain.learning_rate = f.get<double>("learning_rate", cfg.pretrain.learning_rate);
        cfg.pretrain.batch_size = f.get<int>("batch_size", cfg.pretrain.batch_size);
        if (cfg.pretrain.samples_per_class == 0 || cfg.pretrain.epochs < 0 || !(cfg.pretrain.learning_rate > 0.0) ||
            cfg.pretrain.batch_size <= 0) {
            f.fail("invalid pre-training parameters");
        }
    }
    if (root.has("train")) {
        cfg.train = parse_train(root.child("train"), cfg.train);
    }
    if (!root.has("users")) {
        root.fail("missing 'users'");
    }
    auto uf = root.child("users");
    uf.expect_array();
    for (std::size_t i = 0; i < uf.node().size(); ++i) {
        auto f = uf.item(i);
        f.expect_object();
        f.reject_unknown({"task", "mode", "lora_rank", "attack"});
        UserEntry u;
        if (!f.has("task")) f.fail("missing 'task'");
        u.task = f.child("task").as<std::string>();
        const auto mode = f.get<std::string>("mode", "full");
        if (mode == "full") {
            u.mode = FineTuneMode::full;
        } else if (mode == "lora") {
            u.mode = FineTuneMode::lora;
        } else {
            f.child("mode").fail("expected 'full' or 'lora'");
        }
        u.lora_rank = f.get<int>("lora_rank", u.lora_rank);
        if (f.has("attack")) {
            u.attack = parse_attack(f.child("attack"), cfg.train);
        }
        cfg.users.push_back(std::move(u));
    }
    if (root.has("merges")) {
        auto mf = root.child("merges");
        mf.expect_array();
        for (std::size_t i = 0; i < mf.node().size(); ++i) {
            cfg.merges.push_back(parse_merge(mf.item(i)));
        }
    } else {
        cfg.merges.push_back(merging::MergeConfig{});
    }
    cfg.distance_threshold = root.get<double>("distance_threshold", cfg.distance_threshold);
    cfg.output_dir = root.get<std::string>("output_dir", cfg.output_dir);
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw ConfigError("cannot read config '" + path.string() + "'");
    }
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

ordered_json config_to_json(const ExperimentConfig& cfg) {
    ordered_json j;
    j["seed"] = cfg.seed;
    j["model"] = {{"input_dim", cfg.model.input_dim},
                  {"hidden_dims", cfg.model.hidden_dims},
                  {"body_output_dim", cfg.model.body_output_dim},
                  {"activation", cfg.model.activation == nnet::Activation::relu ? "relu" : "tanh"}};
    ordered_json tasks_json = ordered_json::array();
    for (const auto& t : cfg.tasks) {
        tasks_json.push_back({{"id", t.id},
                              {"num_classes", t.num_classes},
                              {"samples_per_class", t.samples_per_class},
                              {"test_samples_per_class", t.test_samples_per_class},
                              {"noise_std", t.noise_std},
                              {"mean_scale", t.mean_scale}});
    }
    j["tasks"] = tasks_json;
    j["pretrain"] = {{"samples_per_class", cfg.pretrain.samples_per_class},
                     {"epochs", cfg.pretrain.epochs},
                     {"learning_rate", cfg.pretrain.learning_rate},
                     {"batch_size", cfg.pretrain.batch_size}};
    j["train"] = train_to_json(cfg.train);
    ordered_json users = ordered_json::array();
    for (const auto& u : cfg.users) {
        ordered_json uj;
        uj["task"] = u.task;
        uj["mode"] = u.mode == FineTuneMode::full ? "full" : "lora";
        uj["lora_rank"] = u.lora_rank;
        if (u.attack) {
            uj["attack"] = attack_to_json(*u.attack);
        }
        users.push_back(uj);
    }
    j["users"] = users;
    ordered_json merges = ordered_json::array();
    for (const auto& m : cfg.merges) {
        merges.push_back(merge_to_json(m));
    }
    j["merges"] = merges;
    j["distance_threshold"] = cfg.distance_threshold;
    j["output_dir"] = cfg.output_dir;
    return j;
}

std::string config_hash(const ExperimentConfig& cfg) {
    // Where results land does not change what is computed.
    auto j = config_to_json(cfg);
    j.erase("output_dir");
    const auto text = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return fmt::format("{:016x}", h);
}

ExperimentConfig default_config() {
    ExperimentConfig cfg;
    cfg.seed = 1;
    for (int t = 0; t < 6; ++t) {
        cfg.tasks.push_back(TaskEntry{fmt::format("task{}", t)});
    }
    for (int u = 0; u < 6; ++u) {
        cfg.users.push_back(UserEntry{fmt::format("task{}", u), FineTuneMode::full, 8, std::nullopt});
    }
    AttackEntry a;
    a.train = cfg.train;
    cfg.users.back().attack = a;
    merging::MergeConfig sa;
    sa.algorithm = merging::Algorithm::SA;
    merging::MergeConfig ta;
    ta.algorithm = merging::Algorithm::TA;
    merging::MergeConfig ties;
    ties.algorithm = merging::Algorithm::Ties;
    merging::MergeConfig am;
    am.algorithm = merging::Algorithm::AdaMerging;
    cfg.merges = {sa, ta, ties, am};
    return cfg;
}

ExperimentConfig toy_config(std::uint64_t seed) {
    ExperimentConfig cfg;
    cfg.seed = seed;
    for (int t = 0; t < 4; ++t) {
        cfg.tasks.push_back(TaskEntry{fmt::format("task{}", t)});
        cfg.users.push_back(UserEntry{fmt::format("task{}", t), FineTuneMode::full, 8, std::nullopt});
    }
    AttackEntry a;
    a.train = cfg.train;
    cfg.users.back().attack = a;
    merging::MergeConfig sa;
    sa.algorithm = merging::Algorithm::SA;
    merging::MergeConfig ta;
    ta.algorithm = merging::Algorithm::TA;
    cfg.merges = {sa, ta};
    return cfg;
}

// ---------------------------------------------------------------------------
// Seeds

std::uint64_t Seeds::task(std::size_t t) const { return derive_seed(global, 0x1000 + t); }
std::uint64_t Seeds::pretrain() const { return derive_seed(global, 0x2000); }
std::uint64_t Seeds::user(std::size_t u) const { return derive_seed(global, 0x3000 + u); }
std::uint64_t Seeds::lora(std::size_t u) const { return derive_seed(global, 0x4000 + u); }
std::uint64_t Seeds::poison() const { return derive_seed(global, 0x5000); }
std::uint64_t Seeds::few_shot() const { return derive_seed(global, 0x6000); }
std::uint64_t Seeds::merge(std::size_t m) const { return derive_seed(global, 0x7000 + m); }

// ---------------------------------------------------------------------------
// Pipeline stages

std::map<std::string, TaskBundle> generate_tasks(const ExperimentConfig& cfg) {
    Seeds seeds{cfg.seed};
    std::map<std::string, TaskBundle> out;
    for (std::size_t t = 0; t < cfg.tasks.size(); ++t) {
        const auto& e = cfg.tasks[t];
        auto spec = tasks::make_task_spec(e.id, e.num_classes, cfg.model.input_dim, e.mean_scale, e.noise_std,
                                          e.samples_per_class, e.test_samples_per_class, seeds.task(t));
        auto data = tasks::gen_task(spec);
        out.emplace(e.id, TaskBundle{std::move(spec), std::move(data)});
    }
    return out;
}

ParamSet task_model(const ParamSet& pretrained, const std::string& task_id) {
    ParamSet out = nnet::body_of(pretrained);
    const auto prefix = head_prefix(task_id);
    const auto* w = pretrained.find(prefix + "weight");
    const auto* b = pretrained.find(prefix + "bias");
    if (w == nullptr || b == nullptr) {
        throw InvalidArgument("pre-trained model has no head for task '" + task_id + "'");
    }
    out.insert("head.weight", *w);
    out.insert("head.bias", *b);
    return out;
}

ParamSet pretrain(const ExperimentConfig& cfg, const std::map<std::string, TaskBundle>& tasks) {
    Seeds seeds{cfg.seed};
    // Body from a shared init; one head per task.
    ParamSet body = nnet::body_of(nnet::init_model(cfg.model, nnet::HeadSpec{2}, seeds.pretrain()));
    std::vector<ParamSet> heads;
    std::vector<std::vector<nnet::Example>> corpora;
    for (std::size_t t = 0; t < cfg.tasks.size(); ++t) {
        const auto& bundle = tasks.at(cfg.tasks[t].id);
        heads.push_back(nnet::init_head(cfg.model, nnet::HeadSpec{bundle.spec.num_classes},
                                        derive_seed(seeds.pretrain(), 1 + t)));
        auto spec = bundle.spec;
        spec.seed = derive_seed(spec.seed, 0x707265);
        spec.samples_per_class = cfg.pretrain.samples_per_class;
        const auto corpus = tasks::gen_task(spec).train;
        std::vector<nnet::Example> examples;
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            auto row = corpus.row(i);
            examples.push_back({{row.begin(), row.end()}, {nnet::TargetKind::labels, corpus.labels[i], 1.0}});
        }
        corpora.push_back(std::move(examples));
    }
    nnet::TrainConfig tc;
    tc.learning_rate = cfg.pretrain.learning_rate;
    tc.batch_size = cfg.pretrain.batch_size;
    tc.epochs = 1;
    // One epoch per task in turn, so the shared body serves every head.
    for (int epoch = 0; epoch < cfg.pretrain.epochs; ++epoch) {
        for (std::size_t t = 0; t < heads.size(); ++t) {
            tc.seed = derive_seed(seeds.pretrain(), 0x100000 + static_cast<std::uint64_t>(epoch) * 1000 + t);
            auto r = nnet::train(cfg.model, nnet::with_head(body, heads[t]), nullptr, corpora[t], tc);
            body = nnet::body_of(r.model);
            heads[t] = nnet::head_of(r.model);
        }
    }
    ParamSet out = body;
    for (std::size_t t = 0; t < heads.size(); ++t) {
        const auto prefix = head_prefix(cfg.tasks[t].id);
        out.insert(prefix + "weight", heads[t].at("head.weight"));
        out.insert(prefix + "bias", heads[t].at("head.bias"));
    }
    return out;
}

namespace {

std::vector<nnet::Example> labeled_examples(const tasks::Dataset& d) {
    std::vector<nnet::Example> out;
    out.reserve(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        auto row = d.row(i);
        out.push_back({{row.begin(), row.end()}, {nnet::TargetKind::labels, d.labels[i], 1.0}});
    }
    return out;
}

}  // namespace

ParamSet train_user(const ExperimentConfig& cfg, const std::map<std::string, TaskBundle>& tasks,
                    const ParamSet& pretrained, std::size_t user) {
    Seeds seeds{cfg.seed};
    const auto& entry = cfg.users.at(user);
    const auto base = task_model(pretrained, entry.task);
    const auto data = labeled_examples(tasks.at(entry.task).data.train);
    auto tc = cfg.train;
    tc.seed = seeds.user(user);
    if (entry.mode == FineTuneMode::full) {
        return nnet::train(cfg.model, base, nullptr, data, tc, {nnet::Trainable::body, {}}).model;
    }
    nnet::LoraConfig lc;
    lc.rank = entry.lora_rank;
    const auto init = nnet::init_lora(cfg.model, lc, seeds.lora(user));
    auto r = nnet::train(cfg.model, base, &init, data, tc, {nnet::Trainable::lora, {}});
    return nnet::materialize_lora(base, *r.adapters);
}

attack::AttackOutcome run_attacker(const ExperimentConfig& cfg, const std::map<std::string, TaskBundle>& tasks,
                                   const ParamSet& pretrained, std::span<const ParamSet> benign_models) {
    Seeds seeds{cfg.seed};
    const auto a_idx = cfg.attacker_index();
    const auto& user = cfg.users[a_idx];
    const auto& a = *user.attack;
    const std::string target = a.target_task.empty() ? user.task : a.target_task;

    attack::PipelineInputs in;
    in.spec = cfg.model;
    in.theta_pre = task_model(pretrained, user.task);
    in.clean = tasks.at(user.task).data.train;
    in.scenario = tasks::AttackScenario{a.scenario, user.task, target, a.target_class, a.few_shot};
    in.trigger = a.trigger.coordinates.empty() ? tasks::default_trigger(cfg.model.input_dim) : a.trigger;
    in.poison_rate = a.poison_rate;
    in.poison_seed = seeds.poison();
    if (a.scenario == tasks::ScenarioKind::off_task) {
        auto shots = tasks::few_shot_targets(tasks.at(target).spec, a.target_class, a.few_shot, seeds.few_shot());
        for (std::size_t i = 0; i < shots.size(); ++i) {
            auto row = shots.row(i);
            in.few_shot_inputs.emplace_back(row.begin(), row.end());
        }
    }
    in.prototype_weight = a.prototype_weight;
    in.lora.rank = a.lora_rank;
    in.lora.alpha = a.lora_alpha;
    in.lora_seed = seeds.lora(a_idx);
    in.train = a.train;
    in.train.seed = seeds.user(a_idx);
    in.strategy = a.strategy;
    if (in.strategy.kind == attack::StrategyKind::lobam_search &&
        in.strategy.search.mode == attack::SearchMode::target_norm && !in.strategy.search.target_norm_reference) {
        // Reference defaults to the mean benign body distance.
        const auto pre_body = nnet::body_of(pretrained);
        double sum = 0.0;
        for (const auto& m : benign_models) {
            sum += l2_distance(nnet::body_of(m), pre_body);
        }
        in.strategy.search.target_norm_reference =
            benign_models.empty() ? 0.0 : sum / static_cast<double>(benign_models.size());
    }
    return attack::run_attack_pipeline(in);
}

World prepare_world(const ExperimentConfig& cfg, unsigned jobs) {
    cfg.validate();
    World w;
    w.cfg = cfg;
    w.tasks = generate_tasks(cfg);
    spdlog::info("pre-training shared body on {} tasks", cfg.tasks.size());
    w.pretrained = pretrain(cfg, w.tasks);
    const auto a_idx = cfg.attacker_index();
    std::vector<std::size_t> benign_users;
    for (std::size_t u = 0; u < cfg.users.size(); ++u) {
        if (u != a_idx) {
            benign_users.push_back(u);
        }
    }
    spdlog::info("fine-tuning {} benign users", benign_users.size());
    auto trained = run_pool<ParamSet>(benign_users.size(), jobs, [&](std::size_t i) {
        spdlog::debug("training user {}", benign_users[i]);
        return train_user(cfg, w.tasks, w.pretrained, benign_users[i]);
    });
    spdlog::info("running attack pipeline for user {}", a_idx);
    w.attack = run_attacker(cfg, w.tasks, w.pretrained, trained);
    w.user_models.resize(cfg.users.size());
    for (std::size_t i = 0; i < benign_users.size(); ++i) {
        w.user_models[benign_users[i]] = std::move(trained[i]);
    }
    w.user_models[a_idx] = w.attack.theta_benign;
    return w;
}

merging::AdaMergingContext adamerging_context(const ExperimentConfig& cfg,
                                              const std::map<std::string, TaskBundle>& tasks,
                                              const ParamSet& pretrained) {
    merging::AdaMergingContext ctx;
    ctx.spec = cfg.model;
    for (const auto& t : distinct_tasks(cfg)) {
        ctx.heads.push_back(nnet::head_of(task_model(pretrained, t)));
        ctx.unlabeled.push_back(tasks.at(t).data.test);
    }
    return ctx;
}

MergedMetrics evaluate_merged(const ExperimentConfig& cfg, const std::map<std::string, TaskBundle>& tasks,
                              const ParamSet& pretrained, const ParamSet& merged_body) {
    const auto a_idx = cfg.attacker_index();
    const auto& a = *cfg.users[a_idx].attack;
    const std::string target = a.target_task.empty() ? cfg.users[a_idx].task : a.target_task;
    const auto trigger = a.trigger.coordinates.empty() ? tasks::default_trigger(cfg.model.input_dim) : a.trigger;
    MergedMetrics m;
    m.asr_percent = eval::asr(cfg.model, merged_body, nnet::head_of(task_model(pretrained, target)),
                              tasks.at(target).data.test, trigger, a.target_class);
    for (const auto& t : distinct_tasks(cfg)) {
        m.clean_accuracy[t] = eval::clean_accuracy(cfg.model, merged_body, nnet::head_of(task_model(pretrained, t)),
                                                   tasks.at(t).data.test);
    }
    return m;
}

MergedMetrics evaluate_merged(const World& world, const ParamSet& merged_body) {
    return evaluate_merged(world.cfg, world.tasks, world.pretrained, merged_body);
}

namespace {

std::vector<Delta> body_deltas(const World& world, const ParamSet& upload, const ParamSet& pre_body) {
    const auto a_idx = world.cfg.attacker_index();
    std::vector<Delta> deltas;
    for (std::size_t u = 0; u < world.user_models.size(); ++u) {
        const auto& m = u == a_idx ? upload : world.user_models[u];
        deltas.push_back(delta(nnet::body_of(m), pre_body));
    }
    return deltas;
}

std::size_t merge_index(const ExperimentConfig& cfg, const merging::MergeConfig& m) {
    for (std::size_t i = 0; i < cfg.merges.size(); ++i) {
        if (cfg.merges[i].algorithm == m.algorithm) {
            return i;
        }
    }
    return cfg.merges.size();
}

}  // namespace

eval::AttackReport evaluate_upload(const World& world, const ParamSet& upload, const std::string& strategy,
                                   double lambda, const merging::MergeConfig& merge) {
    const auto& cfg = world.cfg;
    Seeds seeds{cfg.seed};
    const auto pre_body = nnet::body_of(world.pretrained);
    auto mc = merge;
    mc.seed = seeds.merge(merge_index(cfg, merge));
    const auto ctx = mc.algorithm == merging::Algorithm::AdaMerging
                         ? std::optional(adamerging_context(cfg, world.tasks, world.pretrained))
                         : std::nullopt;
    const auto* ctx_ptr = ctx ? &*ctx : nullptr;

    const auto a_idx = cfg.attacker_index();
    auto attacked = merging::merge(pre_body, body_deltas(world, upload, pre_body), mc, ctx_ptr);
    auto honest = merging::merge(pre_body, body_deltas(world, world.attack.theta_benign, pre_body), mc, ctx_ptr);
    const auto attacked_metrics = evaluate_merged(world, attacked.merged);
    const auto honest_metrics = evaluate_merged(world, honest.merged);

    std::vector<eval::LabeledModel> models;
    for (std::size_t u = 0; u < world.user_models.size(); ++u) {
        if (u != a_idx) {
            models.push_back({fmt::format("user{}", u), eval::ModelRole::benign, nnet::body_of(world.user_models[u])});
        }
    }
    models.push_back({"upload", eval::ModelRole::upload, nnet::body_of(upload)});
    const auto distances = eval::distance_report(pre_body, models, cfg.distance_threshold);

    eval::AttackReport r;
    r.asr_percent = attacked_metrics.asr_percent;
    r.clean_accuracy_per_task = attacked_metrics.clean_accuracy;
    r.asr_no_attack_percent = honest_metrics.asr_percent;
    r.clean_accuracy_no_attack = honest_metrics.clean_accuracy;
    for (const auto& row : distances.rows) {
        if (row.role == eval::ModelRole::benign) {
            r.benign_distances.push_back(row.distance);
        } else {
            r.upload_distance = row.distance;
            r.upload_flagged = row.flagged;
        }
    }
    r.merge_algorithm = merging::to_string(mc.algorithm);
    r.strategy = strategy;
    r.lambda_used = lambda;
    r.seed = cfg.seed;
    r.merge_coefficients = attacked.coefficients;
    r.validate();
    return r;
}

namespace {

eval::DistanceReport world_distances(const World& world, const ParamSet& upload) {
    const auto a_idx = world.cfg.attacker_index();
    std::vector<eval::LabeledModel> models;
    for (std::size_t u = 0; u < world.user_models.size(); ++u) {
        if (u != a_idx) {
            models.push_back({fmt::format("user{}", u), eval::ModelRole::benign, nnet::body_of(world.user_models[u])});
        }
    }
    models.push_back({"upload", eval::ModelRole::upload, nnet::body_of(upload)});
    return eval::distance_report(nnet::body_of(world.pretrained), models, world.cfg.distance_threshold);
}

}  // namespace

ExperimentResult run_experiment(const World& world) {
    const auto& cfg = world.cfg;
    ExperimentResult result;
    result.lambda_used = world.attack.lambda_used;
    result.search_iterations = world.attack.search_iterations;
    result.distances = world_distances(world, world.attack.upload);
    const auto strategy = attack::to_string(cfg.attack().strategy.kind);
    for (const auto& m : cfg.merges) {
        spdlog::info("merging with {}", merging::to_string(m.algorithm));
        result.reports.push_back(evaluate_upload(world, world.attack.upload, strategy, world.attack.lambda_used, m));
    }
    return result;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, unsigned jobs) {
    return run_experiment(prepare_world(cfg, jobs));
}

ordered_json result_to_json(const ExperimentResult& result) {
    ordered_json j;
    j["lambda_used"] = result.lambda_used;
    j["search_iterations"] = result.search_iterations;
    ordered_json reports = ordered_json::array();
    for (const auto& r : result.reports) {
        reports.push_back(eval::to_json(r));
    }
    j["reports"] = reports;
    return j;
}

void write_outputs(const ExperimentConfig& cfg, const World& world, const ExperimentResult& result,
                   const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "checkpoints");
    auto open = [&](const fs::path& p) {
        std::ofstream os(p, std::ios::binary);
        if (!os) {
            throw FormatError("cannot write '" + p.string() + "'");
        }
        return os;
    };
    {
        auto os = open(dir / "reports.json");
        os << result_to_json(result).dump(2) << '\n';
    }
    {
        auto os = open(dir / "reports.csv");
        eval::write_report_csv(os, result.reports);
    }
    {
        auto os = open(dir / "distances.csv");
        eval::write_distance_csv(os, result.distances);
    }
    {
        Seeds seeds{cfg.seed};
        ordered_json manifest;
        manifest["tool"] = "mergeforge";
        manifest["version"] = kVersion;
        manifest["config_hash"] = config_hash(cfg);
        manifest["seed"] = cfg.seed;
        manifest["derived_seeds"] = {{"pretrain", seeds.pretrain()}, {"poison", seeds.poison()},
                                     {"few_shot", seeds.few_shot()}};
        manifest["config"] = config_to_json(cfg);
        auto os = open(dir / "manifest.json");
        os << manifest.dump(2) << '\n';
    }
    save_checkpoint(dir / "checkpoints" / "pretrained.json", Checkpoint{world.pretrained, std::nullopt});
    save_checkpoint(dir / "checkpoints" / "upload.json", Checkpoint{world.attack.upload, std::nullopt});
    save_checkpoint(dir / "checkpoints" / "malicious_lora.json", world.attack.malicious_adapters.to_checkpoint());
    save_checkpoint(dir / "checkpoints" / "benign_lora.json", world.attack.benign_adapters.to_checkpoint());

    std::vector<std::pair<std::string, ParamSet>> exported;
    const auto a_idx = cfg.attacker_index();
    for (std::size_t u = 0; u < world.user_models.size(); ++u) {
        if (u != a_idx) {
            exported.emplace_back(fmt::format("user{}", u), nnet::body_of(world.user_models[u]));
        }
    }
    exported.emplace_back("upload", nnet::body_of(world.attack.upload));
    eval::export_layers(exported, dir / "layers");
}

SweepParam parse_sweep_param(std::string_view name) {
    if (name == "lambda") return SweepParam::lambda;
    if (name == "r" || name == "rank") return SweepParam::rank;
    if (name == "N" || name == "n") return SweepParam::num_models;
    throw InvalidArgument(fmt::format("unknown sweep parameter '{}'", name));
}

std::vector<SweepRow> sweep(const ExperimentConfig& cfg, SweepParam param, std::span<const double> values, bool naive,
                            unsigned jobs) {
    std::vector<SweepRow> rows;
    auto mean_acc = [](const eval::AttackReport& r) {
        double s = 0.0;
        for (const auto& [k, v] : r.clean_accuracy_per_task) s += v;
        return s / static_cast<double>(r.clean_accuracy_per_task.size());
    };
    auto push = [&](const char* name, double value, const eval::AttackReport& r) {
        rows.push_back({name, value, r.merge_algorithm, r.strategy, r.lambda_used, r.asr_percent, mean_acc(r),
                        r.upload_distance});
    };
    if (param == SweepParam::lambda) {
        const auto world = prepare_world(cfg, jobs);
        for (double lambda : values) {
            const auto upload = naive ? attack::naive_scale(world.attack.theta_malicious, lambda)
                                      : attack::construct_upload(world.attack.theta_malicious,
                                                                 world.attack.theta_benign, lambda);
            for (const auto& m : cfg.merges) {
                push("lambda", lambda, evaluate_upload(world, upload, naive ? "naive_scale" : "lobam_fixed", lambda, m));
            }
        }
        return rows;
    }
    for (double value : values) {
        auto c = cfg;
        if (param == SweepParam::rank) {
            const auto a_idx = c.attacker_index();
            c.users[a_idx].attack->lora_rank = static_cast<int>(value);
        } else {
            const auto n = static_cast<std::size_t>(value);
            const auto a_idx = c.attacker_index();
            std::vector<UserEntry> users;
            for (std::size_t u = 0; u < c.users.size() && users.size() + 1 < n; ++u) {
                if (u != a_idx) users.push_back(c.users[u]);
            }
            if (n < 2 || users.size() + 1 != n) {
                throw ConfigError(fmt::format("sweep: N = {} needs {} benign users in the config", value, n - 1));
            }
            users.push_back(c.users[a_idx]);
            c.users = std::move(users);
        }
        const auto world = prepare_world(c, jobs);
        const auto strategy = attack::to_string(c.attack().strategy.kind);
        for (const auto& m : c.merges) {
            push(param == SweepParam::rank ? "r" : "N", value,
                 evaluate_upload(world, world.attack.upload, strategy, world.attack.lambda_used, m));
        }
    }
    return rows;
}

void write_sweep_csv(std::ostream& os, std::span<const SweepRow> rows) {
    os << "param,value,merge_algorithm,strategy,lambda_used,asr_percent,mean_clean_accuracy,upload_distance\n";
    for (const auto& r : rows) {
        os << r.param << ',' << format_double(r.value) << ',' << r.merge_algorithm << ',' << r.strategy << ','
           << format_double(r.lambda_used) << ',' << format_double(r.asr_percent) << ','
           << format_double(r.mean_clean_accuracy) << ',' << format_double(r.upload_distance) << '\n';
    }
}

}  // namespace mergeforge::experiment
