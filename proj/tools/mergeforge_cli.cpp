// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "mergeforge/checkpoint.hpp"
#include "mergeforge/errors.hpp"
#include "mergeforge/experiment.hpp"
#include "mergeforge/theory.hpp"

namespace fs = std::filesystem;
namespace ex = mergeforge::experiment;
using mergeforge::Checkpoint;
using mergeforge::ParamSet;

namespace {

struct Globals {
    std::string config_path;
    std::string preset = "default";
    std::string out;
    std::optional<std::uint64_t> seed;
    unsigned jobs = 1;
    std::string log_level;
};

std::string env_or(const char* name, const std::string& fallback) {
    const char* v = std::getenv(name);
    return v != nullptr && *v != '\0' ? std::string(v) : fallback;
}

void setup_logging(const Globals& g) {
    // Logs go to stderr so stdout stays machine-readable.
    auto logger = spdlog::stderr_color_mt("mergeforge");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");
    const auto level = g.log_level.empty() ? env_or("MERGEFORGE_LOG", "info") : g.log_level;
    if (level == "error") {
        spdlog::set_level(spdlog::level::err);
    } else if (level == "debug") {
        spdlog::set_level(spdlog::level::debug);
    } else if (level == "info") {
        spdlog::set_level(spdlog::level::info);
    } else {
        throw mergeforge::ConfigError("--log: expected error, info or debug");
    }
}

ex::ExperimentConfig resolve_config(const Globals& g) {
    ex::ExperimentConfig cfg;
    if (!g.config_path.empty()) {
        cfg = ex::load_config(g.config_path);
    } else if (g.preset == "toy") {
        cfg = ex::toy_config(1);
    } else {
        cfg = ex::default_config();
    }
    if (g.seed) {
        cfg.seed = *g.seed;
    }
    if (!g.out.empty()) {
        cfg.output_dir = g.out;
    } else {
        cfg.output_dir = env_or("MERGEFORGE_OUT", cfg.output_dir);
    }
    cfg.validate();
    return cfg;
}

fs::path ckpt_dir(const ex::ExperimentConfig& cfg) { return fs::path(cfg.output_dir) / "checkpoints"; }

fs::path user_ckpt(const ex::ExperimentConfig& cfg, std::size_t u) {
    return ckpt_dir(cfg) / fmt::format("user{}.json", u);
}

ParamSet load_params(const fs::path& p) {
    if (!fs::exists(p)) {
        throw mergeforge::InvalidArgument("missing checkpoint '" + p.string() + "'; run the earlier stage first");
    }
    return mergeforge::load_checkpoint(p).layers;
}

void write_text(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream os(p, std::ios::binary);
    if (!os) {
        throw mergeforge::FormatError("cannot write '" + p.string() + "'");
    }
    os << text;
}

std::vector<std::size_t> benign_users(const ex::ExperimentConfig& cfg) {
    std::vector<std::size_t> out;
    for (std::size_t u = 0; u < cfg.users.size(); ++u) {
        if (u != cfg.attacker_index()) out.push_back(u);
    }
    return out;
}

// Rebuilds the world from the checkpoints written by the staged subcommands.
ex::World load_world(const ex::ExperimentConfig& cfg) {
    ex::World w;
    w.cfg = cfg;
    w.tasks = ex::generate_tasks(cfg);
    w.pretrained = load_params(ckpt_dir(cfg) / "pretrained.json");
    w.user_models.resize(cfg.users.size());
    for (auto u : benign_users(cfg)) {
        w.user_models[u] = load_params(user_ckpt(cfg, u));
    }
    const auto dir = ckpt_dir(cfg);
    w.attack.theta_malicious = load_params(dir / "theta_malicious.json");
    w.attack.theta_benign = load_params(dir / "theta_benign.json");
    w.attack.upload = load_params(dir / "upload.json");
    w.attack.malicious_adapters =
        mergeforge::nnet::LoraAdapters::from_checkpoint(mergeforge::load_checkpoint(dir / "malicious_lora.json"));
    w.attack.benign_adapters =
        mergeforge::nnet::LoraAdapters::from_checkpoint(mergeforge::load_checkpoint(dir / "benign_lora.json"));
    std::ifstream is(dir / "attack.json");
    const auto meta = nlohmann::json::parse(is);
    w.attack.lambda_used = meta.at("lambda_used").get<double>();
    w.attack.search_iterations = meta.at("search_iterations").get<int>();
    w.user_models[cfg.attacker_index()] = w.attack.theta_benign;
    return w;
}

void cmd_gen_tasks(const ex::ExperimentConfig& cfg) {
    const auto bundles = ex::generate_tasks(cfg);
    const auto dir = fs::path(cfg.output_dir) / "tasks";
    fs::create_directories(dir);
    for (const auto& [id, b] : bundles) {
        std::ofstream train(dir / (id + ".train.csv"), std::ios::binary);
        mergeforge::tasks::write_csv(train, b.data.train);
        std::ofstream test(dir / (id + ".test.csv"), std::ios::binary);
        mergeforge::tasks::write_csv(test, b.data.test);
        spdlog::info("task {}: {} train / {} test samples", id, b.data.train.size(), b.data.test.size());
    }
}

void cmd_train(const ex::ExperimentConfig& cfg, bool pretrain, const std::vector<std::size_t>& users) {
    const auto bundles = ex::generate_tasks(cfg);
    const auto pre_path = ckpt_dir(cfg) / "pretrained.json";
    if (pretrain) {
        fs::create_directories(ckpt_dir(cfg));
        mergeforge::save_checkpoint(pre_path, Checkpoint{ex::pretrain(cfg, bundles), std::nullopt});
        spdlog::info("wrote {}", pre_path.string());
    }
    if (users.empty()) {
        return;
    }
    const auto pretrained = load_params(pre_path);
    for (auto u : users) {
        if (u >= cfg.users.size()) {
            throw mergeforge::IndexOutOfRange(fmt::format("--user {}: only {} users configured", u, cfg.users.size()));
        }
        if (cfg.users[u].attack) {
            throw mergeforge::InvalidArgument(fmt::format("--user {} is the attacker; use the attack subcommand", u));
        }
        mergeforge::save_checkpoint(user_ckpt(cfg, u),
                                    Checkpoint{ex::train_user(cfg, bundles, pretrained, u), std::nullopt});
        spdlog::info("wrote {}", user_ckpt(cfg, u).string());
    }
}

void cmd_attack(const ex::ExperimentConfig& cfg) {
    const auto bundles = ex::generate_tasks(cfg);
    const auto pretrained = load_params(ckpt_dir(cfg) / "pretrained.json");
    std::vector<ParamSet> benign;
    for (auto u : benign_users(cfg)) {
        benign.push_back(load_params(user_ckpt(cfg, u)));
    }
    const auto out = ex::run_attacker(cfg, bundles, pretrained, benign);
    const auto dir = ckpt_dir(cfg);
    mergeforge::save_checkpoint(dir / "theta_malicious.json", Checkpoint{out.theta_malicious, std::nullopt});
    mergeforge::save_checkpoint(dir / "theta_benign.json", Checkpoint{out.theta_benign, std::nullopt});
    mergeforge::save_checkpoint(dir / "upload.json", Checkpoint{out.upload, std::nullopt});
    mergeforge::save_checkpoint(dir / "malicious_lora.json", out.malicious_adapters.to_checkpoint());
    mergeforge::save_checkpoint(dir / "benign_lora.json", out.benign_adapters.to_checkpoint());
    nlohmann::ordered_json meta;
    meta["strategy"] = mergeforge::attack::to_string(cfg.attack().strategy.kind);
    meta["lambda_used"] = out.lambda_used;
    meta["search_iterations"] = out.search_iterations;
    meta["poisoned_rows"] = out.poisoned_rows.size();
    write_text(dir / "attack.json", meta.dump(2) + "\n");
    spdlog::info("upload built with lambda {} after {} search iterations", out.lambda_used, out.search_iterations);
}

void cmd_merge(const ex::ExperimentConfig& cfg) {
    const auto world = load_world(cfg);
    const auto pre_body = mergeforge::nnet::body_of(world.pretrained);
    std::vector<mergeforge::Delta> deltas;
    for (std::size_t u = 0; u < cfg.users.size(); ++u) {
        const auto& m = u == cfg.attacker_index() ? world.attack.upload : world.user_models[u];
        deltas.push_back(mergeforge::delta(mergeforge::nnet::body_of(m), pre_body));
    }
    ex::Seeds seeds{cfg.seed};
    for (std::size_t i = 0; i < cfg.merges.size(); ++i) {
        auto mc = cfg.merges[i];
        mc.seed = seeds.merge(i);
        std::optional<mergeforge::merging::AdaMergingContext> ctx;
        if (mc.algorithm == mergeforge::merging::Algorithm::AdaMerging) {
            ctx = ex::adamerging_context(cfg, world.tasks, world.pretrained);
        }
        const auto outcome = mergeforge::merging::merge(pre_body, deltas, mc, ctx ? &*ctx : nullptr);
        const auto path = ckpt_dir(cfg) / fmt::format("merged_{}.json", mergeforge::merging::to_string(mc.algorithm));
        mergeforge::save_checkpoint(path, Checkpoint{outcome.merged, std::nullopt});
        spdlog::info("wrote {}", path.string());
    }
}

void cmd_evaluate(const ex::ExperimentConfig& cfg) {
    const auto world = load_world(cfg);
    const auto result = ex::run_experiment(world);
    ex::write_outputs(cfg, world, result, cfg.output_dir);
    std::cout << ex::result_to_json(result).dump(2) << '\n';
}

void cmd_full(const ex::ExperimentConfig& cfg, unsigned jobs) {
    const auto world = ex::prepare_world(cfg, jobs);
    const auto result = ex::run_experiment(world);
    ex::write_outputs(cfg, world, result, cfg.output_dir);
    std::cout << ex::result_to_json(result).dump(2) << '\n';
}

void cmd_theorem(std::size_t instances, double margin, std::uint64_t seed, std::size_t dim, std::size_t models,
                 const std::string& out) {
    const auto r = mergeforge::theory::monte_carlo(instances, margin, seed, dim, models);
    nlohmann::ordered_json j;
    j["instances"] = r.instances;
    j["pass_count"] = r.pass_count;
    j["min_margin_observed"] = r.min_margin_observed;
    const auto text = j.dump(2) + "\n";
    if (!out.empty()) {
        write_text(fs::path(out) / "theorem_check.json", text);
    }
    std::cout << text;
}

std::vector<double> parse_values(const std::string& text) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto comma = text.find(',', pos);
        const auto item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw mergeforge::ConfigError("--values: cannot parse '" + item + "'");
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mergeforge: model-merging backdoor simulator"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
    app.add_option("--preset", g.preset, "Built-in config when --config is absent")
        ->check(CLI::IsMember({"default", "toy"}));
    app.add_option("--out", g.out, "Output directory (env MERGEFORGE_OUT)");
    app.add_option("--seed", g.seed, "Override the config seed");
    app.add_option("--jobs", g.jobs, "Worker threads; 0 = hardware concurrency");
    app.add_option("--log", g.log_level, "error, info or debug (env MERGEFORGE_LOG)");

    app.add_subcommand("gen-tasks", "Write the synthetic task datasets as CSV");

    auto* train = app.add_subcommand("train", "Pre-train the shared model or fine-tune benign users");
    bool do_pretrain = false;
    std::vector<std::size_t> train_users;
    bool all_users = false;
    train->add_flag("--pretrain", do_pretrain, "Run the multi-task pre-training stage");
    train->add_option("--user", train_users, "Benign user index to fine-tune (repeatable)");
    train->add_flag("--all-users", all_users, "Fine-tune every benign user");

    app.add_subcommand("attack", "Train the attacker's LoRA adapters and build the upload");
    app.add_subcommand("merge", "Merge the uploaded models with every configured algorithm");
    app.add_subcommand("evaluate", "Evaluate the staged checkpoints and write reports");
    app.add_subcommand("full-experiment", "Run every stage end to end");

    auto* theorem = app.add_subcommand("theorem-check", "Monte-Carlo check of the amplification bound");
    std::size_t instances = 100;
    double margin = 1.5;
    std::uint64_t th_seed = 0;
    std::size_t th_dim = 16;
    std::size_t th_models = 4;
    theorem->add_option("--instances", instances, "Random instances")->check(CLI::PositiveNumber);
    theorem->add_option("--margin", margin, "lambda = margin * threshold; must exceed 1");
    theorem->add_option("--dim", th_dim, "Parameter dimension")->check(CLI::PositiveNumber);
    theorem->add_option("--models", th_models, "Number of merged models N")->check(CLI::Range(2, 1000));

    auto* sweep = app.add_subcommand("sweep", "Sweep lambda, LoRA rank or N");
    std::string sweep_param;
    std::string sweep_values;
    bool naive = false;
    sweep->add_option("--param", sweep_param, "lambda, r or N")->required();
    sweep->add_option("--values", sweep_values, "Comma-separated values")->required();
    sweep->add_flag("--naive", naive, "Scale the malicious model directly (lambda sweep only)");

    CLI11_PARSE(app, argc, argv);

    try {
        setup_logging(g);
        if (theorem->parsed()) {
            th_seed = g.seed.value_or(0);
            cmd_theorem(instances, margin, th_seed, th_dim, th_models, g.out);
            return 0;
        }
        const auto cfg = resolve_config(g);
        spdlog::debug("config hash {}", ex::config_hash(cfg));
        if (app.got_subcommand("gen-tasks")) {
            cmd_gen_tasks(cfg);
        } else if (train->parsed()) {
            if (all_users) {
                train_users = benign_users(cfg);
            }
            if (!do_pretrain && train_users.empty()) {
                throw mergeforge::InvalidArgument("train: pass --pretrain, --user or --all-users");
            }
            cmd_train(cfg, do_pretrain, train_users);
        } else if (app.got_subcommand("attack")) {
            cmd_attack(cfg);
        } else if (app.got_subcommand("merge")) {
            cmd_merge(cfg);
        } else if (app.got_subcommand("evaluate")) {
            cmd_evaluate(cfg);
        } else if (app.got_subcommand("full-experiment")) {
            cmd_full(cfg, g.jobs);
        } else if (sweep->parsed()) {
            const auto values = parse_values(sweep_values);
            const auto rows = ex::sweep(cfg, ex::parse_sweep_param(sweep_param), values, naive, g.jobs);
            fs::create_directories(cfg.output_dir);
            std::ofstream os(fs::path(cfg.output_dir) / "sweep.csv", std::ios::binary);
            ex::write_sweep_csv(os, rows);
            ex::write_sweep_csv(std::cout, rows);
        }
    } catch (const mergeforge::ConfigError& e) {
        spdlog::error("config error: {}", e.what());
        return 2;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 0;
}
