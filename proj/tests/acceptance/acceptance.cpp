// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <fmt/format.h>
#include <spdlog/spdlog.h>
#include <sys/wait.h>

#include "mergeforge/attack.hpp"
#include "mergeforge/experiment.hpp"
#include "mergeforge/merging.hpp"
#include "mergeforge/theory.hpp"
#include "support/gradcheck.hpp"
#include "support/helpers.hpp"

using namespace mergeforge;
namespace ex = mergeforge::experiment;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void report(int id, const std::function<Outcome()>& body) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!o.pass) ++failures;
    fmt::print("criterion {}: {} ({:.1f}s) {}\n", id, o.pass ? "PASS" : "FAIL", secs, o.detail);
    std::fflush(stdout);
}

// ---------------------------------------------------------------------------

Outcome merging_oracles() {
    std::mt19937_64 rng(2024);
    double worst = 0.0;
    constexpr int kInstances = 60;
    for (int trial = 0; trial < kInstances; ++trial) {
        const auto layout = mftest::random_layout(rng, 4, 32);
        const auto n = std::uniform_int_distribution<int>(1, 6)(rng);
        std::vector<Delta> ds;
        std::vector<mftest::Layers> ref;
        for (int m = 0; m < n; ++m) {
            ds.push_back(mftest::random_map<DeltaTag>(rng, layout));
            ref.push_back(mftest::to_layers(ds.back()));
        }
        const double k = std::uniform_real_distribution<double>(0.1, 1.5)(rng);
        const double keep = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
        const double alpha = std::uniform_real_distribution<double>(0.1, 2.0)(rng);
        worst = std::max(worst, mftest::max_abs_diff(mftest::to_layers(merging::simple_average(ds)),
                                                     mftest::ref_simple_average(ref)));
        worst = std::max(worst, mftest::max_abs_diff(mftest::to_layers(merging::task_arithmetic(ds, k)),
                                                     mftest::ref_task_arithmetic(ref, k)));
        worst = std::max(worst, mftest::max_abs_diff(mftest::to_layers(merging::ties_merge(ds, keep, alpha)),
                                                     mftest::ref_ties(ref, keep, alpha)));
    }
    return {worst <= 1e-6, fmt::format("{} instances x SA/TA/Ties, max abs error {:.3g}", kInstances, worst)};
}

Outcome gradients() {
    double worst_full = 0.0;
    double worst_lora = 0.0;
    std::size_t entries = 0;
    constexpr int kCases = 12;
    for (std::uint64_t seed = 1; seed <= kCases; ++seed) {
        const auto c = mftest::random_grad_case(seed);
        const auto full = mftest::gradient_check(c, nnet::Trainable::all, 1e-3);
        const auto lora = mftest::gradient_check(c, nnet::Trainable::lora, 1e-3);
        worst_full = std::max(worst_full, full.worst_rel_error);
        worst_lora = std::max(worst_lora, lora.worst_rel_error);
        entries += full.entries + lora.entries;
    }
    return {worst_full < 1e-4 && worst_lora < 1e-4,
            fmt::format("{} cases, {} entries, worst rel error full {:.3g} lora {:.3g}", kCases, entries, worst_full,
                        worst_lora)};
}

Outcome lora_algebra() {
    double worst = 0.0;
    constexpr int kCases = 25;
    for (std::uint64_t seed = 100; seed < 100 + kCases; ++seed) {
        const auto c = mftest::random_grad_case(seed);
        const auto merged = nnet::materialize_lora(c.model, c.adapters);
        for (const auto& x : c.inputs) {
            const auto a = nnet::forward(c.spec, c.model, &c.adapters, x);
            const auto b = nnet::forward(c.spec, merged, nullptr, x);
            for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
        }
    }
    // Train adapters and confirm the base weights are untouched.
    const auto c = mftest::random_grad_case(7);
    std::vector<nnet::Example> data;
    for (std::size_t i = 0; i < c.inputs.size(); ++i) data.push_back({c.inputs[i], c.targets[i]});
    nnet::TrainConfig tc;
    tc.epochs = 5;
    tc.batch_size = 2;
    tc.seed = 3;
    const auto trained = nnet::train(c.spec, c.model, &c.adapters, data, tc, {nnet::Trainable::lora, {c.inputs[0]}});
    const bool frozen = bit_identical(trained.model, c.model);
    const bool moved = trained.adapters && !bit_identical(trained.adapters->factors, c.adapters.factors);
    return {worst <= 1e-5 && frozen && moved,
            fmt::format("{} cases, max forward gap {:.3g}; base bit-identical after training: {}; adapters moved: {}",
                        kCases, worst, frozen, moved)};
}

Outcome theorem() {
    const auto mc = theory::monte_carlo(100, 1.1, 11);
    double worst_equal = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        auto c = theory::random_case(16, 6, derive_seed(11, seed));
        c.instance.lambda = 1.0;
        const auto r = theory::evaluate_theorem(c.instance, c.surrogate);
        worst_equal = std::max(worst_equal, std::abs(r.g_x - r.g_y));
    }
    return {mc.pass_count == 100 && worst_equal <= 1e-9,
            fmt::format("lambda = 1.1 x threshold: {}/{} with g(X) > g(Y), min gain {:.3g}; lambda = 1: max "
                        "|g(X) - g(Y)| = {:.3g}",
                        mc.pass_count, mc.instances, mc.min_margin_observed, worst_equal)};
}

// ---------------------------------------------------------------------------
// Toy experiment shared by criteria 5-8.

struct ToyRuns {
    // strategy label -> per (seed, merge) reports
    std::map<std::string, std::vector<eval::AttackReport>> by_strategy;
    std::vector<double> search_lambdas;
};

double mean_asr(const std::vector<eval::AttackReport>& rs) {
    double s = 0.0;
    for (const auto& r : rs) s += r.asr_percent;
    return s / static_cast<double>(rs.size());
}

ToyRuns run_toy() {
    ToyRuns runs;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        const auto cfg = ex::toy_config(seed);
        const auto world = ex::prepare_world(cfg, 0);
        const auto& a = world.attack;
        runs.search_lambdas.push_back(a.lambda_used);
        for (const auto& m : cfg.merges) {
            auto add = [&](const std::string& label, const ParamSet& upload, const std::string& strategy, double lambda) {
                runs.by_strategy[label].push_back(ex::evaluate_upload(world, upload, strategy, lambda, m));
            };
            add("lobam_search", a.upload, "lobam_search", a.lambda_used);
            add("direct", a.theta_malicious, "direct", 1.0);
            add("naive3", attack::naive_scale(a.theta_malicious, 3.0), "naive_scale", 3.0);
            for (double l : {1.0, 3.0, 3.5, 4.5, 6.0}) {
                add(fmt::format("lobam{}", l), attack::construct_upload(a.theta_malicious, a.theta_benign, l),
                    "lobam_fixed", l);
            }
        }
    }
    return runs;
}

Outcome directional(const ToyRuns& t) {
    const double lobam = mean_asr(t.by_strategy.at("lobam_search"));
    const double direct = mean_asr(t.by_strategy.at("direct"));
    return {lobam - direct >= 30.0 && lobam >= 80.0,
            fmt::format("3 seeds x SA/TA: mean ASR LoBAM (lambda {:.3f}/{:.3f}/{:.3f}) {:.2f}% vs direct {:.2f}%, "
                        "gap {:.2f} points",
                        t.search_lambdas[0], t.search_lambdas[1], t.search_lambdas[2], lobam, direct,
                        lobam - direct)};
}

Outcome utility(const ToyRuns& t) {
    // Per (merge, task): clean accuracy averaged over the seeds, attacked vs
    // no-attack merge.
    std::map<std::string, std::pair<double, double>> sums;
    std::map<std::string, int> counts;
    double worst_single = 0.0;
    for (const auto& r : t.by_strategy.at("lobam_search")) {
        for (const auto& [task, acc] : r.clean_accuracy_per_task) {
            const double honest = r.clean_accuracy_no_attack.at(task);
            const auto key = r.merge_algorithm + "/" + task;
            sums[key].first += acc;
            sums[key].second += honest;
            ++counts[key];
            worst_single = std::max(worst_single, honest - acc);
        }
    }
    double worst = 0.0;
    std::string worst_key;
    for (const auto& [key, s] : sums) {
        const double drop = (s.second - s.first) / counts[key];
        if (drop > worst) {
            worst = drop;
            worst_key = key;
        }
    }
    return {worst <= 0.05,
            fmt::format("largest seed-mean clean-accuracy drop {:.2f} points ({}); largest single-seed drop {:.2f} "
                        "points",
                        100.0 * worst, worst_key.empty() ? "none" : worst_key, 100.0 * worst_single)};
}

Outcome naive_ablation(const ToyRuns& t) {
    const double naive = mean_asr(t.by_strategy.at("naive3"));
    const double direct = mean_asr(t.by_strategy.at("direct"));
    const double lobam3 = mean_asr(t.by_strategy.at("lobam3"));
    return {naive < direct && naive < lobam3,
            fmt::format("mean ASR naive(3) {:.2f}% vs direct {:.2f}% (below: {}) and LoBAM(3) {:.2f}% (below: {})", naive,
                        direct, naive < direct, lobam3, naive < lobam3)};
}

Outcome lambda_sweep(const ToyRuns& t) {
    const double a1 = mean_asr(t.by_strategy.at("lobam1"));
    const double a35 = mean_asr(t.by_strategy.at("lobam3.5"));
    const double a45 = mean_asr(t.by_strategy.at("lobam4.5"));
    const double a6 = mean_asr(t.by_strategy.at("lobam6"));
    return {a1 < a35 && std::abs(a45 - a6) <= 5.0,
            fmt::format("mean ASR lambda 1: {:.2f}%, 3.5: {:.2f}%, 4.5: {:.2f}%, 6: {:.2f}%", a1, a35, a45, a6)};
}

// ---------------------------------------------------------------------------

Outcome search_convergence() {
    // theta_b = 0 makes ||upload(lambda)|| = lambda ||theta_m||, strictly increasing.
    ParamSet m;
    m.insert("w", LayerTensor({3}, {1.0f, -2.0f, 0.5f}));
    ParamSet b;
    b.insert("w", LayerTensor({3}, {0.0f, 0.0f, 0.0f}));
    const auto r = attack::binary_search_lambda(m, b, attack::LambdaSearchConfig{});
    const int bound = static_cast<int>(std::ceil(std::log2(6.0 / 0.01)));
    return {std::abs(r.lambda - 6.0) <= 0.02 && r.iterations <= bound,
            fmt::format("lambda {:.6f} after {} iterations (bound {})", r.lambda, r.iterations, bound)};
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

Outcome determinism() {
    const auto root = fs::temp_directory_path() / fmt::format("mergeforge_accept_{}", std::random_device{}());
    fs::create_directories(root);
    std::vector<fs::path> outs{root / "run1", root / "run2"};
    for (const auto& o : outs) {
        const auto cmd = fmt::format("'{}' --preset toy --jobs 0 --log error --out '{}' full-experiment > /dev/null",
                                     MERGEFORGE_CLI_PATH, o.string());
        const int status = std::system(cmd.c_str());
        if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
            fs::remove_all(root);
            return {false, "full-experiment exited abnormally"};
        }
    }
    std::vector<std::string> differing;
    std::size_t bytes = 0;
    for (const char* f : {"reports.json", "reports.csv", "distances.csv"}) {
        const auto a = slurp(outs[0] / f);
        bytes += a.size();
        if (a.empty() || a != slurp(outs[1] / f)) differing.push_back(f);
    }
    fs::remove_all(root);
    return {differing.empty(), differing.empty() ? fmt::format("reports identical across two runs ({} bytes)", bytes)
                                                 : fmt::format("differing: {}", fmt::join(differing, ", "))};
}

Outcome stealth() {
    std::vector<std::string> parts;
    std::vector<std::string> wide;
    bool ok = true;
    auto run = [](std::uint64_t seed, double lambda_min) {
        auto cfg = ex::toy_config(seed);
        auto& strategy = cfg.users[cfg.attacker_index()].attack->strategy;
        strategy.kind = attack::StrategyKind::lobam_search;
        strategy.search.mode = attack::SearchMode::target_norm;
        strategy.search.lambda_min = lambda_min;
        cfg.merges = {merging::MergeConfig{}};
        const auto r = ex::run_experiment(cfg, 0).reports.front();
        double mean = 0.0;
        for (double d : r.benign_distances) mean += d;
        mean /= static_cast<double>(r.benign_distances.size());
        return std::tuple{r.lambda_used, r.upload_distance / mean, r.asr_percent};
    };
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        const auto [lambda, ratio, asr] = run(seed, attack::LambdaSearchConfig{}.lambda_min);
        ok = ok && ratio >= 0.5 && ratio <= 1.5;
        parts.push_back(fmt::format("seed {}: lambda {:.3f}, ratio {:.3f}", seed, lambda, ratio));
        // Not graded: where the reference is reached when the range is opened below 1.
        const auto [wl, wr, wa] = run(seed, 0.05);
        wide.push_back(fmt::format("lambda {:.3f} ratio {:.3f} ASR {:.1f}%", wl, wr, wa));
    }
    return {ok, fmt::format("upload / mean benign distance with the default range: {} | range opened to [0.05, 10] "
                            "(informational): {}",
                            fmt::join(parts, "; "), fmt::join(wide, "; "))};
}

}  // namespace

int main() {
    spdlog::set_level(spdlog::level::warn);
    report(1, merging_oracles);
    report(2, gradients);
    report(3, lora_algebra);
    report(4, theorem);
    ToyRuns toy;
    bool toy_ok = true;
    std::string toy_error;
    const auto toy_start = std::chrono::steady_clock::now();
    try {
        toy = run_toy();
    } catch (const std::exception& e) {
        toy_ok = false;
        toy_error = e.what();
    }
    fmt::print("toy experiment (3 seeds, shared by criteria 5-8): {:.1f}s\n",
               std::chrono::duration<double>(std::chrono::steady_clock::now() - toy_start).count());
    auto toy_criterion = [&](int id, Outcome (*f)(const ToyRuns&)) {
        report(id, [&] { return toy_ok ? f(toy) : Outcome{false, "toy experiment failed: " + toy_error}; });
    };
    toy_criterion(5, directional);
    toy_criterion(6, utility);
    toy_criterion(7, naive_ablation);
    toy_criterion(8, lambda_sweep);
    report(9, search_convergence);
    report(10, determinism);
    report(11, stealth);
    fmt::print("{} of 11 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
