// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "mergeforge/attack.hpp"
#include "mergeforge/merging.hpp"
#include "mergeforge/theory.hpp"

using namespace mergeforge;
using namespace mergeforge::theory;
using Catch::Approx;

namespace {

TheoremInstance small_instance(double lambda) {
    TheoremInstance inst;
    inst.theta_pre = {1.0, -1.0};
    inst.benign_deltas = {{0.5, 0.0}, {0.0, 0.5}};
    inst.delta_malicious = {1.5, 1.5};
    inst.delta_benign = {0.0, 0.3};
    inst.lambda = lambda;
    return inst;
}

double norm2(const Vec& v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
}

}  // namespace

TEST_CASE("merged points by hand", "[theory]") {
    const auto inst = small_instance(4.0);
    // Y = pre + (0.5 + 0 + 1.5, 0 + 0.5 + 1.5) / 3
    const auto y = build_Y(inst);
    CHECK(y[0] == Approx(1.0 + 2.0 / 3.0));
    CHECK(y[1] == Approx(-1.0 + 2.0 / 3.0));
    // X = Y + (3 / 3) (1.5, 1.2)
    const auto x = build_X(inst);
    CHECK(x[0] == Approx(y[0] + 1.5));
    CHECK(x[1] == Approx(y[1] + 1.2));
}

TEST_CASE("lambda of one leaves the merge unchanged", "[theory]") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto c = random_case(8, 5, seed);
        c.instance.lambda = 1.0;
        CHECK(build_X(c.instance) == build_Y(c.instance));
    }
}

TEST_CASE("X - Y is the scaled update gap", "[theory][property]") {
    std::mt19937_64 rng(71);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto c = random_case(1 + seed % 9, 2 + seed % 6, seed);
        c.instance.lambda = std::uniform_real_distribution<double>(-5.0, 20.0)(rng);
        const auto x = build_X(c.instance);
        const auto y = build_Y(c.instance);
        const double n = static_cast<double>(c.instance.num_models());
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double z = (c.instance.lambda - 1.0) / n * (c.instance.delta_malicious[i] - c.instance.delta_benign[i]);
            CHECK(x[i] - y[i] == Approx(z).margin(1e-12));
        }
    }
}

TEST_CASE("threshold hand examples", "[theory]") {
    TheoremInstance inst;
    inst.theta_pre = {0.0};
    inst.delta_malicious = {1.0};
    inst.delta_benign = {0.0};
    // N = 1, Y = 1, grad = 2 (1 - 0.5) = 1, gap 1, mu 2: 1 + 1 / (1 * 1) = 2.
    QuadraticSurrogate g{2.0, {0.5}, 0.0};
    CHECK(lambda_threshold(inst, g) == Approx(2.0));
    // Center at Y: zero gradient, threshold 1.
    g.center = {1.0};
    CHECK(lambda_threshold(inst, g) == 1.0);
    inst.delta_benign = {1.0};
    CHECK_THROWS_AS(lambda_threshold(inst, g), DegenerateDeltas);
}

TEST_CASE("threshold decreases as the update gap grows", "[theory][property]") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        auto c = random_case(6, 4, seed);
        double previous = INFINITY;
        for (double s : {0.5, 1.0, 2.0, 4.0}) {
            auto inst = c.instance;
            // Scale the gap around a fixed Y: move d_b only.
            for (std::size_t i = 0; i < inst.delta_benign.size(); ++i) {
                inst.delta_benign[i] = inst.delta_malicious[i] - s * (c.instance.delta_malicious[i] - c.instance.delta_benign[i]);
            }
            const double t = lambda_threshold(inst, c.surrogate);
            CHECK(t < previous);
            previous = t;
        }
    }
}

TEST_CASE("above the threshold the objective strictly increases", "[theory][property]") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const auto c = random_case(1 + seed % 16, 2 + seed % 7, seed);
        for (double margin : {1.01, 1.1, 2.0}) {
            const auto r = verify_theorem(c.instance, c.surrogate, margin);
            CHECK(r.improved);
            CHECK(r.lower_bound_holds);
            CHECK(r.g_x > r.g_y);
        }
    }
}

TEST_CASE("gain grows with margin", "[theory][property]") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto c = random_case(10, 5, seed);
        double previous = -INFINITY;
        for (double margin : {1.1, 1.5, 2.0, 3.0, 5.0}) {
            const auto r = verify_theorem(c.instance, c.surrogate, margin);
            CHECK(r.g_x - r.g_y > previous);
            previous = r.g_x - r.g_y;
        }
    }
}

TEST_CASE("quadratic lower bound is tight", "[theory]") {
    // For a quadratic the strong-convexity bound is an identity.
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto c = random_case(7, 3, seed);
        c.instance.lambda = 5.0;
        const auto r = evaluate_theorem(c.instance, c.surrogate);
        CHECK(r.g_x == Approx(r.lower_bound).epsilon(1e-10));
    }
}

TEST_CASE("strong convexity check accepts mu and rejects larger moduli", "[theory]") {
    const auto c = random_case(5, 2, 9);
    CHECK(check_strong_convexity(c.surrogate, 200, 1));
    CHECK(check_strong_convexity(c.surrogate, 0.5 * c.surrogate.mu, 200, 1));
    CHECK_FALSE(check_strong_convexity(c.surrogate, 2.0 * c.surrogate.mu, 200, 1));
    CHECK_THROWS_AS(check_strong_convexity(c.surrogate, 0, 1), InvalidArgument);
}

TEST_CASE("monte carlo at margin above one passes everywhere", "[theory]") {
    const auto r = monte_carlo(100, 1.1, 5);
    CHECK(r.instances == 100);
    CHECK(r.pass_count == 100);
    CHECK(r.min_margin_observed > 0.0);
    CHECK_THROWS_AS(monte_carlo(3, 1.0, 5), InvalidArgument);
    CHECK(monte_carlo(0, 1.5, 5).pass_count == 0);
}

TEST_CASE("instance validation", "[theory]") {
    auto inst = small_instance(2.0);
    inst.delta_benign = {1.0};
    CHECK_THROWS_AS(build_Y(inst), DimensionMismatch);
    QuadraticSurrogate g{1.0, {0.0}, 0.0};
    CHECK_THROWS_AS(g.value(std::vector<double>{1.0, 2.0}), DimensionMismatch);
}

TEST_CASE("X matches merging the constructed upload", "[theory][integration]") {
    // Users upload theta_pre + d_i; the attacker uploads lambda (theta_m - theta_b) + theta_b.
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto c = random_case(12, 4, seed);
        c.instance.lambda = 3.0 + static_cast<double>(seed % 5);
        const auto& in = c.instance;
        auto plus = [&](const Vec& d) {
            Vec v = in.theta_pre;
            for (std::size_t i = 0; i < v.size(); ++i) v[i] += d[i];
            return to_param_set(v);
        };
        const auto pre = to_param_set(in.theta_pre);
        const auto upload = attack::construct_upload(plus(in.delta_malicious), plus(in.delta_benign), in.lambda);
        std::vector<Delta> deltas;
        for (const auto& d : in.benign_deltas) deltas.push_back(delta(plus(d), pre));
        deltas.push_back(delta(upload, pre));
        const auto merged = from_param_set(apply(pre, merging::simple_average(deltas)));
        const auto x = build_X(in);
        for (std::size_t i = 0; i < x.size(); ++i) {
            // Float storage at every hop: tolerance scales with lambda.
            CHECK(merged[i] == Approx(x[i]).margin(1e-5 * (1.0 + in.lambda)));
        }
        CHECK(norm2(x) > 0.0);
    }
}
