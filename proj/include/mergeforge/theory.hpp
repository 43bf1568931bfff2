// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0
//
// Numerical check of the amplification guarantee on strongly convex
// surrogates g(theta) = (mu / 2) ||theta - center||^2 + offset.
//
// With Y the simple-average merge using the attacker's malicious update and
// X the merge using the amplified upload,
//
//   X - Y = ((lambda - 1) / N) (d_m - d_b),
//
// g(X) > g(Y) whenever lambda > 1 + ||grad g(Y)|| / ((mu / 2N) ||d_m - d_b||).

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mergeforge/weightspace.hpp"

namespace mergeforge::theory {

using Vec = std::vector<double>;

struct QuadraticSurrogate {
    double mu = 1.0;
    Vec center;
    double offset = 0.0;

    double value(std::span<const double> theta) const;
    Vec gradient(std::span<const double> theta) const;
};

struct TheoremInstance {
    Vec theta_pre;
    /// Updates of the N - 1 benign users.
    std::vector<Vec> benign_deltas;
    /// Attacker's malicious and benign LoRA updates.
    Vec delta_malicious;
    Vec delta_benign;
    double lambda = 1.0;

    std::size_t num_models() const noexcept { return benign_deltas.size() + 1; }
    void validate() const;
};

/// Merge without the amplification (attacker uploads its malicious model).
Vec build_Y(const TheoremInstance& inst);
/// Merge with the amplified upload, computed as Y + Z.
Vec build_X(const TheoremInstance& inst);

double lambda_threshold(const TheoremInstance& inst, const QuadraticSurrogate& g);

struct TheoremReport {
    double lambda = 0.0;
    double threshold = 0.0;
    double g_x = 0.0;
    double g_y = 0.0;
    bool improved = false;
    /// g(Y) + <grad g(Y), Z> + (mu / 2) ||Z||^2.
    double lower_bound = 0.0;
    bool lower_bound_holds = false;
};

/// Evaluates at lambda = margin * threshold.
TheoremReport verify_theorem(const TheoremInstance& inst, const QuadraticSurrogate& g, double margin);
/// Evaluates at inst.lambda as given.
TheoremReport evaluate_theorem(const TheoremInstance& inst, const QuadraticSurrogate& g);

/// Samples pairs and tests the strong-convexity inequality with modulus
/// `claimed_mu` (1e-9 relative slack).
bool check_strong_convexity(const QuadraticSurrogate& g, double claimed_mu, std::size_t samples, std::uint64_t seed);
bool check_strong_convexity(const QuadraticSurrogate& g, std::size_t samples, std::uint64_t seed);

/// Random instance and surrogate of dimension `dim` with N models.
struct RandomCase {
    TheoremInstance instance;
    QuadraticSurrogate surrogate;
};
RandomCase random_case(std::size_t dim, std::size_t num_models, std::uint64_t seed);

struct MonteCarloReport {
    std::size_t instances = 0;
    std::size_t pass_count = 0;
    /// Smallest g(X) - g(Y) over all instances.
    double min_margin_observed = 0.0;
};

MonteCarloReport monte_carlo(std::size_t instances, double margin, std::uint64_t seed, std::size_t dim = 16,
                             std::size_t num_models = 6);

/// Single-layer packaging bridge to weightspace.
ParamSet to_param_set(std::span<const double> v, const std::string& name = "flat");
Vec from_param_set(const ParamSet& p);

}  // namespace mergeforge::theory
