// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0

#include "mergeforge/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mergeforge/random.hpp"

namespace mergeforge::theory {

namespace {

double norm(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) {
        acc += x * x;
    }
    return std::sqrt(acc);
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

Vec difference(std::span<const double> a, std::span<const double> b) {
    Vec out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out[i] = a[i] - b[i];
    }
    return out;
}

}  // namespace

double QuadraticSurrogate::value(std::span<const double> theta) const {
    if (theta.size() != center.size()) {
        throw DimensionMismatch("surrogate evaluated at a point of the wrong dimension");
    }
    auto d = difference(theta, center);
    return 0.5 * mu * dot(d, d) + offset;
}

Vec QuadraticSurrogate::gradient(std::span<const double> theta) const {
    if (theta.size() != center.size()) {
        throw DimensionMismatch("surrogate gradient at a point of the wrong dimension");
    }
    auto d = difference(theta, center);
    for (auto& x : d) {
        x *= mu;
    }
    return d;
}

void TheoremInstance::validate() const {
    const auto dim = theta_pre.size();
    auto same = [dim](const Vec& v) { return v.size() == dim; };
    if (!same(delta_malicious) || !same(delta_benign) || !std::all_of(benign_deltas.begin(), benign_deltas.end(), same)) {
        throw DimensionMismatch("theorem instance vectors differ in dimension");
    }
}

Vec build_Y(const TheoremInstance& inst) {
    inst.validate();
    const double inv_n = 1.0 / static_cast<double>(inst.num_models());
    Vec y = inst.theta_pre;
    for (std::size_t i = 0; i < y.size(); ++i) {
        double sum = inst.delta_malicious[i];
        for (const auto& d : inst.benign_deltas) {
            sum += d[i];
        }
        y[i] += inv_n * sum;
    }
    return y;
}

Vec build_X(const TheoremInstance& inst) {
    Vec x = build_Y(inst);
    const double coef = (inst.lambda - 1.0) / static_cast<double>(inst.num_models());
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] += coef * (inst.delta_malicious[i] - inst.delta_benign[i]);
    }
    return x;
}

double lambda_threshold(const TheoremInstance& inst, const QuadraticSurrogate& g) {
    inst.validate();
    const double gap = norm(difference(inst.delta_malicious, inst.delta_benign));
    if (gap == 0.0) {
        throw DegenerateDeltas("malicious and benign updates coincide");
    }
    const double grad_norm = norm(g.gradient(build_Y(inst)));
    const double n = static_cast<double>(inst.num_models());
    return 1.0 + grad_norm / ((g.mu / (2.0 * n)) * gap);
}

TheoremReport evaluate_theorem(const TheoremInstance& inst, const QuadraticSurrogate& g) {
    TheoremReport r;
    r.lambda = inst.lambda;
    r.threshold = lambda_threshold(inst, g);
    const Vec y = build_Y(inst);
    const Vec x = build_X(inst);
    r.g_x = g.value(x);
    r.g_y = g.value(y);
    r.improved = r.g_x > r.g_y;
    const Vec z = difference(x, y);
    r.lower_bound = r.g_y + dot(g.gradient(y), z) + 0.5 * g.mu * dot(z, z);
    const double slack = 1e-9 * std::max(1.0, std::abs(r.g_x));
    r.lower_bound_holds = r.g_x >= r.lower_bound - slack;
    return r;
}

TheoremReport verify_theorem(const TheoremInstance& inst, const QuadraticSurrogate& g, double margin) {
    if (!(margin > 1.0)) {
        throw InvalidArgument("margin must exceed 1");
    }
    TheoremInstance scaled = inst;
    scaled.lambda = margin * lambda_threshold(inst, g);
    return evaluate_theorem(scaled, g);
}

bool check_strong_convexity(const QuadraticSurrogate& g, double claimed_mu, std::size_t samples, std::uint64_t seed) {
    if (samples == 0) {
        throw InvalidArgument("strong convexity check needs at least one sample");
    }
    Rng rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    const auto dim = g.center.size();
    Vec a(dim);
    Vec b(dim);
    for (std::size_t s = 0; s < samples; ++s) {
        for (std::size_t i = 0; i < dim; ++i) {
            a[i] = g.center[i] + 3.0 * dist(rng);
            b[i] = g.center[i] + 3.0 * dist(rng);
        }
        const Vec step = difference(b, a);
        const double lhs = g.value(b);
        const double rhs = g.value(a) + dot(g.gradient(a), step) + 0.5 * claimed_mu * dot(step, step);
        if (lhs < rhs - 1e-9 * std::max(std::abs(lhs), std::abs(rhs))) {
            return false;
        }
    }
    return true;
}

bool check_strong_convexity(const QuadraticSurrogate& g, std::size_t samples, std::uint64_t seed) {
    return check_strong_convexity(g, g.mu, samples, seed);
}

RandomCase random_case(std::size_t dim, std::size_t num_models, std::uint64_t seed) {
    if (dim == 0 || num_models == 0) {
        throw InvalidArgument("random theorem case needs positive dimension and model count");
    }
    Rng rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    std::uniform_real_distribution<double> mu_dist(0.1, 5.0);
    auto draw = [&](double s) {
        Vec v(dim);
        for (auto& x : v) {
            x = s * dist(rng);
        }
        return v;
    };
    RandomCase c;
    c.surrogate.mu = mu_dist(rng);
    c.surrogate.center = draw(1.0);
    c.surrogate.offset = dist(rng);
    c.instance.theta_pre = draw(1.0);
    for (std::size_t i = 0; i + 1 < num_models; ++i) {
        c.instance.benign_deltas.push_back(draw(0.1));
    }
    c.instance.delta_malicious = draw(0.1);
    c.instance.delta_benign = draw(0.1);
    c.instance.lambda = 1.0;
    return c;
}

MonteCarloReport monte_carlo(std::size_t instances, double margin, std::uint64_t seed, std::size_t dim,
                             std::size_t num_models) {
    MonteCarloReport r;
    r.instances = instances;
    r.min_margin_observed = instances == 0 ? 0.0 : std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < instances; ++k) {
        auto c = random_case(dim, num_models, derive_seed(seed, k));
        auto report = verify_theorem(c.instance, c.surrogate, margin);
        if (report.improved) {
            ++r.pass_count;
        }
        r.min_margin_observed = std::min(r.min_margin_observed, report.g_x - report.g_y);
    }
    return r;
}

ParamSet to_param_set(std::span<const double> v, const std::string& name) {
    std::vector<float> f(v.size());
    std::transform(v.begin(), v.end(), f.begin(), [](double x) { return static_cast<float>(x); });
    ParamSet p;
    p.insert(name, LayerTensor({v.size()}, std::move(f)));
    return p;
}

Vec from_param_set(const ParamSet& p) { return flatten(p); }

}  // namespace mergeforge::theory
