// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0

#include "mergeforge/merging.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <fmt/format.h>

#include "mergeforge/random.hpp"

namespace mergeforge::merging {

std::string to_string(Algorithm a) {
    switch (a) {
    case Algorithm::SA:
        return "SA";
    case Algorithm::TA:
        return "TA";
    case Algorithm::Ties:
        return "Ties";
    case Algorithm::AdaMerging:
        return "AdaMerging";
    }
    return "?";
}

Algorithm parse_algorithm(std::string_view name) {
    if (name == "SA") return Algorithm::SA;
    if (name == "TA") return Algorithm::TA;
    if (name == "Ties") return Algorithm::Ties;
    if (name == "AdaMerging" || name == "AM") return Algorithm::AdaMerging;
    throw InvalidArgument(fmt::format("unknown merge algorithm '{}'", name));
}

void MergeConfig::validate() const {
    auto finite = [](double v) { return std::isfinite(v); };
    switch (algorithm) {
    case Algorithm::SA:
        break;
    case Algorithm::TA:
        if (!finite(ta_k)) throw InvalidArgument("TA scaling k must be finite");
        break;
    case Algorithm::Ties:
        if (!(ties_keep_fraction > 0.0 && ties_keep_fraction <= 1.0)) {
            throw InvalidArgument("Ties keep fraction must lie in (0, 1]");
        }
        if (!(ties_alpha > 0.0) || !finite(ties_alpha)) throw InvalidArgument("Ties alpha must be positive");
        break;
    case Algorithm::AdaMerging:
        if (!(am_lr > 0.0) || !finite(am_lr)) throw InvalidArgument("AdaMerging lr must be positive");
        if (am_steps < 0) throw InvalidArgument("AdaMerging steps must be non-negative");
        if (!finite(am_init_k)) throw InvalidArgument("AdaMerging initial k must be finite");
        if (am_pool_size == 0) throw InvalidArgument("AdaMerging pool size must be positive");
        break;
    }
}

namespace {

void require_nonempty(std::span<const Delta> deltas) {
    if (deltas.empty()) {
        throw EmptyList("merging needs at least one delta");
    }
    for (const auto& d : deltas.subspan(1)) {
        if (!compatible(deltas[0], d)) {
            throw IncompatibleShapes("deltas to merge differ in layer names or shapes");
        }
    }
}

// Values of `d` in the layer order of `ref`.
std::vector<double> aligned_flat(const Delta& d, const Delta& ref) {
    std::vector<double> out;
    out.reserve(ref.num_values());
    for (const auto& e : ref) {
        auto v = d.at(e.name).values();
        out.insert(out.end(), v.begin(), v.end());
    }
    return out;
}

}  // namespace

Delta simple_average(std::span<const Delta> deltas) {
    require_nonempty(deltas);
    std::vector<double> cs(deltas.size(), 1.0 / static_cast<double>(deltas.size()));
    return linear_combine(deltas, cs);
}

Delta task_arithmetic(std::span<const Delta> deltas, double k) {
    require_nonempty(deltas);
    std::vector<double> cs(deltas.size(), k);
    return linear_combine(deltas, cs);
}

Delta ties_merge(std::span<const Delta> deltas, double keep_fraction, double alpha) {
    require_nonempty(deltas);
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
        throw InvalidArgument("Ties keep fraction must lie in (0, 1]");
    }
    const Delta& ref = deltas[0];
    const std::size_t len = ref.num_values();
    const auto keep = std::min(len, static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(len))));

    // Trim: keep the `keep` largest magnitudes per delta; equal magnitudes
    // resolve to the lower flat index.
    std::vector<std::vector<double>> trimmed;
    std::vector<std::size_t> order(len);
    for (const auto& d : deltas) {
        auto v = aligned_flat(d, ref);
        std::iota(order.begin(), order.end(), std::size_t{0});
        auto before = [&](std::size_t a, std::size_t b) {
            const double ma = std::abs(v[a]);
            const double mb = std::abs(v[b]);
            return ma > mb || (ma == mb && a < b);
        };
        if (keep < len) {
            std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), before);
            for (auto it = order.begin() + static_cast<std::ptrdiff_t>(keep); it != order.end(); ++it) {
                v[*it] = 0.0;
            }
        }
        trimmed.push_back(std::move(v));
    }

    // Elect a sign per coordinate (zero sum elects +), then average the
    // trimmed entries that agree with it.
    std::vector<double> merged(len, 0.0);
    for (std::size_t i = 0; i < len; ++i) {
        double sum = 0.0;
        for (const auto& t : trimmed) {
            sum += t[i];
        }
        const bool positive = sum >= 0.0;
        double acc = 0.0;
        std::size_t count = 0;
        for (const auto& t : trimmed) {
            if ((positive && t[i] > 0.0) || (!positive && t[i] < 0.0)) {
                acc += t[i];
                ++count;
            }
        }
        merged[i] = count == 0 ? 0.0 : alpha * acc / static_cast<double>(count);
    }
    return unflatten<DeltaTag>(merged, ref);
}

double mean_entropy(const nnet::MlpSpec& spec, const ParamSet& body, std::span<const ParamSet> heads,
                    std::span<const tasks::Dataset> pools) {
    if (heads.size() != pools.size() || heads.empty()) {
        throw LengthMismatch("entropy needs one head per unlabeled pool");
    }
    double total = 0.0;
    for (std::size_t t = 0; t < heads.size(); ++t) {
        if (pools[t].empty()) {
            throw EmptyPool("unlabeled pool for task '" + pools[t].task_id + "' is empty");
        }
        nnet::Network net(spec, nnet::with_head(body, heads[t]));
        double h = 0.0;
        for (std::size_t i = 0; i < pools[t].size(); ++i) {
            for (double p : nnet::softmax(net.logits(pools[t].row(i)))) {
                if (p > 0.0) {
                    h -= p * std::log(p);
                }
            }
        }
        total += h / static_cast<double>(pools[t].size());
    }
    return total / static_cast<double>(heads.size());
}

namespace {

// Entropy objective over merged bodies built directly in double precision.
class EntropyObjective {
public:
    EntropyObjective(std::span<const Delta> deltas, const ParamSet& base_body, const AdaMergingContext& ctx,
                     const MergeConfig& cfg) {
        for (std::size_t t = 0; t < ctx.heads.size(); ++t) {
            nets_.emplace_back(ctx.spec, nnet::with_head(base_body, ctx.heads[t]));
            const auto& src = ctx.unlabeled[t];
            if (src.empty()) {
                throw EmptyPool("unlabeled pool for task '" + src.task_id + "' is empty");
            }
            std::vector<std::size_t> idx(src.size());
            std::iota(idx.begin(), idx.end(), std::size_t{0});
            Rng rng(derive_seed(cfg.seed, t));
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(std::min(idx.size(), cfg.am_pool_size));
            std::sort(idx.begin(), idx.end());
            std::vector<std::vector<float>> pool;
            for (auto i : idx) {
                auto row = src.row(i);
                pool.emplace_back(row.begin(), row.end());
            }
            pools_.push_back(std::move(pool));
        }
        // Base and deltas laid out in the order of the network's parameters.
        auto refs = nets_.front().parameters(nnet::Trainable::body);
        for (const auto& r : refs) {
            auto b = base_body.at(r.name).values();
            base_.insert(base_.end(), b.begin(), b.end());
        }
        for (const auto& d : deltas) {
            std::vector<double> flat;
            flat.reserve(base_.size());
            for (const auto& r : refs) {
                auto v = d.at(r.name).values();
                flat.insert(flat.end(), v.begin(), v.end());
            }
            deltas_.push_back(std::move(flat));
        }
    }

    double operator()(std::span<const double> k) {
        std::vector<double> w = base_;
        for (std::size_t m = 0; m < deltas_.size(); ++m) {
            for (std::size_t i = 0; i < w.size(); ++i) {
                w[i] += k[m] * deltas_[m][i];
            }
        }
        double total = 0.0;
        for (std::size_t t = 0; t < nets_.size(); ++t) {
            std::size_t offset = 0;
            for (auto& r : nets_[t].parameters(nnet::Trainable::body)) {
                std::copy_n(w.begin() + static_cast<std::ptrdiff_t>(offset), r.values.size(), r.values.begin());
                offset += r.values.size();
            }
            double h = 0.0;
            for (const auto& x : pools_[t]) {
                for (double p : nnet::softmax(nets_[t].logits(x))) {
                    if (p > 0.0) {
                        h -= p * std::log(p);
                    }
                }
            }
            total += h / static_cast<double>(pools_[t].size());
        }
        return total / static_cast<double>(nets_.size());
    }

private:
    std::vector<nnet::Network> nets_;
    std::vector<std::vector<std::vector<float>>> pools_;
    std::vector<double> base_;
    std::vector<std::vector<double>> deltas_;
};

}  // namespace

AdaMergingResult adamerging(std::span<const Delta> deltas, const ParamSet& base_body, const AdaMergingContext& ctx,
                            const MergeConfig& cfg) {
    require_nonempty(deltas);
    MergeConfig checked = cfg;
    checked.algorithm = Algorithm::AdaMerging;
    checked.validate();
    if (ctx.heads.empty() || ctx.heads.size() != ctx.unlabeled.size()) {
        throw MissingContext("AdaMerging needs one head and one unlabeled pool per task");
    }
    if (!compatible(deltas[0], base_body)) {
        throw IncompatibleShapes("deltas do not match the base body");
    }

    EntropyObjective objective(deltas, base_body, ctx, cfg);
    std::vector<double> k(deltas.size(), cfg.am_init_k);
    AdaMergingResult result;
    double current = objective(k);
    result.initial_entropy = current;

    // Gradient descent on the coefficients with central finite differences;
    // a step that raises the objective is halved until it does not.
    constexpr double kFdStep = 1e-4;
    constexpr int kMaxHalvings = 12;
    std::vector<double> grad(k.size());
    std::vector<double> probe(k.size());
    for (int step = 0; step < cfg.am_steps; ++step) {
        for (std::size_t i = 0; i < k.size(); ++i) {
            probe = k;
            probe[i] = k[i] + kFdStep;
            const double up = objective(probe);
            probe[i] = k[i] - kFdStep;
            const double down = objective(probe);
            grad[i] = (up - down) / (2.0 * kFdStep);
        }
        double lr = cfg.am_lr;
        bool accepted = false;
        for (int h = 0; h <= kMaxHalvings && !accepted; ++h, lr *= 0.5) {
            for (std::size_t i = 0; i < k.size(); ++i) {
                probe[i] = k[i] - lr * grad[i];
            }
            const double value = objective(probe);
            if (value <= current) {
                k = probe;
                current = value;
                accepted = true;
            }
        }
        if (!accepted) {
            break;
        }
        result.steps_taken = step + 1;
    }
    result.final_entropy = current;
    result.coefficients = k;
    result.merged = linear_combine(deltas, k);
    return result;
}

MergeOutcome merge(const ParamSet& base, std::span<const Delta> deltas, const MergeConfig& cfg,
                   const AdaMergingContext* ctx) {
    cfg.validate();
    switch (cfg.algorithm) {
    case Algorithm::SA:
        return {apply(base, simple_average(deltas)), {}};
    case Algorithm::TA:
        return {apply(base, task_arithmetic(deltas, cfg.ta_k)), {}};
    case Algorithm::Ties:
        return {apply(base, ties_merge(deltas, cfg.ties_keep_fraction, cfg.ties_alpha)), {}};
    case Algorithm::AdaMerging: {
        if (ctx == nullptr || ctx->unlabeled.empty()) {
            throw MissingContext("AdaMerging requires heads and unlabeled data");
        }
        auto r = adamerging(deltas, base, *ctx, cfg);
        return {apply(base, r.merged), std::move(r.coefficients)};
    }
    }
    throw InvalidArgument("unhandled merge algorithm");
}

}  // namespace mergeforge::merging
