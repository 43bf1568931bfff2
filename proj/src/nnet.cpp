// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0

#include "mergeforge/nnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "mergeforge/random.hpp"

namespace mergeforge::nnet {

namespace {

std::string body_weight(std::size_t i) { return fmt::format("body.{}.weight", i); }
std::string body_bias(std::size_t i) { return fmt::format("body.{}.bias", i); }
constexpr const char* kHeadWeight = "head.weight";
constexpr const char* kHeadBias = "head.bias";

std::string lora_b_name(const std::string& target) { return target + ".lora.B"; }
std::string lora_a_name(const std::string& target) { return target + ".lora.A"; }

std::vector<double> widen(std::span<const float> v) { return {v.begin(), v.end()}; }

std::vector<float> narrow(std::span<const double> v) {
    std::vector<float> out(v.size());
    std::transform(v.begin(), v.end(), out.begin(), [](double x) { return static_cast<float>(x); });
    return out;
}

const LayerTensor& expect_layer(const ParamSet& p, const std::string& name, std::vector<std::size_t> shape) {
    const auto* t = p.find(name);
    if (t == nullptr) {
        throw DimensionMismatch("model lacks layer '" + name + "'");
    }
    if (t->shape() != shape) {
        throw DimensionMismatch("layer '" + name + "' has an unexpected shape");
    }
    return *t;
}

LayerTensor uniform_tensor(std::size_t out, std::size_t in, std::uint64_t seed) {
    Rng rng(seed);
    const double limit = std::sqrt(6.0 / static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-limit, limit);
    std::vector<float> v(out * in);
    for (auto& x : v) {
        x = static_cast<float>(dist(rng));
    }
    return LayerTensor({out, in}, std::move(v));
}

}  // namespace

void MlpSpec::validate() const {
    if (input_dim == 0 || body_output_dim == 0) {
        throw InvalidArgument("MLP dimensions must be positive");
    }
    if (hidden_dims.empty()) {
        throw InvalidArgument("MLP needs at least one hidden layer");
    }
    for (auto h : hidden_dims) {
        if (h == 0) {
            throw InvalidArgument("MLP hidden dimensions must be positive");
        }
    }
}

std::pair<std::size_t, std::size_t> MlpSpec::body_layer_dims(std::size_t i) const {
    const std::size_t in = i == 0 ? input_dim : hidden_dims[i - 1];
    const std::size_t out = i < hidden_dims.size() ? hidden_dims[i] : body_output_dim;
    return {out, in};
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw InvalidArgument("learning rate must be positive");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
        throw InvalidArgument("momentum must lie in [0, 1)");
    }
    if (epochs < 0) {
        throw InvalidArgument("epochs must be non-negative");
    }
    if (batch_size <= 0) {
        throw InvalidArgument("batch size must be positive");
    }
}

LoraAdapters LoraAdapters::from_checkpoint(const Checkpoint& ckpt) {
    if (!ckpt.lora) {
        throw FormatError("checkpoint carries no LoRA metadata");
    }
    return LoraAdapters{*ckpt.lora, ckpt.layers};
}

const std::vector<double>* Gradients::find(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (names[i] == name) {
            return &values[i];
        }
    }
    return nullptr;
}

// ---------------------------------------------------------------------------
// Network

struct Network::Trace {
    std::vector<std::vector<double>> inputs;  // input to each body layer
    std::vector<std::vector<double>> pre;     // pre-activation of each body layer
    std::vector<std::vector<double>> low;     // A * input for adapted layers
    std::vector<double> features;
    std::vector<double> logits;
};

Network::Network(const MlpSpec& spec, const ParamSet& model, const LoraAdapters* adapters) : spec_(spec) {
    spec_.validate();
    std::size_t consumed = 0;
    for (std::size_t i = 0; i < spec_.num_body_layers(); ++i) {
        auto [out, in] = spec_.body_layer_dims(i);
        Dense d;
        d.name = body_weight(i);
        d.out = out;
        d.in = in;
        d.w = widen(expect_layer(model, body_weight(i), {out, in}).values());
        d.b = widen(expect_layer(model, body_bias(i), {out}).values());
        body_.push_back(std::move(d));
        consumed += 2;
    }
    if (model.contains(kHeadWeight) || model.contains(kHeadBias)) {
        const auto& hw = model.at(kHeadWeight);
        if (hw.shape().size() != 2 || hw.shape()[1] != spec_.body_output_dim || hw.shape()[0] < 2) {
            throw DimensionMismatch("head weight must be [classes >= 2, body_output_dim]");
        }
        head_.name = kHeadWeight;
        head_.out = hw.shape()[0];
        head_.in = hw.shape()[1];
        head_.w = widen(hw.values());
        head_.b = widen(expect_layer(model, kHeadBias, {head_.out}).values());
        consumed += 2;
    }
    if (consumed != model.size()) {
        throw DimensionMismatch("model contains layers that are not part of the MLP layout");
    }
    if (adapters != nullptr) {
        const auto& meta = adapters->meta;
        if (meta.rank <= 0 || !(meta.alpha > 0.0) || meta.targets.empty()) {
            throw InvalidArgument("LoRA adapters need positive rank, positive alpha, and targets");
        }
        const auto r = static_cast<std::size_t>(meta.rank);
        for (const auto& target : meta.targets) {
            auto it = std::find_if(body_.begin(), body_.end(), [&](const Dense& d) { return d.name == target; });
            if (it == body_.end()) {
                throw DimensionMismatch("LoRA target '" + target + "' is not a body weight");
            }
            if (r > std::min(it->out, it->in)) {
                throw DimensionMismatch("LoRA rank exceeds min(fan_in, fan_out) of '" + target + "'");
            }
            it->rank = r;
            it->lora_scale = adapters->scaling();
            it->lora_b = widen(expect_layer(adapters->factors, lora_b_name(target), {it->out, r}).values());
            it->lora_a = widen(expect_layer(adapters->factors, lora_a_name(target), {r, it->in}).values());
        }
        if (adapters->factors.size() != 2 * meta.targets.size()) {
            throw DimensionMismatch("adapter factors do not match the target list");
        }
        lora_meta_ = meta;
    }
}

void Network::run(std::span<const float> x, Trace& trace) const {
    if (x.size() != spec_.input_dim) {
        throw DimensionMismatch(fmt::format("input has {} entries, expected {}", x.size(), spec_.input_dim));
    }
    const std::size_t layers = body_.size();
    trace.inputs.resize(layers);
    trace.pre.resize(layers);
    trace.low.resize(layers);
    std::vector<double> cur = widen(x);
    for (std::size_t l = 0; l < layers; ++l) {
        const Dense& d = body_[l];
        trace.inputs[l] = cur;
        std::vector<double> z(d.b);
        for (std::size_t o = 0; o < d.out; ++o) {
            const double* row = &d.w[o * d.in];
            double acc = 0.0;
            for (std::size_t i = 0; i < d.in; ++i) {
                acc += row[i] * cur[i];
            }
            z[o] += acc;
        }
        if (d.rank > 0) {
            std::vector<double> u(d.rank, 0.0);
            for (std::size_t k = 0; k < d.rank; ++k) {
                const double* row = &d.lora_a[k * d.in];
                for (std::size_t i = 0; i < d.in; ++i) {
                    u[k] += row[i] * cur[i];
                }
            }
            for (std::size_t o = 0; o < d.out; ++o) {
                double acc = 0.0;
                for (std::size_t k = 0; k < d.rank; ++k) {
                    acc += d.lora_b[o * d.rank + k] * u[k];
                }
                z[o] += d.lora_scale * acc;
            }
            trace.low[l] = std::move(u);
        } else {
            trace.low[l].clear();
        }
        cur.resize(d.out);
        for (std::size_t o = 0; o < d.out; ++o) {
            cur[o] = spec_.activation == Activation::relu ? std::max(0.0, z[o]) : std::tanh(z[o]);
        }
        trace.pre[l] = std::move(z);
    }
    trace.features = cur;
    trace.logits.clear();
    if (has_head()) {
        trace.logits.assign(head_.b.begin(), head_.b.end());
        for (std::size_t o = 0; o < head_.out; ++o) {
            for (std::size_t i = 0; i < head_.in; ++i) {
                trace.logits[o] += head_.w[o * head_.in + i] * cur[i];
            }
        }
    }
}

std::vector<double> Network::features(std::span<const float> x) const {
    Trace t;
    run(x, t);
    return t.features;
}

std::vector<double> Network::logits(std::span<const float> x) const {
    if (!has_head()) {
        throw DimensionMismatch("model has no classification head");
    }
    Trace t;
    run(x, t);
    return t.logits;
}

void Network::check_batch(const Batch& batch) const {
    if (batch.inputs.empty()) {
        throw EmptyBatch("loss requested on an empty batch");
    }
    if (batch.inputs.size() != batch.targets.size()) {
        throw LengthMismatch("batch needs one target per input");
    }
    for (const auto& t : batch.targets) {
        if (t.kind == TargetKind::labels) {
            if (!has_head()) {
                throw DimensionMismatch("label targets need a classification head");
            }
            if (t.label < 0 || static_cast<std::size_t>(t.label) >= head_.out) {
                throw IndexOutOfRange(fmt::format("label {} outside [0, {})", t.label, head_.out));
            }
        } else if (batch.prototype.size() != spec_.body_output_dim) {
            throw DimensionMismatch("prototype targets need a prototype of body_output_dim entries");
        }
    }
}

double Network::sample_loss(const Trace& trace, const Target& target, std::span<const double> prototype,
                            std::vector<double>& out_grad, bool& grad_at_logits) const {
    if (target.kind == TargetKind::labels) {
        const auto& z = trace.logits;
        const double zmax = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (double v : z) {
            sum += std::exp(v - zmax);
        }
        const double lse = zmax + std::log(sum);
        out_grad.resize(z.size());
        for (std::size_t c = 0; c < z.size(); ++c) {
            out_grad[c] = std::exp(z[c] - lse) - (static_cast<int>(c) == target.label ? 1.0 : 0.0);
        }
        grad_at_logits = true;
        return lse - z[static_cast<std::size_t>(target.label)];
    }
    const auto& f = trace.features;
    out_grad.resize(f.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        const double d = f[i] - prototype[i];
        loss += d * d;
        out_grad[i] = 2.0 * d;
    }
    grad_at_logits = false;
    return loss;
}

double Network::loss(const Batch& batch) const {
    check_batch(batch);
    Trace trace;
    std::vector<double> scratch;
    bool at_logits = false;
    double total = 0.0;
    for (std::size_t s = 0; s < batch.inputs.size(); ++s) {
        run(batch.inputs[s], trace);
        total += batch.targets[s].weight * sample_loss(trace, batch.targets[s], batch.prototype, scratch, at_logits);
    }
    return total / static_cast<double>(batch.inputs.size());
}

LossAndGrad Network::loss_and_grad(const Batch& batch, Trainable trainable) const {
    check_batch(batch);
    if (trainable == Trainable::lora && !has_adapters()) {
        throw InvalidArgument("LoRA gradients requested without adapters");
    }
    const bool base_grads = trainable != Trainable::lora;
    const bool head_grads = trainable == Trainable::all && has_head();

    // Gradient buffers, laid out in the same order as parameters(trainable).
    LossAndGrad result;
    auto& names = result.grads.names;
    auto& values = result.grads.values;
    std::vector<std::pair<std::size_t, std::size_t>> slot_index(body_.size(), {SIZE_MAX, SIZE_MAX});
    for (std::size_t l = 0; l < body_.size(); ++l) {
        const Dense& d = body_[l];
        if (base_grads) {
            slot_index[l] = {names.size(), names.size() + 1};
            names.push_back(d.name);
            values.emplace_back(d.w.size(), 0.0);
            names.push_back(body_bias(l));
            values.emplace_back(d.b.size(), 0.0);
        } else if (d.rank > 0) {
            slot_index[l] = {names.size(), names.size() + 1};
            names.push_back(lora_b_name(d.name));
            values.emplace_back(d.lora_b.size(), 0.0);
            names.push_back(lora_a_name(d.name));
            values.emplace_back(d.lora_a.size(), 0.0);
        }
    }
    std::size_t head_slot = SIZE_MAX;
    if (head_grads) {
        head_slot = names.size();
        names.emplace_back(kHeadWeight);
        values.emplace_back(head_.w.size(), 0.0);
        names.emplace_back(kHeadBias);
        values.emplace_back(head_.b.size(), 0.0);
    }

    const double inv_n = 1.0 / static_cast<double>(batch.inputs.size());
    Trace trace;
    std::vector<double> g;
    std::vector<double> gz;
    std::vector<double> gu;
    std::vector<double> gin;
    double total = 0.0;
    for (std::size_t s = 0; s < batch.inputs.size(); ++s) {
        run(batch.inputs[s], trace);
        bool at_logits = false;
        const Target& target = batch.targets[s];
        total += target.weight * sample_loss(trace, target, batch.prototype, g, at_logits);
        const double coef = target.weight * inv_n;
        for (auto& v : g) {
            v *= coef;
        }

        // Back through the head into the body output.
        std::vector<double> gf;
        if (at_logits) {
            if (head_grads) {
                auto& hw = values[head_slot];
                auto& hb = values[head_slot + 1];
                for (std::size_t o = 0; o < head_.out; ++o) {
                    hb[o] += g[o];
                    for (std::size_t i = 0; i < head_.in; ++i) {
                        hw[o * head_.in + i] += g[o] * trace.features[i];
                    }
                }
            }
            gf.assign(head_.in, 0.0);
            for (std::size_t o = 0; o < head_.out; ++o) {
                for (std::size_t i = 0; i < head_.in; ++i) {
                    gf[i] += head_.w[o * head_.in + i] * g[o];
                }
            }
        } else {
            gf = g;
        }

        for (std::size_t l = body_.size(); l-- > 0;) {
            const Dense& d = body_[l];
            const auto& z = trace.pre[l];
            const auto& in = trace.inputs[l];
            gz.resize(d.out);
            for (std::size_t o = 0; o < d.out; ++o) {
                double deriv = 0.0;
                if (spec_.activation == Activation::relu) {
                    deriv = z[o] > 0.0 ? 1.0 : 0.0;
                } else {
                    const double t = std::tanh(z[o]);
                    deriv = 1.0 - t * t;
                }
                gz[o] = gf[o] * deriv;
            }
            if (d.rank > 0) {
                gu.assign(d.rank, 0.0);
                for (std::size_t o = 0; o < d.out; ++o) {
                    for (std::size_t k = 0; k < d.rank; ++k) {
                        gu[k] += d.lora_scale * d.lora_b[o * d.rank + k] * gz[o];
                    }
                }
            }
            auto [wi, bi] = slot_index[l];
            if (base_grads) {
                auto& gw = values[wi];
                auto& gb = values[bi];
                for (std::size_t o = 0; o < d.out; ++o) {
                    gb[o] += gz[o];
                    for (std::size_t i = 0; i < d.in; ++i) {
                        gw[o * d.in + i] += gz[o] * in[i];
                    }
                }
            } else if (d.rank > 0) {
                auto& gB = values[wi];
                auto& gA = values[bi];
                const auto& u = trace.low[l];
                for (std::size_t o = 0; o < d.out; ++o) {
                    for (std::size_t k = 0; k < d.rank; ++k) {
                        gB[o * d.rank + k] += d.lora_scale * gz[o] * u[k];
                    }
                }
                for (std::size_t k = 0; k < d.rank; ++k) {
                    for (std::size_t i = 0; i < d.in; ++i) {
                        gA[k * d.in + i] += gu[k] * in[i];
                    }
                }
            }
            if (l == 0) {
                break;
            }
            gin.assign(d.in, 0.0);
            for (std::size_t o = 0; o < d.out; ++o) {
                const double* row = &d.w[o * d.in];
                for (std::size_t i = 0; i < d.in; ++i) {
                    gin[i] += row[i] * gz[o];
                }
            }
            if (d.rank > 0) {
                for (std::size_t k = 0; k < d.rank; ++k) {
                    for (std::size_t i = 0; i < d.in; ++i) {
                        gin[i] += d.lora_a[k * d.in + i] * gu[k];
                    }
                }
            }
            gf.swap(gin);
        }
    }
    result.loss = total * inv_n;
    return result;
}

std::vector<ParamRef> Network::parameters(Trainable trainable) {
    if (trainable == Trainable::lora && !has_adapters()) {
        throw InvalidArgument("LoRA parameters requested without adapters");
    }
    std::vector<ParamRef> refs;
    for (std::size_t l = 0; l < body_.size(); ++l) {
        Dense& d = body_[l];
        if (trainable != Trainable::lora) {
            refs.push_back({d.name, d.w});
            refs.push_back({body_bias(l), d.b});
        } else if (d.rank > 0) {
            refs.push_back({lora_b_name(d.name), d.lora_b});
            refs.push_back({lora_a_name(d.name), d.lora_a});
        }
    }
    if (trainable == Trainable::all && has_head()) {
        refs.push_back({kHeadWeight, head_.w});
        refs.push_back({kHeadBias, head_.b});
    }
    return refs;
}

ParamSet Network::params() const {
    ParamSet out;
    for (std::size_t l = 0; l < body_.size(); ++l) {
        const Dense& d = body_[l];
        out.insert(d.name, LayerTensor({d.out, d.in}, narrow(d.w)));
        out.insert(body_bias(l), LayerTensor({d.out}, narrow(d.b)));
    }
    if (has_head()) {
        out.insert(kHeadWeight, LayerTensor({head_.out, head_.in}, narrow(head_.w)));
        out.insert(kHeadBias, LayerTensor({head_.out}, narrow(head_.b)));
    }
    return out;
}

std::optional<LoraAdapters> Network::adapters() const {
    if (!lora_meta_) {
        return std::nullopt;
    }
    LoraAdapters a{*lora_meta_, {}};
    for (const auto& target : lora_meta_->targets) {
        for (const auto& d : body_) {
            if (d.name == target) {
                a.factors.insert(lora_b_name(target), LayerTensor({d.out, d.rank}, narrow(d.lora_b)));
                a.factors.insert(lora_a_name(target), LayerTensor({d.rank, d.in}, narrow(d.lora_a)));
            }
        }
    }
    return a;
}

// ---------------------------------------------------------------------------
// Free functions

ParamSet init_model(const MlpSpec& spec, const HeadSpec& head, std::uint64_t seed) {
    spec.validate();
    ParamSet p;
    for (std::size_t i = 0; i < spec.num_body_layers(); ++i) {
        auto [out, in] = spec.body_layer_dims(i);
        p.insert(body_weight(i), uniform_tensor(out, in, derive_seed(seed, i)));
        p.insert(body_bias(i), LayerTensor::zeros({out}));
    }
    for (const auto& e : init_head(spec, head, derive_seed(seed, 1000))) {
        p.insert(e.name, e.tensor);
    }
    return p;
}

ParamSet init_head(const MlpSpec& spec, const HeadSpec& head, std::uint64_t seed) {
    if (head.num_classes < 2) {
        throw InvalidArgument("a head needs at least two classes");
    }
    ParamSet p;
    p.insert(kHeadWeight, uniform_tensor(head.num_classes, spec.body_output_dim, seed));
    p.insert(kHeadBias, LayerTensor::zeros({head.num_classes}));
    return p;
}

std::vector<std::string> default_lora_targets(const MlpSpec& spec) {
    std::vector<std::string> t;
    for (std::size_t i = 0; i < spec.num_body_layers(); ++i) {
        t.push_back(body_weight(i));
    }
    return t;
}

LoraAdapters init_lora(const MlpSpec& spec, const LoraConfig& cfg, std::uint64_t seed) {
    spec.validate();
    if (cfg.rank <= 0) {
        throw InvalidArgument("LoRA rank must be positive");
    }
    LoraAdapters a;
    a.meta.rank = cfg.rank;
    a.meta.alpha = cfg.alpha > 0.0 ? cfg.alpha : static_cast<double>(cfg.rank);
    a.meta.targets = cfg.target_layers.empty() ? default_lora_targets(spec) : cfg.target_layers;
    const auto r = static_cast<std::size_t>(cfg.rank);
    std::normal_distribution<double> dist(0.0, 0.02);
    for (std::size_t t = 0; t < a.meta.targets.size(); ++t) {
        const auto& target = a.meta.targets[t];
        std::size_t layer = SIZE_MAX;
        for (std::size_t i = 0; i < spec.num_body_layers(); ++i) {
            if (body_weight(i) == target) {
                layer = i;
            }
        }
        if (layer == SIZE_MAX) {
            throw InvalidArgument("LoRA target '" + target + "' is not a body weight");
        }
        auto [out, in] = spec.body_layer_dims(layer);
        if (r > std::min(out, in)) {
            throw DimensionMismatch(fmt::format("LoRA rank {} exceeds min(fan_in, fan_out) of '{}'", r, target));
        }
        Rng rng(derive_seed(seed, t));
        std::vector<float> av(r * in);
        for (auto& x : av) {
            x = static_cast<float>(dist(rng));
        }
        a.factors.insert(lora_b_name(target), LayerTensor::zeros({out, r}));
        a.factors.insert(lora_a_name(target), LayerTensor({r, in}, std::move(av)));
    }
    return a;
}

ParamSet body_of(const ParamSet& model) { return select_prefix(model, "body."); }

ParamSet head_of(const ParamSet& model) { return select_prefix(model, "head."); }

ParamSet with_head(const ParamSet& model, const ParamSet& head) {
    ParamSet out = body_of(model);
    for (const auto& e : head_of(head)) {
        out.insert(e.name, e.tensor);
    }
    return out;
}

std::vector<double> forward(const MlpSpec& spec, const ParamSet& model, const LoraAdapters* adapters,
                            std::span<const float> x) {
    return Network(spec, model, adapters).logits(x);
}

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> p(logits.begin(), logits.end());
    if (p.empty()) {
        return p;
    }
    const double zmax = *std::max_element(p.begin(), p.end());
    double sum = 0.0;
    for (auto& v : p) {
        v = std::exp(v - zmax);
        sum += v;
    }
    for (auto& v : p) {
        v /= sum;
    }
    return p;
}

std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

LossAndGrad loss_and_grad(const MlpSpec& spec, const ParamSet& model, const LoraAdapters* adapters,
                          const Batch& batch, Trainable trainable) {
    return Network(spec, model, adapters).loss_and_grad(batch, trainable);
}

TrainResult train(const MlpSpec& spec, const ParamSet& model, const LoraAdapters* adapters,
                  std::span<const Example> data, const TrainConfig& cfg, const TrainOptions& options) {
    cfg.validate();
    const Trainable trainable = options.trainable;
    if (trainable == Trainable::lora && adapters == nullptr) {
        throw InvalidArgument("LoRA training requires adapters");
    }
    Network net(spec, model, adapters);
    if (cfg.epochs == 0 || data.empty()) {
        return TrainResult{model, adapters ? std::optional<LoraAdapters>(*adapters) : std::nullopt};
    }
    const bool needs_prototype = std::any_of(data.begin(), data.end(), [](const Example& e) {
        return e.target.kind == TargetKind::feature_prototype;
    });
    if (needs_prototype && options.prototype_inputs.empty()) {
        throw InvalidArgument("prototype targets require prototype inputs");
    }

    auto refs = net.parameters(trainable);
    std::vector<std::vector<double>> velocity;
    for (const auto& r : refs) {
        velocity.emplace_back(r.values.size(), 0.0);
    }
    const double momentum = cfg.optimizer == Optimizer::sgd_momentum ? cfg.momentum : 0.0;

    Rng rng(cfg.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto batch_size = static_cast<std::size_t>(cfg.batch_size);

    Batch batch;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (needs_prototype) {
            std::vector<double> proto(spec.body_output_dim, 0.0);
            for (const auto& x : options.prototype_inputs) {
                auto f = net.features(x);
                for (std::size_t i = 0; i < proto.size(); ++i) {
                    proto[i] += f[i];
                }
            }
            for (auto& v : proto) {
                v /= static_cast<double>(options.prototype_inputs.size());
            }
            batch.prototype = std::move(proto);
        }
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += batch_size) {
            const std::size_t stop = std::min(order.size(), start + batch_size);
            batch.inputs.clear();
            batch.targets.clear();
            for (std::size_t k = start; k < stop; ++k) {
                batch.inputs.emplace_back(data[order[k]].x);
                batch.targets.push_back(data[order[k]].target);
            }
            auto lg = net.loss_and_grad(batch, trainable);
            for (std::size_t p = 0; p < refs.size(); ++p) {
                auto& v = velocity[p];
                const auto& g = lg.grads.values[p];
                auto w = refs[p].values;
                for (std::size_t i = 0; i < w.size(); ++i) {
                    v[i] = momentum * v[i] + g[i];
                    w[i] -= cfg.learning_rate * v[i];
                }
            }
        }
    }
    if (trainable == Trainable::lora) {
        return TrainResult{model, net.adapters()};
    }
    return TrainResult{net.params(), net.adapters()};
}

ParamSet materialize_lora(const ParamSet& model, const LoraAdapters& adapters) {
    if (adapters.meta.rank <= 0) {
        throw DimensionMismatch("adapters have no rank");
    }
    const auto r = static_cast<std::size_t>(adapters.meta.rank);
    const double s = adapters.scaling();
    ParamSet out;
    for (const auto& e : model) {
        const bool targeted = std::find(adapters.meta.targets.begin(), adapters.meta.targets.end(), e.name) !=
                              adapters.meta.targets.end();
        if (!targeted) {
            out.insert(e.name, e.tensor);
            continue;
        }
        const auto& shape = e.tensor.shape();
        if (shape.size() != 2) {
            throw DimensionMismatch("LoRA target '" + e.name + "' is not a matrix");
        }
        const std::size_t rows = shape[0];
        const std::size_t cols = shape[1];
        auto b = expect_layer(adapters.factors, lora_b_name(e.name), {rows, r}).values();
        auto a = expect_layer(adapters.factors, lora_a_name(e.name), {r, cols}).values();
        auto w0 = e.tensor.values();
        std::vector<float> w(rows * cols);
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < r; ++k) {
                    acc += static_cast<double>(b[i * r + k]) * static_cast<double>(a[k * cols + j]);
                }
                w[i * cols + j] = static_cast<float>(static_cast<double>(w0[i * cols + j]) + s * acc);
            }
        }
        out.insert(e.name, LayerTensor(shape, std::move(w)));
    }
    for (const auto& target : adapters.meta.targets) {
        if (!model.contains(target)) {
            throw DimensionMismatch("LoRA target '" + target + "' missing from model");
        }
    }
    return out;
}

}  // namespace mergeforge::nnet
