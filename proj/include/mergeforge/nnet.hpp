// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0
//
// Feed-forward classifier: an MLP body followed by a linear head. Body layers
// are named "body.{i}.weight" ([out, in]) and "body.{i}.bias" ([out]); the head
// is "head.weight" ([classes, body_out]) and "head.bias". LoRA factors for a
// targeted weight W are "<W>.lora.B" ([out, r]) and "<W>.lora.A" ([r, in]),
// and the adapted weight is W + (alpha / r) * B * A.
//
// All arithmetic runs in double on a working copy; ParamSets store float.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mergeforge/checkpoint.hpp"
#include "mergeforge/weightspace.hpp"

namespace mergeforge::nnet {

enum class Activation { relu, tanh };

struct MlpSpec {
    std::size_t input_dim = 32;
    std::vector<std::size_t> hidden_dims{64, 64};
    std::size_t body_output_dim = 32;
    Activation activation = Activation::relu;

    void validate() const;
    std::size_t num_body_layers() const noexcept { return hidden_dims.size() + 1; }
    /// {fan_out, fan_in} of body layer i.
    std::pair<std::size_t, std::size_t> body_layer_dims(std::size_t i) const;
};

struct HeadSpec {
    std::size_t num_classes = 2;
};

struct LoraConfig {
    int rank = 8;
    /// Non-positive means "same as rank", i.e. an effective scale of 1.
    double alpha = 0.0;
    /// Empty means every body weight matrix.
    std::vector<std::string> target_layers;
};

struct LoraAdapters {
    LoraMetadata meta;
    ParamSet factors;

    double scaling() const noexcept { return meta.alpha / meta.rank; }
    Checkpoint to_checkpoint() const { return Checkpoint{factors, meta}; }
    static LoraAdapters from_checkpoint(const Checkpoint& ckpt);
};

enum class Optimizer { sgd, sgd_momentum };

struct TrainConfig {
    Optimizer optimizer = Optimizer::sgd;
    double learning_rate = 0.05;
    double momentum = 0.0;
    int epochs = 20;
    int batch_size = 32;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Which parameters receive gradients.
enum class Trainable {
    all,   ///< body and head
    body,  ///< body only; head frozen
    lora,  ///< adapter factors only; every base weight frozen
};

enum class TargetKind { labels, feature_prototype };

struct Target {
    TargetKind kind = TargetKind::labels;
    int label = -1;
    double weight = 1.0;
};

/// Per-sample objectives averaged over the batch: weight * cross-entropy for
/// label targets, weight * ||body(x) - prototype||^2 for prototype targets.
struct Batch {
    std::vector<std::span<const float>> inputs;
    std::vector<Target> targets;
    std::vector<double> prototype;
};

struct Gradients {
    std::vector<std::string> names;
    std::vector<std::vector<double>> values;

    const std::vector<double>* find(std::string_view name) const;
};

struct LossAndGrad {
    double loss = 0.0;
    Gradients grads;
};

/// Mutable view of one named parameter inside a Network.
struct ParamRef {
    std::string name;
    std::span<double> values;
};

class Network {
public:
    Network(const MlpSpec& spec, const ParamSet& model, const LoraAdapters* adapters = nullptr);

    const MlpSpec& spec() const noexcept { return spec_; }
    bool has_head() const noexcept { return head_.out > 0; }
    bool has_adapters() const noexcept { return lora_meta_.has_value(); }
    std::size_t num_classes() const noexcept { return head_.out; }

    std::vector<double> features(std::span<const float> x) const;
    std::vector<double> logits(std::span<const float> x) const;

    double loss(const Batch& batch) const;
    LossAndGrad loss_and_grad(const Batch& batch, Trainable trainable) const;

    std::vector<ParamRef> parameters(Trainable trainable);

    /// Base weights (body, plus head when present) rounded back to float.
    ParamSet params() const;
    std::optional<LoraAdapters> adapters() const;

private:
    struct Dense {
        std::string name;
        std::size_t out = 0;
        std::size_t in = 0;
        std::vector<double> w;
        std::vector<double> b;
        std::size_t rank = 0;
        double lora_scale = 0.0;
        std::vector<double> lora_b;
        std::vector<double> lora_a;
    };
    struct Trace;

    void run(std::span<const float> x, Trace& trace) const;
    double sample_loss(const Trace& trace, const Target& target, std::span<const double> prototype,
                       std::vector<double>& out_grad, bool& grad_at_logits) const;
    void check_batch(const Batch& batch) const;

    MlpSpec spec_;
    std::vector<Dense> body_;
    Dense head_;
    std::optional<LoraMetadata> lora_meta_;
};

ParamSet init_model(const MlpSpec& spec, const HeadSpec& head, std::uint64_t seed);
/// A standalone "head.weight"/"head.bias" pair.
ParamSet init_head(const MlpSpec& spec, const HeadSpec& head, std::uint64_t seed);
/// B = 0, A ~ N(0, 0.02^2); validates rank against every targeted layer.
LoraAdapters init_lora(const MlpSpec& spec, const LoraConfig& cfg, std::uint64_t seed);
std::vector<std::string> default_lora_targets(const MlpSpec& spec);

ParamSet body_of(const ParamSet& model);
ParamSet head_of(const ParamSet& model);
/// Body layers of `model` followed by the head layers of `head`.
ParamSet with_head(const ParamSet& model, const ParamSet& head);

std::vector<double> forward(const MlpSpec& spec, const ParamSet& model, const LoraAdapters* adapters,
                            std::span<const float> x);
std::vector<double> softmax(std::span<const double> logits);
std::size_t argmax(std::span<const double> v);

LossAndGrad loss_and_grad(const MlpSpec& spec, const ParamSet& model, const LoraAdapters* adapters,
                          const Batch& batch, Trainable trainable = Trainable::all);

struct Example {
    std::vector<float> x;
    Target target;
};

struct TrainOptions {
    Trainable trainable = Trainable::all;
    /// Inputs whose mean body feature, recomputed under the current weights at
    /// the start of every epoch, is the prototype for prototype targets.
    std::vector<std::vector<float>> prototype_inputs;
};

struct TrainResult {
    ParamSet model;
    std::optional<LoraAdapters> adapters;
};

TrainResult train(const MlpSpec& spec, const ParamSet& model, const LoraAdapters* adapters,
                  std::span<const Example> data, const TrainConfig& cfg, const TrainOptions& options = {});

/// W0 + (alpha / r) * B * A substituted into every targeted layer.
ParamSet materialize_lora(const ParamSet& model, const LoraAdapters& adapters);

}  // namespace mergeforge::nnet
