// Copyright (c) 2026, mergeforge contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <random>

#include "mergeforge/nnet.hpp"
#include "mergeforge/random.hpp"
#include "mergeforge/tasks.hpp"
#include "support/gradcheck.hpp"

using namespace mergeforge;
using namespace mergeforge::nnet;

namespace {

std::vector<float> random_input(std::mt19937_64& rng, std::size_t dim) {
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<float> x(dim);
    for (auto& v : x) v = static_cast<float>(nd(rng));
    return x;
}

std::vector<Example> blob_examples(const tasks::Dataset& d) {
    std::vector<Example> out;
    for (std::size_t i = 0; i < d.size(); ++i) {
        auto r = d.row(i);
        out.push_back({{r.begin(), r.end()}, {TargetKind::labels, d.labels[i], 1.0}});
    }
    return out;
}

double accuracy(const MlpSpec& spec, const ParamSet& model, const LoraAdapters* ad, const tasks::Dataset& d) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        hits += static_cast<int>(argmax(forward(spec, model, ad, d.row(i)))) == d.labels[i];
    }
    return static_cast<double>(hits) / static_cast<double>(d.size());
}

}  // namespace

TEST_CASE("spec validation", "[nnet]") {
    CHECK_NOTHROW(MlpSpec{}.validate());
    CHECK_THROWS_AS((MlpSpec{4, {}, 3, Activation::relu}.validate()), InvalidArgument);
    CHECK_THROWS_AS((MlpSpec{4, {0}, 3, Activation::relu}.validate()), InvalidArgument);
    CHECK_THROWS_AS((MlpSpec{0, {3}, 3, Activation::relu}.validate()), InvalidArgument);
    TrainConfig tc;
    CHECK_NOTHROW(tc.validate());
    tc.momentum = 1.0;
    CHECK_THROWS_AS(tc.validate(), InvalidArgument);
}

TEST_CASE("init is seeded, named and has zero biases", "[nnet]") {
    const MlpSpec spec;
    const auto a = init_model(spec, HeadSpec{4}, 42);
    const auto b = init_model(spec, HeadSpec{4}, 42);
    const auto c = init_model(spec, HeadSpec{4}, 43);
    CHECK(bit_identical(a, b));
    CHECK_FALSE(bit_identical(a, c));
    CHECK(a.names() == std::vector<std::string>{"body.0.weight", "body.0.bias", "body.1.weight", "body.1.bias",
                                                "body.2.weight", "body.2.bias", "head.weight", "head.bias"});
    CHECK(a.at("body.0.weight").shape() == std::vector<std::size_t>{64, 32});
    CHECK(a.at("head.weight").shape() == std::vector<std::size_t>{4, 32});
    for (const auto& e : a) {
        if (e.name.ends_with("bias")) {
            for (float v : e.tensor.values()) CHECK(v == 0.0f);
        } else {
            const double limit = std::sqrt(6.0 / static_cast<double>(e.tensor.shape()[1]));
            for (float v : e.tensor.values()) CHECK(std::abs(v) <= limit);
        }
    }
    CHECK_THROWS_AS(init_model(spec, HeadSpec{1}, 1), InvalidArgument);
}

TEST_CASE("softmax sums to one", "[nnet][property]") {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> nd(0.0, 30.0);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> z(2 + rng() % 8);
        for (auto& v : z) v = nd(rng);
        const auto p = softmax(z);
        CHECK(std::accumulate(p.begin(), p.end(), 0.0) == Catch::Approx(1.0).margin(1e-6));
        for (double v : p) CHECK(v >= 0.0);
    }
}

TEST_CASE("uniform logits give loss ln C", "[nnet]") {
    const MlpSpec spec{5, {4}, 3, Activation::relu};
    auto model = init_model(spec, HeadSpec{6}, 2);
    ParamSet zeroed;
    for (const auto& e : model) {
        zeroed.insert(e.name, e.name.starts_with("head") ? LayerTensor::zeros(e.tensor.shape()) : e.tensor);
    }
    std::mt19937_64 rng(3);
    const auto x1 = random_input(rng, 5);
    const auto x2 = random_input(rng, 5);
    Batch batch{{x1, x2}, {{TargetKind::labels, 0, 1.0}, {TargetKind::labels, 5, 1.0}}, {}};
    CHECK(loss_and_grad(spec, zeroed, nullptr, batch).loss == Catch::Approx(std::log(6.0)).epsilon(1e-12));
    CHECK_THROWS_AS(loss_and_grad(spec, zeroed, nullptr, Batch{}), EmptyBatch);
}

TEST_CASE("forward checks input width and layout", "[nnet]") {
    const MlpSpec spec{5, {4}, 3, Activation::tanh};
    const auto model = init_model(spec, HeadSpec{2}, 1);
    CHECK_THROWS_AS(forward(spec, model, nullptr, std::vector<float>(4, 0.0f)), DimensionMismatch);
    const MlpSpec wider{5, {6}, 3, Activation::tanh};
    CHECK_THROWS_AS(forward(wider, model, nullptr, std::vector<float>(5, 0.0f)), DimensionMismatch);
    CHECK(forward(spec, model, nullptr, std::vector<float>(5, 0.5f)).size() == 2);
}

TEST_CASE("single-example forward equals the batch row", "[nnet][property]") {
    const MlpSpec spec{6, {7, 5}, 4, Activation::relu};
    const auto model = init_model(spec, HeadSpec{3}, 9);
    std::mt19937_64 rng(10);
    std::vector<std::vector<float>> xs;
    for (int i = 0; i < 5; ++i) xs.push_back(random_input(rng, 6));
    // Batch loss gradient equals the mean of per-sample gradients.
    Batch batch;
    for (const auto& x : xs) {
        batch.inputs.emplace_back(x);
        batch.targets.push_back({TargetKind::labels, 1, 1.0});
    }
    const auto full = loss_and_grad(spec, model, nullptr, batch);
    double mean_loss = 0.0;
    std::vector<double> mean_grad(full.grads.values[0].size(), 0.0);
    for (const auto& x : xs) {
        Batch one{{x}, {{TargetKind::labels, 1, 1.0}}, {}};
        const auto g = loss_and_grad(spec, model, nullptr, one);
        mean_loss += g.loss / 5.0;
        for (std::size_t i = 0; i < mean_grad.size(); ++i) mean_grad[i] += g.grads.values[0][i] / 5.0;
        const auto z = forward(spec, model, nullptr, x);
        const auto p = softmax(z);
        CHECK(g.loss == Catch::Approx(-std::log(p[1])).epsilon(1e-12));
    }
    CHECK(full.loss == Catch::Approx(mean_loss).epsilon(1e-12));
    for (std::size_t i = 0; i < mean_grad.size(); ++i) {
        CHECK(full.grads.values[0][i] == Catch::Approx(mean_grad[i]).margin(1e-12));
    }
}

TEST_CASE("backprop matches central finite differences", "[nnet][oracle]") {
    for (std::uint64_t seed = 1; seed <= 12; ++seed) {
        const auto c = mftest::random_grad_case(seed);
        for (auto trainable : {Trainable::all, Trainable::body, Trainable::lora}) {
            const auto r = mftest::gradient_check(c, trainable, 1e-3);
            INFO("seed " << seed << " trainable " << static_cast<int>(trainable) << " worst " << r.worst_rel_error
                         << " at " << r.worst_name);
            CHECK(r.entries > 0);
            CHECK(r.worst_rel_error < 1e-4);
        }
    }
}

TEST_CASE("LoRA gradients omit every base weight", "[nnet]") {
    const auto c = mftest::random_grad_case(3);
    const auto g = loss_and_grad(c.spec, c.model, &c.adapters, c.batch(), Trainable::lora);
    for (const auto& name : g.grads.names) {
        CHECK(name.find(".lora.") != std::string::npos);
    }
    CHECK(g.grads.find("body.0.weight") == nullptr);
    CHECK(g.grads.find("body.0.weight.lora.B") != nullptr);
    const auto body = loss_and_grad(c.spec, c.model, &c.adapters, c.batch(), Trainable::body);
    CHECK(body.grads.find("head.weight") == nullptr);
    CHECK(body.grads.find("body.0.bias") != nullptr);
}

TEST_CASE("adapters with B = 0 leave logits unchanged", "[nnet]") {
    const MlpSpec spec{8, {10, 9}, 6, Activation::tanh};
    const auto model = init_model(spec, HeadSpec{3}, 5);
    const auto ad = init_lora(spec, LoraConfig{4, 0.0, {}}, 6);
    std::mt19937_64 rng(7);
    for (int i = 0; i < 10; ++i) {
        const auto x = random_input(rng, 8);
        CHECK(forward(spec, model, &ad, x) == forward(spec, model, nullptr, x));
    }
    CHECK(bit_identical(materialize_lora(model, ad), model));
}

TEST_CASE("adapter path equals the materialized weights", "[nnet][oracle]") {
    for (std::uint64_t seed = 1; seed <= 25; ++seed) {
        const auto c = mftest::random_grad_case(seed);
        const auto merged = materialize_lora(c.model, c.adapters);
        double worst = 0.0;
        for (const auto& x : c.inputs) {
            const auto a = forward(c.spec, c.model, &c.adapters, x);
            const auto b = forward(c.spec, merged, nullptr, x);
            for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
        }
        INFO("seed " << seed);
        CHECK(worst <= 1e-5);
    }
}

TEST_CASE("LoRA config validation", "[nnet]") {
    const MlpSpec spec{8, {10}, 6, Activation::relu};
    CHECK_THROWS_AS(init_lora(spec, LoraConfig{7, 0.0, {}}, 1), DimensionMismatch);
    CHECK_THROWS_AS(init_lora(spec, LoraConfig{0, 0.0, {}}, 1), InvalidArgument);
    CHECK_THROWS_AS(init_lora(spec, LoraConfig{2, 0.0, {"head.weight"}}, 1), InvalidArgument);
    const auto ad = init_lora(spec, LoraConfig{2, 4.0, {"body.1.weight"}}, 1);
    CHECK(ad.scaling() == 2.0);
    CHECK(ad.factors.at("body.1.weight.lora.B").shape() == std::vector<std::size_t>{6, 2});
    CHECK(ad.factors.at("body.1.weight.lora.A").shape() == std::vector<std::size_t>{2, 10});
    CHECK(default_lora_targets(spec) == std::vector<std::string>{"body.0.weight", "body.1.weight"});
    const auto back = LoraAdapters::from_checkpoint(ad.to_checkpoint());
    CHECK(back.meta == ad.meta);
    CHECK(bit_identical(back.factors, ad.factors));
}

TEST_CASE("training fits a separable blob task", "[nnet]") {
    auto spec_t = tasks::make_task_spec("blobs", 2, 8, 1.0, 0.1, 100, 50, 4);
    const auto data = tasks::gen_task(spec_t);
    const MlpSpec spec{8, {16}, 8, Activation::relu};
    const auto model = init_model(spec, HeadSpec{2}, 1);
    TrainConfig tc;
    tc.epochs = 50;
    tc.seed = 2;
    const auto r = train(spec, model, nullptr, blob_examples(data.train), tc);
    CHECK(accuracy(spec, r.model, nullptr, data.train) >= 0.95);
    CHECK(accuracy(spec, r.model, nullptr, data.test) >= 0.95);
}

TEST_CASE("zero epochs leave parameters unchanged", "[nnet]") {
    const MlpSpec spec{4, {5}, 3, Activation::relu};
    const auto model = init_model(spec, HeadSpec{2}, 1);
    std::vector<Example> ex{{{1, 2, 3, 4}, {TargetKind::labels, 1, 1.0}}};
    TrainConfig tc;
    tc.epochs = 0;
    CHECK(bit_identical(train(spec, model, nullptr, ex, tc).model, model));
}

TEST_CASE("training is deterministic and LoRA keeps the base frozen", "[nnet]") {
    auto spec_t = tasks::make_task_spec("blobs", 3, 8, 1.0, 0.5, 30, 10, 8);
    const auto data = tasks::gen_task(spec_t);
    const MlpSpec spec{8, {16, 12}, 8, Activation::tanh};
    const auto model = init_model(spec, HeadSpec{3}, 3);
    const auto before = model;
    TrainConfig tc;
    tc.epochs = 5;
    tc.optimizer = Optimizer::sgd_momentum;
    tc.momentum = 0.9;
    tc.learning_rate = 0.01;
    tc.seed = 4;
    const auto ex = blob_examples(data.train);
    const auto a = train(spec, model, nullptr, ex, tc, {Trainable::body, {}});
    const auto b = train(spec, model, nullptr, ex, tc, {Trainable::body, {}});
    CHECK(bit_identical(a.model, b.model));
    CHECK(bit_identical(nnet::head_of(a.model), nnet::head_of(model)));

    const auto ad = init_lora(spec, LoraConfig{4, 0.0, {}}, 5);
    const auto l1 = train(spec, model, &ad, ex, tc, {Trainable::lora, {}});
    const auto l2 = train(spec, model, &ad, ex, tc, {Trainable::lora, {}});
    REQUIRE(l1.adapters.has_value());
    CHECK(bit_identical(l1.model, before));
    CHECK(bit_identical(model, before));
    CHECK(l2_distance(l1.model, before) == 0.0);
    CHECK(bit_identical(l1.adapters->factors, l2.adapters->factors));
    CHECK_FALSE(bit_identical(l1.adapters->factors, ad.factors));
}

TEST_CASE("prototype targets pull features toward the prototype mean", "[nnet]") {
    const MlpSpec spec{6, {12}, 4, Activation::relu};
    const auto model = init_model(spec, HeadSpec{2}, 11);
    std::mt19937_64 rng(12);
    std::vector<std::vector<float>> proto_inputs;
    for (int i = 0; i < 4; ++i) proto_inputs.push_back(random_input(rng, 6));
    std::vector<Example> ex;
    for (int i = 0; i < 16; ++i) ex.push_back({random_input(rng, 6), {TargetKind::feature_prototype, -1, 1.0}});
    auto distance_to_proto = [&](const ParamSet& m) {
        Network net(spec, m);
        std::vector<double> proto(4, 0.0);
        for (const auto& x : proto_inputs) {
            const auto f = net.features(x);
            for (std::size_t i = 0; i < 4; ++i) proto[i] += f[i] / 4.0;
        }
        double s = 0.0;
        for (const auto& e : ex) {
            const auto f = net.features(e.x);
            for (std::size_t i = 0; i < 4; ++i) s += (f[i] - proto[i]) * (f[i] - proto[i]);
        }
        return s;
    };
    TrainConfig tc;
    tc.epochs = 20;
    tc.learning_rate = 0.01;
    TrainOptions opts{Trainable::body, proto_inputs};
    const auto r = train(spec, model, nullptr, ex, tc, opts);
    CHECK(distance_to_proto(r.model) < distance_to_proto(model));
    CHECK_THROWS_AS(train(spec, model, nullptr, ex, tc, {Trainable::body, {}}), InvalidArgument);
}

TEST_CASE("adapter distance grows with rank", "[nnet]") {
    auto spec_t = tasks::make_task_spec("blobs", 4, 16, 1.0, 0.5, 50, 10, 21);
    const auto data = tasks::gen_task(spec_t);
    const MlpSpec spec{16, {32}, 16, Activation::relu};
    const auto model = init_model(spec, HeadSpec{4}, 22);
    TrainConfig tc;
    tc.epochs = 10;
    tc.seed = 23;
    const auto ex = blob_examples(data.train);
    auto distance_for = [&](int r) {
        const auto ad = init_lora(spec, LoraConfig{r, 0.0, {}}, 24);
        const auto out = train(spec, model, &ad, ex, tc, {Trainable::lora, {}});
        return l2_distance(materialize_lora(model, *out.adapters), model);
    };
    CHECK(distance_for(8) > distance_for(2));
}
