#include <set>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "fusecad/data/pipeline.hpp"
#include "fusecad/experts/consult.hpp"
#include "fusecad/serialize.hpp"
#include "test_util.hpp"

using namespace fusecad;
using namespace fusecad::experts;
using fusecad::testing::TempDir;
using nn::LayerKind;
using nn::LayerSpec;

namespace {

// Random [3, r, r] samples labelled by the mean of channel 0.
nn::Dataset random_set(std::size_t n, std::size_t r, std::uint64_t seed) {
  Rng rng(seed);
  nn::Dataset d;
  d.sample_shape = {3, r, r};
  std::vector<double> x(3 * r * r);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = i % 4 == 0 ? 1 : 0;
    for (double& v : x) v = uniform01(rng) + (label ? 0.3 : 0.0);
    d.push(x, label, "P" + std::to_string(i / 2), {}, i);
  }
  return d;
}

TrainedModel tiny_expert(std::uint64_t seed, std::size_t r = 8) {
  std::vector<LayerSpec> layers{LayerSpec::input_norm(4, 1), LayerSpec::simple(LayerKind::global_avg_pool),
                                LayerSpec::dense(2), LayerSpec::simple(LayerKind::softmax)};
  TrainedModel t{"tiny", nn::ModelGraph({3, r, r}, layers, seed), {}, {}, {}};
  t.meta["family"] = "plain_shallow";
  return t;
}

nn::TrainConfig quick(std::size_t epochs, std::uint64_t seed = 0) {
  nn::TrainConfig c;
  c.max_epochs = epochs;
  c.early_stop_patience = epochs - 1;
  c.seed = seed;
  return c;
}

double row_sum(const std::array<double, 2>& p) { return p[0] + p[1]; }

}  // namespace

TEST_CASE("seven candidate topologies accept fusion objects and emit probability pairs") {
  const auto candidates = candidate_topologies(64);
  REQUIRE(candidates.size() == 7);
  std::set<std::string> names;
  Rng rng(1);
  ad::Tensor x = ad::Tensor::zeros({2, 3, 64, 64}, false);
  for (double& v : x.data()) v = uniform01(rng);
  for (const auto& t : candidates) {
    names.insert(t.name());
    nn::ModelGraph model({3, 64, 64}, t.layers(), 1);
    CHECK(model.output_shape() == ad::Shape{2});
    CHECK(t.input_norm.kind == LayerKind::input_norm_conv);
    const auto out = ad::forward(model.forward(ad::constant(x)).output);
    for (std::size_t b = 0; b < 2; ++b) CHECK(out.values()[2 * b] + out.values()[2 * b + 1] == doctest::Approx(1.0));
  }
  CHECK(names.size() == 7);
  for (std::size_t i = 0; i < candidates.size(); ++i)
    for (std::size_t j = i + 1; j < candidates.size(); ++j) CHECK(candidates[i].layers() != candidates[j].layers());
  CHECK_THROWS_AS(topology(Family::residual, 1), std::invalid_argument);
  CHECK(parse_family("multi_branch") == Family::multi_branch);
  CHECK_THROWS_AS(parse_family("alexnet"), std::invalid_argument);
}

TEST_CASE("fine-tuning freezes ceil(f * L) layers before the head and swaps in a 2-unit head") {
  // input_norm + 5 convolutions = 6 parameterized layers before the head
  std::vector<LayerSpec> layers{LayerSpec::input_norm(4, 1)};
  for (int i = 0; i < 5; ++i) {
    layers.push_back(LayerSpec::conv(4));
    layers.push_back(LayerSpec::simple(LayerKind::relu));
  }
  layers.push_back(LayerSpec::simple(LayerKind::global_avg_pool));
  layers.push_back(LayerSpec::dense(4));
  layers.push_back(LayerSpec::simple(LayerKind::softmax));
  const TrainedModel pretrained{"six", nn::ModelGraph({3, 8, 8}, layers, 3), {}, {}, {}};
  const auto data = random_set(16, 8, 5);
  const auto val = random_set(8, 8, 6);

  const auto half = finetune_expert(pretrained, 0.5, data, val, quick(3));
  CHECK(half.model.frozen_units() == 3);
  CHECK(half.model.output_shape() == ad::Shape{2});
  const auto before = pretrained.model.state();
  const auto after = half.model.state();
  for (std::size_t i = 0; i < before.size(); ++i) {
    const bool frozen = half.model.parameters()[i]->unit < 3;
    if (frozen) CHECK(ad::fct_bytes({before[i]}) == ad::fct_bytes({after[i]}));
    else if (half.model.parameters()[i]->unit < 6) CHECK(before[i].tensor.values() != after[i].tensor.values());
  }

  const auto full = finetune_expert(pretrained, 1.0, data, val, quick(3));
  CHECK(full.model.frozen_units() == 6);
  const auto full_state = full.model.state();
  for (std::size_t i = 0; i < before.size(); ++i)
    if (full.model.parameters()[i]->unit < 6) CHECK(ad::fct_bytes({before[i]}) == ad::fct_bytes({full_state[i]}));
  CHECK(full.meta["frozen_units"] == 6);
  CHECK_THROWS_AS(finetune_expert(pretrained, 1.5, data, val, quick(3)), std::invalid_argument);
}

TEST_CASE("proxy pretraining learns the 4-class texture task") {
  const auto train = proxy_dataset(40, 64, 1);
  const auto val = proxy_dataset(15, 64, 2);
  CHECK(train.size() == 160);
  CHECK(std::set<int>(train.labels.begin(), train.labels.end()) == std::set<int>{0, 1, 2, 3});
  auto config = quick(25);
  config.early_stop_patience = 10;
  const auto expert = pretrain_expert(topology(Family::plain_shallow), train, val, config);
  CHECK(expert.model.output_shape() == ad::Shape{4});
  CHECK(expert.meta["proxy_val_accuracy"].get<double>() > 0.5);
  nn::ModelGraph swapped = expert.model;
  swapped.replace_head(2, 9);
  CHECK(swapped.output_shape() == ad::Shape{2});
}

TEST_CASE("pretraining is deterministic and checkpoints round-trip") {
  const auto train = proxy_dataset(4, 32, 1);
  const auto val = proxy_dataset(2, 32, 2);
  const auto a = pretrain_expert(topology(Family::residual, 0, 32), train, val, quick(2, 4));
  const auto b = pretrain_expert(topology(Family::residual, 0, 32), train, val, quick(2, 4));
  CHECK(ad::fct_bytes(a.model.state()) == ad::fct_bytes(b.model.state()));
  TempDir dir("trained");
  save_trained(a, dir / "expert");
  const auto back = load_trained(dir / "expert");
  CHECK(ad::fct_bytes(back.model.state()) == ad::fct_bytes(a.model.state()));
  CHECK(back.history == a.history);
  CHECK(back.name == a.name);
  CHECK(back.model.layers() == a.model.layers());
}

TEST_CASE("build_consult shapes and errors") {
  std::vector<TrainedModel> three{tiny_expert(1), tiny_expert(2), tiny_expert(3)};
  const auto ec = build_consult(three, 5);
  CHECK(ec.head().input_shape() == ad::Shape{6});
  for (const auto& e : ec.experts()) CHECK(e.model.frozen_units() == e.model.parameterized_layers());
  CHECK(ec.head().layers() == stacking_head_layers());
  CHECK_THROWS_AS(build_consult({tiny_expert(1)}, 5), std::invalid_argument);
  CHECK_THROWS_AS(build_consult({tiny_expert(1), tiny_expert(2, 16)}, 5), std::invalid_argument);

  std::vector<TrainedModel> seven;
  for (std::uint64_t s = 0; s < 7; ++s) seven.push_back(tiny_expert(s));
  seven[5].meta["family"] = seven[6].meta["family"] = "densely_connected";
  const auto ec7 = build_consult(seven, 5);
  CHECK(ec7.head().input_shape() == ad::Shape{14});
  const auto p = consult_predict(ec7, random_set(5, 8, 2));
  for (const auto& row : p) CHECK(std::abs(row_sum(row) - 1.0) < 1e-9);
}

TEST_CASE("train_consult leaves experts byte-identical and only the head gets gradients") {
  auto ec = build_consult({tiny_expert(1), tiny_expert(2), tiny_expert(3)}, 7);
  const auto train = random_set(48, 8, 3);
  const auto val = random_set(16, 8, 4);
  const std::string snapshot = ec.expert_snapshot();
  const std::string head_before = ad::fct_bytes(ec.head().state());

  const auto batch = train.batch({0, 1, 2, 3});
  nn::accumulate_gradients(ec, batch, {});
  for (const auto& e : ec.experts())
    for (const auto* p : e.model.parameters()) CHECK_FALSE(p->value->has_grad());
  for (auto* p : ec.head().parameters()) CHECK(p->value->has_grad());
  for (auto* p : ec.head().parameters()) p->value->zero_grad();

  const auto history = train_consult(ec, train, val, quick(10));
  CHECK(history.epochs.size() == 10);
  CHECK(ec.expert_snapshot() == snapshot);
  CHECK(ad::fct_bytes(ec.head().state()) != head_before);
}

TEST_CASE("a consult of constant experts trains to the majority class") {
  std::vector<TrainedModel> constant;
  for (std::uint64_t s = 0; s < 3; ++s) {
    auto t = tiny_expert(s);
    for (auto* p : t.model.parameters())
      if (p->unit == 1) std::fill(p->value->data().begin(), p->value->data().end(), 0.0);
    constant.push_back(t);
  }
  auto ec = build_consult(constant, 2);
  const auto train = random_set(64, 8, 8);
  const auto val = random_set(32, 8, 9);
  auto config = quick(40);
  config.class_weights = {1.0, 1.0};
  config.learning_rate = 0.01;
  train_consult(ec, train, val, config);
  for (const auto& p : consult_predict(ec, val)) CHECK(p[0] > 0.5);
}

TEST_CASE("consult_predict is batch-independent and symmetric under expert permutation") {
  auto ec = build_consult({tiny_expert(1), tiny_expert(2), tiny_expert(1)}, 3);
  const auto data = random_set(7, 8, 1);
  const auto batched = consult_predict(ec, data);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto single = consult_predict(ec, data.subset({i}));
    CHECK(single[0][0] == doctest::Approx(batched[i][0]).epsilon(1e-12));
    CHECK(std::abs(row_sum(batched[i]) - 1.0) < 1e-9);
  }
  const auto again = consult_predict(ec, data);
  CHECK(again == batched);

  // swap experts 0 and 2 (identical weights); the head rows swap with them
  std::vector<TrainedModel> swapped{ec.experts()[2], ec.experts()[1], ec.experts()[0]};
  nn::ModelGraph head = ec.head();
  auto state = head.state();
  auto& w = state[0].tensor;  // [6, h1]
  const std::size_t cols = w.dim(1);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < cols; ++c) std::swap(w.data()[r * cols + c], w.data()[(4 + r) * cols + c]);
  head.load_state(state);
  const ConsultEnsemble permuted(swapped, head);
  const auto p = consult_predict(permuted, data);
  for (std::size_t i = 0; i < data.size(); ++i) CHECK(p[i][1] == doctest::Approx(batched[i][1]).epsilon(1e-12));
}

TEST_CASE("expert selection ranks by validation accuracy") {
  std::vector<TrainedModel> c;
  for (double acc : {0.7, 0.9, 0.8, 0.9}) {
    c.push_back(tiny_expert(1));
    c.back().meta["val_accuracy"] = acc;
  }
  CHECK(select_experts(c, 3) == std::vector<std::size_t>{1, 3, 2});
  CHECK_THROWS_AS(select_experts(c, 5), std::invalid_argument);
}

TEST_CASE("consult bundle round trip") {
  TempDir dir("bundle");
  auto ec = build_consult({tiny_expert(1), tiny_expert(2)}, 3);
  train_consult(ec, random_set(16, 8, 1), random_set(8, 8, 2), quick(2));
  save_consult(ec, dir / "ec");
  const auto back = load_consult(dir / "ec");
  const auto data = random_set(6, 8, 3);
  CHECK(consult_predict(back, data) == consult_predict(ec, data));
  CHECK(back.expert_snapshot() == ec.expert_snapshot());
  CHECK(bundle_hash(dir / "ec") == bundle_hash(dir / "ec"));
  CHECK(bundle_hash(dir / "ec").size() == 64);
}

TEST_CASE("synthetic classes are learnably separable by a plain conv classifier") {
  TempDir dir("learnable");
  data::SyntheticConfig config;
  config.seed = 3;
  const auto ds = data::generate_synthetic(config, dir.path());
  data::FeaturizeOptions options;
  const auto planes = data::featurize_manifest(ds.manifest, options);
  const auto plan = data::plan_splits(ds.manifest, 1, 0.8, 1);
  const auto train_all = data::build_dataset(ds.manifest, planes, plan.repetitions[0].train, InputMode::fused);
  const auto test = data::build_dataset(ds.manifest, planes, plan.repetitions[0].test, InputMode::fused);
  const auto [train, val] = data::carve_validation(train_all, 0.2, 2);
  nn::ModelGraph model({3, 64, 64}, topology(Family::plain_shallow).layers(), 1);
  nn::TrainConfig c;
  c.max_epochs = 60;
  c.early_stop_patience = 15;
  nn::train(model, train, val, c);
  const auto eval = nn::evaluate(model, test, c.class_weights);
  MESSAGE("held-out accuracy " << eval.accuracy);
  CHECK(eval.accuracy >= 0.85);
}
