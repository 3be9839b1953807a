#include "fusecad/experts/experts.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "fusecad/rng.hpp"
#include "fusecad/serialize.hpp"
#include "fusecad/texture.hpp"

namespace fs = std::filesystem;

namespace fusecad::experts {

using nn::LayerKind;
using nn::LayerSpec;

namespace {

const std::vector<std::pair<Family, std::string>>& family_names() {
  static const std::vector<std::pair<Family, std::string>> names{
      {Family::plain_shallow, "plain_shallow"},       {Family::plain_deep, "plain_deep"},
      {Family::residual, "residual"},                 {Family::grouped_residual, "grouped_residual"},
      {Family::multi_branch, "multi_branch"},         {Family::densely_connected, "densely_connected"},
  };
  return names;
}

LayerSpec relu() { return LayerSpec::simple(LayerKind::relu); }
LayerSpec pool() { return LayerSpec::simple(LayerKind::max_pool); }
LayerSpec gap() { return LayerSpec::simple(LayerKind::global_avg_pool); }

}  // namespace

std::string to_string(Family family) {
  for (const auto& [f, name] : family_names())
    if (f == family) return name;
  throw std::invalid_argument("unknown family");
}

Family parse_family(const std::string& text) {
  for (const auto& [f, name] : family_names())
    if (name == text) return f;
  throw std::invalid_argument("unknown expert family '" + text + "'");
}

const std::vector<Family>& all_families() {
  static const std::vector<Family> families{Family::plain_shallow, Family::plain_deep,   Family::residual,
                                            Family::grouped_residual, Family::multi_branch, Family::densely_connected};
  return families;
}

std::string ExpertTopology::name() const {
  return variant == 0 ? to_string(family) : to_string(family) + "_v" + std::to_string(variant + 1);
}

std::vector<LayerSpec> ExpertTopology::layers(std::size_t classes) const {
  std::vector<LayerSpec> out{input_norm};
  out.insert(out.end(), body.begin(), body.end());
  out.push_back(LayerSpec::dense(classes));
  out.push_back(LayerSpec::simple(LayerKind::softmax));
  return out;
}

ExpertTopology topology(Family family, int variant, std::size_t resolution) {
  if (resolution < 32 || resolution % 8) throw std::invalid_argument("expert resolution must be a multiple of 8, >= 32");
  if (variant != 0 && !(family == Family::densely_connected && variant == 1))
    throw std::invalid_argument("no variant " + std::to_string(variant) + " of " + to_string(family));
  ExpertTopology t;
  t.family = family;
  t.variant = variant;
  t.resolution = resolution;
  t.input_norm = LayerSpec::input_norm(8, 2);
  auto& b = t.body;
  switch (family) {
    case Family::plain_shallow:
      b = {pool(), LayerSpec::conv(8, 5, 1, 2), relu(), pool(), LayerSpec::conv(16), relu(), gap()};
      break;
    case Family::plain_deep:
      b = {pool(), LayerSpec::conv(8),  relu(), LayerSpec::conv(8),  relu(), pool(), LayerSpec::conv(16),
           relu(), LayerSpec::conv(16), relu(), LayerSpec::conv(16), relu(), gap()};
      break;
    case Family::residual:
      b = {pool(), LayerSpec::residual(12), pool(), LayerSpec::residual(16), gap()};
      break;
    case Family::grouped_residual:
      b = {pool(), LayerSpec::residual(16, 4), pool(), LayerSpec::residual(16, 4), gap()};
      break;
    case Family::multi_branch:
      b = {pool(), LayerSpec::inception({4, 8, 4}), pool(), LayerSpec::inception({8, 8, 4}), gap()};
      break;
    case Family::densely_connected:
      if (variant == 0)
        b = {pool(), LayerSpec::dense_block(3, 6), pool(), LayerSpec::dense_block(3, 6), gap()};
      else
        b = {pool(), LayerSpec::dense_block(4, 4), LayerSpec::conv(12, 1, 1, 0), relu(), pool(),
             LayerSpec::dense_block(4, 4), gap()};
      break;
  }
  b.push_back(LayerSpec::dense(32));
  b.push_back(relu());
  return t;
}

std::vector<ExpertTopology> candidate_topologies(std::size_t resolution) {
  std::vector<ExpertTopology> out;
  for (Family f : all_families()) out.push_back(topology(f, 0, resolution));
  out.push_back(topology(Family::densely_connected, 1, resolution));
  return out;
}

void save_trained(const TrainedModel& trained, const fs::path& stem) {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  ad::save_fct(fs::path(stem.string() + ".fct"), trained.model.state());
  nlohmann::json j{{"name", trained.name},       {"model", trained.model.describe()}, {"config", trained.config},
                   {"history", trained.history}, {"meta", trained.meta}};
  std::ofstream out(stem.string() + ".json");
  if (!out) throw std::runtime_error("cannot write " + stem.string() + ".json");
  out << j.dump(2) << '\n';
}

TrainedModel load_trained(const fs::path& stem) {
  std::ifstream in(stem.string() + ".json");
  if (!in) throw std::runtime_error("cannot read " + stem.string() + ".json");
  const nlohmann::json j = nlohmann::json::parse(in);
  nn::ModelGraph model = nn::ModelGraph::from_description(j.at("model"));
  model.load_state(ad::load_fct(fs::path(stem.string() + ".fct")));
  return {j.at("name").get<std::string>(), std::move(model), j.at("config").get<nn::TrainConfig>(),
          j.at("history").get<nn::TrainHistory>(), j.value("meta", nlohmann::json::object())};
}

// ---- proxy pretraining ---------------------------------------------------------

namespace {

GrayImage proxy_image(ProxyTexture kind, std::size_t size, Rng& rng) {
  const double n = static_cast<double>(size);
  std::vector<double> v(size * size, 0.0);
  switch (kind) {
    case ProxyTexture::stripes: {
      const double angle = uniform(rng, 0.0, std::numbers::pi);
      const double period = uniform(rng, 4.0, 12.0);
      const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double t = std::cos(angle) * static_cast<double>(x) + std::sin(angle) * static_cast<double>(y);
          v[y * size + x] = 0.5 + 0.4 * std::sin(2.0 * std::numbers::pi * t / period + phase);
        }
      break;
    }
    case ProxyTexture::blobs: {
      const int count = static_cast<int>(uniform_int(rng, 3, 7));
      for (int k = 0; k < count; ++k) {
        const double cx = uniform(rng, 0.0, n), cy = uniform(rng, 0.0, n);
        const double r = uniform(rng, 0.06, 0.16) * n;
        for (std::size_t y = 0; y < size; ++y)
          for (std::size_t x = 0; x < size; ++x) {
            const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
            v[y * size + x] += 0.8 * std::exp(-(dx * dx + dy * dy) / (2.0 * r * r));
          }
      }
      for (double& p : v) p = 0.15 + std::min(p, 0.8);
      break;
    }
    case ProxyTexture::checker: {
      const double cell = uniform(rng, 4.0, 12.0);
      const double angle = uniform(rng, 0.0, std::numbers::pi / 2.0);
      const double ox = uniform(rng, 0.0, cell), oy = uniform(rng, 0.0, cell);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double u = std::cos(angle) * static_cast<double>(x) + std::sin(angle) * static_cast<double>(y) + ox;
          const double w = -std::sin(angle) * static_cast<double>(x) + std::cos(angle) * static_cast<double>(y) + oy;
          const bool on = (static_cast<long>(std::floor(u / cell)) + static_cast<long>(std::floor(w / cell))) % 2 == 0;
          v[y * size + x] = on ? 0.75 : 0.25;
        }
      break;
    }
    case ProxyTexture::speckle: {
      const double density = uniform(rng, 0.04, 0.12);
      for (double& p : v) p = 0.3 + (uniform01(rng) < density ? uniform(rng, 0.4, 0.6) : 0.0);
      break;
    }
  }
  const double gain = uniform(rng, 0.7, 1.1);
  const double offset = uniform(rng, -0.05, 0.1);
  std::vector<std::uint8_t> pixels(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double p = gain * v[i] + offset + normal(rng, 0.0, 0.04);
    pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(p, 0.0, 1.0) * 255.0));
  }
  return GrayImage(size, size, std::move(pixels));
}

}  // namespace

nn::Dataset proxy_dataset(std::size_t per_class, std::size_t resolution, std::uint64_t seed) {
  if (per_class == 0) throw std::invalid_argument("proxy dataset needs at least one sample per class");
  nn::Dataset d;
  d.sample_shape = {3, resolution, resolution};
  std::size_t index = 0;
  for (std::size_t i = 0; i < per_class; ++i)
    for (std::size_t c = 0; c < kProxyClasses; ++c, ++index) {
      Rng rng(derive_seed(seed, {c, i}));
      const GrayImage img = proxy_image(static_cast<ProxyTexture>(c), resolution, rng);
      const auto view = model_views(featurize(img), InputMode::fused, resolution).front();
      d.push(view.data(), static_cast<int>(c), {}, {}, index);
    }
  return d;
}

TrainedModel pretrain_expert(const ExpertTopology& topology, const nn::Dataset& proxy_train,
                             const nn::Dataset& proxy_val, const nn::TrainConfig& config) {
  const ad::Shape input{3, topology.resolution, topology.resolution};
  if (proxy_train.sample_shape != input || proxy_val.sample_shape != input)
    throw std::invalid_argument("proxy data does not match the expert input " + ad::shape_string(input));
  TrainedModel out{topology.name(), nn::ModelGraph(input, topology.layers(kProxyClasses), derive_seed(config.seed, {0})),
                   config, {}, {}};
  out.history = nn::train(out.model, proxy_train, proxy_val, config);
  const auto eval = nn::evaluate(out.model, proxy_val, config.class_weights);
  out.meta = {{"family", to_string(topology.family)},
              {"variant", topology.variant},
              {"stage", "pretrained"},
              {"proxy_val_accuracy", eval.accuracy}};
  return out;
}

TrainedModel finetune_expert(const TrainedModel& pretrained, double freeze_fraction, const nn::Dataset& train_set,
                             const nn::Dataset& val_set, const nn::TrainConfig& config) {
  if (!(freeze_fraction >= 0.0 && freeze_fraction <= 1.0)) throw std::invalid_argument("freeze fraction must be in [0, 1]");
  TrainedModel out{pretrained.name, pretrained.model, config, {}, pretrained.meta};
  out.model.replace_head(2, derive_seed(config.seed, {1}));
  out.model.freeze(freeze_fraction, 1);
  out.history = nn::train(out.model, train_set, val_set, config);
  const auto eval = nn::evaluate(out.model, val_set, config.class_weights);
  out.meta["stage"] = "finetuned";
  out.meta["freeze_fraction"] = freeze_fraction;
  out.meta["frozen_units"] = out.model.frozen_units();
  out.meta["val_accuracy"] = eval.accuracy;
  out.meta["val_loss"] = eval.loss;
  return out;
}

}  // namespace fusecad::experts
