#include "fusecad/experts/consult.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "fusecad/hash.hpp"
#include "fusecad/parallel.hpp"
#include "fusecad/rng.hpp"
#include "fusecad/serialize.hpp"

namespace fs = std::filesystem;

namespace fusecad::experts {

namespace {

template <class T>
T meta_value(const nlohmann::json& meta, const char* key, T fallback) {
  return meta.is_object() ? meta.value(key, fallback) : fallback;
}

}  // namespace

std::vector<nn::LayerSpec> stacking_head_layers(std::pair<std::size_t, std::size_t> hidden, std::size_t init_fan_in) {
  using nn::LayerKind;
  using nn::LayerSpec;
  if (hidden.first == 0 || hidden.second == 0) throw std::invalid_argument("head sizes must be positive");
  LayerSpec first = LayerSpec::dense(hidden.first);
  first.init_fan_in = init_fan_in;
  return {first,
          LayerSpec::simple(LayerKind::relu),
          LayerSpec::dense(hidden.second),
          LayerSpec::simple(LayerKind::relu),
          LayerSpec::dense(2),
          LayerSpec::simple(LayerKind::softmax)};
}

ConsultEnsemble::ConsultEnsemble(std::vector<TrainedModel> experts, nn::ModelGraph head)
    : experts_(std::move(experts)), head_(std::move(head)) {
  if (experts_.size() < 2) throw std::invalid_argument("a consult needs at least 2 experts");
  for (const auto& e : experts_) {
    if (e.model.input_shape() != experts_.front().model.input_shape())
      throw std::invalid_argument("expert input shapes differ: " + ad::shape_string(e.model.input_shape()) + " vs " +
                                  ad::shape_string(experts_.front().model.input_shape()));
    if (e.model.output_shape() != ad::Shape{2})
      throw std::invalid_argument("expert " + e.name + " does not emit a probability pair");
  }
  if (head_.input_shape() != ad::Shape{2 * experts_.size()})
    throw std::invalid_argument("stacking head input must be 2n wide");
  for (auto& e : experts_) e.model.freeze(1.0, 0);
}

std::vector<nn::Parameter*> ConsultEnsemble::parameters() { return head_.parameters(); }

ad::Var ConsultEnsemble::probabilities(const ad::Var& inputs) const {
  std::vector<ad::Var> parts;
  for (const auto& e : experts_) parts.push_back(ad::stop_gradient(e.model.forward(inputs).output));
  return ad::concat(parts, 1);
}

ad::Var ConsultEnsemble::logits(const nn::Batch& batch) const {
  if (batch.aux && batch.aux->shape.size() == 2 && batch.aux->shape[1] == 2 * size())
    return head_.forward(batch.aux).logits;
  return head_.forward(probabilities(batch.inputs)).logits;
}

std::vector<double> ConsultEnsemble::expert_outputs(const nn::Dataset& data, std::size_t jobs) const {
  const std::size_t n = size();
  std::vector<double> out(data.size() * 2 * n);
  parallel_for(n, jobs, [&](std::size_t k) {
    const auto p = nn::predict(experts_[k].model, data);
    for (std::size_t i = 0; i < p.size(); ++i) {
      out[i * 2 * n + 2 * k] = p[i][0];
      out[i * 2 * n + 2 * k + 1] = p[i][1];
    }
  });
  return out;
}

nn::Dataset ConsultEnsemble::with_expert_outputs(const nn::Dataset& data, std::size_t jobs) const {
  nn::Dataset d = data;
  d.aux_width = 2 * size();
  d.aux = expert_outputs(data, jobs);
  return d;
}

std::string ConsultEnsemble::expert_snapshot() const {
  std::string bytes;
  for (const auto& e : experts_) bytes += ad::fct_bytes(e.model.state());
  return bytes;
}

ConsultEnsemble build_consult(std::vector<TrainedModel> experts, std::uint64_t seed,
                              std::pair<std::size_t, std::size_t> hidden) {
  if (experts.size() < 2) throw std::invalid_argument("a consult needs at least 2 experts");
  const std::size_t width = 2 * experts.size();
  nn::ModelGraph head({width}, stacking_head_layers(hidden), seed);
  ConsultEnsemble ensemble(std::move(experts), std::move(head));
  ensemble.meta["head_seed"] = seed;
  return ensemble;
}

nn::TrainHistory train_consult(ConsultEnsemble& ensemble, const nn::Dataset& train_set, const nn::Dataset& val_set,
                               const nn::TrainConfig& config, std::size_t jobs) {
  const nn::Dataset train_cached = ensemble.with_expert_outputs(train_set, jobs);
  const nn::Dataset val_cached = ensemble.with_expert_outputs(val_set, jobs);
  auto history = nn::train(ensemble, train_cached, val_cached, config);
  ensemble.meta["config"] = config;
  ensemble.meta["history"] = history;
  return history;
}

std::vector<std::array<double, 2>> consult_predict(const ConsultEnsemble& ensemble, const nn::Dataset& data) {
  if (data.sample_shape != ensemble.input_shape())
    throw ad::ShapeError("consult input", data.sample_shape, ensemble.input_shape());
  return nn::predict(ensemble, data);
}

std::vector<std::size_t> select_experts(const std::vector<TrainedModel>& candidates, std::size_t n) {
  if (n > candidates.size())
    throw std::invalid_argument("cannot select " + std::to_string(n) + " of " + std::to_string(candidates.size()) +
                                " experts");
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  auto acc = [&](std::size_t i) { return meta_value(candidates[i].meta, "val_accuracy", 0.0); };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return acc(a) > acc(b); });
  order.resize(n);
  return order;
}

void save_consult(const ConsultEnsemble& ensemble, const fs::path& directory) {
  fs::create_directories(directory);
  nlohmann::json experts = nlohmann::json::array();
  for (std::size_t k = 0; k < ensemble.size(); ++k) {
    const auto& e = ensemble.experts()[k];
    const std::string stem = "expert_" + std::to_string(k);
    save_trained(e, directory / stem);
    experts.push_back({{"file", stem},
                       {"name", e.name},
                       {"rank", k + 1},
                       {"family", meta_value(e.meta, "family", std::string())},
                       {"freeze_fraction", meta_value(e.meta, "freeze_fraction", 0.0)},
                       {"val_accuracy", meta_value(e.meta, "val_accuracy", 0.0)}});
  }
  TrainedModel head{"stacking_head", ensemble.head(), {}, {}, {}};
  if (ensemble.meta.contains("config")) head.config = ensemble.meta["config"].get<nn::TrainConfig>();
  if (ensemble.meta.contains("history")) head.history = ensemble.meta["history"].get<nn::TrainHistory>();
  save_trained(head, directory / "head");
  nlohmann::json j{{"n", ensemble.size()}, {"experts", experts}, {"head", "head"}, {"meta", ensemble.meta}};
  std::ofstream out(directory / "consult.json");
  if (!out) throw std::runtime_error("cannot write " + (directory / "consult.json").string());
  out << j.dump(2) << '\n';
}

ConsultEnsemble load_consult(const fs::path& directory) {
  std::ifstream in(directory / "consult.json");
  if (!in) throw std::runtime_error("no consult bundle at " + directory.string());
  const nlohmann::json j = nlohmann::json::parse(in);
  std::vector<TrainedModel> experts;
  for (const auto& e : j.at("experts")) experts.push_back(load_trained(directory / e.at("file").get<std::string>()));
  TrainedModel head = load_trained(directory / j.at("head").get<std::string>());
  ConsultEnsemble ensemble(std::move(experts), std::move(head.model));
  ensemble.meta = j.value("meta", nlohmann::json::object());
  return ensemble;
}

std::string bundle_hash(const fs::path& directory) {
  std::ifstream in(directory / "consult.json");
  if (!in) throw std::runtime_error("no consult bundle at " + directory.string());
  const nlohmann::json j = nlohmann::json::parse(in);
  std::vector<std::string> files{"consult.json"};
  auto add_stem = [&](const std::string& stem) {
    files.push_back(stem + ".fct");
    files.push_back(stem + ".json");
  };
  add_stem(j.at("head").get<std::string>());
  for (const auto& e : j.at("experts")) add_stem(e.at("file").get<std::string>());
  std::sort(files.begin(), files.end());
  std::string joined;
  for (const auto& f : files) joined += f + ":" + sha256_file(directory / f) + "\n";
  return sha256_hex(joined);
}

}  // namespace fusecad::experts
