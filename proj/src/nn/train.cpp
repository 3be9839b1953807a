#include "fusecad/nn/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fusecad/rng.hpp"

namespace fusecad::nn {

void Dataset::push(std::span<const double> sample, int label, std::string patient, std::span<const double> aux_row,
                   std::size_t source_index) {
  if (sample.size() != sample_size())
    throw std::invalid_argument("sample has " + std::to_string(sample.size()) + " values, expected " +
                                std::to_string(sample_size()));
  if (aux_row.size() != aux_width)
    throw std::invalid_argument("aux row has " + std::to_string(aux_row.size()) + " values, expected " +
                                std::to_string(aux_width));
  inputs.insert(inputs.end(), sample.begin(), sample.end());
  aux.insert(aux.end(), aux_row.begin(), aux_row.end());
  labels.push_back(label);
  if (!patient.empty() || !patients.empty()) {
    patients.resize(labels.size() - 1);
    patients.push_back(std::move(patient));
  }
  origin.push_back(source_index);
}

void Dataset::validate() const {
  const std::size_t n = size();
  if (inputs.size() != n * sample_size()) throw std::invalid_argument("dataset input buffer does not match its shape");
  if (aux.size() != n * aux_width) throw std::invalid_argument("dataset aux buffer does not match its width");
  if (!patients.empty() && patients.size() != n) throw std::invalid_argument("dataset patient list length mismatch");
  if (!origin.empty() && origin.size() != n) throw std::invalid_argument("dataset origin list length mismatch");
  for (int y : labels)
    if (y < 0) throw std::invalid_argument("dataset labels must be non-negative");
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.sample_shape = sample_shape;
  out.aux_width = aux_width;
  const std::size_t s = sample_size();
  out.inputs.reserve(indices.size() * s);
  for (std::size_t i : indices) {
    if (i >= size()) throw std::out_of_range("dataset index out of range");
    out.inputs.insert(out.inputs.end(), inputs.begin() + i * s, inputs.begin() + (i + 1) * s);
    out.aux.insert(out.aux.end(), aux.begin() + i * aux_width, aux.begin() + (i + 1) * aux_width);
    out.labels.push_back(labels[i]);
    if (!patients.empty()) out.patients.push_back(patients[i]);
    out.origin.push_back(origin.empty() ? i : origin[i]);
  }
  return out;
}

Batch Dataset::batch(const std::vector<std::size_t>& indices) const {
  const std::size_t s = sample_size();
  ad::Shape shape{indices.size()};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  std::vector<double> x;
  x.reserve(indices.size() * s);
  std::vector<double> a;
  a.reserve(indices.size() * aux_width);
  Batch b;
  for (std::size_t i : indices) {
    x.insert(x.end(), inputs.begin() + i * s, inputs.begin() + (i + 1) * s);
    a.insert(a.end(), aux.begin() + i * aux_width, aux.begin() + (i + 1) * aux_width);
    b.labels.push_back(labels[i]);
  }
  b.inputs = ad::constant(ad::Tensor(std::move(shape), std::move(x)));
  if (aux_width) b.aux = ad::constant(ad::Tensor({indices.size(), aux_width}, std::move(a)));
  return b;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw std::invalid_argument("learning_rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
  if (early_stop_patience >= max_epochs) throw std::invalid_argument("early_stop_patience must be < max_epochs");
  if (!(class_weights.benign > 0.0) || !(class_weights.malignant > 0.0))
    throw std::invalid_argument("class weights must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate},
       {"batch_size", c.batch_size},
       {"max_epochs", c.max_epochs},
       {"class_weights", {c.class_weights.benign, c.class_weights.malignant}},
       {"early_stop_patience", c.early_stop_patience},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.seed = j.value("seed", c.seed);
  if (j.contains("class_weights")) {
    const auto& w = j.at("class_weights");
    c.class_weights = {w.at(0).get<double>(), w.at(1).get<double>()};
  }
}

void to_json(nlohmann::json& j, const TrainHistory& h) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : h.epochs)
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"val_acc", e.val_acc}});
  j = {{"epochs", epochs},
       {"convergence_epoch", h.convergence_epoch},
       {"best_val_loss", h.best_val_loss},
       {"stopped_early", h.stopped_early}};
}

void from_json(const nlohmann::json& j, TrainHistory& h) {
  h = TrainHistory{};
  for (const auto& e : j.at("epochs"))
    h.epochs.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                        e.at("val_loss").get<double>(), e.at("val_acc").get<double>()});
  h.convergence_epoch = j.at("convergence_epoch").get<std::size_t>();
  h.best_val_loss = j.at("best_val_loss").get<double>();
  h.stopped_early = j.at("stopped_early").get<bool>();
}

Adam::Adam(std::vector<Parameter*> params, double learning_rate, double beta1, double beta2, double epsilon)
    : params_(std::move(params)), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {
  for (const auto* p : params_) {
    m_.emplace_back(p->value->size(), 0.0);
    v_.emplace_back(p->value->size(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto* p : params_)
    if (p->trainable() && p->value->has_grad()) p->value->zero_grad();
}

void Adam::step() {
  for (const auto* p : params_)
    if (p->trainable() && !p->value->has_grad())
      throw std::logic_error("no gradient for trainable parameter '" + p->name + "'");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& t = *params_[k]->value;
    if (!t.requires_grad()) continue;
    auto g = t.grad();
    auto w = t.data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

namespace {

// Binary problems use the configured pair; proxy tasks with more classes are unweighted.
std::vector<double> weight_vector(ClassWeights w, std::size_t classes) {
  if (classes == 2) return {w.benign, w.malignant};
  return std::vector<double>(classes, 1.0);
}

std::vector<std::size_t> range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> out(end - begin);
  std::iota(out.begin(), out.end(), begin);
  return out;
}

void check_logits(const ad::Var& logits, std::size_t batch) {
  if (logits->shape.size() != 2 || logits->shape[0] != batch || logits->shape[1] < 2)
    throw ad::ShapeError("classifier", "expected logits [" + std::to_string(batch) + ", classes], got " +
                                           ad::shape_string(logits->shape));
}

int predicted_class(const double* p, std::size_t classes) {
  if (classes == 2) return p[1] >= 0.5 ? 1 : 0;
  return static_cast<int>(std::max_element(p, p + classes) - p);
}

}  // namespace

double accumulate_gradients(Classifier& model, const Batch& batch, ClassWeights weights) {
  auto logits = model.logits(batch);
  check_logits(logits, batch.labels.size());
  auto loss = ad::weighted_cross_entropy(logits, batch.labels, weight_vector(weights, logits->shape[1]));
  const double value = ad::forward(loss)[0];
  if (!std::isfinite(value)) return value;
  ad::backward(loss);
  return value;
}

Evaluation evaluate(const Classifier& model, const Dataset& data, ClassWeights weights, std::size_t batch_size) {
  if (data.empty()) throw std::invalid_argument("cannot evaluate on an empty dataset");
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const auto idx = range(start, std::min(data.size(), start + batch_size));
    const Batch b = data.batch(idx);
    auto logits = model.logits(b);
    check_logits(logits, idx.size());
    const std::size_t classes = logits->shape[1];
    auto node = ad::weighted_cross_entropy(logits, b.labels, weight_vector(weights, classes));
    loss += ad::forward(node)[0] * static_cast<double>(idx.size());
    // the loss node keeps the softmax probabilities in its scratch buffer
    for (std::size_t i = 0; i < idx.size(); ++i) {
      correct += predicted_class(node->scratch.data() + i * classes, classes) == b.labels[i];
    }
  }
  const auto n = static_cast<double>(data.size());
  return {loss / n, static_cast<double>(correct) / n};
}

std::vector<std::array<double, 2>> predict(const Classifier& model, const Dataset& data, std::size_t batch_size) {
  std::vector<std::array<double, 2>> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const auto idx = range(start, std::min(data.size(), start + batch_size));
    auto logits = model.logits(data.batch(idx));
    check_logits(logits, idx.size());
    if (logits->shape[1] != 2) throw ad::ShapeError("predict", "expected a two-class model");
    const auto p = ad::forward(ad::softmax(logits));
    for (std::size_t i = 0; i < idx.size(); ++i) out.push_back({p[2 * i], p[2 * i + 1]});
  }
  return out;
}

TrainHistory train(Classifier& model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& config,
                   const EpochCallback& on_epoch) {
  config.validate();
  train_set.validate();
  val_set.validate();
  if (train_set.empty()) throw std::invalid_argument("training set is empty");
  if (val_set.empty()) throw std::invalid_argument("validation set is empty");

  auto params = model.parameters();
  Adam adam(params, config.learning_rate);
  auto snapshot = [&] {
    std::vector<std::vector<double>> s;
    for (const auto* p : params) s.push_back(p->value->values());
    return s;
  };
  std::vector<std::vector<double>> best = snapshot();

  TrainHistory history;
  std::size_t since_best = 0;
  std::vector<std::size_t> order = range(0, train_set.size());
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    Rng rng(derive_seed(config.seed, {epoch}));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + start,
                                         order.begin() + std::min(order.size(), start + config.batch_size));
      adam.zero_grad();
      const double loss = accumulate_gradients(model, train_set.batch(idx), config.class_weights);
      if (!std::isfinite(loss))
        throw DivergenceError("training loss became non-finite at epoch " + std::to_string(epoch));
      adam.step();
      loss_sum += loss * static_cast<double>(idx.size());
    }
    const Evaluation val = evaluate(model, val_set, config.class_weights);
    if (!std::isfinite(val.loss))
      throw DivergenceError("validation loss became non-finite at epoch " + std::to_string(epoch));
    const EpochRecord record{epoch, loss_sum / static_cast<double>(train_set.size()), val.loss, val.accuracy};
    history.epochs.push_back(record);
    if (on_epoch) on_epoch(record);

    if (epoch == 1 || val.loss < history.best_val_loss) {
      history.best_val_loss = val.loss;
      history.convergence_epoch = epoch;
      best = snapshot();
      since_best = 0;
    } else if (++since_best >= config.early_stop_patience) {
      history.stopped_early = true;
      break;
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k)
    std::copy(best[k].begin(), best[k].end(), params[k]->value->data().begin());
  for (auto* p : params) p->value->drop_grad();
  return history;
}

}  // namespace fusecad::nn
