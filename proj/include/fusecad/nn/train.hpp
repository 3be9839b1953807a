#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fusecad/nn/loss.hpp"
#include "fusecad/nn/model.hpp"
#include "json.hpp"

namespace fusecad::nn {

/// Samples stored as one flat float64 block, with an optional auxiliary
/// input row per sample (used for precomputed consult cues).
struct Dataset {
  ad::Shape sample_shape;
  std::vector<double> inputs;
  std::size_t aux_width = 0;
  std::vector<double> aux;
  std::vector<int> labels;
  std::vector<std::string> patients;  // may be empty
  std::vector<std::size_t> origin;    // index of each sample in its source collection

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t sample_size() const { return ad::shape_size(sample_shape); }
  bool empty() const noexcept { return labels.empty(); }

  /// Appends one sample; `aux_row` must have `aux_width` values.
  void push(std::span<const double> sample, int label, std::string patient = {}, std::span<const double> aux_row = {},
            std::size_t source_index = 0);
  Dataset subset(const std::vector<std::size_t>& indices) const;
  /// Copies the selected samples into constant graph leaves.
  Batch batch(const std::vector<std::size_t>& indices) const;
  /// Throws std::invalid_argument when the buffers disagree with the shapes.
  void validate() const;
};

struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 1000;
  ClassWeights class_weights;
  std::size_t early_stop_patience = 50;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Epochs are numbered from 1.
struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t convergence_epoch = 0;  // epoch of the best validation loss
  double best_val_loss = 0.0;
  bool stopped_early = false;

  bool operator==(const TrainHistory&) const = default;
};

void to_json(nlohmann::json& j, const TrainHistory& h);
void from_json(const nlohmann::json& j, TrainHistory& h);

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam with per-parameter moments. Frozen parameters are skipped.
class Adam {
 public:
  explicit Adam(std::vector<Parameter*> params, double learning_rate = 0.001, double beta1 = 0.9,
                double beta2 = 0.999, double epsilon = 1e-8);

  /// Applies one update from the current gradient buffers. Throws
  /// std::logic_error when a trainable parameter has no gradient.
  void step();
  /// Zeroes the gradients of trainable parameters.
  void zero_grad();
  std::size_t steps() const noexcept { return t_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

/// Mean weighted cross-entropy and accuracy (threshold 0.5 for two classes,
/// argmax otherwise; models with more than two classes are unweighted).
struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

Evaluation evaluate(const Classifier& model, const Dataset& data, ClassWeights weights, std::size_t batch_size = 64);

/// Softmax probabilities [p(benign), p(malignant)] per sample.
std::vector<std::array<double, 2>> predict(const Classifier& model, const Dataset& data, std::size_t batch_size = 64);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch training with per-epoch seeded shuffling and early stopping on
/// validation loss; the best parameters are restored before returning.
TrainHistory train(Classifier& model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& config,
                   const EpochCallback& on_epoch = {});

/// Runs forward and backward on one batch; returns the loss. Gradients
/// accumulate into the parameters and are not zeroed here.
double accumulate_gradients(Classifier& model, const Batch& batch, ClassWeights weights);

}  // namespace fusecad::nn
