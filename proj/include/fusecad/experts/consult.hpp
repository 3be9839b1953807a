#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fusecad/experts/experts.hpp"

namespace fusecad::experts {

inline constexpr std::size_t kHeadHidden1 = 32;
inline constexpr std::size_t kHeadHidden2 = 16;

/// dense(h1) + relu, dense(h2) + relu, dense(2) + softmax. When
/// `init_fan_in` is non-zero the first layer draws its weights as if its
/// input were that wide.
std::vector<nn::LayerSpec> stacking_head_layers(std::pair<std::size_t, std::size_t> hidden = {kHeadHidden1, kHeadHidden2},
                                                std::size_t init_fan_in = 0);

/// n frozen experts whose probability pairs are concatenated into a trainable
/// 3-layer head. When a batch carries an aux block of width 2n it is taken as
/// the precomputed expert outputs.
class ConsultEnsemble : public nn::Classifier {
 public:
  ConsultEnsemble(std::vector<TrainedModel> experts, nn::ModelGraph head);

  std::size_t size() const noexcept { return experts_.size(); }
  const std::vector<TrainedModel>& experts() const noexcept { return experts_; }
  const nn::ModelGraph& head() const noexcept { return head_; }
  nn::ModelGraph& head() noexcept { return head_; }
  const ad::Shape& input_shape() const { return experts_.front().model.input_shape(); }

  /// Head parameters only.
  std::vector<nn::Parameter*> parameters() override;
  ad::Var logits(const nn::Batch& batch) const override;
  /// Probabilities [B, 2] for the given inputs, through stop_gradient on every expert.
  ad::Var probabilities(const ad::Var& inputs) const;

  /// Expert outputs [N, 2n] for every sample, row-major.
  std::vector<double> expert_outputs(const nn::Dataset& data, std::size_t jobs = 1) const;
  /// Copy of `data` whose aux block holds the expert outputs.
  nn::Dataset with_expert_outputs(const nn::Dataset& data, std::size_t jobs = 1) const;

  /// Byte snapshot of every expert's parameters.
  std::string expert_snapshot() const;

  nlohmann::json meta = nlohmann::json::object();

 private:
  std::vector<TrainedModel> experts_;
  nn::ModelGraph head_;
};

/// Throws std::invalid_argument for n < 2 or mismatched expert input shapes.
/// Every expert is fully frozen.
ConsultEnsemble build_consult(std::vector<TrainedModel> experts, std::uint64_t seed,
                              std::pair<std::size_t, std::size_t> hidden = {kHeadHidden1, kHeadHidden2});

/// Trains the head on cached expert outputs; experts are never touched.
nn::TrainHistory train_consult(ConsultEnsemble& ensemble, const nn::Dataset& train_set, const nn::Dataset& val_set,
                               const nn::TrainConfig& config, std::size_t jobs = 1);

std::vector<std::array<double, 2>> consult_predict(const ConsultEnsemble& ensemble, const nn::Dataset& data);

/// Indices of the top `n` candidates by meta["val_accuracy"], best first
/// (earlier index wins ties).
std::vector<std::size_t> select_experts(const std::vector<TrainedModel>& candidates, std::size_t n);

/// Directory: consult.json, head.{fct,json}, expert_<k>.{fct,json}.
void save_consult(const ConsultEnsemble& ensemble, const std::filesystem::path& directory);
ConsultEnsemble load_consult(const std::filesystem::path& directory);
/// SHA-256 over the files the bundle lists (consult.json, head, experts), in
/// name order. Other files in the directory are ignored.
std::string bundle_hash(const std::filesystem::path& directory);

}  // namespace fusecad::experts
