#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fusecad/experts/consult.hpp"

namespace fusecad::kdl {

/// What the student contributes to the head: its penultimate feature vector
/// or its own 2-class probabilities.
enum class CueJoin { features, probabilities };

std::string to_string(CueJoin join);
CueJoin parse_cue_join(const std::string& text);

struct StudentSpec {
  std::size_t resolution = 64;
  std::size_t stem_channels = 8;
  std::size_t block_layers = 4;
  std::size_t growth = 8;
  std::size_t feature_width = 32;
  CueJoin cue_join = CueJoin::features;

  /// input_norm(s2), pool, dense block, pool, dense block, GAP, dense + relu
  /// (+ dense(2) + softmax when joining probabilities).
  std::vector<nn::LayerSpec> layers() const;
  /// Width of the student output fed to the head.
  std::size_t output_width() const { return cue_join == CueJoin::features ? feature_width : 2; }
};

void to_json(nlohmann::json& j, const StudentSpec& s);
void from_json(const nlohmann::json& j, StudentSpec& s);

inline constexpr std::size_t kCueWidth = 2;

/// Student network plus a 3-layer head over concat(student output, cue).
/// The cue comes from the batch's aux block when present, otherwise from the
/// attached consult through stop_gradient. Without a consult (cue width 0)
/// the model is the unaided student.
class KdlModel : public nn::Classifier {
 public:
  KdlModel(StudentSpec spec, nn::ModelGraph student, nn::ModelGraph head,
           std::shared_ptr<const experts::ConsultEnsemble> consult, std::size_t cue_width);

  const StudentSpec& spec() const noexcept { return spec_; }
  const nn::ModelGraph& student() const noexcept { return student_; }
  nn::ModelGraph& student() noexcept { return student_; }
  const nn::ModelGraph& head() const noexcept { return head_; }
  nn::ModelGraph& head() noexcept { return head_; }
  const std::shared_ptr<const experts::ConsultEnsemble>& consult() const noexcept { return consult_; }
  std::size_t cue_width() const noexcept { return cue_width_; }
  bool aided() const noexcept { return cue_width_ > 0; }

  /// Student and head parameters.
  std::vector<nn::Parameter*> parameters() override;
  ad::Var logits(const nn::Batch& batch) const override;
  /// Head logits given an already built student forward pass.
  ad::Var head_logits(const nn::ForwardResult& student_pass, const nn::Batch& batch) const;
  /// Cue node [B, 2] for the batch; throws when no cue is available.
  ad::Var cue(const nn::Batch& batch) const;

  /// Copy of `data` whose aux block holds the consult's probabilities.
  nn::Dataset with_cues(const nn::Dataset& data, std::size_t jobs = 1) const;

 private:
  StudentSpec spec_;
  nn::ModelGraph student_;
  nn::ModelGraph head_;
  std::shared_ptr<const experts::ConsultEnsemble> consult_;
  std::size_t cue_width_;
};

/// Student seeded with derive_seed(seed, {0}), head with derive_seed(seed, {1}).
/// The first head layer draws weights with the student's width as fan-in, so
/// a zero cue reproduces the unaided model exactly.
KdlModel build_kdl(const StudentSpec& spec, std::shared_ptr<const experts::ConsultEnsemble> consult,
                   std::uint64_t seed, std::pair<std::size_t, std::size_t> hidden = {experts::kHeadHidden1,
                                                                                     experts::kHeadHidden2});
/// The same student and head without a cue.
KdlModel build_unaided(const StudentSpec& spec, std::uint64_t seed,
                       std::pair<std::size_t, std::size_t> hidden = {experts::kHeadHidden1, experts::kHeadHidden2});
/// Aided model whose cue must always be supplied through the batch aux block.
KdlModel build_kdl_external_cue(const StudentSpec& spec, std::uint64_t seed,
                                std::pair<std::size_t, std::size_t> hidden = {experts::kHeadHidden1,
                                                                              experts::kHeadHidden2});

/// Trains student and head; consult cues are precomputed once when the data
/// carries none.
nn::TrainHistory train_kdl(KdlModel& model, const nn::Dataset& train_set, const nn::Dataset& val_set,
                           const nn::TrainConfig& config, const nn::EpochCallback& on_epoch = {},
                           std::size_t jobs = 1);

std::vector<std::array<double, 2>> kdl_predict(const KdlModel& model, const nn::Dataset& data);

/// Directory: kdl.json, student.{fct,json}, head.{fct,json}. The consult is
/// referenced by its bundle hash and its path relative to `directory`, not copied.
void save_kdl(const KdlModel& model, const nn::TrainConfig& config, const nn::TrainHistory& history,
              const std::filesystem::path& directory, const std::optional<std::filesystem::path>& consult_bundle);
/// Loads the consult from the recorded path and verifies its hash.
KdlModel load_kdl(const std::filesystem::path& directory);

}  // namespace fusecad::kdl
