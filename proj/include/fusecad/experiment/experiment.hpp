#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fusecad/data/pipeline.hpp"
#include "fusecad/eval/metrics.hpp"
#include "fusecad/experts/consult.hpp"
#include "fusecad/kdl/kdl.hpp"

namespace fusecad::experiment {

using Log = std::function<void(const std::string&)>;

/// A manifest together with the fusion planes of its samples.
struct Corpus {
  data::DatasetManifest manifest;
  std::vector<ad::Tensor> planes;

  std::size_t resolution() const;
  nn::Dataset dataset(const std::vector<std::size_t>& indices, InputMode mode) const;
  nn::Dataset all(InputMode mode) const;
};

Corpus load_corpus(const std::filesystem::path& manifest, const data::FeaturizeOptions& options);
Corpus make_corpus(data::DatasetManifest manifest, const data::FeaturizeOptions& options);

/// Training knobs shared by the drivers below.
struct Schedule {
  nn::TrainConfig train;     // fine-tuning, stacking heads and students
  nn::TrainConfig pretrain;  // proxy task
  std::size_t proxy_per_class = 60;
  double validation_fraction = 0.1;  // patient-grouped carve from each training side
};

void to_json(nlohmann::json& j, const Schedule& s);
void from_json(const nlohmann::json& j, Schedule& s);

/// Pretrains every candidate topology on the proxy task; candidate k uses
/// derive_seed(seed, {k}).
std::vector<experts::TrainedModel> pretrain_candidates(std::size_t resolution, const Schedule& schedule,
                                                       std::uint64_t seed, std::size_t jobs = 1, const Log& log = {});

/// Directory with one `<name>.{fct,json}` pair per model plus `models.json`.
void save_models(const std::vector<experts::TrainedModel>& models, const std::filesystem::path& directory);
std::vector<experts::TrainedModel> load_models(const std::filesystem::path& directory);

/// Fine-tunes every pretrained model on `train` with a carved validation set;
/// model k trains with seed derive_seed(seed, {k}). meta["train_patients"]
/// lists the patients of `train`.
std::vector<experts::TrainedModel> finetune_candidates(const std::vector<experts::TrainedModel>& pretrained,
                                                       double freeze_fraction, const nn::Dataset& train,
                                                       const Schedule& schedule, std::uint64_t seed,
                                                       std::size_t jobs = 1, const Log& log = {});

/// Top-n candidates by validation accuracy with a head trained on `train`.
/// meta["train_patients"] lists every patient the consult and its experts
/// have seen.
experts::ConsultEnsemble fit_consult(const std::vector<experts::TrainedModel>& candidates, std::size_t n,
                                     const nn::Dataset& train, const Schedule& schedule, std::uint64_t seed,
                                     std::size_t jobs = 1);

/// Patients recorded in a consult's meta.
std::vector<std::string> consult_patients(const experts::ConsultEnsemble& consult);

/// Throws data::LeakageError when the consult has seen a patient of `manifest`.
void check_consult_disjoint(const experts::ConsultEnsemble& consult, const data::DatasetManifest& manifest);

/// Per-sample predictions for the listed corpus indices; views of one sample
/// are averaged.
std::vector<std::array<double, 2>> predict_samples(const nn::Classifier& model, const Corpus& corpus,
                                                   const std::vector<std::size_t>& indices, InputMode mode);

// ---- experiment drivers ------------------------------------------------------

struct GridCell {
  std::string family;  // topology name
  InputMode mode = InputMode::fused;
  double freeze_fraction = 0.0;

  std::string name() const;
};

/// One report per (pretrained model, input mode, freeze fraction): fine-tune
/// on each repetition's training side, score on its test side.
std::vector<eval::EvalReport> run_grid(const Corpus& corpus, const data::SplitPlan& plan,
                                       const std::vector<experts::TrainedModel>& pretrained,
                                       const std::vector<InputMode>& modes, const std::vector<double>& freezes,
                                       const Schedule& schedule, std::size_t jobs = 1, const Log& log = {});

/// EC-n for every requested n over experts fitted elsewhere (only the heads
/// train per repetition), followed by one report per single expert.
std::vector<eval::EvalReport> run_ec(const Corpus& corpus, const data::SplitPlan& plan,
                                     const std::vector<experts::TrainedModel>& finetuned,
                                     const std::vector<std::size_t>& sizes, const Schedule& schedule,
                                     std::size_t jobs = 1, const Log& log = {});

struct KdlOptions {
  kdl::StudentSpec student;
  bool unaided_baseline = true;
  bool keep_models = false;
  /// When set, each repetition's model is saved to `<dir>/run_<k>`.
  std::optional<std::filesystem::path> checkpoint_dir;
  /// Consult bundle referenced by saved checkpoints.
  std::optional<std::filesystem::path> consult_bundle;
};

struct KdlOutcome {
  eval::EvalReport kdl;
  std::optional<eval::EvalReport> unaided;
  std::vector<kdl::KdlModel> models;  // one per repetition when kept
};

/// KDL-EC-n, and optionally the unaided student, on every repetition. Both
/// arms share the repetition seed, so their students start identical.
KdlOutcome run_kdl(const Corpus& corpus, const data::SplitPlan& plan,
                   std::shared_ptr<const experts::ConsultEnsemble> consult, const KdlOptions& options,
                   const Schedule& schedule, std::size_t jobs = 1, const Log& log = {});

}  // namespace fusecad::experiment
