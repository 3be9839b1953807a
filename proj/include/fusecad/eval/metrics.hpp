#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fusecad/data/dataio.hpp"
#include "fusecad/nn/train.hpp"
#include "json.hpp"

namespace fusecad::eval {

/// Malignant (label 1) is the positive class.
struct ConfusionMatrix {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::size_t total() const noexcept { return tp + fp + tn + fn; }
  double accuracy() const;
  /// Recall of the malignant class.
  double sensitivity() const;
  /// Recall of the benign class.
  double specificity() const;

  bool operator==(const ConfusionMatrix&) const = default;
};

/// Positive when p(malignant) >= threshold.
ConfusionMatrix confusion(const std::vector<std::array<double, 2>>& predictions, const std::vector<int>& labels,
                          double threshold = 0.5);

/// Trapezoidal area under the ROC curve over every distinct score; tied
/// scores contribute one diagonal segment. Throws when a class is absent.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Metrics of one cross-validation repetition.
struct RunResult {
  std::size_t repetition = 0;
  std::uint64_t seed = 0;
  ConfusionMatrix matrix;
  double accuracy = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double auc = 0.0;
  std::size_t convergence_epoch = 0;
  nn::TrainHistory history;
};

RunResult score_run(const std::vector<std::array<double, 2>>& predictions, const std::vector<int>& labels,
                    const nn::TrainHistory& history);

struct Stat {
  double mean = 0.0;
  double std = 0.0;  // sample (n - 1) deviation; 0 for a single run
};

Stat summarize(const std::vector<double>& values);

struct EvalReport {
  std::string name;
  std::vector<RunResult> runs;

  Stat accuracy() const;
  Stat sensitivity() const;
  Stat specificity() const;
  Stat auc() const;
  Stat convergence_epoch() const;
};

void to_json(nlohmann::json& j, const ConfusionMatrix& m);
void from_json(const nlohmann::json& j, ConfusionMatrix& m);
void to_json(nlohmann::json& j, const RunResult& r);
void from_json(const nlohmann::json& j, RunResult& r);
void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

/// "95.11 ± 0.99" for a fraction 0.9511 with deviation 0.0099.
std::string format_percent(const Stat& stat);

/// One repetition handed to a run recipe.
struct CvTask {
  std::size_t repetition = 0;
  std::uint64_t seed = 0;  // derive_seed(plan seed, {repetition, 1})
  const data::Repetition* split = nullptr;
};

/// Test-set probabilities, one per index of `split->test` in order, plus the
/// training history.
struct CvOutcome {
  std::vector<std::array<double, 2>> predictions;
  nn::TrainHistory history;
};

using RunRecipe = std::function<CvOutcome(const CvTask&)>;

/// Error raised from inside one repetition.
class RepetitionError : public std::runtime_error {
 public:
  RepetitionError(std::size_t repetition, const std::string& what);
  std::size_t repetition() const noexcept { return repetition_; }

 private:
  std::size_t repetition_;
};

/// Runs every repetition (up to `jobs` at once) and aggregates the metrics.
/// Each repetition is re-checked for shared patients before training.
EvalReport run_cv(const std::string& name, const data::DatasetManifest& manifest, const data::SplitPlan& plan,
                  const RunRecipe& recipe, std::size_t jobs = 1);

/// Writes `<stem>.csv` (one row per run plus mean/std rows), `<stem>.txt`
/// (aligned table), `<stem>.json`, and one loss curve per run under
/// `<stem>_curves/run_<k>.csv`.
void emit_report(const EvalReport& report, const std::filesystem::path& stem);

/// Loss curve of one run as CSV `epoch,train_loss,val_loss,val_acc`.
std::string loss_curve_csv(const nn::TrainHistory& history);

/// Aligned text table, one row per report.
std::string render_table(const std::vector<EvalReport>& reports);
/// CSV summary, one row per report.
std::string render_summary_csv(const std::vector<EvalReport>& reports);

}  // namespace fusecad::eval
