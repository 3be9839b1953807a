#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "fusecad/image.hpp"
#include "fusecad/nn/loss.hpp"
#include "fusecad/rng.hpp"
#include "json.hpp"

namespace fusecad::data {

/// Cytological tiers 1..5; 1-2 benign, 3-5 malignant.
inline constexpr int kMinScore = 1;
inline constexpr int kMaxScore = 5;

/// Throws std::invalid_argument for scores outside 1..5.
int label_for_score(int score);

struct Sample {
  std::filesystem::path image_path;  // absolute, or relative to the working directory
  std::string patient_id;
  int score = 0;
  int label = 0;
};

struct DatasetManifest {
  std::string name;
  std::filesystem::path directory;  // where relative entries were resolved
  std::vector<Sample> samples;

  std::size_t size() const noexcept { return samples.size(); }
  /// {benign, malignant} sample counts.
  std::array<std::size_t, 2> class_counts() const;
  std::vector<std::string> patients() const;
  std::vector<int> labels() const;
  std::vector<std::string> patient_column() const;
};

/// Error in a manifest file; the message carries `file:line:`.
class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Patients shared between sets that must be disjoint.
class LeakageError : public std::runtime_error {
 public:
  LeakageError(const std::string& what, std::vector<std::string> shared);
  const std::vector<std::string>& shared() const noexcept { return shared_; }

 private:
  std::vector<std::string> shared_;
};

/// CSV with header `image_path,patient_id,score`. Relative paths resolve
/// against the manifest's directory; each image must parse as a PGM.
DatasetManifest load_manifest(const std::filesystem::path& path, bool verify_images = true);

/// Writes the manifest with paths relative to the file's directory when possible.
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

/// Throws LeakageError when the two manifests share a patient id.
void check_disjoint(const DatasetManifest& a, const DatasetManifest& b);
std::vector<std::string> shared_patients(const std::vector<std::string>& a, const std::vector<std::string>& b);

struct Repetition {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

struct SplitPlan {
  std::vector<Repetition> repetitions;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
};

void to_json(nlohmann::json& j, const SplitPlan& plan);
void from_json(const nlohmann::json& j, SplitPlan& plan);

struct GroupedSplit {
  std::vector<std::size_t> keep;  // sorted
  std::vector<std::size_t> held;  // sorted
};

/// Patient-grouped greedy stratification: patients are visited largest first
/// (random order within equal sizes) and moved to the held-out side whenever
/// that lowers the total per-class distance to round(fraction * class count).
/// Throws std::invalid_argument when a class has fewer than two patients.
GroupedSplit grouped_stratified_split(const std::vector<int>& labels, const std::vector<std::string>& groups,
                                      double held_fraction, Rng& rng);

/// One grouped split per repetition, seeded by derive_seed(seed, {repetition}).
SplitPlan plan_splits(const DatasetManifest& manifest, std::size_t repetitions, double train_fraction,
                      std::uint64_t seed);

enum class WeightMode { fixed, balanced };

/// `fixed` returns `fixed_weights`; `balanced` returns n_min / n_c per class.
nn::ClassWeights class_weights(const DatasetManifest& manifest, WeightMode mode = WeightMode::fixed,
                               nn::ClassWeights fixed_weights = {});

/// Nodule bounding box in pixels, half-open: [x0, x1) x [y0, y1).
struct Box {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  std::size_t area() const noexcept { return (x1 - x0) * (y1 - y0); }
  bool operator==(const Box&) const = default;
};

struct SyntheticConfig {
  std::size_t count = 600;
  std::size_t patients = 200;
  double malignant_fraction = 0.2;
  std::size_t size = 64;
  std::uint64_t seed = 0;
  std::string patient_prefix = "P";  // ids are prefix + 4-digit index
  double atypical_fraction = 0.0;     // share of patients whose nodule looks like the other class

  void validate() const;
};

struct SyntheticDataset {
  DatasetManifest manifest;
  std::vector<Box> boxes;  // one per sample
};

/// Writes img/*.pgm, manifest.csv and boxes.csv under `directory`.
SyntheticDataset generate_synthetic(const SyntheticConfig& config, const std::filesystem::path& directory);

/// Reads the boxes.csv sidecar (`image_path,x0,y0,x1,y1`), keyed by file name.
std::map<std::string, Box> load_boxes(const std::filesystem::path& path);

/// Shape parameters of one synthetic nodule.
struct NoduleTraits {
  bool malignant = false;
  double radius = 0.2;       // fraction of the image side
  double aspect = 1.0;
  double angle = 0.0;
  double irregularity = 0.0; // relative amplitude of the boundary perturbation
  int lobes = 0;
  double lobe_phase = 0.0;
  int calcifications = 0;
  double echo = 0.5;         // interior brightness relative to the background
  double edge = 1.5;         // boundary blur in pixels
};

/// Atypical nodules of either class come from one indeterminate appearance with
/// only weak class differences in outline and calcification count.
NoduleTraits sample_traits(bool malignant, Rng& rng, bool atypical = false);
/// Renders one image of the nodule; `box` receives its bounding box.
GrayImage render_nodule(const NoduleTraits& traits, std::size_t size, Rng& rng, Box& box);

}  // namespace fusecad::data
