#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fusecad/nn/model.hpp"
#include "fusecad/nn/train.hpp"
#include "json.hpp"

namespace fusecad::experts {

enum class Family { plain_shallow, plain_deep, residual, grouped_residual, multi_branch, densely_connected };

std::string to_string(Family family);
Family parse_family(const std::string& text);
const std::vector<Family>& all_families();

/// A toy expert: input_norm_conv, a body, then a dense(2) + softmax head.
struct ExpertTopology {
  Family family = Family::plain_shallow;
  int variant = 0;  // distinguishes implementations of the same family
  std::size_t resolution = 64;
  nn::LayerSpec input_norm;
  std::vector<nn::LayerSpec> body;

  std::string name() const;
  /// Full layer list with a `classes`-way dense + softmax head.
  std::vector<nn::LayerSpec> layers(std::size_t classes = 2) const;
};

/// Variant 1 exists only for densely_connected.
ExpertTopology topology(Family family, int variant = 0, std::size_t resolution = 64);
/// One of each family plus the second densely connected variant (7 total).
std::vector<ExpertTopology> candidate_topologies(std::size_t resolution = 64);

/// A fitted model with its provenance.
struct TrainedModel {
  std::string name;
  nn::ModelGraph model;
  nn::TrainConfig config;
  nn::TrainHistory history;
  nlohmann::json meta = nlohmann::json::object();
};

/// Writes `<stem>.fct` (parameters) and `<stem>.json` (layers, freezing,
/// config, history, meta).
void save_trained(const TrainedModel& trained, const std::filesystem::path& stem);
TrainedModel load_trained(const std::filesystem::path& stem);

// ---- proxy pretraining ---------------------------------------------------------

inline constexpr std::size_t kProxyClasses = 4;
enum class ProxyTexture { stripes, blobs, checker, speckle };

/// Fused planes [3, r, r] of procedural textures, `per_class` of each, labels 0..3.
nn::Dataset proxy_dataset(std::size_t per_class, std::size_t resolution, std::uint64_t seed);

/// Trains the topology with a 4-way head on the proxy task.
TrainedModel pretrain_expert(const ExpertTopology& topology, const nn::Dataset& proxy_train,
                             const nn::Dataset& proxy_val, const nn::TrainConfig& config);

/// Swaps in a fresh 2-unit head, freezes the first ceil(f * L) body layers
/// (L excludes the head) and fine-tunes on the target data.
TrainedModel finetune_expert(const TrainedModel& pretrained, double freeze_fraction, const nn::Dataset& train_set,
                             const nn::Dataset& val_set, const nn::TrainConfig& config);

}  // namespace fusecad::experts
