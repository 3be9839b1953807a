#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fusecad/autodiff.hpp"
#include "fusecad/serialize.hpp"
#include "json.hpp"

namespace fusecad::nn {

enum class LayerKind {
  conv2d,
  dense,
  relu,
  softmax,
  global_avg_pool,
  max_pool,
  flatten,
  dense_block,
  input_norm_conv,
  residual_block,
  inception_block,
};

std::string to_string(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);

/// Declarative description of one layer. Fields irrelevant to a kind are ignored.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t out_channels = 0;  // conv2d, input_norm_conv, residual_block
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  std::size_t groups = 1;         // conv2d, residual_block (>1 selects a grouped bottleneck)
  std::size_t units = 0;          // dense
  std::size_t layers = 0;         // dense_block: inner layer count k
  std::size_t growth = 0;         // dense_block: channels added per inner layer g
  std::vector<std::size_t> branches;  // inception_block: widths of the 1x1, 3x3, 5x5 branches
  std::size_t init_fan_in = 0;    // dense: overrides the fan-in used for weight init when > 0

  static LayerSpec conv(std::size_t out_channels, std::size_t kernel = 3, std::size_t stride = 1,
                        std::size_t padding = 1, std::size_t groups = 1);
  static LayerSpec dense(std::size_t units);
  static LayerSpec input_norm(std::size_t out_channels, std::size_t stride = 1);
  static LayerSpec dense_block(std::size_t layers, std::size_t growth);
  static LayerSpec residual(std::size_t out_channels, std::size_t groups = 1);
  static LayerSpec inception(std::vector<std::size_t> branch_widths);
  static LayerSpec simple(LayerKind kind);

  bool operator==(const LayerSpec&) const = default;
};

void to_json(nlohmann::json& j, const LayerSpec& spec);
void from_json(const nlohmann::json& j, LayerSpec& spec);

/// A named parameter tensor; `unit` is the index of the parameterized layer
/// (every convolution or dense map, in topological order) that owns it.
struct Parameter {
  std::string name;
  ad::TensorPtr value;
  std::size_t unit = 0;

  bool trainable() const { return value->requires_grad(); }
};

/// Anything the trainer can fit: a parameter list plus a logits graph builder.
struct Batch {
  ad::Var inputs;  // [B, ...sample shape]
  ad::Var aux;     // [B, aux width] or null
  std::vector<int> labels;
};

class Classifier {
 public:
  virtual ~Classifier() = default;
  /// Every parameter the optimizer may touch (frozen ones are skipped by it).
  virtual std::vector<Parameter*> parameters() = 0;
  /// Builds the graph from a batch to class logits [B, classes].
  virtual ad::Var logits(const Batch& batch) const = 0;
};

/// Per-parameterized-layer description, used by freezing and Grad-CAM.
struct UnitInfo {
  std::size_t layer = 0;  // index into layers()
  bool spatial = false;   // convolution (true) or dense map (false)
  std::string name;
};

/// Output of a forward pass through a ModelGraph.
struct ForwardResult {
  ad::Var output;  // final node (probabilities when the graph ends in softmax)
  ad::Var logits;  // input of the trailing softmax, or `output` when there is none
  std::vector<ad::Var> unit_outputs;  // activation of each parameterized layer
};

/// A sequential network over LayerSpecs with named parameters and a per-layer
/// trainable mask. Copies are deep: they own fresh parameter tensors.
class ModelGraph : public Classifier {
 public:
  ModelGraph(ad::Shape input_shape, std::vector<LayerSpec> layers, std::uint64_t seed);
  ModelGraph(const ModelGraph& other);
  ModelGraph& operator=(const ModelGraph& other);
  ModelGraph(ModelGraph&&) noexcept = default;
  ModelGraph& operator=(ModelGraph&&) noexcept = default;

  const ad::Shape& input_shape() const noexcept { return input_shape_; }
  /// Per-sample output shape.
  const ad::Shape& output_shape() const noexcept { return output_shape_; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  const std::vector<UnitInfo>& units() const noexcept { return units_; }
  std::size_t parameterized_layers() const noexcept { return units_.size(); }

  std::vector<Parameter*> parameters() override;
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;

  ForwardResult forward(const ad::Var& input) const;
  ad::Var logits(const Batch& batch) const override;

  /// Freezes the first ceil(fraction * L) parameterized layers, where L
  /// excludes the last `protected_tail` layers; everything else becomes
  /// trainable. Idempotent.
  void freeze(double fraction, std::size_t protected_tail = 0);
  double freeze_fraction() const noexcept { return freeze_fraction_; }
  bool unit_trainable(std::size_t unit) const;
  std::size_t frozen_units() const;

  /// Replaces the final dense layer with a freshly initialised one of `units` outputs.
  void replace_head(std::size_t units, std::uint64_t seed);

  std::vector<ad::NamedTensor> state() const;
  void load_state(const std::vector<ad::NamedTensor>& tensors);

  nlohmann::json describe() const;
  static ModelGraph from_description(const nlohmann::json& description, std::uint64_t seed = 0);

 private:
  void build(std::uint64_t seed);
  ad::TensorPtr make_weight(const std::string& name, ad::Shape shape, std::size_t fan_in, std::uint64_t seed);
  ad::TensorPtr make_bias(const std::string& name, std::size_t n);

  ad::Shape input_shape_;
  ad::Shape output_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<UnitInfo> units_;
  std::vector<Parameter> params_;
  double freeze_fraction_ = 0.0;
  std::size_t protected_tail_ = 0;
};

/// ceil(fraction * count) with a small tolerance against round-off.
std::size_t frozen_prefix(double fraction, std::size_t count);

}  // namespace fusecad::nn
