#include "fusecad/nn/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "fusecad/rng.hpp"

namespace fusecad::nn {

namespace {

const std::map<LayerKind, std::string>& kind_names() {
  static const std::map<LayerKind, std::string> names{
      {LayerKind::conv2d, "conv2d"},
      {LayerKind::dense, "dense"},
      {LayerKind::relu, "relu"},
      {LayerKind::softmax, "softmax"},
      {LayerKind::global_avg_pool, "global_avg_pool"},
      {LayerKind::max_pool, "max_pool"},
      {LayerKind::flatten, "flatten"},
      {LayerKind::dense_block, "dense_block"},
      {LayerKind::input_norm_conv, "input_norm_conv"},
      {LayerKind::residual_block, "residual_block"},
      {LayerKind::inception_block, "inception_block"},
  };
  return names;
}

std::size_t conv_out(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (in + 2 * padding < kernel) throw std::invalid_argument("convolution kernel larger than padded input");
  return (in + 2 * padding - kernel) / stride + 1;
}

}  // namespace

std::string to_string(LayerKind kind) { return kind_names().at(kind); }

LayerKind parse_layer_kind(const std::string& name) {
  for (const auto& [kind, n] : kind_names())
    if (n == name) return kind;
  throw std::invalid_argument("unknown layer kind '" + name + "'");
}

LayerSpec LayerSpec::conv(std::size_t out_channels, std::size_t kernel, std::size_t stride, std::size_t padding,
                          std::size_t groups) {
  LayerSpec s;
  s.kind = LayerKind::conv2d;
  s.out_channels = out_channels;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  s.groups = groups;
  return s;
}

LayerSpec LayerSpec::dense(std::size_t units) {
  LayerSpec s;
  s.kind = LayerKind::dense;
  s.units = units;
  return s;
}

LayerSpec LayerSpec::input_norm(std::size_t out_channels, std::size_t stride) {
  LayerSpec s;
  s.kind = LayerKind::input_norm_conv;
  s.out_channels = out_channels;
  s.stride = stride;
  return s;
}

LayerSpec LayerSpec::dense_block(std::size_t layers, std::size_t growth) {
  LayerSpec s;
  s.kind = LayerKind::dense_block;
  s.layers = layers;
  s.growth = growth;
  return s;
}

LayerSpec LayerSpec::residual(std::size_t out_channels, std::size_t groups) {
  LayerSpec s;
  s.kind = LayerKind::residual_block;
  s.out_channels = out_channels;
  s.groups = groups;
  return s;
}

LayerSpec LayerSpec::inception(std::vector<std::size_t> branch_widths) {
  LayerSpec s;
  s.kind = LayerKind::inception_block;
  s.branches = std::move(branch_widths);
  return s;
}

LayerSpec LayerSpec::simple(LayerKind kind) {
  LayerSpec s;
  s.kind = kind;
  return s;
}

void to_json(nlohmann::json& j, const LayerSpec& s) {
  j = nlohmann::json{{"kind", to_string(s.kind)}};
  switch (s.kind) {
    case LayerKind::conv2d:
      j.update({{"out_channels", s.out_channels}, {"kernel", s.kernel}, {"stride", s.stride},
                {"padding", s.padding}, {"groups", s.groups}});
      break;
    case LayerKind::input_norm_conv: j.update({{"out_channels", s.out_channels}, {"stride", s.stride}}); break;
    case LayerKind::dense:
      j["units"] = s.units;
      if (s.init_fan_in) j["init_fan_in"] = s.init_fan_in;
      break;
    case LayerKind::dense_block: j.update({{"layers", s.layers}, {"growth", s.growth}}); break;
    case LayerKind::residual_block: j.update({{"out_channels", s.out_channels}, {"groups", s.groups}}); break;
    case LayerKind::inception_block: j["branches"] = s.branches; break;
    default: break;
  }
}

void from_json(const nlohmann::json& j, LayerSpec& s) {
  s = LayerSpec{};
  s.kind = parse_layer_kind(j.at("kind").get<std::string>());
  s.out_channels = j.value("out_channels", std::size_t{0});
  s.kernel = j.value("kernel", std::size_t{3});
  s.stride = j.value("stride", std::size_t{1});
  s.padding = j.value("padding", std::size_t{1});
  s.groups = j.value("groups", std::size_t{1});
  s.units = j.value("units", std::size_t{0});
  s.layers = j.value("layers", std::size_t{0});
  s.growth = j.value("growth", std::size_t{0});
  s.init_fan_in = j.value("init_fan_in", std::size_t{0});
  if (j.contains("branches")) s.branches = j.at("branches").get<std::vector<std::size_t>>();
}

std::size_t frozen_prefix(double fraction, std::size_t count) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::invalid_argument("freeze fraction must lie in [0, 1]");
  const double raw = std::ceil(fraction * static_cast<double>(count) - 1e-9);
  return std::min(count, static_cast<std::size_t>(std::max(0.0, raw)));
}

ModelGraph::ModelGraph(ad::Shape input_shape, std::vector<LayerSpec> layers, std::uint64_t seed)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  if (input_shape_.empty()) throw std::invalid_argument("model input shape must be non-empty");
  build(seed);
}

ModelGraph::ModelGraph(const ModelGraph& other)
    : input_shape_(other.input_shape_),
      output_shape_(other.output_shape_),
      layers_(other.layers_),
      units_(other.units_),
      params_(other.params_),
      freeze_fraction_(other.freeze_fraction_),
      protected_tail_(other.protected_tail_) {
  for (auto& p : params_) {
    p.value = std::make_shared<ad::Tensor>(p.value->shape(), p.value->values(), p.value->requires_grad());
  }
}

ModelGraph& ModelGraph::operator=(const ModelGraph& other) {
  if (this != &other) *this = ModelGraph(other);
  return *this;
}

ad::TensorPtr ModelGraph::make_weight(const std::string& name, ad::Shape shape, std::size_t fan_in,
                                      std::uint64_t seed) {
  auto t = std::make_shared<ad::Tensor>(ad::Tensor::zeros(std::move(shape), true));
  Rng rng(seed);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (double& v : t->data()) v = dist(rng);
  params_.push_back({name, t, units_.size() - 1});
  return t;
}

ad::TensorPtr ModelGraph::make_bias(const std::string& name, std::size_t n) {
  auto t = std::make_shared<ad::Tensor>(ad::Tensor::zeros({n}, true));
  params_.push_back({name, t, units_.size() - 1});
  return t;
}

void ModelGraph::build(std::uint64_t seed) {
  params_.clear();
  units_.clear();
  ad::Shape shape = input_shape_;

  auto require_spatial = [&](std::size_t layer) {
    if (shape.size() != 3)
      throw std::invalid_argument("layer " + std::to_string(layer) + " (" + to_string(layers_[layer].kind) +
                                  ") needs a [C, H, W] input, got " + ad::shape_string(shape));
  };
  // Adds a convolution unit and returns its output shape.
  auto add_conv = [&](std::size_t layer, const std::string& tag, const ad::Shape& in, std::size_t out_channels,
                      std::size_t kernel, std::size_t stride, std::size_t padding, std::size_t groups) {
    if (out_channels == 0 || groups == 0 || in[0] % groups || out_channels % groups)
      throw std::invalid_argument("layer " + std::to_string(layer) + ": bad channel/group configuration");
    const std::size_t unit = units_.size();
    const std::string name = "u" + std::to_string(unit) + "." + tag;
    units_.push_back({layer, true, name});
    make_weight(name + ".w", {out_channels, in[0] / groups, kernel, kernel}, in[0] / groups * kernel * kernel,
                derive_seed(seed, {unit}));
    make_bias(name + ".b", out_channels);
    return ad::Shape{out_channels, conv_out(in[1], kernel, stride, padding), conv_out(in[2], kernel, stride, padding)};
  };

  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& s = layers_[i];
    switch (s.kind) {
      case LayerKind::conv2d:
        require_spatial(i);
        shape = add_conv(i, "conv", shape, s.out_channels, s.kernel, s.stride, s.padding, s.groups);
        break;
      case LayerKind::input_norm_conv:
        require_spatial(i);
        shape = add_conv(i, "input_norm", shape, s.out_channels, 3, s.stride, 1, 1);
        break;
      case LayerKind::dense: {
        if (shape.size() != 1)
          throw std::invalid_argument("dense layer " + std::to_string(i) + " needs a flat input, got " +
                                      ad::shape_string(shape));
        if (s.units == 0) throw std::invalid_argument("dense layer needs units > 0");
        const std::size_t unit = units_.size();
        const std::string name = "u" + std::to_string(unit) + ".dense";
        units_.push_back({i, false, name});
        make_weight(name + ".w", {shape[0], s.units}, s.init_fan_in ? s.init_fan_in : shape[0], derive_seed(seed, {unit}));
        make_bias(name + ".b", s.units);
        shape = {s.units};
        break;
      }
      case LayerKind::relu:
      case LayerKind::softmax: break;
      case LayerKind::global_avg_pool:
        require_spatial(i);
        shape = {shape[0]};
        break;
      case LayerKind::max_pool:
        require_spatial(i);
        if (shape[1] < 2 || shape[2] < 2) throw std::invalid_argument("max_pool on a map smaller than 2x2");
        shape = {shape[0], shape[1] / 2, shape[2] / 2};
        break;
      case LayerKind::flatten: shape = {ad::shape_size(shape)}; break;
      case LayerKind::dense_block: {
        require_spatial(i);
        if (s.layers == 0 || s.growth == 0) throw std::invalid_argument("dense_block needs layers and growth > 0");
        ad::Shape inner = shape;
        for (std::size_t k = 0; k < s.layers; ++k) {
          add_conv(i, "dense" + std::to_string(k), inner, s.growth, 3, 1, 1, 1);
          inner[0] += s.growth;
        }
        shape = inner;
        break;
      }
      case LayerKind::residual_block: {
        require_spatial(i);
        const std::size_t out = s.out_channels;
        if (s.groups > 1) {
          auto h = add_conv(i, "reduce", shape, out, 1, 1, 0, 1);
          h = add_conv(i, "grouped", h, out, 3, 1, 1, s.groups);
          add_conv(i, "expand", h, out, 1, 1, 0, 1);
        } else {
          auto h = add_conv(i, "conv_a", shape, out, 3, 1, 1, 1);
          add_conv(i, "conv_b", h, out, 3, 1, 1, 1);
        }
        if (shape[0] != out) add_conv(i, "project", shape, out, 1, 1, 0, 1);
        shape = {out, shape[1], shape[2]};
        break;
      }
      case LayerKind::inception_block: {
        require_spatial(i);
        if (s.branches.size() != 3) throw std::invalid_argument("inception_block needs three branch widths");
        static constexpr std::size_t kKernels[3] = {1, 3, 5};
        std::size_t channels = 0;
        for (std::size_t b = 0; b < 3; ++b) {
          add_conv(i, "branch" + std::to_string(kKernels[b]), shape, s.branches[b], kKernels[b], 1, kKernels[b] / 2, 1);
          channels += s.branches[b];
        }
        shape = {channels, shape[1], shape[2]};
        break;
      }
    }
  }
  output_shape_ = shape;
}

std::vector<Parameter*> ModelGraph::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> ModelGraph::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(&p);
  return out;
}

std::size_t ModelGraph::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value->size();
  return n;
}

ForwardResult ModelGraph::forward(const ad::Var& input) const {
  if (input->shape.size() != input_shape_.size() + 1 ||
      !std::equal(input_shape_.begin(), input_shape_.end(), input->shape.begin() + 1))
    throw ad::ShapeError("model input", input->shape, input_shape_);

  ForwardResult result;
  result.unit_outputs.resize(units_.size());
  std::size_t next_param = 0;
  std::size_t next_unit = 0;
  auto take = [&] { return ad::param(params_.at(next_param++).value); };
  auto conv = [&](const ad::Var& x, std::size_t stride, std::size_t padding, std::size_t groups, bool activate) {
    auto w = take();
    auto b = take();
    ad::Var y = ad::conv2d(x, w, b, {stride, padding, groups});
    if (activate) y = ad::relu(y);
    result.unit_outputs[next_unit++] = y;
    return y;
  };

  ad::Var x = input;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& s = layers_[i];
    switch (s.kind) {
      case LayerKind::conv2d: x = conv(x, s.stride, s.padding, s.groups, false); break;
      case LayerKind::input_norm_conv: x = conv(x, s.stride, 1, 1, true); break;
      case LayerKind::dense: {
        auto w = take();
        auto b = take();
        x = ad::bias_add(ad::matmul(x, w), b);
        result.unit_outputs[next_unit++] = x;
        break;
      }
      case LayerKind::relu:
        x = ad::relu(x);
        // a bare conv followed by relu reports its activated map
        if (i > 0 && layers_[i - 1].kind == LayerKind::conv2d) result.unit_outputs[next_unit - 1] = x;
        break;
      case LayerKind::softmax:
        result.logits = x;
        x = ad::softmax(x);
        break;
      case LayerKind::global_avg_pool: x = ad::global_avg_pool(x); break;
      case LayerKind::max_pool: x = ad::max_pool2(x); break;
      case LayerKind::flatten: x = ad::reshape(x, {x->shape[0], ad::shape_size(x->shape) / x->shape[0]}); break;
      case LayerKind::dense_block: {
        std::vector<ad::Var> features{x};
        for (std::size_t k = 0; k < s.layers; ++k) {
          ad::Var joined = features.size() == 1 ? features[0] : ad::concat(features, 1);
          features.push_back(conv(joined, 1, 1, 1, true));
        }
        x = ad::concat(features, 1);
        break;
      }
      case LayerKind::residual_block: {
        ad::Var h;
        if (s.groups > 1) {
          h = conv(x, 1, 0, 1, true);
          h = conv(h, 1, 1, s.groups, true);
          h = conv(h, 1, 0, 1, false);
        } else {
          h = conv(x, 1, 1, 1, true);
          h = conv(h, 1, 1, 1, false);
        }
        const std::size_t last_unit = next_unit - 1;
        ad::Var skip = x->shape[1] == s.out_channels ? x : conv(x, 1, 0, 1, false);
        x = ad::relu(ad::add(h, skip));
        result.unit_outputs[last_unit] = x;
        break;
      }
      case LayerKind::inception_block: {
        std::vector<ad::Var> branches;
        for (std::size_t b = 0; b < 3; ++b) {
          const std::size_t k = b == 0 ? 1 : (b == 1 ? 3 : 5);
          branches.push_back(conv(x, 1, k / 2, 1, true));
        }
        x = ad::concat(branches, 1);
        break;
      }
    }
  }
  result.output = x;
  if (!result.logits) result.logits = x;
  return result;
}

ad::Var ModelGraph::logits(const Batch& batch) const { return forward(batch.inputs).logits; }

void ModelGraph::freeze(double fraction, std::size_t protected_tail) {
  if (protected_tail > units_.size()) throw std::invalid_argument("protected tail longer than the model");
  const std::size_t frozen = frozen_prefix(fraction, units_.size() - protected_tail);
  for (auto& p : params_) p.value->set_requires_grad(p.unit >= frozen);
  freeze_fraction_ = fraction;
  protected_tail_ = protected_tail;
}

bool ModelGraph::unit_trainable(std::size_t unit) const {
  for (const auto& p : params_)
    if (p.unit == unit) return p.trainable();
  throw std::out_of_range("no such parameterized layer");
}

std::size_t ModelGraph::frozen_units() const {
  std::size_t n = 0;
  for (std::size_t u = 0; u < units_.size(); ++u) n += unit_trainable(u) ? 0 : 1;
  return n;
}

void ModelGraph::replace_head(std::size_t units, std::uint64_t seed) {
  auto it = std::find_if(layers_.rbegin(), layers_.rend(), [](const LayerSpec& s) { return s.kind == LayerKind::dense; });
  if (it == layers_.rend()) throw std::logic_error("model has no dense head to replace");
  it->units = units;
  std::vector<bool> trainable;
  for (const auto& p : params_) trainable.push_back(p.trainable());
  auto old = params_;
  build(seed);
  // keep every tensor except the rebuilt head unit
  const std::size_t head_unit = units_.size() - 1;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].unit == head_unit) continue;
    params_[i].value = old[i].value;
    params_[i].value->set_requires_grad(trainable[i]);
  }
}

std::vector<ad::NamedTensor> ModelGraph::state() const {
  std::vector<ad::NamedTensor> out;
  for (const auto& p : params_) out.push_back({p.name, ad::Tensor(p.value->shape(), p.value->values())});
  return out;
}

void ModelGraph::load_state(const std::vector<ad::NamedTensor>& tensors) {
  if (tensors.size() != params_.size())
    throw std::invalid_argument("checkpoint has " + std::to_string(tensors.size()) + " tensors, model expects " +
                                std::to_string(params_.size()));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& [name, t] = tensors[i];
    if (name != params_[i].name || t.shape() != params_[i].value->shape())
      throw std::invalid_argument("checkpoint tensor '" + name + "' " + ad::shape_string(t.shape()) +
                                  " does not match '" + params_[i].name + "' " +
                                  ad::shape_string(params_[i].value->shape()));
    std::copy(t.data().begin(), t.data().end(), params_[i].value->data().begin());
  }
}

nlohmann::json ModelGraph::describe() const {
  return {{"input_shape", input_shape_},
          {"layers", layers_},
          {"freeze_fraction", freeze_fraction_},
          {"protected_tail", protected_tail_}};
}

ModelGraph ModelGraph::from_description(const nlohmann::json& d, std::uint64_t seed) {
  ModelGraph model(d.at("input_shape").get<ad::Shape>(), d.at("layers").get<std::vector<LayerSpec>>(), seed);
  model.freeze(d.value("freeze_fraction", 0.0), d.value("protected_tail", std::size_t{0}));
  return model;
}

}  // namespace fusecad::nn
