#include "fusecad/kdl/kdl.hpp"

#include <fstream>
#include <stdexcept>

#include "fusecad/rng.hpp"

namespace fs = std::filesystem;

namespace fusecad::kdl {

using nn::LayerKind;
using nn::LayerSpec;

std::string to_string(CueJoin join) { return join == CueJoin::features ? "features" : "probabilities"; }

CueJoin parse_cue_join(const std::string& text) {
  if (text == "features") return CueJoin::features;
  if (text == "probabilities") return CueJoin::probabilities;
  throw std::invalid_argument("cue join must be 'features' or 'probabilities', got '" + text + "'");
}

std::vector<LayerSpec> StudentSpec::layers() const {
  const auto pool = LayerSpec::simple(LayerKind::max_pool);
  std::vector<LayerSpec> out{LayerSpec::input_norm(stem_channels, 2),
                             pool,
                             LayerSpec::dense_block(block_layers, growth),
                             pool,
                             LayerSpec::dense_block(block_layers, growth),
                             LayerSpec::simple(LayerKind::global_avg_pool),
                             LayerSpec::dense(feature_width),
                             LayerSpec::simple(LayerKind::relu)};
  if (cue_join == CueJoin::probabilities) {
    out.push_back(LayerSpec::dense(2));
    out.push_back(LayerSpec::simple(LayerKind::softmax));
  }
  return out;
}

void to_json(nlohmann::json& j, const StudentSpec& s) {
  j = {{"resolution", s.resolution},       {"stem_channels", s.stem_channels}, {"block_layers", s.block_layers},
       {"growth", s.growth},               {"feature_width", s.feature_width}, {"cue_join", to_string(s.cue_join)}};
}

void from_json(const nlohmann::json& j, StudentSpec& s) {
  s.resolution = j.at("resolution");
  s.stem_channels = j.at("stem_channels");
  s.block_layers = j.at("block_layers");
  s.growth = j.at("growth");
  s.feature_width = j.at("feature_width");
  s.cue_join = parse_cue_join(j.at("cue_join"));
}

KdlModel::KdlModel(StudentSpec spec, nn::ModelGraph student, nn::ModelGraph head,
                   std::shared_ptr<const experts::ConsultEnsemble> consult, std::size_t cue_width)
    : spec_(spec), student_(std::move(student)), head_(std::move(head)), consult_(std::move(consult)),
      cue_width_(cue_width) {
  if (student_.output_shape() != ad::Shape{spec_.output_width()})
    throw std::invalid_argument("student output " + ad::shape_string(student_.output_shape()) +
                                " does not match the student layout");
  if (head_.input_shape() != ad::Shape{spec_.output_width() + cue_width_})
    throw std::invalid_argument("head input " + ad::shape_string(head_.input_shape()) + " must be " +
                                std::to_string(spec_.output_width()) + " + " + std::to_string(cue_width_));
  if (cue_width_ != 0 && cue_width_ != kCueWidth) throw std::invalid_argument("cue width must be 0 or 2");
  if (consult_ && consult_->input_shape() != student_.input_shape())
    throw std::invalid_argument("consult and student inputs differ");
}

std::vector<nn::Parameter*> KdlModel::parameters() {
  auto out = student_.parameters();
  for (auto* p : head_.parameters()) out.push_back(p);
  return out;
}

ad::Var KdlModel::cue(const nn::Batch& batch) const {
  if (batch.aux) {
    if (batch.aux->shape.size() != 2 || batch.aux->shape[1] != kCueWidth)
      throw ad::ShapeError("kdl cue", batch.aux->shape, {batch.aux->shape[0], kCueWidth});
    return ad::stop_gradient(batch.aux);
  }
  if (!consult_) throw std::logic_error("no cue in the batch and no consult attached");
  return ad::stop_gradient(consult_->head().forward(consult_->probabilities(batch.inputs)).output);
}

ad::Var KdlModel::head_logits(const nn::ForwardResult& student_pass, const nn::Batch& batch) const {
  ad::Var joined = student_pass.output;
  if (aided()) joined = ad::concat({joined, cue(batch)}, 1);
  return head_.forward(joined).logits;
}

ad::Var KdlModel::logits(const nn::Batch& batch) const { return head_logits(student_.forward(batch.inputs), batch); }

nn::Dataset KdlModel::with_cues(const nn::Dataset& data, std::size_t jobs) const {
  if (!consult_) throw std::logic_error("no consult attached");
  const auto probs = nn::predict(*consult_, consult_->with_expert_outputs(data, jobs));
  nn::Dataset d = data;
  d.aux_width = kCueWidth;
  d.aux.clear();
  for (const auto& p : probs) d.aux.insert(d.aux.end(), p.begin(), p.end());
  return d;
}

namespace {

KdlModel make(const StudentSpec& spec, std::shared_ptr<const experts::ConsultEnsemble> consult, std::size_t cue_width,
              std::uint64_t seed, std::pair<std::size_t, std::size_t> hidden) {
  nn::ModelGraph student({3, spec.resolution, spec.resolution}, spec.layers(), derive_seed(seed, {0}));
  const std::size_t width = spec.output_width();
  nn::ModelGraph head({width + cue_width}, experts::stacking_head_layers(hidden, width), derive_seed(seed, {1}));
  return KdlModel(spec, std::move(student), std::move(head), std::move(consult), cue_width);
}

}  // namespace

KdlModel build_kdl(const StudentSpec& spec, std::shared_ptr<const experts::ConsultEnsemble> consult,
                   std::uint64_t seed, std::pair<std::size_t, std::size_t> hidden) {
  if (!consult) throw std::invalid_argument("build_kdl needs a consult");
  return make(spec, std::move(consult), kCueWidth, seed, hidden);
}

KdlModel build_unaided(const StudentSpec& spec, std::uint64_t seed, std::pair<std::size_t, std::size_t> hidden) {
  return make(spec, nullptr, 0, seed, hidden);
}

KdlModel build_kdl_external_cue(const StudentSpec& spec, std::uint64_t seed,
                                std::pair<std::size_t, std::size_t> hidden) {
  return make(spec, nullptr, kCueWidth, seed, hidden);
}

nn::TrainHistory train_kdl(KdlModel& model, const nn::Dataset& train_set, const nn::Dataset& val_set,
                           const nn::TrainConfig& config, const nn::EpochCallback& on_epoch, std::size_t jobs) {
  if (!model.aided()) return nn::train(model, train_set, val_set, config, on_epoch);
  const bool cached = train_set.aux_width == kCueWidth && val_set.aux_width == kCueWidth;
  if (cached) return nn::train(model, train_set, val_set, config, on_epoch);
  return nn::train(model, model.with_cues(train_set, jobs), model.with_cues(val_set, jobs), config, on_epoch);
}

std::vector<std::array<double, 2>> kdl_predict(const KdlModel& model, const nn::Dataset& data) {
  if (data.sample_shape != model.student().input_shape())
    throw ad::ShapeError("kdl input", data.sample_shape, model.student().input_shape());
  if (model.aided() && data.aux_width != kCueWidth) return nn::predict(model, model.with_cues(data));
  return nn::predict(model, data);
}

void save_kdl(const KdlModel& model, const nn::TrainConfig& config, const nn::TrainHistory& history,
              const fs::path& directory, const std::optional<fs::path>& consult_bundle) {
  if (model.aided() && model.consult() && !consult_bundle)
    throw std::invalid_argument("an aided model must reference its consult bundle");
  fs::create_directories(directory);
  experts::save_trained({"student", model.student(), config, history, {}}, directory / "student");
  experts::save_trained({"head", model.head(), config, history, {}}, directory / "head");
  nlohmann::json j{{"student", model.spec()},
                   {"cue_width", model.cue_width()},
                   {"config", config},
                   {"history", history}};
  if (consult_bundle) {
    const fs::path target = fs::absolute(*consult_bundle).lexically_normal();
    j["consult_bundle"] = target.lexically_relative(fs::absolute(directory).lexically_normal()).generic_string();
    j["consult_hash"] = experts::bundle_hash(*consult_bundle);
  }
  std::ofstream out(directory / "kdl.json");
  if (!out) throw std::runtime_error("cannot write " + (directory / "kdl.json").string());
  out << j.dump(2) << '\n';
}

KdlModel load_kdl(const fs::path& directory) {
  std::ifstream in(directory / "kdl.json");
  if (!in) throw std::runtime_error("no kdl bundle at " + directory.string());
  const nlohmann::json j = nlohmann::json::parse(in);
  auto student = experts::load_trained(directory / "student");
  auto head = experts::load_trained(directory / "head");
  std::shared_ptr<const experts::ConsultEnsemble> consult;
  if (j.contains("consult_bundle")) {
    const fs::path bundle = (directory / j.at("consult_bundle").get<std::string>()).lexically_normal();
    const std::string expected = j.at("consult_hash");
    if (experts::bundle_hash(bundle) != expected)
      throw std::runtime_error("consult bundle " + bundle.string() + " does not match the recorded hash");
    consult = std::make_shared<const experts::ConsultEnsemble>(experts::load_consult(bundle));
  }
  return KdlModel(j.at("student").get<StudentSpec>(), std::move(student.model), std::move(head.model),
                  std::move(consult), j.at("cue_width").get<std::size_t>());
}

}  // namespace fusecad::kdl
