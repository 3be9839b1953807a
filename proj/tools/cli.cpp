#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>

#include "CLI11.hpp"
#include "fusecad/experiment/experiment.hpp"
#include "fusecad/gradcam/gradcam.hpp"
#include "fusecad/rng.hpp"
#include "fusecad/serialize.hpp"

namespace fs = std::filesystem;

namespace fusecad::cli {

namespace {

// Components of the --seed fan-out.
enum SeedStream : std::uint64_t { kPretrain = 1, kFinetune = 2, kSplits = 3, kConsult = 4, kStudent = 5 };

struct Globals {
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::string cache;
  bool quiet = false;
};

struct ScheduleFlags {
  double learning_rate = 0.001;
  std::size_t batch_size = 32;
  std::size_t epochs = 1000;
  std::size_t patience = 50;
  std::vector<double> class_weights{0.2, 1.0};
  double validation_fraction = 0.1;
  std::size_t pretrain_epochs = 25;
  std::size_t pretrain_patience = 10;
  std::size_t proxy_per_class = 60;

  experiment::Schedule schedule() const {
    if (class_weights.size() != 2 || class_weights[0] <= 0.0 || class_weights[1] <= 0.0)
      throw UsageError("--class-weights takes two positive values (benign, malignant)");
    experiment::Schedule s;
    s.train.learning_rate = learning_rate;
    s.train.batch_size = batch_size;
    s.train.max_epochs = epochs;
    s.train.early_stop_patience = patience;
    s.train.class_weights = {class_weights[0], class_weights[1]};
    s.pretrain = s.train;
    s.pretrain.max_epochs = pretrain_epochs;
    s.pretrain.early_stop_patience = pretrain_patience;
    s.pretrain.class_weights = {1.0, 1.0};
    s.proxy_per_class = proxy_per_class;
    s.validation_fraction = validation_fraction;
    try {
      s.train.validate();
      s.pretrain.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
      throw UsageError("--validation-fraction must lie in (0, 1)");
    return s;
  }
};

void add_train_flags(CLI::App* app, ScheduleFlags& f) {
  app->add_option("--lr", f.learning_rate, "Adam learning rate")->check(CLI::PositiveNumber);
  app->add_option("--batch-size", f.batch_size, "Mini-batch size")->check(CLI::PositiveNumber);
  app->add_option("--epochs", f.epochs, "Maximum training epochs")->check(CLI::PositiveNumber);
  app->add_option("--patience", f.patience, "Early-stopping patience in epochs")->check(CLI::PositiveNumber);
  app->add_option("--class-weights", f.class_weights, "Loss weights for benign and malignant")->delimiter(',');
  app->add_option("--validation-fraction", f.validation_fraction, "Patient-grouped validation share");
}

void add_pretrain_flags(CLI::App* app, ScheduleFlags& f) {
  app->add_option("--pretrain-epochs", f.pretrain_epochs, "Proxy-task epochs")->check(CLI::PositiveNumber);
  app->add_option("--pretrain-patience", f.pretrain_patience, "Proxy-task patience")->check(CLI::PositiveNumber);
  app->add_option("--proxy-per-class", f.proxy_per_class, "Proxy images per texture class")
      ->check(CLI::PositiveNumber);
}

struct SplitFlags {
  std::size_t repetitions = 10;
  double train_fraction = 0.8;
};

void add_split_flags(CLI::App* app, SplitFlags& f) {
  app->add_option("--repetitions", f.repetitions, "Monte-Carlo cross-validation repetitions")
      ->check(CLI::PositiveNumber);
  app->add_option("--train-fraction", f.train_fraction, "Training share of each repetition")
      ->check(CLI::Range(0.05, 0.95));
}

void require_path(const std::string& path, const std::string& what) {
  if (path.empty()) throw UsageError(what + " is required");
  if (!fs::exists(path)) throw UsageError(what + " not found: " + path);
}

std::vector<InputMode> parse_modes(const std::vector<std::string>& names) {
  std::vector<InputMode> out;
  for (const auto& n : names) {
    try {
      out.push_back(parse_input_mode(n));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (out.empty()) throw UsageError("no input mode given");
  return out;
}

std::string stem_of(const std::string& report_name) {
  std::string s = report_name;
  std::replace(s.begin(), s.end(), '/', '_');
  return s;
}

class Context {
 public:
  Context(const Globals& g, std::ostream& out, std::ostream& err) : g_(g), out_(out), err_(err) {}

  const Globals& globals() const { return g_; }
  std::ostream& out() { return out_; }

  data::FeaturizeOptions featurize(std::size_t resolution) const {
    data::FeaturizeOptions o;
    o.resolution = resolution;
    o.jobs = g_.jobs;
    if (!g_.cache.empty()) o.cache_dir = g_.cache;
    return o;
  }

  experiment::Log log() {
    if (g_.quiet) return {};
    return [this](const std::string& m) {
      std::lock_guard lock(mutex_);
      err_ << "[fusecad] " << m << '\n';
    };
  }

 private:
  Globals g_;
  std::ostream& out_;
  std::ostream& err_;
  std::mutex mutex_;
};

// Every option of `app` and its parents, current value or default.
nlohmann::json resolved_config(const CLI::App* app) {
  std::vector<const CLI::App*> chain;
  for (const CLI::App* a = app; a; a = a->get_parent()) chain.push_back(a);
  std::reverse(chain.begin(), chain.end());
  nlohmann::json options = nlohmann::json::object();
  std::string command;
  for (const CLI::App* a : chain) {
    if (a->get_parent()) command += (command.empty() ? "" : " ") + a->get_name();
    for (const CLI::Option* opt : a->get_options()) {
      if (opt->get_lnames().empty() || opt->get_lnames().front() == "help" || opt->get_lnames().front() == "config")
        continue;
      const std::string key = opt->get_lnames().front();
      const bool flag = opt->get_expected_max() == 0;
      if (flag)
        options[key] = opt->count() > 0;
      else if (opt->count() == 0)
        options[key] = opt->get_default_str();
      else if (opt->get_expected_max() <= 1 && opt->results().size() == 1)
        options[key] = opt->results().front();
      else
        options[key] = opt->results();
    }
  }
  return {{"command", command}, {"options", options}};
}

void write_resolved(const CLI::App* app, const fs::path& directory) {
  fs::create_directories(directory);
  std::ofstream out(directory / "resolved_config.json");
  if (!out) throw std::runtime_error("cannot write " + (directory / "resolved_config.json").string());
  out << resolved_config(app).dump(2) << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void emit_reports(Context& ctx, const std::vector<eval::EvalReport>& reports, const fs::path& directory) {
  fs::create_directories(directory);
  for (const auto& r : reports) eval::emit_report(r, directory / stem_of(r.name));
  const std::string table = eval::render_table(reports);
  write_text(directory / "summary.txt", table);
  write_text(directory / "summary.csv", eval::render_summary_csv(reports));
  ctx.out() << table;
}

std::vector<experts::TrainedModel> pretrained_or_fresh(Context& ctx, const std::string& directory,
                                                      std::size_t resolution, const experiment::Schedule& s) {
  if (!directory.empty()) {
    require_path(directory, "--pretrained");
    auto models = experiment::load_models(directory);
    for (const auto& m : models)
      if (m.model.input_shape() != ad::Shape{3, resolution, resolution})
        throw UsageError("pretrained model " + m.name + " expects " + ad::shape_string(m.model.input_shape()) +
                         ", the data has resolution " + std::to_string(resolution));
    return models;
  }
  return experiment::pretrain_candidates(resolution, s, derive_seed(ctx.globals().seed, {kPretrain}),
                                         ctx.globals().jobs, ctx.log());
}

std::vector<experts::TrainedModel> filter_families(std::vector<experts::TrainedModel> models,
                                                   const std::vector<std::string>& names) {
  if (names.empty()) return models;
  std::vector<experts::TrainedModel> out;
  for (const auto& n : names) {
    auto it = std::find_if(models.begin(), models.end(), [&](const auto& m) { return m.name == n; });
    if (it == models.end()) throw UsageError("unknown expert '" + n + "'");
    out.push_back(*it);
  }
  return out;
}

// ---- subcommands --------------------------------------------------------------

struct GenerateArgs {
  data::SyntheticConfig config;
  std::string out;
};

void cmd_generate(Context& ctx, const CLI::App* app, GenerateArgs a) {
  a.config.seed = ctx.globals().seed;
  try {
    a.config.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto ds = data::generate_synthetic(a.config, a.out);
  write_resolved(app, a.out);
  const auto counts = ds.manifest.class_counts();
  ctx.out() << "wrote " << ds.manifest.size() << " images (" << counts[0] << " benign, " << counts[1]
            << " malignant) to " << (fs::path(a.out) / "manifest.csv").string() << '\n';
}

struct FeaturizeArgs {
  std::string manifest, out;
  std::size_t resolution = 64;
};

void cmd_featurize(Context& ctx, const CLI::App* app, const FeaturizeArgs& a) {
  require_path(a.manifest, "--manifest");
  const auto corpus = experiment::load_corpus(a.manifest, ctx.featurize(a.resolution));
  std::vector<ad::NamedTensor> named;
  for (std::size_t i = 0; i < corpus.planes.size(); ++i)
    named.push_back({corpus.manifest.samples[i].image_path.filename().replace_extension().string(), corpus.planes[i]});
  fs::create_directories(a.out);
  ad::save_fct(fs::path(a.out) / "features.fct", named);
  write_resolved(app, a.out);
  ctx.out() << "featurized " << named.size() << " images at " << a.resolution << "x" << a.resolution << '\n';
}

struct PretrainArgs {
  std::string out;
  std::size_t resolution = 64;
  std::vector<std::string> families;
  ScheduleFlags schedule;
};

void cmd_pretrain(Context& ctx, const CLI::App* app, const PretrainArgs& a) {
  const auto s = a.schedule.schedule();
  auto models = filter_families(
      experiment::pretrain_candidates(a.resolution, s, derive_seed(ctx.globals().seed, {kPretrain}),
                                      ctx.globals().jobs, ctx.log()),
      a.families);
  experiment::save_models(models, a.out);
  write_resolved(app, a.out);
  for (const auto& m : models)
    ctx.out() << m.name << " proxy accuracy " << m.meta.at("proxy_val_accuracy").get<double>() << '\n';
}

struct FinetuneArgs {
  std::string pretrained, manifest, out, input = "fused";
  double freeze = 0.25;
  std::vector<std::string> families;
  ScheduleFlags schedule;
};

void cmd_finetune(Context& ctx, const CLI::App* app, const FinetuneArgs& a) {
  require_path(a.pretrained, "--pretrained");
  require_path(a.manifest, "--manifest");
  const auto s = a.schedule.schedule();
  const auto mode = parse_modes({a.input}).front();
  auto pretrained = filter_families(experiment::load_models(a.pretrained), a.families);
  const auto corpus =
      experiment::load_corpus(a.manifest, ctx.featurize(pretrained.front().model.input_shape()[1]));
  const auto tuned = experiment::finetune_candidates(pretrained, a.freeze, corpus.all(mode), s,
                                                     derive_seed(ctx.globals().seed, {kFinetune}),
                                                     ctx.globals().jobs, ctx.log());
  experiment::save_models(tuned, a.out);
  write_resolved(app, a.out);
  for (const auto& m : tuned)
    ctx.out() << m.name << " validation accuracy " << m.meta.at("val_accuracy").get<double>() << '\n';
}

struct ConsultArgs {
  std::string manifest, pretrained, finetuned, out;
  std::size_t size = 3;
  double freeze = 0.25;
  std::size_t resolution = 64;
  ScheduleFlags schedule;
};

experts::ConsultEnsemble build_consult_from(Context& ctx, const experiment::Corpus& corpus,
                                            const std::string& pretrained, const std::string& finetuned,
                                            std::size_t size, double freeze, const experiment::Schedule& s) {
  std::vector<experts::TrainedModel> candidates;
  const auto train = corpus.all(InputMode::fused);
  if (!finetuned.empty()) {
    require_path(finetuned, "--finetuned");
    candidates = experiment::load_models(finetuned);
  } else {
    candidates = experiment::finetune_candidates(pretrained_or_fresh(ctx, pretrained, corpus.resolution(), s),
                                                 freeze, train, s, derive_seed(ctx.globals().seed, {kFinetune}),
                                                 ctx.globals().jobs, ctx.log());
  }
  if (size < 2 || size > candidates.size())
    throw UsageError("consult size must lie in 2.." + std::to_string(candidates.size()));
  return experiment::fit_consult(candidates, size, train, s, derive_seed(ctx.globals().seed, {kConsult}),
                                 ctx.globals().jobs);
}

void cmd_consult(Context& ctx, const CLI::App* app, const ConsultArgs& a) {
  require_path(a.manifest, "--manifest");
  const auto s = a.schedule.schedule();
  const auto corpus = experiment::load_corpus(a.manifest, ctx.featurize(a.resolution));
  const auto ec = build_consult_from(ctx, corpus, a.pretrained, a.finetuned, a.size, a.freeze, s);
  experts::save_consult(ec, a.out);
  write_resolved(app, a.out);
  ctx.out() << "EC-" << ec.size() << ":";
  for (const auto& e : ec.experts()) ctx.out() << ' ' << e.name;
  ctx.out() << "\nbundle " << a.out << " sha256 " << experts::bundle_hash(a.out) << '\n';
}

struct StudentFlags {
  std::string cue_join = "features";
  std::size_t block_layers = 4;
  std::size_t growth = 8;

  kdl::StudentSpec spec(std::size_t resolution) const {
    kdl::StudentSpec s;
    s.resolution = resolution;
    s.block_layers = block_layers;
    s.growth = growth;
    try {
      s.cue_join = kdl::parse_cue_join(cue_join);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    return s;
  }
};

const CLI::Validator kExpertResolution(
    [](std::string& v) -> std::string {
      const long r = std::strtol(v.c_str(), nullptr, 10);
      return r >= 32 && r <= 1024 && r % 8 == 0 ? "" : "expert resolution must be a multiple of 8 in [32, 1024]";
    },
    "MULTIPLE OF 8 IN [32, 1024]");

void add_student_flags(CLI::App* app, StudentFlags& f) {
  app->add_option("--cue-join", f.cue_join, "Student output joined with the cue: features | probabilities");
  app->add_option("--block-layers", f.block_layers, "Layers per student dense block")->check(CLI::PositiveNumber);
  app->add_option("--growth", f.growth, "Student dense-block growth rate")->check(CLI::PositiveNumber);
}

struct KdlArgs {
  std::string manifest, consult_bundle, out;
  bool unaided = false;
  std::size_t resolution = 64;
  StudentFlags student;
  ScheduleFlags schedule;
};

void cmd_kdl(Context& ctx, const CLI::App* app, const KdlArgs& a) {
  require_path(a.manifest, "--manifest");
  if (a.unaided == !a.consult_bundle.empty()) throw UsageError("give exactly one of --consult-bundle and --unaided");
  const auto s = a.schedule.schedule();
  const auto corpus = experiment::load_corpus(a.manifest, ctx.featurize(a.resolution));
  const auto spec = a.student.spec(a.resolution);
  const std::uint64_t seed = derive_seed(ctx.globals().seed, {kStudent});
  auto data = corpus.all(InputMode::fused);
  std::optional<kdl::KdlModel> model;
  if (a.unaided) {
    model = kdl::build_unaided(spec, seed);
  } else {
    require_path(a.consult_bundle, "--consult-bundle");
    auto ec = std::make_shared<const experts::ConsultEnsemble>(experts::load_consult(a.consult_bundle));
    experiment::check_consult_disjoint(*ec, corpus.manifest);
    model = kdl::build_kdl(spec, ec, seed);
    data = model->with_cues(data, ctx.globals().jobs);
  }
  const auto [fit, val] = data::carve_validation(data, s.validation_fraction, derive_seed(seed, {2}));
  auto config = s.train;
  config.seed = seed;
  const auto history = kdl::train_kdl(*model, fit, val, config);
  kdl::save_kdl(*model, config, history, a.out,
                a.unaided ? std::nullopt : std::optional<fs::path>(a.consult_bundle));
  write_text(fs::path(a.out) / "loss_curve.csv", eval::loss_curve_csv(history));
  write_resolved(app, a.out);
  ctx.out() << (a.unaided ? "unaided student" : "KDL-EC-" + std::to_string(model->consult()->size()))
            << " converged at epoch " << history.convergence_epoch << ", best validation loss "
            << history.best_val_loss << '\n';
}

struct GridArgs {
  std::string manifest, pretrained, out;
  std::vector<std::string> inputs{"raw", "augmented", "fused"};
  std::vector<double> freezes{0.0, 0.25, 0.5, 0.75};
  std::vector<std::string> families;
  std::size_t resolution = 64;
  SplitFlags split;
  ScheduleFlags schedule;
};

void cmd_grid(Context& ctx, const CLI::App* app, const GridArgs& a) {
  require_path(a.manifest, "--manifest");
  const auto s = a.schedule.schedule();
  const auto modes = parse_modes(a.inputs);
  for (double f : a.freezes)
    if (!(f >= 0.0 && f <= 1.0)) throw UsageError("freeze fractions must lie in [0, 1]");
  const auto corpus = experiment::load_corpus(a.manifest, ctx.featurize(a.resolution));
  const auto pretrained = filter_families(pretrained_or_fresh(ctx, a.pretrained, a.resolution, s), a.families);
  const auto plan = data::plan_splits(corpus.manifest, a.split.repetitions, a.split.train_fraction,
                                      derive_seed(ctx.globals().seed, {kSplits}));
  const auto reports =
      experiment::run_grid(corpus, plan, pretrained, modes, a.freezes, s, ctx.globals().jobs, ctx.log());
  emit_reports(ctx, reports, a.out);
  write_resolved(app, a.out);
}

struct EcArgs {
  std::string manifest, expert_manifest, pretrained, finetuned, out;
  std::vector<std::size_t> sizes{3, 5, 7};
  double freeze = 0.25;
  std::size_t resolution = 64;
  SplitFlags split;
  ScheduleFlags schedule;
};

void cmd_ec(Context& ctx, const CLI::App* app, const EcArgs& a) {
  require_path(a.manifest, "--manifest");
  if (a.expert_manifest.empty() == a.finetuned.empty())
    throw UsageError("give exactly one of --expert-manifest and --finetuned");
  const auto s = a.schedule.schedule();
  const auto corpus = experiment::load_corpus(a.manifest, ctx.featurize(a.resolution));
  std::vector<experts::TrainedModel> tuned;
  if (!a.finetuned.empty()) {
    require_path(a.finetuned, "--finetuned");
    tuned = experiment::load_models(a.finetuned);
  } else {
    require_path(a.expert_manifest, "--expert-manifest");
    const auto fit = experiment::load_corpus(a.expert_manifest, ctx.featurize(a.resolution));
    data::check_disjoint(fit.manifest, corpus.manifest);
    tuned = experiment::finetune_candidates(pretrained_or_fresh(ctx, a.pretrained, a.resolution, s), a.freeze,
                                            fit.all(InputMode::fused), s,
                                            derive_seed(ctx.globals().seed, {kFinetune}), ctx.globals().jobs,
                                            ctx.log());
    experiment::save_models(tuned, fs::path(a.out) / "experts");
  }
  for (const auto& t : tuned) {
    const auto seen = t.meta.is_object() && t.meta.contains("train_patients")
                          ? t.meta.at("train_patients").get<std::vector<std::string>>()
                          : std::vector<std::string>{};
    auto shared = data::shared_patients(seen, corpus.manifest.patients());
    if (!shared.empty())
      throw data::LeakageError("patient leakage: expert " + t.name + " was fitted on " +
                                   std::to_string(shared.size()) + " evaluation patient(s) (first: " + shared.front() +
                                   ")",
                               shared);
  }
  for (std::size_t n : a.sizes)
    if (n < 2 || n > tuned.size()) throw UsageError("consult sizes must lie in 2.." + std::to_string(tuned.size()));
  const auto plan = data::plan_splits(corpus.manifest, a.split.repetitions, a.split.train_fraction,
                                      derive_seed(ctx.globals().seed, {kSplits}));
  emit_reports(ctx, experiment::run_ec(corpus, plan, tuned, a.sizes, s, ctx.globals().jobs, ctx.log()), a.out);
  write_resolved(app, a.out);
}

struct ExperimentKdlArgs {
  std::string train_manifest, consult_bundle, consult_manifest, pretrained, out;
  std::size_t consult_size = 3;
  double freeze = 0.25;
  bool no_baseline = false;
  std::size_t resolution = 64;
  StudentFlags student;
  SplitFlags split;
  ScheduleFlags schedule;
};

void cmd_experiment_kdl(Context& ctx, const CLI::App* app, const ExperimentKdlArgs& a) {
  require_path(a.train_manifest, "--train-manifest");
  if (a.consult_bundle.empty() == a.consult_manifest.empty())
    throw UsageError("give exactly one of --consult-bundle and --consult-manifest");
  const auto s = a.schedule.schedule();
  const auto corpus = experiment::load_corpus(a.train_manifest, ctx.featurize(a.resolution));
  const fs::path out = a.out;
  fs::path bundle;
  std::shared_ptr<const experts::ConsultEnsemble> ec;
  if (!a.consult_bundle.empty()) {
    require_path(a.consult_bundle, "--consult-bundle");
    bundle = a.consult_bundle;
    ec = std::make_shared<const experts::ConsultEnsemble>(experts::load_consult(bundle));
    if (app->get_option("--consult-size")->count() > 0 && ec->size() != a.consult_size)
      throw UsageError("--consult-size " + std::to_string(a.consult_size) + " does not match the bundle's " +
                       std::to_string(ec->size()) + " experts");
  } else {
    require_path(a.consult_manifest, "--consult-manifest");
    const auto fit = experiment::load_corpus(a.consult_manifest, ctx.featurize(a.resolution));
    data::check_disjoint(fit.manifest, corpus.manifest);
    bundle = out / "consult";
    ec = std::make_shared<const experts::ConsultEnsemble>(
        build_consult_from(ctx, fit, a.pretrained, "", a.consult_size, a.freeze, s));
    experts::save_consult(*ec, bundle);
  }
  experiment::check_consult_disjoint(*ec, corpus.manifest);
  const auto plan = data::plan_splits(corpus.manifest, a.split.repetitions, a.split.train_fraction,
                                      derive_seed(ctx.globals().seed, {kSplits}));
  experiment::KdlOptions options;
  options.student = a.student.spec(a.resolution);
  options.unaided_baseline = !a.no_baseline;
  options.checkpoint_dir = out / "checkpoints";
  options.consult_bundle = bundle;
  const auto outcome = experiment::run_kdl(corpus, plan, ec, options, s, ctx.globals().jobs, ctx.log());
  std::vector<eval::EvalReport> reports{outcome.kdl};
  if (outcome.unaided) reports.push_back(*outcome.unaided);
  emit_reports(ctx, reports, out);
  write_resolved(app, out);
}

struct ExplainArgs {
  std::string bundle, out;
  std::vector<std::string> images;
  std::vector<std::string> modes{"raw", "augmented", "fused"};
  int target = -1;
  double alpha = 0.5;
};

void cmd_explain(Context& ctx, const CLI::App* app, const ExplainArgs& a) {
  require_path(a.bundle, "--bundle");
  if (a.images.empty()) throw UsageError("--images needs at least one image");
  for (const auto& img : a.images) require_path(img, "image");
  if (a.target < -1 || a.target > 1) throw UsageError("--target must be 0, 1 or -1 (predicted)");
  if (!(a.alpha >= 0.0 && a.alpha <= 1.0)) throw UsageError("--alpha must lie in [0, 1]");
  const auto modes = parse_modes(a.modes);

  // Either a KDL bundle directory or a single model stem.
  std::optional<kdl::KdlModel> kdl_model;
  std::optional<experts::TrainedModel> plain;
  if (fs::is_directory(a.bundle) && fs::exists(fs::path(a.bundle) / "kdl.json")) {
    kdl_model = kdl::load_kdl(a.bundle);
  } else {
    fs::path stem = a.bundle;
    if (stem.extension() == ".json" || stem.extension() == ".fct") stem.replace_extension();
    if (!fs::exists(fs::path(stem.string() + ".json"))) throw UsageError("not a model bundle: " + a.bundle);
    plain = experts::load_trained(stem);
  }
  const ad::Shape input = kdl_model ? kdl_model->student().input_shape() : plain->model.input_shape();
  const std::size_t resolution = input.at(1);

  data::DatasetManifest manifest;
  manifest.name = "explain";
  for (const auto& img : a.images) manifest.samples.push_back({fs::absolute(img), "explain", 1, 0});
  const auto corpus = experiment::make_corpus(manifest, ctx.featurize(resolution));

  fs::create_directories(a.out);
  std::size_t written = 0;
  for (std::size_t i = 0; i < a.images.size(); ++i) {
    const GrayImage image = read_pgm(a.images[i]);
    for (InputMode mode : modes) {
      const auto views = corpus.dataset({i}, mode);
      std::vector<double> cue;
      if (kdl_model && kdl_model->consult()) {
        const auto p = experts::consult_predict(*kdl_model->consult(), corpus.dataset({i}, InputMode::fused));
        cue = {p[0][0], p[0][1]};
      }
      // Class of the mode's (view-averaged) prediction.
      double p1 = 0.0;
      for (std::size_t v = 0; v < views.size(); ++v) {
        nn::Dataset one = views.subset({v});
        if (!cue.empty()) {
          one.aux_width = kdl::kCueWidth;
          one.aux = cue;
        }
        p1 += (kdl_model ? nn::predict(*kdl_model, one) : nn::predict(plain->model, one))[0][1];
      }
      p1 /= static_cast<double>(views.size());
      const int target = a.target >= 0 ? a.target : (p1 >= 0.5 ? 1 : 0);
      gradcam::Heatmap mean{resolution, resolution, std::vector<double>(resolution * resolution, 0.0)};
      for (std::size_t v = 0; v < views.size(); ++v) {
        ad::Tensor x(input);
        std::copy_n(views.inputs.begin() + static_cast<std::ptrdiff_t>(v * views.sample_size()), views.sample_size(),
                    x.data().begin());
        const auto r = kdl_model ? gradcam::gradcam(*kdl_model, x, target, std::nullopt, cue)
                                 : gradcam::gradcam(plain->model, x, target);
        for (std::size_t k = 0; k < mean.values.size(); ++k) mean.values[k] += r.heatmap.values[k];
      }
      gradcam::normalize_max(mean);
      const auto map = gradcam::resize_bilinear(mean, image.width(), image.height());
      const std::string name = fs::path(a.images[i]).stem().string() + "_" + to_string(mode) + "_" +
                               (target == 1 ? "malignant" : "benign") + ".ppm";
      gradcam::write_overlay(fs::path(a.out) / name, image, map, a.alpha);
      ++written;
      ctx.out() << name << " p(malignant)=" << p1 << '\n';
    }
  }
  write_resolved(app, a.out);
  ctx.out() << "wrote " << written << " overlays to " << a.out << '\n';
}

struct ReportArgs {
  std::vector<std::string> reports;
  std::string out;
};

void cmd_report(Context& ctx, const ReportArgs& a) {
  std::vector<eval::EvalReport> reports;
  for (const auto& path : a.reports) {
    require_path(path, "report");
    std::ifstream in(path);
    try {
      reports.push_back(nlohmann::json::parse(in).get<eval::EvalReport>());
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(path + ": not an evaluation report (" + e.what() + ")");
    }
  }
  const std::string table = eval::render_table(reports);
  ctx.out() << table;
  if (!a.out.empty()) {
    const fs::path stem = a.out;
    if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
    write_text(stem.string() + ".txt", table);
    write_text(stem.string() + ".csv", eval::render_summary_csv(reports));
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Thyroid-nodule CAD experiments: texture fusion, expert consult, knowledge-driven learning",
               "fusecad"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "TOML file of option values; command-line flags take precedence");

  Globals g;
  if (const char* env = std::getenv("FUSECAD_CACHE")) g.cache = env;
  app.add_option("--seed", g.seed, "Root seed; every component derives its own");
  app.add_option("--jobs", g.jobs, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--cache", g.cache, "Featurization cache directory (default: $FUSECAD_CACHE)");
  app.add_flag("--quiet", g.quiet, "No progress messages");

  std::function<void(Context&)> action;

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Write a synthetic nodule dataset");
  generate->add_option("--out", gen.out, "Output directory")->required();
  generate->add_option("--count", gen.config.count, "Images");
  generate->add_option("--patients", gen.config.patients, "Patients");
  generate->add_option("--malignant-fraction", gen.config.malignant_fraction, "Share of malignant images");
  generate->add_option("--atypical-fraction", gen.config.atypical_fraction,
                       "Share of patients whose nodule looks like the other class");
  generate->add_option("--size", gen.config.size, "Image side in pixels");
  generate->add_option("--patient-prefix", gen.config.patient_prefix, "Patient id prefix");
  generate->callback([&] { action = [&](Context& c) { cmd_generate(c, generate, gen); }; });

  FeaturizeArgs feat;
  auto* featurize = app.add_subcommand("featurize", "Compute the raw/LBP/DWT fusion planes of a manifest");
  featurize->add_option("--manifest", feat.manifest, "Manifest CSV")->required();
  featurize->add_option("--out", feat.out, "Output directory")->required();
  featurize->add_option("--resolution", feat.resolution, "Network input side")->check(CLI::Range(8, 1024));
  featurize->callback([&] { action = [&](Context& c) { cmd_featurize(c, featurize, feat); }; });

  PretrainArgs pre;
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the candidate experts on the proxy texture task");
  pretrain->add_option("--out", pre.out, "Output directory")->required();
  pretrain->add_option("--resolution", pre.resolution, "Network input side")->check(kExpertResolution);
  pretrain->add_option("--families", pre.families, "Subset of expert names")->delimiter(',');
  add_pretrain_flags(pretrain, pre.schedule);
  pretrain->callback([&] { action = [&](Context& c) { cmd_pretrain(c, pretrain, pre); }; });

  FinetuneArgs ft;
  auto* finetune = app.add_subcommand("finetune", "Fine-tune pretrained experts on a manifest");
  finetune->add_option("--pretrained", ft.pretrained, "Directory written by pretrain")->required();
  finetune->add_option("--manifest", ft.manifest, "Manifest CSV")->required();
  finetune->add_option("--out", ft.out, "Output directory")->required();
  finetune->add_option("--freeze", ft.freeze, "Fraction of body layers kept frozen")->check(CLI::Range(0.0, 1.0));
  finetune->add_option("--input", ft.input, "raw | augmented | fused");
  finetune->add_option("--families", ft.families, "Subset of expert names")->delimiter(',');
  add_train_flags(finetune, ft.schedule);
  finetune->callback([&] { action = [&](Context& c) { cmd_finetune(c, finetune, ft); }; });

  ConsultArgs con;
  auto* consult = app.add_subcommand("consult", "Fit an expert consult (EC-n) and write its bundle");
  consult->add_option("--manifest", con.manifest, "Manifest CSV the consult is fitted on")->required();
  consult->add_option("--out", con.out, "Bundle directory")->required();
  consult->add_option("--size", con.size, "Number of experts")->check(CLI::Range(2, 7));
  consult->add_option("--pretrained", con.pretrained, "Directory written by pretrain (default: pretrain now)");
  consult->add_option("--finetuned", con.finetuned, "Directory written by finetune (skips fine-tuning)");
  consult->add_option("--freeze", con.freeze, "Fine-tuning freeze fraction")->check(CLI::Range(0.0, 1.0));
  consult->add_option("--resolution", con.resolution, "Network input side")->check(kExpertResolution);
  add_train_flags(consult, con.schedule);
  add_pretrain_flags(consult, con.schedule);
  consult->callback([&] { action = [&](Context& c) { cmd_consult(c, consult, con); }; });

  KdlArgs kd;
  auto* kdl_cmd = app.add_subcommand("kdl", "Train one KDL-EC student (or the unaided student)");
  kdl_cmd->add_option("--manifest", kd.manifest, "Training manifest CSV")->required();
  kdl_cmd->add_option("--out", kd.out, "Output directory")->required();
  kdl_cmd->add_option("--consult-bundle", kd.consult_bundle, "Consult bundle directory");
  kdl_cmd->add_flag("--unaided", kd.unaided, "Train the student without a cue");
  kdl_cmd->add_option("--resolution", kd.resolution, "Network input side")->check(CLI::Range(16, 1024));
  add_student_flags(kdl_cmd, kd.student);
  add_train_flags(kdl_cmd, kd.schedule);
  kdl_cmd->callback([&] { action = [&](Context& c) { cmd_kdl(c, kdl_cmd, kd); }; });

  auto* experiment = app.add_subcommand("experiment", "Cross-validated experiments");
  experiment->require_subcommand(1);

  GridArgs grid;
  auto* grid_cmd = experiment->add_subcommand("grid", "Experts x input modes x freeze fractions");
  grid_cmd->add_option("--manifest", grid.manifest, "Manifest CSV")->required();
  grid_cmd->add_option("--out", grid.out, "Output directory")->required();
  grid_cmd->add_option("--pretrained", grid.pretrained, "Directory written by pretrain (default: pretrain now)");
  grid_cmd->add_option("--inputs", grid.inputs, "Input modes")->delimiter(',');
  grid_cmd->add_option("--freeze", grid.freezes, "Freeze fractions")->delimiter(',');
  grid_cmd->add_option("--families", grid.families, "Subset of expert names")->delimiter(',');
  grid_cmd->add_option("--resolution", grid.resolution, "Network input side")->check(kExpertResolution);
  add_split_flags(grid_cmd, grid.split);
  add_train_flags(grid_cmd, grid.schedule);
  add_pretrain_flags(grid_cmd, grid.schedule);
  grid_cmd->callback([&] { action = [&](Context& c) { cmd_grid(c, grid_cmd, grid); }; });

  EcArgs ec;
  auto* ec_cmd = experiment->add_subcommand("ec", "EC-n consults against single experts");
  ec_cmd->add_option("--manifest", ec.manifest, "Evaluation manifest CSV")->required();
  ec_cmd->add_option("--out", ec.out, "Output directory")->required();
  ec_cmd->add_option("--expert-manifest", ec.expert_manifest, "Disjoint manifest the experts are fitted on");
  ec_cmd->add_option("--finetuned", ec.finetuned, "Directory written by finetune");
  ec_cmd->add_option("--pretrained", ec.pretrained, "Directory written by pretrain (default: pretrain now)");
  ec_cmd->add_option("--sizes", ec.sizes, "Consult sizes")->delimiter(',');
  ec_cmd->add_option("--freeze", ec.freeze, "Fine-tuning freeze fraction")->check(CLI::Range(0.0, 1.0));
  ec_cmd->add_option("--resolution", ec.resolution, "Network input side")->check(kExpertResolution);
  add_split_flags(ec_cmd, ec.split);
  add_train_flags(ec_cmd, ec.schedule);
  add_pretrain_flags(ec_cmd, ec.schedule);
  ec_cmd->callback([&] { action = [&](Context& c) { cmd_ec(c, ec_cmd, ec); }; });

  ExperimentKdlArgs ek;
  auto* ek_cmd = experiment->add_subcommand("kdl", "KDL-EC-n against the unaided student");
  ek_cmd->add_option("--train-manifest", ek.train_manifest, "Manifest the students are evaluated on")->required();
  ek_cmd->add_option("--out", ek.out, "Output directory")->required();
  ek_cmd->add_option("--consult-bundle", ek.consult_bundle, "Consult bundle directory");
  ek_cmd->add_option("--consult-manifest", ek.consult_manifest, "Disjoint manifest to fit the consult on");
  ek_cmd->add_option("--pretrained", ek.pretrained, "Directory written by pretrain (default: pretrain now)");
  ek_cmd->add_option("--consult-size", ek.consult_size, "Number of experts")->check(CLI::Range(2, 7));
  ek_cmd->add_option("--freeze", ek.freeze, "Fine-tuning freeze fraction")->check(CLI::Range(0.0, 1.0));
  ek_cmd->add_flag("--no-baseline", ek.no_baseline, "Skip the unaided student");
  ek_cmd->add_option("--resolution", ek.resolution, "Network input side")->check(kExpertResolution);
  add_student_flags(ek_cmd, ek.student);
  add_split_flags(ek_cmd, ek.split);
  add_train_flags(ek_cmd, ek.schedule);
  add_pretrain_flags(ek_cmd, ek.schedule);
  ek_cmd->callback([&] { action = [&](Context& c) { cmd_experiment_kdl(c, ek_cmd, ek); }; });

  ExplainArgs ex;
  auto* explain = app.add_subcommand("explain", "Grad-CAM overlays for images");
  explain->add_option("--bundle", ex.bundle, "KDL bundle directory or model stem")->required();
  explain->add_option("--images", ex.images, "PGM images")->delimiter(',')->required();
  explain->add_option("--out", ex.out, "Output directory")->required();
  explain->add_option("--modes", ex.modes, "Input modes")->delimiter(',');
  explain->add_option("--target", ex.target, "Explained class (0 benign, 1 malignant, -1 predicted)");
  explain->add_option("--alpha", ex.alpha, "Heatmap opacity");
  explain->callback([&] { action = [&](Context& c) { cmd_explain(c, explain, ex); }; });

  ReportArgs rep;
  auto* report = app.add_subcommand("report", "Tabulate saved evaluation reports");
  report->add_option("--reports", rep.reports, "Report JSON files")->delimiter(',')->required();
  report->add_option("--out", rep.out, "Write <out>.txt and <out>.csv");
  report->callback([&] { action = [&](Context& c) { cmd_report(c, rep); }; });

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "fusecad: " << e.what() << '\n';
    return kExitUsage;
  }

  Context ctx(g, out, err);
  try {
    if (!action) throw UsageError("no command given");
    action(ctx);
  } catch (const UsageError& e) {
    err << "fusecad: " << e.what() << '\n';
    return kExitUsage;
  } catch (const data::LeakageError& e) {
    err << "fusecad: " << e.what() << '\n';
    return kExitUsage;
  } catch (const data::ManifestError& e) {
    err << "fusecad: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "fusecad: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace fusecad::cli
