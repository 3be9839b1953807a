#include "fusecad/experiment/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "fusecad/parallel.hpp"
#include "fusecad/rng.hpp"

namespace fs = std::filesystem;

namespace fusecad::experiment {

namespace {

void say(const Log& log, const std::string& message) {
  if (log) log(message);
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> out(n);
  std::iota(out.begin(), out.end(), 0);
  return out;
}

nn::TrainConfig seeded(nn::TrainConfig config, std::uint64_t seed) {
  config.seed = seed;
  return config;
}

std::vector<std::string> sorted_patients(const nn::Dataset& d) {
  std::set<std::string> unique(d.patients.begin(), d.patients.end());
  return {unique.begin(), unique.end()};
}

std::string fixed2(double v) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(2);
  out << v;
  return out.str();
}

}  // namespace

std::size_t Corpus::resolution() const {
  if (planes.empty()) throw std::logic_error("empty corpus");
  return planes.front().dim(1);
}

nn::Dataset Corpus::dataset(const std::vector<std::size_t>& indices, InputMode mode) const {
  return data::build_dataset(manifest, planes, indices, mode);
}

nn::Dataset Corpus::all(InputMode mode) const { return dataset(iota_indices(manifest.size()), mode); }

Corpus load_corpus(const fs::path& manifest, const data::FeaturizeOptions& options) {
  return make_corpus(data::load_manifest(manifest), options);
}

Corpus make_corpus(data::DatasetManifest manifest, const data::FeaturizeOptions& options) {
  Corpus c{std::move(manifest), {}};
  c.planes = data::featurize_manifest(c.manifest, options);
  return c;
}

void to_json(nlohmann::json& j, const Schedule& s) {
  j = {{"train", s.train},
       {"pretrain", s.pretrain},
       {"proxy_per_class", s.proxy_per_class},
       {"validation_fraction", s.validation_fraction}};
}

void from_json(const nlohmann::json& j, Schedule& s) {
  s.train = j.at("train");
  s.pretrain = j.at("pretrain");
  s.proxy_per_class = j.at("proxy_per_class");
  s.validation_fraction = j.at("validation_fraction");
}

std::vector<experts::TrainedModel> pretrain_candidates(std::size_t resolution, const Schedule& schedule,
                                                       std::uint64_t seed, std::size_t jobs, const Log& log) {
  const auto topologies = experts::candidate_topologies(resolution);
  const auto proxy_train = experts::proxy_dataset(schedule.proxy_per_class, resolution, derive_seed(seed, {100}));
  const auto proxy_val =
      experts::proxy_dataset(std::max<std::size_t>(1, schedule.proxy_per_class / 3), resolution, derive_seed(seed, {101}));
  std::vector<std::optional<experts::TrainedModel>> slots(topologies.size());
  parallel_for(topologies.size(), jobs, [&](std::size_t k) {
    slots[k] = experts::pretrain_expert(topologies[k], proxy_train, proxy_val,
                                        seeded(schedule.pretrain, derive_seed(seed, {k})));
    say(log, "pretrained " + slots[k]->name + " proxy accuracy " +
                 fixed2(slots[k]->meta.at("proxy_val_accuracy").get<double>()));
  });
  std::vector<experts::TrainedModel> out;
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

void save_models(const std::vector<experts::TrainedModel>& models, const fs::path& directory) {
  fs::create_directories(directory);
  nlohmann::json index = nlohmann::json::array();
  for (const auto& m : models) {
    experts::save_trained(m, directory / m.name);
    index.push_back(m.name);
  }
  std::ofstream out(directory / "models.json");
  if (!out) throw std::runtime_error("cannot write " + (directory / "models.json").string());
  out << index.dump(2) << '\n';
}

std::vector<experts::TrainedModel> load_models(const fs::path& directory) {
  std::ifstream in(directory / "models.json");
  if (!in) throw std::runtime_error("no model set at " + directory.string());
  std::vector<experts::TrainedModel> out;
  for (const auto& name : nlohmann::json::parse(in))
    out.push_back(experts::load_trained(directory / name.get<std::string>()));
  return out;
}

std::vector<experts::TrainedModel> finetune_candidates(const std::vector<experts::TrainedModel>& pretrained,
                                                       double freeze_fraction, const nn::Dataset& train,
                                                       const Schedule& schedule, std::uint64_t seed, std::size_t jobs,
                                                       const Log& log) {
  const auto [fit, val] = data::carve_validation(train, schedule.validation_fraction, derive_seed(seed, {1000}));
  std::vector<std::optional<experts::TrainedModel>> slots(pretrained.size());
  parallel_for(pretrained.size(), jobs, [&](std::size_t k) {
    slots[k] = experts::finetune_expert(pretrained[k], freeze_fraction, fit, val,
                                        seeded(schedule.train, derive_seed(seed, {k})));
    slots[k]->meta["train_patients"] = sorted_patients(train);
    say(log, "fine-tuned " + slots[k]->name + " validation accuracy " +
                 fixed2(slots[k]->meta.at("val_accuracy").get<double>()));
  });
  std::vector<experts::TrainedModel> out;
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

experts::ConsultEnsemble fit_consult(const std::vector<experts::TrainedModel>& candidates, std::size_t n,
                                     const nn::Dataset& train, const Schedule& schedule, std::uint64_t seed,
                                     std::size_t jobs) {
  std::vector<experts::TrainedModel> chosen;
  for (std::size_t i : experts::select_experts(candidates, n)) chosen.push_back(candidates[i]);
  auto ensemble = experts::build_consult(std::move(chosen), derive_seed(seed, {0}));
  const auto [fit, val] = data::carve_validation(train, schedule.validation_fraction, derive_seed(seed, {1}));
  experts::train_consult(ensemble, fit, val, seeded(schedule.train, derive_seed(seed, {2})), jobs);
  std::set<std::string> patients(train.patients.begin(), train.patients.end());
  for (const auto& e : ensemble.experts())
    if (e.meta.is_object() && e.meta.contains("train_patients"))
      for (const auto& p : e.meta.at("train_patients")) patients.insert(p.get<std::string>());
  ensemble.meta["train_patients"] = std::vector<std::string>(patients.begin(), patients.end());
  return ensemble;
}

std::vector<std::string> consult_patients(const experts::ConsultEnsemble& consult) {
  if (!consult.meta.is_object() || !consult.meta.contains("train_patients")) return {};
  return consult.meta.at("train_patients").get<std::vector<std::string>>();
}

void check_consult_disjoint(const experts::ConsultEnsemble& consult, const data::DatasetManifest& manifest) {
  auto shared = data::shared_patients(consult_patients(consult), manifest.patients());
  if (shared.empty()) return;
  const std::string what = "patient leakage: " + std::to_string(shared.size()) +
                           " patient(s) of the consult's training data appear in '" + manifest.name + "' (first: " +
                           shared.front() + ")";
  throw data::LeakageError(what, std::move(shared));
}

std::vector<std::array<double, 2>> predict_samples(const nn::Classifier& model, const Corpus& corpus,
                                                   const std::vector<std::size_t>& indices, InputMode mode) {
  const auto views = corpus.dataset(indices, mode);
  const auto raw = nn::predict(model, views);
  if (mode != InputMode::augmented) return raw;
  std::vector<std::size_t> origins;
  return data::average_by_origin(views, raw, origins);
}

std::string GridCell::name() const {
  return family + "/" + to_string(mode) + "/freeze-" + fixed2(freeze_fraction);
}

std::vector<eval::EvalReport> run_grid(const Corpus& corpus, const data::SplitPlan& plan,
                                       const std::vector<experts::TrainedModel>& pretrained,
                                       const std::vector<InputMode>& modes, const std::vector<double>& freezes,
                                       const Schedule& schedule, std::size_t jobs, const Log& log) {
  std::vector<GridCell> cells;
  std::vector<const experts::TrainedModel*> sources;
  for (const auto& p : pretrained)
    for (InputMode mode : modes)
      for (double f : freezes) {
        cells.push_back({p.name, mode, f});
        sources.push_back(&p);
      }
  std::vector<eval::EvalReport> reports;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const GridCell cell = cells[c];
    const experts::TrainedModel& source = *sources[c];
    try {
      reports.push_back(eval::run_cv(
          cell.name(), corpus.manifest, plan,
          [&](const eval::CvTask& task) {
            const auto train = corpus.dataset(task.split->train, cell.mode);
            const auto [fit, val] =
                data::carve_validation(train, schedule.validation_fraction, derive_seed(task.seed, {2}));
            const auto tuned =
                experts::finetune_expert(source, cell.freeze_fraction, fit, val, seeded(schedule.train, task.seed));
            return eval::CvOutcome{predict_samples(tuned.model, corpus, task.split->test, cell.mode), tuned.history};
          },
          jobs));
    } catch (const std::exception& e) {
      throw std::runtime_error("grid cell " + cell.name() + ": " + e.what());
    }
    say(log, cell.name() + " accuracy " + eval::format_percent(reports.back().accuracy()));
  }
  return reports;
}

std::vector<eval::EvalReport> run_ec(const Corpus& corpus, const data::SplitPlan& plan,
                                     const std::vector<experts::TrainedModel>& finetuned,
                                     const std::vector<std::size_t>& sizes, const Schedule& schedule,
                                     std::size_t jobs, const Log& log) {
  if (finetuned.size() < 2) throw std::invalid_argument("EC experiments need at least 2 experts");
  // Expert outputs of every sample, ranked best first.
  const auto ranked = experts::select_experts(finetuned, finetuned.size());
  std::vector<experts::TrainedModel> ordered;
  for (std::size_t i : ranked) ordered.push_back(finetuned[i]);
  const auto all = experts::build_consult(ordered, 0).with_expert_outputs(corpus.all(InputMode::fused), jobs);
  const std::size_t width = all.aux_width;

  auto columns = [&](const nn::Dataset& d, std::size_t n) {
    nn::Dataset out = d;
    out.aux_width = 2 * n;
    out.aux.clear();
    for (std::size_t i = 0; i < d.size(); ++i)
      out.aux.insert(out.aux.end(), d.aux.begin() + static_cast<std::ptrdiff_t>(i * width),
                     d.aux.begin() + static_cast<std::ptrdiff_t>(i * width + 2 * n));
    return out;
  };

  std::vector<eval::EvalReport> reports;
  for (std::size_t n : sizes) {
    if (n < 2 || n > ordered.size())
      throw std::invalid_argument("consult size " + std::to_string(n) + " outside 2.." + std::to_string(ordered.size()));
    const auto cached = columns(all, n);
    const std::vector<experts::TrainedModel> chosen(ordered.begin(), ordered.begin() + static_cast<std::ptrdiff_t>(n));
    reports.push_back(eval::run_cv(
        "EC-" + std::to_string(n), corpus.manifest, plan,
        [&](const eval::CvTask& task) {
          auto ensemble = experts::build_consult(chosen, derive_seed(task.seed, {0}));
          const auto [fit, val] = data::carve_validation(cached.subset(task.split->train),
                                                         schedule.validation_fraction, derive_seed(task.seed, {2}));
          const auto history = nn::train(ensemble, fit, val, seeded(schedule.train, task.seed));
          return eval::CvOutcome{nn::predict(ensemble, cached.subset(task.split->test)), history};
        },
        jobs));
    say(log, reports.back().name + " accuracy " + eval::format_percent(reports.back().accuracy()));
  }
  for (std::size_t k = 0; k < ordered.size(); ++k) {
    reports.push_back(eval::run_cv(
        "single/" + ordered[k].name, corpus.manifest, plan,
        [&](const eval::CvTask& task) {
          std::vector<std::array<double, 2>> out;
          for (std::size_t i : task.split->test)
            out.push_back({all.aux[i * width + 2 * k], all.aux[i * width + 2 * k + 1]});
          return eval::CvOutcome{out, ordered[k].history};
        },
        jobs));
    say(log, reports.back().name + " accuracy " + eval::format_percent(reports.back().accuracy()));
  }
  return reports;
}

KdlOutcome run_kdl(const Corpus& corpus, const data::SplitPlan& plan,
                   std::shared_ptr<const experts::ConsultEnsemble> consult, const KdlOptions& options,
                   const Schedule& schedule, std::size_t jobs, const Log& log) {
  if (!consult) throw std::invalid_argument("KDL experiments need a consult");
  if (options.checkpoint_dir && !options.consult_bundle)
    throw std::invalid_argument("checkpoints need the consult bundle path");
  check_consult_disjoint(*consult, corpus.manifest);

  // Consult cues of every sample, computed once.
  nn::Dataset cued = corpus.all(InputMode::fused);
  const auto probs = nn::predict(*consult, consult->with_expert_outputs(cued, jobs));
  cued.aux_width = kdl::kCueWidth;
  for (const auto& p : probs) cued.aux.insert(cued.aux.end(), p.begin(), p.end());

  const std::size_t reps = plan.repetitions.size();
  std::vector<std::optional<kdl::KdlModel>> kept(reps);
  std::vector<std::optional<eval::CvOutcome>> unaided(reps);

  const std::string name = "KDL-EC-" + std::to_string(consult->size());
  KdlOutcome outcome;
  outcome.kdl = eval::run_cv(
      name, corpus.manifest, plan,
      [&](const eval::CvTask& task) {
        const auto [fit, val] = data::carve_validation(cued.subset(task.split->train), schedule.validation_fraction,
                                                       derive_seed(task.seed, {2}));
        const auto test = cued.subset(task.split->test);
        const auto config = seeded(schedule.train, task.seed);
        if (options.unaided_baseline) {
          auto student = kdl::build_unaided(options.student, task.seed);
          const auto h = kdl::train_kdl(student, fit, val, config);
          unaided[task.repetition] = eval::CvOutcome{kdl::kdl_predict(student, test), h};
        }
        auto model = kdl::build_kdl(options.student, consult, task.seed);
        const auto history = kdl::train_kdl(model, fit, val, config);
        eval::CvOutcome out{kdl::kdl_predict(model, test), history};
        if (options.checkpoint_dir)
          kdl::save_kdl(model, config, history, *options.checkpoint_dir / ("run_" + std::to_string(task.repetition)),
                        options.consult_bundle);
        say(log, name + " repetition " + std::to_string(task.repetition) + " converged at epoch " +
                     std::to_string(history.convergence_epoch) +
                     (unaided[task.repetition] ? " (unaided " +
                                                     std::to_string(unaided[task.repetition]->history.convergence_epoch) +
                                                     ")"
                                               : std::string()));
        if (options.keep_models) kept[task.repetition] = std::move(model);
        return out;
      },
      jobs);
  if (options.unaided_baseline) {
    // Replays the stored outcomes so the baseline gets the same scoring path.
    outcome.unaided = eval::run_cv("unaided-student", corpus.manifest, plan,
                                   [&](const eval::CvTask& task) { return *unaided[task.repetition]; });
  }
  for (auto& m : kept)
    if (m) outcome.models.push_back(std::move(*m));
  return outcome;
}

}  // namespace fusecad::experiment
