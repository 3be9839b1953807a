// Acceptance runner: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,7,...] [--jobs N] [--work DIR]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cli.hpp"
#include "fusecad/data/pipeline.hpp"
#include "fusecad/eval/metrics.hpp"
#include "fusecad/experiment/experiment.hpp"
#include "fusecad/gradcam/gradcam.hpp"
#include "fusecad/hash.hpp"
#include "fusecad/nn/loss.hpp"
#include "fusecad/serialize.hpp"
#include "fusecad/texture.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"
#include "texture_oracles.hpp"

namespace fs = std::filesystem;
using namespace fusecad;
using nn::LayerKind;
using nn::LayerSpec;

namespace {

// ---- pinned tolerances and sizes ---------------------------------------------

constexpr double kGradRelTol = 1e-4;        // criterion 1
constexpr std::size_t kGradNets = 12;
constexpr std::size_t kTextureImages = 100;  // criterion 2
constexpr double kEnergyRelTol = 1e-9;
constexpr double kHaarOracleTol = 1e-12;
constexpr double kBceTol = 1e-12;           // criterion 3
constexpr double kBceGradTol = 1e-6;
constexpr std::size_t kAucSets = 200;       // criterion 5
constexpr double kAucTol = 1e-9;
constexpr std::size_t kSplitManifests = 100;  // criterion 6
constexpr double kProportionTol = 0.05;
constexpr std::size_t kRepetitions = 10;    // criteria 7-9
constexpr double kSignTestAlpha = 0.05;
constexpr std::size_t kMinCamImages = 50;   // criterion 10
constexpr double kCamAnalyticTol = 1e-9;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- criterion 1: autodiff vs central differences ----------------------------

std::vector<LayerSpec> random_network(std::size_t k, Rng& rng) {
  std::vector<LayerSpec> layers;
  const auto width = [&] { return static_cast<std::size_t>(2 * uniform_int(rng, 1, 3)); };
  if (k % 2 == 0) {
    layers.push_back(LayerSpec::input_norm(width(), static_cast<std::size_t>(uniform_int(rng, 1, 2))));
  } else {
    layers.push_back(LayerSpec::conv(width(), 3, static_cast<std::size_t>(uniform_int(rng, 1, 2)), 1));
    layers.push_back(LayerSpec::simple(LayerKind::relu));
  }
  // Block k % 6 is always present; one more is drawn at random.
  auto block = [&](std::size_t b) {
    switch (b % 6) {
      case 0:
        layers.push_back(LayerSpec::conv(width()));
        layers.push_back(LayerSpec::simple(LayerKind::relu));
        break;
      case 1: layers.push_back(LayerSpec::residual(width())); break;
      case 2: layers.push_back(LayerSpec::residual(width(), 2)); break;
      case 3: layers.push_back(LayerSpec::inception({width() / 2, width() / 2, width() / 2})); break;
      case 4: layers.push_back(LayerSpec::dense_block(2, 2)); break;
      default: layers.push_back(LayerSpec::simple(LayerKind::max_pool)); break;
    }
  };
  block(k);
  block(static_cast<std::size_t>(uniform_int(rng, 0, 5)));
  layers.push_back(LayerSpec::simple(k % 3 == 0 ? LayerKind::flatten : LayerKind::global_avg_pool));
  layers.push_back(LayerSpec::dense(static_cast<std::size_t>(uniform_int(rng, 2, 5))));
  layers.push_back(LayerSpec::simple(LayerKind::relu));
  layers.push_back(LayerSpec::dense(2));
  layers.push_back(LayerSpec::simple(LayerKind::softmax));
  return layers;
}

Verdict criterion_autodiff() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  std::set<LayerKind> covered;
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::size_t k = 0; k < kGradNets; ++k) {
    const auto c = static_cast<std::size_t>(uniform_int(rng, 1, 3));
    const auto layers = random_network(k, rng);
    for (const auto& l : layers) covered.insert(l.kind);
    nn::ModelGraph model({c, 8, 8}, layers, derive_seed(101, {k}));
    std::vector<ad::TensorPtr> trainable;
    for (auto* p : model.parameters()) {
      // Off the ReLU kink: zero biases leave dead units exactly at it.
      if (p->value->rank() == 1)
        for (double& v : p->value->data()) v = 0.1 * normal(rng);
      trainable.push_back(p->value);
    }
    auto x = ad::param(testing::random_tensor(rng, {2, c, 8, 8}, false));
    // Projected softmax output, so the softmax backward rule is exercised too.
    const auto r = testing::gradient_check([&] { return model.forward(x).output; }, trainable, rng);
    worst = std::max(worst, r.max_relative_error);
    checked += r.checked;
  }
  const bool all_kinds = covered.size() == 11;
  const bool fast = seconds_since(t0) < 60.0;
  return {worst < kGradRelTol && all_kinds && fast,
          std::to_string(kGradNets) + " nets, " + std::to_string(checked) + " parameters, max rel err " + fmt(worst) +
              ", layer kinds covered " + std::to_string(covered.size()) + "/11, " + fmt(seconds_since(t0), 3) + " s"};
}

// ---- criterion 2: texture oracles -------------------------------------------

Verdict criterion_texture() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(202);
  std::size_t lbp_mismatch = 0;
  double energy_worst = 0.0, oracle_worst = 0.0;
  for (std::size_t i = 0; i < kTextureImages; ++i) {
    const auto w = static_cast<std::size_t>(uniform_int(rng, 8, 32));
    const auto h = static_cast<std::size_t>(uniform_int(rng, 8, 32));
    const auto img = testing::random_image(rng, w, h);
    if (lbp_image(img) != testing::naive_lbp(img)) ++lbp_mismatch;

    const auto we = static_cast<std::size_t>(2 * uniform_int(rng, 4, 16));
    const auto he = static_cast<std::size_t>(2 * uniform_int(rng, 4, 16));
    const auto even = testing::random_image(rng, we, he);
    const auto coeffs = dwt_image(even);
    double e_in = 0.0, e_out = 0.0;
    for (auto p : even.pixels()) e_in += static_cast<double>(p) * p;
    for (double v : coeffs.values) e_out += v * v;
    energy_worst = std::max(energy_worst, std::abs(e_in - e_out) / std::max(e_in, 1.0));
    const auto oracle = testing::block_haar_oracle(even);
    for (std::size_t k = 0; k < oracle.values.size(); ++k)
      oracle_worst = std::max(oracle_worst, std::abs(oracle.values[k] - coeffs.values[k]));
  }
  const double secs = seconds_since(t0);
  return {lbp_mismatch == 0 && energy_worst <= kEnergyRelTol && oracle_worst <= kHaarOracleTol && secs < 10.0,
          "LBP mismatches " + std::to_string(lbp_mismatch) + "/" + std::to_string(kTextureImages) +
              ", DWT energy rel err " + fmt(energy_worst) + ", block oracle max err " + fmt(oracle_worst) + ", " +
              fmt(secs, 3) + " s"};
}

// ---- criterion 3: weighted BCE ---------------------------------------------

Verdict criterion_bce() {
  struct Point {
    double p;
    int y;
    nn::ClassWeights w;
    double expected;
  };
  // Hand-evaluated: w_y * -(y ln p + (1 - y) ln(1 - p)).
  const std::vector<Point> points = {
      {0.5, 0, {0.2, 1.0}, 0.2 * 0.69314718055994531},
      {0.25, 1, {0.2, 1.0}, 1.3862943611198906},
      {0.9, 0, {0.5, 1.0}, 0.5 * 2.3025850929940457},
      {0.8, 1, {0.2, 3.0}, 3.0 * 0.22314355131420976},
      {0.1, 1, {1.0, 0.7}, 0.7 * 2.3025850929940457},
      {0.75, 0, {0.4, 1.0}, 0.4 * 1.3862943611198906},
  };
  double value_worst = 0.0;
  for (const auto& pt : points)
    value_worst = std::max(value_worst, std::abs(nn::weighted_bce(pt.p, pt.y, pt.w) - pt.expected));

  double grad_worst = 0.0;
  const double h = 1e-7;
  for (double p : {0.03, 0.2, 0.5, 0.77, 0.96})
    for (int y : {0, 1})
      for (const nn::ClassWeights w : {nn::ClassWeights{0.2, 1.0}, nn::ClassWeights{1.0, 0.4}}) {
        const double numeric = (nn::weighted_bce(p + h, y, w) - nn::weighted_bce(p - h, y, w)) / (2 * h);
        grad_worst = std::max(grad_worst,
                              std::abs(numeric - nn::weighted_bce_grad(p, y, w)) / std::max(1.0, std::abs(numeric)));
      }
  return {value_worst <= kBceTol && grad_worst <= kBceGradTol,
          std::to_string(points.size()) + " closed forms, max abs err " + fmt(value_worst) +
              "; gradient max rel err " + fmt(grad_worst)};
}

// ---- criterion 4: gradient-flow partition ----------------------------------

struct StepAudit {
  std::size_t trainable = 0;
  std::size_t changed = 0;
  std::size_t zero_grad = 0;
  std::size_t stuck = 0;  // neither changed nor zero gradient
};

/// One Adam step; classifies every trainable parameter.
StepAudit audit_step(nn::Classifier& model, const nn::Batch& batch) {
  std::vector<std::pair<nn::Parameter*, std::string>> before;
  for (auto* p : model.parameters())
    if (p->trainable()) before.emplace_back(p, ad::fct_bytes({{p->name, *p->value}}));
  nn::Adam adam(model.parameters());
  adam.zero_grad();
  nn::accumulate_gradients(model, batch, {});
  std::vector<bool> zero;
  for (auto& [p, bytes] : before) {
    const auto g = p->value->grad();
    zero.push_back(std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; }));
  }
  adam.step();
  StepAudit audit;
  for (std::size_t i = 0; i < before.size(); ++i) {
    ++audit.trainable;
    const bool moved = ad::fct_bytes({{before[i].first->name, *before[i].first->value}}) != before[i].second;
    if (moved) ++audit.changed;
    else if (zero[i]) ++audit.zero_grad;
    else ++audit.stuck;
  }
  return audit;
}

nn::Dataset random_fused(std::size_t n, std::size_t r, std::uint64_t seed) {
  Rng rng(seed);
  nn::Dataset d;
  d.sample_shape = {3, r, r};
  std::vector<double> x(3 * r * r);
  for (std::size_t i = 0; i < n; ++i) {
    for (double& v : x) v = uniform01(rng);
    d.push(x, static_cast<int>(i % 2), "P" + std::to_string(i), {}, i);
  }
  return d;
}

Verdict criterion_partition() {
  constexpr std::size_t r = 32;
  std::vector<experts::TrainedModel> members;
  const auto topologies = experts::candidate_topologies(r);
  for (std::size_t k = 0; k < 3; ++k)
    members.push_back({topologies[k].name(), nn::ModelGraph({3, r, r}, topologies[k].layers(2), k + 1), {}, {}, {}});
  auto consult = std::make_shared<experts::ConsultEnsemble>(experts::build_consult(members, 7));
  const auto data = random_fused(6, r, 3);
  const auto batch = data.batch({0, 1, 2, 3, 4, 5});

  const std::string experts_before = consult->expert_snapshot();
  const auto ec = audit_step(*consult, batch);
  const bool ec_frozen = consult->expert_snapshot() == experts_before;
  bool ec_no_frozen_grad = true;
  for (const auto& e : consult->experts())
    for (const auto* p : e.model.parameters()) ec_no_frozen_grad = ec_no_frozen_grad && !p->value->has_grad();

  // A fresh consult: the one above carries head gradients from its own step.
  std::shared_ptr<const experts::ConsultEnsemble> frozen =
      std::make_shared<const experts::ConsultEnsemble>(experts::build_consult(members, 8));
  const std::string consult_before = frozen->expert_snapshot() + ad::fct_bytes(frozen->head().state());
  kdl::StudentSpec spec;
  spec.resolution = r;
  spec.block_layers = 2;
  spec.growth = 4;
  auto model = kdl::build_kdl(spec, frozen, 5);
  const auto kd = audit_step(model, batch);
  const bool kd_frozen = frozen->expert_snapshot() + ad::fct_bytes(frozen->head().state()) == consult_before;
  bool kd_no_frozen_grad = true;
  for (const auto& e : frozen->experts())
    for (const auto* p : e.model.parameters()) kd_no_frozen_grad = kd_no_frozen_grad && !p->value->has_grad();
  for (const auto* p : frozen->head().parameters()) kd_no_frozen_grad = kd_no_frozen_grad && !p->value->has_grad();

  const bool pass = ec_frozen && kd_frozen && ec_no_frozen_grad && kd_no_frozen_grad && ec.stuck == 0 &&
                    kd.stuck == 0 && ec.trainable > 0 && kd.trainable > 0;
  return {pass, "EC step: frozen experts " + std::string(ec_frozen ? "identical" : "CHANGED") + ", head " +
                    std::to_string(ec.changed) + " changed / " + std::to_string(ec.zero_grad) + " zero-grad / " +
                    std::to_string(ec.stuck) + " stuck of " + std::to_string(ec.trainable) +
                    "; KDL step: consult " + (kd_frozen ? "identical" : "CHANGED") + ", student+head " +
                    std::to_string(kd.changed) + " changed / " + std::to_string(kd.zero_grad) + " zero-grad / " +
                    std::to_string(kd.stuck) + " stuck of " + std::to_string(kd.trainable) +
                    "; gradient buffers on frozen parameters: " +
                    (ec_no_frozen_grad && kd_no_frozen_grad ? "none" : "PRESENT")};
}

// ---- criterion 5: AUC vs pairwise concordance -------------------------------

double concordance(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        den += 1.0;
        num += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return num / den;
}

Verdict criterion_auc() {
  Rng rng(505);
  double worst = 0.0;
  std::size_t with_ties = 0;
  for (std::size_t t = 0; t < kAucSets; ++t) {
    const auto n = static_cast<std::size_t>(uniform_int(rng, 5, 200));
    const int levels = static_cast<int>(uniform_int(rng, 2, 40));
    const double positive = uniform(rng, 0.1, 0.9);
    std::vector<double> s;
    std::vector<int> y;
    for (std::size_t i = 0; i < n; ++i) {
      s.push_back(static_cast<double>(uniform_int(rng, 0, levels)) / levels);
      y.push_back(uniform01(rng) < positive ? 1 : 0);
    }
    y[0] = 1;
    y[1] = 0;
    if (std::set<double>(s.begin(), s.end()).size() < n) ++with_ties;
    worst = std::max(worst, std::abs(eval::auc(s, y) - concordance(s, y)));
  }
  return {worst <= kAucTol, std::to_string(kAucSets) + " sets (" + std::to_string(with_ties) +
                                " with ties), max |AUC - concordance| " + fmt(worst)};
}

// ---- criterion 6: split integrity ----------------------------------------------

data::DatasetManifest random_manifest(Rng& rng, std::size_t index) {
  data::DatasetManifest m;
  m.name = "m" + std::to_string(index);
  const auto target = static_cast<std::size_t>(uniform_int(rng, 200, 600));
  const double malignant = uniform(rng, 0.15, 0.5);
  for (std::size_t p = 0; m.size() < target; ++p) {
    const int label = uniform01(rng) < malignant ? 1 : 0;
    const auto images = uniform_int(rng, 1, 3);
    for (std::int64_t k = 0; k < images; ++k) {
      data::Sample s;
      s.image_path = "img_" + std::to_string(m.size()) + ".pgm";
      s.patient_id = "P" + std::to_string(p);
      s.score = label ? static_cast<int>(uniform_int(rng, 3, 5)) : static_cast<int>(uniform_int(rng, 1, 2));
      s.label = label;
      m.samples.push_back(s);
    }
  }
  return m;
}

Verdict criterion_splits() {
  Rng rng(606);
  std::size_t leaks = 0, coverage = 0, proportion = 0, checked = 0;
  double worst_gap = 0.0;
  for (std::size_t t = 0; t < kSplitManifests; ++t) {
    const auto m = random_manifest(rng, t);
    const double global = static_cast<double>(m.class_counts()[1]) / static_cast<double>(m.size());
    const auto plan = data::plan_splits(m, 5, 0.8, derive_seed(606, {t}));
    for (const auto& rep : plan.repetitions) {
      ++checked;
      std::set<std::string> train_patients, test_patients;
      std::vector<int> seen(m.size(), 0);
      for (auto i : rep.train) {
        train_patients.insert(m.samples[i].patient_id);
        ++seen[i];
      }
      for (auto i : rep.test) {
        test_patients.insert(m.samples[i].patient_id);
        ++seen[i];
      }
      for (const auto& p : test_patients)
        if (train_patients.count(p)) ++leaks;
      if (!std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; })) ++coverage;
      for (const auto* side : {&rep.train, &rep.test}) {
        double pos = 0.0;
        for (auto i : *side) pos += m.samples[i].label;
        const double gap = std::abs(pos / static_cast<double>(side->size()) - global);
        worst_gap = std::max(worst_gap, gap);
        if (gap > kProportionTol) ++proportion;
      }
    }
  }
  return {leaks + coverage + proportion == 0,
          std::to_string(kSplitManifests) + " manifests x 5 repetitions: patient leaks " + std::to_string(leaks) +
              ", coverage violations " + std::to_string(coverage) + ", proportion violations " +
              std::to_string(proportion) + " (worst gap " + fmt(worst_gap, 3) + ")"};
}

// ---- shared synthetic benchmark (criteria 7-10) ---------------------------------

struct Bench {
  fs::path root;
  std::size_t jobs = 1;
  experiment::Schedule schedule;
  std::optional<data::SyntheticDataset> d2_raw;
  std::optional<experiment::Corpus> d1, d2;
  std::optional<data::SplitPlan> plan;
  std::optional<std::vector<experts::TrainedModel>> pretrained, finetuned;
  std::shared_ptr<const experts::ConsultEnsemble> consult3;
  std::optional<experiment::KdlOutcome> kdl;

  static constexpr std::size_t kResolution = 64;
  static constexpr std::uint64_t kSeed = 2024;
  static constexpr double kAtypicalFraction = 0.5;

  void log(const std::string& line) const { std::cerr << "  [bench] " << line << std::endl; }

  data::FeaturizeOptions featurize() const {
    data::FeaturizeOptions o;
    o.resolution = kResolution;
    o.cache_dir = root / "cache";
    o.jobs = jobs;
    return o;
  }

  void ensure_data() {
    if (d2) return;
    data::SyntheticConfig c1;
    c1.seed = 11;
    c1.patient_prefix = "A";
    c1.atypical_fraction = kAtypicalFraction;
    data::SyntheticConfig c2;
    c2.seed = 22;
    c2.patient_prefix = "B";
    c2.atypical_fraction = kAtypicalFraction;
    auto s1 = data::generate_synthetic(c1, root / "d1");
    d2_raw = data::generate_synthetic(c2, root / "d2");
    d1 = experiment::make_corpus(s1.manifest, featurize());
    d2 = experiment::make_corpus(d2_raw->manifest, featurize());
    plan = data::plan_splits(d2->manifest, kRepetitions, 0.8, derive_seed(kSeed, {3}));
    log("generated D1 and D2 (600 images, 200 patients, 64x64 each, half of the patients atypical)");
  }

  void ensure_pretrained() {
    if (pretrained) return;
    const auto t0 = std::chrono::steady_clock::now();
    pretrained = experiment::pretrain_candidates(kResolution, schedule, derive_seed(kSeed, {1}), jobs,
                                                 [&](const std::string& s) { log(s); });
    log("pretrained 7 candidates in " + fmt(seconds_since(t0), 4) + " s");
  }

  void ensure_finetuned() {
    if (finetuned) return;
    ensure_data();
    ensure_pretrained();
    const auto t0 = std::chrono::steady_clock::now();
    finetuned = experiment::finetune_candidates(*pretrained, 0.25, d1->all(InputMode::fused), schedule,
                                                derive_seed(kSeed, {2}), jobs, [&](const std::string& s) { log(s); });
    log("fine-tuned 7 experts on D1 in " + fmt(seconds_since(t0), 4) + " s");
  }

  void ensure_consult() {
    if (consult3) return;
    ensure_finetuned();
    consult3 = std::make_shared<const experts::ConsultEnsemble>(experiment::fit_consult(
        *finetuned, 3, d1->all(InputMode::fused), schedule, derive_seed(kSeed, {4}), jobs));
  }

  /// Full run when `full`, otherwise a single repetition (for criterion 10 alone).
  void ensure_kdl(bool full) {
    if (kdl && (!full || kdl->kdl.runs.size() == kRepetitions)) return;
    ensure_consult();
    data::SplitPlan p = *plan;
    if (!full) p.repetitions.resize(1);
    experiment::KdlOptions options;
    options.student.resolution = kResolution;
    options.keep_models = true;
    const auto t0 = std::chrono::steady_clock::now();
    kdl = experiment::run_kdl(*d2, p, consult3, options, schedule, jobs, [&](const std::string& s) { log(s); });
    log("KDL-EC-3 and unaided students over " + std::to_string(p.repetitions.size()) + " repetitions in " +
        fmt(seconds_since(t0), 4) + " s");
  }
};

experiment::Schedule bench_schedule() {
  experiment::Schedule s;
  s.train.max_epochs = 60;
  s.train.early_stop_patience = 15;
  s.pretrain.max_epochs = 25;
  s.pretrain.early_stop_patience = 10;
  s.proxy_per_class = 60;
  s.validation_fraction = 0.2;
  return s;
}

/// One-sided exact sign test: P(X >= wins) for X ~ Binomial(n, 1/2).
double sign_test_p(std::size_t wins, std::size_t n) {
  double p = 0.0;
  for (std::size_t k = wins; k <= n; ++k) {
    double c = 1.0;
    for (std::size_t i = 0; i < k; ++i) c = c * static_cast<double>(n - i) / static_cast<double>(i + 1);
    p += c;
  }
  return p / std::pow(2.0, static_cast<double>(n));
}

// ---- criterion 7: convergence ordering ----------------------------------------

Verdict criterion_convergence(Bench& bench) {
  bench.ensure_kdl(true);
  const auto& kd = bench.kdl->kdl.runs;
  const auto& un = bench.kdl->unaided->runs;
  std::size_t wins = 0, losses = 0;
  std::ostringstream pairs;
  for (std::size_t r = 0; r < kd.size(); ++r) {
    if (kd[r].convergence_epoch < un[r].convergence_epoch) ++wins;
    else if (kd[r].convergence_epoch > un[r].convergence_epoch) ++losses;
    pairs << (r ? " " : "") << kd[r].convergence_epoch << "/" << un[r].convergence_epoch;
  }
  const double mk = bench.kdl->kdl.convergence_epoch().mean;
  const double mu = bench.kdl->unaided->convergence_epoch().mean;
  const double p = sign_test_p(wins, wins + losses);
  return {mk < mu && p < kSignTestAlpha,
          "mean convergence epoch KDL-EC-3 " + fmt(mk, 3) + " vs unaided " + fmt(mu, 3) + "; KDL earlier in " +
              std::to_string(wins) + ", later in " + std::to_string(losses) + " of " + std::to_string(kd.size()) +
              ", sign test p = " + fmt(p, 3) + " (pairs KDL/unaided: " + pairs.str() + ")"};
}

// ---- criterion 8: ensemble ordering -----------------------------------------------

Verdict criterion_ensembles(Bench& bench) {
  bench.ensure_finetuned();
  const auto t0 = std::chrono::steady_clock::now();
  const auto reports = experiment::run_ec(*bench.d2, *bench.plan, *bench.finetuned, {3, 5, 7}, bench.schedule,
                                          bench.jobs, [&](const std::string& s) { bench.log(s); });
  bench.log("EC reports in " + fmt(seconds_since(t0), 4) + " s");
  std::map<std::size_t, eval::Stat> ec;
  double best_single = 0.0;
  std::string best_name;
  for (const auto& r : reports) {
    if (r.name.rfind("EC-", 0) == 0) ec[std::stoul(r.name.substr(3))] = r.accuracy();
    else if (r.accuracy().mean > best_single) {
      best_single = r.accuracy().mean;
      best_name = r.name;
    }
  }
  const bool beats_single = ec[7].mean >= best_single;
  bool monotone = true;
  std::ostringstream means;
  std::size_t prev = 0;
  for (const auto& [n, stat] : ec) {
    means << (prev ? ", " : "") << "EC-" << n << " " << eval::format_percent(stat);
    if (prev) {
      const double pooled = std::sqrt((ec[prev].std * ec[prev].std + stat.std * stat.std) / 2.0);
      if (stat.mean < ec[prev].mean - pooled) monotone = false;
    }
    prev = n;
  }
  return {beats_single && monotone, means.str() + "; best single expert " + best_name + " " +
                                        fmt(100.0 * best_single, 4) + "%; EC-7 >= best single: " +
                                        (beats_single ? "yes" : "no") + "; non-decreasing within pooled std: " +
                                        (monotone ? "yes" : "no")};
}

// ---- criterion 9: input-mode ordering ----------------------------------------------

Verdict criterion_input_modes(Bench& bench) {
  bench.ensure_data();
  bench.ensure_pretrained();
  std::vector<experts::TrainedModel> shallow;
  for (const auto& m : *bench.pretrained)
    if (m.name == experts::topology(experts::Family::plain_shallow).name()) shallow.push_back(m);
  const auto t0 = std::chrono::steady_clock::now();
  const auto reports = experiment::run_grid(*bench.d2, *bench.plan, shallow, {InputMode::raw, InputMode::fused}, {0.0},
                                            bench.schedule, bench.jobs, [&](const std::string& s) { bench.log(s); });
  bench.log("input-mode grid in " + fmt(seconds_since(t0), 4) + " s");
  eval::Stat raw, fused;
  for (const auto& r : reports) {
    if (r.name.find("/raw/") != std::string::npos) raw = r.accuracy();
    if (r.name.find("/fused/") != std::string::npos) fused = r.accuracy();
  }
  return {!shallow.empty() && fused.mean >= raw.mean,
          "plain_shallow, freeze 0, " + std::to_string(kRepetitions) + " repetitions: fused " +
              eval::format_percent(fused) + " vs raw " + eval::format_percent(raw)};
}

// ---- criterion 10: Grad-CAM sanity ------------------------------------------------

Verdict criterion_gradcam(Bench& bench) {
  // One-layer analytic case: conv 1x1 -> GAP -> dense -> softmax.
  double analytic_worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    nn::ModelGraph model({2, 3, 3},
                         {LayerSpec::conv(4, 1, 1, 0), LayerSpec::simple(LayerKind::global_avg_pool),
                          LayerSpec::dense(2), LayerSpec::simple(LayerKind::softmax)},
                         seed);
    Rng rng(seed);
    for (auto* p : model.parameters())
      if (p->value->rank() == 1)
        for (double& v : p->value->data()) v = 0.3 * normal(rng);
    ad::Tensor x = ad::Tensor::zeros({2, 3, 3}, false);
    for (double& v : x.data()) v = uniform(rng, -1.0, 1.0);
    const auto state = model.state();
    const auto& cw = state[0].tensor.values();
    const auto& cb = state[1].tensor.values();
    const auto& dw = state[2].tensor.values();
    for (int target : {0, 1}) {
      std::vector<double> expected(9, 0.0);
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t i = 0; i < 9; ++i)
          expected[i] += dw[c * 2 + static_cast<std::size_t>(target)] / 9.0 *
                         (cw[c * 2] * x.values()[i] + cw[c * 2 + 1] * x.values()[9 + i] + cb[c]);
      double peak = 0.0;
      for (double& v : expected) peak = std::max(peak, v = std::max(v, 0.0));
      const auto r = gradcam::gradcam(model, x, target, 0u);
      for (std::size_t i = 0; i < 9; ++i) {
        analytic_worst = std::max(analytic_worst, std::abs(r.raw[i] - expected[i]));
        analytic_worst = std::max(analytic_worst, std::abs(r.heatmap.values[i] - (peak > 0 ? expected[i] / peak : 0)));
      }
    }
  }

  bench.ensure_kdl(false);
  const auto& model = bench.kdl->models.front();
  const auto& rep = bench.plan->repetitions.front();
  const std::size_t side = Bench::kResolution;
  std::size_t images = 0, range_violations = 0;
  double mass_sum = 0.0, area_sum = 0.0;
  std::size_t inside_wins = 0;
  for (std::size_t i : rep.test) {
    const auto r = gradcam::gradcam(model, bench.d2->planes[i]);
    const auto& map = r.heatmap;
    if (map.width != side || map.height != side || map.values.size() != side * side) ++range_violations;
    double total = 0.0, inside = 0.0;
    const auto& box = bench.d2_raw->boxes[i];
    for (std::size_t y = 0; y < map.height; ++y)
      for (std::size_t x = 0; x < map.width; ++x) {
        const double v = map.at(x, y);
        if (!(v >= 0.0 && v <= 1.0)) ++range_violations;
        total += v;
        if (x >= box.x0 && x < box.x1 && y >= box.y0 && y < box.y1) inside += v;
      }
    const double area = static_cast<double>(box.area()) / static_cast<double>(side * side);
    if (total > 0.0) {
      mass_sum += inside / total;
      if (inside / total > area) ++inside_wins;
    }
    area_sum += area;
    ++images;
  }
  const double mass = mass_sum / static_cast<double>(images);
  const double area = area_sum / static_cast<double>(images);
  return {analytic_worst <= kCamAnalyticTol && range_violations == 0 && images >= kMinCamImages && mass > area,
          "analytic max err " + fmt(analytic_worst) + "; " + std::to_string(images) +
              " D2 test images (KDL-EC-3 student, repetition 0): range/shape violations " +
              std::to_string(range_violations) + ", mean in-box mass " + fmt(mass, 3) + " vs mean box area fraction " +
              fmt(area, 3) + " (in-box mass above area on " + std::to_string(inside_wins) + " images)"};
}

// ---- criterion 11: determinism of `experiment kdl` -----------------------------------

std::map<std::string, std::string> tree_hashes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "resolved_config.json") continue;  // records the output path
    out[rel] = sha256_file(e.path());
  }
  return out;
}

Verdict criterion_determinism(const fs::path& root) {
  const auto dir = root / "determinism";
  std::ostringstream sink;
  auto run = [&](std::vector<std::string> args) { return cli::run(args, sink, sink); };
  if (run({"--quiet", "--seed", "5", "generate", "--out", (dir / "d1").string(), "--count", "60", "--patients", "30",
           "--size", "32", "--malignant-fraction", "0.4", "--patient-prefix", "A"}) != 0 ||
      run({"--quiet", "--seed", "6", "generate", "--out", (dir / "d2").string(), "--count", "60", "--patients", "30",
           "--size", "32", "--malignant-fraction", "0.4", "--patient-prefix", "B"}) != 0)
    return {false, "could not generate data: " + sink.str()};
  auto experiment = [&](const std::string& out) {
    return run({"--quiet", "--seed", "17", "--cache", (dir / "cache").string(), "experiment", "kdl",
                "--train-manifest", (dir / "d2" / "manifest.csv").string(), "--consult-manifest",
                (dir / "d1" / "manifest.csv").string(), "--consult-size", "3", "--resolution", "32",
                "--repetitions", "2", "--epochs", "4", "--patience", "2", "--pretrain-epochs", "2",
                "--pretrain-patience", "1", "--proxy-per-class", "8", "--block-layers", "2", "--growth", "4",
                "--out", (dir / out).string()});
  };
  if (experiment("run_a") != 0 || experiment("run_b") != 0) return {false, "experiment kdl failed: " + sink.str()};
  const auto a = tree_hashes(dir / "run_a");
  const auto b = tree_hashes(dir / "run_b");
  std::size_t reports = 0, checkpoints = 0, differing = 0;
  for (const auto& [name, hash] : a) {
    if (name.rfind("checkpoints/", 0) == 0) ++checkpoints;
    else if (name.size() > 5 && name.substr(name.size() - 5) == ".json") ++reports;
    const auto it = b.find(name);
    if (it == b.end() || it->second != hash) ++differing;
  }
  const bool same_set = a.size() == b.size();
  return {same_set && differing == 0 && reports >= 2 && checkpoints >= 2,
          std::to_string(a.size()) + " files compared (" + std::to_string(reports) + " JSON reports, " +
              std::to_string(checkpoints) + " checkpoint files), differing " + std::to_string(differing) +
              (same_set ? "" : ", file sets differ")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  std::vector<int> only;
  std::size_t jobs = 1;
  std::string work;
  app.add_option("--only", only, "Criteria to run")->delimiter(',')->check(CLI::Range(1, 11));
  app.add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--work", work, "Working directory (default: a temporary one)");
  CLI11_PARSE(app, argc, argv);

  std::optional<testing::TempDir> temp;
  fs::path root;
  if (work.empty()) {
    temp.emplace("acceptance");
    root = temp->path();
  } else {
    root = work;
    fs::create_directories(root);
  }

  Bench bench;
  bench.root = root;
  bench.jobs = jobs;
  bench.schedule = bench_schedule();

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"autodiff gradients match central differences", criterion_autodiff},
      {"texture oracles (LBP, Haar DWT)", criterion_texture},
      {"weighted BCE closed forms and gradient", criterion_bce},
      {"gradient-flow partition (EC head, KDL unit)", criterion_partition},
      {"AUC equals pairwise concordance", criterion_auc},
      {"split integrity over random manifests", criterion_splits},
      {"KDL-EC-3 converges before the unaided student", [&] { return criterion_convergence(bench); }},
      {"EC ordering against single experts", [&] { return criterion_ensembles(bench); }},
      {"fused input at least as accurate as raw", [&] { return criterion_input_modes(bench); }},
      {"Grad-CAM sanity", [&] { return criterion_gradcam(bench); }},
      {"experiment kdl is deterministic", [&] { return criterion_determinism(root); }},
  };

  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[k].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    if (!v.pass) ++failures;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << criteria[k].first << " -- "
              << v.detail << " [" << fmt(seconds_since(t0), 4) << " s]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
