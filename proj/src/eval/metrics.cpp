#include "fusecad/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "fusecad/parallel.hpp"
#include "fusecad/rng.hpp"

namespace fs = std::filesystem;

namespace fusecad::eval {

namespace {

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

double ConfusionMatrix::accuracy() const { return ratio(tp + tn, total()); }
double ConfusionMatrix::sensitivity() const { return ratio(tp, tp + fn); }
double ConfusionMatrix::specificity() const { return ratio(tn, tn + fp); }

ConfusionMatrix confusion(const std::vector<std::array<double, 2>>& predictions, const std::vector<int>& labels,
                          double threshold) {
  if (predictions.size() != labels.size())
    throw std::invalid_argument("confusion: " + std::to_string(predictions.size()) + " predictions for " +
                                std::to_string(labels.size()) + " labels");
  ConfusionMatrix m;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool positive = predictions[i][1] >= threshold;
    if (labels[i] == 1)
      ++(positive ? m.tp : m.fn);
    else
      ++(positive ? m.fp : m.tn);
  }
  return m;
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: scores and labels differ in length");
  const std::size_t pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw std::invalid_argument("auc needs both classes");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double area = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t dtp = 0, dfp = 0;
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) ++(labels[order[i]] == 1 ? dtp : dfp);
    // trapezoid between (fp, tp) and (fp + dfp, tp + dtp), in counts
    area += static_cast<double>(dfp) * (static_cast<double>(tp) + 0.5 * static_cast<double>(dtp));
    tp += dtp;
    fp += dfp;
  }
  return area / (static_cast<double>(pos) * static_cast<double>(neg));
}

RunResult score_run(const std::vector<std::array<double, 2>>& predictions, const std::vector<int>& labels,
                    const nn::TrainHistory& history) {
  RunResult r;
  r.matrix = confusion(predictions, labels);
  r.accuracy = r.matrix.accuracy();
  r.sensitivity = r.matrix.sensitivity();
  r.specificity = r.matrix.specificity();
  std::vector<double> scores;
  for (const auto& p : predictions) scores.push_back(p[1]);
  r.auc = auc(scores, labels);
  r.convergence_epoch = history.convergence_epoch;
  r.history = history;
  return r;
}

Stat summarize(const std::vector<double>& values) {
  Stat s;
  if (values.empty()) return s;
  const double n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / (n - 1.0));
  }
  return s;
}

namespace {

template <class Get>
Stat column(const std::vector<RunResult>& runs, Get get) {
  std::vector<double> v;
  for (const auto& r : runs) v.push_back(get(r));
  return summarize(v);
}

}  // namespace

Stat EvalReport::accuracy() const { return column(runs, [](const RunResult& r) { return r.accuracy; }); }
Stat EvalReport::sensitivity() const { return column(runs, [](const RunResult& r) { return r.sensitivity; }); }
Stat EvalReport::specificity() const { return column(runs, [](const RunResult& r) { return r.specificity; }); }
Stat EvalReport::auc() const { return column(runs, [](const RunResult& r) { return r.auc; }); }
Stat EvalReport::convergence_epoch() const {
  return column(runs, [](const RunResult& r) { return static_cast<double>(r.convergence_epoch); });
}

void to_json(nlohmann::json& j, const ConfusionMatrix& m) {
  j = {{"tp", m.tp}, {"fp", m.fp}, {"tn", m.tn}, {"fn", m.fn}};
}

void from_json(const nlohmann::json& j, ConfusionMatrix& m) {
  m.tp = j.at("tp");
  m.fp = j.at("fp");
  m.tn = j.at("tn");
  m.fn = j.at("fn");
}

void to_json(nlohmann::json& j, const RunResult& r) {
  j = {{"repetition", r.repetition},   {"seed", r.seed},
       {"confusion", r.matrix},        {"accuracy", r.accuracy},
       {"sensitivity", r.sensitivity}, {"specificity", r.specificity},
       {"auc", r.auc},                 {"convergence_epoch", r.convergence_epoch},
       {"history", r.history}};
}

void from_json(const nlohmann::json& j, RunResult& r) {
  r.repetition = j.at("repetition");
  r.seed = j.at("seed");
  r.matrix = j.at("confusion");
  r.accuracy = j.at("accuracy");
  r.sensitivity = j.at("sensitivity");
  r.specificity = j.at("specificity");
  r.auc = j.at("auc");
  r.convergence_epoch = j.at("convergence_epoch");
  r.history = j.at("history");
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  auto stat = [](const Stat& s) { return nlohmann::json{{"mean", s.mean}, {"std", s.std}}; };
  j = {{"name", r.name},
       {"runs", r.runs},
       {"summary",
        {{"accuracy", stat(r.accuracy())},
         {"sensitivity", stat(r.sensitivity())},
         {"specificity", stat(r.specificity())},
         {"auc", stat(r.auc())},
         {"convergence_epoch", stat(r.convergence_epoch())}}}};
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  r.name = j.at("name");
  r.runs = j.at("runs").get<std::vector<RunResult>>();
}

std::string format_percent(const Stat& stat) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f ± %.2f", 100.0 * stat.mean, 100.0 * stat.std);
  return buf;
}

RepetitionError::RepetitionError(std::size_t repetition, const std::string& what)
    : std::runtime_error("repetition " + std::to_string(repetition) + ": " + what), repetition_(repetition) {}

EvalReport run_cv(const std::string& name, const data::DatasetManifest& manifest, const data::SplitPlan& plan,
                  const RunRecipe& recipe, std::size_t jobs) {
  if (plan.repetitions.empty()) throw std::invalid_argument("split plan has no repetitions");
  EvalReport report{name, std::vector<RunResult>(plan.repetitions.size())};
  parallel_for(plan.repetitions.size(), jobs, [&](std::size_t r) {
    const auto& split = plan.repetitions[r];
    std::set<std::string> train_patients;
    for (std::size_t i : split.train) train_patients.insert(manifest.samples.at(i).patient_id);
    std::vector<std::string> shared;
    std::vector<int> labels;
    for (std::size_t i : split.test) {
      const auto& s = manifest.samples.at(i);
      if (train_patients.count(s.patient_id)) shared.push_back(s.patient_id);
      labels.push_back(s.label);
    }
    if (!shared.empty()) {
      std::sort(shared.begin(), shared.end());
      shared.erase(std::unique(shared.begin(), shared.end()), shared.end());
      throw data::LeakageError("repetition " + std::to_string(r) + " shares patients between train and test",
                               shared);
    }
    const std::uint64_t seed = derive_seed(plan.seed, {r, 1});
    CvOutcome outcome;
    try {
      outcome = recipe({r, seed, &split});
    } catch (const std::exception& e) {
      throw RepetitionError(r, e.what());
    }
    if (outcome.predictions.size() != labels.size())
      throw RepetitionError(r, "recipe returned " + std::to_string(outcome.predictions.size()) +
                                   " predictions for " + std::to_string(labels.size()) + " test samples");
    RunResult result = score_run(outcome.predictions, labels, outcome.history);
    result.repetition = r;
    result.seed = seed;
    report.runs[r] = std::move(result);
  });
  return report;
}

std::string loss_curve_csv(const nn::TrainHistory& history) {
  std::ostringstream out;
  out << "epoch,train_loss,val_loss,val_acc\n" << std::setprecision(17);
  for (const auto& e : history.epochs)
    out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_acc << '\n';
  return out.str();
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

}  // namespace

std::string render_summary_csv(const std::vector<EvalReport>& reports) {
  std::ostringstream out;
  out << "name,runs,accuracy_mean,accuracy_std,sensitivity_malignant_mean,sensitivity_malignant_std,"
         "specificity_benign_mean,specificity_benign_std,auc_mean,auc_std,convergence_epoch_mean,"
         "convergence_epoch_std\n";
  for (const auto& r : reports) {
    out << r.name << ',' << r.runs.size();
    for (const Stat& s : {r.accuracy(), r.sensitivity(), r.specificity(), r.auc(), r.convergence_epoch()})
      out << ',' << fixed(s.mean, 6) << ',' << fixed(s.std, 6);
    out << '\n';
  }
  return out.str();
}

std::string render_table(const std::vector<EvalReport>& reports) {
  const std::vector<std::string> header{"model", "runs", "accuracy %", "sensitivity % (malignant)",
                                        "specificity % (benign)", "AUC %", "convergence epoch"};
  std::vector<std::vector<std::string>> rows{header};
  bool single = false;
  for (const auto& r : reports) {
    const std::string mark = r.runs.size() == 1 ? "*" : "";
    single = single || r.runs.size() == 1;
    const Stat ce = r.convergence_epoch();
    rows.push_back({r.name, std::to_string(r.runs.size()), format_percent(r.accuracy()) + mark,
                    format_percent(r.sensitivity()) + mark, format_percent(r.specificity()) + mark,
                    format_percent(r.auc()) + mark, fixed(ce.mean, 1) + " ± " + fixed(ce.std, 1) + mark});
  }
  // "±" is two bytes but one column wide
  auto width = [](const std::string& s) {
    std::size_t w = 0;
    for (unsigned char c : s) w += (c & 0xC0) != 0x80;
    return w;
  };
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], width(row[c]));
  std::ostringstream out;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      out << (c ? "  " : "") << rows[r][c];
      if (c + 1 < rows[r].size()) out << std::string(widths[c] - width(rows[r][c]), ' ');
    }
    out << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (std::size_t w : widths) total += w;
      out << std::string(total + 2 * (widths.size() - 1), '-') << '\n';
    }
  }
  if (single) out << "* single repetition: standard deviation undefined, shown as 0.00\n";
  return out.str();
}

void emit_report(const EvalReport& report, const fs::path& stem) {
  std::ostringstream csv;
  csv << "run,seed,accuracy,sensitivity_malignant,specificity_benign,auc,convergence_epoch,tp,fp,tn,fn\n"
      << std::setprecision(17);
  for (const auto& r : report.runs)
    csv << r.repetition << ',' << r.seed << ',' << r.accuracy << ',' << r.sensitivity << ',' << r.specificity << ','
        << r.auc << ',' << r.convergence_epoch << ',' << r.matrix.tp << ',' << r.matrix.fp << ',' << r.matrix.tn
        << ',' << r.matrix.fn << '\n';
  const Stat stats[] = {report.accuracy(), report.sensitivity(), report.specificity(), report.auc(),
                        report.convergence_epoch()};
  csv << "mean,";
  for (const Stat& s : stats) csv << ',' << s.mean;
  csv << ",,,,\nstd,";
  for (const Stat& s : stats) csv << ',' << s.std;
  csv << ",,,,\n";
  write_text(fs::path(stem.string() + ".csv"), csv.str());
  write_text(fs::path(stem.string() + ".txt"), render_table({report}));
  write_text(fs::path(stem.string() + ".json"), nlohmann::json(report).dump(2) + "\n");

  for (const auto& r : report.runs)
    write_text(fs::path(stem.string() + "_curves") / ("run_" + std::to_string(r.repetition) + ".csv"),
               loss_curve_csv(r.history));
}

}  // namespace fusecad::eval
