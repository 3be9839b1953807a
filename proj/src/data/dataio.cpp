#include "fusecad/data/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace fusecad::data {

int label_for_score(int score) {
  if (score < kMinScore || score > kMaxScore)
    throw std::invalid_argument("score " + std::to_string(score) + " outside " + std::to_string(kMinScore) + ".." +
                                std::to_string(kMaxScore));
  return score >= 3 ? 1 : 0;
}

std::array<std::size_t, 2> DatasetManifest::class_counts() const {
  std::array<std::size_t, 2> counts{0, 0};
  for (const auto& s : samples) ++counts[s.label];
  return counts;
}

std::vector<std::string> DatasetManifest::patients() const {
  std::set<std::string> ids;
  for (const auto& s : samples) ids.insert(s.patient_id);
  return {ids.begin(), ids.end()};
}

std::vector<int> DatasetManifest::labels() const {
  std::vector<int> out;
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

std::vector<std::string> DatasetManifest::patient_column() const {
  std::vector<std::string> out;
  for (const auto& s : samples) out.push_back(s.patient_id);
  return out;
}

LeakageError::LeakageError(const std::string& what, std::vector<std::string> shared)
    : std::runtime_error(what), shared_(std::move(shared)) {}

namespace {

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) fields.push_back(trim(field));
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

}  // namespace

DatasetManifest load_manifest(const fs::path& path, bool verify_images) {
  std::ifstream in(path);
  if (!in) throw ManifestError(path.string() + ": cannot open manifest");
  DatasetManifest manifest;
  manifest.name = path.stem().string();
  manifest.directory = path.parent_path();
  const auto where = [&](std::size_t line) { return path.string() + ":" + std::to_string(line) + ": "; };

  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto fields = split_csv(line);
    if (!header_seen) {
      if (fields != std::vector<std::string>{"image_path", "patient_id", "score"})
        throw ManifestError(where(line_no) + "expected header 'image_path,patient_id,score'");
      header_seen = true;
      continue;
    }
    if (fields.size() != 3)
      throw ManifestError(where(line_no) + "expected 3 fields, found " + std::to_string(fields.size()));
    if (fields[0].empty() || fields[1].empty()) throw ManifestError(where(line_no) + "empty image path or patient id");
    Sample s;
    s.image_path = fields[0];
    if (s.image_path.is_relative()) s.image_path = manifest.directory / s.image_path;
    s.patient_id = fields[1];
    std::size_t used = 0;
    try {
      s.score = std::stoi(fields[2], &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != fields[2].size() || fields[2].empty())
      throw ManifestError(where(line_no) + "score '" + fields[2] + "' is not an integer");
    try {
      s.label = label_for_score(s.score);
    } catch (const std::invalid_argument& e) {
      throw ManifestError(where(line_no) + "invalid score: " + e.what());
    }
    if (verify_images) {
      if (!fs::exists(s.image_path)) throw ManifestError(where(line_no) + "missing image " + s.image_path.string());
      try {
        read_pgm(s.image_path);
      } catch (const ImageError& e) {
        throw ManifestError(where(line_no) + e.what());
      }
    }
    manifest.samples.push_back(std::move(s));
  }
  if (!header_seen) throw ManifestError(where(0) + "empty manifest");
  return manifest;
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "image_path,patient_id,score\n";
  const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  for (const auto& s : manifest.samples) {
    fs::path p = s.image_path;
    std::error_code ec;
    const auto rel = fs::relative(p, base, ec);
    if (!ec && !rel.empty() && *rel.begin() != "..") p = rel;
    out << p.generic_string() << ',' << s.patient_id << ',' << s.score << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<std::string> shared_patients(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  const std::set<std::string> left(a.begin(), a.end());
  std::set<std::string> shared;
  for (const auto& id : b)
    if (left.count(id)) shared.insert(id);
  return {shared.begin(), shared.end()};
}

void check_disjoint(const DatasetManifest& a, const DatasetManifest& b) {
  auto shared = shared_patients(a.patients(), b.patients());
  if (shared.empty()) return;
  const std::string what = "patient leakage: " + std::to_string(shared.size()) + " patient(s) appear in both '" +
                           a.name + "' and '" + b.name + "' (first: " + shared.front() + ")";
  throw LeakageError(what, std::move(shared));
}

GroupedSplit grouped_stratified_split(const std::vector<int>& labels, const std::vector<std::string>& groups,
                                      double held_fraction, Rng& rng) {
  if (labels.size() != groups.size()) throw std::invalid_argument("labels and groups differ in length");
  if (!(held_fraction > 0.0 && held_fraction < 1.0)) throw std::invalid_argument("split fraction must lie in (0, 1)");
  int classes = 0;
  for (int y : labels) {
    if (y < 0) throw std::invalid_argument("negative label");
    classes = std::max(classes, y + 1);
  }

  std::map<std::string, std::size_t> group_index;
  std::vector<std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, fresh] = group_index.try_emplace(groups[i], members.size());
    if (fresh) members.emplace_back();
    members[it->second].push_back(i);
  }
  std::vector<std::vector<long>> counts(members.size(), std::vector<long>(classes, 0));
  std::vector<long> total(classes, 0), patients_per_class(classes, 0);
  for (std::size_t g = 0; g < members.size(); ++g) {
    for (std::size_t i : members[g]) ++counts[g][labels[i]];
    for (int c = 0; c < classes; ++c) {
      total[c] += counts[g][c];
      patients_per_class[c] += counts[g][c] > 0;
    }
  }
  for (int c = 0; c < classes; ++c)
    if (patients_per_class[c] < 2)
      throw std::invalid_argument("cannot split: class " + std::to_string(c) + " has " +
                                  std::to_string(patients_per_class[c]) + " patient(s), at least 2 are required");

  std::vector<long> target(classes);
  for (int c = 0; c < classes; ++c) target[c] = std::lround(held_fraction * static_cast<double>(total[c]));

  std::vector<std::size_t> order(members.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return members[a].size() > members[b].size(); });

  std::vector<long> held(classes, 0);
  std::vector<bool> is_held(members.size(), false);
  for (std::size_t g : order) {
    long before = 0, after = 0;
    for (int c = 0; c < classes; ++c) {
      before += std::labs(held[c] - target[c]);
      after += std::labs(held[c] + counts[g][c] - target[c]);
    }
    if (after < before) {
      is_held[g] = true;
      for (int c = 0; c < classes; ++c) held[c] += counts[g][c];
    }
  }

  GroupedSplit split;
  for (std::size_t g = 0; g < members.size(); ++g)
    for (std::size_t i : members[g]) (is_held[g] ? split.held : split.keep).push_back(i);
  std::sort(split.keep.begin(), split.keep.end());
  std::sort(split.held.begin(), split.held.end());
  return split;
}

SplitPlan plan_splits(const DatasetManifest& manifest, std::size_t repetitions, double train_fraction,
                      std::uint64_t seed) {
  if (repetitions == 0) throw std::invalid_argument("at least one repetition is required");
  SplitPlan plan;
  plan.seed = seed;
  plan.train_fraction = train_fraction;
  const auto labels = manifest.labels();
  const auto groups = manifest.patient_column();
  for (std::size_t r = 0; r < repetitions; ++r) {
    Rng rng(derive_seed(seed, {r}));
    auto split = grouped_stratified_split(labels, groups, 1.0 - train_fraction, rng);
    plan.repetitions.push_back({std::move(split.keep), std::move(split.held)});
  }
  return plan;
}

void to_json(nlohmann::json& j, const SplitPlan& plan) {
  nlohmann::json reps = nlohmann::json::array();
  for (const auto& r : plan.repetitions) reps.push_back({{"train", r.train}, {"test", r.test}});
  j = {{"seed", plan.seed}, {"train_fraction", plan.train_fraction}, {"repetitions", reps}};
}

void from_json(const nlohmann::json& j, SplitPlan& plan) {
  plan = SplitPlan{};
  plan.seed = j.at("seed").get<std::uint64_t>();
  plan.train_fraction = j.at("train_fraction").get<double>();
  for (const auto& r : j.at("repetitions"))
    plan.repetitions.push_back({r.at("train").get<std::vector<std::size_t>>(), r.at("test").get<std::vector<std::size_t>>()});
}

nn::ClassWeights class_weights(const DatasetManifest& manifest, WeightMode mode, nn::ClassWeights fixed_weights) {
  const auto counts = manifest.class_counts();
  if (counts[0] == 0 || counts[1] == 0) throw std::invalid_argument("class weights need both classes present");
  if (mode == WeightMode::fixed) return fixed_weights;
  const double n_min = static_cast<double>(std::min(counts[0], counts[1]));
  return {n_min / static_cast<double>(counts[0]), n_min / static_cast<double>(counts[1])};
}

// ---- synthetic nodules --------------------------------------------------------

void SyntheticConfig::validate() const {
  if (count == 0) throw std::invalid_argument("count must be positive");
  if (patients == 0) throw std::invalid_argument("patients must be positive");
  if (count < patients) throw std::invalid_argument("count must be at least the number of patients");
  if (count > 6 * patients) throw std::invalid_argument("at most 6 images per patient are generated");
  if (!(malignant_fraction >= 0.0 && malignant_fraction <= 1.0))
    throw std::invalid_argument("malignant fraction must lie in [0, 1]");
  if (!(atypical_fraction >= 0.0 && atypical_fraction <= 1.0))
    throw std::invalid_argument("atypical fraction must lie in [0, 1]");
  if (size < 32 || size % 2) throw std::invalid_argument("image size must be even and at least 32");
  if (patient_prefix.empty() || patient_prefix.find_first_of(",\r\n\"") != std::string::npos)
    throw std::invalid_argument("patient prefix must be non-empty and CSV-safe");
}

NoduleTraits sample_traits(bool malignant, Rng& rng, bool atypical) {
  NoduleTraits t;
  t.malignant = malignant;
  t.angle = uniform(rng, 0.0, M_PI);
  t.lobe_phase = uniform(rng, 0.0, 2 * M_PI);
  if (atypical) {
    t.radius = uniform(rng, 0.13, 0.23);
    t.aspect = uniform(rng, 0.75, 1.3);
    t.irregularity = malignant ? uniform(rng, 0.04, 0.14) : uniform(rng, 0.02, 0.12);
    t.lobes = static_cast<int>(uniform_int(rng, 4, 7));
    t.calcifications = static_cast<int>(uniform_int(rng, 0, malignant ? 3 : 2));
    t.echo = uniform(rng, 0.35, 0.65);
    t.edge = uniform(rng, 0.8, 1.3);
  } else if (malignant) {
    t.radius = uniform(rng, 0.12, 0.22);
    t.aspect = uniform(rng, 0.7, 1.4);
    t.irregularity = uniform(rng, 0.12, 0.35);
    t.lobes = static_cast<int>(uniform_int(rng, 5, 9));
    t.calcifications = static_cast<int>(uniform_int(rng, 8, 18));
    t.echo = uniform(rng, 0.3, 0.6);
    t.edge = 0.6;
  } else {
    t.radius = uniform(rng, 0.14, 0.24);
    t.aspect = uniform(rng, 0.75, 1.3);
    t.irregularity = uniform(rng, 0.0, 0.03);
    t.lobes = static_cast<int>(uniform_int(rng, 3, 5));
    t.calcifications = 0;
    t.echo = uniform(rng, 0.4, 0.7);
  }
  return t;
}

namespace {

// Bilinear upsampling of a coarse random grid: low-frequency tissue texture.
std::vector<double> smooth_field(std::size_t size, std::size_t cell, Rng& rng) {
  const std::size_t g = size / cell + 2;
  std::vector<double> grid(g * g);
  for (double& v : grid) v = normal(rng);
  std::vector<double> out(size * size);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double gx = static_cast<double>(x) / cell, gy = static_cast<double>(y) / cell;
      const auto ix = static_cast<std::size_t>(gx), iy = static_cast<std::size_t>(gy);
      const double fx = gx - ix, fy = gy - iy;
      out[y * size + x] = (1 - fy) * ((1 - fx) * grid[iy * g + ix] + fx * grid[iy * g + ix + 1]) +
                          fy * ((1 - fx) * grid[(iy + 1) * g + ix] + fx * grid[(iy + 1) * g + ix + 1]);
    }
  return out;
}

}  // namespace

GrayImage render_nodule(const NoduleTraits& t, std::size_t size, Rng& rng, Box& box) {
  const double s = static_cast<double>(size);
  const double cx = s / 2 + uniform(rng, -0.12, 0.12) * s;
  const double cy = s / 2 + uniform(rng, -0.12, 0.12) * s;
  const double angle = t.angle + uniform(rng, -0.2, 0.2);
  const double r0 = t.radius * s * uniform(rng, 0.93, 1.07);
  const double gain = uniform(rng, 0.55, 1.35);
  const double offset = uniform(rng, -25.0, 25.0);
  const double edge = t.edge;
  const double sqrt_aspect = std::sqrt(t.aspect);
  const double ca = std::cos(angle), sa = std::sin(angle);

  const auto tissue = smooth_field(size, std::max<std::size_t>(4, size / 8), rng);
  std::vector<double> value(size * size), inside(size * size);
  auto boundary = [&](double theta) {
    return r0 * (1.0 + t.irregularity * (0.6 * std::sin(t.lobes * theta + t.lobe_phase) +
                                         0.4 * std::sin((2 * t.lobes + 1) * theta + 2 * t.lobe_phase)));
  };
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double u = (dx * ca + dy * sa) / sqrt_aspect;
      const double v = (-dx * sa + dy * ca) * sqrt_aspect;
      const double rho = std::hypot(u, v);
      const double m = 1.0 / (1.0 + std::exp(-(boundary(std::atan2(v, u)) - rho) / edge));
      const double background = 120.0 + 15.0 * tissue[y * size + x];
      inside[y * size + x] = m;
      value[y * size + x] = (1 - m) * background + m * background * t.echo;
    }

  const int dot = std::max(1, static_cast<int>(size / 32));
  for (int k = 0; k < t.calcifications; ++k) {
    const double theta = uniform(rng, 0, 2 * M_PI);
    const double rr = 0.8 * boundary(theta) * std::sqrt(uniform01(rng));
    const double u = rr * std::cos(theta) * sqrt_aspect, v = rr * std::sin(theta) / sqrt_aspect;
    const auto px = static_cast<long>(cx + u * ca - v * sa), py = static_cast<long>(cy + u * sa + v * ca);
    const double bright = uniform(rng, 120.0, 180.0);
    for (long yy = py; yy < py + dot; ++yy)
      for (long xx = px; xx < px + dot; ++xx)
        if (xx >= 0 && yy >= 0 && xx < static_cast<long>(size) && yy < static_cast<long>(size))
          value[yy * size + xx] += bright;
  }

  std::vector<std::uint8_t> pixels(size * size);
  box = {size, size, 0, 0};
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double speckle = std::max(0.05, 1.0 + 0.15 * normal(rng));
      const double g = gain * value[y * size + x] * speckle + offset;
      pixels[y * size + x] = static_cast<std::uint8_t>(std::clamp(std::lround(g), 0L, 255L));
      if (inside[y * size + x] > 0.5) {
        box.x0 = std::min(box.x0, x);
        box.y0 = std::min(box.y0, y);
        box.x1 = std::max(box.x1, x + 1);
        box.y1 = std::max(box.y1, y + 1);
      }
    }
  if (box.x1 == 0) {
    const auto c = static_cast<std::size_t>(std::clamp(cx, 0.0, s - 1)), r = static_cast<std::size_t>(std::clamp(cy, 0.0, s - 1));
    box = {c, r, c + 1, r + 1};
  }
  return GrayImage(size, size, std::move(pixels));
}

namespace {

// Splits `samples` over `patients`, 1..6 each.
std::vector<std::size_t> patient_sizes(std::size_t samples, std::size_t patients, Rng& rng) {
  std::vector<std::size_t> sizes(patients, 1);
  for (std::size_t extra = samples - patients; extra > 0; --extra) {
    std::size_t p;
    do p = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(patients) - 1));
    while (sizes[p] >= 6);
    ++sizes[p];
  }
  return sizes;
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticConfig& config, const fs::path& directory) {
  config.validate();
  const auto m_samples = static_cast<std::size_t>(std::lround(config.malignant_fraction * config.count));
  const std::size_t b_samples = config.count - m_samples;
  // Patient counts follow the requested fraction where feasible.
  auto m_patients = static_cast<std::size_t>(std::lround(config.malignant_fraction * config.patients));
  const std::size_t m_lo = std::max((m_samples + 5) / 6, config.patients > b_samples ? config.patients - b_samples : 0);
  const std::size_t m_hi = std::min(m_samples, config.patients - (b_samples + 5) / 6);
  if (m_lo > m_hi) throw std::invalid_argument("no feasible split of patients between the classes");
  m_patients = std::clamp(m_patients, m_lo, m_hi);
  if (m_samples > 0 && m_patients == 0) m_patients = 1;
  const std::size_t b_patients = config.patients - m_patients;

  Rng rng(derive_seed(config.seed, {0}));
  auto m_sizes = patient_sizes(m_samples, m_patients, rng);
  auto b_sizes = patient_sizes(b_samples, b_patients, rng);
  struct Patient {
    bool malignant;
    std::size_t images;
  };
  std::vector<Patient> patients;
  for (auto n : m_sizes) patients.push_back({true, n});
  for (auto n : b_sizes) patients.push_back({false, n});
  std::shuffle(patients.begin(), patients.end(), rng);

  fs::create_directories(directory / "img");
  SyntheticDataset out;
  out.manifest.name = "manifest";
  out.manifest.directory = directory;
  std::ofstream boxes(directory / "boxes.csv", std::ios::binary);
  boxes << "image_path,x0,y0,x1,y1\n";
  std::size_t index = 0;
  char name[32];
  for (std::size_t p = 0; p < patients.size(); ++p) {
    Rng patient_rng(derive_seed(config.seed, {1, p}));
    Rng atypical_rng(derive_seed(config.seed, {3, p}));
    const bool atypical = uniform01(atypical_rng) < config.atypical_fraction;
    const NoduleTraits traits = sample_traits(patients[p].malignant, patient_rng, atypical);
    const int score = patients[p].malignant ? static_cast<int>(uniform_int(patient_rng, 3, 5))
                                            : static_cast<int>(uniform_int(patient_rng, 1, 2));
    std::snprintf(name, sizeof name, "%04zu", p);
    const std::string patient_id = config.patient_prefix + name;
    for (std::size_t k = 0; k < patients[p].images; ++k, ++index) {
      Rng image_rng(derive_seed(config.seed, {2, p, k}));
      Box box;
      const GrayImage image = render_nodule(traits, config.size, image_rng, box);
      std::snprintf(name, sizeof name, "img/s%04zu.pgm", index);
      write_pgm(directory / name, image);
      out.manifest.samples.push_back({directory / name, patient_id, score, label_for_score(score)});
      out.boxes.push_back(box);
      boxes << name << ',' << box.x0 << ',' << box.y0 << ',' << box.x1 << ',' << box.y1 << '\n';
    }
  }
  write_manifest(directory / "manifest.csv", out.manifest);
  if (!boxes) throw std::runtime_error("cannot write " + (directory / "boxes.csv").string());
  return out;
}

std::map<std::string, Box> load_boxes(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ManifestError(path.string() + ": cannot open boxes file");
  std::map<std::string, Box> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 || trim(line).empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 5) throw ManifestError(path.string() + ":" + std::to_string(line_no) + ": expected 5 fields");
    try {
      out[fs::path(f[0]).filename().string()] = {std::stoul(f[1]), std::stoul(f[2]), std::stoul(f[3]), std::stoul(f[4])};
    } catch (const std::exception&) {
      throw ManifestError(path.string() + ":" + std::to_string(line_no) + ": malformed box");
    }
  }
  return out;
}

}  // namespace fusecad::data
