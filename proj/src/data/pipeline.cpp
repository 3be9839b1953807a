#include "fusecad/data/pipeline.hpp"

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "fusecad/hash.hpp"
#include "fusecad/parallel.hpp"
#include "fusecad/serialize.hpp"

namespace fs = std::filesystem;

namespace fusecad::data {

std::optional<fs::path> cache_from_env() {
  const char* dir = std::getenv("FUSECAD_CACHE");
  if (!dir || !*dir) return std::nullopt;
  return fs::path(dir);
}

namespace {

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ad::Tensor featurize_one(const fs::path& image_path, std::size_t resolution, const std::optional<fs::path>& cache) {
  const std::string bytes = read_bytes(image_path);
  fs::path cached;
  if (cache) {
    cached = *cache / (sha256_hex(bytes) + "_" + std::to_string(resolution) + ".fct");
    if (fs::exists(cached)) {
      try {
        auto tensors = ad::load_fct(cached);
        if (tensors.size() == 1 && tensors[0].tensor.shape() == ad::Shape{3, resolution, resolution})
          return std::move(tensors[0].tensor);
      } catch (const std::exception&) {
        // unreadable entries are recomputed and overwritten
      }
    }
  }
  const FusionObject fusion = featurize(parse_pgm(bytes));
  ad::Tensor small = area_resize(fusion.to_tensor(), resolution, resolution);
  if (cache) {
    fs::create_directories(*cache);
    // write-then-rename keeps concurrent readers from seeing partial files
    const fs::path tmp = cached.string() + ".tmp" + std::to_string(std::hash<std::string>{}(image_path.string()));
    ad::save_fct(tmp, {{"fusion", small}});
    fs::rename(tmp, cached);
  }
  return small;
}

}  // namespace

std::vector<ad::Tensor> featurize_manifest(const DatasetManifest& manifest, const FeaturizeOptions& options) {
  if (options.resolution < 8) throw std::invalid_argument("resolution must be at least 8");
  std::vector<ad::Tensor> out(manifest.size());
  parallel_for(manifest.size(), options.jobs, [&](std::size_t i) {
    out[i] = featurize_one(manifest.samples[i].image_path, options.resolution, options.cache_dir);
  });
  return out;
}

nn::Dataset build_dataset(const DatasetManifest& manifest, const std::vector<ad::Tensor>& planes,
                          const std::vector<std::size_t>& indices, InputMode mode) {
  if (planes.size() != manifest.size()) throw std::invalid_argument("featurized planes do not match the manifest");
  nn::Dataset d;
  if (planes.empty()) return d;
  d.sample_shape = planes.front().shape();
  for (std::size_t i : indices) {
    const auto& p = planes.at(i);
    const FusionObject fusion = FusionObject::from_tensor(p);
    for (const auto& view : model_views(fusion, mode, p.dim(1)))
      d.push(view.data(), manifest.samples[i].label, manifest.samples[i].patient_id, {}, i);
  }
  return d;
}

std::vector<std::array<double, 2>> average_by_origin(const nn::Dataset& data,
                                                     const std::vector<std::array<double, 2>>& predictions,
                                                     std::vector<std::size_t>& origins) {
  if (predictions.size() != data.size()) throw std::invalid_argument("prediction count does not match the dataset");
  std::map<std::size_t, std::size_t> slot;
  std::vector<std::array<double, 2>> sums;
  std::vector<double> counts;
  origins.clear();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t o = data.origin.empty() ? i : data.origin[i];
    auto [it, fresh] = slot.try_emplace(o, sums.size());
    if (fresh) {
      sums.push_back({0.0, 0.0});
      counts.push_back(0.0);
      origins.push_back(o);
    }
    sums[it->second][0] += predictions[i][0];
    sums[it->second][1] += predictions[i][1];
    counts[it->second] += 1.0;
  }
  for (std::size_t k = 0; k < sums.size(); ++k) {
    sums[k][0] /= counts[k];
    sums[k][1] /= counts[k];
  }
  return sums;
}

std::pair<nn::Dataset, nn::Dataset> carve_validation(const nn::Dataset& data, double fraction, std::uint64_t seed) {
  std::vector<std::string> groups = data.patients;
  if (groups.empty())
    for (std::size_t i = 0; i < data.size(); ++i)
      groups.push_back("#" + std::to_string(data.origin.empty() ? i : data.origin[i]));
  Rng rng(seed);
  const auto split = grouped_stratified_split(data.labels, groups, fraction, rng);
  if (split.held.empty() || split.keep.empty()) throw std::invalid_argument("validation carve-out left a side empty");
  return {data.subset(split.keep), data.subset(split.held)};
}

}  // namespace fusecad::data
