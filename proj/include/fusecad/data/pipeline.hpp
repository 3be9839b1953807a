#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include "fusecad/data/dataio.hpp"
#include "fusecad/nn/train.hpp"
#include "fusecad/texture.hpp"

namespace fusecad::data {

struct FeaturizeOptions {
  std::size_t resolution = 64;
  std::optional<std::filesystem::path> cache_dir;
  std::size_t jobs = 1;
};

/// Directory named by FUSECAD_CACHE, if set and non-empty.
std::optional<std::filesystem::path> cache_from_env();

/// Fusion object of every sample, area-resized to [3, r, r]. Cached results
/// are keyed by the SHA-256 of the image file and the resolution.
std::vector<ad::Tensor> featurize_manifest(const DatasetManifest& manifest, const FeaturizeOptions& options);

/// Network inputs for the selected samples. In augmented mode every sample
/// contributes three views that share its label, patient and origin.
nn::Dataset build_dataset(const DatasetManifest& manifest, const std::vector<ad::Tensor>& planes,
                          const std::vector<std::size_t>& indices, InputMode mode);

/// Per-origin mean of view predictions; `origins` receives the origin of each
/// returned row, in order of first appearance.
std::vector<std::array<double, 2>> average_by_origin(const nn::Dataset& data,
                                                     const std::vector<std::array<double, 2>>& predictions,
                                                     std::vector<std::size_t>& origins);

/// Patient-grouped stratified hold-out of `fraction` of the samples.
std::pair<nn::Dataset, nn::Dataset> carve_validation(const nn::Dataset& data, double fraction, std::uint64_t seed);

}  // namespace fusecad::data
