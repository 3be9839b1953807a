#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "fusecad/tensor.hpp"

namespace fusecad::ad {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// FCT1 container: "FCT1", u64 count, then per record
// u64 name length, name bytes, u64 rank, rank x u64 dims, float64 payload.
// All integers and doubles are little-endian.
void write_fct(std::ostream& out, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_fct(std::istream& in);

void save_fct(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_fct(const std::filesystem::path& path);

/// The exact bytes `write_fct` would produce; used for byte-level snapshots.
std::string fct_bytes(const std::vector<NamedTensor>& tensors);

}  // namespace fusecad::ad
