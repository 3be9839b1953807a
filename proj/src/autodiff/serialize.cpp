#include "fusecad/serialize.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>

namespace fusecad::ad {

namespace {

constexpr std::array<char, 4> kMagic{'F', 'C', 'T', '1'};
constexpr std::uint64_t kMaxRank = 16;

void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> bytes{};
  for (std::size_t i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(bytes.data(), bytes.size());
}

std::uint64_t get_u64(std::istream& in) {
  std::array<unsigned char, 8> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw FormatError("FCT1: truncated input");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void write_fct(std::ostream& out, const std::vector<NamedTensor>& tensors) {
  out.write(kMagic.data(), kMagic.size());
  put_u64(out, tensors.size());
  for (const auto& [name, tensor] : tensors) {
    put_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(out, tensor.rank());
    for (auto d : tensor.shape()) put_u64(out, d);
    for (double v : tensor.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw std::runtime_error("FCT1: write failed");
}

std::vector<NamedTensor> read_fct(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw FormatError("FCT1: bad magic");
  const auto count = get_u64(in);
  std::vector<NamedTensor> tensors;
  for (std::uint64_t t = 0; t < count; ++t) {
    const auto name_len = get_u64(in);
    if (name_len > (1u << 20)) throw FormatError("FCT1: implausible name length");
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    if (!in) throw FormatError("FCT1: truncated name");
    const auto rank = get_u64(in);
    if (rank == 0 || rank > kMaxRank) throw FormatError("FCT1: bad rank for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) {
      d = get_u64(in);
      if (d == 0) throw FormatError("FCT1: zero dimension in '" + name + "'");
    }
    std::vector<double> data(shape_size(shape));
    for (double& v : data) v = std::bit_cast<double>(get_u64(in));
    tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return tensors;
}

void save_fct(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_fct(out, tensors);
}

std::vector<NamedTensor> load_fct(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_fct(in);
}

std::string fct_bytes(const std::vector<NamedTensor>& tensors) {
  std::ostringstream os(std::ios::binary);
  write_fct(os, tensors);
  return std::move(os).str();
}

}  // namespace fusecad::ad
