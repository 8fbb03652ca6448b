#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace sage {

// SGT1: magic "SGT1", u32 rank, rank × u32 dims, then product(dims) float32
// values, all little-endian, row-major.
struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  std::size_t element_count() const;
  std::vector<double> as_double() const { return {data.begin(), data.end()}; }
};

Tensor make_tensor(std::vector<std::uint32_t> dims, std::span<const double> values);

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

// Named tensors stored as consecutive SGT1 records in one file, with a JSON
// index (name, dims, byte offset) next to it at <path>.index.json.
struct NamedTensor {
  std::string name;
  Tensor tensor;
};

void save_archive(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_archive(const std::filesystem::path& path);
std::filesystem::path archive_index_path(const std::filesystem::path& path);

}  // namespace sage
