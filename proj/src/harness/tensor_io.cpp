#include "sage/harness/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "sage/error.hpp"

namespace sage {

static_assert(std::endian::native == std::endian::little, "SGT1 I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'S', 'G', 'T', '1'};

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  require(in.gcount() == 4, "corrupt_tensor", "truncated tensor header");
  return v;
}

}  // namespace

std::size_t Tensor::element_count() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

Tensor make_tensor(std::vector<std::uint32_t> dims, std::span<const double> values) {
  Tensor t;
  t.dims = std::move(dims);
  require(t.element_count() == values.size(), "invalid_argument", "tensor dims do not match value count");
  t.data.assign(values.begin(), values.end());
  return t;
}

void write_tensor(std::ostream& out, const Tensor& t) {
  require(t.data.size() == t.element_count(), "invalid_argument", "tensor payload does not match dims");
  out.write(kMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) put_u32(out, d);
  out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 4));
  require(out.good(), "io_error", "failed writing tensor");
}

Tensor read_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  require(in.gcount() == 4 && std::memcmp(magic, kMagic, 4) == 0, "corrupt_tensor", "bad SGT1 magic");
  Tensor t;
  const std::uint32_t rank = get_u32(in);
  require(rank <= 8, "corrupt_tensor", "implausible tensor rank " + std::to_string(rank));
  for (std::uint32_t i = 0; i < rank; ++i) t.dims.push_back(get_u32(in));
  t.data.resize(t.element_count());
  in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 4));
  require(static_cast<std::size_t>(in.gcount()) == t.data.size() * 4, "corrupt_tensor", "truncated tensor payload");
  return t;
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  require(out.is_open(), "io_error", "cannot write " + path.string());
  write_tensor(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.is_open(), "missing_artifact", "cannot read " + path.string());
  Tensor t = read_tensor(in);
  in.peek();
  require(in.eof(), "corrupt_tensor", "trailing bytes after tensor in " + path.string());
  return t;
}

std::filesystem::path archive_index_path(const std::filesystem::path& path) {
  return path.string() + ".index.json";
}

void save_archive(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  require(out.is_open(), "io_error", "cannot write " + path.string());
  nlohmann::json index = nlohmann::json::array();
  for (const auto& nt : tensors) {
    const auto offset = static_cast<std::uint64_t>(out.tellp());
    write_tensor(out, nt.tensor);
    index.push_back({{"name", nt.name}, {"dims", nt.tensor.dims}, {"offset", offset}});
  }
  std::ofstream idx(archive_index_path(path));
  require(idx.is_open(), "io_error", "cannot write archive index for " + path.string());
  idx << index.dump(1) << "\n";
}

std::vector<NamedTensor> load_archive(const std::filesystem::path& path) {
  std::ifstream idx(archive_index_path(path));
  require(idx.is_open(), "missing_artifact", "cannot read archive index for " + path.string());
  const auto index = nlohmann::json::parse(idx);
  std::ifstream in(path, std::ios::binary);
  require(in.is_open(), "missing_artifact", "cannot read " + path.string());
  std::vector<NamedTensor> out;
  for (const auto& e : index) {
    const auto offset = e.at("offset").get<std::uint64_t>();
    require(static_cast<std::uint64_t>(in.tellg()) == offset, "corrupt_tensor",
            "archive index offset mismatch at " + e.at("name").get<std::string>());
    NamedTensor nt{e.at("name").get<std::string>(), read_tensor(in)};
    require(nt.tensor.dims == e.at("dims").get<std::vector<std::uint32_t>>(), "corrupt_tensor",
            "archive index dims mismatch at " + nt.name);
    out.push_back(std::move(nt));
  }
  in.peek();
  require(in.eof(), "corrupt_tensor", "trailing bytes in archive " + path.string());
  return out;
}

}  // namespace sage
