#include "pointnav/diff/checkpoint.hpp"

#include <cstdint>
#include <fstream>

#include "pointnav/common.hpp"

namespace pointnav::diff {

namespace {

constexpr uint32_t kMagic = 0x504E434Bu;  // "PNCK"
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t x) { os.write(reinterpret_cast<const char*>(&x), 4); }
void write_u64(std::ostream& os, uint64_t x) { os.write(reinterpret_cast<const char*>(&x), 8); }

uint32_t read_u32(std::istream& is) {
  uint32_t x = 0;
  is.read(reinterpret_cast<char*>(&x), 4);
  require(!is.fail(), "checkpoint: truncated file");
  return x;
}

uint64_t read_u64(std::istream& is) {
  uint64_t x = 0;
  is.read(reinterpret_cast<char*>(&x), 8);
  require(!is.fail(), "checkpoint: truncated file");
  return x;
}

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  const uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  require(!is.fail(), "checkpoint: truncated string");
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(os.good(), "checkpoint: cannot open file for writing");
  write_u32(os, kMagic);
  write_u32(os, kVersion);
  write_u32(os, static_cast<uint32_t>(ck.metadata.size()));
  for (const auto& [k, v] : ck.metadata) {
    write_string(os, k);
    write_string(os, v);
  }
  write_u32(os, static_cast<uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    write_string(os, name);
    write_u32(os, static_cast<uint32_t>(t.shape.size()));
    for (int d : t.shape) write_u32(os, static_cast<uint32_t>(d));
    write_u64(os, static_cast<uint64_t>(t.v.size()));
    os.write(reinterpret_cast<const char*>(t.v.data()),
             static_cast<std::streamsize>(t.v.size() * sizeof(double)));
  }
  require(os.good(), "checkpoint: write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "checkpoint: cannot open file: " + path);
  require(read_u32(is) == kMagic, "checkpoint: bad magic");
  require(read_u32(is) == kVersion, "checkpoint: unsupported version");
  Checkpoint ck;
  const uint32_t n_meta = read_u32(is);
  for (uint32_t i = 0; i < n_meta; ++i) {
    std::string k = read_string(is);
    ck.metadata[k] = read_string(is);
  }
  const uint32_t n_tensors = read_u32(is);
  for (uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = read_string(is);
    Tensor t;
    const uint32_t ndim = read_u32(is);
    for (uint32_t d = 0; d < ndim; ++d) t.shape.push_back(static_cast<int>(read_u32(is)));
    const uint64_t count = read_u64(is);
    require(static_cast<int64_t>(count) == Tensor::numel_of(t.shape), "checkpoint: shape/count mismatch");
    t.v.resize(count);
    is.read(reinterpret_cast<char*>(t.v.data()), static_cast<std::streamsize>(count * sizeof(double)));
    require(!is.fail(), "checkpoint: truncated tensor payload");
    ck.tensors.emplace(std::move(name), std::move(t));
  }
  return ck;
}

}  // namespace pointnav::diff
