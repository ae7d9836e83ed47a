#pragma once

// Binary containers.
//
//   OCV1 grid:  "OCV1" | u32 nx | u32 ny | u32 nz | u16 width (=16) | nx*ny*nz u16 labels
//   OCF1 features: "OCF1" | u32 nx | u32 ny | u32 nz | u32 dim | nx*ny*nz*dim f64 values
//
// All integers and floats are little-endian; voxels follow the library's
// memory order (x fastest). Masks use OCV1 with labels in {0,1}.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "occnl/errors.hpp"
#include "occnl/voxel.hpp"

namespace occnl::io {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u16(std::uint16_t v) {
    buf_.push_back(static_cast<std::uint8_t>(v));
    buf_.push_back(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) buf_.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void u64(std::uint64_t v) {
    for (int s = 0; s < 64; s += 8) buf_.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  const std::vector<std::uint8_t>& data() const noexcept { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string what) : data_(data), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw IoError(what_ + ": truncated payload");
  }
  void magic(std::string_view m) {
    need(m.size());
    if (std::memcmp(data_.data() + pos_, m.data(), m.size()) != 0) {
      throw IoError(what_ + ": bad magic, expected " + std::string(m));
    }
    pos_ += m.size();
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{data_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{data_[pos_ + i]} << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return {bytes.begin(), bytes.end()};
}

inline std::vector<std::uint8_t> encode_grid(const VoxelGrid& grid) {
  if (grid.labels.size() != grid.dims.volume()) throw ValidationError("cannot encode grid with inconsistent shape");
  ByteWriter w;
  w.bytes("OCV1", 4);
  w.u32(grid.dims.nx);
  w.u32(grid.dims.ny);
  w.u32(grid.dims.nz);
  w.u16(16);
  for (Label l : grid.labels) w.u16(l);
  return w.data();
}

inline VoxelGrid decode_grid(std::span<const std::uint8_t> data, const std::string& what = "OCV1") {
  ByteReader r(data, what);
  r.magic("OCV1");
  Dims d;
  d.nx = r.u32();
  d.ny = r.u32();
  d.nz = r.u32();
  if (r.u16() != 16) throw IoError(what + ": unsupported label width");
  const std::size_t n = d.volume();
  if (r.remaining() < 2 * n) throw IoError(what + ": truncated payload");
  VoxelGrid g(d);
  for (std::size_t i = 0; i < n; ++i) g.labels[i] = r.u16();
  return g;
}

inline void write_grid(const std::filesystem::path& path, const VoxelGrid& grid) {
  write_file(path, encode_grid(grid));
}

inline VoxelGrid read_grid(const std::filesystem::path& path) {
  return decode_grid(read_file(path), path.string());
}

inline VoxelGrid mask_to_grid(const VoxelMask& m) {
  VoxelGrid g(m.dims);
  for (std::size_t i = 0; i < m.bits.size(); ++i) g.labels[i] = m.bits[i] ? 1 : 0;
  return g;
}

inline VoxelMask grid_to_mask(const VoxelGrid& g) {
  VoxelMask m(g.dims);
  for (std::size_t i = 0; i < g.labels.size(); ++i) {
    if (g.labels[i] > 1) throw ValidationError("mask file holds label other than 0/1 at voxel " + std::to_string(i));
    m.set(i, g.labels[i] == 1);
  }
  return m;
}

inline void write_mask(const std::filesystem::path& path, const VoxelMask& m) { write_grid(path, mask_to_grid(m)); }
inline VoxelMask read_mask(const std::filesystem::path& path) { return grid_to_mask(read_grid(path)); }

}  // namespace occnl::io
