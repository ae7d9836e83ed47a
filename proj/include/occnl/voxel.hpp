#pragma once

// Label space, dense voxel grids and class histograms.
//
// Memory order is fixed for the whole library: x varies fastest, then y,
// then z. File I/O and every per-voxel random draw follow this order.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "occnl/errors.hpp"

namespace occnl {

using Label = std::uint16_t;

inline constexpr Label kEmpty = 0;

struct Dims {
  std::uint32_t nx = 0;
  std::uint32_t ny = 0;
  std::uint32_t nz = 0;

  constexpr std::size_t volume() const noexcept {
    return std::size_t{nx} * std::size_t{ny} * std::size_t{nz};
  }
  friend constexpr bool operator==(const Dims&, const Dims&) = default;
};

struct Coord {
  std::int64_t x = 0;
  std::int64_t y = 0;
  std::int64_t z = 0;
  friend constexpr bool operator==(const Coord&, const Coord&) = default;
};

inline bool in_bounds(const Coord& c, const Dims& d) noexcept {
  return c.x >= 0 && c.y >= 0 && c.z >= 0 && c.x < std::int64_t{d.nx} &&
         c.y < std::int64_t{d.ny} && c.z < std::int64_t{d.nz};
}

inline std::size_t linear_index(const Coord& c, const Dims& d) {
  if (!in_bounds(c, d)) {
    throw std::out_of_range("voxel coordinate (" + std::to_string(c.x) + "," +
                            std::to_string(c.y) + "," + std::to_string(c.z) +
                            ") outside grid");
  }
  return static_cast<std::size_t>(c.x) +
         std::size_t{d.nx} * (static_cast<std::size_t>(c.y) +
                              std::size_t{d.ny} * static_cast<std::size_t>(c.z));
}

inline Coord coord_of(std::size_t index, const Dims& d) {
  if (index >= d.volume()) throw std::out_of_range("voxel index outside grid");
  const std::size_t plane = std::size_t{d.nx} * d.ny;
  return Coord{static_cast<std::int64_t>(index % d.nx),
               static_cast<std::int64_t>((index % plane) / d.nx),
               static_cast<std::int64_t>(index / plane)};
}

/// Voxel label space {0, 1, ..., C}. Class 0 is always "empty"; a subset of
/// the semantic classes is marked dynamic (movable objects).
class LabelSpace {
 public:
  LabelSpace() = default;

  LabelSpace(std::uint32_t num_semantic, std::vector<Label> dynamic_classes,
             std::vector<std::string> names = {})
      : num_semantic_(num_semantic), names_(std::move(names)) {
    if (num_semantic_ == 0) throw std::invalid_argument("label space needs at least one semantic class");
    if (num_semantic_ >= 0xFFFFu) throw std::invalid_argument("label space too large for 16-bit labels");
    if (names_.empty()) {
      names_.reserve(num_semantic_ + 1);
      names_.emplace_back("empty");
      for (std::uint32_t c = 1; c <= num_semantic_; ++c) names_.push_back("class_" + std::to_string(c));
    }
    if (names_.size() != num_semantic_ + 1) throw std::invalid_argument("label space needs C+1 names");
    is_dynamic_.assign(num_semantic_ + 1, false);
    std::sort(dynamic_classes.begin(), dynamic_classes.end());
    dynamic_classes.erase(std::unique(dynamic_classes.begin(), dynamic_classes.end()), dynamic_classes.end());
    for (Label c : dynamic_classes) {
      if (c == kEmpty || c > num_semantic_) {
        throw std::invalid_argument("dynamic class " + std::to_string(c) + " outside {1..C}");
      }
      is_dynamic_[c] = true;
    }
    dynamic_ = std::move(dynamic_classes);
  }

  /// 19 semantic classes plus empty, in the usual SemanticKITTI order.
  static LabelSpace semantic_kitti() {
    return LabelSpace(19, {1, 2, 3, 4, 5, 6, 7, 8},
                      {"empty", "car", "bicycle", "motorcycle", "truck", "other-vehicle", "person",
                       "bicyclist", "motorcyclist", "road", "parking", "sidewalk", "other-ground",
                       "building", "fence", "vegetation", "trunk", "terrain", "pole",
                       "traffic-sign"});
  }

  std::uint32_t num_semantic() const noexcept { return num_semantic_; }
  std::uint32_t num_classes() const noexcept { return num_semantic_ + 1; }
  const std::vector<Label>& dynamic_classes() const noexcept { return dynamic_; }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::string& name(Label c) const { return names_.at(c); }

  bool contains(Label c) const noexcept { return c <= num_semantic_; }
  bool is_dynamic(Label c) const noexcept { return c < is_dynamic_.size() && is_dynamic_[c]; }
  bool is_static(Label c) const noexcept { return c != kEmpty && contains(c) && !is_dynamic(c); }

  std::optional<Label> find(const std::string& name) const {
    for (std::size_t c = 0; c < names_.size(); ++c) {
      if (names_[c] == name) return static_cast<Label>(c);
    }
    return std::nullopt;
  }

 private:
  std::uint32_t num_semantic_ = 0;
  std::vector<Label> dynamic_;
  std::vector<bool> is_dynamic_;
  std::vector<std::string> names_;
};

struct VoxelGrid {
  Dims dims;
  std::vector<Label> labels;
  double resolution_m = 0.2;

  VoxelGrid() = default;
  VoxelGrid(Dims d, Label fill = kEmpty, double resolution = 0.2)
      : dims(d), labels(d.volume(), fill), resolution_m(resolution) {}
  VoxelGrid(Dims d, std::vector<Label> values, double resolution = 0.2)
      : dims(d), labels(std::move(values)), resolution_m(resolution) {}

  std::size_t size() const noexcept { return labels.size(); }
  Label operator[](std::size_t i) const { return labels[i]; }
  Label& operator[](std::size_t i) { return labels[i]; }
  Label at(const Coord& c) const { return labels.at(linear_index(c, dims)); }
  Label& at(const Coord& c) { return labels.at(linear_index(c, dims)); }

  // Equality ignores resolution metadata.
  friend bool operator==(const VoxelGrid& a, const VoxelGrid& b) {
    return a.dims == b.dims && a.labels == b.labels;
  }
};

struct GridViolation {
  enum class Kind { Shape, Label };
  Kind kind = Kind::Shape;
  std::size_t index = 0;  // offending voxel (Label) or labels length (Shape)
  Label value = 0;
  std::string describe() const {
    if (kind == Kind::Shape) return "labels length " + std::to_string(index) + " does not match dims";
    return "label " + std::to_string(value) + " at voxel " + std::to_string(index) + " outside label space";
  }
};

/// Returns the first violation, or nullopt for a well-formed grid.
inline std::optional<GridViolation> validate_grid(const VoxelGrid& grid, const LabelSpace& space) {
  if (grid.labels.size() != grid.dims.volume()) {
    return GridViolation{GridViolation::Kind::Shape, grid.labels.size(), 0};
  }
  for (std::size_t i = 0; i < grid.labels.size(); ++i) {
    if (!space.contains(grid.labels[i])) return GridViolation{GridViolation::Kind::Label, i, grid.labels[i]};
  }
  return std::nullopt;
}

inline void require_valid(const VoxelGrid& grid, const LabelSpace& space) {
  if (auto v = validate_grid(grid, space)) throw ValidationError(v->describe());
}

inline void require_same_dims(const VoxelGrid& a, const VoxelGrid& b, const char* what) {
  if (!(a.dims == b.dims) || a.labels.size() != b.labels.size()) {
    throw std::invalid_argument(std::string(what) + ": grid dimensions differ");
  }
}

struct ClassHistogram {
  std::vector<std::uint64_t> counts;
  std::uint64_t total = 0;
};

inline ClassHistogram class_histogram(const VoxelGrid& grid, const LabelSpace& space) {
  require_valid(grid, space);
  ClassHistogram h;
  h.counts.assign(space.num_classes(), 0);
  for (Label l : grid.labels) ++h.counts[l];
  h.total = grid.labels.size();
  return h;
}

/// Voxel-wise boolean set over a grid (instance masks, dynamic footprints).
struct VoxelMask {
  Dims dims;
  std::vector<std::uint8_t> bits;

  VoxelMask() = default;
  explicit VoxelMask(Dims d) : dims(d), bits(d.volume(), 0) {}

  bool test(std::size_t i) const { return bits[i] != 0; }
  void set(std::size_t i, bool on = true) { bits[i] = on ? 1 : 0; }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
  }
  bool subset_of(const VoxelMask& other) const {
    if (!(dims == other.dims)) return false;
    for (std::size_t i = 0; i < bits.size(); ++i) {
      if (bits[i] && !other.bits[i]) return false;
    }
    return true;
  }
  friend bool operator==(const VoxelMask&, const VoxelMask&) = default;
};

inline VoxelMask dynamic_voxels(const VoxelGrid& grid, const LabelSpace& space) {
  VoxelMask m(grid.dims);
  for (std::size_t i = 0; i < grid.labels.size(); ++i) m.set(i, space.is_dynamic(grid.labels[i]));
  return m;
}

inline std::size_t count_occupied(const VoxelGrid& grid) {
  return grid.labels.size() -
         static_cast<std::size_t>(std::count(grid.labels.begin(), grid.labels.end(), kEmpty));
}

}  // namespace occnl
