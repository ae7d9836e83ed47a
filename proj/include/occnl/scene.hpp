#pragma once

// Procedural scene sequences: a static background (ground layer with class
// patches plus above-ground structures) and box-shaped dynamic objects
// moving at constant integer velocity. Objects only occupy voxels that are
// empty in the background.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <vector>

#include "occnl/errors.hpp"
#include "occnl/rng.hpp"
#include "occnl/voxel.hpp"

namespace occnl {

struct DynamicObject {
  Label cls = 0;
  std::array<std::uint32_t, 3> extent{1, 1, 1};
  std::array<std::int64_t, 3> velocity{0, 0, 0};  // voxels per frame
  Coord spawn;                                    // min corner when frame == spawn_frame
  std::int64_t spawn_frame = 0;
};

struct SceneSpec {
  Dims dims{64, 64, 8};
  std::uint32_t num_frames = 15;
  std::uint32_t reference_frame = 7;
  LabelSpace space = LabelSpace::semantic_kitti();
  std::uint32_t ground_height = 1;
  double patch_density = 1.0;      // scales the number of ground patches
  double structure_density = 1.0;  // scales the number of above-ground structures
  double tail_exponent = 1.3;      // static class c of rank r has weight (r+1)^-tail_exponent
  std::vector<DynamicObject> objects;
  std::uint32_t random_objects = 0;  // extra objects drawn from the seed
  std::int64_t jitter = 0;           // max per-frame xy pose error for non-reference frames
};

struct SceneSequence {
  LabelSpace space;
  std::vector<VoxelGrid> frames;
  std::vector<VoxelMask> instance_masks;
  VoxelGrid clean_gt;
  std::uint32_t reference_frame = 0;
  std::vector<DynamicObject> objects;  // resolved object list

  std::size_t num_frames() const noexcept { return frames.size(); }

  /// Dynamic voxels over occupied voxels in the reference frame.
  double dynamic_fraction() const {
    const std::size_t occ = count_occupied(clean_gt);
    if (occ == 0) return 0.0;
    return static_cast<double>(dynamic_voxels(clean_gt, space).count()) / static_cast<double>(occ);
  }

  VoxelGrid background() const {
    VoxelGrid g = clean_gt;
    for (Label& l : g.labels) {
      if (space.is_dynamic(l)) l = kEmpty;
    }
    return g;
  }

  friend bool operator==(const SceneSequence& a, const SceneSequence& b) {
    return a.frames == b.frames && a.instance_masks == b.instance_masks && a.clean_gt == b.clean_gt &&
           a.reference_frame == b.reference_frame;
  }
};

/// Default desk-scale spec: 64x64x8, 15 frames, SemanticKITTI classes and
/// enough random objects to land a few percent of occupied voxels on
/// dynamic classes.
inline SceneSpec default_scene_spec() {
  SceneSpec s;
  s.random_objects = 24;
  return s;
}

namespace detail {

inline std::vector<Label> static_classes(const LabelSpace& space) {
  std::vector<Label> out;
  for (Label c = 1; c <= space.num_semantic(); ++c) {
    if (!space.is_dynamic(c)) out.push_back(c);
  }
  return out;
}

inline Label draw_weighted(rng::Stream& s, const std::vector<Label>& classes, const std::vector<double>& cdf) {
  const double u = s.uniform() * cdf.back();
  auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return classes[std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), classes.size() - 1)];
}

inline void validate_object(const DynamicObject& o, const SceneSpec& spec) {
  if (!spec.space.is_dynamic(o.cls)) {
    throw SpecError("dynamic object class " + std::to_string(o.cls) + " is not a dynamic class");
  }
  const std::array<std::uint32_t, 3> lim{spec.dims.nx, spec.dims.ny, spec.dims.nz};
  for (int a = 0; a < 3; ++a) {
    if (o.extent[a] < 1) throw SpecError("dynamic object extent must be at least one voxel");
    if (o.extent[a] > lim[a]) throw SpecError("dynamic object larger than grid");
  }
}

inline void paint_object(const DynamicObject& o, Coord corner, const VoxelGrid& background, VoxelGrid& frame,
                         VoxelMask& mask) {
  const Dims& d = frame.dims;
  for (std::int64_t dz = 0; dz < o.extent[2]; ++dz) {
    for (std::int64_t dy = 0; dy < o.extent[1]; ++dy) {
      for (std::int64_t dx = 0; dx < o.extent[0]; ++dx) {
        const Coord c{corner.x + dx, corner.y + dy, corner.z + dz};
        if (!in_bounds(c, d)) continue;
        const std::size_t i = linear_index(c, d);
        if (background.labels[i] != kEmpty) continue;
        frame.labels[i] = o.cls;
        mask.set(i);
      }
    }
  }
}

}  // namespace detail

inline void validate_scene_spec(const SceneSpec& spec) {
  if (spec.num_frames < 1) throw SpecError("scene needs at least one frame");
  if (spec.reference_frame >= spec.num_frames) throw SpecError("reference frame outside sequence");
  if (spec.dims.volume() == 0) throw SpecError("grid dimensions must be positive");
  if (spec.ground_height > spec.dims.nz) throw SpecError("ground height exceeds grid height");
  if (spec.jitter < 0) throw SpecError("jitter must be non-negative");
  for (const auto& o : spec.objects) detail::validate_object(o, spec);
  if (spec.random_objects > 0 && spec.space.dynamic_classes().empty()) {
    throw SpecError("random objects requested but the label space has no dynamic classes");
  }
}

inline SceneSequence generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  validate_scene_spec(spec);
  const Dims d = spec.dims;
  const LabelSpace& space = spec.space;
  rng::Stream layout(rng::stage_seed(seed, "scene/layout"));

  const std::vector<Label> statics = detail::static_classes(space);
  VoxelGrid background(d);
  if (!statics.empty()) {
    std::vector<double> cdf;
    double acc = 0.0;
    for (std::size_t r = 0; r < statics.size(); ++r) {
      acc += std::pow(static_cast<double>(r + 1), -spec.tail_exponent);
      cdf.push_back(acc);
    }
    const std::int64_t nx = d.nx, ny = d.ny, nz = d.nz, gh = spec.ground_height;
    // Ground layer: dominant class with rectangular patches of the others.
    for (std::int64_t z = 0; z < gh; ++z)
      for (std::int64_t y = 0; y < ny; ++y)
        for (std::int64_t x = 0; x < nx; ++x) background.at({x, y, z}) = statics.front();
    const auto patches = static_cast<std::int64_t>(std::lround(spec.patch_density * double(nx * ny) / 64.0));
    const std::int64_t max_side = std::max<std::int64_t>(2, std::min(nx, ny) / 6);
    for (std::int64_t p = 0; p < patches && gh > 0; ++p) {
      const Label cls = detail::draw_weighted(layout, statics, cdf);
      const std::int64_t w = layout.between(2, max_side), h = layout.between(2, max_side);
      const std::int64_t x0 = layout.between(0, nx - 1), y0 = layout.between(0, ny - 1);
      for (std::int64_t z = 0; z < gh; ++z)
        for (std::int64_t y = y0; y < std::min(ny, y0 + h); ++y)
          for (std::int64_t x = x0; x < std::min(nx, x0 + w); ++x) background.at({x, y, z}) = cls;
    }
    // Above-ground structures: boxes with long-tailed class frequencies.
    if (nz > gh) {
      const auto structures =
          static_cast<std::int64_t>(std::lround(spec.structure_density * double(nx * ny) / 48.0));
      for (std::int64_t s = 0; s < structures; ++s) {
        const Label cls = detail::draw_weighted(layout, statics, cdf);
        const std::int64_t w = layout.between(1, 4), h = layout.between(1, 4);
        const std::int64_t height = layout.between(1, nz - gh);
        const std::int64_t x0 = layout.between(0, nx - 1), y0 = layout.between(0, ny - 1);
        for (std::int64_t z = gh; z < std::min(nz, gh + height); ++z)
          for (std::int64_t y = y0; y < std::min(ny, y0 + h); ++y)
            for (std::int64_t x = x0; x < std::min(nx, x0 + w); ++x) background.at({x, y, z}) = cls;
      }
    }
  }

  std::vector<DynamicObject> objects = spec.objects;
  rng::Stream spawner(rng::stage_seed(seed, "scene/objects"));
  const auto& dyn = space.dynamic_classes();
  for (std::uint32_t k = 0; k < spec.random_objects; ++k) {
    DynamicObject o;
    // Earlier dynamic ids are more frequent (cars dominate traffic).
    const std::size_t pick = std::min<std::size_t>(spawner.below(dyn.size()), spawner.below(dyn.size()));
    o.cls = dyn[pick];
    o.extent = {static_cast<std::uint32_t>(std::min<std::int64_t>(spawner.between(1, 4), d.nx)),
                static_cast<std::uint32_t>(std::min<std::int64_t>(spawner.between(1, 3), d.ny)),
                static_cast<std::uint32_t>(
                    std::min<std::int64_t>(spawner.between(1, 2), std::max<std::int64_t>(1, d.nz - spec.ground_height)))};
    do {
      o.velocity = {spawner.between(-1, 1), spawner.between(-1, 1), 0};
    } while (o.velocity[0] == 0 && o.velocity[1] == 0);
    o.spawn = {spawner.between(0, std::int64_t{d.nx} - o.extent[0]),
               spawner.between(0, std::int64_t{d.ny} - o.extent[1]),
               std::min<std::int64_t>(spec.ground_height, std::int64_t{d.nz} - o.extent[2])};
    o.spawn_frame = spec.reference_frame;
    objects.push_back(o);
  }

  SceneSequence seq;
  seq.space = space;
  seq.reference_frame = spec.reference_frame;
  seq.objects = objects;
  seq.frames.reserve(spec.num_frames);
  seq.instance_masks.reserve(spec.num_frames);
  const std::uint64_t jitter_key = rng::stage_seed(seed, "scene/jitter");
  for (std::uint32_t f = 0; f < spec.num_frames; ++f) {
    VoxelGrid frame = background;
    VoxelMask mask(d);
    for (std::size_t k = 0; k < objects.size(); ++k) {
      const auto& o = objects[k];
      const std::int64_t dt = std::int64_t{f} - o.spawn_frame;
      Coord corner{o.spawn.x + o.velocity[0] * dt, o.spawn.y + o.velocity[1] * dt,
                   o.spawn.z + o.velocity[2] * dt};
      if (spec.jitter > 0 && f != spec.reference_frame) {
        const std::uint64_t counter = std::uint64_t{f} * objects.size() + k;
        const auto span = static_cast<std::uint64_t>(2 * spec.jitter + 1);
        corner.x += static_cast<std::int64_t>(rng::below(jitter_key, counter, 0, span)) - spec.jitter;
        corner.y += static_cast<std::int64_t>(rng::below(jitter_key, counter, 1, span)) - spec.jitter;
      }
      detail::paint_object(o, corner, background, frame, mask);
    }
    seq.frames.push_back(std::move(frame));
    seq.instance_masks.push_back(std::move(mask));
  }
  seq.clean_gt = seq.frames[spec.reference_frame];
  return seq;
}

/// Union of object poses over `window` on top of the static background.
/// Where poses overlap the most recent frame's class wins.
inline VoxelGrid aggregate_frames(const SceneSequence& seq, const std::vector<std::uint32_t>& window) {
  if (window.empty()) throw std::invalid_argument("aggregate_frames: empty window");
  std::set<std::uint32_t> ordered(window.begin(), window.end());
  if (*ordered.rbegin() >= seq.num_frames()) throw std::invalid_argument("aggregate_frames: window outside sequence");
  VoxelGrid out = seq.background();
  for (std::uint32_t f : ordered) {
    const VoxelGrid& frame = seq.frames[f];
    const VoxelMask& mask = seq.instance_masks[f];
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (mask.test(i) && !seq.space.is_static(out.labels[i])) out.labels[i] = frame.labels[i];
    }
  }
  return out;
}

/// Synchronous 6-connected growth of dynamic labels into empty voxels. An
/// empty voxel takes the class of its dynamic neighbour with the smallest
/// linear index; occupied voxels are never overwritten.
inline VoxelGrid dilate_dynamic(const VoxelGrid& grid, const LabelSpace& space, std::uint32_t iterations) {
  require_valid(grid, space);
  if (iterations < 1) throw std::invalid_argument("dilate_dynamic: iterations must be >= 1");
  const Dims d = grid.dims;
  const std::size_t sx = 1, sy = d.nx, sz = std::size_t{d.nx} * d.ny;
  VoxelGrid cur = grid;
  for (std::uint32_t it = 0; it < iterations; ++it) {
    VoxelGrid next = cur;
    for (std::size_t i = 0; i < cur.size(); ++i) {
      if (cur.labels[i] != kEmpty) continue;
      const Coord c = coord_of(i, d);
      // Neighbours in increasing linear index.
      const std::array<std::pair<bool, std::size_t>, 6> nbrs{{
          {c.z > 0, i - sz},
          {c.y > 0, i - sy},
          {c.x > 0, i - sx},
          {c.x + 1 < std::int64_t{d.nx}, i + sx},
          {c.y + 1 < std::int64_t{d.ny}, i + sy},
          {c.z + 1 < std::int64_t{d.nz}, i + sz},
      }};
      for (const auto& [ok, j] : nbrs) {
        if (ok && space.is_dynamic(cur.labels[j])) {
          next.labels[i] = cur.labels[j];
          break;
        }
      }
    }
    cur = std::move(next);
  }
  return cur;
}

}  // namespace occnl
