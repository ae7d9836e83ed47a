#pragma once

// DPRC checkpoints and training-history files.
//
// DPRC layout (little-endian):
//   "DPRC" | u32 version (=1) | u32 architecture (0 linear, 1 mlp)
//   | u32 input_dim | u32 num_classes | u32 hidden
//   | f64 ema momentum | f64 prototype momentum | f64 prototype fusion
//   | u32 section count
//   then per section: u32 section id | u32 rank | rank x u32 dims | f64 payload
// Section ids: 1 student tensors (one section per tensor, in model order),
// 2 teacher tensors, 3 scene-adaptive prototypes, 4 scene-agnostic
// prototypes, 5 fused prototypes, 6 prototype presence (0/1 as f64).

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "occnl/io.hpp"
#include "occnl/learner.hpp"

namespace occnl {

struct Checkpoint {
  StudentModel student;
  TeacherState teacher;
  PrototypeBank prototypes;
};

namespace detail {

inline void write_section(io::ByteWriter& w, std::uint32_t id, const std::vector<std::uint32_t>& dims,
                          std::span<const double> payload) {
  w.u32(id);
  w.u32(static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) w.u32(d);
  for (double x : payload) w.f64(x);
}

inline std::vector<double> flatten(const std::vector<std::vector<double>>& rows) {
  std::vector<double> out;
  for (const auto& r : rows) out.insert(out.end(), r.begin(), r.end());
  return out;
}

struct Section {
  std::uint32_t id;
  std::vector<std::uint32_t> dims;
  std::vector<double> payload;
};

inline Section read_section(io::ByteReader& r) {
  Section s;
  s.id = r.u32();
  const std::uint32_t rank = r.u32();
  if (rank > 8) throw IoError("DPRC: implausible tensor rank");
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    s.dims.push_back(r.u32());
    n *= s.dims.back();
  }
  r.need(n * 8);
  s.payload.resize(n);
  for (double& x : s.payload) x = r.f64();
  return s;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  const StudentModel& m = ck.student;
  if (!m.same_shape(ck.teacher.model)) throw StateError("checkpoint: teacher and student shapes differ");
  io::ByteWriter w;
  w.bytes("DPRC", 4);
  w.u32(1);
  w.u32(m.architecture() == Architecture::Linear ? 0 : 1);
  w.u32(static_cast<std::uint32_t>(m.input_dim()));
  w.u32(static_cast<std::uint32_t>(m.num_classes()));
  w.u32(static_cast<std::uint32_t>(m.hidden()));
  w.f64(ck.teacher.momentum);
  w.f64(ck.prototypes.momentum);
  w.f64(ck.prototypes.fusion_weight);
  const auto shapes = m.shapes();
  w.u32(static_cast<std::uint32_t>(2 * shapes.size() + 4));
  for (std::uint32_t id : {1u, 2u}) {
    const auto params = id == 1 ? m.params() : ck.teacher.model.params();
    std::size_t off = 0;
    for (const auto& s : shapes) {
      detail::write_section(w, id, s.dims, params.subspan(off, s.size()));
      off += s.size();
    }
  }
  const auto K = static_cast<std::uint32_t>(ck.prototypes.num_classes());
  const auto P = static_cast<std::uint32_t>(ck.prototypes.dim);
  detail::write_section(w, 3, {K, P}, detail::flatten(ck.prototypes.scene_adaptive));
  detail::write_section(w, 4, {K, P}, detail::flatten(ck.prototypes.scene_agnostic));
  detail::write_section(w, 5, {K, P}, detail::flatten(ck.prototypes.fused));
  std::vector<double> present;
  for (bool b : ck.prototypes.present) present.push_back(b ? 1.0 : 0.0);
  detail::write_section(w, 6, {K}, present);
  return w.data();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& what = "DPRC") {
  io::ByteReader r(bytes, what);
  r.magic("DPRC");
  if (r.u32() != 1) throw IoError(what + ": unsupported checkpoint version");
  const std::uint32_t arch = r.u32();
  if (arch > 1) throw IoError(what + ": unknown architecture");
  const std::uint32_t D = r.u32(), K = r.u32(), H = r.u32();
  Checkpoint ck;
  ck.student = StudentModel(arch == 0 ? Architecture::Linear : Architecture::Mlp, D, K, arch == 0 ? 32 : H);
  const double ema = r.f64(), mp = r.f64(), fusion = r.f64();
  ck.teacher = TeacherState{ck.student, ema};
  const std::size_t P = ck.student.embed_dim();
  ck.prototypes = PrototypeBank(K, P, mp, fusion);
  const std::uint32_t sections = r.u32();
  const auto shapes = ck.student.shapes();
  std::size_t student_off = 0, teacher_off = 0, student_idx = 0, teacher_idx = 0;
  for (std::uint32_t i = 0; i < sections; ++i) {
    const auto s = detail::read_section(r);
    if (s.id == 1 || s.id == 2) {
      std::size_t& idx = s.id == 1 ? student_idx : teacher_idx;
      std::size_t& off = s.id == 1 ? student_off : teacher_off;
      if (idx >= shapes.size() || s.dims != shapes[idx].dims) throw IoError(what + ": parameter tensor shape mismatch");
      auto dst = (s.id == 1 ? ck.student : ck.teacher.model).params();
      std::copy(s.payload.begin(), s.payload.end(), dst.begin() + static_cast<std::ptrdiff_t>(off));
      off += s.payload.size();
      ++idx;
    } else if (s.id >= 3 && s.id <= 5) {
      if (s.dims != std::vector<std::uint32_t>{K, static_cast<std::uint32_t>(P)}) throw IoError(what + ": prototype shape mismatch");
      auto& rows = s.id == 3 ? ck.prototypes.scene_adaptive : s.id == 4 ? ck.prototypes.scene_agnostic : ck.prototypes.fused;
      for (std::size_t c = 0; c < K; ++c) std::copy_n(s.payload.begin() + static_cast<std::ptrdiff_t>(c * P), P, rows[c].begin());
    } else if (s.id == 6) {
      if (s.dims != std::vector<std::uint32_t>{K}) throw IoError(what + ": prototype presence shape mismatch");
      for (std::size_t c = 0; c < K; ++c) ck.prototypes.present[c] = s.payload[c] != 0.0;
    } else {
      throw IoError(what + ": unknown section " + std::to_string(s.id));
    }
  }
  if (student_idx != shapes.size() || teacher_idx != shapes.size()) throw IoError(what + ": missing parameter tensors");
  return ck;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  io::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

namespace detail {

inline std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

inline std::string fmt(const std::optional<double>& x) { return x ? fmt(*x) : std::string(); }

}  // namespace detail

inline std::string render_history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,K,base,pll,nl,sntd,total,hit_rate,purity,iou,miou\n";
  for (const auto& r : history) {
    out += std::to_string(r.epoch) + "," + (r.k ? std::to_string(*r.k) : std::string()) + "," + detail::fmt(r.base) +
           "," + detail::fmt(r.pll) + "," + detail::fmt(r.nl) + "," + detail::fmt(r.sntd) + "," + detail::fmt(r.total) +
           "," + detail::fmt(r.hit_rate) + "," + detail::fmt(r.purity) + "," + detail::fmt(r.iou) + "," +
           detail::fmt(r.miou) + "\n";
  }
  return out;
}

/// One JSON object per optimisation step.
inline std::string render_loss_log(const std::vector<StepRecord>& steps) {
  std::string out;
  for (const auto& s : steps) {
    nlohmann::ordered_json j;
    j["epoch"] = s.epoch;
    j["step"] = s.step;
    j["base"] = s.base;
    j["pll"] = s.pll;
    j["nl"] = s.nl;
    j["sntd"] = s.sntd;
    j["total"] = s.total;
    j["nl_saturation_count"] = s.nl_saturation_count;
    out += j.dump() + "\n";
  }
  return out;
}

/// One JSON object per robust epoch. Next to the active candidate set's
/// statistics it carries the hit rates of the two-source union and of each
/// single source at the same K.
inline std::string render_diagnostics_log(const std::vector<EpochRecord>& history) {
  std::string out;
  for (const auto& r : history) {
    if (!r.k || !r.hit_rate) continue;
    auto j = diagnostics_json(r.epoch, *r.k, CandidateDiagnostics{*r.hit_rate, *r.purity, *r.mean_candidate_size});
    j["hit_rate_union"] = *r.hit_rate_union;
    j["hit_rate_teacher"] = *r.hit_rate_teacher;
    j["hit_rate_prototype"] = *r.hit_rate_prototype;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace occnl
