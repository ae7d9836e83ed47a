#pragma once

// Geometric IoU (occupied vs empty), per-class IoU and mIoU over the
// semantic classes, plus CSV/JSON report rendering.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "occnl/io.hpp"
#include "occnl/voxel.hpp"

namespace occnl {

struct ConfusionCounts {
  // Indexed by class id; entry 0 is unused (empty is not a semantic class).
  std::vector<std::uint64_t> tp, fp, fn;
  std::uint64_t geo_tp = 0, geo_fp = 0, geo_fn = 0, geo_tn = 0;

  ConfusionCounts() = default;
  explicit ConfusionCounts(std::uint32_t num_classes) : tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0) {}

  std::uint32_t num_semantic() const noexcept { return tp.empty() ? 0 : static_cast<std::uint32_t>(tp.size() - 1); }

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    if (tp.size() != o.tp.size()) throw std::invalid_argument("confusion counts over different label spaces");
    for (std::size_t c = 0; c < tp.size(); ++c) {
      tp[c] += o.tp[c];
      fp[c] += o.fp[c];
      fn[c] += o.fn[c];
    }
    geo_tp += o.geo_tp;
    geo_fp += o.geo_fp;
    geo_fn += o.geo_fn;
    geo_tn += o.geo_tn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

inline ConfusionCounts confusion_counts(const VoxelGrid& pred, const VoxelGrid& gt, const LabelSpace& space) {
  require_same_dims(pred, gt, "confusion_counts");
  require_valid(pred, space);
  require_valid(gt, space);
  ConfusionCounts cc(space.num_classes());
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const Label p = pred.labels[i], g = gt.labels[i];
    const bool po = p != kEmpty, go = g != kEmpty;
    if (po && go) ++cc.geo_tp;
    else if (po) ++cc.geo_fp;
    else if (go) ++cc.geo_fn;
    else ++cc.geo_tn;
    if (p == g) {
      if (g != kEmpty) ++cc.tp[g];
    } else {
      if (p != kEmpty) ++cc.fp[p];
      if (g != kEmpty) ++cc.fn[g];
    }
  }
  return cc;
}

/// How classes with TP+FP+FN = 0 enter the mIoU mean.
enum class MiouConvention { ExcludeAbsent, AbsentAsZero };

struct IouScores {
  double iou = 0.0;                 // geometric, percent
  double miou = 0.0;                // percent
  std::vector<double> class_iou;    // classes 1..C at index c-1, percent; NaN when 0/0
};

inline IouScores iou_scores(const ConfusionCounts& cc, MiouConvention conv = MiouConvention::ExcludeAbsent) {
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  const auto ratio = [](std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) {
    const std::uint64_t den = tp + fp + fn;
    return den == 0 ? nan : 100.0 * static_cast<double>(tp) / static_cast<double>(den);
  };
  IouScores s;
  s.iou = ratio(cc.geo_tp, cc.geo_fp, cc.geo_fn);
  const std::uint32_t C = cc.num_semantic();
  s.class_iou.resize(C);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::uint32_t c = 1; c <= C; ++c) {
    const double v = ratio(cc.tp[c], cc.fp[c], cc.fn[c]);
    s.class_iou[c - 1] = v;
    if (!std::isnan(v)) {
      sum += v;
      ++n;
    } else if (conv == MiouConvention::AbsentAsZero) {
      ++n;
    }
  }
  s.miou = n ? sum / static_cast<double>(n) : nan;
  return s;
}

struct ReportRow {
  std::string run_id;
  std::string noise_kind;
  std::string noise_level;
  IouScores scores;
};

enum class ReportFormat { Csv, Json };

namespace detail {

inline std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

inline double parse_number(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("bad number '" + s + "' in report");
  return v;
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

}  // namespace detail

inline std::string report_header(std::uint32_t num_semantic) {
  std::string h = "run_id,noise_kind,noise_level,iou,miou";
  for (std::uint32_t c = 1; c <= num_semantic; ++c) h += ",iou_class_" + std::to_string(c);
  return h;
}

inline std::string render_csv(const std::vector<ReportRow>& rows, std::uint32_t num_semantic) {
  std::string out = report_header(num_semantic) + "\n";
  for (const auto& r : rows) {
    if (r.scores.class_iou.size() != num_semantic) throw std::invalid_argument("report row has wrong class count");
    out += r.run_id + "," + r.noise_kind + "," + r.noise_level + "," + detail::format_number(r.scores.iou) + "," +
           detail::format_number(r.scores.miou);
    for (double v : r.scores.class_iou) out += "," + detail::format_number(v);
    out += "\n";
  }
  return out;
}

inline nlohmann::ordered_json render_json(const std::vector<ReportRow>& rows, std::uint32_t num_semantic) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(v); };
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    if (r.scores.class_iou.size() != num_semantic) throw std::invalid_argument("report row has wrong class count");
    nlohmann::ordered_json j;
    j["run_id"] = r.run_id;
    j["noise_kind"] = r.noise_kind;
    j["noise_level"] = r.noise_level;
    j["iou"] = num(r.scores.iou);
    j["miou"] = num(r.scores.miou);
    for (std::uint32_t c = 1; c <= num_semantic; ++c) j["iou_class_" + std::to_string(c)] = num(r.scores.class_iou[c - 1]);
    arr.push_back(std::move(j));
  }
  return arr;
}

inline void emit_report(const std::vector<ReportRow>& rows, std::uint32_t num_semantic, ReportFormat format,
                        const std::filesystem::path& destination) {
  const std::string text = format == ReportFormat::Csv ? render_csv(rows, num_semantic)
                                                       : render_json(rows, num_semantic).dump(2) + "\n";
  io::write_text(destination, text);
}

inline std::vector<ReportRow> parse_csv_report(const std::string& text, std::uint32_t* num_semantic_out = nullptr) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("report is empty");
  const auto header = detail::split(line, ',');
  if (header.size() < 5 || header[0] != "run_id") throw std::invalid_argument("report header malformed");
  const auto C = static_cast<std::uint32_t>(header.size() - 5);
  if (line != report_header(C)) throw std::invalid_argument("report header malformed");
  std::vector<ReportRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != header.size()) throw std::invalid_argument("report row has wrong field count");
    ReportRow r{f[0], f[1], f[2], {}};
    r.scores.iou = detail::parse_number(f[3]);
    r.scores.miou = detail::parse_number(f[4]);
    for (std::uint32_t c = 0; c < C; ++c) r.scores.class_iou.push_back(detail::parse_number(f[5 + c]));
    rows.push_back(std::move(r));
  }
  if (num_semantic_out) *num_semantic_out = C;
  return rows;
}

inline std::vector<ReportRow> parse_json_report(const nlohmann::json& arr, std::uint32_t num_semantic) {
  std::vector<ReportRow> rows;
  auto num = [](const nlohmann::json& v) {
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
  };
  for (const auto& j : arr) {
    ReportRow r{j.at("run_id").get<std::string>(), j.at("noise_kind").get<std::string>(),
                j.at("noise_level").get<std::string>(), {}};
    r.scores.iou = num(j.at("iou"));
    r.scores.miou = num(j.at("miou"));
    for (std::uint32_t c = 1; c <= num_semantic; ++c) r.scores.class_iou.push_back(num(j.at("iou_class_" + std::to_string(c))));
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace occnl
