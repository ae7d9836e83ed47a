#pragma once

// Experiment configuration: a flat `key = value` text file. Lines starting
// with '#' are comments. Unknown or repeated keys are errors, and `seed` is
// mandatory. resolved_config() renders every key in schema order, which is
// the frozen copy written next to each run.
//
// Schema (defaults in parentheses):
//   seed                       top-level seed (required)
//   run_id                     row label in reports ("run")
//   out                        output directory ("", falls back to $OCCNL_OUT or ./runs)
//   labels.preset              semantic-kitti | custom (semantic-kitti)
//   labels.num_semantic        C for custom label spaces
//   labels.dynamic             comma list of dynamic class ids for custom spaces
//   scene.nx/ny/nz             grid size (64 64 8)
//   scene.frames               frames per sequence (15)
//   scene.reference_frame      reference frame t (7)
//   scene.ground_height        ground layers (1)
//   scene.patch_density        ground patch density (1)
//   scene.structure_density    above-ground structure density (1)
//   scene.tail_exponent        long-tail exponent of static classes (1.3)
//   scene.random_objects       seeded dynamic objects per scene (24)
//   scene.objects              ';'-separated "cls ex ey ez vx vy vz x y z" boxes
//   scene.jitter               per-frame pose error in voxels (0)
//   data.train_scenes          training sequences (4)
//   data.eval_scenes           evaluation sequences (2)
//   data.feature_dim           feature dimension D (16)
//   data.feature_separation    class-mean norm (4)
//   data.feature_noise         per-coordinate feature std (1)
//   noise.kind                 asymmetric | trailing (asymmetric)
//   noise.eta                  flip rate for asymmetric noise (0)
//   noise.trailing             mild | moderate | severe (mild)
//   noise.future_frames        future window (7)
//   noise.history_frames       history window (7)
//   noise.dilation_iterations  dilation steps for severe (1)
//   train.epochs, train.warmup (20, 12)
//   train.lr, train.lr_decay_epoch, train.lr_decay_factor (0.5, 18, 0.1)
//   train.minibatch            voxels per step, 0 = whole scene (0)
//   train.arch, train.hidden   linear | mlp, hidden width (linear, 32)
//   train.k_start/k_end/k_gamma (9, 2, 2)
//   train.k_strategy           linear | fixed-N | random (linear)
//   train.sources              both | teacher | prototype (both)
//   train.losses               comma list from pll,nl,sntd or "none" (pll,nl,sntd)
//   train.weight_pll/weight_nl/weight_sntd (1, 1, 1)
//   train.tau                  SNTD temperature (3)
//   train.sntd_reduction       mean | sum (mean)
//   train.ema_momentum         (0.999)
//   train.proto_momentum       (0.99)
//   train.proto_fusion         (0.5)
//   train.include_noisy_label  true | false (false)
//   eval.convention            exclude | zero (exclude)
//   sweep.eta                  comma list of rates
//   sweep.trailing             comma list of trailing levels
//   sweep.k_strategies         comma list of K strategies
//   sweep.sources              comma list of candidate sources
//   sweep.losses               '|'-separated loss sets, e.g. "none|pll|pll,nl|pll,nl,sntd"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "occnl/candidates.hpp"
#include "occnl/errors.hpp"
#include "occnl/features.hpp"
#include "occnl/learner.hpp"
#include "occnl/metrics.hpp"
#include "occnl/noise.hpp"
#include "occnl/scene.hpp"

namespace occnl {

enum class NoiseKind { Asymmetric, Trailing };

struct NoiseConfig {
  NoiseKind kind = NoiseKind::Asymmetric;
  double eta = 0.0;
  TrailingLevel level = TrailingLevel::Mild;
  TrailingWindows windows;
};

struct DataConfig {
  std::uint32_t train_scenes = 4;
  std::uint32_t eval_scenes = 2;
  FeatureSpec features;
};

struct SweepConfig {
  std::vector<double> eta;
  std::vector<std::string> trailing;
  std::vector<std::string> k_strategies;
  std::vector<std::string> sources;
  std::vector<std::string> losses;

  bool empty() const {
    return eta.empty() && trailing.empty() && k_strategies.empty() && sources.empty() && losses.empty();
  }
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string run_id = "run";
  std::filesystem::path out_dir;
  std::string label_preset = "semantic-kitti";
  std::uint32_t custom_num_semantic = 0;
  std::vector<Label> custom_dynamic;
  SceneSpec scene;
  DataConfig data;
  NoiseConfig noise;
  TrainConfig train;
  std::string k_strategy = "linear";
  MiouConvention convention = MiouConvention::ExcludeAbsent;
  SweepConfig sweep;

  ExperimentConfig() : scene(default_scene_spec()) {}

  LabelSpace label_space() const {
    if (label_preset == "semantic-kitti") return LabelSpace::semantic_kitti();
    return LabelSpace(custom_num_semantic, custom_dynamic);
  }

  /// Re-derives fields that depend on several keys (label space, K policy).
  void finalize() {
    scene.space = label_space();
    train.k_policy = KPolicy::parse(k_strategy, train.k_policy.schedule);
    train.k_policy.schedule.warmup_epochs = train.warmup_epochs;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

inline std::string join(const std::vector<std::string>& v, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? sep : "") + v[i];
  return out;
}

inline std::string num(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

template <typename T>
T parse_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v.front() == '-') throw std::invalid_argument("negative");
    const unsigned long long x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing characters");
    if (x > std::numeric_limits<T>::max()) throw std::out_of_range("too large");
    return static_cast<T>(x);
  } catch (const std::exception&) {
    throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  }
}

inline std::int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing characters");
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key, "expected an integer, got '" + v + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(x)) throw std::invalid_argument("bad");
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key, "expected a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key, "expected true|false, got '" + v + "'");
}

template <typename F>
auto wrap(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(key, e.what());
  }
}

inline std::string loss_set_name(const TrainConfig& t) {
  std::vector<std::string> parts;
  if (t.use_pll) parts.emplace_back("pll");
  if (t.use_nl) parts.emplace_back("nl");
  if (t.use_sntd) parts.emplace_back("sntd");
  return parts.empty() ? "none" : join(parts, ",");
}

inline void set_loss_set(const std::string& key, const std::string& v, TrainConfig& t) {
  t.use_pll = t.use_nl = t.use_sntd = false;
  if (v == "none") return;
  for (const auto& p : split_list(v, ',')) {
    if (p == "pll") t.use_pll = true;
    else if (p == "nl") t.use_nl = true;
    else if (p == "sntd") t.use_sntd = true;
    else throw ConfigError(key, "unknown loss term '" + p + "' (expected pll, nl, sntd or none)");
  }
}

inline std::string objects_to_string(const std::vector<DynamicObject>& objs) {
  std::vector<std::string> parts;
  for (const auto& o : objs) {
    std::ostringstream s;
    s << o.cls << ' ' << o.extent[0] << ' ' << o.extent[1] << ' ' << o.extent[2] << ' ' << o.velocity[0] << ' '
      << o.velocity[1] << ' ' << o.velocity[2] << ' ' << o.spawn.x << ' ' << o.spawn.y << ' ' << o.spawn.z;
    parts.push_back(s.str());
  }
  return join(parts, "; ");
}

inline std::vector<DynamicObject> parse_objects(const std::string& key, const std::string& v, std::uint32_t ref) {
  std::vector<DynamicObject> out;
  for (const auto& item : split_list(v, ';')) {
    std::istringstream s(item);
    std::vector<std::int64_t> f;
    std::string tok;
    while (s >> tok) f.push_back(parse_int(key, tok));
    if (f.size() != 10) throw ConfigError(key, "object needs 10 integers: cls ex ey ez vx vy vz x y z");
    if (f[0] < 0 || f[1] < 1 || f[2] < 1 || f[3] < 1) throw ConfigError(key, "object class/extent must be positive");
    DynamicObject o;
    o.cls = static_cast<Label>(f[0]);
    o.extent = {static_cast<std::uint32_t>(f[1]), static_cast<std::uint32_t>(f[2]), static_cast<std::uint32_t>(f[3])};
    o.velocity = {f[4], f[5], f[6]};
    o.spawn = {f[7], f[8], f[9]};
    o.spawn_frame = ref;
    out.push_back(o);
  }
  return out;
}

struct Field {
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

inline const std::vector<Field>& schema() {
  using C = ExperimentConfig;
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;
    f.push_back({"seed", [](C& c, const std::string& v) { c.seed = parse_uint<std::uint64_t>("seed", v); },
                 [](const C& c) { return std::to_string(c.seed); }});
    f.push_back({"run_id",
                 [](C& c, const std::string& v) {
                   if (v.empty() || v.find(',') != std::string::npos) throw ConfigError("run_id", "must be non-empty without commas");
                   c.run_id = v;
                 },
                 [](const C& c) { return c.run_id; }});
    f.push_back({"out", [](C& c, const std::string& v) { c.out_dir = v; }, [](const C& c) { return c.out_dir.string(); }});
    f.push_back({"labels.preset",
                 [](C& c, const std::string& v) {
                   if (v != "semantic-kitti" && v != "custom") throw ConfigError("labels.preset", "expected semantic-kitti|custom");
                   c.label_preset = v;
                 },
                 [](const C& c) { return c.label_preset; }});
    f.push_back({"labels.num_semantic",
                 [](C& c, const std::string& v) { c.custom_num_semantic = parse_uint<std::uint32_t>("labels.num_semantic", v); },
                 [](const C& c) { return std::to_string(c.custom_num_semantic); }});
    f.push_back({"labels.dynamic",
                 [](C& c, const std::string& v) {
                   c.custom_dynamic.clear();
                   for (const auto& p : split_list(v, ',')) c.custom_dynamic.push_back(parse_uint<Label>("labels.dynamic", p));
                 },
                 [](const C& c) {
                   std::vector<std::string> s;
                   for (auto l : c.custom_dynamic) s.push_back(std::to_string(l));
                   return join(s, ",");
                 }});
    auto add_u32 = [&f](const std::string& key, std::function<std::uint32_t&(C&)> ref) {
      f.push_back({key, [key, ref](C& c, const std::string& v) { ref(c) = parse_uint<std::uint32_t>(key, v); },
                   [ref](const C& c) { return std::to_string(ref(const_cast<C&>(c))); }});
    };
    auto add_size = [&f](const std::string& key, std::function<std::size_t&(C&)> ref) {
      f.push_back({key, [key, ref](C& c, const std::string& v) { ref(c) = parse_uint<std::size_t>(key, v); },
                   [ref](const C& c) { return std::to_string(ref(const_cast<C&>(c))); }});
    };
    auto add_double = [&f](const std::string& key, std::function<double&(C&)> ref) {
      f.push_back({key, [key, ref](C& c, const std::string& v) { ref(c) = parse_double(key, v); },
                   [ref](const C& c) { return num(ref(const_cast<C&>(c))); }});
    };
    add_u32("scene.nx", [](C& c) -> std::uint32_t& { return c.scene.dims.nx; });
    add_u32("scene.ny", [](C& c) -> std::uint32_t& { return c.scene.dims.ny; });
    add_u32("scene.nz", [](C& c) -> std::uint32_t& { return c.scene.dims.nz; });
    add_u32("scene.frames", [](C& c) -> std::uint32_t& { return c.scene.num_frames; });
    add_u32("scene.reference_frame", [](C& c) -> std::uint32_t& { return c.scene.reference_frame; });
    add_u32("scene.ground_height", [](C& c) -> std::uint32_t& { return c.scene.ground_height; });
    add_double("scene.patch_density", [](C& c) -> double& { return c.scene.patch_density; });
    add_double("scene.structure_density", [](C& c) -> double& { return c.scene.structure_density; });
    add_double("scene.tail_exponent", [](C& c) -> double& { return c.scene.tail_exponent; });
    add_u32("scene.random_objects", [](C& c) -> std::uint32_t& { return c.scene.random_objects; });
    f.push_back({"scene.objects",
                 [](C& c, const std::string& v) { c.scene.objects = parse_objects("scene.objects", v, 0); },
                 [](const C& c) { return objects_to_string(c.scene.objects); }});
    f.push_back({"scene.jitter",
                 [](C& c, const std::string& v) {
                   c.scene.jitter = parse_int("scene.jitter", v);
                   if (c.scene.jitter < 0) throw ConfigError("scene.jitter", "must be non-negative");
                 },
                 [](const C& c) { return std::to_string(c.scene.jitter); }});
    add_u32("data.train_scenes", [](C& c) -> std::uint32_t& { return c.data.train_scenes; });
    add_u32("data.eval_scenes", [](C& c) -> std::uint32_t& { return c.data.eval_scenes; });
    add_size("data.feature_dim", [](C& c) -> std::size_t& { return c.data.features.dim; });
    add_double("data.feature_separation", [](C& c) -> double& { return c.data.features.separation; });
    add_double("data.feature_noise", [](C& c) -> double& { return c.data.features.noise; });
    f.push_back({"noise.kind",
                 [](C& c, const std::string& v) {
                   if (v == "asymmetric") c.noise.kind = NoiseKind::Asymmetric;
                   else if (v == "trailing") c.noise.kind = NoiseKind::Trailing;
                   else throw ConfigError("noise.kind", "expected asymmetric|trailing");
                 },
                 [](const C& c) { return std::string(c.noise.kind == NoiseKind::Asymmetric ? "asymmetric" : "trailing"); }});
    f.push_back({"noise.eta",
                 [](C& c, const std::string& v) {
                   c.noise.eta = parse_double("noise.eta", v);
                   if (c.noise.eta < 0.0 || c.noise.eta > 1.0) throw ConfigError("noise.eta", "must lie in [0,1]");
                 },
                 [](const C& c) { return num(c.noise.eta); }});
    f.push_back({"noise.trailing",
                 [](C& c, const std::string& v) { c.noise.level = wrap("noise.trailing", [&] { return parse_trailing_level(v); }); },
                 [](const C& c) { return std::string(to_string(c.noise.level)); }});
    add_u32("noise.future_frames", [](C& c) -> std::uint32_t& { return c.noise.windows.future_frames; });
    add_u32("noise.history_frames", [](C& c) -> std::uint32_t& { return c.noise.windows.history_frames; });
    add_u32("noise.dilation_iterations", [](C& c) -> std::uint32_t& { return c.noise.windows.dilation_iterations; });
    add_u32("train.epochs", [](C& c) -> std::uint32_t& { return c.train.epochs; });
    add_u32("train.warmup", [](C& c) -> std::uint32_t& { return c.train.warmup_epochs; });
    add_double("train.lr", [](C& c) -> double& { return c.train.learning_rate; });
    add_u32("train.lr_decay_epoch", [](C& c) -> std::uint32_t& { return c.train.lr_decay_epoch; });
    add_double("train.lr_decay_factor", [](C& c) -> double& { return c.train.lr_decay_factor; });
    add_size("train.minibatch", [](C& c) -> std::size_t& { return c.train.minibatch; });
    f.push_back({"train.arch",
                 [](C& c, const std::string& v) { c.train.architecture = wrap("train.arch", [&] { return parse_architecture(v); }); },
                 [](const C& c) { return std::string(to_string(c.train.architecture)); }});
    add_size("train.hidden", [](C& c) -> std::size_t& { return c.train.hidden; });
    add_u32("train.k_start", [](C& c) -> std::uint32_t& { return c.train.k_policy.schedule.k_start; });
    add_u32("train.k_end", [](C& c) -> std::uint32_t& { return c.train.k_policy.schedule.k_end; });
    add_u32("train.k_gamma", [](C& c) -> std::uint32_t& { return c.train.k_policy.schedule.gamma; });
    f.push_back({"train.k_strategy",
                 [](C& c, const std::string& v) {
                   wrap("train.k_strategy", [&] { return KPolicy::parse(v, {}); });
                   c.k_strategy = v;
                 },
                 [](const C& c) { return c.k_strategy; }});
    f.push_back({"train.sources",
                 [](C& c, const std::string& v) { c.train.sources = wrap("train.sources", [&] { return parse_candidate_sources(v); }); },
                 [](const C& c) { return std::string(to_string(c.train.sources)); }});
    f.push_back({"train.losses", [](C& c, const std::string& v) { set_loss_set("train.losses", v, c.train); },
                 [](const C& c) { return loss_set_name(c.train); }});
    add_double("train.weight_pll", [](C& c) -> double& { return c.train.weights.pll; });
    add_double("train.weight_nl", [](C& c) -> double& { return c.train.weights.nl; });
    add_double("train.weight_sntd", [](C& c) -> double& { return c.train.weights.sntd; });
    add_double("train.tau", [](C& c) -> double& { return c.train.sntd.tau_s; });
    f.push_back({"train.sntd_reduction",
                 [](C& c, const std::string& v) {
                   if (v != "mean" && v != "sum") throw ConfigError("train.sntd_reduction", "expected mean|sum");
                   c.train.sntd.sum_over_voxels = v == "sum";
                 },
                 [](const C& c) { return std::string(c.train.sntd.sum_over_voxels ? "sum" : "mean"); }});
    add_double("train.ema_momentum", [](C& c) -> double& { return c.train.ema_momentum; });
    add_double("train.proto_momentum", [](C& c) -> double& { return c.train.proto_momentum; });
    add_double("train.proto_fusion", [](C& c) -> double& { return c.train.proto_fusion; });
    f.push_back({"train.include_noisy_label",
                 [](C& c, const std::string& v) { c.train.include_noisy_label = parse_bool("train.include_noisy_label", v); },
                 [](const C& c) { return std::string(c.train.include_noisy_label ? "true" : "false"); }});
    f.push_back({"eval.convention",
                 [](C& c, const std::string& v) {
                   if (v == "exclude") c.convention = MiouConvention::ExcludeAbsent;
                   else if (v == "zero") c.convention = MiouConvention::AbsentAsZero;
                   else throw ConfigError("eval.convention", "expected exclude|zero");
                 },
                 [](const C& c) { return std::string(c.convention == MiouConvention::ExcludeAbsent ? "exclude" : "zero"); }});
    f.push_back({"sweep.eta",
                 [](C& c, const std::string& v) {
                   c.sweep.eta.clear();
                   for (const auto& p : split_list(v, ',')) {
                     const double e = parse_double("sweep.eta", p);
                     if (e < 0.0 || e > 1.0) throw ConfigError("sweep.eta", "rates must lie in [0,1]");
                     c.sweep.eta.push_back(e);
                   }
                 },
                 [](const C& c) {
                   std::vector<std::string> s;
                   for (double e : c.sweep.eta) s.push_back(num(e));
                   return join(s, ",");
                 }});
    f.push_back({"sweep.trailing",
                 [](C& c, const std::string& v) {
                   c.sweep.trailing = split_list(v, ',');
                   for (const auto& t : c.sweep.trailing) wrap("sweep.trailing", [&] { return parse_trailing_level(t); });
                 },
                 [](const C& c) { return join(c.sweep.trailing, ","); }});
    f.push_back({"sweep.k_strategies",
                 [](C& c, const std::string& v) {
                   c.sweep.k_strategies = split_list(v, ',');
                   for (const auto& s : c.sweep.k_strategies) wrap("sweep.k_strategies", [&] { return KPolicy::parse(s, {}); });
                 },
                 [](const C& c) { return join(c.sweep.k_strategies, ","); }});
    f.push_back({"sweep.sources",
                 [](C& c, const std::string& v) {
                   c.sweep.sources = split_list(v, ',');
                   for (const auto& s : c.sweep.sources) wrap("sweep.sources", [&] { return parse_candidate_sources(s); });
                 },
                 [](const C& c) { return join(c.sweep.sources, ","); }});
    f.push_back({"sweep.losses",
                 [](C& c, const std::string& v) {
                   c.sweep.losses = split_list(v, '|');
                   TrainConfig probe;
                   for (const auto& s : c.sweep.losses) set_loss_set("sweep.losses", s, probe);
                 },
                 [](const C& c) { return join(c.sweep.losses, "|"); }});
    return f;
  }();
  return fields;
}

}  // namespace detail

/// Checks cross-key constraints after parsing.
inline void validate_config(const ExperimentConfig& c) {
  const LabelSpace space = detail::wrap("labels.num_semantic", [&] { return c.label_space(); });
  detail::wrap("scene.nx", [&] {
    SceneSpec s = c.scene;
    s.space = space;
    validate_scene_spec(s);
    return 0;
  });
  if (c.data.train_scenes < 1) throw ConfigError("data.train_scenes", "needs at least one training scene");
  if (c.data.features.dim < 1) throw ConfigError("data.feature_dim", "must be positive");
  if (!(c.data.features.noise >= 0.0)) throw ConfigError("data.feature_noise", "must be non-negative");
  if (c.train.warmup_epochs > c.train.epochs) throw ConfigError("train.warmup", "must not exceed train.epochs");
  if (c.train.epochs < 1) throw ConfigError("train.epochs", "must be positive");
  if (!(c.train.learning_rate > 0.0)) throw ConfigError("train.lr", "must be positive");
  if (!(c.train.lr_decay_factor > 0.0)) throw ConfigError("train.lr_decay_factor", "must be positive");
  if (!(c.train.sntd.tau_s > 0.0)) throw ConfigError("train.tau", "must be positive");
  if (c.train.ema_momentum < 0.0 || c.train.ema_momentum > 1.0) throw ConfigError("train.ema_momentum", "must lie in [0,1]");
  if (c.train.proto_momentum < 0.0 || c.train.proto_momentum > 1.0) throw ConfigError("train.proto_momentum", "must lie in [0,1]");
  if (c.train.proto_fusion < 0.0 || c.train.proto_fusion > 1.0) throw ConfigError("train.proto_fusion", "must lie in [0,1]");
  const auto& ks = c.train.k_policy.schedule;
  if (ks.k_end < 1 || ks.k_end > ks.k_start) throw ConfigError("train.k_end", "needs 1 <= k_end <= k_start");
  if (c.train.architecture == Architecture::Mlp && c.train.hidden < 1) throw ConfigError("train.hidden", "must be positive");
  if (c.noise.kind == NoiseKind::Trailing || !c.sweep.trailing.empty()) {
    const auto& w = c.noise.windows;
    if (std::size_t{c.scene.reference_frame} + w.future_frames >= c.scene.num_frames) {
      throw ConfigError("noise.future_frames", "window exceeds the sequence");
    }
    if (w.history_frames > c.scene.reference_frame) throw ConfigError("noise.history_frames", "window exceeds the sequence");
  }
  if (!c.sweep.eta.empty() && !c.sweep.trailing.empty()) {
    throw ConfigError("sweep.trailing", "a run has exactly one noise kind; sweep either eta or trailing levels");
  }
}

inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::map<std::string, const detail::Field*> index;
  for (const auto& f : detail::schema()) index[f.key] = &f;
  std::map<std::string, bool> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno), "expected 'key = value'");
    }
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    auto it = index.find(key);
    if (it == index.end()) throw ConfigError(key, "unknown key");
    if (seen[key]) throw ConfigError(key, "given more than once");
    seen[key] = true;
    it->second->set(cfg, value);
  }
  if (!seen["seed"]) throw ConfigError("seed", "missing (a seed is mandatory)");
  // Objects may precede scene.reference_frame in the file.
  for (auto& o : cfg.scene.objects) o.spawn_frame = cfg.scene.reference_frame;
  detail::wrap("labels.num_semantic", [&] {
    cfg.finalize();
    return 0;
  });
  validate_config(cfg);
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Every schema key with its resolved value, in schema order.
inline std::string resolved_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& f : detail::schema()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

}  // namespace occnl
