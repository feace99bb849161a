#pragma once

// Flat key:value experiment configuration. Unknown keys are rejected with
// line context, unspecified keys fall back to the chosen preset, and
// serialize_spec(parse(...)) reparses to an equal spec so a run manifest
// pins the run exactly.

#include <cstdio>
#include <cstdlib>
#include <set>
#include <string>
#include <vector>

#include "biadapt/nets.hpp"
#include "biadapt/synth.hpp"
#include "biadapt/trainer.hpp"

namespace biadapt::config {

struct ExperimentSpec {
  // scenario: generated domains by manipulation kind, or ingested from
  // directories when *_dir keys are set (directories win)
  std::string source_kind = "patch_swap";
  std::vector<std::string> target_kinds{"local_warp"};
  std::string source_dir;
  std::vector<std::string> target_dirs;
  int n_real = 320;  // per domain, before the train/test split
  int n_fake = 320;
  int side = 32;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;  // generation, split, and training streams

  nets::BackboneConfig backbone;
  train::TrainConfig training;  // training.seed is ignored; `seed` rules

  std::string out_dir = "runs/exp";
  bool evaluate = true;
  bool heatmaps = false;
  int heatmap_count = 2;

  bool operator==(const ExperimentSpec&) const = default;

  bool generated_source() const { return source_dir.empty(); }
  bool generated_targets() const { return target_dirs.empty(); }

  void validate() const {
    if (generated_source()) synth::parse_manip_kind(source_kind);
    if (generated_targets()) {
      if (target_kinds.empty())
        throw ConfigError("config: at least one target required");
      for (const auto& k : target_kinds) synth::parse_manip_kind(k);
    }
    if (generated_source() || generated_targets()) {
      if (n_real < 4 || n_fake < 4)
        throw ConfigError("config: n_real and n_fake must be >= 4");
      if (side != 32 && side != 64 && side != 224)
        throw ConfigError("config: generated side must be 32, 64, or 224");
    }
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
      throw ConfigError("config: train_fraction must be in (0,1)");
    if (heatmap_count < 0)
      throw ConfigError("config: heatmap_count must be >= 0");
    if (backbone.side != side)
      throw ConfigError("config: backbone side out of sync with side");
    backbone.validate();
    training.validate();
  }
};

inline ExperimentSpec desk_spec() { return {}; }

// paper-scale model and input size; data stays synthetic desk-sized
inline ExperimentSpec paper_parity_spec() {
  ExperimentSpec s;
  s.side = 224;
  s.backbone = nets::BackboneConfig::paper_parity();
  return s;
}

inline ExperimentSpec preset_spec(const std::string& name) {
  if (name == "desk") return desk_spec();
  if (name == "paper-parity") return paper_parity_spec();
  throw ConfigError("unknown preset: " + name);
}

// source-only supervised training: no adversarial term and no backward stage
inline ExperimentSpec baseline_spec() {
  ExperimentSpec s;
  s.training.weights.alpha2 = 0.0;
  s.training.adapter = train::Adapter::none;
  s.training.T2 = 0;
  return s;
}

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = s.find(',', start);
    std::string item = trim(comma == std::string::npos
                                ? s.substr(start)
                                : s.substr(start, comma - start));
    if (item.empty()) throw ConfigError("empty list element");
    out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::string join_list(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i > 0) out += ",";
    out += v[i];
  }
  return out;
}

inline double parse_f64(const std::string& v) {
  char* end = nullptr;
  double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size())
    throw ConfigError("expected a number, got '" + v + "'");
  return x;
}

inline long long parse_i64(const std::string& v) {
  char* end = nullptr;
  long long x = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || end != v.c_str() + v.size())
    throw ConfigError("expected an integer, got '" + v + "'");
  return x;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

}  // namespace detail

// applies flat `key: value` lines onto an existing spec; `where` prefixes
// error messages (file path or delta name)
inline void apply_config_text(ExperimentSpec& spec, const std::string& text,
                              const std::string& where) {
  std::set<std::string> seen;
  std::size_t pos = 0;
  int lineno = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::string line = nl == std::string::npos ? text.substr(pos)
                                               : text.substr(pos, nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::string ctx = where + ":" + std::to_string(lineno) + ": ";
    std::size_t colon = t.find(':');
    if (colon == std::string::npos)
      throw ConfigError(ctx + "expected 'key: value', got '" + t + "'");
    std::string key = detail::trim(t.substr(0, colon));
    std::string val = detail::trim(t.substr(colon + 1));
    if (key.empty()) throw ConfigError(ctx + "missing key");
    if (!seen.insert(key).second)
      throw ConfigError(ctx + "duplicate key '" + key + "'");
    ctx += key + ": ";

    auto f64 = [&] { return detail::parse_f64(val); };
    auto positive_f64 = [&] {
      double x = detail::parse_f64(val);
      if (!(x > 0)) throw ConfigError("must be positive");
      return x;
    };
    auto nonneg_f64 = [&] {
      double x = detail::parse_f64(val);
      if (x < 0) throw ConfigError("must be non-negative");
      return x;
    };
    auto nonneg_i64 = [&] {
      long long x = detail::parse_i64(val);
      if (x < 0) throw ConfigError("must be non-negative");
      return x;
    };
    auto positive_i64 = [&] {
      long long x = detail::parse_i64(val);
      if (x < 1) throw ConfigError("must be positive");
      return x;
    };

    try {
      if (key == "source_kind")
        spec.source_kind = val;
      else if (key == "target_kind")
        spec.target_kinds = detail::split_list(val);
      else if (key == "source_dir")
        spec.source_dir = val;
      else if (key == "target_dir")
        spec.target_dirs = detail::split_list(val);
      else if (key == "n_real")
        spec.n_real = static_cast<int>(positive_i64());
      else if (key == "n_fake")
        spec.n_fake = static_cast<int>(positive_i64());
      else if (key == "side") {
        spec.side = static_cast<int>(positive_i64());
        spec.backbone.side = spec.side;
      } else if (key == "train_fraction") {
        double x = f64();
        if (!(x > 0.0 && x < 1.0))
          throw ConfigError("must be in (0,1)");
        spec.train_fraction = x;
      } else if (key == "seed")
        spec.seed = static_cast<std::uint64_t>(nonneg_i64());
      else if (key == "backbone")
        spec.backbone.kind = nets::parse_backbone(val);
      else if (key == "visual_layers")
        spec.backbone.visual_layers = static_cast<int>(positive_i64());
      else if (key == "freq_layers")
        spec.backbone.freq_layers = static_cast<int>(positive_i64());
      else if (key == "embed_dim")
        spec.backbone.embed_dim = static_cast<int>(positive_i64());
      else if (key == "patch")
        spec.backbone.patch = static_cast<int>(positive_i64());
      else if (key == "freq_channels")
        spec.backbone.freq_channels = static_cast<int>(positive_i64());
      else if (key == "freq_depth")
        spec.backbone.freq_depth = static_cast<int>(positive_i64());
      else if (key == "alpha1")
        spec.training.weights.alpha1 = nonneg_f64();
      else if (key == "alpha2")
        spec.training.weights.alpha2 = nonneg_f64();
      else if (key == "alpha3")
        spec.training.weights.alpha3 = nonneg_f64();
      else if (key == "alpha4")
        spec.training.weights.alpha4 = nonneg_f64();
      else if (key == "tau") {
        double x = f64();
        if (!(x > 0)) throw ConfigError("must be positive");
        spec.training.weights.tau = x;
      } else if (key == "t1")
        spec.training.T1 = static_cast<int>(nonneg_i64());
      else if (key == "t2")
        spec.training.T2 = static_cast<int>(nonneg_i64());
      else if (key == "lr_forward")
        spec.training.lr_forward = positive_f64();
      else if (key == "lr_backward")
        spec.training.lr_backward = positive_f64();
      else if (key == "momentum") {
        double x = f64();
        if (x < 0 || x >= 1) throw ConfigError("must be in [0,1)");
        spec.training.momentum = x;
      } else if (key == "weight_decay")
        spec.training.weight_decay = nonneg_f64();
      else if (key == "batch_source")
        spec.training.batch_source = static_cast<int>(positive_i64());
      else if (key == "batch_target")
        spec.training.batch_target = static_cast<int>(positive_i64());
      else if (key == "adapter")
        spec.training.adapter = train::parse_adapter(val);
      else if (key == "backward_objective")
        spec.training.backward_objective = train::parse_backward_objective(val);
      else if (key == "teacher_update")
        spec.training.teacher_update = train::parse_teacher_update(val);
      else if (key == "ema_decay") {
        double x = f64();
        if (x < 0 || x > 1) throw ConfigError("must be in [0,1]");
        spec.training.ema_decay = x;
      } else if (key == "freeze_classifier_backward")
        spec.training.freeze_classifier_backward = detail::parse_bool(val);
      else if (key == "out_dir")
        spec.out_dir = val;
      else if (key == "evaluate")
        spec.evaluate = detail::parse_bool(val);
      else if (key == "heatmaps")
        spec.heatmaps = detail::parse_bool(val);
      else if (key == "heatmap_count")
        spec.heatmap_count = static_cast<int>(nonneg_i64());
      else
        throw ConfigError("unknown key");
    } catch (const Error& e) {
      throw ConfigError(ctx + e.what());
    }
  }
}

inline ExperimentSpec parse_config_text(const std::string& text,
                                        const std::string& preset = "desk",
                                        const std::string& where = "config") {
  ExperimentSpec spec = preset_spec(preset);
  apply_config_text(spec, text, where);
  spec.validate();
  return spec;
}

inline ExperimentSpec parse_config(const std::string& path,
                                   const std::string& preset = "desk") {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (f == nullptr) throw IoError("config: cannot open " + path);
  std::string text;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) text.append(buf, n);
  bool bad = std::ferror(f) != 0;
  std::fclose(f);
  if (bad) throw IoError("config: read failed for " + path);
  return parse_config_text(text, preset, path);
}

inline std::string serialize_spec(const ExperimentSpec& s) {
  char buf[64];
  std::string out;
  auto put = [&](const std::string& k, const std::string& v) {
    out += k + ": " + v + "\n";
  };
  auto put_f = [&](const std::string& k, double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    put(k, buf);
  };
  auto put_i = [&](const std::string& k, long long v) {
    put(k, std::to_string(v));
  };
  auto put_b = [&](const std::string& k, bool v) {
    put(k, v ? "true" : "false");
  };
  put("source_kind", s.source_kind);
  put("target_kind", detail::join_list(s.target_kinds));
  put("source_dir", s.source_dir);
  put("target_dir", detail::join_list(s.target_dirs));
  put_i("n_real", s.n_real);
  put_i("n_fake", s.n_fake);
  put_i("side", s.side);
  put_f("train_fraction", s.train_fraction);
  put_i("seed", static_cast<long long>(s.seed));
  put("backbone", nets::backbone_name(s.backbone.kind));
  put_i("visual_layers", s.backbone.visual_layers);
  put_i("freq_layers", s.backbone.freq_layers);
  put_i("embed_dim", s.backbone.embed_dim);
  put_i("patch", s.backbone.patch);
  put_i("freq_channels", s.backbone.freq_channels);
  put_i("freq_depth", s.backbone.freq_depth);
  put_f("alpha1", s.training.weights.alpha1);
  put_f("alpha2", s.training.weights.alpha2);
  put_f("alpha3", s.training.weights.alpha3);
  put_f("alpha4", s.training.weights.alpha4);
  put_f("tau", s.training.weights.tau);
  put_i("t1", s.training.T1);
  put_i("t2", s.training.T2);
  put_f("lr_forward", s.training.lr_forward);
  put_f("lr_backward", s.training.lr_backward);
  put_f("momentum", s.training.momentum);
  put_f("weight_decay", s.training.weight_decay);
  put_i("batch_source", s.training.batch_source);
  put_i("batch_target", s.training.batch_target);
  put("adapter", train::adapter_name(s.training.adapter));
  put("backward_objective",
      train::backward_objective_name(s.training.backward_objective));
  put("teacher_update", train::teacher_update_name(s.training.teacher_update));
  put_f("ema_decay", s.training.ema_decay);
  put_b("freeze_classifier_backward", s.training.freeze_classifier_backward);
  put("out_dir", s.out_dir);
  put_b("evaluate", s.evaluate);
  put_b("heatmaps", s.heatmaps);
  put_i("heatmap_count", s.heatmap_count);
  return out;
}

// digest over result-determining keys only: where artifacts land, and which
// optional artifacts are emitted, does not change what the run computes
inline std::string config_digest(const ExperimentSpec& s) {
  ExperimentSpec c = s;
  c.out_dir = "";
  c.evaluate = true;
  c.heatmaps = false;
  c.heatmap_count = 0;
  return hex64(fnv1a(serialize_spec(c)));
}

}  // namespace biadapt::config
