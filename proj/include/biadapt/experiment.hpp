#pragma once

// Experiment orchestration: scenario assembly from a spec, the three-stage
// run (evaluate at baseline / post-forward / post-backward with artifacts
// per stage), and the ablation grid with its merged Table-style report.

#include <cctype>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "biadapt/config.hpp"
#include "biadapt/dataset_io.hpp"
#include "biadapt/eval.hpp"
#include "biadapt/synth.hpp"

namespace biadapt::experiment {

namespace fs = std::filesystem;
namespace ev = biadapt::eval;

struct BuiltScenario {
  Scenario scenario;
  std::vector<DomainDataset> eval_domains;  // source first, labeled splits
};

inline BuiltScenario build_scenario(const config::ExperimentSpec& spec) {
  spec.validate();
  DomainDataset source =
      spec.generated_source()
          ? synth::generate_domain(spec.source_kind, spec.seed, spec.n_real,
                                   spec.n_fake, spec.side)
          : io::load_dataset_dir(spec.source_dir, true, spec.side);
  source = split_domain(source, spec.train_fraction, spec.seed);

  std::vector<DomainDataset> targets;
  if (spec.generated_targets()) {
    for (const auto& kind : spec.target_kinds)
      targets.push_back(synth::generate_domain(kind, spec.seed, spec.n_real,
                                               spec.n_fake, spec.side));
  } else {
    for (const auto& dir : spec.target_dirs)
      targets.push_back(io::load_dataset_dir(dir, true, spec.side));
  }
  for (auto& t : targets) t = split_domain(t, spec.train_fraction, spec.seed);

  BuiltScenario b;
  b.scenario = make_scenario(source, targets);
  b.eval_domains.push_back(std::move(source));
  for (auto& t : targets) b.eval_domains.push_back(std::move(t));
  return b;
}

inline std::string run_id(const config::ExperimentSpec& spec) {
  return config::config_digest(spec) + "-s" + std::to_string(spec.seed);
}

constexpr const char* kVersion = "biadapt 0.1";

struct RunResult {
  int exit_code = 0;
  std::string error;
  ev::EvalReport baseline;
  ev::EvalReport forward;
  ev::EvalReport backward;
};

namespace detail {

inline void write_manifest(const config::ExperimentSpec& spec,
                           const std::string& path) {
  nlohmann::ordered_json j;
  j["run_id"] = run_id(spec);
  j["version"] = kVersion;
  j["seed"] = spec.seed;
  j["config_digest"] = config::config_digest(spec);
  j["config"] = config::serialize_spec(spec);
  ev::detail::write_text(path, j.dump(2) + "\n");
}

inline void write_error(const std::string& dir, const std::string& kind,
                        const std::string& message) {
  try {
    nlohmann::ordered_json j;
    j["error"] = kind;
    j["message"] = message;
    ev::detail::write_text((fs::path(dir) / "error.json").string(),
                           j.dump(2) + "\n");
  } catch (const Error&) {
    // the error record is best effort; the exit code still reports it
  }
}

inline ev::EvalReport stage_report(nets::ModelState& state,
                                   std::vector<DomainDataset>& domains,
                                   const config::ExperimentSpec& spec,
                                   ev::StageTag stage) {
  ev::EvalReport rep = ev::evaluate_domains(state, domains);
  rep.run_id = run_id(spec);
  rep.stage = stage;
  rep.config_digest = config::config_digest(spec);
  return rep;
}

inline std::vector<ev::HeatmapArtifact> stage_heatmaps(
    nets::ModelState& state, const std::vector<DomainDataset>& domains,
    const config::ExperimentSpec& spec) {
  std::vector<ev::HeatmapArtifact> out;
  if (!spec.heatmaps) return out;
  for (const auto& d : domains)
    for (int i = 0; i < spec.heatmap_count &&
                    i < static_cast<int>(d.test.size());
         ++i) {
      ev::HeatmapArtifact art;
      art.domain_id = d.domain_id;
      art.index = i;
      art.target_class = 1;
      art.map = ev::gradcam_map(state, d.test[i].image, "", 1);
      out.push_back(std::move(art));
    }
  return out;
}

}  // namespace detail

// three-stage run: evaluates the initialized model, the forward-adapted
// model, and the final bi-directionally adapted model, each into its own
// subdirectory. Exit codes: 0 ok, 2 training divergence, 3 I/O failure,
// 4 invalid configuration or other failure.
inline RunResult run_experiment(const config::ExperimentSpec& spec) {
  RunResult rr;
  std::string out = spec.out_dir;
  try {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec)
      throw IoError("run: cannot create " + out + ": " + ec.message());
    spec.validate();
    ev::detail::write_text((fs::path(out) / "config.cfg").string(),
                           config::serialize_spec(spec));
    detail::write_manifest(spec, (fs::path(out) / "manifest.json").string());

    BuiltScenario built = build_scenario(spec);
    train::TrainConfig tc = spec.training;
    tc.seed = spec.seed;

    nets::ModelState state = nets::init_model_state(spec.backbone, spec.seed);
    train::TrainTrace empty_trace;
    if (spec.evaluate) {
      rr.baseline = detail::stage_report(state, built.eval_domains, spec,
                                         ev::StageTag::baseline);
      ev::emit_report(rr.baseline, empty_trace,
                      (fs::path(out) / "baseline").string(), {}, true);
    }

    train::TrainTrace trace =
        train::forward_adaptation_stage(state, built.scenario, tc);
    nets::init_student_from_teacher(state);  // detector reads G(F'(x))
    nets::save_checkpoint((fs::path(out) / "forward.ckpt").string(), state);
    if (spec.evaluate) {
      rr.forward = detail::stage_report(state, built.eval_domains, spec,
                                        ev::StageTag::forward);
      ev::emit_report(rr.forward, trace, (fs::path(out) / "forward").string(),
                      {}, true);
    }

    train::TrainTrace bwd = train::backward_adaptation_stage(
        state, built.scenario, tc, {}, tc.T1);
    train::append_trace(trace, std::move(bwd));
    nets::save_checkpoint((fs::path(out) / "final.ckpt").string(), state);
    if (spec.evaluate) {
      rr.backward = detail::stage_report(state, built.eval_domains, spec,
                                         ev::StageTag::backward);
      auto maps = detail::stage_heatmaps(state, built.eval_domains, spec);
      ev::emit_report(rr.backward, trace, (fs::path(out) / "backward").string(),
                      maps, true);
    }
    return rr;
  } catch (const train::DivergenceError& e) {
    detail::write_error(out, "divergence", e.what());
    rr.exit_code = 2;
    rr.error = e.what();
  } catch (const IoError& e) {
    detail::write_error(out, "io", e.what());
    rr.exit_code = 3;
    rr.error = e.what();
  } catch (const IngestionError& e) {
    detail::write_error(out, "io", e.what());
    rr.exit_code = 3;
    rr.error = e.what();
  } catch (const Error& e) {
    detail::write_error(out, "error", e.what());
    rr.exit_code = 4;
    rr.error = e.what();
  }
  return rr;
}

// ---------------------------------------------------------------------------
// ablation grid
// ---------------------------------------------------------------------------

struct AblationDelta {
  std::string name;
  std::string overlay;  // flat key:value lines applied over the base spec
};

// the standard adaptation-settings grid: three forward-only adapters, the
// two backward objectives without the backward adversarial term, and the
// full bi-directional configuration
inline std::vector<AblationDelta> standard_ablation() {
  return {
      {"baseline", "adapter: none\nalpha2: 0\nt2: 0\n"},
      {"+GRL", "adapter: GRL\nt2: 0\n"},
      {"+MMD", "adapter: MMD\nt2: 0\n"},
      {"+FA", "adapter: FA\nt2: 0\n"},
      {"+SD", "adapter: FA\nalpha4: 0\nbackward_objective: SD\n"},
      {"+Ent", "adapter: FA\nalpha4: 0\nbackward_objective: ENT\n"},
      {"full-BA", ""},
  };
}

struct AblationCell {
  std::string variant;
  bool ok = false;
  bool has_backward = false;  // variant trains a backward stage
  std::string error;
  ev::EvalReport forward;
  ev::EvalReport backward;
};

struct AblationTable {
  std::vector<std::string> domain_ids;  // source first
  std::vector<AblationCell> cells;
};

namespace detail {

inline std::string cell_dirname(const std::string& variant) {
  std::string s;
  for (char c : variant)
    s += (std::isalnum(static_cast<unsigned char>(c)) != 0) ? c : '_';
  return s;
}

inline double find_auc(const ev::EvalReport& rep, const std::string& id) {
  for (const auto& d : rep.domains)
    if (d.id == id) return d.auc;
  throw StateError("ablation: domain " + id + " missing from report");
}

}  // namespace detail

inline AblationTable run_ablation(const config::ExperimentSpec& base,
                                  const std::vector<AblationDelta>& grid) {
  AblationTable table;
  for (const auto& delta : grid) {
    AblationCell cell;
    cell.variant = delta.name;
    try {
      config::ExperimentSpec spec = base;
      config::apply_config_text(spec, delta.overlay, "delta " + delta.name);
      spec.evaluate = true;
      spec.out_dir = (fs::path(base.out_dir) /
                      detail::cell_dirname(delta.name)).string();
      spec.validate();
      cell.has_backward =
          spec.training.T2 > 0 &&
          spec.training.backward_objective != train::BackwardObjective::none;
      RunResult rr = run_experiment(spec);
      if (rr.exit_code != 0) {
        cell.error = rr.error;
      } else {
        cell.ok = true;
        cell.forward = rr.forward;
        cell.backward = rr.backward;
        if (table.domain_ids.empty())
          for (const auto& d : rr.forward.domains)
            table.domain_ids.push_back(d.id);
      }
    } catch (const Error& e) {
      cell.error = e.what();
    }
    table.cells.push_back(std::move(cell));
  }
  return table;
}

// Markdown in the ablation-table layout: methods as rows, per-domain AUC
// columns split by stage; the source column comes first. Failed cells carry
// the marker instead of numbers.
inline std::string ablation_markdown(const AblationTable& t) {
  char buf[64];
  std::string md = "| method |";
  for (std::size_t i = 0; i < t.domain_ids.size(); ++i) {
    md += " " + t.domain_ids[i] + (i == 0 ? " (source)" : " (target)");
    md += " fwd |";
  }
  for (std::size_t i = 0; i < t.domain_ids.size(); ++i) {
    md += " " + t.domain_ids[i] + (i == 0 ? " (source)" : " (target)");
    md += " bwd |";
  }
  md += "\n| --- |";
  for (std::size_t i = 0; i < 2 * t.domain_ids.size(); ++i) md += " ---: |";
  md += "\n";
  for (const auto& c : t.cells) {
    md += "| " + c.variant + " |";
    for (const auto& id : t.domain_ids) {
      if (!c.ok) {
        md += " failed |";
        continue;
      }
      std::snprintf(buf, sizeof buf, " %.4f |", detail::find_auc(c.forward, id));
      md += buf;
    }
    for (const auto& id : t.domain_ids) {
      if (!c.ok) {
        md += " failed |";
        continue;
      }
      if (!c.has_backward) {
        md += " - |";
        continue;
      }
      std::snprintf(buf, sizeof buf, " %.4f |",
                    detail::find_auc(c.backward, id));
      md += buf;
    }
    md += "\n";
  }
  return md;
}

inline std::string ablation_csv(const AblationTable& t) {
  char buf[64];
  std::string csv = "variant,domain,role,forward_auc,backward_auc,status\n";
  for (const auto& c : t.cells) {
    for (std::size_t i = 0; i < t.domain_ids.size(); ++i) {
      const std::string& id = t.domain_ids[i];
      csv += c.variant + "," + id + "," + (i == 0 ? "source" : "target") + ",";
      if (c.ok) {
        std::snprintf(buf, sizeof buf, "%.17g", detail::find_auc(c.forward, id));
        csv += buf;
      }
      csv += ",";
      if (c.ok && c.has_backward) {
        std::snprintf(buf, sizeof buf, "%.17g",
                      detail::find_auc(c.backward, id));
        csv += buf;
      }
      csv += ",";
      csv += c.ok ? "ok" : "failed";
      csv += "\n";
    }
    if (t.domain_ids.empty())
      csv += c.variant + ",,,,," + (c.ok ? "ok" : "failed") + "\n";
  }
  return csv;
}

inline void write_ablation_reports(const AblationTable& t,
                                   const std::string& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec)
    throw IoError("ablation: cannot create " + out_dir + ": " + ec.message());
  ev::detail::write_text((fs::path(out_dir) / "ablation.md").string(),
                         ablation_markdown(t));
  ev::detail::write_text((fs::path(out_dir) / "ablation.csv").string(),
                         ablation_csv(t));
}

}  // namespace biadapt::experiment
