// biadapt: generate synthetic forgery domains, train the bi-directional
// adaptation pipeline, evaluate checkpoints, run ablation grids, and render
// classifier attention heatmaps. BIADAPT_THREADS caps worker parallelism.

#include <CLI11.hpp>

#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "biadapt/experiment.hpp"

using namespace biadapt;
namespace cfg = biadapt::config;
namespace xp = biadapt::experiment;
namespace ev = biadapt::eval;
namespace fs = std::filesystem;

namespace {

struct CommonOpts {
  std::string config;
  std::string out;
  std::string preset = "desk";
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* sub, CommonOpts& o) {
  sub->add_option("--config", o.config, "experiment config file");
  sub->add_option("--out", o.out, "output directory (overrides the config)");
  sub->add_option("--seed", o.seed, "run seed (overrides the config)")
      ->each([&o](const std::string&) { o.seed_set = true; });
  sub->add_option("--preset", o.preset, "defaults for unspecified keys")
      ->check(CLI::IsMember({"desk", "paper-parity"}));
}

cfg::ExperimentSpec resolve_spec(const CommonOpts& o) {
  cfg::ExperimentSpec spec = o.config.empty()
                                 ? cfg::preset_spec(o.preset)
                                 : cfg::parse_config(o.config, o.preset);
  if (o.seed_set) spec.seed = o.seed;
  if (!o.out.empty()) spec.out_dir = o.out;
  spec.validate();
  return spec;
}

void print_report(const ev::EvalReport& rep) {
  std::printf("%-8s ", ev::stage_name(rep.stage));
  for (std::size_t i = 0; i < rep.domains.size(); ++i)
    std::printf("%s%s %.4f", i == 0 ? "" : " | ", rep.domains[i].id.c_str(),
                rep.domains[i].auc);
  std::printf("\n");
}

// exit codes shared with run_experiment: 2 divergence, 3 I/O, 4 bad config
int guarded(const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const train::DivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const IngestionError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
}

int cmd_generate(const CommonOpts& o) {
  cfg::ExperimentSpec spec = resolve_spec(o);
  if (!spec.generated_source() || !spec.generated_targets())
    throw ConfigError("generate: spec points at existing dataset directories");
  std::vector<std::string> kinds{spec.source_kind};
  for (const auto& k : spec.target_kinds)
    if (std::find(kinds.begin(), kinds.end(), k) == kinds.end())
      kinds.push_back(k);
  for (const auto& kind : kinds) {
    DomainDataset d = synth::generate_domain(kind, spec.seed, spec.n_real,
                                             spec.n_fake, spec.side);
    std::string dir = (fs::path(spec.out_dir) / kind).string();
    io::export_dataset_dir(d, dir);
    std::printf("wrote %s (%d real + %d fake)\n", dir.c_str(), spec.n_real,
                spec.n_fake);
  }
  return 0;
}

int cmd_train(const CommonOpts& o) {
  cfg::ExperimentSpec spec = resolve_spec(o);
  xp::RunResult rr = xp::run_experiment(spec);
  if (rr.exit_code != 0) {
    std::fprintf(stderr, "error: %s\n", rr.error.c_str());
    return rr.exit_code;
  }
  std::printf("run %s\n", xp::run_id(spec).c_str());
  if (spec.evaluate) {
    print_report(rr.baseline);
    print_report(rr.forward);
    print_report(rr.backward);
  }
  std::printf("wrote %s\n", spec.out_dir.c_str());
  return 0;
}

int cmd_evaluate(const CommonOpts& o, const std::string& checkpoint,
                 const std::string& stage) {
  cfg::ExperimentSpec spec = resolve_spec(o);
  std::string ckpt = checkpoint.empty()
                         ? (fs::path(spec.out_dir) / "final.ckpt").string()
                         : checkpoint;
  nets::ModelState state = nets::load_checkpoint(ckpt);
  xp::BuiltScenario built = xp::build_scenario(spec);
  ev::EvalReport rep = ev::evaluate_domains(state, built.eval_domains);
  rep.run_id = xp::run_id(spec);
  rep.stage = ev::parse_stage(stage);
  rep.config_digest = cfg::config_digest(spec);
  std::string dir = (fs::path(spec.out_dir) / "evaluate").string();
  ev::emit_report(rep, {}, dir, {}, true);
  print_report(rep);
  std::printf("wrote %s\n", dir.c_str());
  return 0;
}

int cmd_ablate(const CommonOpts& o) {
  cfg::ExperimentSpec spec = resolve_spec(o);
  xp::AblationTable table = xp::run_ablation(spec, xp::standard_ablation());
  xp::write_ablation_reports(table, spec.out_dir);
  std::printf("%s", xp::ablation_markdown(table).c_str());
  std::printf("wrote %s\n",
              (fs::path(spec.out_dir) / "ablation.md").string().c_str());
  int failed = 0;
  for (const auto& c : table.cells)
    if (!c.ok) {
      std::fprintf(stderr, "error: variant %s failed: %s\n", c.variant.c_str(),
                   c.error.c_str());
      ++failed;
    }
  return failed == 0 ? 0 : 5;
}

int cmd_gradcam(const CommonOpts& o, const std::string& checkpoint,
                const std::string& layer, int target_class, int count) {
  cfg::ExperimentSpec spec = resolve_spec(o);
  std::string ckpt = checkpoint.empty()
                         ? (fs::path(spec.out_dir) / "final.ckpt").string()
                         : checkpoint;
  nets::ModelState state = nets::load_checkpoint(ckpt);
  xp::BuiltScenario built = xp::build_scenario(spec);
  std::string dir = (fs::path(spec.out_dir) / "gradcam").string();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("gradcam: cannot create " + dir + ": " + ec.message());
  for (const auto& d : built.eval_domains)
    for (int i = 0; i < count && i < static_cast<int>(d.test.size()); ++i) {
      ev::HeatmapArtifact art;
      art.domain_id = d.domain_id;
      art.index = i;
      art.target_class = target_class;
      art.map = ev::gradcam_map(state, d.test[i].image, layer, target_class);
      std::string path = (fs::path(dir) / ev::heatmap_filename(art)).string();
      io::write_png_gray(path, art.map.values);
      std::printf("wrote %s\n", path.c_str());
    }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "bi-directional unsupervised domain adaptation for forgery detection"};
  app.require_subcommand(1);
  app.footer(
      "exit codes: 0 ok, 2 training divergence, 3 I/O failure, 4 invalid\n"
      "configuration, 5 ablation cell failure. BIADAPT_THREADS caps worker\n"
      "threads.");

  CommonOpts gen_o, train_o, eval_o, abl_o, cam_o;
  std::string eval_ckpt, eval_stage = "backward";
  std::string cam_ckpt, cam_layer;
  int cam_class = 1, cam_count = 4;

  CLI::App* gen = app.add_subcommand(
      "generate", "export the spec's synthetic domains as image directories");
  add_common(gen, gen_o);

  CLI::App* tr = app.add_subcommand(
      "train", "run the three-stage experiment and write all artifacts");
  add_common(tr, train_o);

  CLI::App* evc = app.add_subcommand(
      "evaluate", "score a checkpoint on the spec's domains");
  add_common(evc, eval_o);
  evc->add_option("--checkpoint", eval_ckpt,
                  "checkpoint to score (default: <out>/final.ckpt)");
  evc->add_option("--stage", eval_stage, "stage tag for the report")
      ->check(CLI::IsMember({"baseline", "forward", "backward"}));

  CLI::App* abl = app.add_subcommand(
      "ablate", "run the standard adaptation-settings grid");
  add_common(abl, abl_o);

  CLI::App* cam = app.add_subcommand(
      "gradcam", "render attention heatmaps for test images");
  add_common(cam, cam_o);
  cam->add_option("--checkpoint", cam_ckpt,
                  "checkpoint to inspect (default: <out>/final.ckpt)");
  cam->add_option("--layer", cam_layer, "tapped activation (default: per backbone)");
  cam->add_option("--class", cam_class, "target class, 0 real / 1 fake")
      ->check(CLI::Range(0, 1));
  cam->add_option("--count", cam_count, "images per domain")
      ->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) return guarded([&] { return cmd_generate(gen_o); });
  if (tr->parsed()) return guarded([&] { return cmd_train(train_o); });
  if (evc->parsed())
    return guarded([&] { return cmd_evaluate(eval_o, eval_ckpt, eval_stage); });
  if (abl->parsed()) return guarded([&] { return cmd_ablate(abl_o); });
  if (cam->parsed())
    return guarded(
        [&] { return cmd_gradcam(cam_o, cam_ckpt, cam_layer, cam_class,
                                 cam_count); });
  return 0;
}
