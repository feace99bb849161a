#pragma once

// Frame-level evaluation of the adapted detector: Mann-Whitney AUC per
// domain through the student head H' = G(F'(x)), gradient-weighted
// class-activation heatmaps over backbone activation grids, and run-report
// emission (JSON, CSV trace, Markdown summary, heatmap PNGs).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "biadapt/data.hpp"
#include "biadapt/imageio.hpp"
#include "biadapt/nets.hpp"
#include "biadapt/trainer.hpp"

namespace biadapt::eval {

using biadapt::Mat;
namespace ad = biadapt::ad;

enum class StageTag { baseline, forward, backward };

inline const char* stage_name(StageTag s) {
  switch (s) {
    case StageTag::baseline: return "baseline";
    case StageTag::forward: return "forward";
    case StageTag::backward: return "backward";
  }
  throw StateError("stage_name: bad enum");
}

inline StageTag parse_stage(const std::string& s) {
  if (s == "baseline") return StageTag::baseline;
  if (s == "forward") return StageTag::forward;
  if (s == "backward") return StageTag::backward;
  throw ConfigError("unknown stage tag: " + s);
}

// ---------------------------------------------------------------------------
// AUC
// ---------------------------------------------------------------------------

// Mann-Whitney rank statistic: fraction of (positive, negative) pairs ranked
// correctly, ties counted 1/2. Average ranks are multiples of 1/2, so the
// rank sum is exact in doubles and the result matches pairwise counting
// bitwise.
inline double auc(const std::vector<double>& scores,
                  const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw SizeError("auc: scores and labels length mismatch");
  long pos = 0, neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i]))
      throw MetricError("auc: non-finite score");
    if (labels[i] == 1)
      ++pos;
    else if (labels[i] == 0)
      ++neg;
    else
      throw DomainError("auc: label must be 0 or 1");
  }
  if (pos == 0 || neg == 0)
    throw MetricError("auc: both classes must be present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]])
      ++j;
    double r = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based average rank
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) rank_sum_pos += r;
    i = j + 1;
  }
  double u = rank_sum_pos -
             0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1);
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

// ---------------------------------------------------------------------------
// detector scoring
// ---------------------------------------------------------------------------

inline double fake_prob_from_logits(double real_logit, double fake_logit) {
  double s = fake_logit - real_logit;
  return s >= 0.0 ? 1.0 / (1.0 + std::exp(-s))
                  : std::exp(s) / (1.0 + std::exp(s));
}

// softmax fake-class probability through the student detector, batched so
// parameter matrices are bound once per chunk rather than once per image
inline std::vector<double> fake_scores(nets::ModelState& state,
                                       const std::vector<const Image*>& images,
                                       int batch_cap = 32) {
  if (batch_cap < 1) throw SizeError("fake_scores: batch_cap must be >= 1");
  std::vector<double> out(images.size());
  std::size_t done = 0;
  while (done < images.size()) {
    std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(batch_cap),
                                             images.size() - done);
    std::vector<const Image*> chunk(images.begin() + static_cast<long>(done),
                                    images.begin() + static_cast<long>(done + take));
    ad::Tape t;
    auto f = nets::extractor_forward(t, state.F_prime,
                                     t.input(nets::pack_images(chunk)),
                                     static_cast<int>(take), state.cfg, false);
    Mat logits = nets::classifier_forward(t, state.G, f, false).val();
    for (std::size_t i = 0; i < take; ++i)
      out[done + i] = fake_prob_from_logits(logits(static_cast<long>(i), 0),
                                            logits(static_cast<long>(i), 1));
    done += take;
  }
  return out;
}

// ---------------------------------------------------------------------------
// per-domain evaluation
// ---------------------------------------------------------------------------

struct DomainResult {
  std::string id;
  long n_test = 0;
  double auc = 0.0;

  bool operator==(const DomainResult&) const = default;
};

struct EvalReport {
  std::string run_id;
  StageTag stage = StageTag::baseline;
  std::string config_digest;
  std::vector<DomainResult> domains;  // source first, targets after

  bool operator==(const EvalReport&) const = default;
};

inline EvalReport evaluate_domains(nets::ModelState& state,
                                   const std::vector<DomainDataset>& domains) {
  EvalReport rep;
  rep.domains.reserve(domains.size());
  for (const auto& d : domains) {
    if (!d.labeled)
      throw ConfigError("evaluate: domain " + d.domain_id +
                        " carries no ground-truth labels");
    if (d.test.empty())
      throw SizeError("evaluate: domain " + d.domain_id +
                      " has an empty test split");
    std::vector<const Image*> imgs;
    std::vector<int> labels;
    imgs.reserve(d.test.size());
    labels.reserve(d.test.size());
    for (const auto& s : d.test) {
      imgs.push_back(&s.image);
      labels.push_back(s.label());
    }
    rep.domains.push_back({d.domain_id, static_cast<long>(d.test.size()),
                           auc(fake_scores(state, imgs), labels)});
  }
  return rep;
}

// ---------------------------------------------------------------------------
// class-activation heatmaps
// ---------------------------------------------------------------------------

struct Heatmap {
  Mat values;  // side x side, min-max normalized to [0,1]
  std::string target_layer;
};

inline std::vector<std::string> gradcam_layers(const nets::BackboneConfig& cfg) {
  switch (cfg.kind) {
    case nets::BackboneKind::dual_vit:
      return {"freq_conv", "visual_tokens"};
    case nets::BackboneKind::tiny_vit:
      return {"visual_tokens"};
    case nets::BackboneKind::tiny_cnn:
      return {"conv"};
  }
  throw StateError("gradcam_layers: bad enum");
}

inline std::string default_gradcam_layer(const nets::BackboneConfig& cfg) {
  return gradcam_layers(cfg).front();
}

namespace detail {

// center-aligned bilinear interpolation, edges clamped
inline Mat upsample_bilinear(const Mat& src, int oh, int ow) {
  long ih = src.rows(), iw = src.cols();
  Mat out(oh, ow);
  double sy = static_cast<double>(ih) / oh;
  double sx = static_cast<double>(iw) / ow;
  for (int y = 0; y < oh; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::min(std::max(fy, 0.0), static_cast<double>(ih - 1));
    long y0 = static_cast<long>(fy);
    long y1 = std::min(y0 + 1, ih - 1);
    double wy = fy - static_cast<double>(y0);
    for (int x = 0; x < ow; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::min(std::max(fx, 0.0), static_cast<double>(iw - 1));
      long x0 = static_cast<long>(fx);
      long x1 = std::min(x0 + 1, iw - 1);
      double wx = fx - static_cast<double>(x0);
      double top = (1.0 - wx) * src(y0, x0) + wx * src(y0, x1);
      double bot = (1.0 - wx) * src(y1, x0) + wx * src(y1, x1);
      out(y, x) = (1.0 - wy) * top + wy * bot;
    }
  }
  return out;
}

}  // namespace detail

// channel weights = spatial mean of d(logit_class)/d(activation); map =
// ReLU(weighted channel sum), upsampled to the input size and min-max
// normalized (all zeros when the map is constant, e.g. zero gradients)
inline Heatmap gradcam_map(nets::ModelState& state, const Image& img,
                           std::string target_layer, int target_class) {
  const nets::BackboneConfig& cfg = state.cfg;
  if (target_class != 0 && target_class != 1)
    throw DomainError("gradcam: target class must be 0 or 1");
  if (target_layer.empty()) target_layer = default_gradcam_layer(cfg);
  auto known = gradcam_layers(cfg);
  if (std::find(known.begin(), known.end(), target_layer) == known.end())
    throw ConfigError("gradcam: unknown layer '" + target_layer +
                      "' for backbone " + nets::backbone_name(cfg.kind));
  if (img.h != cfg.side || img.w != cfg.side)
    throw ShapeError("gradcam: image size mismatch");

  ad::Tape t;
  nets::GradTap tap;
  tap.layer = target_layer;
  auto f = nets::extractor_forward(t, state.F_prime, t.input(image_rows(img)),
                                   1, cfg, false, &tap);
  auto logits = nets::classifier_forward(t, state.G, f, false);
  if (!tap.value.valid()) throw StateError("gradcam: tap did not fire");
  Mat seed = Mat::Zero(1, 2);
  seed(0, target_class) = 1.0;
  t.backward(logits, seed);

  const Mat& act = t.value(tap.value.idx);  // (h*w) x channels
  Mat grad = t.grad(tap.value.idx);
  if (grad.size() == 0) grad = Mat::Zero(act.rows(), act.cols());

  Eigen::VectorXd weights = grad.colwise().mean().transpose();
  Eigen::VectorXd cam = (act * weights).cwiseMax(0.0);
  Mat grid(tap.h, tap.w);
  for (int y = 0; y < tap.h; ++y)
    for (int x = 0; x < tap.w; ++x) grid(y, x) = cam(y * tap.w + x);

  Mat up = detail::upsample_bilinear(grid, cfg.side, cfg.side);
  double lo = up.minCoeff(), hi = up.maxCoeff();
  Heatmap hm;
  hm.target_layer = target_layer;
  if (hi > lo)
    hm.values = ((up.array() - lo) / (hi - lo)).matrix();
  else
    hm.values = Mat::Zero(cfg.side, cfg.side);
  return hm;
}

// ---------------------------------------------------------------------------
// report emission
// ---------------------------------------------------------------------------

struct HeatmapArtifact {
  std::string domain_id;
  int index = 0;
  int target_class = 0;
  Heatmap map;
};

namespace detail {

inline void write_text(const std::string& path, const std::string& text) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (f == nullptr) throw IoError("cannot write " + path);
  std::size_t n = std::fwrite(text.data(), 1, text.size(), f);
  int rc = std::fclose(f);
  if (n != text.size() || rc != 0) throw IoError("write failed for " + path);
}

inline std::string read_text(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (f == nullptr) throw IoError("cannot open " + path);
  std::string s;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) s.append(buf, n);
  bool bad = std::ferror(f) != 0;
  std::fclose(f);
  if (bad) throw IoError("read failed for " + path);
  return s;
}

// one row per stage-report; first domain is the source (the paper tables'
// gray column), the rest are adaptation targets
inline std::string summary_markdown(const EvalReport& rep) {
  char buf[64];
  std::string md = "# run " + (rep.run_id.empty() ? "(unnamed)" : rep.run_id);
  md += "\n\nconfig digest: `" + rep.config_digest + "`\n\n| stage |";
  for (std::size_t i = 0; i < rep.domains.size(); ++i)
    md += " " + rep.domains[i].id + (i == 0 ? " (source) |" : " (target) |");
  md += "\n| --- |";
  for (std::size_t i = 0; i < rep.domains.size(); ++i) md += " ---: |";
  md += "\n| ";
  md += stage_name(rep.stage);
  md += " |";
  for (const auto& d : rep.domains) {
    std::snprintf(buf, sizeof buf, " %.4f |", d.auc);
    md += buf;
  }
  md += "\n";
  return md;
}

}  // namespace detail

inline std::string heatmap_filename(const HeatmapArtifact& h) {
  return h.domain_id + "_" + std::to_string(h.index) + "_" +
         std::to_string(h.target_class) + ".png";
}

inline nlohmann::ordered_json report_json(const EvalReport& rep) {
  nlohmann::ordered_json j;
  j["run_id"] = rep.run_id;
  j["stage"] = stage_name(rep.stage);
  j["config_digest"] = rep.config_digest;
  j["domains"] = nlohmann::ordered_json::array();
  for (const auto& d : rep.domains)
    j["domains"].push_back(
        {{"id", d.id}, {"n_test", d.n_test}, {"auc", d.auc}});
  return j;
}

inline std::vector<std::string> emit_report(
    const EvalReport& report, const train::TrainTrace& trace,
    const std::string& out_dir,
    const std::vector<HeatmapArtifact>& heatmaps = {}, bool overwrite = false) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec)
    throw IoError("emit_report: cannot create " + out_dir + ": " +
                  ec.message());

  std::vector<std::string> paths;
  paths.push_back((fs::path(out_dir) / "report.json").string());
  paths.push_back((fs::path(out_dir) / "trace.csv").string());
  paths.push_back((fs::path(out_dir) / "summary.md").string());
  for (const auto& h : heatmaps)
    paths.push_back((fs::path(out_dir) / heatmap_filename(h)).string());
  if (!overwrite)
    for (const auto& p : paths)
      if (fs::exists(p))
        throw IoError("emit_report: refusing to overwrite " + p);

  detail::write_text(paths[0], report_json(report).dump(2) + "\n");
  train::write_trace_csv(paths[1], trace);
  detail::write_text(paths[2], detail::summary_markdown(report));
  for (std::size_t i = 0; i < heatmaps.size(); ++i)
    io::write_png_gray(paths[3 + i], heatmaps[i].map.values);
  return paths;
}

inline EvalReport parse_report(const std::string& path) {
  std::string text = detail::read_text(path);
  try {
    nlohmann::json j = nlohmann::json::parse(text);
    EvalReport rep;
    rep.run_id = j.at("run_id").get<std::string>();
    rep.stage = parse_stage(j.at("stage").get<std::string>());
    rep.config_digest = j.at("config_digest").get<std::string>();
    for (const auto& d : j.at("domains"))
      rep.domains.push_back({d.at("id").get<std::string>(),
                             d.at("n_test").get<long>(),
                             d.at("auc").get<double>()});
    return rep;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("report: malformed " + path + ": " + e.what());
  }
}

}  // namespace biadapt::eval
