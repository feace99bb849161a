#pragma once

// Two-stage adversarial adaptation loop. Forward stage: T1 epochs over
// paired source/target batches alternating (a) extractor+classifier updates
// against a frozen discriminator and (b) discriminator updates on
// recomputed features. Backward stage: T2 epochs of self-distillation from
// the frozen teacher into a student extractor, with the same alternation,
// syncing the teacher from the student at each epoch end.
//
// Sub-update (b) maximizes the discriminator objective (loss_adv); the
// extractor never descends that objective directly: with adapter=FA it
// minimizes the non-saturating confusion form, with adapter=GRL it reaches
// the saturating form through a gradient-reversal layer.

#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "biadapt/data.hpp"
#include "biadapt/losses.hpp"
#include "biadapt/nets.hpp"

namespace biadapt::train {

using biadapt::Mat;
namespace ad = biadapt::ad;
namespace ls = biadapt::losses;

enum class Adapter { FA, GRL, MMD, none };
enum class BackwardObjective { SD, ENT, none };
enum class TeacherUpdate { copy, ema };
enum class Stage { forward, backward };

inline const char* adapter_name(Adapter a) {
  switch (a) {
    case Adapter::FA: return "FA";
    case Adapter::GRL: return "GRL";
    case Adapter::MMD: return "MMD";
    case Adapter::none: return "none";
  }
  throw StateError("adapter_name: bad enum");
}
inline Adapter parse_adapter(const std::string& s) {
  if (s == "FA") return Adapter::FA;
  if (s == "GRL") return Adapter::GRL;
  if (s == "MMD") return Adapter::MMD;
  if (s == "none") return Adapter::none;
  throw ConfigError("unknown adapter: " + s);
}
inline const char* backward_objective_name(BackwardObjective o) {
  switch (o) {
    case BackwardObjective::SD: return "SD";
    case BackwardObjective::ENT: return "ENT";
    case BackwardObjective::none: return "none";
  }
  throw StateError("backward_objective_name: bad enum");
}
inline BackwardObjective parse_backward_objective(const std::string& s) {
  if (s == "SD") return BackwardObjective::SD;
  if (s == "ENT") return BackwardObjective::ENT;
  if (s == "none") return BackwardObjective::none;
  throw ConfigError("unknown backward objective: " + s);
}
inline const char* teacher_update_name(TeacherUpdate t) {
  switch (t) {
    case TeacherUpdate::copy: return "copy";
    case TeacherUpdate::ema: return "ema";
  }
  throw StateError("teacher_update_name: bad enum");
}
inline TeacherUpdate parse_teacher_update(const std::string& s) {
  if (s == "copy") return TeacherUpdate::copy;
  if (s == "ema") return TeacherUpdate::ema;
  throw ConfigError("unknown teacher update: " + s);
}

struct TrainConfig {
  ls::LossWeights weights;
  int T1 = 20;
  int T2 = 10;
  double lr_forward = 0.001;
  double lr_backward = 0.0001;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int batch_source = 32;
  int batch_target = 24;
  std::uint64_t seed = 0;
  Adapter adapter = Adapter::FA;
  BackwardObjective backward_objective = BackwardObjective::SD;
  TeacherUpdate teacher_update = TeacherUpdate::copy;
  double ema_decay = 0.9;
  bool freeze_classifier_backward = false;

  void validate() const {
    weights.validate();
    if (T1 < 0 || T2 < 0) throw ConfigError("train: epochs must be >= 0");
    if (!(lr_forward > 0) || !(lr_backward > 0))
      throw ConfigError("train: learning rates must be positive");
    if (momentum < 0 || momentum >= 1)
      throw ConfigError("train: momentum must be in [0,1)");
    if (weight_decay < 0) throw ConfigError("train: weight decay must be >= 0");
    if (batch_source < 1 || batch_target < 1)
      throw ConfigError("train: batch sizes must be >= 1");
    if (ema_decay < 0 || ema_decay > 1)
      throw ConfigError("train: ema decay must be in [0,1]");
  }

  bool operator==(const TrainConfig&) const = default;

  double stage_adv_weight(Stage s) const {
    return s == Stage::forward ? weights.alpha2 : weights.alpha4;
  }
  bool discriminator_step_enabled(Stage s) const {
    return (adapter == Adapter::FA || adapter == Adapter::GRL) &&
           stage_adv_weight(s) > 0;
  }
};

struct StepRecord {
  int epoch = 0;
  int step = 0;
  double loss_ce = 0.0;
  double loss_adv = 0.0;
  double loss_sd = 0.0;
  double disc_acc = 0.0;
};

struct EpochSnapshot {
  int epoch = 0;
  std::map<std::string, double> metrics;
};

struct TrainTrace {
  std::vector<StepRecord> steps;
  std::vector<EpochSnapshot> snapshots;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& msg, StepRecord rec)
      : Error(msg), record(rec) {}
  StepRecord record;
};

// snapshot hook: receives the global epoch index and read-only state after
// each epoch; returned metrics land in the trace
using SnapshotFn =
    std::function<std::map<std::string, double>(int, const nets::ModelState&)>;

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

// SGD with momentum, velocity update v = mu*v + (g + wd*theta),
// theta -= lr * v
class Sgd {
 public:
  Sgd(std::vector<ad::Tensor*> params, double lr, double momentum,
      double weight_decay)
      : params_(std::move(params)),
        lr_(lr),
        momentum_(momentum),
        wd_(weight_decay) {
    for (auto* p : params_)
      vel_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      ad::Tensor& t = *params_[i];
      Mat g = t.grad + wd_ * t.value;
      vel_[i] = momentum_ * vel_[i] + g;
      t.value -= lr_ * vel_[i];
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

 private:
  std::vector<ad::Tensor*> params_;
  std::vector<Mat> vel_;
  double lr_, momentum_, wd_;
};

inline std::vector<ad::Tensor*> tensor_ptrs(nets::ParamSet& p) {
  std::vector<ad::Tensor*> out;
  for (auto& t : p.tensors) out.push_back(&t);
  return out;
}

inline std::vector<ad::Tensor*> concat_ptrs(std::vector<ad::Tensor*> a,
                                            const std::vector<ad::Tensor*>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// ---------------------------------------------------------------------------
// loaders
// ---------------------------------------------------------------------------

// shuffled index loader delivering ceil(n/batch) batches per pass (last one
// partial); reshuffles independently each time a pass completes
template <typename SampleT>
class Loader {
 public:
  Loader(const std::vector<SampleT>& items, int batch, Rng rng)
      : items_(&items), batch_(batch), rng_(rng) {
    if (items.empty()) throw SizeError("loader: empty dataset");
    if (batch < 1) throw SizeError("loader: batch must be >= 1");
    order_.resize(items.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    rng_.shuffle(order_);
  }

  long batches_per_pass() const {
    return static_cast<long>((items_->size() + static_cast<std::size_t>(batch_)
                              - 1) / static_cast<std::size_t>(batch_));
  }

  std::vector<const SampleT*> next() {
    if (pos_ >= order_.size()) {
      rng_.shuffle(order_);
      pos_ = 0;
    }
    std::size_t take = std::min(static_cast<std::size_t>(batch_),
                                order_.size() - pos_);
    std::vector<const SampleT*> out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i)
      out.push_back(&(*items_)[order_[pos_ + i]]);
    pos_ += take;
    return out;
  }

 private:
  const std::vector<SampleT>* items_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  int batch_;
  Rng rng_;
};

using SourceLoader = Loader<LabeledSample>;
using TargetLoader = Loader<UnlabeledSample>;

// ---------------------------------------------------------------------------
// adversarial step
// ---------------------------------------------------------------------------

struct StepContext {
  Sgd opt_model;
  Sgd opt_disc;
};

namespace detail {

inline Mat pack_labeled(const std::vector<const LabeledSample*>& batch) {
  std::vector<const Image*> imgs;
  imgs.reserve(batch.size());
  for (auto* s : batch) imgs.push_back(&s->image);
  return nets::pack_images(imgs);
}

inline Mat pack_unlabeled(
    const std::vector<const UnlabeledSample*>& batch) {
  std::vector<const Image*> imgs;
  imgs.reserve(batch.size());
  for (auto* s : batch) imgs.push_back(&s->image);
  return nets::pack_images(imgs);
}

inline void check_finite(double v, const char* what, const StepRecord& rec) {
  if (!std::isfinite(v) || std::abs(v) > 1e4)
    throw DivergenceError(std::string("divergence: ") + what, rec);
}

struct DiscEval {
  double adv = 0.0;
  double acc = 0.0;
};

inline DiscEval disc_accuracy(const Mat& p_src, const Mat& p_tgt) {
  DiscEval e;
  long correct = 0;
  for (long i = 0; i < p_src.rows(); ++i)
    if (p_src(i, 0) > 0.5) ++correct;
  for (long i = 0; i < p_tgt.rows(); ++i)
    if (p_tgt(i, 0) <= 0.5) ++correct;
  e.acc = static_cast<double>(correct) /
          static_cast<double>(p_src.rows() + p_tgt.rows());
  return e;
}

}  // namespace detail

// One alternation: (a) extractor+classifier step against frozen Q on the
// stage objective, (b) discriminator ascent on features recomputed after
// (a). The stage extractor is theta_F (forward) or theta_F_prime (backward,
// teacher frozen).
inline StepRecord adversarial_step(
    nets::ModelState& state,
    const std::vector<const LabeledSample*>& src_batch,
    const std::vector<const UnlabeledSample*>& tgt_batch,
    const TrainConfig& cfg, Stage stage, StepContext& ctx, int epoch,
    int step) {
  if (src_batch.empty() || tgt_batch.empty())
    throw SizeError("adversarial_step: empty batch");
  const nets::BackboneConfig& bcfg = state.cfg;
  nets::ParamSet& extractor =
      stage == Stage::forward ? state.F : state.F_prime;
  bool train_g = stage == Stage::forward || !cfg.freeze_classifier_backward;
  long bs = static_cast<long>(src_batch.size());
  long bt = static_cast<long>(tgt_batch.size());

  StepRecord rec;
  rec.epoch = epoch;
  rec.step = step;

  Mat src_rows = detail::pack_labeled(src_batch);
  Mat tgt_rows = detail::pack_unlabeled(tgt_batch);

  // source rows feed CE (forward) and the adapter term; target rows feed
  // distillation (backward) and the adapter term. An unused batch never
  // enters the graph so the inactive-adapter path reduces exactly to
  // supervised training / pure distillation.
  bool adapter_active =
      cfg.adapter != Adapter::none && cfg.stage_adv_weight(stage) > 0;
  bool need_src = stage == Stage::forward || adapter_active;
  bool need_tgt = stage == Stage::backward || adapter_active;

  // teacher predictions for distillation, no gradient
  Mat teacher_logits;
  if (stage == Stage::backward &&
      cfg.backward_objective == BackwardObjective::SD) {
    ad::Tape t;
    auto f = nets::extractor_forward(t, state.F, t.input(tgt_rows),
                                     static_cast<int>(bt), bcfg, false);
    teacher_logits =
        nets::classifier_forward(t, state.G, f, false).val();
  }

  // ---- sub-update (a): extractor + classifier against frozen Q ----
  bool stage_has_terms =
      stage == Stage::forward ||
      cfg.backward_objective != BackwardObjective::none || adapter_active;
  if (stage_has_terms) {
    ad::Tape t;
    ad::Value loss;
    bool has_objective = false;
    auto add_term = [&](const ad::Value& term) {
      loss = has_objective ? ad::add(loss, term) : term;
      has_objective = true;
    };

    ad::Value f_src, f_tgt;
    if (need_src && need_tgt) {
      Mat all_rows(src_rows.rows() + tgt_rows.rows(), 3);
      all_rows.topRows(src_rows.rows()) = src_rows;
      all_rows.bottomRows(tgt_rows.rows()) = tgt_rows;
      auto f_all = nets::extractor_forward(t, extractor, t.input(all_rows),
                                           static_cast<int>(bs + bt), bcfg,
                                           true);
      f_src = ad::slice_rows(f_all, 0, bs);
      f_tgt = ad::slice_rows(f_all, bs, bt);
    } else if (need_src) {
      f_src = nets::extractor_forward(t, extractor, t.input(src_rows),
                                      static_cast<int>(bs), bcfg, true);
    } else {
      f_tgt = nets::extractor_forward(t, extractor, t.input(tgt_rows),
                                      static_cast<int>(bt), bcfg, true);
    }

    if (stage == Stage::forward) {
      std::vector<int> labels;
      labels.reserve(src_batch.size());
      for (auto* s : src_batch) labels.push_back(s->label());
      auto logits = nets::classifier_forward(t, state.G, f_src, train_g);
      auto ce = ls::ce_value(logits, labels);
      rec.loss_ce = ce.val()(0, 0);
      if (cfg.weights.alpha1 > 0)
        add_term(ad::affine(ce, cfg.weights.alpha1, 0.0));
    } else if (cfg.backward_objective == BackwardObjective::SD) {
      auto logits = nets::classifier_forward(t, state.G, f_tgt, train_g);
      auto sd = ls::sd_value(teacher_logits, logits, cfg.weights.tau);
      rec.loss_sd = sd.val()(0, 0);
      if (cfg.weights.alpha3 > 0)
        add_term(ad::affine(sd, cfg.weights.alpha3, 0.0));
    } else if (cfg.backward_objective == BackwardObjective::ENT) {
      auto logits = nets::classifier_forward(t, state.G, f_tgt, train_g);
      auto ent = ls::entropy_value(logits);
      rec.loss_sd = ent.val()(0, 0);
      if (cfg.weights.alpha3 > 0)
        add_term(ad::affine(ent, cfg.weights.alpha3, 0.0));
    }

    if (adapter_active) {
      double aw = cfg.stage_adv_weight(stage);
      if (cfg.adapter == Adapter::FA) {
        auto p_s = nets::discriminator_forward(t, state.Q, f_src, false);
        auto p_t = nets::discriminator_forward(t, state.Q, f_tgt, false);
        add_term(ad::affine(ls::confusion_value(p_s, p_t), aw, 0.0));
      } else if (cfg.adapter == Adapter::GRL) {
        auto p_s = nets::discriminator_forward(
            t, state.Q, ls::gradient_reversal(f_src, 1.0), false);
        auto p_t = nets::discriminator_forward(
            t, state.Q, ls::gradient_reversal(f_tgt, 1.0), false);
        add_term(ad::affine(ls::adv_value(p_s, p_t), -aw, 0.0));
      } else if (cfg.adapter == Adapter::MMD) {
        add_term(ad::affine(ls::mmd_value(f_src, f_tgt), aw, 0.0));
      }
    }

    if (has_objective) {
      detail::check_finite(loss.val()(0, 0), "stage objective", rec);
      ctx.opt_model.zero_grad();
      t.backward(loss);
      ctx.opt_model.step();
    }
  }

  // ---- sub-update (b): discriminator ascent on recomputed features ----
  if (cfg.discriminator_step_enabled(stage)) {
    ad::Tape t;
    Mat all_rows(src_rows.rows() + tgt_rows.rows(), 3);
    all_rows.topRows(src_rows.rows()) = src_rows;
    all_rows.bottomRows(tgt_rows.rows()) = tgt_rows;
    auto f_all = nets::extractor_forward(t, extractor, t.input(all_rows),
                                         static_cast<int>(bs + bt), bcfg,
                                         false);
    auto f_src = ad::slice_rows(f_all, 0, bs);
    auto f_tgt = ad::slice_rows(f_all, bs, bt);
    auto p_s = nets::discriminator_forward(t, state.Q, f_src, true);
    auto p_t = nets::discriminator_forward(t, state.Q, f_tgt, true);
    auto adv = ls::adv_value(p_s, p_t);
    rec.loss_adv = adv.val()(0, 0);
    rec.disc_acc = detail::disc_accuracy(p_s.val(), p_t.val()).acc;
    detail::check_finite(rec.loss_adv, "adversarial objective", rec);
    ctx.opt_disc.zero_grad();
    t.backward(ad::neg(adv));
    ctx.opt_disc.step();
  }

  detail::check_finite(rec.loss_ce, "ce", rec);
  detail::check_finite(rec.loss_sd, "distillation", rec);
  return rec;
}

// convenience overload with throwaway optimizer state (single-step tests)
inline StepRecord adversarial_step(
    nets::ModelState& state,
    const std::vector<const LabeledSample*>& src_batch,
    const std::vector<const UnlabeledSample*>& tgt_batch,
    const TrainConfig& cfg, Stage stage) {
  nets::ParamSet& extractor =
      stage == Stage::forward ? state.F : state.F_prime;
  double lr = stage == Stage::forward ? cfg.lr_forward : cfg.lr_backward;
  std::vector<ad::Tensor*> model_params = tensor_ptrs(extractor);
  if (stage == Stage::forward || !cfg.freeze_classifier_backward)
    model_params = concat_ptrs(std::move(model_params), tensor_ptrs(state.G));
  StepContext ctx{
      Sgd(std::move(model_params), lr, cfg.momentum, cfg.weight_decay),
      Sgd(tensor_ptrs(state.Q), lr, cfg.momentum, cfg.weight_decay)};
  return adversarial_step(state, src_batch, tgt_batch, cfg, stage, ctx, 0, 0);
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

inline void teacher_sync(nets::ModelState& state, const TrainConfig& cfg) {
  if (state.F.tensors.size() != state.F_prime.tensors.size())
    throw StateError("teacher_sync: parameter set size mismatch");
  for (std::size_t i = 0; i < state.F.tensors.size(); ++i) {
    ad::Tensor& teacher = state.F.tensors[i];
    ad::Tensor& student = state.F_prime.tensors[i];
    if (teacher.name != student.name ||
        teacher.value.rows() != student.value.rows() ||
        teacher.value.cols() != student.value.cols())
      throw StateError("teacher_sync: tensor mismatch at " + teacher.name);
    if (cfg.teacher_update == TeacherUpdate::copy)
      teacher.value = student.value;
    else
      teacher.value =
          cfg.ema_decay * teacher.value + (1.0 - cfg.ema_decay) * student.value;
  }
}

inline TrainTrace forward_adaptation_stage(nets::ModelState& state,
                                           const Scenario& scenario,
                                           const TrainConfig& cfg,
                                           const SnapshotFn& snapshot = {},
                                           int epoch_base = 0) {
  cfg.validate();
  TrainTrace trace;
  if (cfg.T1 == 0) return trace;
  if (scenario.source.train.empty())
    throw SizeError("forward stage: source has no training split");
  if (scenario.target_train_pool.empty())
    throw SizeError("forward stage: target pool is empty");

  Rng root(cfg.seed);
  SourceLoader src(scenario.source.train, cfg.batch_source,
                   root.fork("loader:forward:source"));
  TargetLoader tgt(scenario.target_train_pool, cfg.batch_target,
                   root.fork("loader:forward:target"));
  long steps = std::max(src.batches_per_pass(), tgt.batches_per_pass());

  StepContext ctx{
      Sgd(concat_ptrs(tensor_ptrs(state.F), tensor_ptrs(state.G)),
          cfg.lr_forward, cfg.momentum, cfg.weight_decay),
      Sgd(tensor_ptrs(state.Q), cfg.lr_forward, cfg.momentum,
          cfg.weight_decay)};

  for (int e = 0; e < cfg.T1; ++e) {
    for (long s = 0; s < steps; ++s) {
      trace.steps.push_back(adversarial_step(state, src.next(), tgt.next(),
                                             cfg, Stage::forward, ctx,
                                             epoch_base + e,
                                             static_cast<int>(s)));
    }
    if (snapshot)
      trace.snapshots.push_back({epoch_base + e,
                                 snapshot(epoch_base + e, state)});
  }
  return trace;
}

inline TrainTrace backward_adaptation_stage(nets::ModelState& state,
                                            const Scenario& scenario,
                                            const TrainConfig& cfg,
                                            const SnapshotFn& snapshot = {},
                                            int epoch_base = 0) {
  cfg.validate();
  nets::init_student_from_teacher(state);
  TrainTrace trace;
  if (cfg.T2 == 0) return trace;
  if (scenario.source.train.empty())
    throw SizeError("backward stage: source has no training split");
  if (scenario.target_train_pool.empty())
    throw SizeError("backward stage: target pool is empty");

  Rng root(cfg.seed);
  SourceLoader src(scenario.source.train, cfg.batch_source,
                   root.fork("loader:backward:source"));
  TargetLoader tgt(scenario.target_train_pool, cfg.batch_target,
                   root.fork("loader:backward:target"));
  long steps = tgt.batches_per_pass();

  std::vector<ad::Tensor*> model_params = tensor_ptrs(state.F_prime);
  if (!cfg.freeze_classifier_backward)
    model_params = concat_ptrs(std::move(model_params),
                               tensor_ptrs(state.G));
  StepContext ctx{Sgd(model_params, cfg.lr_backward, cfg.momentum,
                      cfg.weight_decay),
                  Sgd(tensor_ptrs(state.Q), cfg.lr_backward, cfg.momentum,
                      cfg.weight_decay)};

  for (int e = 0; e < cfg.T2; ++e) {
    for (long s = 0; s < steps; ++s) {
      trace.steps.push_back(adversarial_step(state, src.next(), tgt.next(),
                                             cfg, Stage::backward, ctx,
                                             epoch_base + e,
                                             static_cast<int>(s)));
    }
    teacher_sync(state, cfg);
    if (snapshot)
      trace.snapshots.push_back({epoch_base + e,
                                 snapshot(epoch_base + e, state)});
  }
  return trace;
}

// ---------------------------------------------------------------------------
// full loop and trace export
// ---------------------------------------------------------------------------

struct TrainResult {
  nets::ModelState state;
  TrainTrace trace;
};

inline void append_trace(TrainTrace& into, TrainTrace&& from) {
  into.steps.insert(into.steps.end(), from.steps.begin(), from.steps.end());
  into.snapshots.insert(into.snapshots.end(), from.snapshots.begin(),
                        from.snapshots.end());
}

// Algorithm: forward adaptation of the teacher, then student distillation
// with teacher sync. The deployed detector is classifier(G) on student
// features (F_prime). Checkpoints land in checkpoint_dir when given; a
// partial checkpoint survives a failed backward stage.
inline TrainResult train(const Scenario& scenario,
                         const nets::BackboneConfig& bcfg,
                         const TrainConfig& cfg,
                         const std::string& checkpoint_dir = "",
                         const SnapshotFn& snapshot = {}) {
  cfg.validate();
  bcfg.validate();
  TrainResult r;
  r.state = nets::init_model_state(bcfg, cfg.seed);
  append_trace(r.trace,
               forward_adaptation_stage(r.state, scenario, cfg, snapshot, 0));
  if (!checkpoint_dir.empty())
    nets::save_checkpoint(checkpoint_dir + "/forward.ckpt", r.state);
  append_trace(r.trace, backward_adaptation_stage(r.state, scenario, cfg,
                                                  snapshot, cfg.T1));
  if (!checkpoint_dir.empty())
    nets::save_checkpoint(checkpoint_dir + "/final.ckpt", r.state);
  return r;
}

inline void write_trace_csv(const std::string& path, const TrainTrace& trace) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (f == nullptr) throw IoError("trace: cannot open " + path);
  std::fputs("epoch,step,loss_ce,loss_adv,loss_sd,disc_acc\n", f);
  for (const auto& r : trace.steps)
    std::fprintf(f, "%d,%d,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.step,
                 r.loss_ce, r.loss_adv, r.loss_sd, r.disc_acc);
  if (std::fclose(f) != 0) throw IoError("trace: write failed");
}

}  // namespace biadapt::train
