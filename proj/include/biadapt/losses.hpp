#pragma once

// Training objectives. Each loss has a tape form (composable, differentiable)
// and a plain scalar form for reporting and tests. All reductions are batch
// means; probabilities are clamped to [1e-7, 1-1e-7] before any log.
//
// Adversarial sign convention: loss_adv is the discriminator's objective
// (maximized over theta_Q). The extractor minimizes the non-saturating
// confusion form instead of descending loss_adv directly, so the combined
// stage objectives report the adversarial term negated.

#include <algorithm>
#include <vector>

#include "biadapt/autodiff.hpp"

namespace biadapt::losses {

using biadapt::Mat;
namespace ad = biadapt::ad;

constexpr double kProbClamp = 1e-7;

struct LossValue {
  double value = 0.0;
  long batch_size = 0;
};

struct LossWeights {
  double alpha1 = 1.0;
  double alpha2 = 1.0;
  double alpha3 = 1.0;
  double alpha4 = 1.0;
  double tau = 0.5;

  void validate() const {
    if (alpha1 < 0 || alpha2 < 0 || alpha3 < 0 || alpha4 < 0)
      throw DomainError("loss weights must be non-negative");
    if (!(tau > 0)) throw DomainError("tau must be positive");
  }

  bool operator==(const LossWeights&) const = default;
};

// ---------------------------------------------------------------------------
// tape forms
// ---------------------------------------------------------------------------

inline ad::Value ce_value(const ad::Value& logits,
                          const std::vector<int>& labels) {
  if (logits.cols() != 2) throw ShapeError("ce: expected 2 logits per sample");
  for (int y : labels)
    if (y != 0 && y != 1) throw DomainError("ce: label must be 0 or 1");
  return ad::ce_with_logits(logits, labels);
}

// discriminator log-likelihood: mean log p over source + mean log(1-p) over
// target
inline ad::Value adv_value(const ad::Value& p_src, const ad::Value& p_tgt) {
  if (p_src.rows() == 0 || p_tgt.rows() == 0)
    throw SizeError("adv: empty batch");
  auto ps = ad::clamp(p_src, kProbClamp, 1.0 - kProbClamp);
  auto pt = ad::clamp(p_tgt, kProbClamp, 1.0 - kProbClamp);
  auto src_term = ad::mean_all(ad::log_op(ps));
  auto tgt_term = ad::mean_all(ad::log_op(ad::affine(pt, -1.0, 1.0)));
  return ad::add(src_term, tgt_term);
}

// non-saturating confusion objective minimized by the extractor
inline ad::Value confusion_value(const ad::Value& p_src,
                                 const ad::Value& p_tgt) {
  if (p_src.rows() == 0 || p_tgt.rows() == 0)
    throw SizeError("confusion: empty batch");
  auto ps = ad::clamp(p_src, kProbClamp, 1.0 - kProbClamp);
  auto pt = ad::clamp(p_tgt, kProbClamp, 1.0 - kProbClamp);
  auto tgt_term = ad::mean_all(ad::log_op(pt));
  auto src_term = ad::mean_all(ad::log_op(ad::affine(ps, -1.0, 1.0)));
  return ad::neg(ad::add(tgt_term, src_term));
}

inline Mat distill_prob(const Mat& logits, double tau) {
  if (!(tau > 0)) throw DomainError("distill_prob: tau must be positive");
  return ad::detail::softmax_rows_mat(logits / tau);
}

// teacher probabilities are constants; gradient flows through the student only
inline ad::Value sd_value(const Mat& teacher_logits,
                          const ad::Value& student_logits, double tau) {
  if (!(tau > 0)) throw DomainError("sd: tau must be positive");
  if (teacher_logits.rows() != student_logits.rows() ||
      teacher_logits.cols() != student_logits.cols())
    throw SizeError("sd: teacher/student batch mismatch");
  long b = teacher_logits.rows();
  if (b == 0) throw SizeError("sd: empty batch");
  Mat p_teacher = distill_prob(teacher_logits, tau);
  auto log_p_student =
      ad::log_softmax_rows(ad::affine(student_logits, 1.0 / tau, 0.0));
  auto crossed = ad::mul_const(log_p_student, p_teacher);
  return ad::affine(ad::sum_all(crossed), -1.0 / static_cast<double>(b), 0.0);
}

inline ad::Value entropy_value(const ad::Value& logits) {
  long b = logits.rows();
  if (b == 0) throw SizeError("entropy: empty batch");
  auto p = ad::softmax_rows(logits);
  auto lp = ad::log_softmax_rows(logits);
  return ad::affine(ad::sum_all(ad::mul(p, lp)),
                    -1.0 / static_cast<double>(b), 0.0);
}

inline std::vector<double> mmd_bandwidths(const Mat& fsrc, const Mat& ftgt) {
  long n = fsrc.rows(), m = ftgt.rows();
  std::vector<double> dists;
  dists.reserve(static_cast<std::size_t>((n + m) * (n + m - 1) / 2));
  Mat pool(n + m, fsrc.cols());
  pool.topRows(n) = fsrc;
  pool.bottomRows(m) = ftgt;
  for (long i = 0; i < n + m; ++i)
    for (long j = i + 1; j < n + m; ++j)
      dists.push_back((pool.row(i) - pool.row(j)).norm());
  std::sort(dists.begin(), dists.end());
  double median;
  std::size_t k = dists.size();
  if (k == 0)
    median = 1.0;
  else if (k % 2 == 1)
    median = dists[k / 2];
  else
    median = 0.5 * (dists[k / 2 - 1] + dists[k / 2]);
  if (median < 1e-12) median = 1.0;
  return {0.5 * median, median, 2.0 * median};
}

// biased squared MMD with a Gaussian kernel mixture; bandwidths are treated
// as constants of the gradient
inline ad::Value mmd_value(const ad::Value& fsrc, const ad::Value& ftgt,
                           const std::vector<double>& bandwidths) {
  if (fsrc.rows() < 2 || ftgt.rows() < 2)
    throw SizeError("mmd: batch sizes must be >= 2");
  if (bandwidths.empty()) throw DomainError("mmd: no bandwidths");
  auto dss = ad::pairwise_sqdist(fsrc, fsrc);
  auto dtt = ad::pairwise_sqdist(ftgt, ftgt);
  auto dst = ad::pairwise_sqdist(fsrc, ftgt);
  ad::Value total;
  bool first = true;
  for (double sigma : bandwidths) {
    double g = -1.0 / (2.0 * sigma * sigma);
    auto kss = ad::mean_all(ad::exp_op(ad::affine(dss, g, 0.0)));
    auto ktt = ad::mean_all(ad::exp_op(ad::affine(dtt, g, 0.0)));
    auto kst = ad::mean_all(ad::exp_op(ad::affine(dst, g, 0.0)));
    auto term = ad::add(ad::add(kss, ktt), ad::affine(kst, -2.0, 0.0));
    total = first ? term : ad::add(total, term);
    first = false;
  }
  return ad::affine(total, 1.0 / static_cast<double>(bandwidths.size()), 0.0);
}

inline ad::Value mmd_value(const ad::Value& fsrc, const ad::Value& ftgt) {
  return mmd_value(fsrc, ftgt, mmd_bandwidths(fsrc.val(), ftgt.val()));
}

inline ad::Value gradient_reversal(const ad::Value& f, double lambda) {
  return ad::grad_reverse(f, lambda);
}

// ---------------------------------------------------------------------------
// scalar forms
// ---------------------------------------------------------------------------

namespace detail {

inline Mat column(const std::vector<double>& v) {
  Mat m(static_cast<long>(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i)
    m(static_cast<long>(i), 0) = v[i];
  return m;
}

}  // namespace detail

inline LossValue loss_ce(const Mat& logits, const std::vector<int>& labels) {
  ad::Tape t;
  auto v = ce_value(t.input(logits), labels);
  return {v.val()(0, 0), logits.rows()};
}

inline LossValue loss_adv(const std::vector<double>& p_src,
                          const std::vector<double>& p_tgt) {
  ad::Tape t;
  auto v = adv_value(t.input(detail::column(p_src)),
                     t.input(detail::column(p_tgt)));
  return {v.val()(0, 0), static_cast<long>(p_src.size() + p_tgt.size())};
}

// forward-stage objective: the ce term plus the adversarial term under the
// confusion sign
inline LossValue loss_fas(const LossValue& ce, const LossValue& adv,
                          const LossWeights& w) {
  w.validate();
  return {w.alpha1 * ce.value - w.alpha2 * adv.value, ce.batch_size};
}

inline LossValue loss_sd(const Mat& teacher_logits, const Mat& student_logits,
                         double tau) {
  ad::Tape t;
  auto v = sd_value(teacher_logits, t.input(student_logits), tau);
  return {v.val()(0, 0), teacher_logits.rows()};
}

// backward-stage objective: self-distillation plus the adversarial term,
// same sign convention
inline LossValue loss_bas(const LossValue& sd, const LossValue& adv,
                          const LossWeights& w) {
  w.validate();
  return {w.alpha3 * sd.value - w.alpha4 * adv.value, sd.batch_size};
}

inline LossValue loss_mmd(const Mat& fsrc, const Mat& ftgt) {
  ad::Tape t;
  auto v = mmd_value(t.input(fsrc), t.input(ftgt));
  return {v.val()(0, 0), fsrc.rows() + ftgt.rows()};
}

inline LossValue loss_entropy_min(const Mat& logits) {
  ad::Tape t;
  auto v = entropy_value(t.input(logits));
  return {v.val()(0, 0), logits.rows()};
}

}  // namespace biadapt::losses
