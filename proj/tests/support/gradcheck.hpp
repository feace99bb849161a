#pragma once

// Central-difference gradient checking, independent of the tape internals:
// analytic gradients come from backward(), numeric ones from re-running the
// forward pass with perturbed inputs.

#include <functional>
#include <string>
#include <vector>

#include "biadapt/autodiff.hpp"

namespace testsupport {

using biadapt::Mat;

struct GradCheckReport {
  bool ok = true;
  double worst_abs_diff = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::string where;
};

// build(tape, leaves) must return a 1x1 loss. Inputs are bound as
// differentiable leaves; every element of every input is perturbed.
inline GradCheckReport check_gradients(
    const std::vector<Mat>& inputs,
    const std::function<biadapt::ad::Value(biadapt::ad::Tape&,
                                           std::vector<biadapt::ad::Value>&)>&
        build,
    double h = 1e-3, double rel_tol = 1e-4, double abs_floor = 1e-6) {
  using biadapt::ad::Tape;
  using biadapt::ad::Value;

  auto eval = [&](const std::vector<Mat>& xs) {
    Tape tape;
    std::vector<Value> leaves;
    leaves.reserve(xs.size());
    for (const Mat& m : xs) leaves.push_back(tape.input(m));
    Value loss = build(tape, leaves);
    if (loss.rows() != 1 || loss.cols() != 1)
      throw biadapt::ShapeError("gradcheck: loss must be scalar");
    return loss.val()(0, 0);
  };

  Tape tape;
  std::vector<Value> leaves;
  leaves.reserve(inputs.size());
  for (const Mat& m : inputs) leaves.push_back(tape.leaf(m));
  Value loss = build(tape, leaves);
  tape.backward(loss, Mat::Ones(1, 1));

  GradCheckReport rep;
  std::vector<Mat> work = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Mat analytic = tape.grad(leaves[i].idx);
    if (analytic.size() == 0)
      analytic = Mat::Zero(inputs[i].rows(), inputs[i].cols());
    for (long r = 0; r < inputs[i].rows(); ++r) {
      for (long c = 0; c < inputs[i].cols(); ++c) {
        double orig = work[i](r, c);
        work[i](r, c) = orig + h;
        double fp = eval(work);
        work[i](r, c) = orig - h;
        double fm = eval(work);
        work[i](r, c) = orig;
        double num = (fp - fm) / (2.0 * h);
        double ana = analytic(r, c);
        double diff = std::abs(num - ana);
        double tol = std::max(abs_floor,
                              rel_tol * std::max(std::abs(num), std::abs(ana)));
        if (diff > rep.worst_abs_diff) {
          rep.worst_abs_diff = diff;
          rep.worst_analytic = ana;
          rep.worst_numeric = num;
          rep.where = "input " + std::to_string(i) + " (" + std::to_string(r) +
                      "," + std::to_string(c) + ")";
        }
        if (diff > tol) rep.ok = false;
      }
    }
  }
  return rep;
}

}  // namespace testsupport
