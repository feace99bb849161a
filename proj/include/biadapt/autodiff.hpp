#pragma once

// Tape based reverse-mode autodiff over Eigen::MatrixXd. One Tape per
// optimization step; parameters live outside the tape in Tensor objects and
// receive accumulated gradients when backward() finishes.

#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "biadapt/common.hpp"

namespace biadapt::ad {

using biadapt::Mat;

struct Tensor {
  std::string name;
  Mat value;
  Mat grad;

  Tensor() = default;
  Tensor(std::string n, Mat v)
      : name(std::move(n)), value(std::move(v)),
        grad(Mat::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(); }
};

class Tape;

struct Value {
  Tape* tape = nullptr;
  int idx = -1;

  bool valid() const { return tape != nullptr && idx >= 0; }
  const Mat& val() const;
  long rows() const { return val().rows(); }
  long cols() const { return val().cols(); }
};

class Tape {
 public:
  using Backprop = std::function<void(Tape&, const Mat&)>;

  struct Node {
    Mat value;
    Mat grad;  // allocated lazily during backward
    bool needs_grad = false;
    Backprop backprop;
    Tensor* param = nullptr;
  };

  Value input(Mat v) { return push(std::move(v), false, nullptr, nullptr); }

  // differentiable leaf that is not a parameter (e.g. attribution targets)
  Value leaf(Mat v) { return push(std::move(v), true, nullptr, nullptr); }

  Value param(Tensor& t, bool trainable = true) {
    return push(t.value, trainable, nullptr, trainable ? &t : nullptr);
  }

  Value push(Mat v, bool needs_grad, Backprop bp, Tensor* param = nullptr) {
    Node nd;
    nd.value = std::move(v);
    nd.needs_grad = needs_grad;
    nd.backprop = std::move(bp);
    nd.param = param;
    nodes_.push_back(std::move(nd));
    if (param != nullptr) param_nodes_.push_back(static_cast<int>(size()) - 1);
    return Value{this, static_cast<int>(size()) - 1};
  }

  std::size_t size() const { return nodes_.size(); }

  const Mat& value(int idx) const { return nodes_[check(idx)].value; }
  const Mat& grad(int idx) const { return nodes_[check(idx)].grad; }
  bool needs_grad(int idx) const { return nodes_[check(idx)].needs_grad; }

  void accum(int idx, const Mat& g) {
    Node& nd = nodes_[check(idx)];
    if (!nd.needs_grad) return;
    if (nd.grad.size() == 0)
      nd.grad = g;
    else
      nd.grad += g;
  }

  void backward(Value root, const Mat& seed) {
    if (root.tape != this) throw StateError("backward: value from another tape");
    Node& r = nodes_[check(root.idx)];
    if (seed.rows() != r.value.rows() || seed.cols() != r.value.cols())
      throw ShapeError("backward: seed shape mismatch");
    if (!r.needs_grad)
      throw StateError("backward: root does not require gradients");
    accum(root.idx, seed);
    for (int i = root.idx; i >= 0; --i) {
      Node& nd = nodes_[static_cast<std::size_t>(i)];
      if (!nd.needs_grad || nd.grad.size() == 0 || !nd.backprop) continue;
      nd.backprop(*this, nd.grad);
    }
    for (int p : param_nodes_) {
      Node& nd = nodes_[static_cast<std::size_t>(p)];
      if (nd.param != nullptr && nd.grad.size() != 0) nd.param->grad += nd.grad;
    }
  }

  void backward(Value root) {
    backward(root, Mat::Ones(root.rows(), root.cols()));
  }

 private:
  std::size_t check(int idx) const {
    if (idx < 0 || static_cast<std::size_t>(idx) >= nodes_.size())
      throw StateError("tape: node index out of range");
    return static_cast<std::size_t>(idx);
  }

  std::deque<Node> nodes_;
  std::vector<int> param_nodes_;
};

inline const Mat& Value::val() const {
  if (!valid()) throw StateError("value: unbound handle");
  return tape->value(idx);
}

namespace detail {

inline Tape& same_tape(const Value& a, const Value& b) {
  if (a.tape == nullptr || a.tape != b.tape)
    throw StateError("op: operands from different tapes");
  return *a.tape;
}

inline Value unary(const Value& x, Mat out,
                   std::function<void(Tape&, const Mat&, int)> bp) {
  Tape& t = *x.tape;
  bool ng = t.needs_grad(x.idx);
  int xi = x.idx;
  Tape::Backprop fn;
  if (ng && bp)
    fn = [xi, bp = std::move(bp)](Tape& tp, const Mat& g) { bp(tp, g, xi); };
  return t.push(std::move(out), ng, std::move(fn));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// arithmetic
// ---------------------------------------------------------------------------

inline Value matmul(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dims differ");
  Mat out = a.val() * b.val();
  bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
  int ai = a.idx, bi = b.idx;
  Tape::Backprop fn;
  if (ng)
    fn = [ai, bi](Tape& tp, const Mat& g) {
      if (tp.needs_grad(ai)) tp.accum(ai, g * tp.value(bi).transpose());
      if (tp.needs_grad(bi)) tp.accum(bi, tp.value(ai).transpose() * g);
    };
  return t.push(std::move(out), ng, std::move(fn));
}

// x * C for a constant matrix C
inline Value matmul_const(const Value& x, const Mat& c) {
  if (x.cols() != c.rows()) throw ShapeError("matmul_const: inner dims differ");
  Mat ct = c.transpose();
  return detail::unary(x, x.val() * c,
                       [ct](Tape& tp, const Mat& g, int xi) {
                         tp.accum(xi, g * ct);
                       });
}

inline Value add(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("add: shape mismatch");
  bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
  int ai = a.idx, bi = b.idx;
  Tape::Backprop fn;
  if (ng)
    fn = [ai, bi](Tape& tp, const Mat& g) {
      tp.accum(ai, g);
      tp.accum(bi, g);
    };
  return t.push(a.val() + b.val(), ng, std::move(fn));
}

inline Value add_rowvec(const Value& x, const Value& bias) {
  Tape& t = detail::same_tape(x, bias);
  if (bias.rows() != 1 || bias.cols() != x.cols())
    throw ShapeError("add_rowvec: bias must be 1 x cols(x)");
  Mat out = x.val().rowwise() + bias.val().row(0);
  bool ng = t.needs_grad(x.idx) || t.needs_grad(bias.idx);
  int xi = x.idx, bi = bias.idx;
  Tape::Backprop fn;
  if (ng)
    fn = [xi, bi](Tape& tp, const Mat& g) {
      tp.accum(xi, g);
      if (tp.needs_grad(bi)) tp.accum(bi, g.colwise().sum());
    };
  return t.push(std::move(out), ng, std::move(fn));
}

inline Value add_const_rowvec(const Value& x, const Eigen::RowVectorXd& r) {
  if (r.cols() != x.cols()) throw ShapeError("add_const_rowvec: width mismatch");
  return detail::unary(x, x.val().rowwise() + r,
                       [](Tape& tp, const Mat& g, int xi) { tp.accum(xi, g); });
}

// rows of x are grouped [b * t_len + t]; pos is t_len x C, shared across b
inline Value add_posembed(const Value& x, const Value& pos, int b_count) {
  Tape& t = detail::same_tape(x, pos);
  long t_len = pos.rows();
  if (x.rows() != static_cast<long>(b_count) * t_len || x.cols() != pos.cols())
    throw ShapeError("add_posembed: geometry mismatch");
  Mat out = x.val();
  for (int b = 0; b < b_count; ++b)
    out.middleRows(b * t_len, t_len) += pos.val();
  bool ng = t.needs_grad(x.idx) || t.needs_grad(pos.idx);
  int xi = x.idx, pi = pos.idx;
  Tape::Backprop fn;
  if (ng)
    fn = [xi, pi, b_count, t_len](Tape& tp, const Mat& g) {
      tp.accum(xi, g);
      if (tp.needs_grad(pi)) {
        Mat gp = Mat::Zero(t_len, g.cols());
        for (int b = 0; b < b_count; ++b)
          gp += g.middleRows(b * t_len, t_len);
        tp.accum(pi, gp);
      }
    };
  return t.push(std::move(out), ng, std::move(fn));
}

inline Value affine(const Value& x, double scale, double shift) {
  return detail::unary(x, (x.val().array() * scale + shift).matrix(),
                       [scale](Tape& tp, const Mat& g, int xi) {
                         tp.accum(xi, g * scale);
                       });
}

inline Value neg(const Value& x) { return affine(x, -1.0, 0.0); }

inline Value mul(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("mul: shape mismatch");
  bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
  int ai = a.idx, bi = b.idx;
  Tape::Backprop fn;
  if (ng)
    fn = [ai, bi](Tape& tp, const Mat& g) {
      if (tp.needs_grad(ai))
        tp.accum(ai, g.cwiseProduct(tp.value(bi)));
      if (tp.needs_grad(bi))
        tp.accum(bi, g.cwiseProduct(tp.value(ai)));
    };
  return t.push(a.val().cwiseProduct(b.val()), ng, std::move(fn));
}

inline Value mul_const(const Value& x, const Mat& c) {
  if (x.rows() != c.rows() || x.cols() != c.cols())
    throw ShapeError("mul_const: shape mismatch");
  return detail::unary(x, x.val().cwiseProduct(c),
                       [c](Tape& tp, const Mat& g, int xi) {
                         tp.accum(xi, g.cwiseProduct(c));
                       });
}

// ---------------------------------------------------------------------------
// elementwise nonlinearities
// ---------------------------------------------------------------------------

inline Value relu(const Value& x) {
  return detail::unary(x, x.val().cwiseMax(0.0),
                       [](Tape& tp, const Mat& g, int xi) {
                         const Mat& v = tp.value(xi);
                         tp.accum(xi, (v.array() > 0.0)
                                          .select(g.array(), 0.0)
                                          .matrix());
                       });
}

inline Value gelu(const Value& x) {
  const double inv_sqrt2 = 0.7071067811865475244;
  const double inv_sqrt2pi = 0.3989422804014326779;
  Mat out = x.val().unaryExpr([&](double v) {
    return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  });
  return detail::unary(
      x, std::move(out),
      [inv_sqrt2, inv_sqrt2pi](Tape& tp, const Mat& g, int xi) {
        const Mat& v = tp.value(xi);
        Mat d = v.unaryExpr([&](double z) {
          double cdf = 0.5 * (1.0 + std::erf(z * inv_sqrt2));
          double pdf = inv_sqrt2pi * std::exp(-0.5 * z * z);
          return cdf + z * pdf;
        });
        tp.accum(xi, g.cwiseProduct(d));
      });
}

inline Value sigmoid(const Value& x) {
  Mat s = x.val().unaryExpr([](double v) {
    return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                    : std::exp(v) / (1.0 + std::exp(v));
  });
  auto cache = std::make_shared<Mat>(s);
  return detail::unary(x, std::move(s),
                       [cache](Tape& tp, const Mat& g, int xi) {
                         Mat d = (cache->array() * (1.0 - cache->array())).matrix();
                         tp.accum(xi, g.cwiseProduct(d));
                       });
}

inline Value log_op(const Value& x) {
  return detail::unary(x, x.val().array().log().matrix(),
                       [](Tape& tp, const Mat& g, int xi) {
                         tp.accum(xi, (g.array() / tp.value(xi).array()).matrix());
                       });
}

inline Value exp_op(const Value& x) {
  auto cache = std::make_shared<Mat>(x.val().array().exp().matrix());
  Mat out = *cache;
  return detail::unary(x, std::move(out),
                       [cache](Tape& tp, const Mat& g, int xi) {
                         tp.accum(xi, g.cwiseProduct(*cache));
                       });
}

// hard clamp; gradient passes only strictly inside the interval
inline Value clamp(const Value& x, double lo, double hi) {
  if (!(lo < hi)) throw DomainError("clamp: lo must be < hi");
  Mat out = x.val().cwiseMax(lo).cwiseMin(hi);
  return detail::unary(x, std::move(out),
                       [lo, hi](Tape& tp, const Mat& g, int xi) {
                         const Mat& v = tp.value(xi);
                         Mat d = ((v.array() > lo) && (v.array() < hi))
                                     .select(g.array(), 0.0)
                                     .matrix();
                         tp.accum(xi, d);
                       });
}

inline Value grad_reverse(const Value& x, double lambda) {
  return detail::unary(x, x.val(),
                       [lambda](Tape& tp, const Mat& g, int xi) {
                         tp.accum(xi, (-lambda) * g);
                       });
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

namespace detail {

inline Mat softmax_rows_mat(const Mat& x) {
  Mat p(x.rows(), x.cols());
  for (long r = 0; r < x.rows(); ++r) {
    Eigen::RowVectorXd row = x.row(r);
    double m = row.maxCoeff();
    Eigen::RowVectorXd e = (row.array() - m).exp().matrix();
    p.row(r) = e / e.sum();
  }
  return p;
}

}  // namespace detail

inline Value softmax_rows(const Value& x) {
  auto p = std::make_shared<Mat>(detail::softmax_rows_mat(x.val()));
  Mat out = *p;
  return detail::unary(x, std::move(out),
                       [p](Tape& tp, const Mat& g, int xi) {
                         Mat gp = g.cwiseProduct(*p);
                         Eigen::VectorXd rs = gp.rowwise().sum();
                         Mat d = gp - (p->array().colwise() * rs.array()).matrix();
                         tp.accum(xi, d);
                       });
}

inline Value log_softmax_rows(const Value& x) {
  Mat p = detail::softmax_rows_mat(x.val());
  Mat out(p.rows(), p.cols());
  for (long r = 0; r < x.rows(); ++r) {
    Eigen::RowVectorXd row = x.val().row(r);
    double m = row.maxCoeff();
    double lse = m + std::log((row.array() - m).exp().sum());
    out.row(r) = (row.array() - lse).matrix();
  }
  auto cache = std::make_shared<Mat>(std::move(p));
  return detail::unary(x, std::move(out),
                       [cache](Tape& tp, const Mat& g, int xi) {
                         Eigen::VectorXd rs = g.rowwise().sum();
                         Mat d = g - (cache->array().colwise() * rs.array()).matrix();
                         tp.accum(xi, d);
                       });
}

// ---------------------------------------------------------------------------
// normalization and attention
// ---------------------------------------------------------------------------

inline Value layer_norm(const Value& x, const Value& gamma, const Value& beta,
                        double eps = 1e-5) {
  Tape& t = detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  long c = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 ||
      beta.cols() != c)
    throw ShapeError("layer_norm: gamma/beta must be 1 x cols(x)");
  const Mat& v = x.val();
  auto xhat = std::make_shared<Mat>(v.rows(), c);
  auto inv_std = std::make_shared<Eigen::VectorXd>(v.rows());
  for (long r = 0; r < v.rows(); ++r) {
    double mu = v.row(r).mean();
    double var = (v.row(r).array() - mu).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)(r) = is;
    xhat->row(r) = ((v.row(r).array() - mu) * is).matrix();
  }
  Mat out = ((xhat->array().rowwise() * gamma.val().row(0).array()).rowwise() +
             beta.val().row(0).array())
                .matrix();
  bool ng = t.needs_grad(x.idx) || t.needs_grad(gamma.idx) ||
            t.needs_grad(beta.idx);
  int xi = x.idx, gi = gamma.idx, bi = beta.idx;
  Tape::Backprop fn;
  if (ng)
    fn = [xi, gi, bi, xhat, inv_std](Tape& tp, const Mat& g) {
      if (tp.needs_grad(gi))
        tp.accum(gi, g.cwiseProduct(*xhat).colwise().sum());
      if (tp.needs_grad(bi)) tp.accum(bi, g.colwise().sum());
      if (tp.needs_grad(xi)) {
        long cc = g.cols();
        Mat dxhat =
            (g.array().rowwise() * tp.value(gi).row(0).array()).matrix();
        Eigen::VectorXd m1 = dxhat.rowwise().mean();
        Eigen::VectorXd m2 =
            dxhat.cwiseProduct(*xhat).rowwise().sum() / double(cc);
        Mat dx(g.rows(), cc);
        for (long r = 0; r < g.rows(); ++r)
          dx.row(r) = (((dxhat.row(r).array() - m1(r)) -
                        xhat->row(r).array() * m2(r)) *
                       (*inv_std)(r))
                          .matrix();
        tp.accum(xi, dx);
      }
    };
  return t.push(std::move(out), ng, std::move(fn));
}

// qkv: (b_count * t_len) x (3 * dim), columns [Q | K | V], dim = heads * dh.
// Scaled dot-product attention per batch element and head.
inline Value attention(const Value& qkv, int b_count, int t_len, int heads) {
  Tape& t = *qkv.tape;
  long total = qkv.cols();
  if (total % 3 != 0) throw ShapeError("attention: qkv width not divisible by 3");
  long dim = total / 3;
  if (dim % heads != 0) throw ShapeError("attention: dim not divisible by heads");
  long dh = dim / heads;
  if (qkv.rows() != static_cast<long>(b_count) * t_len)
    throw ShapeError("attention: row count mismatch");
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Mat& v = qkv.val();
  Mat out(v.rows(), dim);
  auto probs = std::make_shared<std::vector<Mat>>();
  bool ng = t.needs_grad(qkv.idx);
  if (ng) probs->reserve(static_cast<std::size_t>(b_count) * heads);
  for (int b = 0; b < b_count; ++b) {
    for (int h = 0; h < heads; ++h) {
      auto q = v.block(b * t_len, h * dh, t_len, dh);
      auto k = v.block(b * t_len, dim + h * dh, t_len, dh);
      auto val = v.block(b * t_len, 2 * dim + h * dh, t_len, dh);
      Mat s = (q * k.transpose()) * scale;
      Mat p = detail::softmax_rows_mat(s);
      out.block(b * t_len, h * dh, t_len, dh) = p * val;
      if (ng) probs->push_back(std::move(p));
    }
  }
  int qi = qkv.idx;
  Tape::Backprop fn;
  if (ng)
    fn = [qi, b_count, t_len, heads, dim, dh, scale, probs](Tape& tp,
                                                            const Mat& g) {
      const Mat& v = tp.value(qi);
      Mat dq = Mat::Zero(v.rows(), v.cols());
      std::size_t pi = 0;
      for (int b = 0; b < b_count; ++b) {
        for (int h = 0; h < heads; ++h) {
          auto q = v.block(b * t_len, h * dh, t_len, dh);
          auto k = v.block(b * t_len, dim + h * dh, t_len, dh);
          auto val = v.block(b * t_len, 2 * dim + h * dh, t_len, dh);
          const Mat& p = (*probs)[pi++];
          Mat go = g.block(b * t_len, h * dh, t_len, dh);
          Mat gp = go * val.transpose();
          Mat dv = p.transpose() * go;
          Mat gpp = gp.cwiseProduct(p);
          Eigen::VectorXd rs = gpp.rowwise().sum();
          Mat ds = gpp - (p.array().colwise() * rs.array()).matrix();
          dq.block(b * t_len, h * dh, t_len, dh) += ds * k * scale;
          dq.block(b * t_len, dim + h * dh, t_len, dh) +=
              ds.transpose() * q * scale;
          dq.block(b * t_len, 2 * dim + h * dh, t_len, dh) += dv;
        }
      }
      tp.accum(qi, dq);
    };
  return t.push(std::move(out), ng, std::move(fn));
}

// ---------------------------------------------------------------------------
// image layout ops. Packed images are (b_count * h * w) rows x channels,
// row index = b * h * w + y * w + x.
// ---------------------------------------------------------------------------

struct ConvGeom {
  int b = 0, c = 0, h = 0, w = 0;
  int k = 3, stride = 1, pad = 1;

  int oh() const { return (h + 2 * pad - k) / stride + 1; }
  int ow() const { return (w + 2 * pad - k) / stride + 1; }
};

inline Value im2col(const Value& x, const ConvGeom& g) {
  if (x.rows() != static_cast<long>(g.b) * g.h * g.w || x.cols() != g.c)
    throw ShapeError("im2col: input geometry mismatch");
  int oh = g.oh(), ow = g.ow();
  long cols = static_cast<long>(g.c) * g.k * g.k;
  Mat out = Mat::Zero(static_cast<long>(g.b) * oh * ow, cols);
  const Mat& v = x.val();
  for (int b = 0; b < g.b; ++b) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        long orow = (static_cast<long>(b) * oh + oy) * ow + ox;
        for (int ky = 0; ky < g.k; ++ky) {
          int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          for (int kx = 0; kx < g.k; ++kx) {
            int ix = ox * g.stride + kx - g.pad;
            if (ix < 0 || ix >= g.w) continue;
            long irow = (static_cast<long>(b) * g.h + iy) * g.w + ix;
            for (int c = 0; c < g.c; ++c)
              out(orow, static_cast<long>(c) * g.k * g.k + ky * g.k + kx) =
                  v(irow, c);
          }
        }
      }
    }
  }
  return detail::unary(
      x, std::move(out), [g, oh, ow](Tape& tp, const Mat& gr, int xi) {
        Mat dx = Mat::Zero(static_cast<long>(g.b) * g.h * g.w, g.c);
        for (int b = 0; b < g.b; ++b) {
          for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
              long orow = (static_cast<long>(b) * oh + oy) * ow + ox;
              for (int ky = 0; ky < g.k; ++ky) {
                int iy = oy * g.stride + ky - g.pad;
                if (iy < 0 || iy >= g.h) continue;
                for (int kx = 0; kx < g.k; ++kx) {
                  int ix = ox * g.stride + kx - g.pad;
                  if (ix < 0 || ix >= g.w) continue;
                  long irow = (static_cast<long>(b) * g.h + iy) * g.w + ix;
                  for (int c = 0; c < g.c; ++c)
                    dx(irow, c) +=
                        gr(orow,
                           static_cast<long>(c) * g.k * g.k + ky * g.k + kx);
                }
              }
            }
          }
        }
        tp.accum(xi, dx);
      });
}

inline Value avg_pool(const Value& x, int b_count, int h, int w, int factor) {
  if (factor < 1 || h % factor != 0 || w % factor != 0)
    throw ShapeError("avg_pool: factor must divide spatial dims");
  if (x.rows() != static_cast<long>(b_count) * h * w)
    throw ShapeError("avg_pool: row count mismatch");
  if (factor == 1) return detail::unary(x, x.val(),
      [](Tape& tp, const Mat& g, int xi) { tp.accum(xi, g); });
  int oh = h / factor, ow = w / factor;
  long c = x.cols();
  double inv = 1.0 / (factor * factor);
  Mat out = Mat::Zero(static_cast<long>(b_count) * oh * ow, c);
  const Mat& v = x.val();
  for (int b = 0; b < b_count; ++b)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        long orow = (static_cast<long>(b) * oh + oy) * ow + ox;
        for (int fy = 0; fy < factor; ++fy)
          for (int fx = 0; fx < factor; ++fx) {
            long irow = (static_cast<long>(b) * h + oy * factor + fy) * w +
                        ox * factor + fx;
            out.row(orow) += v.row(irow);
          }
        out.row(orow) *= inv;
      }
  return detail::unary(
      x, std::move(out),
      [b_count, h, w, factor, oh, ow, inv](Tape& tp, const Mat& g, int xi) {
        Mat dx = Mat::Zero(static_cast<long>(b_count) * h * w, g.cols());
        for (int b = 0; b < b_count; ++b)
          for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
              long orow = (static_cast<long>(b) * oh + oy) * ow + ox;
              for (int fy = 0; fy < factor; ++fy)
                for (int fx = 0; fx < factor; ++fx) {
                  long irow =
                      (static_cast<long>(b) * h + oy * factor + fy) * w +
                      ox * factor + fx;
                  dx.row(irow) = g.row(orow) * inv;
                }
            }
        tp.accum(xi, dx);
      });
}

// (b*h*w) x c -> (b*t) x (c*patch*patch), t = (h/patch)*(w/patch),
// column index = ch * patch * patch + py * patch + px
inline Value patchify(const Value& x, int b_count, int h, int w, int patch) {
  if (patch < 1 || h % patch != 0 || w % patch != 0)
    throw ShapeError("patchify: patch must divide spatial dims");
  if (x.rows() != static_cast<long>(b_count) * h * w)
    throw ShapeError("patchify: row count mismatch");
  long c = x.cols();
  int gh = h / patch, gw = w / patch;
  long t_len = static_cast<long>(gh) * gw;
  Mat out(static_cast<long>(b_count) * t_len, c * patch * patch);
  const Mat& v = x.val();
  for (int b = 0; b < b_count; ++b)
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        long orow = b * t_len + gy * gw + gx;
        for (int py = 0; py < patch; ++py)
          for (int px = 0; px < patch; ++px) {
            long irow = (static_cast<long>(b) * h + gy * patch + py) * w +
                        gx * patch + px;
            for (long ch = 0; ch < c; ++ch)
              out(orow, ch * patch * patch + py * patch + px) = v(irow, ch);
          }
      }
  return detail::unary(
      x, std::move(out),
      [b_count, h, w, patch, gh, gw, t_len, c](Tape& tp, const Mat& g,
                                               int xi) {
        Mat dx = Mat::Zero(static_cast<long>(b_count) * h * w, c);
        for (int b = 0; b < b_count; ++b)
          for (int gy = 0; gy < gh; ++gy)
            for (int gx = 0; gx < gw; ++gx) {
              long orow = b * t_len + gy * gw + gx;
              for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px) {
                  long irow =
                      (static_cast<long>(b) * h + gy * patch + py) * w +
                      gx * patch + px;
                  for (long ch = 0; ch < c; ++ch)
                    dx(irow, ch) +=
                        g(orow, ch * patch * patch + py * patch + px);
                }
            }
        tp.accum(xi, dx);
      });
}

inline Value mean_tokens(const Value& x, int b_count, int t_len) {
  if (x.rows() != static_cast<long>(b_count) * t_len)
    throw ShapeError("mean_tokens: row count mismatch");
  Mat out(b_count, x.cols());
  for (int b = 0; b < b_count; ++b)
    out.row(b) = x.val().middleRows(b * t_len, t_len).colwise().mean();
  return detail::unary(x, std::move(out),
                       [b_count, t_len](Tape& tp, const Mat& g, int xi) {
                         Mat dx(static_cast<long>(b_count) * t_len, g.cols());
                         double inv = 1.0 / t_len;
                         for (int b = 0; b < b_count; ++b)
                           dx.middleRows(b * t_len, t_len) =
                               (g.row(b) * inv).replicate(t_len, 1);
                         tp.accum(xi, dx);
                       });
}

inline Value concat_cols(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.rows() != b.rows()) throw ShapeError("concat_cols: row mismatch");
  Mat out(a.rows(), a.cols() + b.cols());
  out.leftCols(a.cols()) = a.val();
  out.rightCols(b.cols()) = b.val();
  bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
  int ai = a.idx, bi = b.idx;
  long ac = a.cols(), bc = b.cols();
  Tape::Backprop fn;
  if (ng)
    fn = [ai, bi, ac, bc](Tape& tp, const Mat& g) {
      tp.accum(ai, g.leftCols(ac));
      tp.accum(bi, g.rightCols(bc));
    };
  return t.push(std::move(out), ng, std::move(fn));
}

inline Value slice_rows(const Value& x, long r0, long n) {
  if (r0 < 0 || n < 0 || r0 + n > x.rows())
    throw ShapeError("slice_rows: range out of bounds");
  long total = x.rows();
  return detail::unary(x, x.val().middleRows(r0, n),
                       [r0, n, total](Tape& tp, const Mat& g, int xi) {
                         Mat dx = Mat::Zero(total, g.cols());
                         dx.middleRows(r0, n) = g;
                         tp.accum(xi, dx);
                       });
}

// ---------------------------------------------------------------------------
// reductions and losses
// ---------------------------------------------------------------------------

inline Value sum_all(const Value& x) {
  Mat out(1, 1);
  out(0, 0) = x.val().sum();
  long r = x.rows(), c = x.cols();
  return detail::unary(x, std::move(out),
                       [r, c](Tape& tp, const Mat& g, int xi) {
                         tp.accum(xi, Mat::Constant(r, c, g(0, 0)));
                       });
}

inline Value mean_all(const Value& x) {
  Mat out(1, 1);
  out(0, 0) = x.val().mean();
  long r = x.rows(), c = x.cols();
  double inv = 1.0 / (static_cast<double>(r) * static_cast<double>(c));
  return detail::unary(x, std::move(out),
                       [r, c, inv](Tape& tp, const Mat& g, int xi) {
                         tp.accum(xi, Mat::Constant(r, c, g(0, 0) * inv));
                       });
}

// mean over rows of logsumexp(row) - row[label]
inline Value ce_with_logits(const Value& logits,
                            const std::vector<int>& labels) {
  long n = logits.rows(), k = logits.cols();
  if (static_cast<long>(labels.size()) != n)
    throw ShapeError("ce_with_logits: label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= k) throw DomainError("ce_with_logits: label out of range");
  Mat p = detail::softmax_rows_mat(logits.val());
  double total = 0.0;
  for (long r = 0; r < n; ++r) {
    Eigen::RowVectorXd row = logits.val().row(r);
    double m = row.maxCoeff();
    double lse = m + std::log((row.array() - m).exp().sum());
    total += lse - row(labels[static_cast<std::size_t>(r)]);
  }
  Mat out(1, 1);
  out(0, 0) = total / static_cast<double>(n);
  auto cache = std::make_shared<Mat>(std::move(p));
  auto labs = std::make_shared<std::vector<int>>(labels);
  return detail::unary(logits, std::move(out),
                       [cache, labs, n](Tape& tp, const Mat& g, int xi) {
                         Mat d = *cache;
                         for (long r = 0; r < n; ++r)
                           d(r, (*labs)[static_cast<std::size_t>(r)]) -= 1.0;
                         tp.accum(xi, d * (g(0, 0) / static_cast<double>(n)));
                       });
}

inline Value pairwise_sqdist(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.cols() != b.cols()) throw ShapeError("pairwise_sqdist: dim mismatch");
  Eigen::VectorXd an = a.val().rowwise().squaredNorm();
  Eigen::VectorXd bn = b.val().rowwise().squaredNorm();
  Mat out = (-2.0 * a.val() * b.val().transpose());
  out.colwise() += an;
  out.rowwise() += bn.transpose();
  out = out.cwiseMax(0.0);
  bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
  int ai = a.idx, bi = b.idx;
  Tape::Backprop fn;
  if (ng)
    fn = [ai, bi](Tape& tp, const Mat& g) {
      const Mat& av = tp.value(ai);
      const Mat& bv = tp.value(bi);
      if (tp.needs_grad(ai)) {
        Eigen::VectorXd rs = g.rowwise().sum();
        Mat da = 2.0 * ((av.array().colwise() * rs.array()).matrix() - g * bv);
        tp.accum(ai, da);
      }
      if (tp.needs_grad(bi)) {
        Eigen::VectorXd cs = g.colwise().sum();
        Mat db =
            2.0 * ((bv.array().colwise() * cs.array()).matrix() -
                   g.transpose() * av);
        tp.accum(bi, db);
      }
    };
  return t.push(std::move(out), ng, std::move(fn));
}

}  // namespace biadapt::ad
