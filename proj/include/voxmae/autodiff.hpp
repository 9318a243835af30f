#pragma once

// Reverse-mode differentiation over matrix-valued nodes.
//
// A Tape records every operation of one forward pass in topological order.
// Each node keeps its value and, when any input requires a gradient, a
// closure that propagates the node's output gradient to its inputs.
// backward() walks the tape from the loss node towards the leaves.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "voxmae/errors.hpp"
#include "voxmae/tensor.hpp"

namespace voxmae::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename Real>
class Tape {
 public:
  using Mat = Matrix<Real>;
  using BackwardFn = std::function<void(Tape&, const Mat& out_grad)>;

  Var constant(Mat value) { return push(std::move(value), false, nullptr); }
  Var parameter(Mat value) { return push(std::move(value), true, nullptr); }

  const Mat& value(Var v) const { return node(v).value; }
  // Empty matrix when no gradient reached the node.
  const Mat& grad(Var v) const { return node(v).grad; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Zero-initialized on first access.
  Mat& grad_buffer(Var v) {
    Node& n = node(v);
    if (n.grad.empty() && !n.value.empty()) n.grad = Mat(n.value.rows(), n.value.cols());
    return n.grad;
  }

  // Records an op output. The closure is kept only if some input needs a gradient.
  Var record(Mat value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (Var in : inputs) needs = needs || node(in).requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  void backward(Var loss) {
    const Node& out = node(loss);
    if (out.value.rows() != 1 || out.value.cols() != 1)
      throw InvalidArgument("backward: loss must be a scalar, got " + out.value.shape_string());
    for (Node& n : nodes_) n.grad = Mat();
    if (!out.requires_grad) return;
    grad_buffer(loss)[0] = Real(1);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Mat value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, std::move(fn)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }
  Node& node(Var v) {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw InvalidArgument("tape: invalid variable");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw InvalidArgument("tape: invalid variable");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  std::vector<Node> nodes_;
};

namespace detail {
inline void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidArgument(what);
}
}  // namespace detail

// ---------------------------------------------------------------- linear algebra

template <typename Real>
Var matmul(Tape<Real>& t, Var a, Var b) {
  Matrix<Real> out;
  gemm_nn(t.value(a), t.value(b), out, false);
  return t.record(std::move(out), {a, b}, [a, b](Tape<Real>& t, const Matrix<Real>& g) {
    if (t.requires_grad(a)) gemm_nt(g, t.value(b), t.grad_buffer(a), true);
    if (t.requires_grad(b)) gemm_tn(t.value(a), g, t.grad_buffer(b), true);
  });
}

template <typename Real>
Var add(Tape<Real>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require(av.same_shape(bv), "add: shape mismatch " + av.shape_string() + " vs " + bv.shape_string());
  Matrix<Real> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape<Real>& t, const Matrix<Real>& g) {
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      auto& gv = t.grad_buffer(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

// a (n x m) + broadcast row b (1 x m)
template <typename Real>
Var add_row(Tape<Real>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require(bv.rows() == 1 && bv.cols() == av.cols(), "add_row: shape mismatch " + av.shape_string() + " + " + bv.shape_string());
  Matrix<Real> out = av;
  for (int r = 0; r < out.rows(); ++r) {
    Real* o = out.row(r);
    for (int c = 0; c < out.cols(); ++c) o[c] += bv[static_cast<std::size_t>(c)];
  }
  return t.record(std::move(out), {a, b}, [a, b](Tape<Real>& t, const Matrix<Real>& g) {
    if (t.requires_grad(a)) {
      auto& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad_buffer(b);
      for (int r = 0; r < g.rows(); ++r) {
        const Real* gr = g.row(r);
        for (int c = 0; c < g.cols(); ++c) gb[static_cast<std::size_t>(c)] += gr[c];
      }
    }
  });
}

template <typename Real>
Var linear(Tape<Real>& t, Var x, Var weight, Var bias) {
  return add_row(t, matmul(t, x, weight), bias);
}

template <typename Real>
Var scale(Tape<Real>& t, Var a, Real s) {
  Matrix<Real> out = t.value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  return t.record(std::move(out), {a}, [a, s](Tape<Real>& t, const Matrix<Real>& g) {
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

// ---------------------------------------------------------------- row plumbing

template <typename Real>
Var gather_rows(Tape<Real>& t, Var a, std::vector<int> rows) {
  const auto& av = t.value(a);
  Matrix<Real> out(static_cast<int>(rows.size()), av.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::require(rows[i] >= 0 && rows[i] < av.rows(), "gather_rows: index out of range");
    std::copy_n(av.row(rows[i]), av.cols(), out.row(static_cast<int>(i)));
  }
  return t.record(std::move(out), {a}, [a, rows = std::move(rows)](Tape<Real>& t, const Matrix<Real>& g) {
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const Real* gr = g.row(static_cast<int>(i));
      Real* dst = ga.row(rows[i]);
      for (int c = 0; c < g.cols(); ++c) dst[c] += gr[c];
    }
  });
}

template <typename Real>
Var concat_rows(Tape<Real>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require(av.cols() == bv.cols(), "concat_rows: column mismatch");
  Matrix<Real> out(av.rows() + bv.rows(), av.cols());
  std::copy(av.storage().begin(), av.storage().end(), out.storage().begin());
  std::copy(bv.storage().begin(), bv.storage().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(av.size()));
  const int split = av.rows();
  return t.record(std::move(out), {a, b}, [a, b, split](Tape<Real>& t, const Matrix<Real>& g) {
    const std::size_t offset = static_cast<std::size_t>(split) * static_cast<std::size_t>(g.cols());
    if (t.requires_grad(a)) {
      auto& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[offset + i];
    }
  });
}

template <typename Real>
Var concat_cols(Tape<Real>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require(av.rows() == bv.rows(), "concat_cols: row mismatch");
  Matrix<Real> out(av.rows(), av.cols() + bv.cols());
  for (int r = 0; r < av.rows(); ++r) {
    std::copy_n(av.row(r), av.cols(), out.row(r));
    std::copy_n(bv.row(r), bv.cols(), out.row(r) + av.cols());
  }
  const int split = av.cols();
  return t.record(std::move(out), {a, b}, [a, b, split](Tape<Real>& t, const Matrix<Real>& g) {
    for (int r = 0; r < g.rows(); ++r) {
      const Real* gr = g.row(r);
      if (t.requires_grad(a)) {
        Real* d = t.grad_buffer(a).row(r);
        for (int c = 0; c < split; ++c) d[c] += gr[c];
      }
      if (t.requires_grad(b)) {
        Real* d = t.grad_buffer(b).row(r);
        for (int c = split; c < g.cols(); ++c) d[c - split] += gr[c];
      }
    }
  });
}

template <typename Real>
Var slice_rows(Tape<Real>& t, Var a, int start, int count) {
  const auto& av = t.value(a);
  detail::require(start >= 0 && count >= 0 && start + count <= av.rows(), "slice_rows: range out of bounds");
  Matrix<Real> out(count, av.cols());
  if (count > 0) std::copy_n(av.row(start), static_cast<std::size_t>(count) * static_cast<std::size_t>(av.cols()), out.row(0));
  return t.record(std::move(out), {a}, [a, start](Tape<Real>& t, const Matrix<Real>& g) {
    auto& ga = t.grad_buffer(a);
    for (int r = 0; r < g.rows(); ++r) {
      const Real* gr = g.row(r);
      Real* d = ga.row(start + r);
      for (int c = 0; c < g.cols(); ++c) d[c] += gr[c];
    }
  });
}

// Single element as a 1 x 1 node.
template <typename Real>
Var select(Tape<Real>& t, Var a, int r, int c) {
  const auto& av = t.value(a);
  detail::require(r >= 0 && r < av.rows() && c >= 0 && c < av.cols(), "select: index out of range");
  Matrix<Real> out(1, 1, av(r, c));
  return t.record(std::move(out), {a}, [a, r, c](Tape<Real>& t, const Matrix<Real>& g) { t.grad_buffer(a)(r, c) += g[0]; });
}

template <typename Real>
Var mean_rows(Tape<Real>& t, Var a) {
  const auto& av = t.value(a);
  detail::require(av.rows() > 0, "mean_rows: empty input");
  Matrix<Real> out(1, av.cols());
  for (int r = 0; r < av.rows(); ++r)
    for (int c = 0; c < av.cols(); ++c) out[static_cast<std::size_t>(c)] += av(r, c);
  const Real inv = Real(1) / static_cast<Real>(av.rows());
  for (std::size_t c = 0; c < out.size(); ++c) out[c] *= inv;
  return t.record(std::move(out), {a}, [a, inv](Tape<Real>& t, const Matrix<Real>& g) {
    auto& ga = t.grad_buffer(a);
    for (int r = 0; r < ga.rows(); ++r)
      for (int c = 0; c < ga.cols(); ++c) ga(r, c) += g[static_cast<std::size_t>(c)] * inv;
  });
}

// Builds the full-length decoder sequence from visible rows and a shared mask
// token: row i takes visible[restore[i]] when restore[i] < n_visible, else the
// mask token. This is the inverse of the encoder's shuffle.
template <typename Real>
Var unshuffle_with_mask(Tape<Real>& t, Var visible, Var mask_token, std::vector<int> restore) {
  const auto& vv = t.value(visible);
  const auto& mv = t.value(mask_token);
  detail::require(mv.rows() == 1 && mv.cols() == vv.cols(), "unshuffle_with_mask: mask token shape");
  const int n_visible = vv.rows();
  Matrix<Real> out(static_cast<int>(restore.size()), vv.cols());
  for (std::size_t i = 0; i < restore.size(); ++i) {
    const int src = restore[i];
    detail::require(src >= 0 && src < static_cast<int>(restore.size()), "unshuffle_with_mask: bad restore index");
    const Real* from = src < n_visible ? vv.row(src) : mv.row(0);
    std::copy_n(from, vv.cols(), out.row(static_cast<int>(i)));
  }
  return t.record(std::move(out), {visible, mask_token},
                  [visible, mask_token, n_visible, restore = std::move(restore)](Tape<Real>& t, const Matrix<Real>& g) {
                    for (std::size_t i = 0; i < restore.size(); ++i) {
                      const int src = restore[i];
                      const bool is_visible = src < n_visible;
                      Var target = is_visible ? visible : mask_token;
                      if (!t.requires_grad(target)) continue;
                      Real* d = t.grad_buffer(target).row(is_visible ? src : 0);
                      const Real* gr = g.row(static_cast<int>(i));
                      for (int c = 0; c < g.cols(); ++c) d[c] += gr[c];
                    }
                  });
}

// ---------------------------------------------------------------- elementwise

template <typename Real, typename F, typename DF>
Var unary(Tape<Real>& t, Var a, F f, DF df) {
  const auto& av = t.value(a);
  Matrix<Real> out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return t.record(std::move(out), {a}, [a, df](Tape<Real>& t, const Matrix<Real>& g) {
    const auto& x = t.value(a);
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i]);
  });
}

// Exact (erf) GELU.
template <typename Real>
Var gelu(Tape<Real>& t, Var a) {
  constexpr Real inv_sqrt2 = Real(0.70710678118654752440);
  constexpr Real inv_sqrt_2pi = Real(0.39894228040143267794);
  return unary(
      t, a, [](Real x) { return Real(0.5) * x * (Real(1) + std::erf(x * inv_sqrt2)); },
      [](Real x) { return Real(0.5) * (Real(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(Real(-0.5) * x * x); });
}

template <typename Real>
Var relu(Tape<Real>& t, Var a) {
  return unary(t, a, [](Real x) { return x > Real(0) ? x : Real(0); }, [](Real x) { return x > Real(0) ? Real(1) : Real(0); });
}

template <typename Real>
Var leaky_relu(Tape<Real>& t, Var a, Real slope = Real(0.01)) {
  return unary(
      t, a, [slope](Real x) { return x > Real(0) ? x : slope * x; }, [slope](Real x) { return x > Real(0) ? Real(1) : slope; });
}

template <typename Real>
Real stable_sigmoid(Real x) {
  if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

template <typename Real>
Var sigmoid(Tape<Real>& t, Var a) {
  const auto& av = t.value(a);
  Matrix<Real> out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = stable_sigmoid(av[i]);
  Matrix<Real> y = out;
  return t.record(std::move(out), {a}, [a, y = std::move(y)](Tape<Real>& t, const Matrix<Real>& g) {
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (Real(1) - y[i]);
  });
}

// ---------------------------------------------------------------- normalization

// Row-wise layer normalization with learnable gain and bias (1 x m each).
template <typename Real>
Var layer_norm(Tape<Real>& t, Var a, Var gain, Var bias, Real eps = Real(1e-6)) {
  const auto& x = t.value(a);
  const auto& gv = t.value(gain);
  const auto& bv = t.value(bias);
  const int n = x.rows(), m = x.cols();
  detail::require(gv.cols() == m && bv.cols() == m && gv.rows() == 1 && bv.rows() == 1, "layer_norm: parameter shape");
  Matrix<Real> out(n, m);
  Matrix<Real> xhat(n, m);
  std::vector<Real> rstd(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    const Real* xr = x.row(r);
    Real mean = 0;
    for (int c = 0; c < m; ++c) mean += xr[c];
    mean /= static_cast<Real>(m);
    Real var = 0;
    for (int c = 0; c < m; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<Real>(m);
    const Real rs = Real(1) / std::sqrt(var + eps);
    rstd[static_cast<std::size_t>(r)] = rs;
    for (int c = 0; c < m; ++c) {
      const Real h = (xr[c] - mean) * rs;
      xhat(r, c) = h;
      out(r, c) = h * gv[static_cast<std::size_t>(c)] + bv[static_cast<std::size_t>(c)];
    }
  }
  return t.record(std::move(out), {a, gain, bias},
                  [a, gain, bias, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<Real>& t, const Matrix<Real>& g) {
                    const int n = g.rows(), m = g.cols();
                    if (t.requires_grad(gain) || t.requires_grad(bias)) {
                      for (int r = 0; r < n; ++r) {
                        for (int c = 0; c < m; ++c) {
                          if (t.requires_grad(gain)) t.grad_buffer(gain)[static_cast<std::size_t>(c)] += g(r, c) * xhat(r, c);
                          if (t.requires_grad(bias)) t.grad_buffer(bias)[static_cast<std::size_t>(c)] += g(r, c);
                        }
                      }
                    }
                    if (!t.requires_grad(a)) return;
                    const auto& gv = t.value(gain);
                    auto& ga = t.grad_buffer(a);
                    std::vector<Real> dxhat(static_cast<std::size_t>(m));
                    for (int r = 0; r < n; ++r) {
                      Real mean_d = 0, mean_dx = 0;
                      for (int c = 0; c < m; ++c) {
                        const Real d = g(r, c) * gv[static_cast<std::size_t>(c)];
                        dxhat[static_cast<std::size_t>(c)] = d;
                        mean_d += d;
                        mean_dx += d * xhat(r, c);
                      }
                      mean_d /= static_cast<Real>(m);
                      mean_dx /= static_cast<Real>(m);
                      const Real rs = rstd[static_cast<std::size_t>(r)];
                      for (int c = 0; c < m; ++c)
                        ga(r, c) += rs * (dxhat[static_cast<std::size_t>(c)] - mean_d - xhat(r, c) * mean_dx);
                    }
                  });
}

// Batch normalization over rows using the batch's own statistics. The batch
// mean and biased variance are written to *batch_mean / *batch_var so the
// caller can update running averages.
template <typename Real>
Var batch_norm_train(Tape<Real>& t, Var a, Var gain, Var bias, std::vector<Real>* batch_mean, std::vector<Real>* batch_var,
                     Real eps = Real(1e-5)) {
  const auto& x = t.value(a);
  const int n = x.rows(), m = x.cols();
  detail::require(n >= 2, "batch_norm_train: needs at least two rows");
  std::vector<Real> mean(static_cast<std::size_t>(m)), var(static_cast<std::size_t>(m)), rstd(static_cast<std::size_t>(m));
  for (int c = 0; c < m; ++c) {
    Real s = 0;
    for (int r = 0; r < n; ++r) s += x(r, c);
    mean[static_cast<std::size_t>(c)] = s / static_cast<Real>(n);
    Real v = 0;
    for (int r = 0; r < n; ++r) v += (x(r, c) - mean[static_cast<std::size_t>(c)]) * (x(r, c) - mean[static_cast<std::size_t>(c)]);
    var[static_cast<std::size_t>(c)] = v / static_cast<Real>(n);
    rstd[static_cast<std::size_t>(c)] = Real(1) / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
  }
  const auto& gv = t.value(gain);
  const auto& bv = t.value(bias);
  Matrix<Real> xhat(n, m), out(n, m);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < m; ++c) {
      const auto cc = static_cast<std::size_t>(c);
      xhat(r, c) = (x(r, c) - mean[cc]) * rstd[cc];
      out(r, c) = xhat(r, c) * gv[cc] + bv[cc];
    }
  if (batch_mean) *batch_mean = mean;
  if (batch_var) *batch_var = var;
  return t.record(std::move(out), {a, gain, bias},
                  [a, gain, bias, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<Real>& t, const Matrix<Real>& g) {
                    const int n = g.rows(), m = g.cols();
                    for (int c = 0; c < m; ++c) {
                      const auto cc = static_cast<std::size_t>(c);
                      Real sum_g = 0, sum_gx = 0;
                      for (int r = 0; r < n; ++r) {
                        sum_g += g(r, c);
                        sum_gx += g(r, c) * xhat(r, c);
                      }
                      if (t.requires_grad(gain)) t.grad_buffer(gain)[cc] += sum_gx;
                      if (t.requires_grad(bias)) t.grad_buffer(bias)[cc] += sum_g;
                      if (!t.requires_grad(a)) continue;
                      const Real gam = t.value(gain)[cc];
                      auto& ga = t.grad_buffer(a);
                      const Real inv_n = Real(1) / static_cast<Real>(n);
                      for (int r = 0; r < n; ++r)
                        ga(r, c) += gam * rstd[cc] * (g(r, c) - sum_g * inv_n - xhat(r, c) * sum_gx * inv_n);
                    }
                  });
}

// Batch normalization with fixed statistics (evaluation mode).
template <typename Real>
Var batch_norm_eval(Tape<Real>& t, Var a, Var gain, Var bias, const std::vector<Real>& running_mean,
                    const std::vector<Real>& running_var, Real eps = Real(1e-5)) {
  const auto& x = t.value(a);
  const int m = x.cols();
  detail::require(static_cast<int>(running_mean.size()) == m && static_cast<int>(running_var.size()) == m,
                  "batch_norm_eval: running statistics shape");
  Matrix<Real> scale_row(1, m), shift_row(1, m);
  const auto& gv = t.value(gain);
  const auto& bv = t.value(bias);
  for (int c = 0; c < m; ++c) {
    const auto cc = static_cast<std::size_t>(c);
    const Real rs = Real(1) / std::sqrt(running_var[cc] + eps);
    scale_row[cc] = rs;
    shift_row[cc] = -running_mean[cc] * rs;
  }
  // y = (x * rs + shift) * gain + bias, with rs/shift constant.
  Matrix<Real> xhat(x.rows(), m);
  for (int r = 0; r < x.rows(); ++r)
    for (int c = 0; c < m; ++c) xhat(r, c) = x(r, c) * scale_row[static_cast<std::size_t>(c)] + shift_row[static_cast<std::size_t>(c)];
  Matrix<Real> out(x.rows(), m);
  for (int r = 0; r < x.rows(); ++r)
    for (int c = 0; c < m; ++c) out(r, c) = xhat(r, c) * gv[static_cast<std::size_t>(c)] + bv[static_cast<std::size_t>(c)];
  return t.record(std::move(out), {a, gain, bias},
                  [a, gain, bias, xhat = std::move(xhat), scale_row = std::move(scale_row)](Tape<Real>& t, const Matrix<Real>& g) {
                    for (int r = 0; r < g.rows(); ++r)
                      for (int c = 0; c < g.cols(); ++c) {
                        const auto cc = static_cast<std::size_t>(c);
                        if (t.requires_grad(gain)) t.grad_buffer(gain)[cc] += g(r, c) * xhat(r, c);
                        if (t.requires_grad(bias)) t.grad_buffer(bias)[cc] += g(r, c);
                        if (t.requires_grad(a)) t.grad_buffer(a)(r, c) += g(r, c) * t.value(gain)[cc] * scale_row[cc];
                      }
                  });
}

// ---------------------------------------------------------------- attention

// Multi-head scaled dot-product self-attention over a fused qkv matrix
// (n x 3d, laid out [q | k | v]). Returns the concatenated head outputs (n x d).
// When `capture` is non-null the per-head probability matrices are appended.
template <typename Real>
Var attention(Tape<Real>& t, Var qkv, int heads, std::vector<Matrix<Real>>* capture = nullptr) {
  const auto& x = t.value(qkv);
  detail::require(heads > 0 && x.cols() % (3 * heads) == 0, "attention: qkv width not divisible by 3*heads");
  const int n = x.rows();
  const int d = x.cols() / 3;
  const int hd = d / heads;
  const Real scale_factor = Real(1) / std::sqrt(static_cast<Real>(hd));
  std::vector<Matrix<Real>> probs(static_cast<std::size_t>(heads), Matrix<Real>(n, n));
  Matrix<Real> out(n, d);
  for (int h = 0; h < heads; ++h) {
    auto& p = probs[static_cast<std::size_t>(h)];
    const int qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
    for (int i = 0; i < n; ++i) {
      const Real* qi = x.row(i) + qo;
      Real* pi = p.row(i);
      Real mx = -std::numeric_limits<Real>::infinity();
      for (int j = 0; j < n; ++j) {
        const Real* kj = x.row(j) + ko;
        Real s = 0;
        for (int e = 0; e < hd; ++e) s += qi[e] * kj[e];
        s *= scale_factor;
        pi[j] = s;
        mx = std::max(mx, s);
      }
      Real z = 0;
      for (int j = 0; j < n; ++j) {
        pi[j] = std::exp(pi[j] - mx);
        z += pi[j];
      }
      const Real inv = Real(1) / z;
      for (int j = 0; j < n; ++j) pi[j] *= inv;
      Real* oi = out.row(i) + qo;
      for (int j = 0; j < n; ++j) {
        const Real pij = pi[j];
        const Real* vj = x.row(j) + vo;
        for (int e = 0; e < hd; ++e) oi[e] += pij * vj[e];
      }
    }
  }
  if (capture) capture->insert(capture->end(), probs.begin(), probs.end());
  return t.record(std::move(out), {qkv}, [qkv, heads, probs = std::move(probs)](Tape<Real>& t, const Matrix<Real>& g) {
    const auto& x = t.value(qkv);
    auto& gx = t.grad_buffer(qkv);
    const int n = x.rows();
    const int d = x.cols() / 3;
    const int hd = d / heads;
    const Real scale_factor = Real(1) / std::sqrt(static_cast<Real>(hd));
    std::vector<Real> dp(static_cast<std::size_t>(n));
    for (int h = 0; h < heads; ++h) {
      const auto& p = probs[static_cast<std::size_t>(h)];
      const int qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
      for (int i = 0; i < n; ++i) {
        const Real* gi = g.row(i) + qo;
        const Real* pi = p.row(i);
        // dV_j += p_ij * dO_i ; dP_ij = dO_i . V_j
        Real dot = 0;
        for (int j = 0; j < n; ++j) {
          const Real* vj = x.row(j) + vo;
          Real* gvj = gx.row(j) + vo;
          Real s = 0;
          for (int e = 0; e < hd; ++e) {
            gvj[e] += pi[j] * gi[e];
            s += gi[e] * vj[e];
          }
          dp[static_cast<std::size_t>(j)] = s;
          dot += s * pi[j];
        }
        // softmax backward, then scores -> q, k
        const Real* qi = x.row(i) + qo;
        Real* gqi = gx.row(i) + qo;
        for (int j = 0; j < n; ++j) {
          const Real ds = pi[j] * (dp[static_cast<std::size_t>(j)] - dot) * scale_factor;
          if (ds == Real(0)) continue;
          const Real* kj = x.row(j) + ko;
          Real* gkj = gx.row(j) + ko;
          for (int e = 0; e < hd; ++e) {
            gqi[e] += ds * kj[e];
            gkj[e] += ds * qi[e];
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------- losses

// Mean squared error over the rows flagged in `row_mask` (all columns).
template <typename Real>
Var masked_mse(Tape<Real>& t, Var pred, const Matrix<Real>& target, std::vector<char> row_mask) {
  const auto& pv = t.value(pred);
  detail::require(pv.same_shape(target), "masked_mse: shape mismatch " + pv.shape_string() + " vs " + target.shape_string());
  detail::require(static_cast<int>(row_mask.size()) == pv.rows(), "masked_mse: mask length");
  std::size_t rows_used = 0;
  for (char f : row_mask) rows_used += f ? 1 : 0;
  detail::require(rows_used > 0, "masked_mse: no rows selected");
  const Real denom = static_cast<Real>(rows_used * static_cast<std::size_t>(pv.cols()));
  Real acc = 0;
  for (int r = 0; r < pv.rows(); ++r) {
    if (!row_mask[static_cast<std::size_t>(r)]) continue;
    for (int c = 0; c < pv.cols(); ++c) {
      const Real e = pv(r, c) - target(r, c);
      acc += e * e;
    }
  }
  Matrix<Real> out(1, 1, acc / denom);
  return t.record(std::move(out), {pred},
                  [pred, target, row_mask = std::move(row_mask), denom](Tape<Real>& t, const Matrix<Real>& g) {
                    const auto& pv = t.value(pred);
                    auto& gp = t.grad_buffer(pred);
                    const Real s = Real(2) * g[0] / denom;
                    for (int r = 0; r < pv.rows(); ++r) {
                      if (!row_mask[static_cast<std::size_t>(r)]) continue;
                      for (int c = 0; c < pv.cols(); ++c) gp(r, c) += s * (pv(r, c) - target(r, c));
                    }
                  });
}

template <typename Real>
Var mse(Tape<Real>& t, Var pred, const Matrix<Real>& target) {
  return masked_mse(t, pred, target, std::vector<char>(static_cast<std::size_t>(t.value(pred).rows()), 1));
}

// Mean over all elements of  w_c * y * softplus(-z) + (1 - y) * softplus(z),
// i.e. weighted binary cross-entropy evaluated stably from logits.
template <typename Real>
Var bce_with_logits(Tape<Real>& t, Var logits, const Matrix<Real>& labels, std::vector<Real> pos_weight) {
  const auto& z = t.value(logits);
  detail::require(z.same_shape(labels), "bce_with_logits: shape mismatch");
  detail::require(static_cast<int>(pos_weight.size()) == z.cols(), "bce_with_logits: pos_weight length");
  auto softplus = [](Real v) { return v > Real(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); };
  Real acc = 0;
  for (int r = 0; r < z.rows(); ++r)
    for (int c = 0; c < z.cols(); ++c) {
      const Real y = labels(r, c);
      acc += pos_weight[static_cast<std::size_t>(c)] * y * softplus(-z(r, c)) + (Real(1) - y) * softplus(z(r, c));
    }
  const Real denom = static_cast<Real>(z.size());
  Matrix<Real> out(1, 1, acc / denom);
  return t.record(std::move(out), {logits},
                  [logits, labels, pos_weight = std::move(pos_weight), denom](Tape<Real>& t, const Matrix<Real>& g) {
                    const auto& z = t.value(logits);
                    auto& gz = t.grad_buffer(logits);
                    for (int r = 0; r < z.rows(); ++r)
                      for (int c = 0; c < z.cols(); ++c) {
                        const Real y = labels(r, c);
                        const Real s = stable_sigmoid(z(r, c));
                        const Real d = pos_weight[static_cast<std::size_t>(c)] * y * (s - Real(1)) + (Real(1) - y) * s;
                        gz(r, c) += g[0] * d / denom;
                      }
                  });
}

}  // namespace voxmae::ad
