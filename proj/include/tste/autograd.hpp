#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tste/tensor.hpp"

namespace tste {

/// Named trainable (or frozen) tensor owned by a module.
struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool train = true)
      : name(std::move(n)), value(std::move(v)), trainable(train) {}
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

struct GradEntry {
  Parameter* param = nullptr;
  Tensor grad;
};

/// Gradients keyed by parameter, in lease order (deterministic).
class GradMap {
 public:
  void add(Parameter* p, Tensor g) { entries_.push_back({p, std::move(g)}); }
  const std::vector<GradEntry>& entries() const { return entries_; }
  std::vector<GradEntry>& entries() { return entries_; }

  const Tensor* find(const Parameter& p) const {
    for (const auto& e : entries_)
      if (e.param == &p) return &e.grad;
    return nullptr;
  }

 private:
  std::vector<GradEntry> entries_;
};

/// Linear record of primitive operations; replayed in reverse for gradients.
/// Cleared (or destroyed) between optimization steps.
class Tape {
 public:
  using BackFn = std::function<void(Tape&, const Tensor& upstream)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Var lease(Parameter& p) {
    auto it = leased_.find(&p);
    if (it != leased_.end()) return Var{this, it->second};
    Node n;
    n.value = p.value;
    n.needs_grad = grad_enabled_ && p.trainable;
    n.param = &p;
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    leased_[&p] = id;
    lease_order_.push_back(id);
    return Var{this, id};
  }

  Var constant(Tensor v) {
    Node n;
    n.value = std::move(v);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  Var make_with(Tensor value, bool needs_grad, BackFn fn) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = grad_enabled_ && needs_grad;
    if (n.needs_grad) n.back = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  Var make(Tensor value, std::initializer_list<Var> parents, BackFn fn) {
    bool needs = false;
    for (Var p : parents) {
      check_var(p);
      if (nodes_[static_cast<size_t>(p.id)].needs_grad) {
        needs = true;
        break;
      }
    }
    return make_with(std::move(value), needs, std::move(fn));
  }

  const Tensor& value(Var v) const {
    check_var(v);
    return nodes_[static_cast<size_t>(v.id)].value;
  }

  bool wants(Var v) const {
    check_var(v);
    return nodes_[static_cast<size_t>(v.id)].needs_grad;
  }

  /// Gradient accumulation buffer, allocated on first touch.
  Tensor& grad_buf(Var v) {
    check_var(v);
    Node& n = nodes_[static_cast<size_t>(v.id)];
    if (n.grad.empty()) n.grad = Tensor(n.value.dims());
    return n.grad;
  }

  /// Accumulates `g` into the gradient of `v` if it participates.
  void accumulate(Var v, const Tensor& g) {
    if (!wants(v)) return;
    Tensor& buf = grad_buf(v);
    for (int64_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
  }

  GradMap backward(Var loss) {
    check_var(loss);
    const Node& root = nodes_[static_cast<size_t>(loss.id)];
    if (root.value.size() != 1) throw UsageError("backward root must be a scalar");
    if (root.needs_grad) {
      grad_buf(loss)[0] = 1.0f;
      for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.needs_grad || n.grad.empty() || !n.back) continue;
        n.back(*this, n.grad);
      }
    }
    GradMap out;
    for (int id : lease_order_) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.param || !n.param->trainable) continue;
      out.add(n.param, n.grad.empty() ? Tensor(n.value.dims()) : n.grad);
    }
    return out;
  }

  void clear() {
    nodes_.clear();
    leased_.clear();
    lease_order_.clear();
  }

  bool grad_enabled() const { return grad_enabled_; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    Parameter* param = nullptr;
    BackFn back;
  };

  void check_var(Var v) const {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw UsageError("var does not belong to this tape");
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> leased_;
  std::vector<int> lease_order_;
  bool grad_enabled_;
};

namespace detail {

inline Tape& tape_of(Var a) {
  if (!a.tape) throw UsageError("unbound var");
  return *a.tape;
}

inline void same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw UsageError("vars from different tapes");
}

inline double gauss_cdf(double x) { return 0.5 * std::erfc(-x * 0.7071067811865475244); }
inline double gauss_pdf(double x) { return std::exp(-0.5 * x * x) * 0.3989422804014326779; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
  detail::same_tape(a, b);
  Tape& t = detail::tape_of(a);
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  if (!A.same_dims(B)) throw ShapeError("add: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
  Tensor out(A.dims());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
  return t.make(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::same_tape(a, b);
  Tape& t = detail::tape_of(a);
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  if (!A.same_dims(B)) throw ShapeError("sub: shape mismatch");
  Tensor out(A.dims());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
  return t.make(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g);
    if (tp.wants(b)) {
      Tensor& gb = tp.grad_buf(b);
      for (int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  detail::same_tape(a, b);
  Tape& t = detail::tape_of(a);
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  if (!A.same_dims(B)) throw ShapeError("mul: shape mismatch");
  Tensor out(A.dims());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  return t.make(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.wants(a)) {
      Tensor& ga = tp.grad_buf(a);
      const Tensor& B2 = tp.value(b);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B2[i];
    }
    if (tp.wants(b)) {
      Tensor& gb = tp.grad_buf(b);
      const Tensor& A2 = tp.value(a);
      for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A2[i];
    }
  });
}

inline Var scale(Var a, float s) {
  Tape& t = detail::tape_of(a);
  const Tensor& A = t.value(a);
  Tensor out(A.dims());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = A[i] * s;
  return t.make(std::move(out), {a}, [a, s](Tape& tp, const Tensor& g) {
    if (tp.wants(a)) {
      Tensor& ga = tp.grad_buf(a);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    }
  });
}

inline Var neg(Var a) { return scale(a, -1.0f); }

inline Var gelu(Var a) {
  Tape& t = detail::tape_of(a);
  const Tensor& A = t.value(a);
  Tensor out(A.dims());
  for (int64_t i = 0; i < out.size(); ++i) {
    const double x = A[i];
    out[i] = static_cast<float>(x * detail::gauss_cdf(x));
  }
  return t.make(std::move(out), {a}, [a](Tape& tp, const Tensor& g) {
    if (!tp.wants(a)) return;
    Tensor& ga = tp.grad_buf(a);
    const Tensor& A2 = tp.value(a);
    for (int64_t i = 0; i < g.size(); ++i) {
      const double x = A2[i];
      ga[i] += g[i] * static_cast<float>(detail::gauss_cdf(x) + x * detail::gauss_pdf(x));
    }
  });
}

/// Stops gradient flow; value passes through.
inline Var detach(Var a) {
  Tape& t = detail::tape_of(a);
  return t.constant(t.value(a));
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b);
  Tape& t = detail::tape_of(a);
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw ShapeError("matmul: incompatible shapes " + A.shape_str() + " x " + B.shape_str());
  const int R = A.dim(0), K = A.dim(1), C = B.dim(1);
  Tensor out({R, C});
  kern::gemm_nn_acc(R, K, C, A.data(), B.data(), out.data());
  return t.make(std::move(out), {a, b}, [a, b, R, K, C](Tape& tp, const Tensor& g) {
    if (tp.wants(a))  // dA += g . B^T
      kern::gemm_nt_acc(R, C, K, g.data(), tp.value(b).data(), tp.grad_buf(a).data());
    if (tp.wants(b))  // dB += A^T . g
      kern::gemm_tn_acc(K, R, C, tp.value(a).data(), g.data(), tp.grad_buf(b).data());
  });
}

inline Var matvec(Var a, Var x) {
  detail::same_tape(a, x);
  Tape& t = detail::tape_of(a);
  const Tensor& A = t.value(a);
  const Tensor& X = t.value(x);
  if (A.rank() != 2 || X.rank() != 1 || A.dim(1) != X.dim(0))
    throw ShapeError("matvec: incompatible shapes " + A.shape_str() + " x " + X.shape_str());
  const int R = A.dim(0), K = A.dim(1);
  Tensor out({R});
  for (int r = 0; r < R; ++r) out[r] = kern::dot(K, A.row(r), X.data());
  return t.make(std::move(out), {a, x}, [a, x, R, K](Tape& tp, const Tensor& g) {
    if (tp.wants(a)) {
      Tensor& ga = tp.grad_buf(a);
      const Tensor& X2 = tp.value(x);
      for (int r = 0; r < R; ++r) kern::axpy(K, g[r], X2.data(), ga.row(r));
    }
    if (tp.wants(x)) {
      Tensor& gx = tp.grad_buf(x);
      const Tensor& A2 = tp.value(a);
      for (int r = 0; r < R; ++r) kern::axpy(K, g[r], A2.row(r), gx.data());
    }
  });
}

inline Var transpose(Var a) {
  Tape& t = detail::tape_of(a);
  const Tensor& A = t.value(a);
  if (A.rank() != 2) throw ShapeError("transpose: rank-2 input required");
  const int R = A.dim(0), C = A.dim(1);
  Tensor out({C, R});
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out.at(c, r) = A.at(r, c);
  return t.make(std::move(out), {a}, [a, R, C](Tape& tp, const Tensor& g) {
    if (!tp.wants(a)) return;
    Tensor& ga = tp.grad_buf(a);
    for (int c = 0; c < C; ++c)
      for (int r = 0; r < R; ++r) ga.at(r, c) += g.at(c, r);
  });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Causal dilated 1-D convolution. x: [C_in, T], w: [C_out, C_in, K].
/// Output position t sees x[:, t - (K-1-k)*dilation] only (implicit left zero
/// padding), so the result never depends on future samples.
inline Var conv1d_causal(Var x, Var w, int dilation) {
  detail::same_tape(x, w);
  if (dilation < 1) throw ParamError("conv1d_causal: dilation must be >= 1");
  Tape& t = detail::tape_of(x);
  const Tensor& X = t.value(x);
  const Tensor& W = t.value(w);
  if (X.rank() != 2 || W.rank() != 3) throw ShapeError("conv1d_causal: x must be [C,T], w [Co,Ci,K]");
  const int Ci = X.dim(0), T = X.dim(1);
  const int Co = W.dim(0), K = W.dim(2);
  if (W.dim(1) != Ci) throw ShapeError("conv1d_causal: channel mismatch");
  if (K < 1) throw ParamError("conv1d_causal: kernel must be >= 1");
  Tensor out({Co, T});
  for (int co = 0; co < Co; ++co) {
    float* orow = out.row(co);
    for (int ci = 0; ci < Ci; ++ci) {
      const float* xrow = X.row(ci);
      for (int k = 0; k < K; ++k) {
        const int off = (K - 1 - k) * dilation;
        if (off >= T) continue;
        const float wv = W.at(co, ci, k);
        if (wv == 0.0f) continue;
        kern::axpy(T - off, wv, xrow, orow + off);
      }
    }
  }
  return t.make(std::move(out), {x, w}, [x, w, dilation, Ci, T, Co, K](Tape& tp, const Tensor& g) {
    const Tensor& X2 = tp.value(x);
    const Tensor& W2 = tp.value(w);
    if (tp.wants(x)) {
      Tensor& gx = tp.grad_buf(x);
      for (int co = 0; co < Co; ++co) {
        const float* grow = g.row(co);
        for (int ci = 0; ci < Ci; ++ci) {
          float* gxrow = gx.row(ci);
          for (int k = 0; k < K; ++k) {
            const int off = (K - 1 - k) * dilation;
            if (off >= T) continue;
            const float wv = W2.at(co, ci, k);
            if (wv == 0.0f) continue;
            kern::axpy(T - off, wv, grow + off, gxrow);
          }
        }
      }
    }
    if (tp.wants(w)) {
      Tensor& gw = tp.grad_buf(w);
      for (int co = 0; co < Co; ++co) {
        const float* grow = g.row(co);
        for (int ci = 0; ci < Ci; ++ci) {
          const float* xrow = X2.row(ci);
          for (int k = 0; k < K; ++k) {
            const int off = (K - 1 - k) * dilation;
            if (off >= T) continue;
            gw.at(co, ci, k) += kern::dot(T - off, grow + off, xrow);
          }
        }
      }
    }
  });
}

/// x: [R, C] plus a bias indexed by row (conv channels).
inline Var add_row_bias(Var x, Var b) {
  detail::same_tape(x, b);
  Tape& t = detail::tape_of(x);
  const Tensor& X = t.value(x);
  const Tensor& B = t.value(b);
  if (X.rank() != 2 || B.rank() != 1 || B.dim(0) != X.dim(0))
    throw ShapeError("add_row_bias: bias length must match rows");
  const int R = X.dim(0), C = X.dim(1);
  Tensor out({R, C});
  for (int r = 0; r < R; ++r) {
    const float bv = B[r];
    const float* xr = X.row(r);
    float* orow = out.row(r);
    for (int c = 0; c < C; ++c) orow[c] = xr[c] + bv;
  }
  return t.make(std::move(out), {x, b}, [x, b, R, C](Tape& tp, const Tensor& g) {
    tp.accumulate(x, g);
    if (tp.wants(b)) {
      Tensor& gb = tp.grad_buf(b);
      for (int r = 0; r < R; ++r) gb[r] += static_cast<float>(kern::sum_f64(C, g.row(r)));
    }
  });
}

/// x: [R, C] plus a bias indexed by column (feature dims).
inline Var add_col_bias(Var x, Var b) {
  detail::same_tape(x, b);
  Tape& t = detail::tape_of(x);
  const Tensor& X = t.value(x);
  const Tensor& B = t.value(b);
  if (X.rank() != 2 || B.rank() != 1 || B.dim(0) != X.dim(1))
    throw ShapeError("add_col_bias: bias length must match columns");
  const int R = X.dim(0), C = X.dim(1);
  Tensor out({R, C});
  for (int r = 0; r < R; ++r) {
    const float* xr = X.row(r);
    float* orow = out.row(r);
    for (int c = 0; c < C; ++c) orow[c] = xr[c] + B[c];
  }
  return t.make(std::move(out), {x, b}, [x, b, R, C](Tape& tp, const Tensor& g) {
    tp.accumulate(x, g);
    if (tp.wants(b)) {
      Tensor& gb = tp.grad_buf(b);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) gb[c] += g.at(r, c);
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Batch norm over the column axis of x[C, T]: per-channel statistics across
/// time. Training mode uses batch statistics and updates the running buffers
/// in place; eval mode applies a per-channel affine from the running buffers.
inline Var batchnorm1d(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var,
                       bool training, float momentum = 0.1f, float eps = 1e-5f) {
  detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  Tape& t = detail::tape_of(x);
  const Tensor& X = t.value(x);
  const Tensor& G = t.value(gamma);
  const Tensor& B = t.value(beta);
  if (X.rank() != 2) throw ShapeError("batchnorm1d: x must be [C,T]");
  const int C = X.dim(0), T = X.dim(1);
  if (G.dim(0) != C || B.dim(0) != C || running_mean.dim(0) != C || running_var.dim(0) != C)
    throw ShapeError("batchnorm1d: channel count mismatch");

  if (!training) {
    Tensor out({C, T});
    for (int c = 0; c < C; ++c) {
      const float s = G[c] / std::sqrt(running_var[c] + eps);
      const float sh = B[c] - s * running_mean[c];
      const float* xr = X.row(c);
      float* orow = out.row(c);
      for (int i = 0; i < T; ++i) orow[i] = s * xr[i] + sh;
    }
    return t.make(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, C, T, rm = running_mean, rv = running_var, eps](Tape& tp, const Tensor& g) {
                    const Tensor& G2 = tp.value(gamma);
                    for (int c = 0; c < C; ++c) {
                      const float inv = 1.0f / std::sqrt(rv[c] + eps);
                      if (tp.wants(x)) kern::axpy(T, G2[c] * inv, g.row(c), tp.grad_buf(x).row(c));
                      if (tp.wants(gamma)) {
                        const Tensor& X2 = tp.value(x);
                        double s = 0.0;
                        for (int i = 0; i < T; ++i) s += g.at(c, i) * ((X2.at(c, i) - rm[c]) * inv);
                        tp.grad_buf(gamma)[c] += static_cast<float>(s);
                      }
                      if (tp.wants(beta))
                        tp.grad_buf(beta)[c] += static_cast<float>(kern::sum_f64(T, g.row(c)));
                    }
                  });
  }

  Tensor mean({C}), inv_std({C}), xhat({C, T});
  for (int c = 0; c < C; ++c) {
    const float* xr = X.row(c);
    const double mu = kern::sum_f64(T, xr) / T;
    double var = 0.0;
    for (int i = 0; i < T; ++i) {
      const double d = xr[i] - mu;
      var += d * d;
    }
    var /= T;
    mean[c] = static_cast<float>(mu);
    inv_std[c] = static_cast<float>(1.0 / std::sqrt(var + eps));
    float* xh = xhat.row(c);
    for (int i = 0; i < T; ++i) xh[i] = static_cast<float>((xr[i] - mu) * inv_std[c]);
    running_mean[c] = (1.0f - momentum) * running_mean[c] + momentum * mean[c];
    running_var[c] = (1.0f - momentum) * running_var[c] + momentum * static_cast<float>(var);
  }
  Tensor out({C, T});
  for (int c = 0; c < C; ++c) {
    const float* xh = xhat.row(c);
    float* orow = out.row(c);
    for (int i = 0; i < T; ++i) orow[i] = G[c] * xh[i] + B[c];
  }
  return t.make(std::move(out), {x, gamma, beta},
                [x, gamma, beta, C, T, xhat, inv_std](Tape& tp, const Tensor& g) {
                  const Tensor& G2 = tp.value(gamma);
                  for (int c = 0; c < C; ++c) {
                    const float* xh = xhat.row(c);
                    const float* gr = g.row(c);
                    if (tp.wants(beta))
                      tp.grad_buf(beta)[c] += static_cast<float>(kern::sum_f64(T, gr));
                    if (tp.wants(gamma)) {
                      double s = 0.0;
                      for (int i = 0; i < T; ++i) s += static_cast<double>(gr[i]) * xh[i];
                      tp.grad_buf(gamma)[c] += static_cast<float>(s);
                    }
                    if (tp.wants(x)) {
                      double gsum = 0.0, gxsum = 0.0;
                      for (int i = 0; i < T; ++i) {
                        gsum += gr[i];
                        gxsum += static_cast<double>(gr[i]) * xh[i];
                      }
                      const double gm = gsum / T, gxm = gxsum / T;
                      float* gx = tp.grad_buf(x).row(c);
                      const float a = G2[c] * inv_std[c];
                      for (int i = 0; i < T; ++i)
                        gx[i] += a * static_cast<float>(gr[i] - gm - xh[i] * gxm);
                    }
                  }
                });
}

/// Layer norm over each row of x[S, M] with per-column gain/shift.
inline Var layernorm_rows(Var x, Var gamma, Var beta, float eps = 1e-5f) {
  detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  Tape& t = detail::tape_of(x);
  const Tensor& X = t.value(x);
  const Tensor& G = t.value(gamma);
  const Tensor& B = t.value(beta);
  if (X.rank() != 2) throw ShapeError("layernorm_rows: x must be [S,M]");
  const int S = X.dim(0), M = X.dim(1);
  if (G.dim(0) != M || B.dim(0) != M) throw ShapeError("layernorm_rows: gain/shift length mismatch");
  Tensor xhat({S, M}), inv_std({S});
  for (int r = 0; r < S; ++r) {
    const float* xr = X.row(r);
    const double mu = kern::sum_f64(M, xr) / M;
    double var = 0.0;
    for (int i = 0; i < M; ++i) {
      const double d = xr[i] - mu;
      var += d * d;
    }
    var /= M;
    inv_std[r] = static_cast<float>(1.0 / std::sqrt(var + eps));
    float* xh = xhat.row(r);
    for (int i = 0; i < M; ++i) xh[i] = static_cast<float>((xr[i] - mu) * inv_std[r]);
  }
  Tensor out({S, M});
  for (int r = 0; r < S; ++r)
    for (int i = 0; i < M; ++i) out.at(r, i) = G[i] * xhat.at(r, i) + B[i];
  return t.make(std::move(out), {x, gamma, beta},
                [x, gamma, beta, S, M, xhat, inv_std](Tape& tp, const Tensor& g) {
                  const Tensor& G2 = tp.value(gamma);
                  if (tp.wants(beta)) {
                    Tensor& gb = tp.grad_buf(beta);
                    for (int r = 0; r < S; ++r)
                      for (int i = 0; i < M; ++i) gb[i] += g.at(r, i);
                  }
                  if (tp.wants(gamma)) {
                    Tensor& gg = tp.grad_buf(gamma);
                    for (int r = 0; r < S; ++r)
                      for (int i = 0; i < M; ++i) gg[i] += g.at(r, i) * xhat.at(r, i);
                  }
                  if (tp.wants(x)) {
                    Tensor& gx = tp.grad_buf(x);
                    for (int r = 0; r < S; ++r) {
                      const float* xh = xhat.row(r);
                      double gsum = 0.0, gxsum = 0.0;
                      for (int i = 0; i < M; ++i) {
                        const double gi = static_cast<double>(g.at(r, i)) * G2[i];
                        gsum += gi;
                        gxsum += gi * xh[i];
                      }
                      const double gm = gsum / M, gxm = gxsum / M;
                      float* gxr = gx.row(r);
                      for (int i = 0; i < M; ++i) {
                        const double gi = static_cast<double>(g.at(r, i)) * G2[i];
                        gxr[i] += inv_std[r] * static_cast<float>(gi - gm - xh[i] * gxm);
                      }
                    }
                  }
                });
}

// ---------------------------------------------------------------------------
// Attention pieces
// ---------------------------------------------------------------------------

/// Row-wise softmax over scores[S, S] with positions j > i masked out.
inline Var causal_softmax(Var scores) {
  Tape& t = detail::tape_of(scores);
  const Tensor& Z = t.value(scores);
  if (Z.rank() != 2 || Z.dim(0) != Z.dim(1)) throw ShapeError("causal_softmax: square matrix required");
  const int S = Z.dim(0);
  Tensor out({S, S});
  for (int i = 0; i < S; ++i) {
    const float* zr = Z.row(i);
    float m = zr[0];
    for (int j = 1; j <= i; ++j) m = std::max(m, zr[j]);
    double denom = 0.0;
    for (int j = 0; j <= i; ++j) denom += std::exp(static_cast<double>(zr[j]) - m);
    float* orow = out.row(i);
    for (int j = 0; j <= i; ++j)
      orow[j] = static_cast<float>(std::exp(static_cast<double>(zr[j]) - m) / denom);
  }
  const Tensor probs = out;
  return t.make(std::move(out), {scores}, [scores, S, P = probs](Tape& tp, const Tensor& g) {
    if (!tp.wants(scores)) return;
    Tensor& gz = tp.grad_buf(scores);
    for (int i = 0; i < S; ++i) {
      const float* pr = P.row(i);
      const float* gr = g.row(i);
      double dotv = 0.0;
      for (int j = 0; j <= i; ++j) dotv += static_cast<double>(gr[j]) * pr[j];
      float* gzr = gz.row(i);
      for (int j = 0; j <= i; ++j)
        gzr[j] += pr[j] * static_cast<float>(gr[j] - dotv);
    }
  });
}

// ---------------------------------------------------------------------------
// Similarity ops
// ---------------------------------------------------------------------------

namespace detail {
inline void check_nonzero_norm(double n, const char* what) {
  if (n < 1e-12) throw DegenerateInputError(std::string(what) + ": zero-norm input");
}
}  // namespace detail

/// Cosine similarity of two vectors; errors on zero-norm input.
inline Var cosine_sim(Var a, Var b) {
  detail::same_tape(a, b);
  Tape& t = detail::tape_of(a);
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  if (A.rank() != 1 || !A.same_dims(B)) throw ShapeError("cosine_sim: equal-length vectors required");
  const int n = A.dim(0);
  const double na = kern::norm_f64(n, A.data());
  const double nb = kern::norm_f64(n, B.data());
  detail::check_nonzero_norm(na, "cosine_sim");
  detail::check_nonzero_norm(nb, "cosine_sim");
  const double c = kern::dot_f64(n, A.data(), B.data()) / (na * nb);
  return t.make(Tensor::scalar(static_cast<float>(c)), {a, b},
                [a, b, n, na, nb, c](Tape& tp, const Tensor& g) {
                  const float gv = g[0];
                  const Tensor& A2 = tp.value(a);
                  const Tensor& B2 = tp.value(b);
                  if (tp.wants(a)) {
                    Tensor& ga = tp.grad_buf(a);
                    for (int i = 0; i < n; ++i)
                      ga[i] += gv * static_cast<float>(B2[i] / (na * nb) - c * A2[i] / (na * na));
                  }
                  if (tp.wants(b)) {
                    Tensor& gb = tp.grad_buf(b);
                    for (int i = 0; i < n; ++i)
                      gb[i] += gv * static_cast<float>(A2[i] / (na * nb) - c * B2[i] / (nb * nb));
                  }
                });
}

/// Cosine similarity of v against each row of rows[N, M] -> [N].
inline Var cosine_rows(Var v, Var rows) {
  detail::same_tape(v, rows);
  Tape& t = detail::tape_of(v);
  const Tensor& V = t.value(v);
  const Tensor& R = t.value(rows);
  if (V.rank() != 1 || R.rank() != 2 || R.dim(1) != V.dim(0))
    throw ShapeError("cosine_rows: v[M] vs rows[N,M] required");
  const int N = R.dim(0), M = R.dim(1);
  const double nv = kern::norm_f64(M, V.data());
  detail::check_nonzero_norm(nv, "cosine_rows");
  std::vector<double> nr(static_cast<size_t>(N));
  Tensor out({N});
  for (int i = 0; i < N; ++i) {
    nr[static_cast<size_t>(i)] = kern::norm_f64(M, R.row(i));
    detail::check_nonzero_norm(nr[static_cast<size_t>(i)], "cosine_rows");
    out[i] = static_cast<float>(kern::dot_f64(M, V.data(), R.row(i)) / (nv * nr[static_cast<size_t>(i)]));
  }
  const Tensor cvals = out;
  return t.make(std::move(out), {v, rows}, [v, rows, N, M, nv, nr, C = cvals](Tape& tp, const Tensor& g) {
    const Tensor& V2 = tp.value(v);
    const Tensor& R2 = tp.value(rows);
    if (tp.wants(v)) {
      Tensor& gv = tp.grad_buf(v);
      for (int i = 0; i < N; ++i) {
        const double s = nv * nr[static_cast<size_t>(i)];
        const float gi = g[i];
        if (gi == 0.0f) continue;
        const float ci = C[i];
        for (int m = 0; m < M; ++m)
          gv[m] += gi * static_cast<float>(R2.at(i, m) / s - ci * V2[m] / (nv * nv));
      }
    }
    if (tp.wants(rows)) {
      Tensor& gr = tp.grad_buf(rows);
      for (int i = 0; i < N; ++i) {
        const double s = nv * nr[static_cast<size_t>(i)];
        const double nri2 = nr[static_cast<size_t>(i)] * nr[static_cast<size_t>(i)];
        const float gi = g[i];
        if (gi == 0.0f) continue;
        const float ci = C[i];
        for (int m = 0; m < M; ++m)
          gr.at(i, m) += gi * static_cast<float>(V2[m] / s - ci * R2.at(i, m) / nri2);
      }
    }
  });
}

/// Pairwise cosine between columns of a[B, Ma] and b[B, Mb] -> [Ma, Mb].
inline Var cosine_cols(Var a, Var b) {
  detail::same_tape(a, b);
  Tape& t = detail::tape_of(a);
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  if (A.rank() != 2 || B.rank() != 2 || A.dim(0) != B.dim(0))
    throw ShapeError("cosine_cols: matching row counts required");
  const int Bn = A.dim(0), Ma = A.dim(1), Mb = B.dim(1);
  // Columns normalized up front; C = An^T Bn.
  Tensor An({Bn, Ma}), Bns({Bn, Mb});
  std::vector<double> na(static_cast<size_t>(Ma)), nb(static_cast<size_t>(Mb));
  for (int j = 0; j < Ma; ++j) {
    double s = 0.0;
    for (int r = 0; r < Bn; ++r) s += static_cast<double>(A.at(r, j)) * A.at(r, j);
    na[static_cast<size_t>(j)] = std::sqrt(s);
    detail::check_nonzero_norm(na[static_cast<size_t>(j)], "cosine_cols");
    for (int r = 0; r < Bn; ++r) An.at(r, j) = static_cast<float>(A.at(r, j) / na[static_cast<size_t>(j)]);
  }
  for (int j = 0; j < Mb; ++j) {
    double s = 0.0;
    for (int r = 0; r < Bn; ++r) s += static_cast<double>(B.at(r, j)) * B.at(r, j);
    nb[static_cast<size_t>(j)] = std::sqrt(s);
    detail::check_nonzero_norm(nb[static_cast<size_t>(j)], "cosine_cols");
    for (int r = 0; r < Bn; ++r) Bns.at(r, j) = static_cast<float>(B.at(r, j) / nb[static_cast<size_t>(j)]);
  }
  Tensor out({Ma, Mb});
  kern::gemm_tn_acc(Ma, Bn, Mb, An.data(), Bns.data(), out.data());
  return t.make(std::move(out), {a, b},
                [a, b, Bn, Ma, Mb, An, Bns, na, nb](Tape& tp, const Tensor& g) {
                  if (tp.wants(a)) {
                    // dAn = Bn . g^T ; then project out the normalized direction per column.
                    Tensor dAn({Bn, Ma});
                    kern::gemm_nt_acc(Bn, Mb, Ma, Bns.data(), g.data(), dAn.data());
                    Tensor& ga = tp.grad_buf(a);
                    for (int j = 0; j < Ma; ++j) {
                      double proj = 0.0;
                      for (int r = 0; r < Bn; ++r) proj += static_cast<double>(An.at(r, j)) * dAn.at(r, j);
                      for (int r = 0; r < Bn; ++r)
                        ga.at(r, j) += static_cast<float>((dAn.at(r, j) - An.at(r, j) * proj) / na[static_cast<size_t>(j)]);
                    }
                  }
                  if (tp.wants(b)) {
                    Tensor dBn({Bn, Mb});
                    kern::gemm_nn_acc(Bn, Ma, Mb, An.data(), g.data(), dBn.data());
                    Tensor& gb = tp.grad_buf(b);
                    for (int j = 0; j < Mb; ++j) {
                      double proj = 0.0;
                      for (int r = 0; r < Bn; ++r) proj += static_cast<double>(Bns.at(r, j)) * dBn.at(r, j);
                      for (int r = 0; r < Bn; ++r)
                        gb.at(r, j) += static_cast<float>((dBn.at(r, j) - Bns.at(r, j) * proj) / nb[static_cast<size_t>(j)]);
                    }
                  }
                });
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

inline Var diag(Var x) {
  Tape& t = detail::tape_of(x);
  const Tensor& X = t.value(x);
  if (X.rank() != 2 || X.dim(0) != X.dim(1)) throw ShapeError("diag: square matrix required");
  const int n = X.dim(0);
  Tensor out({n});
  for (int i = 0; i < n; ++i) out[i] = X.at(i, i);
  return t.make(std::move(out), {x}, [x, n](Tape& tp, const Tensor& g) {
    if (!tp.wants(x)) return;
    Tensor& gx = tp.grad_buf(x);
    for (int i = 0; i < n; ++i) gx.at(i, i) += g[i];
  });
}

inline Var concat(Var a, Var b) {
  detail::same_tape(a, b);
  Tape& t = detail::tape_of(a);
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  if (A.rank() != 1 || B.rank() != 1) throw ShapeError("concat: vectors required");
  const int n = A.dim(0), m = B.dim(0);
  Tensor out({n + m});
  for (int i = 0; i < n; ++i) out[i] = A[i];
  for (int i = 0; i < m; ++i) out[n + i] = B[i];
  return t.make(std::move(out), {a, b}, [a, b, n, m](Tape& tp, const Tensor& g) {
    if (tp.wants(a)) {
      Tensor& ga = tp.grad_buf(a);
      for (int i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (tp.wants(b)) {
      Tensor& gb = tp.grad_buf(b);
      for (int i = 0; i < m; ++i) gb[i] += g[n + i];
    }
  });
}

inline Var concat_rows(Var a, Var b) {
  detail::same_tape(a, b);
  Tape& t = detail::tape_of(a);
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(1))
    throw ShapeError("concat_rows: column counts must match");
  const int Ra = A.dim(0), Rb = B.dim(0), C = A.dim(1);
  Tensor out({Ra + Rb, C});
  for (int r = 0; r < Ra; ++r)
    for (int c = 0; c < C; ++c) out.at(r, c) = A.at(r, c);
  for (int r = 0; r < Rb; ++r)
    for (int c = 0; c < C; ++c) out.at(Ra + r, c) = B.at(r, c);
  return t.make(std::move(out), {a, b}, [a, b, Ra, Rb, C](Tape& tp, const Tensor& g) {
    if (tp.wants(a)) {
      Tensor& ga = tp.grad_buf(a);
      for (int r = 0; r < Ra; ++r)
        for (int c = 0; c < C; ++c) ga.at(r, c) += g.at(r, c);
    }
    if (tp.wants(b)) {
      Tensor& gb = tp.grad_buf(b);
      for (int r = 0; r < Rb; ++r)
        for (int c = 0; c < C; ++c) gb.at(r, c) += g.at(Ra + r, c);
    }
  });
}

inline Var concat_cols(Var a, Var b) {
  detail::same_tape(a, b);
  Tape& t = detail::tape_of(a);
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  if (A.rank() != 2 || B.rank() != 2 || A.dim(0) != B.dim(0))
    throw ShapeError("concat_cols: row counts must match");
  const int R = A.dim(0), Ca = A.dim(1), Cb = B.dim(1);
  Tensor out({R, Ca + Cb});
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < Ca; ++c) out.at(r, c) = A.at(r, c);
    for (int c = 0; c < Cb; ++c) out.at(r, Ca + c) = B.at(r, c);
  }
  return t.make(std::move(out), {a, b}, [a, b, R, Ca, Cb](Tape& tp, const Tensor& g) {
    if (tp.wants(a)) {
      Tensor& ga = tp.grad_buf(a);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < Ca; ++c) ga.at(r, c) += g.at(r, c);
    }
    if (tp.wants(b)) {
      Tensor& gb = tp.grad_buf(b);
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < Cb; ++c) gb.at(r, c) += g.at(r, Ca + c);
    }
  });
}

inline Var stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw UsageError("stack_rows: no rows");
  Tape& t = detail::tape_of(rows[0]);
  const int M = t.value(rows[0]).dim(0);
  const int n = static_cast<int>(rows.size());
  Tensor out({n, M});
  bool needs = false;
  for (int i = 0; i < n; ++i) {
    detail::same_tape(rows[0], rows[i]);
    const Tensor& R = t.value(rows[i]);
    if (R.rank() != 1 || R.dim(0) != M) throw ShapeError("stack_rows: row length mismatch");
    for (int m = 0; m < M; ++m) out.at(i, m) = R[m];
    needs = needs || t.wants(rows[i]);
  }
  return t.make_with(std::move(out), needs, [rows, n, M](Tape& tp, const Tensor& g) {
    for (int i = 0; i < n; ++i) {
      if (!tp.wants(rows[static_cast<size_t>(i)])) continue;
      Tensor& gr = tp.grad_buf(rows[static_cast<size_t>(i)]);
      for (int m = 0; m < M; ++m) gr[m] += g.at(i, m);
    }
  });
}

inline Var slice_cols(Var x, int start, int len) {
  Tape& t = detail::tape_of(x);
  const Tensor& X = t.value(x);
  if (X.rank() != 2) throw ShapeError("slice_cols: rank-2 input required");
  if (start < 0 || len < 1 || start + len > X.dim(1)) throw ShapeError("slice_cols: out of range");
  const int R = X.dim(0);
  Tensor out({R, len});
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < len; ++c) out.at(r, c) = X.at(r, start + c);
  return t.make(std::move(out), {x}, [x, start, len, R](Tape& tp, const Tensor& g) {
    if (!tp.wants(x)) return;
    Tensor& gx = tp.grad_buf(x);
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < len; ++c) gx.at(r, start + c) += g.at(r, c);
  });
}

inline Var select_row(Var x, int r) {
  Tape& t = detail::tape_of(x);
  const Tensor& X = t.value(x);
  if (X.rank() != 2 || r < 0 || r >= X.dim(0)) throw ShapeError("select_row: out of range");
  const int C = X.dim(1);
  Tensor out({C});
  for (int c = 0; c < C; ++c) out[c] = X.at(r, c);
  return t.make(std::move(out), {x}, [x, r, C](Tape& tp, const Tensor& g) {
    if (!tp.wants(x)) return;
    Tensor& gx = tp.grad_buf(x);
    for (int c = 0; c < C; ++c) gx.at(r, c) += g[c];
  });
}

inline Var select_col(Var x, int c) {
  Tape& t = detail::tape_of(x);
  const Tensor& X = t.value(x);
  if (X.rank() != 2 || c < 0 || c >= X.dim(1)) throw ShapeError("select_col: out of range");
  const int R = X.dim(0);
  Tensor out({R});
  for (int r = 0; r < R; ++r) out[r] = X.at(r, c);
  return t.make(std::move(out), {x}, [x, c, R](Tape& tp, const Tensor& g) {
    if (!tp.wants(x)) return;
    Tensor& gx = tp.grad_buf(x);
    for (int r = 0; r < R; ++r) gx.at(r, c) += g[r];
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

inline Var sum(Var x) {
  Tape& t = detail::tape_of(x);
  const Tensor& X = t.value(x);
  const double s = kern::sum_f64(X.size(), X.data());
  return t.make(Tensor::scalar(static_cast<float>(s)), {x}, [x](Tape& tp, const Tensor& g) {
    if (!tp.wants(x)) return;
    Tensor& gx = tp.grad_buf(x);
    for (int64_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
  });
}

inline Var mean(Var x) {
  Tape& t = detail::tape_of(x);
  const Tensor& X = t.value(x);
  const int64_t n = X.size();
  const double s = kern::sum_f64(n, X.data()) / static_cast<double>(n);
  return t.make(Tensor::scalar(static_cast<float>(s)), {x}, [x, n](Tape& tp, const Tensor& g) {
    if (!tp.wants(x)) return;
    Tensor& gx = tp.grad_buf(x);
    const float gv = g[0] / static_cast<float>(n);
    for (int64_t i = 0; i < gx.size(); ++i) gx[i] += gv;
  });
}

inline Var logsumexp(Var v) {
  Tape& t = detail::tape_of(v);
  const Tensor& V = t.value(v);
  if (V.rank() != 1) throw ShapeError("logsumexp: vector required");
  const int n = V.dim(0);
  float m = V[0];
  for (int i = 1; i < n; ++i) m = std::max(m, V[i]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(static_cast<double>(V[i]) - m);
  const double lse = m + std::log(s);
  Tensor soft({n});
  for (int i = 0; i < n; ++i)
    soft[i] = static_cast<float>(std::exp(static_cast<double>(V[i]) - lse));
  return t.make(Tensor::scalar(static_cast<float>(lse)), {v}, [v, soft, n](Tape& tp, const Tensor& g) {
    if (!tp.wants(v)) return;
    Tensor& gv = tp.grad_buf(v);
    for (int i = 0; i < n; ++i) gv[i] += g[0] * soft[i];
  });
}

inline Var logsumexp_rows(Var x) {
  Tape& t = detail::tape_of(x);
  const Tensor& X = t.value(x);
  if (X.rank() != 2) throw ShapeError("logsumexp_rows: rank-2 input required");
  const int R = X.dim(0), C = X.dim(1);
  Tensor out({R}), soft({R, C});
  for (int r = 0; r < R; ++r) {
    const float* xr = X.row(r);
    float m = xr[0];
    for (int c = 1; c < C; ++c) m = std::max(m, xr[c]);
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += std::exp(static_cast<double>(xr[c]) - m);
    const double lse = m + std::log(s);
    out[r] = static_cast<float>(lse);
    for (int c = 0; c < C; ++c)
      soft.at(r, c) = static_cast<float>(std::exp(static_cast<double>(xr[c]) - lse));
  }
  return t.make(std::move(out), {x}, [x, soft, R, C](Tape& tp, const Tensor& g) {
    if (!tp.wants(x)) return;
    Tensor& gx = tp.grad_buf(x);
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) gx.at(r, c) += g[r] * soft.at(r, c);
  });
}

/// Softmax cross entropy against a single target index.
inline Var cross_entropy_logits(Var logits, int label) {
  Tape& t = detail::tape_of(logits);
  const Tensor& Z = t.value(logits);
  if (Z.rank() != 1) throw ShapeError("cross_entropy_logits: vector of logits required");
  const int n = Z.dim(0);
  if (label < 0 || label >= n) throw ParamError("cross_entropy_logits: label out of range");
  float m = Z[0];
  for (int i = 1; i < n; ++i) m = std::max(m, Z[i]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(static_cast<double>(Z[i]) - m);
  const double lse = m + std::log(s);
  const double loss = lse - Z[label];
  Tensor soft({n});
  for (int i = 0; i < n; ++i)
    soft[i] = static_cast<float>(std::exp(static_cast<double>(Z[i]) - lse));
  return t.make(Tensor::scalar(static_cast<float>(loss)), {logits},
                [logits, soft, label, n](Tape& tp, const Tensor& g) {
                  if (!tp.wants(logits)) return;
                  Tensor& gz = tp.grad_buf(logits);
                  for (int i = 0; i < n; ++i)
                    gz[i] += g[0] * (soft[i] - (i == label ? 1.0f : 0.0f));
                });
}

/// Mean squared error against a fixed target.
inline Var mse(Var pred, const Tensor& target) {
  Tape& t = detail::tape_of(pred);
  const Tensor& P = t.value(pred);
  if (!P.same_dims(target)) throw ShapeError("mse: shape mismatch");
  const int64_t n = P.size();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(P[i]) - target[i];
    s += d * d;
  }
  return t.make(Tensor::scalar(static_cast<float>(s / static_cast<double>(n))), {pred},
                [pred, target, n](Tape& tp, const Tensor& g) {
                  if (!tp.wants(pred)) return;
                  Tensor& gp = tp.grad_buf(pred);
                  const Tensor& P2 = tp.value(pred);
                  const float a = 2.0f * g[0] / static_cast<float>(n);
                  for (int64_t i = 0; i < n; ++i) gp[i] += a * (P2[i] - target[i]);
                });
}

}  // namespace tste
