#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "vscd/errors.hpp"
#include "vscd/tensor.hpp"

namespace vscd {

// Reverse-mode tape over dense tensors. Nodes are appended in topological
// order; backward() walks them in reverse. Ops are coarse-grained (whole
// tensors), so the tape stays short even for a full pipeline forward.
template <typename T>
class Tape {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  size_t size() const { return nodes_.size(); }

  Var leaf(Tensor<T> value, bool needs_grad) {
    nodes_.push_back(Node{std::move(value), {}, {}, needs_grad});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  const Tensor<T>& val(Var v) const { return nodes_[v.id].value; }

  // Valid after backward(); zero tensor if the node never received gradient.
  const Tensor<T>& grad(Var v) {
    Node& n = nodes_[v.id];
    ensure_grad(n);
    return n.grad;
  }

  T scalar(Var v) const {
    const Tensor<T>& t = val(v);
    if (t.numel() != 1) throw InputError("scalar(): var is not a scalar");
    return t.data[0];
  }

  void backward(Var root) {
    const Tensor<T>& rv = val(root);
    if (rv.numel() != 1) throw InputError("backward(): root must be scalar");
    ensure_grad(nodes_[root.id]);
    nodes_[root.id].grad.data[0] = T(1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.backward_fn && n.needs_grad && n.grad.numel() > 0) n.backward_fn(*this, n.grad);
    }
  }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    Tensor<T> out = val(a);
    const Tensor<T>& bv = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t, const Tensor<T>& g) {
      t.accumulate(a, g);
      t.accumulate(b, g);
    });
  }

  Var sub(Var a, Var b) {
    check_same(a, b, "sub");
    Tensor<T> out = val(a);
    const Tensor<T>& bv = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t, const Tensor<T>& g) {
      t.accumulate(a, g);
      if (t.wants(b)) {
        Tensor<T> gb = g;
        for (auto& v : gb.data) v = -v;
        t.accumulate(b, gb);
      }
    });
  }

  Var mul(Var a, Var b) {
    check_same(a, b, "mul");
    Tensor<T> out = val(a);
    const Tensor<T>& bv = val(b);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t, const Tensor<T>& g) {
      if (t.wants(a)) {
        Tensor<T> ga = g;
        const Tensor<T>& bv2 = t.val(b);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] *= bv2[i];
        t.accumulate(a, ga);
      }
      if (t.wants(b)) {
        Tensor<T> gb = g;
        const Tensor<T>& av2 = t.val(a);
        for (int64_t i = 0; i < gb.numel(); ++i) gb[i] *= av2[i];
        t.accumulate(b, gb);
      }
    });
  }

  Var scale(Var a, T c) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v *= c;
    return make(std::move(out), {a}, [a, c](Tape& t, const Tensor<T>& g) {
      Tensor<T> ga = g;
      for (auto& v : ga.data) v *= c;
      t.accumulate(a, ga);
    });
  }

  Var add_const(Var a, T c) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v += c;
    return make(std::move(out), {a},
                [a](Tape& t, const Tensor<T>& g) { t.accumulate(a, g); });
  }

  Var gelu(Var a) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) {
      double x = static_cast<double>(v);
      v = static_cast<T>(0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244)));
    }
    return make(std::move(out), {a}, [a](Tape& t, const Tensor<T>& g) {
      const Tensor<T>& xv = t.val(a);
      Tensor<T> ga = g;
      for (int64_t i = 0; i < ga.numel(); ++i) {
        double x = static_cast<double>(xv[i]);
        double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
        double pdf = 0.3989422804014326779 * std::exp(-0.5 * x * x);
        ga[i] *= static_cast<T>(cdf + x * pdf);
      }
      t.accumulate(a, ga);
    });
  }

  Var sigmoid(Var a) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v = sigmoid_scalar(v);
    Var r = make(std::move(out), {a}, {});
    int rid = r.id;
    nodes_[rid].backward_fn = [a, rid](Tape& t, const Tensor<T>& g) {
      const Tensor<T>& s = t.nodes_[rid].value;
      Tensor<T> ga = g;
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] *= s[i] * (T(1) - s[i]);
      t.accumulate(a, ga);
    };
    return r;
  }

  // ---- reductions ----

  Var sum(Var a) {
    T acc = T(0);
    for (const T& v : val(a).data) acc += v;
    return make(Tensor<T>::from({1}, {acc}), {a}, [a](Tape& t, const Tensor<T>& g) {
      if (!t.wants(a)) return;
      Tensor<T> ga(t.val(a).shape);
      ga.fill(g[0]);
      t.accumulate(a, ga);
    });
  }

  Var mean(Var a) {
    int64_t n = val(a).numel();
    T acc = T(0);
    for (const T& v : val(a).data) acc += v;
    acc /= static_cast<T>(n);
    return make(Tensor<T>::from({1}, {acc}), {a}, [a, n](Tape& t, const Tensor<T>& g) {
      if (!t.wants(a)) return;
      Tensor<T> ga(t.val(a).shape);
      ga.fill(g[0] / static_cast<T>(n));
      t.accumulate(a, ga);
    });
  }

  Var add_many(const std::vector<Var>& xs) {
    if (xs.empty()) throw InputError("add_many(): empty list");
    Tensor<T> out = val(xs[0]);
    for (size_t i = 1; i < xs.size(); ++i) {
      const Tensor<T>& v = val(xs[i]);
      for (int64_t j = 0; j < out.numel(); ++j) out[j] += v[j];
    }
    std::vector<Var> deps = xs;
    return make(std::move(out), deps, [deps](Tape& t, const Tensor<T>& g) {
      for (Var x : deps) t.accumulate(x, g);
    });
  }

  // ---- linear algebra ----

  // y = x * W^T + b;  x:[n,din], W:[dout,din], b:[dout] (optional)
  Var linear(Var x, Var w, Var b) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& wv = val(w);
    int n = xv.dim(0), din = xv.dim(1), dout = wv.dim(0);
    if (wv.dim(1) != din) throw ConfigError("linear(): weight/input dim mismatch");
    Tensor<T> out({n, dout});
    const bool has_b = b.valid();
    const T* bp = has_b ? val(b).ptr() : nullptr;
    for (int i = 0; i < n; ++i) {
      const T* xr = xv.ptr() + static_cast<size_t>(i) * din;
      T* orow = out.ptr() + static_cast<size_t>(i) * dout;
      for (int o = 0; o < dout; ++o) {
        const T* wr = wv.ptr() + static_cast<size_t>(o) * din;
        T acc = has_b ? bp[o] : T(0);
        for (int k = 0; k < din; ++k) acc += xr[k] * wr[k];
        orow[o] = acc;
      }
    }
    return make(std::move(out), {x, w, b}, [x, w, b, n, din, dout](Tape& t, const Tensor<T>& g) {
      const Tensor<T>& xv2 = t.val(x);
      const Tensor<T>& wv2 = t.val(w);
      if (t.wants(x)) {
        Tensor<T> gx({n, din});
        for (int i = 0; i < n; ++i)
          for (int o = 0; o < dout; ++o) {
            T gv = g.ptr()[static_cast<size_t>(i) * dout + o];
            const T* wr = wv2.ptr() + static_cast<size_t>(o) * din;
            T* gxr = gx.ptr() + static_cast<size_t>(i) * din;
            for (int k = 0; k < din; ++k) gxr[k] += gv * wr[k];
          }
        t.accumulate(x, gx);
      }
      if (t.wants(w)) {
        Tensor<T> gw({dout, din});
        for (int i = 0; i < n; ++i)
          for (int o = 0; o < dout; ++o) {
            T gv = g.ptr()[static_cast<size_t>(i) * dout + o];
            const T* xr = xv2.ptr() + static_cast<size_t>(i) * din;
            T* gwr = gw.ptr() + static_cast<size_t>(o) * din;
            for (int k = 0; k < din; ++k) gwr[k] += gv * xr[k];
          }
        t.accumulate(w, gw);
      }
      if (b.valid() && t.wants(b)) {
        Tensor<T> gb({dout});
        for (int i = 0; i < n; ++i)
          for (int o = 0; o < dout; ++o) gb[o] += g.ptr()[static_cast<size_t>(i) * dout + o];
        t.accumulate(b, gb);
      }
    });
  }

  Var matmul(Var a, Var b) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    if (bv.dim(0) != k) throw ConfigError("matmul(): inner dim mismatch");
    Tensor<T> out({m, n});
    for (int i = 0; i < m; ++i)
      for (int kk = 0; kk < k; ++kk) {
        T aik = av.at(i, kk);
        const T* br = bv.ptr() + static_cast<size_t>(kk) * n;
        T* orow = out.ptr() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) orow[j] += aik * br[j];
      }
    return make(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor<T>& g) {
      const Tensor<T>& av2 = t.val(a);
      const Tensor<T>& bv2 = t.val(b);
      if (t.wants(a)) {
        Tensor<T> ga({m, k});
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            T gv = g.at(i, j);
            for (int kk = 0; kk < k; ++kk) ga.at(i, kk) += gv * bv2.at(kk, j);
          }
        t.accumulate(a, ga);
      }
      if (t.wants(b)) {
        Tensor<T> gb({k, n});
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            T aik = av2.at(i, kk);
            for (int j = 0; j < n; ++j) gb.at(kk, j) += aik * g.at(i, j);
          }
        t.accumulate(b, gb);
      }
    });
  }

  Var transpose(Var a) {
    const Tensor<T>& av = val(a);
    int m = av.dim(0), n = av.dim(1);
    Tensor<T> out({n, m});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
    return make(std::move(out), {a}, [a, m, n](Tape& t, const Tensor<T>& g) {
      Tensor<T> ga({m, n});
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga.at(i, j) = g.at(j, i);
      t.accumulate(a, ga);
    });
  }

  Var slice_cols(Var a, int c0, int c1) {
    const Tensor<T>& av = val(a);
    int n = av.dim(0), d = av.dim(1), w = c1 - c0;
    Tensor<T> out({n, w});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < w; ++j) out.at(i, j) = av.at(i, c0 + j);
    return make(std::move(out), {a}, [a, n, d, c0, w](Tape& t, const Tensor<T>& g) {
      Tensor<T> ga({n, d});
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j) ga.at(i, c0 + j) = g.at(i, j);
      t.accumulate(a, ga);
    });
  }

  Var concat_cols(const std::vector<Var>& xs) {
    int n = val(xs[0]).dim(0);
    int total = 0;
    for (Var x : xs) total += val(x).dim(1);
    Tensor<T> out({n, total});
    int off = 0;
    for (Var x : xs) {
      const Tensor<T>& xv = val(x);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < xv.dim(1); ++j) out.at(i, off + j) = xv.at(i, j);
      off += xv.dim(1);
    }
    std::vector<Var> deps = xs;
    return make(std::move(out), deps, [deps, n](Tape& t, const Tensor<T>& g) {
      int off2 = 0;
      for (Var x : deps) {
        int w = t.val(x).dim(1);
        if (t.wants(x)) {
          Tensor<T> gx({n, w});
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < w; ++j) gx.at(i, j) = g.at(i, off2 + j);
          t.accumulate(x, gx);
        }
        off2 += w;
      }
    });
  }

  Var stack_rows(const std::vector<Var>& rows) {
    int n = static_cast<int>(rows.size());
    int d = static_cast<int>(val(rows[0]).numel());
    Tensor<T> out({n, d});
    for (int i = 0; i < n; ++i) {
      const Tensor<T>& rv = val(rows[i]);
      for (int j = 0; j < d; ++j) out.at(i, j) = rv[j];
    }
    std::vector<Var> deps = rows;
    return make(std::move(out), deps, [deps, d](Tape& t, const Tensor<T>& g) {
      for (size_t i = 0; i < deps.size(); ++i) {
        if (!t.wants(deps[i])) continue;
        Tensor<T> gr(t.val(deps[i]).shape);
        for (int j = 0; j < d; ++j) gr[j] = g.at(static_cast<int>(i), j);
        t.accumulate(deps[i], gr);
      }
    });
  }

  Var gather_rc(Var m, int r, int c) {
    const Tensor<T>& mv = val(m);
    Tensor<T> out = Tensor<T>::from({1}, {mv.at(r, c)});
    return make(std::move(out), {m}, [m, r, c](Tape& t, const Tensor<T>& g) {
      if (!t.wants(m)) return;
      Tensor<T> gm(t.val(m).shape);
      gm.at(r, c) = g[0];
      t.accumulate(m, gm);
    });
  }

  // ---- normalization / activations over rows ----

  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
    const Tensor<T>& xv = val(x);
    int n = xv.dim(0), d = xv.dim(1);
    Tensor<T> out({n, d});
    Tensor<T> inv_std({n}), meanv({n});
    for (int i = 0; i < n; ++i) {
      const T* xr = xv.ptr() + static_cast<size_t>(i) * d;
      T mu = T(0);
      for (int j = 0; j < d; ++j) mu += xr[j];
      mu /= static_cast<T>(d);
      T var = T(0);
      for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var /= static_cast<T>(d);
      T is = T(1) / std::sqrt(var + eps);
      meanv[i] = mu;
      inv_std[i] = is;
      const T* gp = val(gamma).ptr();
      const T* bp = val(beta).ptr();
      T* orow = out.ptr() + static_cast<size_t>(i) * d;
      for (int j = 0; j < d; ++j) orow[j] = (xr[j] - mu) * is * gp[j] + bp[j];
    }
    auto mu_t = std::make_shared<Tensor<T>>(std::move(meanv));
    auto is_t = std::make_shared<Tensor<T>>(std::move(inv_std));
    return make(std::move(out), {x, gamma, beta},
                [x, gamma, beta, n, d, mu_t, is_t](Tape& t, const Tensor<T>& g) {
      const Tensor<T>& xv2 = t.val(x);
      const T* gp = t.val(gamma).ptr();
      Tensor<T> gx({n, d}), ggamma({d}), gbeta({d});
      for (int i = 0; i < n; ++i) {
        const T* xr = xv2.ptr() + static_cast<size_t>(i) * d;
        const T* gr = g.ptr() + static_cast<size_t>(i) * d;
        T mu = (*mu_t)[i], is = (*is_t)[i];
        T sum_gy = T(0), sum_gyx = T(0);
        for (int j = 0; j < d; ++j) {
          T xhat = (xr[j] - mu) * is;
          T gy = gr[j] * gp[j];
          sum_gy += gy;
          sum_gyx += gy * xhat;
          ggamma[j] += gr[j] * xhat;
          gbeta[j] += gr[j];
        }
        T* gxr = gx.ptr() + static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) {
          T xhat = (xr[j] - mu) * is;
          T gy = gr[j] * gp[j];
          gxr[j] = is * (gy - sum_gy / static_cast<T>(d) - xhat * sum_gyx / static_cast<T>(d));
        }
      }
      t.accumulate(x, gx);
      t.accumulate(gamma, ggamma);
      t.accumulate(beta, gbeta);
    });
  }

  // Row-wise softmax with temperature and max-subtraction.
  Var softmax_rows(Var x, T temperature = T(1)) {
    if (temperature <= T(0)) throw ConfigError("softmax_rows(): temperature must be > 0");
    const Tensor<T>& xv = val(x);
    int n = xv.dim(0), d = xv.dim(1);
    Tensor<T> out({n, d});
    for (int i = 0; i < n; ++i) {
      const T* xr = xv.ptr() + static_cast<size_t>(i) * d;
      T* orow = out.ptr() + static_cast<size_t>(i) * d;
      T mx = xr[0];
      for (int j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
      T z = T(0);
      for (int j = 0; j < d; ++j) {
        orow[j] = std::exp((xr[j] - mx) / temperature);
        z += orow[j];
      }
      for (int j = 0; j < d; ++j) orow[j] /= z;
    }
    Var r = make(std::move(out), {x}, {});
    int rid = r.id;
    nodes_[rid].backward_fn = [x, rid, n, d, temperature](Tape& t, const Tensor<T>& g) {
      const Tensor<T>& p = t.nodes_[rid].value;
      Tensor<T> gx({n, d});
      for (int i = 0; i < n; ++i) {
        const T* pr = p.ptr() + static_cast<size_t>(i) * d;
        const T* gr = g.ptr() + static_cast<size_t>(i) * d;
        T dot = T(0);
        for (int j = 0; j < d; ++j) dot += gr[j] * pr[j];
        T* gxr = gx.ptr() + static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) gxr[j] = pr[j] * (gr[j] - dot) / temperature;
      }
      t.accumulate(x, gx);
    };
    return r;
  }

  // ---- conv / spatial ----

  // x:[Cin,H,W], w:[Cout,Cin,kh,kw], b:[Cout] optional; stride 1, zero pad.
  Var conv2d(Var x, Var w, Var b, int pad) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& wv = val(w);
    int cin = xv.dim(0), h = xv.dim(1), ww = xv.dim(2);
    int cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    if (wv.dim(1) != cin) throw ConfigError("conv2d(): channel mismatch");
    Tensor<T> out({cout, h, ww});
    const bool has_b = b.valid();
    for (int co = 0; co < cout; ++co) {
      T bias = has_b ? val(b)[co] : T(0);
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < ww; ++xx) out.at(co, y, xx) = bias;
      for (int ci = 0; ci < cin; ++ci)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            T wgt = wv.data[((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx];
            if (wgt == T(0)) continue;
            int sy = ky - pad, sx = kx - pad;
            int y0 = std::max(0, -sy), y1 = std::min(h, h - sy);
            int x0 = std::max(0, -sx), x1 = std::min(ww, ww - sx);
            for (int y = y0; y < y1; ++y) {
              const T* xr = xv.ptr() + (static_cast<size_t>(ci) * h + (y + sy)) * ww + sx;
              T* orow = out.ptr() + (static_cast<size_t>(co) * h + y) * ww;
              for (int xx = x0; xx < x1; ++xx) orow[xx] += wgt * xr[xx];
            }
          }
    }
    return make(std::move(out), {x, w, b},
                [x, w, b, cin, h, ww, cout, kh, kw, pad](Tape& t, const Tensor<T>& g) {
      const Tensor<T>& xv2 = t.val(x);
      const Tensor<T>& wv2 = t.val(w);
      if (t.wants(x)) {
        Tensor<T> gx({cin, h, ww});
        for (int co = 0; co < cout; ++co)
          for (int ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                T wgt = wv2.data[((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx];
                if (wgt == T(0)) continue;
                int sy = ky - pad, sx = kx - pad;
                int y0 = std::max(0, -sy), y1 = std::min(h, h - sy);
                int x0 = std::max(0, -sx), x1 = std::min(ww, ww - sx);
                for (int y = y0; y < y1; ++y) {
                  T* gxr = gx.ptr() + (static_cast<size_t>(ci) * h + (y + sy)) * ww + sx;
                  const T* grow = g.ptr() + (static_cast<size_t>(co) * h + y) * ww;
                  for (int xx = x0; xx < x1; ++xx) gxr[xx] += wgt * grow[xx];
                }
              }
        t.accumulate(x, gx);
      }
      if (t.wants(w)) {
        Tensor<T> gw({cout, cin, kh, kw});
        for (int co = 0; co < cout; ++co)
          for (int ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                int sy = ky - pad, sx = kx - pad;
                int y0 = std::max(0, -sy), y1 = std::min(h, h - sy);
                int x0 = std::max(0, -sx), x1 = std::min(ww, ww - sx);
                T acc = T(0);
                for (int y = y0; y < y1; ++y) {
                  const T* xr = xv2.ptr() + (static_cast<size_t>(ci) * h + (y + sy)) * ww + sx;
                  const T* grow = g.ptr() + (static_cast<size_t>(co) * h + y) * ww;
                  for (int xx = x0; xx < x1; ++xx) acc += xr[xx] * grow[xx];
                }
                gw.data[((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx] = acc;
              }
        t.accumulate(w, gw);
      }
      if (b.valid() && t.wants(b)) {
        Tensor<T> gb({cout});
        for (int co = 0; co < cout; ++co) {
          T acc = T(0);
          const T* grow = g.ptr() + static_cast<size_t>(co) * h * ww;
          for (int i = 0; i < h * ww; ++i) acc += grow[i];
          gb[co] = acc;
        }
        t.accumulate(b, gb);
      }
    });
  }

  Var mean_spatial(Var x) {
    const Tensor<T>& xv = val(x);
    int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    Tensor<T> out({c});
    T inv = T(1) / static_cast<T>(h * w);
    for (int ci = 0; ci < c; ++ci) {
      T acc = T(0);
      const T* p = xv.ptr() + static_cast<size_t>(ci) * h * w;
      for (int i = 0; i < h * w; ++i) acc += p[i];
      out[ci] = acc * inv;
    }
    return make(std::move(out), {x}, [x, c, h, w, inv](Tape& t, const Tensor<T>& g) {
      Tensor<T> gx({c, h, w});
      for (int ci = 0; ci < c; ++ci) {
        T gv = g[ci] * inv;
        T* p = gx.ptr() + static_cast<size_t>(ci) * h * w;
        for (int i = 0; i < h * w; ++i) p[i] = gv;
      }
      t.accumulate(x, gx);
    });
  }

  Var concat_channels(const std::vector<Var>& xs) {
    int h = val(xs[0]).dim(1), w = val(xs[0]).dim(2);
    int total = 0;
    for (Var x : xs) total += val(x).dim(0);
    Tensor<T> out({total, h, w});
    size_t off = 0;
    for (Var x : xs) {
      const Tensor<T>& xv = val(x);
      std::copy(xv.data.begin(), xv.data.end(), out.data.begin() + off);
      off += xv.data.size();
    }
    std::vector<Var> deps = xs;
    return make(std::move(out), deps, [deps, h, w](Tape& t, const Tensor<T>& g) {
      size_t off2 = 0;
      for (Var x : deps) {
        const Tensor<T>& xv = t.val(x);
        if (t.wants(x)) {
          Tensor<T> gx(xv.shape);
          std::copy(g.data.begin() + off2, g.data.begin() + off2 + xv.data.size(),
                    gx.data.begin());
          t.accumulate(x, gx);
        }
        off2 += xv.data.size();
      }
    });
  }

  Var upsample_nearest2(Var x) {
    const Tensor<T>& xv = val(x);
    int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    Tensor<T> out({c, 2 * h, 2 * w});
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          T v = xv.at(ci, y, xx);
          out.at(ci, 2 * y, 2 * xx) = v;
          out.at(ci, 2 * y, 2 * xx + 1) = v;
          out.at(ci, 2 * y + 1, 2 * xx) = v;
          out.at(ci, 2 * y + 1, 2 * xx + 1) = v;
        }
    return make(std::move(out), {x}, [x, c, h, w](Tape& t, const Tensor<T>& g) {
      Tensor<T> gx({c, h, w});
      for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx)
            gx.at(ci, y, xx) = g.at(ci, 2 * y, 2 * xx) + g.at(ci, 2 * y, 2 * xx + 1) +
                               g.at(ci, 2 * y + 1, 2 * xx) + g.at(ci, 2 * y + 1, 2 * xx + 1);
      t.accumulate(x, gx);
    });
  }

  Var reshape(Var a, std::vector<int> new_shape) {
    const Tensor<T>& av = val(a);
    if (Tensor<T>::count(new_shape) != av.numel())
      throw InputError("reshape(): element count mismatch");
    Tensor<T> out;
    out.shape = new_shape;
    out.data = av.data;
    return make(std::move(out), {a}, [a](Tape& t, const Tensor<T>& g) {
      if (!t.wants(a)) return;
      Tensor<T> ga;
      ga.shape = t.val(a).shape;
      ga.data = g.data;
      t.accumulate(a, ga);
    });
  }

  // token rows [gh*gw, d] -> channel grid [d, gh, gw]
  Var rows_to_chw(Var a, int gh, int gw) {
    const Tensor<T>& av = val(a);
    int n = av.dim(0), d = av.dim(1);
    if (n != gh * gw) throw InputError("rows_to_chw(): row count mismatch");
    Tensor<T> out({d, gh, gw});
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < d; ++c) out.data[static_cast<size_t>(c) * n + i] = av.at(i, c);
    return make(std::move(out), {a}, [a, n, d](Tape& t, const Tensor<T>& g) {
      Tensor<T> ga({n, d});
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) ga.at(i, c) = g.data[static_cast<size_t>(c) * n + i];
      t.accumulate(a, ga);
    });
  }

  Var chw_to_rows(Var a) {
    const Tensor<T>& av = val(a);
    int d = av.dim(0), n = av.dim(1) * av.dim(2);
    Tensor<T> out({n, d});
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < d; ++c) out.at(i, c) = av.data[static_cast<size_t>(c) * n + i];
    return make(std::move(out), {a}, [a, n, d](Tape& t, const Tensor<T>& g) {
      Tensor<T> ga(t.val(a).shape);
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) ga.data[static_cast<size_t>(c) * n + i] = g.at(i, c);
      t.accumulate(a, ga);
    });
  }

  Var avgpool2(Var x) {
    const Tensor<T>& xv = val(x);
    int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    int oh = h / 2, ow = w / 2;
    Tensor<T> out({c, oh, ow});
    for (int ci = 0; ci < c; ++ci)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx)
          out.at(ci, y, xx) = (xv.at(ci, 2 * y, 2 * xx) + xv.at(ci, 2 * y, 2 * xx + 1) +
                               xv.at(ci, 2 * y + 1, 2 * xx) + xv.at(ci, 2 * y + 1, 2 * xx + 1)) /
                              T(4);
    return make(std::move(out), {x}, [x, c, oh, ow](Tape& t, const Tensor<T>& g) {
      Tensor<T> gx(t.val(x).shape);
      for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < oh; ++y)
          for (int xx = 0; xx < ow; ++xx) {
            T v = g.at(ci, y, xx) / T(4);
            gx.at(ci, 2 * y, 2 * xx) = v;
            gx.at(ci, 2 * y, 2 * xx + 1) = v;
            gx.at(ci, 2 * y + 1, 2 * xx) = v;
            gx.at(ci, 2 * y + 1, 2 * xx + 1) = v;
          }
      t.accumulate(x, gx);
    });
  }

  // x:[C,h,w] * m:[h,w] broadcast over channels
  Var mul_channels(Var x, Var m) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& mv = val(m);
    int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    Tensor<T> out = xv;
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < h * w; ++i)
        out.data[static_cast<size_t>(ci) * h * w + i] *= mv.data[i];
    return make(std::move(out), {x, m}, [x, m, c, h, w](Tape& t, const Tensor<T>& g) {
      const Tensor<T>& xv2 = t.val(x);
      const Tensor<T>& mv2 = t.val(m);
      if (t.wants(x)) {
        Tensor<T> gx = g;
        for (int ci = 0; ci < c; ++ci)
          for (int i = 0; i < h * w; ++i)
            gx.data[static_cast<size_t>(ci) * h * w + i] *= mv2.data[i];
        t.accumulate(x, gx);
      }
      if (t.wants(m)) {
        Tensor<T> gm({h, w});
        for (int ci = 0; ci < c; ++ci)
          for (int i = 0; i < h * w; ++i)
            gm.data[i] += g.data[static_cast<size_t>(ci) * h * w + i] *
                          xv2.data[static_cast<size_t>(ci) * h * w + i];
        t.accumulate(m, gm);
      }
    });
  }

  Var div_channels(Var x, Var m) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& mv = val(m);
    int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    Tensor<T> out = xv;
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < h * w; ++i)
        out.data[static_cast<size_t>(ci) * h * w + i] /= mv.data[i];
    return make(std::move(out), {x, m}, [x, m, c, h, w](Tape& t, const Tensor<T>& g) {
      const Tensor<T>& xv2 = t.val(x);
      const Tensor<T>& mv2 = t.val(m);
      if (t.wants(x)) {
        Tensor<T> gx = g;
        for (int ci = 0; ci < c; ++ci)
          for (int i = 0; i < h * w; ++i)
            gx.data[static_cast<size_t>(ci) * h * w + i] /= mv2.data[i];
        t.accumulate(x, gx);
      }
      if (t.wants(m)) {
        Tensor<T> gm({h, w});
        for (int ci = 0; ci < c; ++ci)
          for (int i = 0; i < h * w; ++i) {
            T mval = mv2.data[i];
            gm.data[i] -= g.data[static_cast<size_t>(ci) * h * w + i] *
                          xv2.data[static_cast<size_t>(ci) * h * w + i] / (mval * mval);
          }
        t.accumulate(m, gm);
      }
    });
  }

  // m:[h,w] * s:[1]
  Var mul_map_scalar(Var m, Var s) {
    const Tensor<T>& mv = val(m);
    T sv = val(s)[0];
    Tensor<T> out = mv;
    for (auto& v : out.data) v *= sv;
    return make(std::move(out), {m, s}, [m, s](Tape& t, const Tensor<T>& g) {
      const Tensor<T>& mv2 = t.val(m);
      T sv2 = t.val(s)[0];
      if (t.wants(m)) {
        Tensor<T> gm = g;
        for (auto& v : gm.data) v *= sv2;
        t.accumulate(m, gm);
      }
      if (t.wants(s)) {
        T acc = T(0);
        for (int64_t i = 0; i < g.numel(); ++i) acc += g[i] * mv2[i];
        t.accumulate(s, Tensor<T>::from({1}, {acc}));
      }
    });
  }

  // ---- losses ----

  // Mean binary cross-entropy on logits, numerically stable form.
  Var bce_with_logits_mean(Var z, const Tensor<T>& target) {
    const Tensor<T>& zv = val(z);
    if (zv.shape != target.shape && zv.numel() != target.numel())
      throw InputError("bce_with_logits_mean: shape mismatch");
    const int64_t n = zv.numel();
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) {
      T x = zv[i], t = target[i];
      acc += std::max(x, T(0)) - x * t + std::log1p(std::exp(-std::abs(x)));
    }
    acc /= static_cast<T>(n);
    auto tgt = std::make_shared<Tensor<T>>(target);
    return make(Tensor<T>::from({1}, {acc}), {z}, [z, tgt, n](Tape& t, const Tensor<T>& g) {
      const Tensor<T>& zv2 = t.val(z);
      Tensor<T> gz(zv2.shape);
      T scale = g[0] / static_cast<T>(n);
      for (int64_t i = 0; i < n; ++i)
        gz[i] = scale * (sigmoid_scalar(zv2[i]) - (*tgt)[i]);
      t.accumulate(z, gz);
    });
  }

  // Soft Dice loss 1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s), p = sigmoid(z).
  Var dice_loss(Var z, const Tensor<T>& target, T smooth) {
    const Tensor<T>& zv = val(z);
    if (zv.numel() != target.numel()) throw InputError("dice_loss: shape mismatch");
    const int64_t n = zv.numel();
    T sum_p = T(0), sum_g = T(0), sum_pg = T(0);
    for (int64_t i = 0; i < n; ++i) {
      T p = sigmoid_scalar(zv[i]);
      sum_p += p;
      sum_g += target[i];
      sum_pg += p * target[i];
    }
    T denom = sum_p + sum_g + smooth;
    T loss = T(1) - (T(2) * sum_pg + smooth) / denom;
    auto tgt = std::make_shared<Tensor<T>>(target);
    return make(Tensor<T>::from({1}, {loss}), {z},
                [z, tgt, smooth, n](Tape& t, const Tensor<T>& g) {
      const Tensor<T>& zv2 = t.val(z);
      T sp = T(0), sg = T(0), spg = T(0);
      for (int64_t i = 0; i < n; ++i) {
        T p = sigmoid_scalar(zv2[i]);
        sp += p;
        sg += (*tgt)[i];
        spg += p * (*tgt)[i];
      }
      T denom2 = sp + sg + smooth;
      Tensor<T> gz(zv2.shape);
      for (int64_t i = 0; i < n; ++i) {
        T p = sigmoid_scalar(zv2[i]);
        T dl_dp = -(T(2) * (*tgt)[i] * denom2 - (T(2) * spg + smooth)) / (denom2 * denom2);
        gz[i] = g[0] * dl_dp * p * (T(1) - p);
      }
      t.accumulate(z, gz);
    });
  }

  // ---- helpers for custom ops defined elsewhere ----

  bool wants(Var v) const { return v.valid() && nodes_[v.id].needs_grad; }

  void accumulate(Var v, const Tensor<T>& g) {
    if (!v.valid()) return;
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    ensure_grad(n);
    for (int64_t i = 0; i < g.numel(); ++i) n.grad[i] += g[i];
  }

  using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

  Var make(Tensor<T> value, const std::vector<Var>& parents, BackwardFn fn) {
    bool ng = false;
    for (Var p : parents)
      if (p.valid() && nodes_[p.id].needs_grad) ng = true;
    nodes_.push_back(Node{std::move(value), {}, std::move(fn), ng});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // For custom ops whose backward closure needs the output node's value.
  void set_backward(Var v, BackwardFn fn) { nodes_[v.id].backward_fn = std::move(fn); }

  static T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward_fn;
    bool needs_grad = false;
  };

  void ensure_grad(Node& n) {
    if (n.grad.shape != n.value.shape) {
      n.grad = Tensor<T>(n.value.shape);
    }
  }

  void check_same(Var a, Var b, const char* what) {
    if (!val(a).same_shape(val(b)))
      throw InputError(std::string(what) + ": shape mismatch " + val(a).shape_str() + " vs " +
                       val(b).shape_str());
  }

  std::vector<Node> nodes_;
};

template <typename T>
using Var = typename Tape<T>::Var;

}  // namespace vscd
