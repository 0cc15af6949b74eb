#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "vscd/autodiff.hpp"
#include "vscd/nn.hpp"

namespace vscd {

// Stage 2: k x k local correlation between query and reference token grids,
// per-cell softmax matching, expected displacement, bilinear warping, and the
// per-candidate change feature head.

// Offset enumeration for a k x k window: i = (dy+r)*k + (dx+r), r = (k-1)/2.
inline std::pair<int, int> window_offset(int i, int k) {
  int r = (k - 1) / 2;
  return {i % k - r, i / k - r};
}

struct CorrespondenceConfig {
  int window_k = 5;
  int reduced_channels = 32;  // C' (default D/2 at desk scale)
  int change_channels = 32;   // C
};

template <typename T>
struct CorrelationVolume {
  typename Tape<T>::Var logits;  // [k^2, h, w]; -inf at invalid offsets
  std::shared_ptr<Tensor<uint8_t>> valid;
  int k = 1;
};

template <typename T>
void init_correspondence_params(ParamStore<T>& params, const CorrespondenceConfig& cfg,
                                int token_dim, Rng& rng) {
  const int cr = cfg.reduced_channels, cc = cfg.change_channels;
  {
    Rng r = rng.fork(fnv1a64_str("stage2.reduce.w"));
    init_xavier(params.add("stage2.reduce.w", {cr, token_dim, 1, 1}), r, token_dim, cr);
  }
  params.add("stage2.reduce.b", {cr});
  {
    Rng r = rng.fork(fnv1a64_str("stage2.fuse.w"));
    int cin = 3 * cr + 1;
    init_xavier(params.add("stage2.fuse.w", {cc, cin, 3, 3}), r, cin * 9, cc * 9);
  }
  params.add("stage2.fuse.b", {cc});
}

template <typename T>
CorrelationVolume<T> local_correlation(Tape<T>& tape, typename Tape<T>::Var q_grid,
                                       typename Tape<T>::Var r_grid, int k) {
  const Tensor<T>& q = tape.val(q_grid);
  const Tensor<T>& r = tape.val(r_grid);
  if (!q.same_shape(r)) throw InputError("local_correlation: grid shapes differ");
  if (k < 1 || k % 2 == 0) throw ConfigError("local_correlation: k must be odd and >= 1");
  const int d = q.dim(0), h = q.dim(1), w = q.dim(2);
  const int k2 = k * k, rad = (k - 1) / 2;
  const T neg_inf = -std::numeric_limits<T>::infinity();

  auto valid = std::make_shared<Tensor<uint8_t>>(std::vector<int>{k2, h, w});
  Tensor<T> logits({k2, h, w});
  for (int i = 0; i < k2; ++i) {
    auto [dx, dy] = window_offset(i, k);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int sy = y + dy, sx = x + dx;
        if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
          logits.at(i, y, x) = neg_inf;
          continue;
        }
        valid->at(i, y, x) = 1;
        T acc = T(0);
        for (int c = 0; c < d; ++c) acc += q.at(c, y, x) * r.at(c, sy, sx);
        logits.at(i, y, x) = acc;
      }
  }
  (void)rad;
  auto log_var = tape.make(std::move(logits), {q_grid, r_grid},
                           [q_grid, r_grid, valid, k, k2, d, h, w](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& qv = t.val(q_grid);
    const Tensor<T>& rv = t.val(r_grid);
    Tensor<T> gq, gr;
    if (t.wants(q_grid)) gq = Tensor<T>({d, h, w});
    if (t.wants(r_grid)) gr = Tensor<T>({d, h, w});
    for (int i = 0; i < k2; ++i) {
      auto [dx, dy] = window_offset(i, k);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          if (!valid->at(i, y, x)) continue;
          T gv = g.at(i, y, x);
          if (gv == T(0)) continue;
          int sy = y + dy, sx = x + dx;
          if (gq.numel())
            for (int c = 0; c < d; ++c) gq.at(c, y, x) += gv * rv.at(c, sy, sx);
          if (gr.numel())
            for (int c = 0; c < d; ++c) gr.at(c, sy, sx) += gv * qv.at(c, y, x);
        }
    }
    if (gq.numel()) t.accumulate(q_grid, gq);
    if (gr.numel()) t.accumulate(r_grid, gr);
  });
  return CorrelationVolume<T>{log_var, valid, k};
}

// Softmax over valid offsets at each cell; invalid offsets get exact zero.
template <typename T>
typename Tape<T>::Var patch_match(Tape<T>& tape, const CorrelationVolume<T>& vol) {
  const Tensor<T>& l = tape.val(vol.logits);
  const int k2 = l.dim(0), h = l.dim(1), w = l.dim(2);
  auto valid = vol.valid;
  Tensor<T> p({k2, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      T mx = -std::numeric_limits<T>::infinity();
      int nvalid = 0;
      for (int i = 0; i < k2; ++i)
        if (valid->at(i, y, x)) {
          mx = std::max(mx, l.at(i, y, x));
          ++nvalid;
        }
      if (nvalid == 0) throw InputError("patch_match: cell with no valid offsets");
      T z = T(0);
      for (int i = 0; i < k2; ++i)
        if (valid->at(i, y, x)) z += (p.at(i, y, x) = std::exp(l.at(i, y, x) - mx));
      for (int i = 0; i < k2; ++i)
        if (valid->at(i, y, x)) p.at(i, y, x) /= z;
    }
  auto out = tape.make(std::move(p), {vol.logits}, {});
  int rid = out.id;
  auto logits = vol.logits;
  tape.set_backward(out, [logits, valid, rid, k2, h, w](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& pv = t.val(typename Tape<T>::Var{rid});
    Tensor<T> gl({k2, h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        T dot = T(0);
        for (int i = 0; i < k2; ++i)
          if (valid->at(i, y, x)) dot += g.at(i, y, x) * pv.at(i, y, x);
        for (int i = 0; i < k2; ++i)
          if (valid->at(i, y, x)) gl.at(i, y, x) = pv.at(i, y, x) * (g.at(i, y, x) - dot);
      }
    t.accumulate(logits, gl);
  });
  return out;
}

// Delta(x,y) = sum_i P_i(x,y) * delta_i, channel 0 = dx, channel 1 = dy.
template <typename T>
typename Tape<T>::Var expected_displacement(Tape<T>& tape, typename Tape<T>::Var p, int k) {
  const Tensor<T>& pv = tape.val(p);
  const int k2 = pv.dim(0), h = pv.dim(1), w = pv.dim(2);
  if (k2 != k * k) throw InputError("expected_displacement: window size mismatch");
  Tensor<T> disp({2, h, w});
  for (int i = 0; i < k2; ++i) {
    auto [dx, dy] = window_offset(i, k);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        disp.at(0, y, x) += pv.at(i, y, x) * static_cast<T>(dx);
        disp.at(1, y, x) += pv.at(i, y, x) * static_cast<T>(dy);
      }
  }
  return tape.make(std::move(disp), {p}, [p, k, k2, h, w](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> gp({k2, h, w});
    for (int i = 0; i < k2; ++i) {
      auto [dx, dy] = window_offset(i, k);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          gp.at(i, y, x) = g.at(0, y, x) * static_cast<T>(dx) + g.at(1, y, x) * static_cast<T>(dy);
    }
    t.accumulate(p, gp);
  });
}

// Bilinear sampling of src at (x,y) + disp(x,y), clamp-to-edge coordinates.
template <typename T>
typename Tape<T>::Var warp_bilinear(Tape<T>& tape, typename Tape<T>::Var src,
                                    typename Tape<T>::Var disp) {
  const Tensor<T>& s = tape.val(src);
  const Tensor<T>& dv = tape.val(disp);
  const int d = s.dim(0), h = s.dim(1), w = s.dim(2);
  if (dv.dim(0) != 2 || dv.dim(1) != h || dv.dim(2) != w)
    throw InputError("warp_bilinear: displacement shape mismatch");

  auto sample_setup = [h, w](T sx, T sy, int& x0, int& x1, int& y0, int& y1, T& fx, T& fy,
                             bool& clamped_x, bool& clamped_y) {
    clamped_x = sx <= T(0) || sx >= T(w - 1);
    clamped_y = sy <= T(0) || sy >= T(h - 1);
    sx = std::min(std::max(sx, T(0)), T(w - 1));
    sy = std::min(std::max(sy, T(0)), T(h - 1));
    x0 = static_cast<int>(std::floor(sx));
    y0 = static_cast<int>(std::floor(sy));
    x1 = std::min(x0 + 1, w - 1);
    y1 = std::min(y0 + 1, h - 1);
    fx = sx - static_cast<T>(x0);
    fy = sy - static_cast<T>(y0);
  };

  Tensor<T> out({d, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int x0, x1, y0, y1;
      T fx, fy;
      bool cx, cy;
      sample_setup(static_cast<T>(x) + dv.at(0, y, x), static_cast<T>(y) + dv.at(1, y, x), x0, x1,
                   y0, y1, fx, fy, cx, cy);
      for (int c = 0; c < d; ++c) {
        T v00 = s.at(c, y0, x0), v01 = s.at(c, y0, x1);
        T v10 = s.at(c, y1, x0), v11 = s.at(c, y1, x1);
        out.at(c, y, x) =
            (T(1) - fy) * ((T(1) - fx) * v00 + fx * v01) + fy * ((T(1) - fx) * v10 + fx * v11);
      }
    }
  return tape.make(std::move(out), {src, disp},
                   [src, disp, sample_setup, d, h, w](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& sv = t.val(src);
    const Tensor<T>& dv2 = t.val(disp);
    Tensor<T> gs, gd;
    if (t.wants(src)) gs = Tensor<T>({d, h, w});
    if (t.wants(disp)) gd = Tensor<T>({2, h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int x0, x1, y0, y1;
        T fx, fy;
        bool cx, cy;
        sample_setup(static_cast<T>(x) + dv2.at(0, y, x), static_cast<T>(y) + dv2.at(1, y, x), x0,
                     x1, y0, y1, fx, fy, cx, cy);
        for (int c = 0; c < d; ++c) {
          T gv = g.at(c, y, x);
          if (gv == T(0)) continue;
          T v00 = sv.at(c, y0, x0), v01 = sv.at(c, y0, x1);
          T v10 = sv.at(c, y1, x0), v11 = sv.at(c, y1, x1);
          if (gs.numel()) {
            gs.at(c, y0, x0) += gv * (T(1) - fy) * (T(1) - fx);
            gs.at(c, y0, x1) += gv * (T(1) - fy) * fx;
            gs.at(c, y1, x0) += gv * fy * (T(1) - fx);
            gs.at(c, y1, x1) += gv * fy * fx;
          }
          if (gd.numel()) {
            if (!cx)
              gd.at(0, y, x) += gv * ((T(1) - fy) * (v01 - v00) + fy * (v11 - v10));
            if (!cy)
              gd.at(1, y, x) += gv * ((T(1) - fx) * (v10 - v00) + fx * (v11 - v01));
          }
        }
      }
    if (gs.numel()) t.accumulate(src, gs);
    if (gd.numel()) t.accumulate(disp, gd);
  });
}

// Per-cell cosine between two channel grids; zero-norm cells produce 0 with
// zero gradient (reduced features can legitimately vanish mid-training).
template <typename T>
typename Tape<T>::Var cell_cosine(Tape<T>& tape, typename Tape<T>::Var a,
                                  typename Tape<T>::Var b) {
  const Tensor<T>& av = tape.val(a);
  const Tensor<T>& bv = tape.val(b);
  if (!av.same_shape(bv)) throw InputError("cell_cosine: shape mismatch");
  const int c = av.dim(0), h = av.dim(1), w = av.dim(2);
  Tensor<T> out({1, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      T dot = T(0), na = T(0), nb = T(0);
      for (int ci = 0; ci < c; ++ci) {
        dot += av.at(ci, y, x) * bv.at(ci, y, x);
        na += av.at(ci, y, x) * av.at(ci, y, x);
        nb += bv.at(ci, y, x) * bv.at(ci, y, x);
      }
      out.at(0, y, x) = (na > T(0) && nb > T(0)) ? dot / (std::sqrt(na) * std::sqrt(nb)) : T(0);
    }
  return tape.make(std::move(out), {a, b}, [a, b, c, h, w](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& av2 = t.val(a);
    const Tensor<T>& bv2 = t.val(b);
    Tensor<T> ga, gb;
    if (t.wants(a)) ga = Tensor<T>({c, h, w});
    if (t.wants(b)) gb = Tensor<T>({c, h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        T gv = g.at(0, y, x);
        if (gv == T(0)) continue;
        T dot = T(0), na = T(0), nb = T(0);
        for (int ci = 0; ci < c; ++ci) {
          dot += av2.at(ci, y, x) * bv2.at(ci, y, x);
          na += av2.at(ci, y, x) * av2.at(ci, y, x);
          nb += bv2.at(ci, y, x) * bv2.at(ci, y, x);
        }
        if (!(na > T(0) && nb > T(0))) continue;
        T inv_na = T(1) / std::sqrt(na), inv_nb = T(1) / std::sqrt(nb);
        T cosv = dot * inv_na * inv_nb;
        for (int ci = 0; ci < c; ++ci) {
          if (ga.numel())
            ga.at(ci, y, x) += gv * (bv2.at(ci, y, x) * inv_na * inv_nb -
                                     cosv * av2.at(ci, y, x) * inv_na * inv_na);
          if (gb.numel())
            gb.at(ci, y, x) += gv * (av2.at(ci, y, x) * inv_na * inv_nb -
                                     cosv * bv2.at(ci, y, x) * inv_nb * inv_nb);
        }
      }
    if (ga.numel()) t.accumulate(a, ga);
    if (gb.numel()) t.accumulate(b, gb);
  });
}

// Shared 1x1 channel reduction used on both grids of a pair.
template <typename T>
typename Tape<T>::Var reduce_tokens(Tape<T>& tape, const TapeParams<T>& P,
                                    typename Tape<T>::Var grid) {
  return tape.conv2d(grid, P["stage2.reduce.w"], P["stage2.reduce.b"], 0);
}

// F = gelu(conv3x3([rq, rr, rq - rr, cos(rq, rr)])).
template <typename T>
typename Tape<T>::Var change_feature(Tape<T>& tape, const TapeParams<T>& P,
                                     typename Tape<T>::Var q_grid,
                                     typename Tape<T>::Var warped_r_grid) {
  if (!tape.val(q_grid).same_shape(tape.val(warped_r_grid)))
    throw InputError("change_feature: grid shapes differ");
  auto rq = reduce_tokens(tape, P, q_grid);
  auto rr = reduce_tokens(tape, P, warped_r_grid);
  auto diff = tape.sub(rq, rr);
  auto cosmap = cell_cosine(tape, rq, rr);
  auto cat = tape.concat_channels({rq, rr, diff, cosmap});
  return tape.gelu(tape.conv2d(cat, P["stage2.fuse.w"], P["stage2.fuse.b"], 1));
}

}  // namespace vscd
