#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "vscd/autodiff.hpp"
#include "vscd/image.hpp"
#include "vscd/nn.hpp"

namespace vscd {

// Stage 1: frame similarity grid S, refined logits A = S + h(S), row-softmax
// matching P, matched segment proposals, and per-query candidate sets.

struct SegmentProposal {
  int t0 = 0, t1 = 0;             // inclusive query range
  std::vector<int> matched_refs;  // top-1 reference index per covered t
  double mean_logit = 0.0;
  bool singleton_fill = false;

  int length() const { return t1 - t0 + 1; }
};

struct CandidateSet {
  int query_index = 0;
  int anchor = 0;
  std::vector<int> refs;            // anchor first, then descending confidence
  std::vector<double> confidences;  // C_f(t,s) = P[t,s], aligned with refs
};

struct AlignmentParams {
  int refine_channels = 8;
};

template <typename T>
void init_alignment_params(ParamStore<T>& params, const AlignmentParams& cfg, Rng& rng) {
  Rng r0 = rng.fork(fnv1a64_str("align.refine.w0"));
  init_xavier(params.add("align.refine.w0", {cfg.refine_channels, 1, 3, 3}), r0, 9,
              9 * cfg.refine_channels);
  params.add("align.refine.b0", {cfg.refine_channels});
  // Final layer starts at zero, so A == S until the head learns something.
  params.add("align.refine.w1", {1, cfg.refine_channels, 3, 3});
  params.add("align.refine.b1", {1});
}

// S[t,s] = cos(q_t, r_s). Zero-norm descriptors are rejected, not zeroed.
template <typename T>
typename Tape<T>::Var similarity_grid(Tape<T>& tape, typename Tape<T>::Var q_rows,
                                      typename Tape<T>::Var r_rows) {
  const Tensor<T>& q = tape.val(q_rows);
  const Tensor<T>& r = tape.val(r_rows);
  if (q.dim(1) != r.dim(1)) throw InputError("similarity_grid: descriptor dim mismatch");
  const int tq = q.dim(0), tr = r.dim(0), d = q.dim(1);
  if (!q.all_finite() || !r.all_finite())
    throw InputError("similarity_grid: non-finite descriptor");

  auto norms = [&](const Tensor<T>& m, int n) {
    std::vector<T> out(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      T acc = T(0);
      for (int j = 0; j < d; ++j) acc += m.at(i, j) * m.at(i, j);
      out[static_cast<size_t>(i)] = std::sqrt(acc);
      if (out[static_cast<size_t>(i)] <= T(0))
        throw InputError("similarity_grid: zero-norm descriptor at index " + std::to_string(i));
    }
    return out;
  };
  auto qn = std::make_shared<std::vector<T>>(norms(q, tq));
  auto rn = std::make_shared<std::vector<T>>(norms(r, tr));

  Tensor<T> s({tq, tr});
  for (int t = 0; t < tq; ++t)
    for (int ss = 0; ss < tr; ++ss) {
      T dot = T(0);
      for (int j = 0; j < d; ++j) dot += q.at(t, j) * r.at(ss, j);
      s.at(t, ss) = dot / ((*qn)[t] * (*rn)[ss]);
    }

  auto sval = std::make_shared<Tensor<T>>(s);
  return tape.make(std::move(s), {q_rows, r_rows},
                   [q_rows, r_rows, qn, rn, sval, tq, tr, d](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& qv = t.val(q_rows);
    const Tensor<T>& rv = t.val(r_rows);
    if (t.wants(q_rows)) {
      Tensor<T> gq({tq, d});
      for (int i = 0; i < tq; ++i)
        for (int s2 = 0; s2 < tr; ++s2) {
          T gv = g.at(i, s2);
          if (gv == T(0)) continue;
          T inv = T(1) / ((*qn)[i] * (*rn)[s2]);
          T sv = sval->at(i, s2);
          for (int j = 0; j < d; ++j)
            gq.at(i, j) += gv * (rv.at(s2, j) * inv - sv * qv.at(i, j) / ((*qn)[i] * (*qn)[i]));
        }
      t.accumulate(q_rows, gq);
    }
    if (t.wants(r_rows)) {
      Tensor<T> gr({tr, d});
      for (int i = 0; i < tq; ++i)
        for (int s2 = 0; s2 < tr; ++s2) {
          T gv = g.at(i, s2);
          if (gv == T(0)) continue;
          T inv = T(1) / ((*qn)[i] * (*rn)[s2]);
          T sv = sval->at(i, s2);
          for (int j = 0; j < d; ++j)
            gr.at(s2, j) += gv * (qv.at(i, j) * inv - sv * rv.at(s2, j) / ((*rn)[s2] * (*rn)[s2]));
        }
      t.accumulate(r_rows, gr);
    }
  });
}

// A = S + h(S): shallow residual conv head over the grid as a 1-channel image.
template <typename T>
typename Tape<T>::Var refine_alignment(Tape<T>& tape, const TapeParams<T>& P,
                                       typename Tape<T>::Var s_grid) {
  const Tensor<T>& s = tape.val(s_grid);
  const int tk = s.dim(0), tk2 = s.dim(1);
  auto img = tape.reshape(s_grid, {1, tk, tk2});
  auto h0 = tape.gelu(tape.conv2d(img, P["align.refine.w0"], P["align.refine.b0"], 1));
  auto h1 = tape.conv2d(h0, P["align.refine.w1"], P["align.refine.b1"], 1);
  return tape.add(s_grid, tape.reshape(h1, {tk, tk2}));
}

// P = row-softmax(A / tau_f). Rows sum to 1; max-subtraction inside.
template <typename T>
typename Tape<T>::Var soft_matching(Tape<T>& tape, typename Tape<T>::Var logits, T tau_f) {
  if (!(tau_f > T(0))) throw ConfigError("soft_matching: temperature must be > 0");
  return tape.softmax_rows(logits, tau_f);
}

// argmax with smallest-index tie break
template <typename T>
inline int argmax_row(const Tensor<T>& m, int row) {
  int best = 0;
  for (int j = 1; j < m.dim(1); ++j)
    if (m.at(row, j) > m.at(row, best)) best = j;
  return best;
}

template <typename T>
std::vector<SegmentProposal> segment_proposals(const Tensor<T>& p, const Tensor<T>& a, int delta,
                                               int min_len, int l_max, double split_quantile) {
  if (delta < 0) throw ConfigError("segment_proposals: delta must be >= 0");
  if (min_len < 1 || min_len > l_max) throw ConfigError("segment_proposals: need 1 <= min_len <= L_max");
  const int tk = p.dim(0);
  std::vector<int> shat(static_cast<size_t>(tk));
  for (int t = 0; t < tk; ++t) shat[static_cast<size_t>(t)] = argmax_row(p, t);

  // (a) group consecutive t with near-diagonal top-1 progression
  std::vector<std::pair<int, int>> runs;
  int start = 0;
  for (int t = 0; t + 1 < tk; ++t) {
    if (std::abs(shat[static_cast<size_t>(t + 1)] - shat[static_cast<size_t>(t)] - 1) > delta) {
      runs.emplace_back(start, t);
      start = t + 1;
    }
  }
  if (tk > 0) runs.emplace_back(start, tk - 1);

  // (b) optional low-logit split: indices below the run's logit quantile
  // become break points (covered later by singleton fill)
  std::vector<std::pair<int, int>> split_runs;
  for (auto [t0, t1] : runs) {
    if (split_quantile <= 0.0) {
      split_runs.emplace_back(t0, t1);
      continue;
    }
    std::vector<double> logit_vals;
    for (int t = t0; t <= t1; ++t)
      logit_vals.push_back(static_cast<double>(a.at(t, shat[static_cast<size_t>(t)])));
    std::vector<double> sorted = logit_vals;
    std::sort(sorted.begin(), sorted.end());
    double thresh = sorted[static_cast<size_t>(
        std::floor(split_quantile * static_cast<double>(sorted.size() - 1)))];
    int cur = t0;
    for (int t = t0; t <= t1; ++t) {
      if (logit_vals[static_cast<size_t>(t - t0)] < thresh) {
        if (t > cur) split_runs.emplace_back(cur, t - 1);
        cur = t + 1;
      }
    }
    if (cur <= t1) split_runs.emplace_back(cur, t1);
  }

  // (c)+(d) chop long runs left-to-right, then drop chunks below min_len so
  // every emitted non-singleton segment satisfies min_len <= len <= L_max
  std::vector<std::pair<int, int>> kept;
  for (auto [t0, t1] : split_runs) {
    if (t1 - t0 + 1 < min_len) continue;
    for (int c0 = t0; c0 <= t1; c0 += l_max) {
      int c1 = std::min(t1, c0 + l_max - 1);
      if (c1 - c0 + 1 >= min_len) kept.emplace_back(c0, c1);
    }
  }

  // (e) singleton fill guarantees full coverage
  std::vector<char> covered(static_cast<size_t>(tk), 0);
  std::vector<SegmentProposal> out;
  auto emit = [&](int t0, int t1, bool fill) {
    SegmentProposal seg;
    seg.t0 = t0;
    seg.t1 = t1;
    seg.singleton_fill = fill;
    double acc = 0.0;
    for (int t = t0; t <= t1; ++t) {
      seg.matched_refs.push_back(shat[static_cast<size_t>(t)]);
      acc += static_cast<double>(a.at(t, shat[static_cast<size_t>(t)]));
      covered[static_cast<size_t>(t)] = 1;
    }
    seg.mean_logit = acc / seg.length();
    out.push_back(std::move(seg));
  };
  for (auto [t0, t1] : kept) emit(t0, t1, false);
  for (int t = 0; t < tk; ++t)
    if (!covered[static_cast<size_t>(t)]) emit(t, t, true);
  std::sort(out.begin(), out.end(),
            [](const SegmentProposal& x, const SegmentProposal& y) { return x.t0 < y.t0; });
  return out;
}

// Anchor from the covering segment's reference range, then global top-K fills.
template <typename T>
CandidateSet candidate_set(int t, const std::vector<SegmentProposal>& segments, const Tensor<T>& p,
                           int top_k, int cap) {
  if (cap < 1) throw ConfigError("candidate_set: cap must be >= 1");
  const SegmentProposal* seg = nullptr;
  for (const auto& s : segments)
    if (s.t0 <= t && t <= s.t1) {
      seg = &s;
      break;
    }
  if (!seg) throw InputError("candidate_set: segments do not cover t (coverage broken upstream)");

  std::vector<int> region;  // R(t), deduplicated, order irrelevant
  for (int r : seg->matched_refs)
    if (std::find(region.begin(), region.end(), r) == region.end()) region.push_back(r);

  int anchor = region[0];
  for (int r : region)
    if (p.at(t, r) > p.at(t, anchor) || (p.at(t, r) == p.at(t, anchor) && r < anchor)) anchor = r;

  const int tr = p.dim(1);
  std::vector<int> order(static_cast<size_t>(tr));
  for (int s = 0; s < tr; ++s) order[static_cast<size_t>(s)] = s;
  std::sort(order.begin(), order.end(), [&](int x, int y) {
    if (p.at(t, x) != p.at(t, y)) return p.at(t, x) > p.at(t, y);
    return x < y;
  });

  CandidateSet cs;
  cs.query_index = t;
  cs.anchor = anchor;
  cs.refs.push_back(anchor);
  for (int i = 0; i < std::min(top_k, tr); ++i) {
    int s = order[static_cast<size_t>(i)];
    if (static_cast<int>(cs.refs.size()) >= cap) break;
    if (std::find(cs.refs.begin(), cs.refs.end(), s) != cs.refs.end()) continue;
    cs.refs.push_back(s);
  }
  for (int s : cs.refs) cs.confidences.push_back(static_cast<double>(p.at(t, s)));
  return cs;
}

// Debug dump of S, A, P as one float-plane stack (header: T_key, 3 planes).
template <typename T>
void dump_alignment(const std::string& path, const Tensor<T>& s, const Tensor<T>& a,
                    const Tensor<T>& p) {
  const int tk = s.dim(0);
  auto plane = [&](const Tensor<T>& m) {
    std::vector<float> out(static_cast<size_t>(tk) * tk);
    for (int64_t i = 0; i < m.numel(); ++i) out[static_cast<size_t>(i)] = static_cast<float>(m[i]);
    return out;
  };
  write_float_planes(path, tk, {plane(s), plane(a), plane(p)});
}

}  // namespace vscd
