#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "vscd/config.hpp"
#include "vscd/model.hpp"
#include "vscd/trainer.hpp"

namespace vscd {

// Frame-wise pixel F1 plus the stratified / ambiguity / taxonomy reports.

struct FrameScore {
  int pair_id = 0;
  int frame_index = 0;   // query keyframe position (0..T_key-1)
  int64_t tp = 0, fp = 0, fn = 0;
  double precision = 0, recall = 0, f1 = 0;
  double gt_area_fraction = 0;  // |GT| / pixels, for change-size strata
  double top_gap = 0;           // top1 - top2 of the P_frame row
  bool empty_gt = false;
};

// Degenerate-frame rule: both-empty scores 1 (a correct "no change" call);
// empty GT with any false positive scores 0.
template <typename TA, typename TB>
FrameScore frame_f1(const Tensor<TA>& pred, const Tensor<TB>& gt) {
  if (pred.numel() != gt.numel()) throw InputError("frame_f1: shape mismatch");
  FrameScore s;
  int64_t gt_pos = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    bool p = pred[i] != 0;
    bool g = gt[i] != 0;
    if (p && g) ++s.tp;
    else if (p && !g) ++s.fp;
    else if (!p && g) ++s.fn;
    if (g) ++gt_pos;
  }
  s.gt_area_fraction = static_cast<double>(gt_pos) / static_cast<double>(pred.numel());
  s.empty_gt = gt_pos == 0;
  if (s.tp + s.fp + s.fn == 0) {
    s.precision = s.recall = s.f1 = 1.0;
    return s;
  }
  s.precision = s.tp + s.fp > 0 ? static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp) : 0.0;
  s.recall = s.tp + s.fn > 0 ? static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fn) : 0.0;
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

// Full pipeline over one pair; scores each query keyframe against the mask
// selected by the same floor((i+0.5)T/T_key) formula used in training.
template <typename T>
struct PairEvaluation {
  std::vector<FrameScore> scores;
  ChangeMaskSequence<T> prediction;
  PairRecord meta;
};

template <typename T>
PairEvaluation<T> evaluate_pair(VscdNet<T>& model, const DatasetPair& dp, double threshold,
                                int t_key) {
  if (dp.masks.empty()) throw InputError("evaluate_pair: pair has no ground-truth masks");
  PairEvaluation<T> ev;
  ev.meta = dp.meta;
  auto pp = prepare_pair<T>(dp, t_key);

  Tape<T> tape;
  TapeParams<T> P(tape, model.params(), [](const std::string&) { return false; });
  auto res = model.forward(tape, P, pp.q_frames, pp.r_frames);

  ev.prediction.threshold = threshold;
  const Tensor<T>& pf = tape.val(res.matching);
  for (int t = 0; t < t_key; ++t) {
    Tensor<T> logits = tape.val(res.mask_logits[static_cast<size_t>(t)]);
    Tensor<T> probs = logits;
    for (auto& v : probs.data) v = Tape<T>::sigmoid_scalar(v);
    Tensor<uint8_t> mask = predict_mask(logits, threshold);

    Tensor<uint8_t> gt({mask.dim(0), mask.dim(1)});
    for (int64_t i = 0; i < gt.numel(); ++i)
      gt[i] = pp.masks[static_cast<size_t>(t)][i] != T(0) ? 1 : 0;
    FrameScore s = frame_f1(mask, gt);
    s.pair_id = dp.meta.pair_id;
    s.frame_index = t;

    // top1 - top2 gap of this keyframe's matching row
    T top1 = -1, top2 = -1;
    for (int j = 0; j < pf.dim(1); ++j) {
      T v = pf.at(t, j);
      if (v > top1) {
        top2 = top1;
        top1 = v;
      } else if (v > top2) {
        top2 = v;
      }
    }
    s.top_gap = pf.dim(1) > 1 ? static_cast<double>(top1 - top2) : 0.0;

    ev.scores.push_back(s);
    ev.prediction.logits.push_back(std::move(logits));
    ev.prediction.probabilities.push_back(std::move(probs));
    ev.prediction.masks.push_back(std::move(mask));
  }
  return ev;
}

inline double mean_f1(const std::vector<FrameScore>& scores, bool exclude_empty_gt = false) {
  double acc = 0;
  int n = 0;
  for (const auto& s : scores) {
    if (exclude_empty_gt && s.empty_gt) continue;
    acc += s.f1;
    ++n;
  }
  return n > 0 ? acc / n : 0.0;
}

// ---- stratified report ----

struct BinStat {
  std::string name;
  int frames = 0;
  double mean_f1 = 0;
};

struct StratifiedReport {
  double overall_f1 = 0;
  int frames = 0;
  int excluded_pairs = 0;
  std::vector<BinStat> by_length, by_change_count, by_size;
};

namespace eval_detail {
inline void accumulate_bin(std::vector<BinStat>& bins, size_t idx, double f1) {
  bins[idx].frames += 1;
  bins[idx].mean_f1 += f1;  // finalized later
}
inline void finalize_bins(std::vector<BinStat>& bins) {
  for (auto& b : bins)
    if (b.frames > 0) b.mean_f1 /= b.frames;
}
}  // namespace eval_detail

inline StratifiedReport stratified_report(
    const std::vector<std::pair<PairRecord, std::vector<FrameScore>>>& per_pair,
    const EvalConfig& cfg) {
  StratifiedReport rep;
  rep.by_length = {{"short", 0, 0}, {"mid", 0, 0}, {"long", 0, 0}};
  rep.by_change_count = {{"low", 0, 0}, {"mid", 0, 0}, {"high", 0, 0}};
  rep.by_size = {{"empty", 0, 0}, {"small", 0, 0}, {"medium", 0, 0}, {"large", 0, 0}};

  for (const auto& [meta, scores] : per_pair) {
    size_t len_bin = meta.t_query < cfg.length_bins[0]   ? 0
                     : meta.t_query <= cfg.length_bins[1] ? 1
                                                          : 2;
    size_t chg_bin = meta.n_changes < cfg.change_count_bins[0]    ? 0
                     : meta.n_changes <= cfg.change_count_bins[1] ? 1
                                                                  : 2;
    for (const auto& s : scores) {
      if (cfg.exclude_empty_gt && s.empty_gt) continue;
      rep.overall_f1 += s.f1;
      rep.frames += 1;
      eval_detail::accumulate_bin(rep.by_length, len_bin, s.f1);
      eval_detail::accumulate_bin(rep.by_change_count, chg_bin, s.f1);
      size_t size_bin = s.empty_gt                             ? 0
                        : s.gt_area_fraction < cfg.size_bins[0]  ? 1
                        : s.gt_area_fraction < cfg.size_bins[1]  ? 2
                                                                 : 3;
      eval_detail::accumulate_bin(rep.by_size, size_bin, s.f1);
    }
  }
  if (rep.frames > 0) rep.overall_f1 /= rep.frames;
  eval_detail::finalize_bins(rep.by_length);
  eval_detail::finalize_bins(rep.by_change_count);
  eval_detail::finalize_bins(rep.by_size);
  return rep;
}

// ---- alignment-ambiguity report (tertiles of the top1-top2 gap) ----

struct AmbiguityReport {
  double edge_lo = 0, edge_hi = 0;  // tertile edges over the evaluated set
  struct Bin {
    std::string name;
    int frames = 0;
    double precision = 0, recall = 0, f1 = 0;
  };
  std::vector<Bin> bins;
};

inline AmbiguityReport ambiguity_bins(const std::vector<FrameScore>& scores) {
  if (scores.size() < 2) throw InputError("ambiguity_bins: need at least 2 scored frames");
  std::vector<double> gaps;
  for (const auto& s : scores) gaps.push_back(s.top_gap);
  std::sort(gaps.begin(), gaps.end());
  AmbiguityReport rep;
  rep.edge_lo = gaps[gaps.size() / 3];
  rep.edge_hi = gaps[2 * gaps.size() / 3];
  rep.bins = {{"ambiguous", 0, 0, 0, 0}, {"medium", 0, 0, 0, 0}, {"clear", 0, 0, 0, 0}};
  for (const auto& s : scores) {
    size_t b = s.top_gap < rep.edge_lo ? 0 : s.top_gap < rep.edge_hi ? 1 : 2;
    auto& bin = rep.bins[b];
    bin.frames += 1;
    bin.precision += s.precision;
    bin.recall += s.recall;
    bin.f1 += s.f1;
  }
  for (auto& b : rep.bins)
    if (b.frames > 0) {
      b.precision /= b.frames;
      b.recall /= b.frames;
      b.f1 /= b.frames;
    }
  return rep;
}

// ---- error taxonomy over frames with FP+FN > 0 ----

struct TaxonomyReport {
  int error_frames = 0;
  double fp_heavy_pct = 0, balanced_pct = 0, fn_heavy_pct = 0;
};

inline TaxonomyReport error_taxonomy(const std::vector<FrameScore>& scores, double ratio) {
  TaxonomyReport rep;
  int fp_heavy = 0, fn_heavy = 0, balanced = 0;
  for (const auto& s : scores) {
    if (s.fp + s.fn == 0) continue;
    if (static_cast<double>(s.fp) > ratio * static_cast<double>(s.fn)) ++fp_heavy;
    else if (static_cast<double>(s.fn) > ratio * static_cast<double>(s.fp)) ++fn_heavy;
    else ++balanced;
  }
  rep.error_frames = fp_heavy + fn_heavy + balanced;
  if (rep.error_frames > 0) {
    rep.fp_heavy_pct = 100.0 * fp_heavy / rep.error_frames;
    rep.balanced_pct = 100.0 * balanced / rep.error_frames;
    rep.fn_heavy_pct = 100.0 * fn_heavy / rep.error_frames;
  }
  return rep;
}

// ---- anomaly scores: changed-pixel fraction (binary) or mean probability ----

template <typename T>
double anomaly_score(const Tensor<T>& mask_or_probs) {
  double acc = 0;
  for (int64_t i = 0; i < mask_or_probs.numel(); ++i)
    acc += static_cast<double>(mask_or_probs[i]);
  return acc / static_cast<double>(mask_or_probs.numel());
}

inline double anomaly_score(const Tensor<uint8_t>& mask) {
  double acc = 0;
  for (int64_t i = 0; i < mask.numel(); ++i) acc += mask[i] != 0 ? 1.0 : 0.0;
  return acc / static_cast<double>(mask.numel());
}

// ---- report emission ----

inline json report_to_json(const StratifiedReport& strat, const AmbiguityReport& amb,
                           const TaxonomyReport& tax, const EvalConfig& cfg,
                           const std::vector<std::pair<double, double>>& f1_vs_threshold,
                           const std::map<int, std::vector<double>>& anomaly_series) {
  json j;
  j["degenerate_rule"] = "both-empty frame scores F1=1; empty-GT with any FP scores 0";
  j["overall_f1"] = strat.overall_f1;
  j["frames"] = strat.frames;
  auto bins_json = [](const std::vector<BinStat>& bins) {
    json out = json::array();
    for (const auto& b : bins)
      out.push_back(json{{"bin", b.name}, {"frames", b.frames}, {"mean_f1", b.mean_f1}});
    return out;
  };
  j["by_length"] = bins_json(strat.by_length);
  j["by_change_count"] = bins_json(strat.by_change_count);
  j["by_size"] = bins_json(strat.by_size);
  j["ambiguity"] = json::array();
  for (const auto& b : amb.bins)
    j["ambiguity"].push_back(json{{"bin", b.name},
                                  {"frames", b.frames},
                                  {"precision", b.precision},
                                  {"recall", b.recall},
                                  {"f1", b.f1}});
  j["ambiguity_edges"] = json::array({amb.edge_lo, amb.edge_hi});
  j["taxonomy"] = json{{"error_frames", tax.error_frames},
                       {"fp_heavy_pct", tax.fp_heavy_pct},
                       {"balanced_pct", tax.balanced_pct},
                       {"fn_heavy_pct", tax.fn_heavy_pct},
                       {"ratio", cfg.taxonomy_ratio}};
  json curve = json::array();
  for (auto [tau, f1] : f1_vs_threshold) curve.push_back(json::array({tau, f1}));
  j["f1_vs_threshold"] = curve;
  json anom;
  for (const auto& [pair_id, series] : anomaly_series) anom[std::to_string(pair_id)] = series;
  j["anomaly_scores"] = anom;
  return j;
}

inline std::string report_to_markdown(const json& r) {
  std::string md;
  md += "# Evaluation report\n\n";
  md += "Degenerate-frame rule: " + r.at("degenerate_rule").get<std::string>() + "\n\n";
  char buf[256];
  std::snprintf(buf, sizeof(buf), "Overall frame-wise F1: **%.4f** over %d frames\n\n",
                r.at("overall_f1").get<double>(), r.at("frames").get<int>());
  md += buf;
  auto table = [&md](const char* title, const json& bins) {
    md += std::string("## ") + title + "\n\n| bin | frames | mean F1 |\n|---|---|---|\n";
    for (const auto& b : bins) {
      char row[160];
      std::snprintf(row, sizeof(row), "| %s | %d | %.4f |\n",
                    b.at("bin").get<std::string>().c_str(), b.at("frames").get<int>(),
                    b.at("mean_f1").get<double>());
      md += row;
    }
    md += "\n";
  };
  table("By video length", r.at("by_length"));
  table("By change count", r.at("by_change_count"));
  table("By change-mask size", r.at("by_size"));
  md += "## Alignment ambiguity (top1-top2 gap tertiles)\n\n| bin | frames | precision | recall | F1 |\n|---|---|---|---|---|\n";
  for (const auto& b : r.at("ambiguity")) {
    char row[200];
    std::snprintf(row, sizeof(row), "| %s | %d | %.4f | %.4f | %.4f |\n",
                  b.at("bin").get<std::string>().c_str(), b.at("frames").get<int>(),
                  b.at("precision").get<double>(), b.at("recall").get<double>(),
                  b.at("f1").get<double>());
    md += row;
  }
  const auto& tax = r.at("taxonomy");
  char tbuf[256];
  std::snprintf(tbuf, sizeof(tbuf),
                "\n## Error taxonomy (r=%.1f)\n\nFP-heavy %.1f%%, balanced %.1f%%, FN-heavy "
                "%.1f%% of %d error frames\n",
                tax.at("ratio").get<double>(), tax.at("fp_heavy_pct").get<double>(),
                tax.at("balanced_pct").get<double>(), tax.at("fn_heavy_pct").get<double>(),
                tax.at("error_frames").get<int>());
  md += tbuf;
  return md;
}

}  // namespace vscd
