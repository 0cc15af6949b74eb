#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "vscd/autodiff.hpp"
#include "vscd/nn.hpp"

namespace vscd {

// Stage 3: patch-level confidence from matching peakiness/entropy,
// confidence-weighted fusion across candidates, and query-guided decoding.

struct FusionConfig {
  double conf_peak_weight = 0.5;     // c_p
  double conf_entropy_weight = 0.5;  // c
  double fuse_epsilon = 1e-8;
  double threshold = 0.5;  // tau for mask binarization
  bool use_frame_confidence = true;  // C_f toggle
  bool use_patch_confidence = true;  // C_sp toggle
};

struct DecoderConfig {
  std::vector<int> stage_channels;  // one entry per x2 stage
  int rgb_proj_channels = 16;
};

// p_max per cell (max over offsets; invalid offsets hold exact zero).
template <typename T>
typename Tape<T>::Var cell_max(Tape<T>& tape, typename Tape<T>::Var p) {
  const Tensor<T>& pv = tape.val(p);
  const int k2 = pv.dim(0), h = pv.dim(1), w = pv.dim(2);
  Tensor<T> out({h, w});
  auto amax = std::make_shared<Tensor<int>>(std::vector<int>{h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int best = 0;
      for (int i = 1; i < k2; ++i)
        if (pv.at(i, y, x) > pv.at(best, y, x)) best = i;
      out.at(y, x) = pv.at(best, y, x);
      amax->at(y, x) = best;
    }
  return tape.make(std::move(out), {p}, [p, amax, k2, h, w](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> gp({k2, h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) gp.at(amax->at(y, x), y, x) = g.at(y, x);
    t.accumulate(p, gp);
  });
}

// Normalized Shannon entropy per cell with 0*log0 := 0; the normalizer stays
// log(k^2) even where border masking leaves fewer valid offsets.
template <typename T>
typename Tape<T>::Var cell_entropy(Tape<T>& tape, typename Tape<T>::Var p, int k) {
  const Tensor<T>& pv = tape.val(p);
  const int k2 = pv.dim(0), h = pv.dim(1), w = pv.dim(2);
  if (k == 1) return tape.constant(Tensor<T>({h, w}));  // trivially one-hot
  const T norm = static_cast<T>(std::log(static_cast<double>(k) * k));
  Tensor<T> out({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      T acc = T(0);
      for (int i = 0; i < k2; ++i) {
        T pi = pv.at(i, y, x);
        if (pi > T(0)) acc -= pi * std::log(pi);
      }
      out.at(y, x) = acc / norm;
    }
  return tape.make(std::move(out), {p}, [p, norm, k2, h, w](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& pv2 = t.val(p);
    Tensor<T> gp({k2, h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        T gv = g.at(y, x);
        if (gv == T(0)) continue;
        for (int i = 0; i < k2; ++i) {
          T pi = pv2.at(i, y, x);
          if (pi > T(0)) gp.at(i, y, x) = -gv * (T(1) + std::log(pi)) / norm;
        }
      }
    t.accumulate(p, gp);
  });
}

// C_sp = c_p * p_max + c * (1 - e); bounded by [0, c_p + c].
template <typename T>
typename Tape<T>::Var patch_confidence(Tape<T>& tape, typename Tape<T>::Var p_patch, int k,
                                       double c_p, double c) {
  if (c_p < 0.0 || c < 0.0) throw ConfigError("patch_confidence: weights must be >= 0");
  auto pmax = cell_max(tape, p_patch);
  auto ent = cell_entropy(tape, p_patch, k);
  auto one_minus_e = tape.add_const(tape.scale(ent, T(-1)), T(1));
  return tape.add(tape.scale(pmax, static_cast<T>(c_p)),
                  tape.scale(one_minus_e, static_cast<T>(c)));
}

// Per-cell weighted average with epsilon-stabilized denominator.
template <typename T>
typename Tape<T>::Var fuse_features(Tape<T>& tape,
                                    const std::vector<typename Tape<T>::Var>& features,
                                    const std::vector<typename Tape<T>::Var>& weight_maps,
                                    double epsilon) {
  if (features.empty()) throw InputError("fuse_features: empty candidate list");
  if (features.size() != weight_maps.size())
    throw InputError("fuse_features: feature/weight count mismatch");
  std::vector<typename Tape<T>::Var> weighted;
  for (size_t i = 0; i < features.size(); ++i)
    weighted.push_back(tape.mul_channels(features[i], weight_maps[i]));
  auto num = weighted.size() == 1 ? weighted[0] : tape.add_many(weighted);
  auto den_sum =
      weight_maps.size() == 1 ? weight_maps[0] : tape.add_many(weight_maps);
  auto den = tape.add_const(den_sum, static_cast<T>(epsilon));
  return tape.div_channels(num, den);
}

// ---- decoder ----

inline int decoder_num_stages(int grid_h, int frame_h) {
  int n = 0, cur = grid_h;
  while (cur < frame_h) {
    cur *= 2;
    ++n;
  }
  if (cur != frame_h)
    throw ConfigError("decoder: resolution chain cannot reach frame size by x2 steps");
  return n;
}

// RGB is injected after upsampling at the middle stage and the final stage.
inline bool decoder_injects_at(int stage, int num_stages) {
  int middle = (num_stages - 1) / 2;
  return stage == middle || stage == num_stages - 1;
}

template <typename T>
void init_decoder_params(ParamStore<T>& params, const DecoderConfig& cfg, int fused_channels,
                         Rng& rng) {
  int cin = fused_channels;
  const int n = static_cast<int>(cfg.stage_channels.size());
  for (int i = 0; i < n; ++i) {
    if (decoder_injects_at(i, n)) {
      std::string ip = "decoder.inject" + std::to_string(i) + ".";
      Rng r = rng.fork(fnv1a64_str(ip + "w"));
      init_xavier(params.add(ip + "w", {cfg.rgb_proj_channels, 3, 1, 1}), r, 3,
                  cfg.rgb_proj_channels);
      params.add(ip + "b", {cfg.rgb_proj_channels});
      cin += cfg.rgb_proj_channels;
    }
    std::string sp = "decoder.stage" + std::to_string(i) + ".";
    int cout = cfg.stage_channels[static_cast<size_t>(i)];
    Rng r = rng.fork(fnv1a64_str(sp + "w"));
    init_xavier(params.add(sp + "w", {cout, cin, 3, 3}), r, cin * 9, cout * 9);
    params.add(sp + "b", {cout});
    cin = cout;
  }
  // Zero-init head: an untrained model emits exactly the output bias.
  params.add("decoder.out.w", {1, cin, 1, 1});
  params.add("decoder.out.b", {1});
}

// Box-filter downscale by an integer factor (frame dims are powers of two).
template <typename T>
Tensor<T> downscale_avg(const Tensor<T>& rgb, int factor) {
  const int c = rgb.dim(0), h = rgb.dim(1), w = rgb.dim(2);
  if (factor == 1) return rgb;
  Tensor<T> out({c, h / factor, w / factor});
  const T inv = T(1) / static_cast<T>(factor * factor);
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h / factor; ++y)
      for (int x = 0; x < w / factor; ++x) {
        T acc = T(0);
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) acc += rgb.at(ci, y * factor + dy, x * factor + dx);
        out.at(ci, y, x) = acc * inv;
      }
  return out;
}

// Progressive x2 decoding from the fused grid to a full-resolution logit
// plane [1,H,W]; the query RGB frame enters at two resolutions.
template <typename T>
typename Tape<T>::Var decode_mask_logits(Tape<T>& tape, const TapeParams<T>& P,
                                         const DecoderConfig& cfg, typename Tape<T>::Var fused,
                                         const Tensor<T>& query_rgb) {
  const Tensor<T>& f = tape.val(fused);
  const int gh = f.dim(1), gw = f.dim(2);
  const int fh = query_rgb.dim(1), fw = query_rgb.dim(2);
  const int n = decoder_num_stages(gh, fh);
  if (decoder_num_stages(gw, fw) != n)
    throw ConfigError("decoder: grid/frame aspect mismatch");
  if (static_cast<int>(cfg.stage_channels.size()) != n)
    throw ConfigError("decoder: stage_channels must have one entry per x2 stage");

  auto x = fused;
  int cur_h = gh;
  for (int i = 0; i < n; ++i) {
    x = tape.upsample_nearest2(x);
    cur_h *= 2;
    if (decoder_injects_at(i, n)) {
      std::string ip = "decoder.inject" + std::to_string(i) + ".";
      auto rgb = tape.constant(downscale_avg(query_rgb, fh / cur_h));
      auto proj = tape.gelu(tape.conv2d(rgb, P[ip + "w"], P[ip + "b"], 0));
      x = tape.concat_channels({x, proj});
    }
    std::string sp = "decoder.stage" + std::to_string(i) + ".";
    x = tape.gelu(tape.conv2d(x, P[sp + "w"], P[sp + "b"], 1));
  }
  return tape.conv2d(x, P["decoder.out.w"], P["decoder.out.b"], 0);
}

// M = 1 iff sigmoid(z) > tau, strictly. Done in logit space for exactness.
template <typename T>
Tensor<uint8_t> predict_mask(const Tensor<T>& logits, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("predict_mask: tau must be in (0,1)");
  const double logit_tau = std::log(tau / (1.0 - tau));
  std::vector<int> shape = logits.shape;
  if (shape.size() == 3 && shape[0] == 1) shape = {shape[1], shape[2]};
  Tensor<uint8_t> mask(shape);
  for (int64_t i = 0; i < logits.numel(); ++i)
    mask[i] = static_cast<double>(logits[i]) > logit_tau ? 1 : 0;
  return mask;
}

// Per-frame prediction bundle kept by inference and evaluation.
template <typename T>
struct ChangeMaskSequence {
  std::vector<Tensor<T>> logits;        // [1,H,W] per query keyframe
  std::vector<Tensor<T>> probabilities; // sigmoid(logits)
  std::vector<Tensor<uint8_t>> masks;   // {0,1}
  double threshold = 0.5;
};

}  // namespace vscd
