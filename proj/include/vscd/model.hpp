#pragma once

#include <memory>
#include <string>
#include <vector>

#include "vscd/alignment.hpp"
#include "vscd/correspondence.hpp"
#include "vscd/encoder.hpp"
#include "vscd/fusion.hpp"
#include "vscd/nn.hpp"

namespace vscd {

struct ModelConfig {
  EncoderConfig encoder;
  AlignmentParams align;
  CorrespondenceConfig corr;
  FusionConfig fusion;
  DecoderConfig decoder;

  double tau_f = 0.5;
  int delta = 2;
  int min_seg_len = 2;
  int l_max = 5;
  double split_quantile = 0.0;
  int top_k = 4;
  int candidate_cap = 6;

  int frame_h = 128;
  int frame_w = 128;
  uint64_t init_seed = 1;

  void finalize() {
    encoder.grid_h = frame_h / encoder.patch_size;
    encoder.grid_w = frame_w / encoder.patch_size;
    if (corr.reduced_channels <= 0) corr.reduced_channels = encoder.token_dim / 2;
    if (decoder.stage_channels.empty()) {
      int n = decoder_num_stages(encoder.grid_h, frame_h);
      for (int i = 0; i < n; ++i)
        decoder.stage_channels.push_back(std::max(8, corr.change_channels >> i));
    }
    validate();
  }

  void validate() const {
    encoder.validate(frame_h, frame_w);
    if (!(tau_f > 0.0)) throw ConfigError("tau_f must be > 0");
    if (delta < 0) throw ConfigError("delta must be >= 0");
    if (min_seg_len < 1 || min_seg_len > l_max)
      throw ConfigError("need 1 <= min_seg_len <= l_max");
    if (top_k < 0) throw ConfigError("top_k must be >= 0");
    if (candidate_cap < 1) throw ConfigError("candidate_cap must be >= 1");
    if (corr.window_k < 1 || corr.window_k % 2 == 0)
      throw ConfigError("correlation window k must be odd and >= 1");
    if (decoder_num_stages(encoder.grid_h, frame_h) !=
        static_cast<int>(decoder.stage_channels.size()))
      throw ConfigError("decoder stage_channels inconsistent with resolution chain");
  }
};

// Full three-stage pipeline over one reference/query keyframe pair.
template <typename T>
class VscdNet {
 public:
  explicit VscdNet(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.finalize();
    Rng rng(cfg_.init_seed);
    init_encoder_params(params_, cfg_.encoder, rng);
    init_alignment_params(params_, cfg_.align, rng);
    init_correspondence_params(params_, cfg_.corr, cfg_.encoder.token_dim, rng);
    init_decoder_params(params_, cfg_.decoder, cfg_.corr.change_channels, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // Trainability predicate honoring the frozen-backbone contract.
  std::function<bool(const std::string&)> trainable_predicate(bool freeze_backbone) const {
    return [freeze_backbone](const std::string& name) {
      return !(freeze_backbone && is_backbone_param(name));
    };
  }

  struct PipelineResult {
    typename Tape<T>::Var similarity;   // S
    typename Tape<T>::Var logits_grid;  // A
    typename Tape<T>::Var matching;     // P_frame
    std::vector<SegmentProposal> segments;
    std::vector<CandidateSet> candidates;
    std::vector<typename Tape<T>::Var> mask_logits;  // [1,H,W] per query keyframe
  };

  // q_frames/r_frames: [3,H,W] tensors in [0,1]. Token grids may be supplied
  // to skip the (frozen) backbone; RGB frames are still needed for decoding.
  PipelineResult forward(Tape<T>& tape, const TapeParams<T>& P,
                         const std::vector<Tensor<T>>& q_frames,
                         const std::vector<Tensor<T>>& r_frames,
                         const std::vector<Tensor<T>>* q_tokens = nullptr,
                         const std::vector<Tensor<T>>* r_tokens = nullptr) const {
    using V = typename Tape<T>::Var;
    const int tq = q_tokens ? static_cast<int>(q_tokens->size()) : static_cast<int>(q_frames.size());
    const int tr = r_tokens ? static_cast<int>(r_tokens->size()) : static_cast<int>(r_frames.size());
    if (tq == 0 || tr == 0) throw InputError("forward: empty keyframe list");

    std::vector<V> q_grids, r_grids;
    for (int i = 0; i < tq; ++i)
      q_grids.push_back(q_tokens ? tape.constant((*q_tokens)[static_cast<size_t>(i)])
                                 : encode_frame(tape, P, cfg_.encoder, q_frames[static_cast<size_t>(i)]));
    for (int i = 0; i < tr; ++i)
      r_grids.push_back(r_tokens ? tape.constant((*r_tokens)[static_cast<size_t>(i)])
                                 : encode_frame(tape, P, cfg_.encoder, r_frames[static_cast<size_t>(i)]));

    // Stage 1
    std::vector<V> q_desc, r_desc;
    for (V g : q_grids) q_desc.push_back(frame_descriptor(tape, P, cfg_.encoder, g));
    for (V g : r_grids) r_desc.push_back(frame_descriptor(tape, P, cfg_.encoder, g));
    V s_grid = similarity_grid(tape, tape.stack_rows(q_desc), tape.stack_rows(r_desc));
    V a_grid = refine_alignment(tape, P, s_grid);
    V p_frame = soft_matching(tape, a_grid, static_cast<T>(cfg_.tau_f));

    PipelineResult res;
    res.similarity = s_grid;
    res.logits_grid = a_grid;
    res.matching = p_frame;
    res.segments = segment_proposals(tape.val(p_frame), tape.val(a_grid), cfg_.delta,
                                     cfg_.min_seg_len, cfg_.l_max, cfg_.split_quantile);
    for (int t = 0; t < tq; ++t)
      res.candidates.push_back(
          candidate_set(t, res.segments, tape.val(p_frame), cfg_.top_k, cfg_.candidate_cap));

    // Stages 2 + 3 per query keyframe
    const int gh = cfg_.encoder.grid_h, gw = cfg_.encoder.grid_w;
    for (int t = 0; t < tq; ++t) {
      std::vector<V> feats, weights;
      for (int s : res.candidates[static_cast<size_t>(t)].refs) {
        auto vol = local_correlation(tape, q_grids[static_cast<size_t>(t)],
                                     r_grids[static_cast<size_t>(s)], cfg_.corr.window_k);
        V p_patch = patch_match(tape, vol);
        V disp = expected_displacement(tape, p_patch, cfg_.corr.window_k);
        V warped = warp_bilinear(tape, r_grids[static_cast<size_t>(s)], disp);
        V feat = change_feature(tape, P, q_grids[static_cast<size_t>(t)], warped);

        V csp;
        if (cfg_.fusion.use_patch_confidence) {
          csp = patch_confidence(tape, p_patch, cfg_.corr.window_k,
                                 cfg_.fusion.conf_peak_weight, cfg_.fusion.conf_entropy_weight);
        } else {
          Tensor<T> ones({gh, gw});
          ones.fill(T(1));
          csp = tape.constant(std::move(ones));
        }
        V weight = csp;
        if (cfg_.fusion.use_frame_confidence)
          weight = tape.mul_map_scalar(csp, tape.gather_rc(p_frame, t, s));
        feats.push_back(feat);
        weights.push_back(weight);
      }
      V fused = fuse_features(tape, feats, weights, cfg_.fusion.fuse_epsilon);
      res.mask_logits.push_back(
          decode_mask_logits(tape, P, cfg_.decoder, fused, q_frames[static_cast<size_t>(t)]));
    }
    return res;
  }

  // Value-level token grids for caching under a frozen backbone.
  std::vector<Tensor<T>> encode_clip(const std::vector<Tensor<T>>& frames) {
    std::vector<Tensor<T>> out;
    for (const auto& f : frames) {
      Tape<T> tape;
      TapeParams<T> P(tape, params_, [](const std::string&) { return false; });
      out.push_back(tape.val(encode_frame(tape, P, cfg_.encoder, f)));
    }
    return out;
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
};

}  // namespace vscd
