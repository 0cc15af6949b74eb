#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "vscd/autodiff.hpp"
#include "vscd/image.hpp"
#include "vscd/nn.hpp"
#include "vscd/rng.hpp"

namespace vscd {

enum class BackboneKind { TinyVit, ConvPyramid, Precomputed };

inline BackboneKind backbone_from_string(const std::string& s) {
  if (s == "tiny-vit") return BackboneKind::TinyVit;
  if (s == "conv-pyramid") return BackboneKind::ConvPyramid;
  if (s == "precomputed") return BackboneKind::Precomputed;
  throw ConfigError("unknown backbone kind: " + s);
}

inline std::string backbone_to_string(BackboneKind k) {
  switch (k) {
    case BackboneKind::TinyVit: return "tiny-vit";
    case BackboneKind::ConvPyramid: return "conv-pyramid";
    case BackboneKind::Precomputed: return "precomputed";
  }
  return "?";
}

struct EncoderConfig {
  int patch_size = 8;
  int token_dim = 64;
  int grid_h = 16;
  int grid_w = 16;
  BackboneKind backbone = BackboneKind::TinyVit;
  bool frozen = true;
  int at_heads = 8;
  int at_layers = 1;
  bool at_layernorm = false;  // the aggregation head's internals are config, not doctrine
  bool at_residual = false;
  bool at_enabled = true;     // ablation toggle: off -> descriptor is pure mean pooling
  int vit_blocks = 2;
  int vit_heads = 8;
  std::array<double, 3> norm_mean{0.0, 0.0, 0.0};
  std::array<double, 3> norm_std{1.0, 1.0, 1.0};
  std::string precomputed_dir;

  void validate(int frame_h, int frame_w) const {
    if (patch_size <= 0 || frame_h % patch_size != 0 || frame_w % patch_size != 0)
      throw ConfigError("patch size must divide frame dims exactly");
    if (grid_h != frame_h / patch_size || grid_w != frame_w / patch_size)
      throw ConfigError("grid dims inconsistent with frame/patch size");
    if (token_dim < 8) throw ConfigError("token_dim must be >= 8");
    if (at_heads <= 0 || token_dim % at_heads != 0)
      throw ConfigError("at_heads must divide token_dim");
    if (at_layers < 1) throw ConfigError("at_layers must be >= 1");
    if (backbone == BackboneKind::TinyVit && (vit_heads <= 0 || token_dim % vit_heads != 0))
      throw ConfigError("vit_heads must divide token_dim");
  }
};

template <typename T>
struct PatchTokenGrid {
  Tensor<T> tokens;  // [D, grid_h, grid_w]
  int frame_index = 0;
};

template <typename T>
struct FrameDescriptor {
  Tensor<T> vector;  // [D]
};

// ---- parameter construction ----

template <typename T>
void init_encoder_params(ParamStore<T>& params, const EncoderConfig& cfg, Rng& rng) {
  const int d = cfg.token_dim;
  auto xavier = [&](const std::string& name, std::vector<int> shape, int fi, int fo) {
    Rng r = rng.fork(fnv1a64_str(name));
    init_xavier(params.add(name, std::move(shape)), r, fi, fo);
  };
  auto zeros = [&](const std::string& name, std::vector<int> shape) {
    params.add(name, std::move(shape));
  };
  auto ones = [&](const std::string& name, std::vector<int> shape) {
    params.add(name, std::move(shape)).fill(T(1));
  };

  if (cfg.backbone == BackboneKind::TinyVit) {
    const int pp = 3 * cfg.patch_size * cfg.patch_size;
    xavier("encoder.backbone.patch_embed.w", {d, pp}, pp, d);
    zeros("encoder.backbone.patch_embed.b", {d});
    {
      Rng r = rng.fork(fnv1a64_str("encoder.backbone.pos_embed"));
      init_normal(params.add("encoder.backbone.pos_embed", {cfg.grid_h * cfg.grid_w, d}), r, 0.02);
    }
    for (int i = 0; i < cfg.vit_blocks; ++i) {
      std::string p = "encoder.backbone.block" + std::to_string(i) + ".";
      ones(p + "ln1.gamma", {d});
      zeros(p + "ln1.beta", {d});
      for (const char* nm : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
        xavier(p + nm, {d, d}, d, d);
      for (const char* nm : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"}) zeros(p + nm, {d});
      ones(p + "ln2.gamma", {d});
      zeros(p + "ln2.beta", {d});
      xavier(p + "mlp.w1", {2 * d, d}, d, 2 * d);
      zeros(p + "mlp.b1", {2 * d});
      xavier(p + "mlp.w2", {d, 2 * d}, 2 * d, d);
      zeros(p + "mlp.b2", {d});
    }
  } else if (cfg.backbone == BackboneKind::ConvPyramid) {
    int stages = 0;
    for (int s = cfg.patch_size; s > 1; s /= 2) ++stages;
    int cin = 3;
    for (int i = 0; i < stages; ++i) {
      int cout = (i + 1 == stages) ? d : std::max(8, d >> (stages - 1 - i));
      std::string p = "encoder.backbone.stage" + std::to_string(i) + ".";
      xavier(p + "w", {cout, cin, 3, 3}, cin * 9, cout * 9);
      zeros(p + "b", {cout});
      cin = cout;
    }
  }
  // Precomputed backbone has no parameters.

  // Aggregation head. Output projection starts at zero so AT(E) == 0 and the
  // descriptor begins as pure mean pooling.
  zeros("encoder.at.token", {1, d});
  for (int i = 0; i < cfg.at_layers; ++i) {
    std::string p = "encoder.at.layer" + std::to_string(i) + ".";
    if (cfg.at_layernorm) {
      ones(p + "ln.gamma", {d});
      zeros(p + "ln.beta", {d});
    }
    for (const char* nm : {"wq", "wk", "wv"}) xavier(p + nm, {d, d}, d, d);
    zeros(p + "wo", {d, d});
    for (const char* nm : {"bq", "bk", "bv", "bo"}) zeros(p + nm, {d});
  }
}

inline bool is_backbone_param(const std::string& name) {
  return name.rfind("encoder.backbone.", 0) == 0;
}

// ---- forward pieces ----

namespace detail {

// Multi-head attention: q_rows attend over kv_rows. Shapes [nq,D], [nk,D].
template <typename T>
typename Tape<T>::Var mha(Tape<T>& tape, typename Tape<T>::Var q_rows,
                          typename Tape<T>::Var kv_rows, const TapeParams<T>& P,
                          const std::string& prefix, int heads) {
  using V = typename Tape<T>::Var;
  const int d = tape.val(q_rows).dim(1);
  const int dh = d / heads;
  V q = tape.linear(q_rows, P[prefix + "wq"], P[prefix + "bq"]);
  V k = tape.linear(kv_rows, P[prefix + "wk"], P[prefix + "bk"]);
  V v = tape.linear(kv_rows, P[prefix + "wv"], P[prefix + "bv"]);
  std::vector<V> outs;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (int h = 0; h < heads; ++h) {
    V qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
    V kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
    V vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
    V scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), scale);
    V attn = tape.softmax_rows(scores, T(1));
    outs.push_back(tape.matmul(attn, vh));
  }
  V cat = heads == 1 ? outs[0] : tape.concat_cols(outs);
  return tape.linear(cat, P[prefix + "wo"], P[prefix + "bo"]);
}

template <typename T>
typename Tape<T>::Var vit_block(Tape<T>& tape, typename Tape<T>::Var x, const TapeParams<T>& P,
                                const std::string& prefix, int heads) {
  using V = typename Tape<T>::Var;
  V h1 = tape.layer_norm(x, P[prefix + "ln1.gamma"], P[prefix + "ln1.beta"]);
  V x2 = tape.add(x, mha(tape, h1, h1, P, prefix + "attn.", heads));
  V h2 = tape.layer_norm(x2, P[prefix + "ln2.gamma"], P[prefix + "ln2.beta"]);
  V m = tape.linear(tape.gelu(tape.linear(h2, P[prefix + "mlp.w1"], P[prefix + "mlp.b1"])),
                    P[prefix + "mlp.w2"], P[prefix + "mlp.b2"]);
  return tape.add(x2, m);
}

// Normalized patch matrix [gh*gw, 3*p*p] from a [3,H,W] frame.
template <typename T>
Tensor<T> patchify(const Tensor<T>& frame, const EncoderConfig& cfg) {
  const int p = cfg.patch_size;
  const int gh = cfg.grid_h, gw = cfg.grid_w;
  Tensor<T> rows({gh * gw, 3 * p * p});
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      T* r = rows.ptr() + static_cast<size_t>(gy * gw + gx) * 3 * p * p;
      int idx = 0;
      for (int c = 0; c < 3; ++c) {
        T mean = static_cast<T>(cfg.norm_mean[static_cast<size_t>(c)]);
        T inv_std = static_cast<T>(1.0 / cfg.norm_std[static_cast<size_t>(c)]);
        for (int y = 0; y < p; ++y)
          for (int x = 0; x < p; ++x)
            r[idx++] = (frame.at(c, gy * p + y, gx * p + x) - mean) * inv_std;
      }
    }
  return rows;
}

}  // namespace detail

// Encode one frame to a token grid var [D, gh, gw]. `frame` is [3,H,W] in [0,1].
template <typename T>
typename Tape<T>::Var encode_frame(Tape<T>& tape, const TapeParams<T>& P,
                                   const EncoderConfig& cfg, const Tensor<T>& frame) {
  using V = typename Tape<T>::Var;
  if (frame.ndim() != 3 || frame.dim(0) != 3) throw InputError("encode_frame: frame must be [3,H,W]");
  cfg.validate(frame.dim(1), frame.dim(2));
  if (!frame.all_finite()) throw InputError("encode_frame: non-finite pixel value");

  if (cfg.backbone == BackboneKind::ConvPyramid) {
    V x = tape.constant(frame);
    int stages = 0;
    for (int s = cfg.patch_size; s > 1; s /= 2) ++stages;
    for (int i = 0; i < stages; ++i) {
      std::string p = "encoder.backbone.stage" + std::to_string(i) + ".";
      x = tape.avgpool2(tape.gelu(tape.conv2d(x, P[p + "w"], P[p + "b"], 1)));
    }
    return x;
  }
  if (cfg.backbone == BackboneKind::Precomputed)
    throw ConfigError("encode_frame: precomputed backbone needs token records, not frames");

  V rows = tape.constant(detail::patchify(frame, cfg));
  V tok = tape.linear(rows, P["encoder.backbone.patch_embed.w"], P["encoder.backbone.patch_embed.b"]);
  tok = tape.add(tok, P["encoder.backbone.pos_embed"]);
  for (int i = 0; i < cfg.vit_blocks; ++i)
    tok = detail::vit_block(tape, tok, P, "encoder.backbone.block" + std::to_string(i) + ".",
                            cfg.vit_heads);
  return tape.rows_to_chw(tok, cfg.grid_h, cfg.grid_w);
}

// Alignment-token aggregation AT(E): the learnable token attends over all
// patch tokens; returns a [D] vector var.
template <typename T>
typename Tape<T>::Var alignment_token_aggregate(Tape<T>& tape, const TapeParams<T>& P,
                                                const EncoderConfig& cfg,
                                                typename Tape<T>::Var grid) {
  using V = typename Tape<T>::Var;
  const int d = tape.val(grid).dim(0);
  if (d != cfg.token_dim || cfg.token_dim % cfg.at_heads != 0)
    throw ConfigError("alignment_token_aggregate: head/token dimension mismatch");
  V tokens = tape.chw_to_rows(grid);
  V q = P["encoder.at.token"];
  for (int i = 0; i < cfg.at_layers; ++i) {
    std::string p = "encoder.at.layer" + std::to_string(i) + ".";
    V qin = q;
    if (cfg.at_layernorm) qin = tape.layer_norm(q, P[p + "ln.gamma"], P[p + "ln.beta"]);
    V out = detail::mha(tape, qin, tokens, P, p, cfg.at_heads);
    q = cfg.at_residual ? tape.add(q, out) : out;
  }
  return tape.reshape(q, {d});
}

// v_t = AvgPool(E_t) + AT(E_t); with the head disabled this is exactly the mean.
template <typename T>
typename Tape<T>::Var frame_descriptor(Tape<T>& tape, const TapeParams<T>& P,
                                       const EncoderConfig& cfg, typename Tape<T>::Var grid) {
  auto pooled = tape.mean_spatial(grid);
  if (!cfg.at_enabled) return pooled;
  return tape.add(pooled, alignment_token_aggregate(tape, P, cfg, grid));
}

// Value-level convenience: encode a clip of [3,H,W] frames (no gradients).
template <typename T>
std::vector<PatchTokenGrid<T>> encode_frames(const std::vector<Tensor<T>>& frames,
                                             const EncoderConfig& cfg, ParamStore<T>& params) {
  std::vector<PatchTokenGrid<T>> out;
  if (cfg.backbone == BackboneKind::Precomputed)
    throw ConfigError("encode_frames: use load_precomputed_tokens for precomputed mode");
  for (size_t i = 0; i < frames.size(); ++i) {
    Tape<T> tape;
    TapeParams<T> P(tape, params, [](const std::string&) { return false; });
    auto grid = encode_frame(tape, P, cfg, frames[i]);
    out.push_back(PatchTokenGrid<T>{tape.val(grid), static_cast<int>(i)});
  }
  return out;
}

template <typename T>
std::vector<PatchTokenGrid<T>> load_precomputed_tokens(const std::string& path,
                                                       const EncoderConfig& cfg) {
  std::vector<PatchTokenGrid<T>> out;
  for (auto& rec : read_token_records(path)) {
    if (rec.tokens.dim(0) != cfg.token_dim || rec.tokens.dim(1) != cfg.grid_h ||
        rec.tokens.dim(2) != cfg.grid_w)
      throw ConfigError("precomputed tokens do not match encoder config: " + path);
    out.push_back(PatchTokenGrid<T>{rec.tokens.template cast<T>(), rec.frame_index});
  }
  return out;
}

}  // namespace vscd
