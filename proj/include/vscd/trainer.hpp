#pragma once

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "vscd/config.hpp"
#include "vscd/model.hpp"
#include "vscd/synthdata.hpp"

namespace vscd {

// idx_i = floor((i + 0.5) * T / T_key): centered uniform coverage; repetition
// happens naturally when the clip is shorter than T_key.
inline std::vector<int> sample_keyframes(int clip_length, int t_key) {
  if (clip_length < 1) throw InputError("sample_keyframes: empty clip");
  if (t_key < 1) throw ConfigError("sample_keyframes: t_key must be >= 1");
  std::vector<int> idx(static_cast<size_t>(t_key));
  for (int i = 0; i < t_key; ++i)
    idx[static_cast<size_t>(i)] = static_cast<int>(
        std::floor((i + 0.5) * static_cast<double>(clip_length) / t_key));
  return idx;
}

// BCE-with-logits plus soft Dice on one keyframe.
template <typename T>
typename Tape<T>::Var mask_loss(Tape<T>& tape, typename Tape<T>::Var logits,
                                const Tensor<T>& mask, T dice_smooth) {
  const Tensor<T>& z = tape.val(logits);
  if (z.numel() != mask.numel()) throw InputError("mask_loss: shape mismatch");
  for (const T& v : mask.data)
    if (v != T(0) && v != T(1)) throw InputError("mask_loss: mask must be binary");
  return tape.add(tape.bce_with_logits_mean(logits, mask), tape.dice_loss(logits, mask, dice_smooth));
}

// Value-level convenience (tests, reporting).
template <typename T>
T mask_loss_value(const Tensor<T>& logits, const Tensor<T>& mask, T dice_smooth) {
  Tape<T> tape;
  auto z = tape.constant(logits);
  return tape.scalar(mask_loss(tape, z, mask, dice_smooth));
}

// ---- prepared pair: keyframes as tensors, masks aligned by the same formula ----

template <typename T>
struct PreparedPair {
  int pair_id = 0;
  std::vector<Tensor<T>> q_frames, r_frames;  // [3,H,W], values in [0,1]
  std::vector<Tensor<T>> masks;               // [1,H,W] binary, one per query keyframe
  std::vector<int> q_indices, r_indices;
};

template <typename T>
PreparedPair<T> prepare_pair(const DatasetPair& dp, int t_key) {
  PreparedPair<T> pp;
  pp.pair_id = dp.meta.pair_id;
  pp.r_indices = sample_keyframes(static_cast<int>(dp.ref.frames.size()), t_key);
  pp.q_indices = sample_keyframes(static_cast<int>(dp.query.frames.size()), t_key);
  for (int i : pp.r_indices)
    pp.r_frames.push_back(to_float_chw<T>(dp.ref.frames[static_cast<size_t>(i)]));
  for (int i : pp.q_indices) {
    pp.q_frames.push_back(to_float_chw<T>(dp.query.frames[static_cast<size_t>(i)]));
    const Image& m = dp.masks[static_cast<size_t>(i)];
    Tensor<T> mt({1, m.h, m.w});
    for (int y = 0; y < m.h; ++y)
      for (int x = 0; x < m.w; ++x) mt.at(0, y, x) = m.at(y, x) > 127 ? T(1) : T(0);
    pp.masks.push_back(std::move(mt));
  }
  return pp;
}

// ---- checkpoint container ----
// magic, little-endian u64 header length, JSON header, float32 payloads in
// header order. Reload is bit-exact for float models.

inline constexpr char kCheckpointMagic[] = "VSCDCKPT1\n";

template <typename T>
void save_checkpoint(const std::string& path, const VscdNet<T>& model, const json& model_config,
                     int step, const std::vector<double>& loss_history) {
  json header;
  header["version"] = 1;
  header["step"] = step;
  header["config"] = model_config;
  header["loss_history"] = loss_history;
  json tensors = json::array();
  for (const auto& [name, t] : model.params().all())
    tensors.push_back(json{{"name", name}, {"shape", t.shape}});
  header["tensors"] = tensors;
  std::string hdr = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("save_checkpoint: cannot open " + path);
  f.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  uint64_t len = hdr.size();
  f.write(reinterpret_cast<const char*>(&len), sizeof(len));
  f.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  for (const auto& [name, t] : model.params().all()) {
    for (int64_t i = 0; i < t.numel(); ++i) {
      float v = static_cast<float>(t[i]);
      f.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
  }
  if (!f) throw DataError("save_checkpoint: write failed: " + path);
}

// Loads into an existing model; the stored config snapshot must match the
// model's (no silent reshape). Returns the stored header.
template <typename T>
json load_checkpoint(const std::string& path, VscdNet<T>& model, const json& expected_config) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("load_checkpoint: cannot open " + path);
  char magic[sizeof(kCheckpointMagic) - 1];
  f.read(magic, sizeof(magic));
  if (!f || std::string(magic, sizeof(magic)) != std::string(kCheckpointMagic).substr(0, sizeof(magic)))
    throw DataError("load_checkpoint: bad magic in " + path);
  uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string hdr(len, '\0');
  f.read(hdr.data(), static_cast<std::streamsize>(len));
  if (!f) throw DataError("load_checkpoint: truncated header in " + path);
  json header = json::parse(hdr, nullptr, false);
  if (header.is_discarded()) throw DataError("load_checkpoint: corrupt header in " + path);
  if (header.at("version") != 1) throw DataError("load_checkpoint: unsupported version");
  if (!expected_config.is_null() && header.at("config") != expected_config)
    throw DataError("load_checkpoint: config mismatch between checkpoint and model");

  for (const auto& trec : header.at("tensors")) {
    std::string name = trec.at("name");
    std::vector<int> shape = trec.at("shape").get<std::vector<int>>();
    Tensor<T>& dst = model.params().get(name);
    if (dst.shape != shape)
      throw DataError("load_checkpoint: tensor shape mismatch for " + name);
    for (int64_t i = 0; i < dst.numel(); ++i) {
      float v;
      f.read(reinterpret_cast<char*>(&v), sizeof(v));
      dst[i] = static_cast<T>(v);
    }
  }
  if (!f) throw DataError("load_checkpoint: truncated payload in " + path);
  return header;
}

// ---- training loop ----

struct TrainResult {
  std::vector<double> loss_history;
  int steps = 0;
  bool hit_time_budget = false;
};

template <typename T>
TrainResult train(VscdNet<T>& model, const std::vector<DatasetPair>& dataset,
                  const TrainConfig& cfg, const std::string& log_path = "") {
  cfg.validate();
  if (dataset.empty()) throw InputError("train: empty dataset");
  auto trainable = model.trainable_predicate(cfg.freeze_encoder);

  typename AdamW<T>::Config ocfg;
  ocfg.lr = cfg.learning_rate;
  ocfg.weight_decay = cfg.weight_decay;
  ocfg.beta1 = cfg.beta1;
  ocfg.beta2 = cfg.beta2;
  AdamW<T> opt(ocfg);

  std::vector<PreparedPair<T>> prepared;
  for (const auto& dp : dataset) prepared.push_back(prepare_pair<T>(dp, cfg.t_key));

  // frozen backbone: token grids are constants, encode once
  std::vector<std::vector<Tensor<T>>> q_tok, r_tok;
  if (cfg.freeze_encoder) {
    for (const auto& pp : prepared) {
      q_tok.push_back(model.encode_clip(pp.q_frames));
      r_tok.push_back(model.encode_clip(pp.r_frames));
    }
  }

  std::ofstream log;
  if (!log_path.empty()) log.open(log_path);
  TrainResult result;
  Rng order_rng = Rng(cfg.seed).fork(0x0bde4);
  auto t_start = std::chrono::steady_clock::now();

  std::map<std::string, Tensor<T>> grad_accum;
  int accum_count = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order(prepared.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(order_rng.uniform_int(0, i))]);

    for (int pi : order) {
      const PreparedPair<T>& pp = prepared[static_cast<size_t>(pi)];
      Tape<T> tape;
      TapeParams<T> P(tape, model.params(), trainable);
      auto res = model.forward(tape, P, pp.q_frames, pp.r_frames,
                               cfg.freeze_encoder ? &q_tok[static_cast<size_t>(pi)] : nullptr,
                               cfg.freeze_encoder ? &r_tok[static_cast<size_t>(pi)] : nullptr);
      std::vector<typename Tape<T>::Var> losses;
      for (size_t t = 0; t < res.mask_logits.size(); ++t)
        losses.push_back(mask_loss(tape, res.mask_logits[t], pp.masks[t],
                                   static_cast<T>(cfg.dice_smooth)));
      auto loss = tape.scale(tape.add_many(losses), T(1) / static_cast<T>(losses.size()));
      double loss_value = static_cast<double>(tape.scalar(loss));
      if (!std::isfinite(loss_value))
        throw InputError("train: non-finite loss at step " + std::to_string(result.steps) +
                         " pair " + std::to_string(pp.pair_id));
      tape.backward(loss);

      auto grads = P.grads();
      if (cfg.batch_size == 1) {
        opt.step(model.params(), grads, trainable);
      } else {
        for (auto& [name, g] : grads) {
          auto [it, fresh] = grad_accum.try_emplace(name, g);
          if (!fresh)
            for (int64_t i = 0; i < g.numel(); ++i) it->second[i] += g[i];
        }
        if (++accum_count == cfg.batch_size) {
          for (auto& [name, g] : grad_accum)
            for (auto& v : g.data) v /= static_cast<T>(cfg.batch_size);
          opt.step(model.params(), grad_accum, trainable);
          grad_accum.clear();
          accum_count = 0;
        }
      }

      result.loss_history.push_back(loss_value);
      ++result.steps;
      double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
      if (log.is_open()) {
        json line{{"step", result.steps}, {"loss", loss_value}, {"lr", cfg.learning_rate},
                  {"wall_time_s", wall}};
        log << line.dump() << "\n";
      }
      if (cfg.max_minutes > 0 && wall > cfg.max_minutes * 60.0) {
        result.hit_time_budget = true;
        return result;
      }
    }
  }
  return result;
}

}  // namespace vscd
