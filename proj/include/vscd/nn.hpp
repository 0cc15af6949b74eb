#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "vscd/autodiff.hpp"
#include "vscd/rng.hpp"
#include "vscd/tensor.hpp"

namespace vscd {

// Named parameter tensors. std::map keeps iteration order stable, which makes
// checkpoints and optimizer sweeps deterministic.
template <typename T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, std::vector<int> shape) {
    auto [it, inserted] = params_.emplace(name, Tensor<T>(std::move(shape)));
    if (!inserted) throw ConfigError("duplicate parameter: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return params_.count(name) > 0; }

  Tensor<T>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Tensor<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  std::map<std::string, Tensor<T>>& all() { return params_; }
  const std::map<std::string, Tensor<T>>& all() const { return params_; }

  int64_t total_count() const {
    int64_t n = 0;
    for (const auto& [k, v] : params_) n += v.numel();
    return n;
  }

 private:
  std::map<std::string, Tensor<T>> params_;
};

// Per-forward handles: parameter name -> tape leaf.
template <typename T>
class TapeParams {
 public:
  TapeParams(Tape<T>& tape, ParamStore<T>& store,
             const std::function<bool(const std::string&)>& trainable)
      : tape_(tape) {
    for (auto& [name, tensor] : store.all())
      vars_.emplace(name, tape.leaf(tensor, trainable ? trainable(name) : true));
  }

  typename Tape<T>::Var operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("unknown parameter var: " + name);
    return it->second;
  }

  const std::map<std::string, typename Tape<T>::Var>& vars() const { return vars_; }

  // Pull accumulated gradients back out, keyed by name. Missing grads are zero.
  std::map<std::string, Tensor<T>> grads() {
    std::map<std::string, Tensor<T>> out;
    for (auto& [name, var] : vars_) out.emplace(name, tape_.grad(var));
    return out;
  }

 private:
  Tape<T>& tape_;
  std::map<std::string, typename Tape<T>::Var> vars_;
};

// ---- initializers ----

template <typename T>
void init_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
}

template <typename T>
void init_normal(Tensor<T>& t, Rng& rng, double stddev) {
  for (auto& v : t.data) v = static_cast<T>(rng.normal(0.0, stddev));
}

// Xavier/Glorot uniform; fan sizes passed explicitly since conv kernels and
// linear weights flatten differently.
template <typename T>
void init_xavier(Tensor<T>& t, Rng& rng, int fan_in, int fan_out) {
  double limit = std::sqrt(6.0 / (fan_in + fan_out));
  init_uniform(t, rng, -limit, limit);
}

// ---- optimizer ----

// AdamW with decoupled weight decay. Frozen tensors are skipped entirely: no
// moments are created for them, and their bytes never change.
template <typename T>
class AdamW {
 public:
  struct Config {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
  };

  explicit AdamW(Config cfg) : cfg_(cfg) {}

  void step(ParamStore<T>& params, const std::map<std::string, Tensor<T>>& grads,
            const std::function<bool(const std::string&)>& trainable) {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (auto& [name, p] : params.all()) {
      if (trainable && !trainable(name)) continue;
      auto git = grads.find(name);
      if (git == grads.end()) continue;
      const Tensor<T>& g = git->second;
      Tensor<T>& m = moment1_.try_emplace(name, Tensor<T>(p.shape)).first->second;
      Tensor<T>& v = moment2_.try_emplace(name, Tensor<T>(p.shape)).first->second;
      for (int64_t i = 0; i < p.numel(); ++i) {
        double gi = static_cast<double>(g[i]);
        double mi = cfg_.beta1 * static_cast<double>(m[i]) + (1.0 - cfg_.beta1) * gi;
        double vi = cfg_.beta2 * static_cast<double>(v[i]) + (1.0 - cfg_.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
        double decayed = static_cast<double>(p[i]) * cfg_.weight_decay;
        p[i] = static_cast<T>(static_cast<double>(p[i]) - cfg_.lr * (update + decayed));
      }
    }
  }

  int step_count() const { return t_; }

 private:
  Config cfg_;
  int t_ = 0;
  std::map<std::string, Tensor<T>> moment1_, moment2_;
};

}  // namespace vscd
