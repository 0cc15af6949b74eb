#pragma once

// Finite-difference gradient checking used across the test suites. The
// numeric side perturbs raw parameter/input storage and replays the forward
// closure, so it stays independent of the tape's backward implementation.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "vscd/tensor.hpp"

namespace vscd::testing {

struct GradCheckResult {
  double max_rel_err = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::string worst_name;
};

inline double rel_err(double analytic, double numeric) {
  double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
  return std::fabs(analytic - numeric) / denom;
}

// forward: recomputes the scalar loss from current storage contents.
// storage: tensors to perturb (each paired with its analytic gradient).
// probe: which flat entries of each tensor to check (empty = all).
// Entries where both gradients sit below atol are indistinguishable from
// central-difference noise (~eps/h) and are not scored.
inline GradCheckResult finite_diff_check(
    const std::function<double()>& forward,
    const std::vector<std::pair<std::string, Tensor<double>*>>& storage,
    const std::vector<std::pair<std::string, const Tensor<double>*>>& analytic,
    double h = 1e-5, const std::vector<int64_t>& probe = {}, double atol = 1e-8) {
  GradCheckResult res;
  for (size_t k = 0; k < storage.size(); ++k) {
    Tensor<double>* t = storage[k].second;
    const Tensor<double>* g = analytic[k].second;
    std::vector<int64_t> idx = probe;
    if (idx.empty()) {
      idx.resize(static_cast<size_t>(t->numel()));
      for (int64_t i = 0; i < t->numel(); ++i) idx[static_cast<size_t>(i)] = i;
    }
    for (int64_t i : idx) {
      if (i >= t->numel()) continue;
      double orig = (*t)[i];
      (*t)[i] = orig + h;
      double fp = forward();
      (*t)[i] = orig - h;
      double fm = forward();
      (*t)[i] = orig;
      double numeric = (fp - fm) / (2.0 * h);
      if (std::fabs((*g)[i]) < atol && std::fabs(numeric) < atol) continue;
      double e = rel_err((*g)[i], numeric);
      if (e > res.max_rel_err) {
        res.max_rel_err = e;
        res.worst_analytic = (*g)[i];
        res.worst_numeric = numeric;
        res.worst_name = storage[k].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

}  // namespace vscd::testing
