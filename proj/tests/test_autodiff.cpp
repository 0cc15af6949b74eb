#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "vscd/autodiff.hpp"
#include "vscd/nn.hpp"
#include "vscd/rng.hpp"

using namespace vscd;
using vscd::testing::finite_diff_check;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = rng.normal(0.0, scale);
  return t;
}

// Runs forward twice: once through the tape for analytic grads, then as a
// value-only closure for finite differences.
template <typename BuildFn>
void check_op(const char* name, std::vector<Tensor<double>> inputs, BuildFn build,
              double tol = 1e-6) {
  std::vector<Tensor<double>*> ptrs;
  for (auto& t : inputs) ptrs.push_back(&t);

  auto run = [&](bool want_grads, std::vector<Tensor<double>>* grads_out) {
    Tape<double> tape;
    std::vector<Tape<double>::Var> vars;
    for (auto* p : ptrs) vars.push_back(tape.leaf(*p, true));
    auto loss = build(tape, vars);
    double value = tape.scalar(loss);
    if (want_grads) {
      tape.backward(loss);
      for (auto v : vars) grads_out->push_back(tape.grad(v));
    }
    return value;
  };

  std::vector<Tensor<double>> grads;
  run(true, &grads);

  std::vector<std::pair<std::string, Tensor<double>*>> storage;
  std::vector<std::pair<std::string, const Tensor<double>*>> analytic;
  for (size_t i = 0; i < inputs.size(); ++i) {
    storage.emplace_back(std::string(name) + "#" + std::to_string(i), ptrs[i]);
    analytic.emplace_back(storage.back().first, &grads[i]);
  }
  auto res = finite_diff_check([&] { return run(false, nullptr); }, storage, analytic);
  INFO(name << " worst entry " << res.worst_name << " analytic=" << res.worst_analytic
            << " numeric=" << res.worst_numeric);
  CHECK(res.max_rel_err < tol);
}

}  // namespace

TEST_CASE("elementwise and reduction gradients match finite differences") {
  Rng rng(7);
  check_op("add_mul_mean", {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
           [](Tape<double>& t, auto& v) { return t.mean(t.mul(t.add(v[0], v[1]), v[1])); });
  check_op("sub_scale_sum", {random_tensor({5}, rng), random_tensor({5}, rng)},
           [](Tape<double>& t, auto& v) { return t.sum(t.scale(t.sub(v[0], v[1]), 2.5)); });
  check_op("gelu", {random_tensor({4, 3}, rng)},
           [](Tape<double>& t, auto& v) { return t.sum(t.gelu(v[0])); });
  check_op("sigmoid", {random_tensor({6}, rng)},
           [](Tape<double>& t, auto& v) { return t.sum(t.sigmoid(v[0])); });
}

TEST_CASE("linear / matmul / transpose gradients") {
  Rng rng(11);
  check_op("linear",
           {random_tensor({3, 5}, rng), random_tensor({4, 5}, rng), random_tensor({4}, rng)},
           [](Tape<double>& t, auto& v) {
             return t.mean(t.gelu(t.linear(v[0], v[1], v[2])));
           });
  check_op("matmul_t", {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
           [](Tape<double>& t, auto& v) {
             return t.sum(t.matmul(v[0], t.transpose(v[1])));
           });
  check_op("slice_concat", {random_tensor({3, 6}, rng)},
           [](Tape<double>& t, auto& v) {
             auto a = t.slice_cols(v[0], 0, 2);
             auto b = t.slice_cols(v[0], 2, 6);
             return t.mean(t.mul(t.concat_cols({b, a}), t.concat_cols({b, a})));
           });
}

TEST_CASE("softmax and layer norm gradients") {
  Rng rng(13);
  check_op("softmax_t", {random_tensor({4, 6}, rng)},
           [](Tape<double>& t, auto& v) {
             auto p = t.softmax_rows(v[0], 0.5);
             return t.sum(t.mul(p, p));
           });
  check_op("layer_norm",
           {random_tensor({3, 8}, rng), random_tensor({8}, rng), random_tensor({8}, rng)},
           [](Tape<double>& t, auto& v) {
             return t.mean(t.gelu(t.layer_norm(v[0], v[1], v[2])));
           },
           std::sqrt(1e-6) /* layer norm mixes 1e-5 eps with fd h */);
}

TEST_CASE("softmax rows sum to one and preserve argmax") {
  Rng rng(17);
  Tape<double> tape;
  auto x = tape.leaf(random_tensor({6, 9}, rng, 3.0), false);
  auto p = tape.softmax_rows(x, 0.5);
  for (int i = 0; i < 6; ++i) {
    double row_sum = 0.0;
    int amax_x = 0, amax_p = 0;
    for (int j = 0; j < 9; ++j) {
      row_sum += tape.val(p).at(i, j);
      if (tape.val(x).at(i, j) > tape.val(x).at(i, amax_x)) amax_x = j;
      if (tape.val(p).at(i, j) > tape.val(p).at(i, amax_p)) amax_p = j;
    }
    CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(amax_x == amax_p);
  }
}

TEST_CASE("conv2d matches a naive sliding-window oracle and its gradients") {
  Rng rng(19);
  Tensor<double> x = random_tensor({2, 5, 4}, rng);
  Tensor<double> w = random_tensor({3, 2, 3, 3}, rng);
  Tensor<double> b = random_tensor({3}, rng);

  Tape<double> tape;
  auto xv = tape.leaf(x, false);
  auto wv = tape.leaf(w, false);
  auto bv = tape.leaf(b, false);
  auto out = tape.conv2d(xv, wv, bv, 1);

  for (int co = 0; co < 3; ++co)
    for (int y = 0; y < 5; ++y)
      for (int xx = 0; xx < 4; ++xx) {
        double acc = b[co];
        for (int ci = 0; ci < 2; ++ci)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              int sy = y + ky - 1, sx = xx + kx - 1;
              if (sy < 0 || sy >= 5 || sx < 0 || sx >= 4) continue;
              acc += x.at(ci, sy, sx) * w.data[((static_cast<size_t>(co) * 2 + ci) * 3 + ky) * 3 + kx];
            }
        CHECK(tape.val(out).at(co, y, xx) == doctest::Approx(acc).epsilon(1e-9));
      }

  check_op("conv2d", {x, w, b}, [](Tape<double>& t, auto& v) {
    return t.mean(t.gelu(t.conv2d(v[0], v[1], v[2], 1)));
  });
}

TEST_CASE("spatial ops gradients") {
  Rng rng(23);
  check_op("mean_spatial", {random_tensor({3, 4, 4}, rng)},
           [](Tape<double>& t, auto& v) {
             auto m = t.mean_spatial(v[0]);
             return t.sum(t.mul(m, m));
           });
  check_op("upsample", {random_tensor({2, 3, 3}, rng)},
           [](Tape<double>& t, auto& v) {
             auto u = t.upsample_nearest2(v[0]);
             return t.mean(t.mul(u, u));
           });
  check_op("mul_div_channels",
           {random_tensor({3, 4, 4}, rng), random_tensor({4, 4}, rng),
            random_tensor({4, 4}, rng)},
           [](Tape<double>& t, auto& v) {
             auto den = t.add_const(t.mul(v[2], v[2]), 1.0);
             return t.mean(t.div_channels(t.mul_channels(v[0], v[1]), den));
           });
  check_op("mul_map_scalar", {random_tensor({4, 4}, rng), random_tensor({1}, rng)},
           [](Tape<double>& t, auto& v) { return t.sum(t.mul_map_scalar(v[0], v[1])); });
  check_op("concat_channels_gather",
           {random_tensor({2, 3, 3}, rng), random_tensor({1, 3, 3}, rng),
            random_tensor({3, 3}, rng)},
           [](Tape<double>& t, auto& v) {
             auto cat = t.concat_channels({v[0], v[1]});
             auto s = t.gather_rc(v[2], 1, 2);
             auto weighted = t.mul_channels(cat, t.mul_map_scalar(v[2], s));
             return t.mean(weighted);
           });
}

TEST_CASE("single-head attention equals an explicit softmax(qK^T/sqrt(d))V oracle") {
  // 2x2 grid of tokens, one head: compose the tape ops and compare against a
  // hand computation including gradients.
  Rng rng(29);
  int n = 4, d = 3;
  Tensor<double> q = random_tensor({1, d}, rng);
  Tensor<double> kmat = random_tensor({n, d}, rng);
  Tensor<double> vmat = random_tensor({n, d}, rng);

  Tape<double> tape;
  auto qv = tape.leaf(q, false);
  auto kv = tape.leaf(kmat, false);
  auto vv = tape.leaf(vmat, false);
  auto scores = tape.scale(tape.matmul(qv, tape.transpose(kv)), 1.0 / std::sqrt(double(d)));
  auto attn = tape.softmax_rows(scores, 1.0);
  auto out = tape.matmul(attn, vv);

  // oracle
  std::vector<double> s(n), p(n);
  double mx = -1e30;
  for (int i = 0; i < n; ++i) {
    s[i] = 0;
    for (int j = 0; j < d; ++j) s[i] += q.at(0, j) * kmat.at(i, j);
    s[i] /= std::sqrt(double(d));
    mx = std::max(mx, s[i]);
  }
  double z = 0;
  for (int i = 0; i < n; ++i) z += (p[i] = std::exp(s[i] - mx));
  for (int i = 0; i < n; ++i) p[i] /= z;
  for (int j = 0; j < d; ++j) {
    double acc = 0;
    for (int i = 0; i < n; ++i) acc += p[i] * vmat.at(i, j);
    CHECK(tape.val(out).at(0, j) == doctest::Approx(acc).epsilon(1e-10));
  }
}

TEST_CASE("backward skips frozen leaves") {
  Tape<double> tape;
  Tensor<double> a({2, 2});
  a.fill(2.0);
  auto frozen = tape.leaf(a, false);
  auto live = tape.leaf(a, true);
  auto loss = tape.sum(tape.mul(frozen, live));
  tape.backward(loss);
  CHECK(tape.grad(live).at(0, 0) == doctest::Approx(2.0));
  // frozen leaf's gradient stays zero
  CHECK(tape.grad(frozen).at(0, 0) == 0.0);
}

TEST_CASE("adamw decoupled decay shrinks weights with zero gradient moments") {
  ParamStore<double> params;
  auto& w = params.add("w", {2});
  w[0] = 1.0;
  w[1] = -1.0;
  AdamW<double>::Config cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  AdamW<double> opt(cfg);
  std::map<std::string, Tensor<double>> grads;
  grads.emplace("w", Tensor<double>({2}));  // zero gradient
  opt.step(params, grads, nullptr);
  CHECK(w[0] == doctest::Approx(1.0 - 0.1 * 0.5 * 1.0));
  CHECK(w[1] == doctest::Approx(-1.0 + 0.1 * 0.5 * 1.0));
}

TEST_CASE("determinism: identical seeds give identical rng streams") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c = a.fork(3), d = b.fork(3);
  for (int i = 0; i < 10; ++i) CHECK(c.normal() == d.normal());
}
