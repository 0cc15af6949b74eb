#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "vscd/fusion.hpp"
#include "vscd/model.hpp"

using namespace vscd;

namespace {

Tensor<double> dist_cell(const std::vector<double>& probs) {
  Tensor<double> p({static_cast<int>(probs.size()), 1, 1});
  for (size_t i = 0; i < probs.size(); ++i) p[static_cast<int64_t>(i)] = probs[i];
  return p;
}

Tensor<double> random_dist(int k2, int h, int w, Rng& rng) {
  Tensor<double> p({k2, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double z = 0;
      for (int i = 0; i < k2; ++i) z += (p.at(i, y, x) = -std::log(1.0 - rng.uniform()));
      for (int i = 0; i < k2; ++i) p.at(i, y, x) /= z;
    }
  return p;
}

ModelConfig tiny_model_config() {
  ModelConfig cfg;
  cfg.frame_h = cfg.frame_w = 32;
  cfg.encoder.patch_size = 8;
  cfg.encoder.token_dim = 16;
  cfg.encoder.at_heads = 4;
  cfg.encoder.vit_heads = 4;
  cfg.encoder.vit_blocks = 1;
  cfg.corr.window_k = 3;
  cfg.corr.reduced_channels = 6;
  cfg.corr.change_channels = 8;
  cfg.l_max = 3;
  cfg.min_seg_len = 1;
  cfg.top_k = 2;
  cfg.candidate_cap = 3;
  return cfg;
}

}  // namespace

TEST_CASE("patch confidence: one-hot and uniform extremes") {
  Tape<double> tape;
  std::vector<double> onehot(9, 0.0);
  onehot[2] = 1.0;
  auto c1 = patch_confidence(tape, tape.constant(dist_cell(onehot)), 3, 0.5, 0.5);
  CHECK(tape.val(c1).at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));  // c_p + c

  std::vector<double> uniform(9, 1.0 / 9);
  auto cu = patch_confidence(tape, tape.constant(dist_cell(uniform)), 3, 0.5, 0.5);
  CHECK(tape.val(cu).at(0, 0) == doctest::Approx(0.5 / 9).epsilon(1e-12));  // c_p / 9

  // weights are arbitrary non-negative scalars
  auto c2 = patch_confidence(tape, tape.constant(dist_cell(onehot)), 3, 2.0, 0.25);
  CHECK(tape.val(c2).at(0, 0) == doctest::Approx(2.25).epsilon(1e-12));
  CHECK_THROWS_AS(patch_confidence(tape, c2, 3, -0.1, 0.5), ConfigError);
}

TEST_CASE("patch confidence: closed-form two-mass distribution") {
  Tape<double> tape;
  std::vector<double> two(9, 0.0);
  two[0] = two[1] = 0.5;
  auto c = patch_confidence(tape, tape.constant(dist_cell(two)), 3, 0.5, 0.5);
  double e = std::log(2.0) / std::log(9.0);
  CHECK(tape.val(c).at(0, 0) == doctest::Approx(0.5 * 0.5 + 0.5 * (1 - e)).epsilon(1e-12));
}

TEST_CASE("patch confidence bounds hold on random distributions, extremes only at one-hot") {
  Rng rng(7);
  const double c_p = 0.5, cw = 0.5;
  for (int iter = 0; iter < 200; ++iter) {
    auto p = random_dist(9, 3, 3, rng);
    Tape<double> tape;
    auto c = patch_confidence(tape, tape.constant(p), 3, c_p, cw);
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) {
        double v = tape.val(c).at(y, x);
        CHECK(v >= 0.0);
        CHECK(v <= c_p + cw + 1e-12);
        CHECK(v < c_p + cw - 1e-9);  // random cells are never exactly one-hot
      }
  }
  // k=1 degenerate window: entropy defined as 0, confidence = c_p + c
  Tape<double> tape;
  auto c = patch_confidence(tape, tape.constant(dist_cell({1.0})), 1, 0.5, 0.5);
  CHECK(tape.val(c).at(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("fusion: single candidate reproduces the feature up to epsilon") {
  Rng rng(11);
  Tensor<double> f({4, 3, 3});
  for (auto& v : f.data) v = rng.normal();
  Tensor<double> w({3, 3});
  w.fill(1.0);
  Tape<double> tape;
  auto fused = fuse_features(tape, {tape.constant(f)}, {tape.constant(w)}, 1e-8);
  for (int64_t i = 0; i < f.numel(); ++i)
    CHECK(tape.val(fused)[i] == doctest::Approx(f[i]).epsilon(1e-6));
}

TEST_CASE("fusion: equal weights give the arithmetic mean; 3:1 weights match the oracle") {
  Rng rng(13);
  Tensor<double> f1({2, 2, 2}), f2({2, 2, 2});
  for (auto& v : f1.data) v = rng.normal();
  for (auto& v : f2.data) v = rng.normal();
  Tensor<double> w1({2, 2}), w2({2, 2});
  w1.fill(1.0);
  w2.fill(1.0);
  Tape<double> tape;
  auto mean = fuse_features(tape, {tape.constant(f1), tape.constant(f2)},
                            {tape.constant(w1), tape.constant(w2)}, 1e-8);
  for (int64_t i = 0; i < f1.numel(); ++i)
    CHECK(tape.val(mean)[i] == doctest::Approx(0.5 * (f1[i] + f2[i])).epsilon(1e-6));

  Tensor<double> w3({2, 2}), w4({2, 2});
  w3.fill(3.0);
  w4.fill(1.0);
  const double eps = 1e-8;
  auto weighted = fuse_features(tape, {tape.constant(f1), tape.constant(f2)},
                                {tape.constant(w3), tape.constant(w4)}, eps);
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x)
        CHECK(tape.val(weighted).at(c, y, x) ==
              doctest::Approx((3 * f1.at(c, y, x) + f2.at(c, y, x)) / (4 + eps)).epsilon(1e-12));

  CHECK_THROWS_AS(fuse_features(tape, {}, {}, 1e-8), InputError);
}

TEST_CASE("fusion convexity: fused magnitude never exceeds the largest contributor") {
  Rng rng(17);
  for (int iter = 0; iter < 100; ++iter) {
    int n = rng.uniform_int(1, 5);
    Tape<double> tape;
    std::vector<Tape<double>::Var> feats, weights;
    double max_abs = 0;
    std::vector<Tensor<double>> raw;
    for (int i = 0; i < n; ++i) {
      Tensor<double> f({1, 2, 2});
      for (auto& v : f.data) {
        v = rng.normal();
        max_abs = std::max(max_abs, std::fabs(v));
      }
      raw.push_back(f);
      Tensor<double> w({2, 2});
      for (auto& v : w.data) v = rng.uniform();
      feats.push_back(tape.constant(f));
      weights.push_back(tape.constant(w));
    }
    auto fused = fuse_features(tape, feats, weights, 1e-8);
    for (double v : tape.val(fused).data) CHECK(std::fabs(v) <= max_abs + 1e-9);
  }
}

TEST_CASE("decoder: stage arithmetic and injection points match the resolution chain") {
  CHECK(decoder_num_stages(16, 128) == 3);
  CHECK(decoder_num_stages(4, 32) == 3);
  CHECK_THROWS_AS(decoder_num_stages(5, 128), ConfigError);
  CHECK_THROWS_AS(decoder_num_stages(16, 96), ConfigError);
  // 16 -> 32 -> 64 -> 128: inject at the 64 and 128 stages
  CHECK_FALSE(decoder_injects_at(0, 3));
  CHECK(decoder_injects_at(1, 3));
  CHECK(decoder_injects_at(2, 3));
  // paper-scale chain 64 -> ... -> 1024: inject at 256 (index 1) and 1024
  CHECK(decoder_injects_at(1, 4));
  CHECK(decoder_injects_at(3, 4));
  CHECK_FALSE(decoder_injects_at(0, 4));
  CHECK_FALSE(decoder_injects_at(2, 4));
}

TEST_CASE("decoder: zeroed stack emits exactly the output bias; output shape is [1,H,W]") {
  DecoderConfig dcfg;
  dcfg.stage_channels = {8, 8, 8};
  ParamStore<double> params;
  Rng rng(19);
  init_decoder_params(params, dcfg, 6, rng);
  for (auto& [name, t] : params.all()) t.fill(0.0);
  params.get("decoder.out.b")[0] = 0.37;

  Tensor<double> fused({6, 4, 4});
  Tensor<double> rgb({3, 32, 32});
  for (auto& v : rgb.data) v = rng.uniform();
  Tape<double> tape;
  TapeParams<double> P(tape, params, nullptr);
  auto logits = decode_mask_logits(tape, P, dcfg, tape.constant(fused), rgb);
  CHECK(tape.val(logits).shape == std::vector<int>{1, 32, 32});
  for (double v : tape.val(logits).data) CHECK(v == doctest::Approx(0.37));
}

TEST_CASE("decoder output is deterministic across runs") {
  DecoderConfig dcfg;
  dcfg.stage_channels = {8, 8};
  ParamStore<double> params;
  Rng rng(23);
  init_decoder_params(params, dcfg, 4, rng);
  Tensor<double> fused({4, 4, 4});
  for (auto& v : fused.data) v = rng.normal();
  Tensor<double> rgb({3, 16, 16});
  for (auto& v : rgb.data) v = rng.uniform();
  auto run = [&] {
    Tape<double> tape;
    TapeParams<double> P(tape, params, nullptr);
    return tape.val(decode_mask_logits(tape, P, dcfg, tape.constant(fused), rgb));
  };
  auto a = run(), b = run();
  CHECK(a.data == b.data);
}

TEST_CASE("predict_mask: strict threshold semantics") {
  Tensor<double> z({1, 2, 2});
  z.at(0, 0, 0) = 0.0;    // sigmoid = 0.5, NOT > 0.5
  z.at(0, 0, 1) = 10.0;   // -> 1
  z.at(0, 1, 0) = -10.0;  // -> 0
  z.at(0, 1, 1) = 1e-9;   // barely above
  auto m = predict_mask(z, 0.5);
  CHECK(m.at(0, 0) == 0);
  CHECK(m.at(0, 1) == 1);
  CHECK(m.at(1, 0) == 0);
  CHECK(m.at(1, 1) == 1);
  CHECK_THROWS_AS(predict_mask(z, 0.0), ConfigError);
  CHECK_THROWS_AS(predict_mask(z, 1.0), ConfigError);
}

TEST_CASE("predict_mask matches a per-pixel scalar oracle and is monotone in tau") {
  Rng rng(29);
  Tensor<double> z({1, 6, 6});
  for (auto& v : z.data) v = rng.normal(0, 3);
  auto sigmoid = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  for (double tau : {0.2, 0.5, 0.8}) {
    auto m = predict_mask(z, tau);
    for (int64_t i = 0; i < z.numel(); ++i)
      CHECK(static_cast<int>(m[i]) == (sigmoid(z[i]) > tau ? 1 : 0));
  }
  auto m_lo = predict_mask(z, 0.3);
  auto m_hi = predict_mask(z, 0.7);
  for (int64_t i = 0; i < z.numel(); ++i)
    if (m_hi[i]) CHECK(m_lo[i]);  // raising tau never adds pixels
}

TEST_CASE("full pipeline: forward shapes, candidate invariants, ablation toggles") {
  ModelConfig cfg = tiny_model_config();
  VscdNet<double> net(cfg);
  Rng rng(31);
  std::vector<Tensor<double>> q_frames, r_frames;
  for (int i = 0; i < 3; ++i) {
    Tensor<double> f({3, 32, 32});
    for (auto& v : f.data) v = rng.uniform();
    q_frames.push_back(f);
    Tensor<double> g({3, 32, 32});
    for (auto& v : g.data) v = rng.uniform();
    r_frames.push_back(g);
  }
  Tape<double> tape;
  TapeParams<double> P(tape, net.params(), nullptr);
  auto res = net.forward(tape, P, q_frames, r_frames);
  REQUIRE(res.mask_logits.size() == 3);
  for (auto v : res.mask_logits) CHECK(tape.val(v).shape == std::vector<int>{1, 32, 32});
  REQUIRE(res.candidates.size() == 3);
  for (const auto& cs : res.candidates) {
    CHECK(!cs.refs.empty());
    CHECK(static_cast<int>(cs.refs.size()) <= cfg.candidate_cap);
  }
  // A == S at init (zero-initialized refinement head)
  for (int64_t i = 0; i < tape.val(res.similarity).numel(); ++i)
    CHECK(tape.val(res.logits_grid)[i] == tape.val(res.similarity)[i]);

  // with C_f and C_sp disabled, fusion weights are all ones; still well-formed
  ModelConfig ab = cfg;
  ab.fusion.use_frame_confidence = false;
  ab.fusion.use_patch_confidence = false;
  ab.encoder.at_enabled = false;
  VscdNet<double> net2(ab);
  Tape<double> tape2;
  TapeParams<double> P2(tape2, net2.params(), nullptr);
  auto res2 = net2.forward(tape2, P2, q_frames, r_frames);
  CHECK(tape2.val(res2.mask_logits[0]).all_finite());
}

TEST_CASE("full-pipeline gradients through all stages match finite differences") {
  ModelConfig cfg = tiny_model_config();
  cfg.encoder.frozen = false;
  VscdNet<double> net(cfg);
  Rng rng(37);
  std::vector<Tensor<double>> q_frames(2), r_frames(2);
  for (auto& f : q_frames) {
    f = Tensor<double>({3, 32, 32});
    for (auto& v : f.data) v = rng.uniform();
  }
  for (auto& f : r_frames) {
    f = Tensor<double>({3, 32, 32});
    for (auto& v : f.data) v = rng.uniform();
  }
  std::vector<Tensor<double>> masks(2, Tensor<double>({1, 32, 32}));
  for (auto& m : masks)
    for (auto& v : m.data) v = rng.uniform() < 0.3 ? 1.0 : 0.0;

  // wake up the zero-initialized tails so their upstream gradients are live
  Rng wake(41);
  init_normal(net.params().get("align.refine.w1"), wake, 0.05);
  init_normal(net.params().get("decoder.out.w"), wake, 0.3);
  init_normal(net.params().get("encoder.at.layer0.wo"), wake, 0.2);

  auto forward = [&](std::map<std::string, Tensor<double>>* grads) {
    Tape<double> tape;
    TapeParams<double> P(tape, net.params(), nullptr);
    auto res = net.forward(tape, P, q_frames, r_frames);
    std::vector<Tape<double>::Var> losses;
    for (size_t t = 0; t < res.mask_logits.size(); ++t) {
      losses.push_back(tape.bce_with_logits_mean(res.mask_logits[t], masks[t]));
      losses.push_back(tape.dice_loss(res.mask_logits[t], masks[t], 1.0));
    }
    auto loss = tape.scale(tape.add_many(losses), 0.5 / static_cast<double>(masks.size()));
    double v = tape.scalar(loss);
    if (grads) {
      tape.backward(loss);
      *grads = P.grads();
    }
    return v;
  };

  std::map<std::string, Tensor<double>> grads;
  forward(&grads);

  // probe a handful of entries in every parameter group
  Rng probe_rng(43);
  std::vector<std::pair<std::string, Tensor<double>*>> storage;
  std::vector<std::pair<std::string, const Tensor<double>*>> analytic;
  for (auto& [name, t] : net.params().all()) {
    storage.emplace_back(name, &t);
    analytic.emplace_back(name, &grads.at(name));
  }
  double max_err = 0;
  std::string worst;
  for (size_t i = 0; i < storage.size(); ++i) {
    std::vector<int64_t> idx;
    for (int j = 0; j < 3; ++j)
      idx.push_back(probe_rng.next_u64() % static_cast<uint64_t>(storage[i].second->numel()));
    auto res = vscd::testing::finite_diff_check([&] { return forward(nullptr); },
                                                {storage[i]}, {analytic[i]}, 1e-5, idx);
    if (res.max_rel_err > max_err) {
      max_err = res.max_rel_err;
      worst = res.worst_name;
    }
  }
  INFO("worst group entry: " << worst);
  CHECK(max_err < 1e-3);
}
