#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "vscd/alignment.hpp"

using namespace vscd;

namespace {

Tensor<double> rows_from(const std::vector<std::vector<double>>& v) {
  int n = static_cast<int>(v.size()), d = static_cast<int>(v[0].size());
  Tensor<double> t({n, d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) t.at(i, j) = v[static_cast<size_t>(i)][static_cast<size_t>(j)];
  return t;
}

// builds a P (and A) matrix whose row-wise argmax path equals `shat`
Tensor<double> matrix_with_argmax(const std::vector<int>& shat, int cols) {
  Tensor<double> p({static_cast<int>(shat.size()), cols});
  for (int t = 0; t < p.dim(0); ++t) {
    for (int s = 0; s < cols; ++s) p.at(t, s) = 0.001 * s;
    p.at(t, shat[static_cast<size_t>(t)]) = 1.0;
  }
  return p;
}

ParamStore<double> default_align_params(uint64_t seed = 3) {
  ParamStore<double> params;
  Rng rng(seed);
  init_alignment_params(params, AlignmentParams{}, rng);
  return params;
}

}  // namespace

TEST_CASE("cosine grid: identical descriptor lists give a unit diagonal") {
  auto d = rows_from({{1, 2, 3}, {-1, 0.5, 2}, {4, 4, 4}});
  Tape<double> tape;
  auto s = similarity_grid(tape, tape.constant(d), tape.constant(d));
  for (int i = 0; i < 3; ++i) CHECK(tape.val(s).at(i, i) == doctest::Approx(1.0).epsilon(1e-12));
  for (int64_t i = 0; i < 9; ++i) {
    CHECK(tape.val(s)[i] <= 1.0 + 1e-12);
    CHECK(tape.val(s)[i] >= -1.0 - 1e-12);
  }
}

TEST_CASE("cosine grid: orthogonal vectors score zero; zero norm is rejected") {
  Tape<double> tape;
  auto q = tape.constant(rows_from({{1, 0}}));
  auto r = tape.constant(rows_from({{0, 1}}));
  auto s = similarity_grid(tape, q, r);
  CHECK(tape.val(s).at(0, 0) == doctest::Approx(0.0));
  auto z = tape.constant(rows_from({{0, 0}}));
  CHECK_THROWS_AS(similarity_grid(tape, q, z), InputError);
}

TEST_CASE("cosine grid matches a dot/norm oracle entrywise") {
  Rng rng(5);
  Tensor<double> q({3, 6}), r({3, 6});
  for (auto& v : q.data) v = rng.normal();
  for (auto& v : r.data) v = rng.normal();
  Tape<double> tape;
  auto s = similarity_grid(tape, tape.constant(q), tape.constant(r));
  for (int t = 0; t < 3; ++t)
    for (int ss = 0; ss < 3; ++ss) {
      double dot = 0, nq = 0, nr = 0;
      for (int j = 0; j < 6; ++j) {
        dot += q.at(t, j) * r.at(ss, j);
        nq += q.at(t, j) * q.at(t, j);
        nr += r.at(ss, j) * r.at(ss, j);
      }
      CHECK(tape.val(s).at(t, ss) ==
            doctest::Approx(dot / std::sqrt(nq * nr)).epsilon(1e-6));
    }
}

TEST_CASE("refinement head is the identity at init: A == S exactly") {
  auto params = default_align_params();
  Rng rng(7);
  Tensor<double> s({6, 6});
  for (auto& v : s.data) v = rng.uniform(-1, 1);
  Tape<double> tape;
  TapeParams<double> P(tape, params, nullptr);
  auto sv = tape.constant(s);
  auto a = refine_alignment(tape, P, sv);
  for (int64_t i = 0; i < s.numel(); ++i) CHECK(tape.val(a)[i] == s[i]);
}

TEST_CASE("refinement of a constant grid is constant away from the padding border") {
  auto params = default_align_params();
  Rng rng(11);
  init_normal(params.get("align.refine.w1"), rng, 0.3);
  init_normal(params.get("align.refine.b1"), rng, 0.3);
  Tensor<double> s({8, 8});
  s.fill(0.42);
  Tape<double> tape;
  TapeParams<double> P(tape, params, nullptr);
  auto a = refine_alignment(tape, P, tape.constant(s));
  // two 3x3 layers -> entries at least 2 cells from the border are uniform
  double ref = tape.val(a).at(2, 2);
  for (int y = 2; y <= 5; ++y)
    for (int x = 2; x <= 5; ++x) CHECK(tape.val(a).at(y, x) == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("refinement matches a naive convolution oracle") {
  auto params = default_align_params(13);
  Rng rng(17);
  init_normal(params.get("align.refine.w1"), rng, 0.4);
  init_normal(params.get("align.refine.b1"), rng, 0.2);
  Tensor<double> s({5, 5});
  for (auto& v : s.data) v = rng.uniform(-1, 1);

  Tape<double> tape;
  TapeParams<double> P(tape, params, nullptr);
  auto a = refine_alignment(tape, P, tape.constant(s));

  const auto& w0 = params.get("align.refine.w0");
  const auto& b0 = params.get("align.refine.b0");
  const auto& w1 = params.get("align.refine.w1");
  const auto& b1 = params.get("align.refine.b1");
  auto gelu = [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); };
  const int ch = w0.dim(0);
  std::vector<Tensor<double>> mid(static_cast<size_t>(ch), Tensor<double>({5, 5}));
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x) {
        double acc = b0[c];
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            int sy = y + ky - 1, sx = x + kx - 1;
            if (sy < 0 || sy >= 5 || sx < 0 || sx >= 5) continue;
            acc += s.at(sy, sx) * w0.data[((static_cast<size_t>(c)) * 9 + ky * 3 + kx)];
          }
        mid[static_cast<size_t>(c)].at(y, x) = gelu(acc);
      }
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) {
      double acc = b1[0];
      for (int c = 0; c < ch; ++c)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            int sy = y + ky - 1, sx = x + kx - 1;
            if (sy < 0 || sy >= 5 || sx < 0 || sx >= 5) continue;
            acc += mid[static_cast<size_t>(c)].at(sy, sx) *
                   w1.data[(static_cast<size_t>(c) * 9 + ky * 3 + kx)];
          }
      CHECK(tape.val(a).at(y, x) == doctest::Approx(s.at(y, x) + acc).epsilon(1e-9));
    }
}

TEST_CASE("soft matching: closed-form rows") {
  Tape<double> tape;
  Tensor<double> a({2, 4});
  // row 0 all equal; row 1 unused
  for (int j = 0; j < 4; ++j) a.at(0, j) = 0.7;
  auto p = soft_matching(tape, tape.constant(a), 0.5);
  for (int j = 0; j < 4; ++j) CHECK(tape.val(p).at(0, j) == doctest::Approx(0.25).epsilon(1e-12));

  Tensor<double> two({1, 2});
  two.at(0, 0) = 1.0;
  two.at(0, 1) = 0.0;
  Tape<double> tape2;
  auto p2 = soft_matching(tape2, tape2.constant(two), 0.5);
  double e2 = std::exp(2.0);
  CHECK(tape2.val(p2).at(0, 0) == doctest::Approx(e2 / (e2 + 1)).epsilon(1e-9));
  CHECK(tape2.val(p2).at(0, 1) == doctest::Approx(1.0 / (e2 + 1)).epsilon(1e-9));

  CHECK_THROWS_AS(soft_matching(tape2, p2, -1.0), ConfigError);
}

TEST_CASE("soft matching rows are stochastic and argmax-preserving for any temperature") {
  Rng rng(19);
  Tensor<double> a({7, 9});
  for (auto& v : a.data) v = rng.normal(0, 2);
  for (double tau : {0.1, 0.5, 1.0, 3.0}) {
    Tape<double> tape;
    auto p = soft_matching(tape, tape.constant(a), tau);
    for (int t = 0; t < 7; ++t) {
      double sum = 0;
      for (int j = 0; j < 9; ++j) sum += tape.val(p).at(t, j);
      CHECK(std::fabs(sum - 1.0) < 1e-6);
      CHECK(argmax_row(tape.val(p), t) == argmax_row(a, t));
      for (int j = 0; j < 9; ++j) {
        CHECK(tape.val(p).at(t, j) > 0.0);
        CHECK(tape.val(p).at(t, j) < 1.0);
      }
    }
  }
}

TEST_CASE("segment proposals: near-diagonal grouping hand trace") {
  auto p = matrix_with_argmax({3, 4, 5, 9, 10}, 16);
  auto segs = segment_proposals(p, p, 0, 2, 5, 0.0);
  REQUIRE(segs.size() == 2);
  CHECK(segs[0].t0 == 0);
  CHECK(segs[0].t1 == 2);
  CHECK(segs[0].matched_refs == std::vector<int>{3, 4, 5});
  CHECK(segs[1].t0 == 3);
  CHECK(segs[1].t1 == 4);
  CHECK_FALSE(segs[0].singleton_fill);
}

TEST_CASE("segment proposals: L_max chops a diagonal run left-to-right") {
  std::vector<int> shat(8);
  for (int t = 0; t < 8; ++t) shat[static_cast<size_t>(t)] = t;
  auto p = matrix_with_argmax(shat, 8);
  auto segs = segment_proposals(p, p, 0, 2, 5, 0.0);
  REQUIRE(segs.size() == 2);
  CHECK(segs[0].t0 == 0);
  CHECK(segs[0].t1 == 4);
  CHECK(segs[1].t0 == 5);
  CHECK(segs[1].t1 == 7);
}

TEST_CASE("segment proposals: far jumps collapse to singleton fills covering every t") {
  std::vector<int> shat = {0, 7, 0, 7, 0, 7, 0, 7};
  auto p = matrix_with_argmax(shat, 8);
  auto segs = segment_proposals(p, p, 0, 2, 5, 0.0);
  REQUIRE(segs.size() == 8);
  for (int t = 0; t < 8; ++t) {
    CHECK(segs[static_cast<size_t>(t)].t0 == t);
    CHECK(segs[static_cast<size_t>(t)].t1 == t);
    CHECK(segs[static_cast<size_t>(t)].singleton_fill);
  }
}

TEST_CASE("segment proposals cover every query index exactly once on fuzzed paths") {
  Rng rng(23);
  for (int iter = 0; iter < 500; ++iter) {
    int tk = rng.uniform_int(1, 12);
    int cols = rng.uniform_int(1, 14);
    std::vector<int> shat(static_cast<size_t>(tk));
    for (auto& s : shat) s = rng.uniform_int(0, cols - 1);
    auto p = matrix_with_argmax(shat, cols);
    int delta = rng.uniform_int(0, 3);
    int lmax = rng.uniform_int(1, 6);
    int minlen = rng.uniform_int(1, lmax);
    double sq = (iter % 3 == 0) ? 0.3 : 0.0;
    auto segs = segment_proposals(p, p, delta, minlen, lmax, sq);
    std::vector<int> cover(static_cast<size_t>(tk), 0);
    for (const auto& seg : segs) {
      CHECK(seg.t0 <= seg.t1);
      if (!seg.singleton_fill) {
        CHECK(seg.length() >= minlen);
        CHECK(seg.length() <= lmax);
      }
      for (int t = seg.t0; t <= seg.t1; ++t) cover[static_cast<size_t>(t)]++;
    }
    for (int t = 0; t < tk; ++t) CHECK(cover[static_cast<size_t>(t)] == 1);
  }
}

TEST_CASE("candidate set: anchor-first ordering with top-K fills and dedup") {
  // R(t) = {7}; global top-4 = {2,7,5,1}
  Tensor<double> p({1, 16});
  p.fill(0.001);
  p.at(0, 7) = 0.30;
  p.at(0, 2) = 0.25;
  p.at(0, 5) = 0.20;
  p.at(0, 1) = 0.15;
  SegmentProposal seg;
  seg.t0 = seg.t1 = 0;
  seg.matched_refs = {7};
  seg.singleton_fill = true;
  auto cs = candidate_set(0, {seg}, p, 4, 6);
  CHECK(cs.anchor == 7);
  CHECK(cs.refs == std::vector<int>{7, 2, 5, 1});
  REQUIRE(cs.confidences.size() == 4);
  CHECK(cs.confidences[0] == doctest::Approx(0.30));
  CHECK(cs.confidences[1] == doctest::Approx(0.25));
}

TEST_CASE("candidate set: anchor equal to global top-1 gives the global top-cap list") {
  Tensor<double> p({1, 8});
  for (int s = 0; s < 8; ++s) p.at(0, s) = 0.01 * (8 - s);
  p.at(0, 3) = 0.5;  // global top-1
  SegmentProposal seg;
  seg.t0 = seg.t1 = 0;
  seg.matched_refs = {3, 4};
  auto cs = candidate_set(0, {seg}, p, 5, 4);
  CHECK(cs.anchor == 3);
  REQUIRE(cs.refs.size() == 4);
  CHECK(cs.refs == std::vector<int>{3, 0, 1, 2});
}

TEST_CASE("candidate set: uniform row breaks ties toward the smallest index") {
  Tensor<double> p({1, 6});
  p.fill(1.0 / 6);
  SegmentProposal seg;
  seg.t0 = seg.t1 = 0;
  seg.matched_refs = {4, 2};
  auto cs = candidate_set(0, {seg}, p, 2, 6);
  CHECK(cs.anchor == 2);           // smallest among R(t) maxima
  CHECK(cs.refs[1] == 0);          // global fills also tie-break by index
  CHECK(cs.refs[2] == 1);
}

TEST_CASE("candidate sets satisfy anchor/dedup/cap invariants on fuzzed inputs") {
  Rng rng(31);
  for (int iter = 0; iter < 300; ++iter) {
    int tk = rng.uniform_int(2, 10);
    Tensor<double> logits({tk, tk});
    for (auto& v : logits.data) v = rng.normal();
    Tape<double> tape;
    auto p = soft_matching(tape, tape.constant(logits), 0.5);
    auto segs = segment_proposals(tape.val(p), logits, 1, 2, 4, 0.0);
    int cap = rng.uniform_int(1, 6);
    int k = rng.uniform_int(0, 6);
    for (int t = 0; t < tk; ++t) {
      auto cs = candidate_set(t, segs, tape.val(p), k, cap);
      CHECK(!cs.refs.empty());
      CHECK(static_cast<int>(cs.refs.size()) <= cap);
      std::set<int> uniq(cs.refs.begin(), cs.refs.end());
      CHECK(uniq.size() == cs.refs.size());
      CHECK(cs.refs[0] == cs.anchor);
      // anchor belongs to the covering segment's reference range
      const SegmentProposal* cover = nullptr;
      for (const auto& s : segs)
        if (s.t0 <= t && t <= s.t1) cover = &s;
      REQUIRE(cover != nullptr);
      CHECK(std::find(cover->matched_refs.begin(), cover->matched_refs.end(), cs.anchor) !=
            cover->matched_refs.end());
      for (size_t i = 0; i < cs.refs.size(); ++i)
        CHECK(cs.confidences[i] ==
              doctest::Approx(tape.val(p).at(t, cs.refs[i])).epsilon(1e-12));
      // ordering: fills descend in confidence after the anchor
      for (size_t i = 2; i < cs.refs.size(); ++i)
        CHECK(cs.confidences[i] <= cs.confidences[i - 1] + 1e-12);
    }
  }
}

TEST_CASE("alignment debug dump round-trips through the float-plane format") {
  Rng rng(37);
  Tensor<double> s({4, 4}), a({4, 4}), p({4, 4});
  for (auto& v : s.data) v = rng.uniform(-1, 1);
  for (auto& v : a.data) v = rng.normal();
  for (auto& v : p.data) v = rng.uniform();
  auto path = std::filesystem::temp_directory_path() / "vscd_align_dump.bin";
  dump_alignment(path.string(), s, a, p);
  int size = 0;
  auto planes = read_float_planes(path.string(), &size);
  CHECK(size == 4);
  REQUIRE(planes.size() == 3);
  for (int64_t i = 0; i < 16; ++i) {
    CHECK(planes[0][static_cast<size_t>(i)] == doctest::Approx(static_cast<float>(s[i])));
    CHECK(planes[2][static_cast<size_t>(i)] == doctest::Approx(static_cast<float>(p[i])));
  }
  std::filesystem::remove(path);
}
