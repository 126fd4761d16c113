// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#include <cstring>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "skv1/attention.hpp"
#include "skv1/ops.hpp"
#include "skv1/rng.hpp"

using namespace skv1;
namespace O = skv1::oracle;

namespace {

AttnWeights random_weights(Rng& rng, int d, int heads, size_t wk_rows, size_t wv_rows, double std = 0.5) {
  AttnWeights w;
  w.heads = heads;
  const size_t du = static_cast<size_t>(d);
  w.wq = rng.normal_tensor<float>({du, du}, std);
  w.wk = rng.normal_tensor<float>({wk_rows, du}, std);
  w.wv = rng.normal_tensor<float>({wv_rows, du}, std);
  w.wo = rng.normal_tensor<float>({du, du}, std);
  return w;
}

bool bit_equal(const Tensor32& a, const Tensor32& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

// Per-head projections for the oracle.
struct Heads {
  std::vector<O::Mat> q, k, v;
};

AttnWeights with_zero_values(AttnWeights w) {
  w.wv = Tensor32::matrix(w.wq.rows(), w.wq.cols());
  return w;
}

Heads mha_heads(const AttnWeights& w, const Tensor32& x) {
  const auto X = O::to_mat(x);
  return {O::split_heads(O::mul(O::to_mat(w.wq), X), w.heads), O::split_heads(O::mul(O::to_mat(w.wk), X), w.heads),
          O::split_heads(O::mul(O::to_mat(w.wv), X), w.heads)};
}

O::Mat oracle_y(const Tensor32& x, const Heads& h, const AttnWeights& w) {
  return O::add(O::to_mat(x), O::attention_sum(h.q, h.k, h.v, O::to_mat(w.wo)));
}

}  // namespace

TEST_CASE("mha: single token mixes values only") {
  Rng rng(1);
  const auto w = random_weights(rng, 4, 2, 4, 4);
  const auto x = rng.normal_tensor<float>({4, 1});
  const auto y = attn_mha(x, w).y;
  const auto expect = add(x, matmul(w.wo, matmul(w.wv, x)));
  CHECK(max_abs_diff(y, expect) < 1e-6f);
}

TEST_CASE("mha: zero weights pass the residual through") {
  AttnWeights w;
  w.heads = 2;
  w.wq = w.wk = w.wv = w.wo = Tensor32::matrix(4, 4);
  Rng rng(2);
  const auto x = rng.normal_tensor<float>({4, 3});
  CHECK(attn_mha(x, w).y == x);
}

TEST_CASE("mha: matches the straight-line oracle") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(10 + seed);
    const auto w = random_weights(rng, 4, 2, 4, 4);
    const auto x = rng.normal_tensor<float>({4, 3});
    CHECK(O::max_diff(oracle_y(x, mha_heads(w, x), w), attn_mha(x, w).y) < 1e-5);
  }
}

TEST_CASE("mha: missing value heads are a configuration error") {
  Rng rng(3);
  const auto w = random_weights(rng, 4, 2, 4, 2);
  CHECK_THROWS_AS(attn_mha(rng.normal_tensor<float>({4, 3}), w), ConfigError);
}

TEST_CASE("skipv1: degenerate banks reproduce mha") {
  Rng rng(4);
  const auto full = random_weights(rng, 8, 4, 8, 8);
  const auto x = rng.normal_tensor<float>({8, 5});
  const auto mha = attn_mha(x, full);
  AttnWeights half = full;
  half.wv = slice_rows(full.wv, 0, 4);
  CHECK(bit_equal(attn_skipv1(x, mha.v_heads, half), mha.y));
  // ratio 0 keeps every head local; the bank is never read.
  CHECK(bit_equal(attn_skipv1(x, rng.normal_tensor<float>({8, 5}), full, HeadInjection::SecondHalf, 0.0), mha.y));
}

TEST_CASE("skipv1: matches explicit concatenation of local and bank values") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(20 + seed);
    const auto w = random_weights(rng, 4, 2, 4, 2);
    const auto x = rng.normal_tensor<float>({4, 3});
    const auto bank = rng.normal_tensor<float>({4, 3});
    Heads h = mha_heads(with_zero_values(w), x);
    h.v = {O::mul(O::to_mat(w.wv), O::to_mat(x)), O::rows(O::to_mat(bank), 2, 2)};
    CHECK(O::max_diff(oracle_y(x, h, w), attn_skipv1(x, bank, w)) < 1e-5);
  }
}

TEST_CASE("skipv1: bank shape errors") {
  Rng rng(5);
  const auto w = random_weights(rng, 4, 2, 4, 2);
  const auto x = rng.normal_tensor<float>({4, 3});
  CHECK_THROWS_AS(attn_skipv1(x, rng.normal_tensor<float>({2, 3}), w), ConfigError);
  CHECK_THROWS_AS(attn_skipv1(x, rng.normal_tensor<float>({4, 2}), w), DimensionError);
}

TEST_CASE("resformer: endpoints and midpoint") {
  Rng rng(6);
  const auto w = random_weights(rng, 4, 2, 4, 4);
  const auto x = rng.normal_tensor<float>({4, 3});
  const auto bank = rng.normal_tensor<float>({4, 3});
  CHECK(bit_equal(attn_resformer(x, bank, w, 1.0), attn_mha(x, w).y));

  Heads h = mha_heads(w, x);
  Heads only_bank = h;
  only_bank.v = O::split_heads(O::to_mat(bank), 2);
  CHECK(O::max_diff(oracle_y(x, only_bank, w), attn_resformer(x, bank, w, 0.0)) < 1e-5);

  Heads mid = h;
  for (size_t i = 0; i < 2; ++i) mid.v[i] = O::lin(0.5, h.v[i], 0.5, only_bank.v[i]);
  CHECK(O::max_diff(oracle_y(x, mid, w), attn_resformer(x, bank, w, 0.5)) < 1e-5);
}

TEST_CASE("gqa: groups equal to heads and duplication oracle") {
  Rng rng(7);
  const auto full = random_weights(rng, 8, 4, 8, 8);
  const auto x = rng.normal_tensor<float>({8, 3});
  CHECK(bit_equal(attn_gqa(x, full, 4, false), attn_mha(x, full).y));

  AttnWeights half = full;
  half.wv = slice_rows(full.wv, 0, 4);
  const auto bank = rng.normal_tensor<float>({8, 3});
  CHECK(bit_equal(attn_gqa(x, half, 4, true, bank), attn_skipv1(x, bank, half)));

  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng r2(30 + seed);
    const auto w = random_weights(r2, 8, 4, 4, 4);
    const auto xs = r2.normal_tensor<float>({8, 3});
    const auto X = O::to_mat(xs);
    const auto K = O::split_heads(O::mul(O::to_mat(w.wk), X), 2);
    const auto V = O::split_heads(O::mul(O::to_mat(w.wv), X), 2);
    Heads h;
    h.q = O::split_heads(O::mul(O::to_mat(w.wq), X), 4);
    h.k = {K[0], K[0], K[1], K[1]};
    h.v = {V[0], V[0], V[1], V[1]};
    CHECK(O::max_diff(oracle_y(xs, h, w), attn_gqa(xs, w, 2, false)) < 1e-5);

    // Skip: the second group's value head comes from the bank.
    AttnWeights ws = w;
    ws.wv = slice_rows(w.wv, 0, 2);
    const auto bk = r2.normal_tensor<float>({4, 3});
    const auto B = O::split_heads(O::to_mat(bk), 2);
    h.v = {V[0], V[0], B[1], B[1]};
    CHECK(O::max_diff(oracle_y(xs, h, ws), attn_gqa(xs, ws, 2, true, bk)) < 1e-5);
  }
  CHECK_THROWS_AS(attn_gqa(x, full, 3, false), ConfigError);
}

TEST_CASE("mla: uncompressed limit, degenerate bank and materialization oracle") {
  Rng rng(8);
  AttnWeights w = random_weights(rng, 8, 2, 8, 8);
  w.wdkv = rng.normal_tensor<float>({8, 8}, 0.5);
  w.wuk = Tensor32::identity(8);
  w.wuv = Tensor32::identity(8);
  const auto x = rng.normal_tensor<float>({8, 4});
  AttnWeights tied = w;
  tied.wk = w.wdkv;
  tied.wv = w.wdkv;
  CHECK(max_abs_diff(attn_mla(x, w, false).y, attn_mha(x, tied).y) < 1e-5f);

  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng r2(40 + seed);
    AttnWeights m;
    m.heads = 2;
    m.wq = r2.normal_tensor<float>({8, 8}, 0.5);
    m.wo = r2.normal_tensor<float>({8, 8}, 0.5);
    m.wdkv = r2.normal_tensor<float>({4, 8}, 0.5);
    m.wuk = r2.normal_tensor<float>({8, 4}, 0.5);
    m.wuv = r2.normal_tensor<float>({8, 4}, 0.5);
    m.wkr = r2.normal_tensor<float>({2, 8}, 0.5);
    m.wqr = r2.normal_tensor<float>({4, 8}, 0.5);
    const auto xs = r2.normal_tensor<float>({8, 3});
    const auto X = O::to_mat(xs);
    const auto C = O::mul(O::to_mat(m.wdkv), X);
    const auto KC = O::split_heads(O::mul(O::to_mat(m.wuk), C), 2);
    const auto VC = O::split_heads(O::mul(O::to_mat(m.wuv), C), 2);
    const auto KR = O::rope(O::mul(O::to_mat(m.wkr), X), 2);
    const auto QR = O::split_heads(O::rope(O::mul(O::to_mat(m.wqr), X), 2), 2);
    const auto QC = O::split_heads(O::mul(O::to_mat(m.wq), X), 2);
    Heads h;
    for (size_t i = 0; i < 2; ++i) {
      h.q.push_back(O::stack(QC[i], QR[i]));
      h.k.push_back(O::stack(KC[i], KR));
      h.v.push_back(VC[i]);
    }
    const auto res = attn_mla(xs, m, false);
    CHECK(O::max_diff(oracle_y(xs, h, m), res.y) < 1e-5);

    // Own latent as bank: splicing changes nothing.
    AttnWeights half = m;
    half.wdkv = slice_rows(m.wdkv, 0, 2);
    CHECK(max_abs_diff(attn_mla(xs, half, true, res.latent).y, res.y) < 1e-6f);
  }

  AttnWeights odd = w;
  odd.wuk = Tensor32::matrix(8, 5);
  odd.wuv = Tensor32::matrix(8, 5);
  odd.wdkv = Tensor32::matrix(2, 8);
  CHECK_THROWS_AS(attn_mla(x, odd, true, Tensor32::matrix(5, 4)), ConfigError);
}

TEST_CASE("cross kv: local sources reproduce mha; length mismatch is a dimension error") {
  Rng rng(9);
  const auto w = random_weights(rng, 4, 2, 4, 4);
  const auto x = rng.normal_tensor<float>({4, 3});
  const auto k = matmul(w.wk, x), v = matmul(w.wv, x);
  CHECK(bit_equal(attn_cross_kv(x, w, k, v), attn_mha(x, w).y));
  CHECK_THROWS_AS(attn_cross_kv(x, w, slice_cols(k, 0, 2), v), DimensionError);
}

TEST_CASE("select_skip_heads") {
  auto local_of = [](const SkipPlan& p) {
    std::set<int> s;
    for (size_t i = 0; i < p.mix.size(); ++i)
      if (p.mix[i].size() == 1 && !p.mix[i][0].from_bank) s.insert(static_cast<int>(i));
    return s;
  };
  for (int layer = 2; layer <= 6; ++layer) {
    const auto p = select_skip_heads(12, 0.5, layer, HeadInjection::SecondHalf);
    CHECK(p.local == 6);
    CHECK(local_of(p) == std::set<int>{0, 1, 2, 3, 4, 5});
    for (int s = 6; s < 12; ++s) {
      REQUIRE(p.mix[s].size() == 1);
      CHECK(p.mix[s][0].from_bank);
      CHECK(p.mix[s][0].head == s);
    }
  }
  const auto all = select_skip_heads(4, 0.0, 3, HeadInjection::SecondHalf);
  CHECK(all.local == 4);
  CHECK(local_of(all).size() == 4);

  // Layer 3 of 4 heads: bank head (3 + j) mod 4 lands in slot (3 + 2 + j) mod 4.
  const auto dyn = select_skip_heads(4, 0.5, 3, HeadInjection::Dynamic);
  CHECK(dyn.mix[1][0].from_bank);
  CHECK(dyn.mix[1][0].head == 3);
  CHECK(dyn.mix[2][0].from_bank);
  CHECK(dyn.mix[2][0].head == 0);
  CHECK(!dyn.mix[0][0].from_bank);
  CHECK(dyn.mix[0][0].head == 0);
  CHECK(!dyn.mix[3][0].from_bank);
  CHECK(dyn.mix[3][0].head == 1);

  const auto odd = select_skip_heads(4, 0.5, 3, HeadInjection::OddEven);
  const auto even = select_skip_heads(4, 0.5, 4, HeadInjection::OddEven);
  CHECK(odd.mix[2][0].head == 0);
  CHECK(odd.mix[3][0].head == 1);
  CHECK(even.mix[2][0].head == 2);
  CHECK(even.mix[3][0].head == 3);

  const auto pool = select_skip_heads(4, 0.5, 2, HeadInjection::Pooling);
  REQUIRE(pool.mix[2].size() == 2);
  CHECK(pool.mix[2][0].head == 0);
  CHECK(pool.mix[2][1].head == 2);
  CHECK(pool.mix[2][0].weight == 0.5);

  const auto res = select_skip_heads(4, 0.5, 2, HeadInjection::SkipV1PlusRes);
  CHECK(res.mix[0].size() == 2);
  CHECK(res.mix[3][0].from_bank);

  CHECK(select_skip_heads(4, 0.25, 2, HeadInjection::SecondHalf).local == 3);
  CHECK(select_skip_heads(4, 0.75, 2, HeadInjection::SecondHalf).local == 1);
  CHECK_THROWS_AS(select_skip_heads(4, 1.0, 2, HeadInjection::SecondHalf), ConfigError);
  CHECK_THROWS_AS(select_skip_heads(4, -0.1, 2, HeadInjection::SecondHalf), ConfigError);
  CHECK_THROWS_AS(select_skip_heads(3, 0.5, 2, HeadInjection::SecondHalf), ConfigError);
}

TEST_CASE("every injection strategy matches a hand-assembled value oracle") {
  for (auto inj : {HeadInjection::Pooling, HeadInjection::Dynamic, HeadInjection::OddEven, HeadInjection::SkipV1PlusRes}) {
    for (int layer : {2, 3}) {
      Rng rng(50 + layer);
      const auto w = random_weights(rng, 8, 4, 8, 4);
      const auto x = rng.normal_tensor<float>({8, 4});
      const auto bank = rng.normal_tensor<float>({8, 4});
      const auto plan = select_skip_heads(4, 0.5, layer, inj);
      const auto local = O::split_heads(O::mul(O::to_mat(w.wv), O::to_mat(x)), 2);
      const auto banks = O::split_heads(O::to_mat(bank), 4);
      Heads h = mha_heads(with_zero_values(w), x);
      for (size_t s = 0; s < 4; ++s) {
        O::Mat acc = O::lin(0.0, banks[0], 0.0, banks[0]);
        for (const auto& t : plan.mix[s]) acc = O::lin(1.0, acc, t.weight, t.from_bank ? banks[t.head] : local[t.head]);
        h.v[s] = acc;
      }
      INFO(to_string(inj) << " layer " << layer);
      CHECK(O::max_diff(oracle_y(x, h, w), attn_skipv1(x, bank, w, inj, 0.5, layer)) < 1e-5);
    }
  }
}
