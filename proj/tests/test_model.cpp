// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstring>
#include <memory>

#include "doctest.h"
#include "model_fixtures.hpp"
#include "oracles.hpp"
#include "skv1/checkpoint.hpp"
#include "skv1/errors.hpp"

using namespace skv1;
namespace O = skv1::oracle;
using testing::small_config;

namespace {

std::vector<double> vec_of(const Tensor32& t) { return {t.storage().begin(), t.storage().end()}; }

// Single-sequence forward written directly from the block equations. Supports
// plain attention and second-half value skipping, learned or rotary positions.
O::Mat reference_logits(const Checkpoint& ck, const std::vector<TokenId>& tokens) {
  const auto& c = ck.config;
  const size_t n = tokens.size(), d = static_cast<size_t>(c.d), H = static_cast<size_t>(c.H), dh = d / H;
  const bool rotary = c.positional == Positional::Rotary;
  const bool skip = c.variant == VariantKind::SkipV1;
  O::Mat x(d, std::vector<double>(n));
  for (size_t j = 0; j < n; ++j)
    for (size_t i = 0; i < d; ++i)
      x[i][j] = ck.at("wte")(static_cast<size_t>(tokens[j]), i) + (rotary ? 0.0 : ck.at("wpe")(j, i));
  std::vector<O::Mat> bank;
  for (int l = 1; l <= c.L; ++l) {
    auto W = [&](const std::string& s) { return O::to_mat(ck.at(layer_prefix(l) + s)); };
    auto V = [&](const std::string& s) { return vec_of(ck.at(layer_prefix(l) + s)); };
    const auto xn = O::layer_norm(x, V("ln1.gain"), V("ln1.bias"), c.ln_eps);
    auto q = O::mul(W("attn.wq"), xn), k = O::mul(W("attn.wk"), xn);
    if (rotary) {
      q = O::rope(q, dh);
      k = O::rope(k, dh);
    }
    auto v = O::split_heads(O::mul(W("attn.wv"), xn), skip && l > 1 ? H / 2 : H);
    if (l == 1) bank = v;
    if (skip && l > 1)
      for (size_t h = H / 2; h < H; ++h) v.push_back(bank[h]);
    x = O::add(x, O::attention_sum(O::split_heads(q, H), O::split_heads(k, H), v, W("attn.wo")));
    const auto hn = O::layer_norm(x, V("ln2.gain"), V("ln2.bias"), c.ln_eps);
    auto a = O::mul(W("ffn.w1"), hn);
    for (auto& row : a)
      for (auto& e : row) e = std::max(e, 0.0);
    x = O::add(x, O::mul(W("ffn.w2"), a));
  }
  const auto xf = O::layer_norm(x, vec_of(ck.at("lnf.gain")), vec_of(ck.at("lnf.bias")), c.ln_eps);
  return O::mul(O::to_mat(ck.at("wte")), xf);
}

bool bit_equal(const Tensor32& a, const Tensor32& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

ModelConfig gpt2_medium(VariantKind v) {
  ModelConfig c;
  c.L = 24;
  c.d = 1024;
  c.H = 16;
  c.r = 4096;
  c.V = 50257;
  c.n_max = 1024;
  c.variant = v;
  c.groups = 8;
  return c;
}

}  // namespace

TEST_CASE("forward: one-layer skip model is plain attention") {
  ModelConfig c = small_config(VariantKind::MHA);
  c.L = 1;
  const auto mha = init_weights(c, 3);
  c.variant = VariantKind::SkipV1;
  const auto skip = init_weights(c, 3);
  CHECK(mha.tensors == skip.tensors);
  Rng rng(1);
  const auto tokens = testing::random_tokens(rng, 9, c.V);
  CHECK(bit_equal(forward(mha, tokens), forward(skip, tokens)));
}

TEST_CASE("forward: zero blocks reduce to unembed of normalized embedding") {
  for (auto v : all_variants()) {
    const ModelConfig c = small_config(v);
    auto ck = testing::generic_weights(c, 4, 0.3);
    for (auto& [name, t] : ck.tensors)
      if (name.find(".attn.") != std::string::npos || name.find(".ffn.") != std::string::npos) t.fill(0.0f);
    Rng rng(2);
    const auto tokens = testing::random_tokens(rng, 7, c.V);
    Tensor32 x = Tensor32::matrix(static_cast<size_t>(c.d), tokens.size());
    for (size_t j = 0; j < tokens.size(); ++j)
      for (size_t i = 0; i < x.rows(); ++i) x(i, j) = ck.at("wte")(static_cast<size_t>(tokens[j]), i) + ck.at("wpe")(j, i);
    const auto expect = matmul(ck.at("wte"), layer_norm_cols(x, ck.at("lnf.gain"), ck.at("lnf.bias"), static_cast<float>(c.ln_eps)));
    INFO(to_string(v));
    CHECK(bit_equal(forward(ck, tokens), expect));
  }
}

TEST_CASE("forward: matches the straight-line reference") {
  for (auto v : {VariantKind::MHA, VariantKind::SkipV1}) {
    for (auto pos : {Positional::Learned, Positional::Rotary}) {
      for (uint64_t seed = 0; seed < 3; ++seed) {
        ModelConfig c;
        c.L = 2;
        c.d = 8;
        c.H = 2;
        c.r = 32;
        c.V = 50;
        c.n_max = 16;
        c.variant = v;
        c.positional = pos;
        const auto ck = testing::generic_weights(c, 100 + seed, 0.3);
        Rng rng(seed);
        const auto tokens = testing::random_tokens(rng, 12, c.V);
        INFO(to_string(v) << " " << to_string(pos) << " seed " << seed);
        CHECK(O::max_diff(reference_logits(ck, tokens), forward(ck, tokens)) < 1e-4);
      }
    }
  }
}

TEST_CASE("forward: causal for every variant") {
  for (auto v : all_variants()) {
    for (auto pos : {Positional::Learned, Positional::Rotary}) {
      ModelConfig c = small_config(v);
      c.positional = pos;
      const auto ck = testing::generic_weights(c, 7, 0.3);
      Rng rng(5);
      auto tokens = testing::random_tokens(rng, 12, c.V);
      const auto base = forward(ck, tokens);
      for (size_t t = 0; t + 1 < tokens.size(); t += 3) {
        auto changed = tokens;
        for (size_t j = t + 1; j < changed.size(); ++j) changed[j] = (changed[j] + 1) % c.V;
        const auto alt = forward(ck, changed);
        INFO(to_string(v) << " " << to_string(pos) << " t=" << t);
        CHECK(bit_equal(slice_cols(base, 0, t + 1), slice_cols(alt, 0, t + 1)));
        CHECK(max_abs_diff(slice_cols(base, t + 1, 1), slice_cols(alt, t + 1, 1)) > 0.0f);
      }
    }
  }
}

TEST_CASE("forward: errors") {
  const ModelConfig c = small_config(VariantKind::SkipV1);
  auto ck = init_weights(c, 1);
  CHECK_THROWS_AS(forward(ck, std::vector<TokenId>(17, 1)), LengthError);
  CHECK_THROWS_AS(forward(ck, {1, 2, 32}), IndexError);
  ck.tensors.at("layers.2.attn.wv") = Tensor32::matrix(16, 16);
  CHECK_THROWS_AS(forward(ck, {1, 2}), ConfigError);
}

TEST_CASE("forward: shared tensors are the earlier layer's tensors") {
  Rng rng(1);
  const auto tokens = testing::random_tokens(rng, 6, 32);
  auto graph_of = [&](VariantKind v, int L) {
    ModelConfig c = small_config(v);
    c.L = L;
    auto g = std::make_unique<ForwardGraph<float>>();
    build_forward(*g, c, init_weights(c, 1).tensors, tokens, tokens.size(), false);
    return g;
  };
  const auto clav = graph_of(VariantKind::CLAV, 4);
  CHECK(clav->layers[1].attn.v.id == clav->layers[0].attn.v.id);
  CHECK(clav->layers[3].attn.v.id == clav->layers[2].attn.v.id);
  CHECK(clav->layers[2].attn.v.id != clav->layers[0].attn.v.id);
  const auto yoco = graph_of(VariantKind::YOCOV, 4);
  CHECK(yoco->layers[2].attn.v.id == yoco->layers[1].attn.v.id);
  CHECK(yoco->layers[3].attn.v.id == yoco->layers[1].attn.v.id);
  const auto syoco = graph_of(VariantKind::SkipV1YOCO, 4);
  CHECK(syoco->layers[3].attn.k.id == syoco->layers[1].attn.k.id);
  CHECK(syoco->layers[1].attn.k.id != syoco->layers[0].attn.k.id);
  const auto skip = graph_of(VariantKind::SkipV1, 3);
  const Tensor32 bank = skip->tape.value(skip->layers[0].attn.v);
  for (int l = 1; l < 3; ++l) {
    const auto& v = skip->tape.value(skip->layers[static_cast<size_t>(l)].attn.v);
    CHECK(bit_equal(slice_rows(v, 8, 8), slice_rows(bank, 8, 8)));
  }
}

TEST_CASE("param_count: value-projection savings") {
  const auto skip = param_count(gpt2_medium(VariantKind::SkipV1));
  CHECK(skip.delta_vs_mha == 6029312L * 2);
  const auto sg = param_count(gpt2_medium(VariantKind::SkipV1GQA));
  CHECK(sg.delta_vs_mha == 6029312L);
  CHECK(sg.delta_vs_mha == 23L * 1024 * 256);
  ModelConfig zero = gpt2_medium(VariantKind::SkipV1);
  zero.ratio = 0.0;
  CHECK(param_count(zero).delta_vs_mha == 0);
  CHECK(param_count(gpt2_medium(VariantKind::MHA)).delta_vs_mha == 0);

  const auto gqa = param_count(gpt2_medium(VariantKind::GQA));
  CHECK(gqa.total == 329436160L);
  CHECK(std::abs(gqa.total / 334.7e6 - 1.0) < 0.02);
  CHECK(std::abs(sg.total / 328.9e6 - 1.0) < 0.02);
  CHECK(gqa.embedding + gqa.attention + gqa.ffn + gqa.norm == gqa.total);
}

TEST_CASE("param_count: value weights shrink by the local-head fraction") {
  for (double ratio : {0.25, 0.5, 0.75}) {
    ModelConfig c = small_config(VariantKind::SkipV1);
    c.L = 5;
    c.H = 8;
    c.d = 32;
    c.ratio = ratio;
    const auto ck = init_weights(c, 1);
    const int local = local_head_count(c.H, ratio);
    for (int l = 2; l <= c.L; ++l) CHECK(ck.at(layer_prefix(l) + "attn.wv").rows() == static_cast<size_t>(local * 4));
    CHECK(ck.at("layers.1.attn.wv").rows() == 32u);
    CHECK(param_count(c).delta_vs_mha == static_cast<long>(c.L - 1) * (c.H - local) * 4 * 32);
  }
}

TEST_CASE("init_weights: reproducible, seed dependent, correctly scaled") {
  const ModelConfig c = small_config(VariantKind::SkipV1);
  CHECK(init_weights(c, 9).tensors == init_weights(c, 9).tensors);
  CHECK(init_weights(c, 9).tensors.at("wte") != init_weights(c, 10).tensors.at("wte"));
  const auto ck = init_weights(c, 9);
  CHECK(ck.at("lnf.gain") == Tensor32({16}, 1.0f));
  CHECK(ck.at("lnf.bias") == Tensor32({16}, 0.0f));

  Rng rng(11);
  const auto big = rng.normal_tensor<float>({1000, 1000}, 0.02);
  double sum = 0, sq = 0;
  for (float x : big.storage()) {
    sum += x;
    sq += static_cast<double>(x) * x;
  }
  const double mean = sum / 1e6, sd = std::sqrt(sq / 1e6 - mean * mean);
  CHECK(std::abs(mean) < 3 * 0.02 / 1000);
  CHECK(std::abs(sd - 0.02) < 0.02 * 0.01);

  ModelConfig wide = c;
  wide.d = 64;
  wide.r = 256;
  wide.L = 8;
  const auto w = init_weights(wide, 2);
  auto rms = [](const Tensor32& t) {
    double s = 0;
    for (float x : t.storage()) s += static_cast<double>(x) * x;
    return std::sqrt(s / static_cast<double>(t.size()));
  };
  CHECK(std::abs(rms(w.at("layers.3.ffn.w2")) / (0.02 / 4.0) - 1.0) < 0.05);
  CHECK(std::abs(rms(w.at("layers.3.ffn.w1")) / 0.02 - 1.0) < 0.05);
}

TEST_CASE("gradients match central differences for every variant") {
  for (auto v : all_variants()) {
    const ModelConfig c = small_config(v);
    Rng rng(static_cast<uint64_t>(v) + 1);
    const auto tokens = testing::random_tokens(rng, 10, c.V), targets = testing::random_tokens(rng, 10, c.V);
    const auto rep = testing::check_model_gradient(c, testing::generic_weights(c, 21, 0.3), tokens, targets, 5, 7);
    INFO(to_string(v) << " worst 64-bit " << rep.r64.worst_tensor << " " << rep.r64.worst);
    INFO(to_string(v) << " worst 32-bit " << rep.r32.worst_tensor << " " << rep.r32.worst);
    CHECK(rep.r64.worst < 1e-6);
    CHECK(rep.r32.worst < 1e-3);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  for (auto v : all_variants()) {
    const auto ck = init_weights(small_config(v), 5);
    const auto bytes = encode_checkpoint(ck);
    const auto back = decode_checkpoint(bytes);
    CHECK(back.config == ck.config);
    CHECK(back.tensors == ck.tensors);
    CHECK(encode_checkpoint(back) == bytes);
  }
  const auto ck = init_weights(small_config(VariantKind::MHA), 5);
  auto bytes = encode_checkpoint(ck);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), IoError);
  CHECK_THROWS_AS(decode_checkpoint(std::vector<char>(bytes.begin(), bytes.end() - 3)), IoError);
  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(bad), IoError);
}
