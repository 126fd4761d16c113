// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#include <Eigen/Eigenvalues>

#include "doctest.h"
#include "model_fixtures.hpp"
#include "skv1/convert.hpp"
#include "skv1/errors.hpp"

using namespace skv1;

namespace {

ModelConfig toy(int d, int H, int L = 3) {
  ModelConfig c;
  c.L = L;
  c.d = d;
  c.H = H;
  c.r = 16;
  c.V = 20;
  c.n_max = 8;
  return c;
}

Eigen::MatrixXd eig(const Tensor32& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (size_t i = 0; i < t.rows(); ++i)
    for (size_t j = 0; j < t.cols(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t(i, j);
  return m;
}

}  // namespace

TEST_CASE("strategy names round trip") {
  for (auto s : all_strategies()) CHECK(parse_strategy(to_string(s)) == s);
  CHECK_THROWS_AS(parse_strategy("mean"), ConfigError);
}

TEST_CASE("conversion preserves layer 1 and non-value tensors") {
  const auto ck = testing::generic_weights(toy(8, 4), 1, 0.3);
  for (auto s : all_strategies()) {
    const auto out = convert(ck, s);
    CHECK(out.config.variant == VariantKind::SkipV1);
    for (const auto& [name, t] : ck.tensors) {
      const bool rebuilt = name.rfind("layers.1.", 0) != 0 && (name.find("attn.wv") != std::string::npos ||
                                                               name.find("attn.wo") != std::string::npos);
      if (!rebuilt) CHECK(out.at(name) == t);
    }
    CHECK(out.at("layers.2.attn.wv").rows() == 4u);
    Rng rng(2);
    CHECK(all_finite(forward(out, testing::random_tokens(rng, 8, 20))));
  }
}

TEST_CASE("meanv: identical pairs survive, sums are conserved") {
  auto ck = testing::generic_weights(toy(8, 4), 3, 0.3);
  auto& wv = ck.at("layers.2.attn.wv");
  for (size_t r = 0; r < 2; ++r)
    for (size_t c = 0; c < 8; ++c) {
      wv(2 + r, c) = wv(r, c);
      wv(6 + r, c) = wv(4 + r, c);
    }
  const auto out = convert(ck, ConversionStrategy::MeanV);
  const auto& nv = out.at("layers.2.attn.wv");
  CHECK(slice_rows(nv, 0, 2) == slice_rows(wv, 0, 2));
  CHECK(slice_rows(nv, 2, 2) == slice_rows(wv, 4, 2));
  CHECK(out.at("layers.2.attn.wo") == ck.at("layers.2.attn.wo"));

  // Power-of-two entries make the pair means exact, so conservation is exact.
  auto exact = testing::generic_weights(toy(8, 4), 4, 0.3);
  Rng rng(5);
  for (auto& x : exact.at("layers.3.attn.wv").storage()) x = static_cast<float>(std::ldexp(1.0, static_cast<int>(rng.below(8)) - 4));
  const auto conv = convert(exact, ConversionStrategy::MeanV);
  const auto& a = exact.at("layers.3.attn.wv");
  const auto& b = conv.at("layers.3.attn.wv");
  for (size_t r = 0; r < 2; ++r)
    for (size_t c = 0; c < 8; ++c) {
      const float orig = a(r, c) + a(2 + r, c) + a(4 + r, c) + a(6 + r, c);
      CHECK(b(r, c) + b(2 + r, c) == 0.5f * orig);
    }
}

TEST_CASE("meanvo: pooled output columns and zeroed skip columns") {
  const auto ck = testing::generic_weights(toy(8, 4), 6, 0.3);
  const auto out = convert(ck, ConversionStrategy::MeanVO);
  const auto& wo = ck.at("layers.2.attn.wo");
  const auto& no = out.at("layers.2.attn.wo");
  for (size_t i = 0; i < 8; ++i) {
    CHECK(no(i, 0) == 0.5f * (wo(i, 0) + wo(i, 2)));
    CHECK(no(i, 3) == 0.5f * (wo(i, 5) + wo(i, 7)));
    for (size_t j = 4; j < 8; ++j) CHECK(no(i, j) == 0.0f);
  }
}

TEST_CASE("topv and topvo select by block norm") {
  auto ck = testing::generic_weights(toy(8, 4), 7, 0.01);
  auto& wv = ck.at("layers.2.attn.wv");
  auto& wo = ck.at("layers.2.attn.wo");
  for (size_t c = 0; c < 8; ++c) {
    wv(6, c) *= 100.0f;  // head 3
    wv(2, c) *= 50.0f;   // head 1
    wo(c, 0) *= 100.0f;  // head 0
    wo(c, 5) *= 50.0f;   // head 2
  }
  const auto tv = convert(ck, ConversionStrategy::TopV);
  CHECK(slice_rows(tv.at("layers.2.attn.wv"), 0, 2) == slice_rows(wv, 2, 2));
  CHECK(slice_rows(tv.at("layers.2.attn.wv"), 2, 2) == slice_rows(wv, 6, 2));
  CHECK(tv.at("layers.2.attn.wo") == wo);
  const auto tvo = convert(ck, ConversionStrategy::TopVO);
  CHECK(slice_cols(tvo.at("layers.2.attn.wo"), 0, 2) == slice_cols(wo, 0, 2));
  CHECK(slice_cols(tvo.at("layers.2.attn.wo"), 2, 2) == slice_cols(wo, 4, 2));
  CHECK(slice_cols(tvo.at("layers.2.attn.wo"), 4, 4) == slice_cols(wo, 4, 4));
}

TEST_CASE("svd: local product is the rank-truncated original product") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    const auto ck = testing::generic_weights(toy(8, 4), 10 + seed, 0.5);
    const auto out = convert(ck, ConversionStrategy::SVD);
    for (int l = 2; l <= 3; ++l) {
      const std::string p = layer_prefix(l);
      const Eigen::MatrixXd m = eig(ck.at(p + "attn.wo")) * eig(ck.at(p + "attn.wv"));
      // Truncation via the top eigenvectors of MᵀM: M_r = M V_r V_rᵀ.
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m.transpose() * m);
      const Eigen::MatrixXd vr = es.eigenvectors().rightCols(4);
      const Eigen::MatrixXd truncated = m * vr * vr.transpose();
      const Eigen::MatrixXd got = eig(slice_cols(out.at(p + "attn.wo"), 0, 4)) * eig(out.at(p + "attn.wv"));
      CHECK((got - truncated).cwiseAbs().maxCoeff() < 1e-5);
      CHECK(slice_cols(out.at(p + "attn.wo"), 4, 4) == slice_cols(ck.at(p + "attn.wo"), 4, 4));
    }
  }
}

TEST_CASE("conversion rejects unsuitable inputs") {
  const auto ck = testing::generic_weights(toy(8, 4), 1, 0.3);
  const auto once = convert(ck, ConversionStrategy::MeanV);
  CHECK_THROWS_AS(convert(once, ConversionStrategy::MeanV), VariantError);
  const auto odd = testing::generic_weights(toy(6, 3), 1, 0.3);
  CHECK_THROWS_AS(convert(odd, ConversionStrategy::MeanV), ConfigError);
  CHECK_THROWS_AS(convert(odd, ConversionStrategy::TopV), ConfigError);
  CHECK(convert(ck, ConversionStrategy::TopV, 0.25).at("layers.2.attn.wv").rows() == 6u);
  CHECK_THROWS_AS(convert(ck, ConversionStrategy::MeanV, 0.25), ConfigError);
}
