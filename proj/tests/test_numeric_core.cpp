// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstring>

#include "doctest.h"
#include "grad_check.hpp"
#include "skv1/kernels.hpp"
#include "skv1/ops.hpp"
#include "skv1/rng.hpp"
#include "skv1/tape.hpp"

using namespace skv1;
using skv1::testing::ScalarGraph;
using skv1::testing::worst_grad_error;

namespace {

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

}  // namespace

TEST_CASE("matmul small cases") {
  const auto a = Tensor64::from_rows({{1, 2}, {3, 4}});
  const auto b = Tensor64::from_rows({{5, 6}, {7, 8}});
  CHECK(matmul(a, b) == Tensor64::from_rows({{19, 22}, {43, 50}}));
  CHECK(matmul(Tensor64::identity(2), a) == a);
  CHECK(matmul(a, Tensor64::identity(2)) == a);

  const auto x = Tensor64::matrix(2, 3, 1.0);
  try {
    matmul(x, x);
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("parallel and serial kernels agree bit for bit") {
  Rng rng(11);
  for (auto [m, k, n] : {std::tuple<size_t, size_t, size_t>{1, 1, 1}, {5, 7, 3}, {17, 33, 65}, {64, 128, 520}, {130, 96, 64}}) {
    const auto a = rng.normal_tensor<float>({m, k});
    const auto b = rng.normal_tensor<float>({k, n});
    const auto bt = rng.normal_tensor<float>({n, k});
    const auto at = rng.normal_tensor<float>({k, m});
    Tensor32 c1 = Tensor32::matrix(m, n), c2 = Tensor32::matrix(m, n);
    kernels::serial::gemm_nn(m, k, n, a.data(), b.data(), c1.data());
    kernels::parallel::gemm_nn(m, k, n, a.data(), b.data(), c2.data());
    CHECK(bit_equal(c1, c2));
    kernels::serial::gemm_tn(m, k, n, at.data(), b.data(), c1.data());
    kernels::parallel::gemm_tn(m, k, n, at.data(), b.data(), c2.data());
    CHECK(bit_equal(c1, c2));
    kernels::serial::gemm_nt(m, k, n, a.data(), bt.data(), c1.data());
    kernels::parallel::gemm_nt(m, k, n, a.data(), bt.data(), c2.data());
    CHECK(bit_equal(c1, c2));
  }
}

TEST_CASE("matmul is reproducible and distributes on exactly representable values") {
  Rng rng(3);
  auto small_ints = [&](size_t r, size_t c) {
    Tensor64 t = Tensor64::matrix(r, c);
    for (auto& v : t.storage()) v = static_cast<double>(static_cast<int>(rng.below(9)) - 4);
    return t;
  };
  const auto a = small_ints(6, 5), b = small_ints(5, 7), c = small_ints(5, 7);
  CHECK(matmul(a, add(b, c)) == add(matmul(a, b), matmul(a, c)));
  const auto f = rng.normal_tensor<float>({33, 47});
  const auto g = rng.normal_tensor<float>({47, 29});
  CHECK(bit_equal(matmul(f, g), matmul(f, g)));
  CHECK(bit_equal(matmul(Tensor32::identity(33), f), f));
}

TEST_CASE("causal softmax") {
  CHECK(causal_softmax(Tensor64::from_rows({{4.2}}), 1.0)(0, 0) == 1.0);
  const auto u = causal_softmax(Tensor64::matrix(3, 3, 0.7), 1.0);
  for (size_t i = 0; i < 3; ++i) CHECK(u(i, 2) == doctest::Approx(1.0 / 3).epsilon(1e-12));
  // Column 1 holds the unmasked scores (0, ln 2).
  const auto p = causal_softmax(Tensor64::from_rows({{0, 0}, {0, std::log(2.0)}}), 1.0);
  CHECK(p(0, 1) == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(p(1, 1) == doctest::Approx(2.0 / 3).epsilon(1e-12));
  CHECK_THROWS_AS(causal_softmax(Tensor64::matrix(2, 3), 1.0), DimensionError);

  Rng rng(5);
  for (int seed = 0; seed < 10; ++seed) {
    const auto s = rng.normal_tensor<float>({9, 9}, 3.0);
    const auto q = causal_softmax(s, 0.5f);
    for (size_t j = 0; j < 9; ++j) {
      double sum = 0;
      for (size_t i = 0; i < 9; ++i) {
        if (i > j) CHECK(q(i, j) == 0.0f);
        sum += q(i, j);
      }
      CHECK(std::abs(sum - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("layer norm") {
  const auto one = Tensor64::vector(3, 1.0), zero = Tensor64::vector(3, 0.0);
  const auto c = layer_norm(Tensor64::vector(3, 5.0), one, zero, 1e-5);
  for (size_t i = 0; i < 3; ++i) CHECK(c[i] == 0.0);
  const auto one2 = Tensor64::vector(2, 1.0), zero2 = Tensor64::vector(2, 0.0);
  const auto y = layer_norm(Tensor64({2}, {1.0, -1.0}), one2, zero2, 1e-12);
  CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(y[1] == doctest::Approx(-1.0).epsilon(1e-9));
  const auto z = layer_norm(Tensor64({2}, {0.0, 2.0}), Tensor64::vector(2, 2.0), Tensor64::vector(2, 1.0), 1e-12);
  CHECK(z[0] == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(z[1] == doctest::Approx(3.0).epsilon(1e-9));
  CHECK_THROWS_AS(layer_norm(Tensor64({0}), Tensor64({0}), Tensor64({0}), 1e-5), DimensionError);
}

TEST_CASE("cross entropy") {
  CHECK(cross_entropy(Tensor64::matrix(2, 3, 0.3), {0, 1, 1}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(cross_entropy(Tensor64::from_rows({{60.0}, {0.0}}), {0}) < 1e-20);
  CHECK(cross_entropy(Tensor64::from_rows({{0.0}, {std::log(3.0)}}), {0}) ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK_THROWS_AS(cross_entropy(Tensor64::matrix(2, 1), {2}), IndexError);
}

TEST_CASE("finite differences") {
  std::function<double(const Tensor64&)> sum = [](const Tensor64& x) {
    double s = 0;
    for (double v : x.storage()) s += v;
    return s;
  };
  const auto g = finite_diff_grad(sum, Tensor64({3}, {0.5, -2.0, 7.0}), 1e-3);
  for (size_t i = 0; i < 3; ++i) CHECK(g[i] == doctest::Approx(1.0).epsilon(1e-9));

  std::function<double(const Tensor64&)> half_sq = [](const Tensor64& x) {
    double s = 0;
    for (double v : x.storage()) s += 0.5 * v * v;
    return s;
  };
  const auto h = finite_diff_grad(half_sq, Tensor64({2}, {3.0, -2.0}), 1e-5);
  CHECK(std::abs(h[0] - 3.0) < 1e-8);
  CHECK(std::abs(h[1] + 2.0) < 1e-8);

  std::function<double(const Tensor64&)> blow = [](const Tensor64& x) { return x[1] > 0.5 ? std::nan("") : x[0]; };
  try {
    finite_diff_grad(blow, Tensor64({2}, {0.0, 0.5}), 0.1);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(e.index() == 1);
  }
}

namespace {

template <typename T>
struct PrimitiveCase {
  const char* name;
  std::vector<std::vector<size_t>> shapes;
  ScalarGraph<T> graph;
};

// Each graph ends in a fixed random projection so every output coordinate matters.
template <typename T>
std::vector<PrimitiveCase<T>> primitive_cases(Rng& rng) {
  using namespace ad;
  auto probe = [&rng](std::vector<size_t> shape) { return rng.normal_tensor<T>(std::move(shape)); };
  std::vector<PrimitiveCase<T>> cases;
  const auto w43 = probe({4, 3}), w44 = probe({4, 4}), w56 = probe({5, 6}), w3 = probe({3, 6}), w66 = probe({6, 6});
  const auto w_mla = probe({2 * 5, 6});
  const std::vector<TokenId> ids{3, 0, 2, 2, 4, 1};
  cases.push_back({"matmul", {{4, 5}, {5, 3}}, [w43](Tape<T>& t, const std::vector<Var>& x) {
                     return weighted_sum(t, matmul(t, x[0], x[1]), w43);
                   }});
  cases.push_back({"add_scale", {{4, 4}, {4, 4}}, [w44](Tape<T>& t, const std::vector<Var>& x) {
                     return weighted_sum(t, add(t, x[0], scale(t, x[1], T(0.7))), w44);
                   }});
  cases.push_back({"relu", {{4, 4}}, [w44](Tape<T>& t, const std::vector<Var>& x) {
                     return weighted_sum(t, relu(t, x[0]), w44);
                   }});
  cases.push_back({"slice_concat", {{5, 6}, {3, 6}}, [w56](Tape<T>& t, const std::vector<Var>& x) {
                     auto top = slice_rows(t, x[0], 1, 2);
                     return weighted_sum(t, concat_rows<T>(t, {top, x[1]}), w56);
                   }});
  cases.push_back({"layer_norm", {{5, 6}, {5, 1}, {5, 1}}, [w56](Tape<T>& t, const std::vector<Var>& x) {
                     return weighted_sum(t, layer_norm(t, x[0], x[1], x[2], T(1e-5)), w56);
                   }});
  cases.push_back({"embed_positions", {{5, 3}, {4, 3}}, [w3, ids](Tape<T>& t, const std::vector<Var>& x) {
                     return weighted_sum(t, add(t, embed(t, x[0], ids), positions(t, x[1], 3, 6)), w3);
                   }});
  cases.push_back({"cross_entropy", {{5, 6}}, [ids](Tape<T>& t, const std::vector<Var>& x) {
                     return cross_entropy(t, x[0], ids);
                   }});
  cases.push_back({"causal_softmax", {{6, 6}}, [w66](Tape<T>& t, const std::vector<Var>& x) {
                     return weighted_sum(t, causal_softmax(t, x[0], T(0.8)), w66);
                   }});
  cases.push_back({"rope", {{4, 6}}, [w3 = probe({4, 6})](Tape<T>& t, const std::vector<Var>& x) {
                     return weighted_sum(t, rope(t, x[0], 2, 2, 3), w3);
                   }});
  cases.push_back({"interleave", {{6, 6}, {4, 6}}, [w_mla](Tape<T>& t, const std::vector<Var>& x) {
                     auto shared = slice_rows(t, x[1], 0, 2);
                     return weighted_sum(t, interleave_heads(t, x[0], 3, shared, 2, 2, true), w_mla);
                   }});
  cases.push_back({"assemble_heads", {{4, 6}, {6, 6}}, [w66](Tape<T>& t, const std::vector<Var>& x) {
                     HeadMix mix{{{false, 1, 1.0}}, {{true, 2, 1.0}}, {{false, 0, 0.25}, {true, 0, 0.75}}};
                     return weighted_sum(t, assemble_heads(t, x[0], x[1], mix, 2), w66);
                   }});
  cases.push_back({"transpose_kron", {{3, 2}, {2, 2}}, [w = probe({8, 3})](Tape<T>& t, const std::vector<Var>& x) {
                     auto sq = matmul(t, transpose(t, x[0]), x[0]);
                     return weighted_sum(t, transposed_kron(t, x[0], add(t, sq, x[1])), w);
                   }});
  cases.push_back({"frobenius_dot", {{3, 4}, {4, 3}}, [](Tape<T>& t, const std::vector<Var>& x) {
                     return frobenius_dot(t, x[0], transpose(t, x[1]));
                   }});
  cases.push_back({"causal_attention", {{6, 8}, {4, 8}, {4, 8}}, [w = probe({4, 8})](Tape<T>& t, const std::vector<Var>& x) {
                     AttentionLayout lay;
                     lay.heads = 2;
                     lay.qk_dim = 3;
                     lay.v_dim = 2;
                     lay.k_head = {0, 0};
                     lay.v_head = {1, 0};
                     lay.seg_len = 4;
                     lay.scale = 0.6;
                     auto k = slice_rows(t, x[1], 1, 3);
                     return weighted_sum(t, causal_attention(t, x[0], k, x[2], lay), w);
                   }});
  return cases;
}

template <typename T>
void check_primitives(double tol, T h) {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    for (const auto& c : primitive_cases<T>(rng)) {
      std::vector<Tensor<T>> inputs;
      for (const auto& s : c.shapes) inputs.push_back(rng.normal_tensor<T>(s));
      // Keep every coordinate several steps away from the ReLU kink.
      for (auto& x : inputs)
        for (auto& v : x.storage()) v += (v >= T(0) ? T(1) : T(-1)) * T(4) * h;
      const double err = worst_grad_error(c.graph, inputs, h);
      INFO(std::string(c.name) << " seed " << seed << " error " << err);
      CHECK(err < tol);
    }
  }
}

}  // namespace

TEST_CASE("reverse mode matches central differences, 64-bit") { check_primitives<double>(1e-6, 1e-5); }

TEST_CASE("reverse mode matches central differences, 32-bit") { check_primitives<float>(1e-3, 1e-2f); }

TEST_CASE("tape replay is bit exact") {
  Rng rng(9);
  ad::Tape<float> t;
  auto x = t.leaf(rng.normal_tensor<float>({6, 8}), true);
  auto w = t.leaf(rng.normal_tensor<float>({6, 6}), true);
  ad::AttentionLayout lay;
  lay.heads = 2;
  lay.qk_dim = 3;
  lay.v_dim = 3;
  lay.k_head = {0, 1};
  lay.v_head = {1, 0};
  lay.seg_len = 4;
  lay.scale = 0.5;
  auto q = ad::matmul(t, w, x);
  auto y = ad::causal_attention(t, q, x, q, lay);
  auto loss = ad::cross_entropy(t, y, {0, 1, 2, 3, 4, 5, 0, 1});
  const auto before = t.value(loss);
  CHECK(t.replay());
  CHECK(bit_equal(before, t.value(loss)));
}

TEST_CASE("leaves without gradient receive none") {
  ad::Tape<double> t;
  auto a = t.leaf(Tensor64::from_rows({{1, 2}}), false);
  auto b = t.leaf(Tensor64::from_rows({{3}, {4}}), true);
  auto y = ad::matmul(t, a, b);
  t.backward(y);
  CHECK(t.grad(a).empty());
  CHECK(t.grad(b) == Tensor64::from_rows({{1}, {2}}));
}

TEST_CASE("transposed kronecker layout") {
  ad::Tape<double> t;
  auto p = t.leaf(Tensor64({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto n = t.leaf(Tensor64({2, 1}, {10, -1}));
  const auto& out = t.value(ad::transposed_kron(t, p, n));
  REQUIRE(out.shape() == std::vector<size_t>{6, 2});
  // Row j·2 + m, column i holds p(i, j) · n[m].
  CHECK(out(0, 0) == 10.0);
  CHECK(out(1, 0) == -1.0);
  CHECK(out(4, 1) == 60.0);
  CHECK(out(3, 1) == -5.0);
}
