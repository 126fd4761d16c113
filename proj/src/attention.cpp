// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#include "skv1/attention.hpp"

#include <cmath>
#include <string>

#include "skv1/errors.hpp"

namespace skv1 {

namespace {

template <typename T>
ad::Var resolve(ad::Tape<T>& tape, ad::Var own, ad::Var source, int source_layer, const ad::HeadMix& mix,
                int head_dim, const char* what) {
  if (source_layer == 0) return own;
  if (!source.valid()) throw ConfigError(std::string("attention: missing ") + what + " source tensor");
  if (mix.empty()) return source;
  return ad::assemble_heads(tape, own, source, mix, head_dim);
}

}  // namespace

template <typename T>
AttnTrace attention_layer(ad::Tape<T>& tape, const LayerRole& role, const AttnParams& w, ad::Var xn,
                          const AttnSources& src, size_t seg_len, bool rotary) {
  AttnTrace tr;
  const int dh = role.d_head;
  ad::Var q = ad::matmul(tape, w.wq, xn);
  if (role.mla) {
    tr.latent = ad::matmul(tape, w.wdkv, xn);
    ad::Var c = tr.latent;
    if (role.latent_source != 0) {
      if (!src.latent.valid()) throw ConfigError("attention: missing layer-1 latent");
      const size_t full = tape.value(src.latent).rows();
      const size_t own = static_cast<size_t>(role.latent_local);
      ad::Var tail = ad::slice_rows(tape, src.latent, own, full - own);
      c = ad::concat_rows<T>(tape, {tr.latent, tail});
    }
    ad::Var kc = ad::matmul(tape, w.wuk, c);
    tr.v = ad::matmul(tape, w.wuv, c);
    if (role.d_r > 0) {
      ad::Var kr = ad::rope(tape, ad::matmul(tape, w.wkr, xn), 1, role.d_r, seg_len);
      ad::Var qr = ad::rope(tape, ad::matmul(tape, w.wqr, xn), role.q_heads, role.d_r, seg_len);
      q = ad::interleave_heads(tape, q, dh, qr, role.d_r, role.q_heads, false);
      tr.k = ad::interleave_heads(tape, kc, dh, kr, role.d_r, role.q_heads, true);
      tr.k_own = kr;
    } else {
      tr.k = kc;
    }
  } else {
    if (rotary) q = ad::rope(tape, q, role.q_heads, dh, seg_len);
    if (role.k_local > 0) {
      tr.k_own = ad::matmul(tape, w.wk, xn);
      if (rotary) tr.k_own = ad::rope(tape, tr.k_own, role.k_local, dh, seg_len);
    }
    if (role.v_local > 0) tr.v_own = ad::matmul(tape, w.wv, xn);
    tr.k = resolve(tape, tr.k_own, src.k, role.k_source, role.k_mix, dh, "key");
    tr.v = resolve(tape, tr.v_own, src.v, role.v_source, role.v_mix, dh, "value");
  }
  ad::AttentionLayout lay;
  lay.heads = role.q_heads;
  lay.qk_dim = role.qk_dim;
  lay.v_dim = role.v_dim;
  lay.k_head = role.kv_of_query;
  lay.v_head = role.kv_of_query;
  lay.seg_len = static_cast<int>(seg_len);
  lay.scale = 1.0 / std::sqrt(static_cast<double>(role.qk_dim));
  tr.heads = ad::causal_attention(tape, q, tr.k, tr.v, lay);
  tr.out = ad::matmul(tape, w.wo, tr.heads);
  return tr;
}

template AttnTrace attention_layer<float>(ad::Tape<float>&, const LayerRole&, const AttnParams&, ad::Var,
                                          const AttnSources&, size_t, bool);
template AttnTrace attention_layer<double>(ad::Tape<double>&, const LayerRole&, const AttnParams&, ad::Var,
                                           const AttnSources&, size_t, bool);

namespace {

size_t head_dim_of(const Tensor32& x, const AttnWeights& w) {
  if (x.rank() != 2) throw DimensionError("attention input must be d x n, got " + x.shape_str());
  if (w.heads < 1 || x.rows() % static_cast<size_t>(w.heads) != 0) {
    throw ConfigError("attention: d=" + std::to_string(x.rows()) + " not divisible into " + std::to_string(w.heads) +
                      " heads");
  }
  return x.rows() / static_cast<size_t>(w.heads);
}

void expect_rows(const Tensor32& t, size_t rows, size_t cols, const char* name) {
  if (t.rank() != 2 || t.rows() != rows || t.cols() != cols) {
    throw ConfigError(std::string("attention: ") + name + " has shape " + t.shape_str() + ", expected [" +
                      std::to_string(rows) + "x" + std::to_string(cols) + "]");
  }
}

LayerRole base_role(int heads, int dh, int kv_heads) {
  LayerRole role;
  role.layer = 1;
  role.q_heads = heads;
  role.kv_heads = kv_heads;
  role.d_head = dh;
  role.qk_dim = dh;
  role.v_dim = dh;
  role.k_local = kv_heads;
  role.v_local = kv_heads;
  role.kv_of_query.resize(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) role.kv_of_query[h] = h / (heads / kv_heads);
  return role;
}

struct Run {
  ad::Tape<float> tape;
  AttnTrace trace;
  ad::Var x;
};

// Records x + attention(x) on a fresh tape. Bank tensors enter as leaves.
void run_role(Run& run, const Tensor32& x, const AttnWeights& w, const LayerRole& role, const Tensor32* k_src,
              const Tensor32* v_src, const Tensor32* latent_src) {
  auto& t = run.tape;
  run.x = t.leaf(x);
  auto leaf = [&](const Tensor32& m) { return m.empty() ? ad::Var{} : t.leaf(m); };
  AttnParams p{leaf(w.wq), leaf(w.wk), leaf(w.wv), leaf(w.wo), leaf(w.wqr), leaf(w.wdkv), leaf(w.wuk), leaf(w.wuv), leaf(w.wkr)};
  AttnSources s;
  if (k_src) s.k = t.leaf(*k_src);
  if (v_src) s.v = t.leaf(*v_src);
  if (latent_src) s.latent = t.leaf(*latent_src);
  run.trace = attention_layer(t, role, p, run.x, s, x.cols(), false);
}

Tensor32 residual(Run& run) { return add(run.tape.value(run.x), run.tape.value(run.trace.out)); }

void check_bank(const Tensor32& bank, size_t heads_needed, size_t dh, size_t n, const char* what) {
  if (bank.rank() != 2 || bank.rows() % dh != 0 || bank.rows() / dh < heads_needed) {
    throw ConfigError(std::string("attention: ") + what + " of shape " + bank.shape_str() + " does not supply " +
                      std::to_string(heads_needed) + " heads of width " + std::to_string(dh));
  }
  if (bank.cols() != n) {
    throw DimensionError(std::string("attention: ") + what + " covers " + std::to_string(bank.cols()) +
                         " positions, input has " + std::to_string(n));
  }
}

}  // namespace

MhaResult attn_mha(const Tensor32& x, const AttnWeights& w) {
  const size_t dh = head_dim_of(x, w), d = x.rows();
  expect_rows(w.wq, d, d, "W_Q");
  expect_rows(w.wk, d, d, "W_K");
  if (w.wv.rows() != d || w.wv.cols() != d) {
    throw ConfigError("attention: W_V covers " + std::to_string(w.wv.rows() / std::max<size_t>(dh, 1)) + " of " +
                      std::to_string(w.heads) + " heads; every head needs a local value projection");
  }
  expect_rows(w.wo, d, d, "W_O");
  Run run;
  run_role(run, x, w, base_role(w.heads, static_cast<int>(dh), w.heads), nullptr, nullptr, nullptr);
  return {residual(run), run.tape.value(run.trace.v)};
}

Tensor32 attn_skipv1(const Tensor32& x, const Tensor32& bank, const AttnWeights& w, HeadInjection injection,
                     double ratio, int layer) {
  const size_t dh = head_dim_of(x, w), d = x.rows();
  LayerRole role = base_role(w.heads, static_cast<int>(dh), w.heads);
  SkipPlan plan = select_skip_heads(w.heads, ratio, layer, injection);
  role.layer = layer;
  role.v_local = plan.local;
  role.v_source = 1;
  role.v_mix = plan.mix;
  expect_rows(w.wq, d, d, "W_Q");
  expect_rows(w.wk, d, d, "W_K");
  expect_rows(w.wv, static_cast<size_t>(plan.local) * dh, d, "W_V");
  expect_rows(w.wo, d, d, "W_O");
  int needed = 0;
  for (const auto& slot : plan.mix)
    for (const auto& term : slot)
      if (term.from_bank) needed = std::max(needed, term.head + 1);
  check_bank(bank, static_cast<size_t>(needed), dh, x.cols(), "value bank");
  Run run;
  run_role(run, x, w, role, nullptr, &bank, nullptr);
  return residual(run);
}

Tensor32 attn_resformer(const Tensor32& x, const Tensor32& bank, const AttnWeights& w, double lambda) {
  const size_t dh = head_dim_of(x, w), d = x.rows();
  expect_rows(w.wv, d, d, "W_V");
  check_bank(bank, static_cast<size_t>(w.heads), dh, x.cols(), "value bank");
  LayerRole role = base_role(w.heads, static_cast<int>(dh), w.heads);
  role.layer = 2;
  role.v_source = 1;
  role.v_mix.resize(static_cast<size_t>(w.heads));
  for (int h = 0; h < w.heads; ++h) role.v_mix[h] = {{false, h, lambda}, {true, h, 1.0 - lambda}};
  Run run;
  run_role(run, x, w, role, nullptr, &bank, nullptr);
  return residual(run);
}

Tensor32 attn_gqa(const Tensor32& x, const AttnWeights& w, int groups, bool skip, const std::optional<Tensor32>& bank,
                  double ratio) {
  const size_t dh = head_dim_of(x, w), d = x.rows();
  if (groups < 1 || w.heads % groups != 0) {
    throw ConfigError("GQA: groups=" + std::to_string(groups) + " does not divide H=" + std::to_string(w.heads));
  }
  LayerRole role = base_role(w.heads, static_cast<int>(dh), groups);
  expect_rows(w.wk, static_cast<size_t>(groups) * dh, d, "W_K");
  if (skip) {
    if (!bank) throw ConfigError("GQA: skip requested without a value bank");
    SkipPlan plan = select_skip_heads(groups, ratio, 2, HeadInjection::SecondHalf);
    role.layer = 2;
    role.v_local = plan.local;
    role.v_source = 1;
    role.v_mix = plan.mix;
    expect_rows(w.wv, static_cast<size_t>(plan.local) * dh, d, "W_V");
    check_bank(*bank, static_cast<size_t>(groups), dh, x.cols(), "value bank");
  } else {
    expect_rows(w.wv, static_cast<size_t>(groups) * dh, d, "W_V");
  }
  Run run;
  run_role(run, x, w, role, nullptr, skip ? &*bank : nullptr, nullptr);
  return residual(run);
}

MlaResult attn_mla(const Tensor32& x, const AttnWeights& w, bool skip, const std::optional<Tensor32>& latent_bank,
                   double ratio) {
  const size_t dh = head_dim_of(x, w), d = x.rows();
  const size_t full = w.wuk.cols();
  const int d_r = static_cast<int>(w.wkr.rows());
  LayerRole role = base_role(w.heads, static_cast<int>(dh), w.heads);
  role.mla = true;
  role.d_r = d_r;
  role.qk_dim = static_cast<int>(dh) + d_r;
  role.k_local = role.v_local = 0;
  role.latent_local = static_cast<int>(full);
  expect_rows(w.wuk, d, full, "W_UK");
  expect_rows(w.wuv, d, full, "W_UV");
  if (d_r > 0) {
    expect_rows(w.wkr, static_cast<size_t>(d_r), d, "W_KR");
    expect_rows(w.wqr, static_cast<size_t>(w.heads * d_r), d, "W_QR");
  }
  if (skip) {
    if (!latent_bank) throw ConfigError("MLA: skip requested without a latent bank");
    ModelConfig probe;
    probe.variant = VariantKind::SkipV1MLA;
    probe.d_c = static_cast<int>(full);
    probe.ratio = ratio;
    if (ratio == 0.5 && full % 2 != 0) throw ConfigError("MLA: odd latent width " + std::to_string(full) + " cannot be halved");
    role.latent_local = probe.latent_local();
    role.latent_source = 1;
    role.layer = 2;
    check_bank(*latent_bank, full, 1, x.cols(), "latent bank");
  }
  expect_rows(w.wdkv, static_cast<size_t>(role.latent_local), d, "W_DKV");
  Run run;
  run_role(run, x, w, role, nullptr, nullptr, skip ? &*latent_bank : nullptr);
  return {residual(run), run.tape.value(run.trace.latent)};
}

Tensor32 attn_cross_kv(const Tensor32& x, const AttnWeights& w, const Tensor32& k_source, const Tensor32& v_source) {
  const size_t dh = head_dim_of(x, w), d = x.rows();
  expect_rows(w.wq, d, d, "W_Q");
  expect_rows(w.wo, d, d, "W_O");
  check_bank(k_source, static_cast<size_t>(w.heads), dh, x.cols(), "key source");
  check_bank(v_source, static_cast<size_t>(w.heads), dh, x.cols(), "value source");
  LayerRole role = base_role(w.heads, static_cast<int>(dh), w.heads);
  role.layer = 2;
  role.k_local = role.v_local = 0;
  role.k_source = role.v_source = 1;
  Run run;
  run_role(run, x, w, role, &k_source, &v_source, nullptr);
  return residual(run);
}

}  // namespace skv1
