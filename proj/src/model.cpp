// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#include "skv1/model.hpp"

#include <cmath>

#include "skv1/errors.hpp"
#include "skv1/rng.hpp"

namespace skv1 {

const Tensor32& Checkpoint::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("checkpoint has no tensor '" + name + "'");
  return it->second;
}

Tensor32& Checkpoint::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("checkpoint has no tensor '" + name + "'");
  return it->second;
}

std::string layer_prefix(int layer) { return "layers." + std::to_string(layer) + "."; }

std::vector<ParamSpec> parameter_specs(const ModelConfig& cfg, double std) {
  cfg.validate();
  const size_t d = static_cast<size_t>(cfg.d), dh = static_cast<size_t>(cfg.d_head());
  const size_t H = static_cast<size_t>(cfg.H);
  const double out_std = std / std::sqrt(2.0 * cfg.L);
  std::vector<ParamSpec> specs;
  auto mat = [&](const std::string& name, size_t r, size_t c, double s) { specs.push_back({name, {r, c}, s, false}); };
  auto norm = [&](const std::string& name) {
    specs.push_back({name + ".gain", {d}, 0.0, true});
    specs.push_back({name + ".bias", {d}, 0.0, false});
  };
  mat("wte", static_cast<size_t>(cfg.V), d, std);
  if (cfg.positional == Positional::Learned) mat("wpe", static_cast<size_t>(cfg.n_max), d, std);
  for (int l = 1; l <= cfg.L; ++l) {
    const LayerRole role = layer_role(cfg, l);
    const std::string p = layer_prefix(l);
    norm(p + "ln1");
    mat(p + "attn.wq", H * dh, d, std);
    if (role.mla) {
      const size_t dr = static_cast<size_t>(cfg.d_r), dc = static_cast<size_t>(cfg.d_c);
      if (dr > 0) mat(p + "attn.wqr", H * dr, d, std);
      mat(p + "attn.wdkv", static_cast<size_t>(role.latent_local), d, std);
      mat(p + "attn.wuk", d, dc, std);
      mat(p + "attn.wuv", d, dc, std);
      if (dr > 0) mat(p + "attn.wkr", dr, d, std);
    } else {
      if (role.k_local > 0) mat(p + "attn.wk", static_cast<size_t>(role.k_local) * dh, d, std);
      if (role.v_local > 0) mat(p + "attn.wv", static_cast<size_t>(role.v_local) * dh, d, std);
    }
    mat(p + "attn.wo", d, H * dh, out_std);
    norm(p + "ln2");
    mat(p + "ffn.w1", static_cast<size_t>(cfg.r), d, std);
    mat(p + "ffn.w2", d, static_cast<size_t>(cfg.r), out_std);
  }
  norm("lnf");
  return specs;
}

template <typename T>
void check_weights(const ModelConfig& cfg, const Weights<T>& w) {
  const auto specs = parameter_specs(cfg);
  for (const auto& s : specs) {
    auto it = w.find(s.name);
    if (it == w.end()) throw ConfigError("missing tensor '" + s.name + "'");
    if (it->second.shape() != s.shape) {
      throw ConfigError("tensor '" + s.name + "' has shape " + it->second.shape_str() + ", config needs " +
                        Tensor<T>::shape_string(s.shape));
    }
  }
  if (w.size() != specs.size()) {
    for (const auto& [name, t] : w) {
      bool known = false;
      for (const auto& s : specs) known = known || s.name == name;
      if (!known) throw ConfigError("unexpected tensor '" + name + "' for variant " + to_string(cfg.variant));
    }
  }
}

template void check_weights<float>(const ModelConfig&, const Weights<float>&);
template void check_weights<double>(const ModelConfig&, const Weights<double>&);

Checkpoint init_weights(const ModelConfig& cfg, uint64_t seed, double std) {
  Checkpoint ck;
  ck.config = cfg;
  Rng rng(seed);
  for (const auto& s : parameter_specs(cfg, std)) {
    if (s.init_std == 0.0) {
      ck.tensors.emplace(s.name, Tensor32(s.shape, s.is_gain ? 1.0f : 0.0f));
    } else {
      ck.tensors.emplace(s.name, rng.normal_tensor<float>(s.shape, s.init_std));
    }
  }
  return ck;
}

ModelConfig counterpart(const ModelConfig& cfg) {
  ModelConfig base = cfg;
  switch (cfg.variant) {
    case VariantKind::SkipV1GQA:
      base.variant = VariantKind::GQA;
      break;
    case VariantKind::SkipV1MLA:
      base.variant = VariantKind::MLA;
      break;
    default:
      base.variant = VariantKind::MHA;
      break;
  }
  return base;
}

namespace {

ParamBreakdown raw_count(const ModelConfig& cfg) {
  ParamBreakdown b;
  for (const auto& s : parameter_specs(cfg)) {
    long n = 1;
    for (size_t e : s.shape) n *= static_cast<long>(e);
    if (s.name == "wte" || s.name == "wpe") {
      b.embedding += n;
    } else if (s.name.find(".attn.") != std::string::npos) {
      b.attention += n;
    } else if (s.name.find(".ffn.") != std::string::npos) {
      b.ffn += n;
    } else {
      b.norm += n;
    }
  }
  b.total = b.embedding + b.attention + b.ffn + b.norm;
  return b;
}

}  // namespace

ParamBreakdown param_count(const ModelConfig& cfg) {
  ParamBreakdown b = raw_count(cfg);
  b.delta_vs_mha = raw_count(counterpart(cfg)).total - b.total;
  return b;
}

template <typename T>
void build_forward(ForwardGraph<T>& g, const ModelConfig& cfg, const Weights<T>& w, const std::vector<TokenId>& tokens,
                   size_t seg_len, bool track_grad) {
  check_weights(cfg, w);
  if (seg_len == 0 || tokens.size() % seg_len != 0) {
    throw DimensionError("forward: " + std::to_string(tokens.size()) + " tokens are not whole sequences of " +
                         std::to_string(seg_len));
  }
  if (seg_len > static_cast<size_t>(cfg.n_max)) {
    throw LengthError("sequence length " + std::to_string(seg_len) + " exceeds n_max=" + std::to_string(cfg.n_max));
  }
  auto& t = g.tape;
  for (const auto& [name, value] : w) g.params[name] = t.leaf(value, track_grad);
  auto P = [&](const std::string& name) {
    auto it = g.params.find(name);
    return it == g.params.end() ? ad::Var{} : it->second;
  };
  const T eps = static_cast<T>(cfg.ln_eps);
  const bool rotary = cfg.positional == Positional::Rotary;

  ad::Var x = ad::embed(t, P("wte"), tokens);
  if (!rotary) x = ad::add(t, x, ad::positions(t, P("wpe"), seg_len, tokens.size()));
  g.embedded = x;
  g.layers.clear();
  for (int l = 1; l <= cfg.L; ++l) {
    const std::string p = layer_prefix(l);
    const LayerRole role = layer_role(cfg, l);
    LayerTrace lt;
    lt.input = x;
    ad::Var xn = ad::layer_norm(t, x, P(p + "ln1.gain"), P(p + "ln1.bias"), eps);
    AttnParams ap{P(p + "attn.wq"),  P(p + "attn.wk"),  P(p + "attn.wv"),  P(p + "attn.wo"), P(p + "attn.wqr"),
                  P(p + "attn.wdkv"), P(p + "attn.wuk"), P(p + "attn.wuv"), P(p + "attn.wkr")};
    AttnSources src;
    if (role.k_source > 0) src.k = g.layers[role.k_source - 1].attn.k;
    if (role.v_source > 0) src.v = g.layers[role.v_source - 1].attn.v;
    if (role.latent_source > 0) src.latent = g.layers[role.latent_source - 1].attn.latent;
    lt.attn = attention_layer(t, role, ap, xn, src, seg_len, rotary);
    x = ad::add(t, x, lt.attn.out);
    ad::Var hn = ad::layer_norm(t, x, P(p + "ln2.gain"), P(p + "ln2.bias"), eps);
    ad::Var f = ad::matmul(t, P(p + "ffn.w2"), ad::relu(t, ad::matmul(t, P(p + "ffn.w1"), hn)));
    x = ad::add(t, x, f);
    lt.output = x;
    g.layers.push_back(lt);
  }
  g.hidden = ad::layer_norm(t, x, P("lnf.gain"), P("lnf.bias"), eps);
  g.logits = ad::matmul(t, P("wte"), g.hidden);
}

template <typename T>
ad::Var attach_loss(ForwardGraph<T>& g, const std::vector<TokenId>& targets) {
  g.loss = ad::cross_entropy(g.tape, g.logits, targets);
  return g.loss;
}

template void build_forward<float>(ForwardGraph<float>&, const ModelConfig&, const Weights<float>&,
                                   const std::vector<TokenId>&, size_t, bool);
template void build_forward<double>(ForwardGraph<double>&, const ModelConfig&, const Weights<double>&,
                                    const std::vector<TokenId>&, size_t, bool);
template ad::Var attach_loss<float>(ForwardGraph<float>&, const std::vector<TokenId>&);
template ad::Var attach_loss<double>(ForwardGraph<double>&, const std::vector<TokenId>&);

Tensor32 forward(const Checkpoint& ck, const std::vector<TokenId>& tokens) {
  if (tokens.size() > static_cast<size_t>(ck.config.n_max)) {
    throw LengthError("sequence length " + std::to_string(tokens.size()) + " exceeds n_max=" +
                      std::to_string(ck.config.n_max));
  }
  ForwardGraph<float> g;
  build_forward(g, ck.config, ck.tensors, tokens, tokens.size(), false);
  return g.tape.value(g.logits);
}

}  // namespace skv1
