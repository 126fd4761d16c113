// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#include "skv1/config.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "skv1/errors.hpp"

namespace skv1 {

namespace {

template <typename E>
struct NameTable {
  std::vector<std::pair<E, const char*>> entries;

  std::string name(E e) const {
    for (const auto& [k, v] : entries)
      if (k == e) return v;
    return "?";
  }

  E parse(const std::string& s, const char* what) const {
    for (const auto& [k, v] : entries)
      if (s == v) return k;
    std::string options;
    for (const auto& [k, v] : entries) options += std::string(options.empty() ? "" : ", ") + v;
    throw ConfigError(std::string("unknown ") + what + " '" + s + "' (expected one of: " + options + ")");
  }
};

const NameTable<VariantKind>& variant_names() {
  static const NameTable<VariantKind> t{{{VariantKind::MHA, "mha"},
                                         {VariantKind::SkipV1, "skipv1"},
                                         {VariantKind::ResFormer, "resformer"},
                                         {VariantKind::GQA, "gqa"},
                                         {VariantKind::SkipV1GQA, "skipv1-gqa"},
                                         {VariantKind::MLA, "mla"},
                                         {VariantKind::SkipV1MLA, "skipv1-mla"},
                                         {VariantKind::YOCOV, "yoco-v"},
                                         {VariantKind::CLAV, "cla-v"},
                                         {VariantKind::SkipKV1, "skipkv1"},
                                         {VariantKind::SkipV1YOCO, "skipv1-yoco"}}};
  return t;
}

const NameTable<HeadInjection>& injection_names() {
  static const NameTable<HeadInjection> t{{{HeadInjection::SecondHalf, "second-half"},
                                           {HeadInjection::Pooling, "pooling"},
                                           {HeadInjection::Dynamic, "dynamic"},
                                           {HeadInjection::OddEven, "odd-even"},
                                           {HeadInjection::SkipV1PlusRes, "skipv1-plus-res"}}};
  return t;
}

const NameTable<Positional>& positional_names() {
  static const NameTable<Positional> t{{{Positional::Learned, "learned"}, {Positional::Rotary, "rotary"}}};
  return t;
}

const NameTable<MlaAccounting>& accounting_names() {
  static const NameTable<MlaAccounting> t{
      {{MlaAccounting::Uniform, "uniform"}, {MlaAccounting::Layer1Full, "layer1-full"}}};
  return t;
}

bool uses_ratio(VariantKind v) {
  return v == VariantKind::SkipV1 || v == VariantKind::SkipV1GQA || v == VariantKind::SkipV1MLA ||
         v == VariantKind::SkipKV1 || v == VariantKind::SkipV1YOCO;
}

}  // namespace

int parse_int(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const long v = std::stol(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return static_cast<int>(v);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' expects an integer, got '" + value + "'");
  }
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' expects a number, got '" + value + "'");
  }
}

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

KeyValues parse_key_values(const std::string& text) {
  KeyValues out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + " lacks '='");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

const std::vector<VariantKind>& all_variants() {
  static const std::vector<VariantKind> v{VariantKind::MHA,       VariantKind::SkipV1,    VariantKind::ResFormer,
                                          VariantKind::GQA,       VariantKind::SkipV1GQA, VariantKind::MLA,
                                          VariantKind::SkipV1MLA, VariantKind::YOCOV,     VariantKind::CLAV,
                                          VariantKind::SkipKV1,   VariantKind::SkipV1YOCO};
  return v;
}

std::string to_string(VariantKind v) { return variant_names().name(v); }
std::string to_string(HeadInjection v) { return injection_names().name(v); }
std::string to_string(Positional v) { return positional_names().name(v); }
std::string to_string(MlaAccounting v) { return accounting_names().name(v); }
VariantKind parse_variant(const std::string& s) { return variant_names().parse(s, "variant"); }
HeadInjection parse_injection(const std::string& s) { return injection_names().parse(s, "injection"); }
Positional parse_positional(const std::string& s) { return positional_names().parse(s, "positional"); }
MlaAccounting parse_mla_accounting(const std::string& s) { return accounting_names().parse(s, "mla accounting"); }

int local_head_count(int heads, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw ConfigError("skip ratio " + format_real(ratio) + " outside [0, 1)");
  }
  if (ratio == 0.5 && heads % 2 != 0) {
    throw ConfigError("skip ratio 0.5 needs an even head count, got " + std::to_string(heads));
  }
  const int local = static_cast<int>(std::lround((1.0 - ratio) * heads));
  if (local < 1) throw ConfigError("skip ratio " + format_real(ratio) + " leaves no local heads");
  return std::min(local, heads);
}

int ModelConfig::latent_local() const {
  if (variant != VariantKind::SkipV1MLA) return d_c;
  const double rows = (1.0 - ratio) * d_c;
  if (std::abs(rows - std::round(rows)) > 1e-9) {
    throw ConfigError("latent width " + std::to_string(d_c) + " does not split at skip ratio " + format_real(ratio));
  }
  const int local = static_cast<int>(std::lround(rows));
  if (local < 1) throw ConfigError("skip ratio leaves no local latent rows");
  return local;
}

SkipPlan select_skip_heads(int heads, double ratio, int layer, HeadInjection injection) {
  const int local = local_head_count(heads, ratio);
  if (layer < 2) throw ConfigError("value skipping applies from layer 2, got layer " + std::to_string(layer));
  const int skip = heads - local;
  SkipPlan plan;
  plan.local = local;
  plan.mix.assign(static_cast<size_t>(heads), {});
  auto local_slot = [&](int slot, int head) { plan.mix[slot] = {{false, head, 1.0}}; };
  auto bank_slot = [&](int slot, int head) { plan.mix[slot] = {{true, head, 1.0}}; };
  switch (injection) {
    case HeadInjection::SecondHalf:
      for (int s = 0; s < heads; ++s) s < local ? local_slot(s, s) : bank_slot(s, s);
      break;
    case HeadInjection::SkipV1PlusRes:
      for (int s = 0; s < heads; ++s) {
        if (s < local) {
          plan.mix[s] = {{false, s, 0.5}, {true, s, 0.5}};
        } else {
          bank_slot(s, s);
        }
      }
      break;
    case HeadInjection::OddEven: {
      const int first = layer % 2 == 1 ? 0 : heads - skip;
      for (int s = 0; s < local; ++s) local_slot(s, s);
      for (int j = 0; j < skip; ++j) bank_slot(local + j, first + j);
      break;
    }
    case HeadInjection::Pooling:
      for (int s = 0; s < local; ++s) local_slot(s, s);
      for (int j = 0; j < skip; ++j) plan.mix[local + j] = {{true, j, 0.5}, {true, heads - skip + j, 0.5}};
      break;
    case HeadInjection::Dynamic: {
      // Layer i places bank head (i + j) mod H at slot (i + H/2 + j) mod H; local heads fill the rest in order.
      std::vector<bool> taken(static_cast<size_t>(heads), false);
      for (int j = 0; j < skip; ++j) {
        const int slot = (layer + heads / 2 + j) % heads;
        bank_slot(slot, (layer + j) % heads);
        taken[slot] = true;
      }
      int next = 0;
      for (int s = 0; s < heads; ++s)
        if (!taken[s]) local_slot(s, next++);
      break;
    }
  }
  return plan;
}

long LayerRole::cached_k() const { return mla ? static_cast<long>(latent_local) + d_r : static_cast<long>(k_local) * d_head; }
long LayerRole::cached_v() const { return mla ? 0 : static_cast<long>(v_local) * d_head; }

LayerRole layer_role(const ModelConfig& cfg, int layer) {
  if (layer < 1 || layer > cfg.L) throw ConfigError("layer " + std::to_string(layer) + " outside 1.." + std::to_string(cfg.L));
  LayerRole role;
  role.layer = layer;
  role.q_heads = cfg.H;
  role.kv_heads = cfg.kv_heads();
  role.d_head = cfg.d_head();
  role.qk_dim = cfg.d_head();
  role.v_dim = cfg.d_head();
  role.kv_of_query.resize(static_cast<size_t>(cfg.H));
  const int per_group = cfg.H / role.kv_heads;
  for (int h = 0; h < cfg.H; ++h) role.kv_of_query[h] = h / per_group;
  role.k_local = role.kv_heads;
  role.v_local = role.kv_heads;

  auto skip_values = [&](int heads) {
    SkipPlan plan = select_skip_heads(heads, cfg.ratio, layer, cfg.injection);
    role.v_local = plan.local;
    role.v_source = 1;
    role.v_mix = std::move(plan.mix);
  };

  switch (cfg.variant) {
    case VariantKind::MHA:
    case VariantKind::GQA:
      break;
    case VariantKind::SkipV1:
    case VariantKind::SkipV1GQA:
      if (layer >= 2) skip_values(role.kv_heads);
      break;
    case VariantKind::ResFormer:
      if (layer >= 2) {
        role.v_source = 1;
        role.v_mix.resize(static_cast<size_t>(cfg.H));
        for (int h = 0; h < cfg.H; ++h) role.v_mix[h] = {{false, h, cfg.lambda}, {true, h, 1.0 - cfg.lambda}};
      }
      break;
    case VariantKind::MLA:
    case VariantKind::SkipV1MLA:
      role.mla = true;
      role.d_r = cfg.d_r;
      role.qk_dim = cfg.d_head() + cfg.d_r;
      role.k_local = 0;
      role.v_local = 0;
      role.latent_local = cfg.d_c;
      if (cfg.variant == VariantKind::SkipV1MLA && layer >= 2) {
        role.latent_local = cfg.latent_local();
        role.latent_source = 1;
      }
      break;
    case VariantKind::YOCOV:
      if (layer > cfg.mid_layer()) {
        role.v_local = 0;
        role.v_source = cfg.mid_layer();
      }
      break;
    case VariantKind::CLAV: {
      const int first = cfg.cla_period * ((layer - 1) / cfg.cla_period) + 1;
      if (layer != first) {
        role.v_local = 0;
        role.v_source = first;
      }
      break;
    }
    case VariantKind::SkipKV1:
      if (layer >= 2) {
        skip_values(cfg.H);
        role.k_local = role.v_local;
        role.k_source = 1;
        role.k_mix = role.v_mix;
      }
      break;
    case VariantKind::SkipV1YOCO:
      if (layer >= 2) skip_values(cfg.H);
      if (layer > cfg.mid_layer()) {
        role.k_local = 0;
        role.k_source = cfg.mid_layer();
      }
      break;
  }
  return role;
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(L >= 1, "L must be at least 1");
  need(d >= 1 && H >= 1, "d and H must be positive");
  need(d % H == 0, "d=" + std::to_string(d) + " is not divisible by H=" + std::to_string(H));
  need(r >= 1, "FFN width r must be positive");
  need(V >= 1, "vocabulary size must be positive");
  need(n_max >= 1, "n_max must be positive");
  need(elem_bytes >= 1, "elem_bytes must be positive");
  need(ln_eps > 0, "ln_eps must be positive");
  if (is_gqa()) {
    need(groups >= 1 && H % groups == 0,
         "GQA groups=" + std::to_string(groups) + " must divide H=" + std::to_string(H));
  }
  if (uses_ratio(variant)) local_head_count(variant == VariantKind::SkipV1GQA ? groups : H, ratio);
  if (is_mla()) {
    need(d_c >= 1 && d_c <= d, "MLA latent width d_c must lie in [1, d]");
    need(d_r >= 0, "MLA rotary key width must be non-negative");
    (void)latent_local();
  }
  if (variant == VariantKind::CLAV) need(cla_period >= 2, "CLA period must be at least 2");
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "L=" << L << "\n"
     << "d=" << d << "\n"
     << "H=" << H << "\n"
     << "r=" << r << "\n"
     << "V=" << V << "\n"
     << "n_max=" << n_max << "\n"
     << "variant=" << to_string(variant) << "\n"
     << "ratio=" << format_real(ratio) << "\n"
     << "injection=" << to_string(injection) << "\n"
     << "positional=" << to_string(positional) << "\n"
     << "elem_bytes=" << elem_bytes << "\n"
     << "lambda=" << format_real(lambda) << "\n"
     << "groups=" << groups << "\n"
     << "d_c=" << d_c << "\n"
     << "d_r=" << d_r << "\n"
     << "cla_period=" << cla_period << "\n"
     << "mla_accounting=" << to_string(mla_accounting) << "\n"
     << "ln_eps=" << format_real(ln_eps) << "\n";
  return os.str();
}

void ModelConfig::set(const std::string& key, const std::string& value) {
  if (key == "L") L = parse_int(key, value);
  else if (key == "d") d = parse_int(key, value);
  else if (key == "H") H = parse_int(key, value);
  else if (key == "r") r = parse_int(key, value);
  else if (key == "V") V = parse_int(key, value);
  else if (key == "n_max") n_max = parse_int(key, value);
  else if (key == "variant") variant = parse_variant(value);
  else if (key == "ratio") ratio = parse_real(key, value);
  else if (key == "injection") injection = parse_injection(value);
  else if (key == "positional") positional = parse_positional(value);
  else if (key == "elem_bytes") elem_bytes = parse_int(key, value);
  else if (key == "lambda") lambda = parse_real(key, value);
  else if (key == "groups") groups = parse_int(key, value);
  else if (key == "d_c") d_c = parse_int(key, value);
  else if (key == "d_r") d_r = parse_int(key, value);
  else if (key == "cla_period") cla_period = parse_int(key, value);
  else if (key == "mla_accounting") mla_accounting = parse_mla_accounting(value);
  else if (key == "ln_eps") ln_eps = parse_real(key, value);
  else throw ConfigError("unknown model config key '" + key + "'");
}

ModelConfig ModelConfig::parse(const std::string& text) {
  ModelConfig cfg;
  for (const auto& [k, v] : parse_key_values(text)) cfg.set(k, v);
  cfg.validate();
  return cfg;
}

}  // namespace skv1
