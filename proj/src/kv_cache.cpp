// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#include "skv1/kv_cache.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <ostream>

#include "skv1/errors.hpp"

namespace skv1 {

CacheSpec cache_spec(const ModelConfig& cfg) {
  cfg.validate();
  CacheSpec spec;
  spec.variant = cfg.variant;
  spec.elem_bytes = cfg.elem_bytes;
  spec.accounting = cfg.mla_accounting;
  for (int l = 1; l <= cfg.L; ++l) {
    const LayerRole role = layer_role(cfg, l);
    CacheSpec::Layer layer{role.cached_k(), role.cached_v()};
    // Uniform accounting charges layer 1 like every other skip layer.
    if (cfg.variant == VariantKind::SkipV1MLA && l == 1 && cfg.mla_accounting == MlaAccounting::Uniform) {
      layer.k = static_cast<long>(cfg.latent_local()) + cfg.d_r;
    }
    spec.layers.push_back(layer);
  }
  return spec;
}

long elements_per_token(const CacheSpec& spec) {
  long n = 0;
  for (const auto& l : spec.layers) n += l.k + l.v;
  return n;
}

long bytes_per_token(const CacheSpec& spec) { return elements_per_token(spec) * spec.elem_bytes; }

void CacheBuffer::append(const float* row) {
  if (length_ == capacity()) data_.resize(std::max<size_t>(1, 2 * capacity()) * width_);
  std::copy(row, row + width_, data_.begin() + static_cast<std::ptrdiff_t>(length_ * width_));
  ++length_;
}

uint64_t CacheBuffer::checksum() const {
  uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(data_.data());
  for (size_t i = 0; i < length_ * width_ * sizeof(float); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

bool CacheBuffer::operator==(const CacheBuffer& o) const {
  return width_ == o.width_ && length_ == o.length_ &&
         std::memcmp(data_.data(), o.data_.data(), length_ * width_ * sizeof(float)) == 0;
}

DecodeCache::DecodeCache(const ModelConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  const size_t dh = static_cast<size_t>(cfg.d_head());
  for (int l = 1; l <= cfg.L; ++l) {
    const LayerRole role = layer_role(cfg, l);
    LayerState s;
    if (role.mla) {
      s.latent = CacheBuffer(static_cast<size_t>(role.latent_local));
      if (role.d_r > 0) s.rope_k = CacheBuffer(static_cast<size_t>(role.d_r));
    } else {
      if (role.k_local > 0) s.k = CacheBuffer(static_cast<size_t>(role.k_local) * dh);
      if (role.v_local > 0) s.v = CacheBuffer(static_cast<size_t>(role.v_local) * dh);
    }
    layers_.push_back(std::move(s));
  }
}

long DecodeCache::stored_elements_per_token() const {
  long n = 0;
  for (const auto& s : layers_) n += static_cast<long>(s.k.width() + s.v.width() + s.latent.width() + s.rope_k.width());
  return n;
}

long DecodeCache::logical_bytes() const {
  return static_cast<long>(length_) * stored_elements_per_token() * cfg_.elem_bytes;
}

uint64_t DecodeCache::bank_checksum() const {
  const auto& s = layers_.front();
  return cfg_.is_mla() ? s.latent.checksum() : s.v.checksum();
}

bool DecodeCache::operator==(const DecodeCache& o) const {
  if (!(cfg_ == o.cfg_) || length_ != o.length_) return false;
  for (size_t i = 0; i < layers_.size(); ++i) {
    const auto &a = layers_[i], &b = o.layers_[i];
    if (!(a.k == b.k && a.v == b.v && a.latent == b.latent && a.rope_k == b.rope_k)) return false;
  }
  return true;
}

namespace {

using Vec = std::vector<float>;

Vec matvec(const Tensor32& w, const float* x) {
  Vec y(w.rows(), 0.0f);
  for (size_t i = 0; i < w.rows(); ++i) {
    const float* r = w.row(i);
    float s = 0.0f;
    for (size_t k = 0; k < w.cols(); ++k) s += r[k] * x[k];
    y[i] = s;
  }
  return y;
}

Vec norm(const Vec& x, const Tensor32& gain, const Tensor32& bias, float eps) {
  Tensor32 t({x.size()}, std::vector<float>(x));
  return layer_norm(t, gain, bias, eps).storage();
}

void rope_heads(Vec& x, int heads, int dim, size_t pos) {
  for (int h = 0; h < heads; ++h) rope_rotate(x.data() + static_cast<size_t>(h * dim), 1, static_cast<size_t>(dim), pos, 1.0f);
}

// Keys or values of one layer over all cached positions, rows = positions.
struct Materialized {
  size_t width = 0;
  Vec data;
  const float* row(size_t i) const { return data.data() + i * width; }
};

Materialized own_rows(const CacheBuffer& b) {
  Materialized m{b.width(), Vec(b.length() * b.width())};
  for (size_t i = 0; i < b.length(); ++i) std::copy(b.row(i), b.row(i) + b.width(), m.data.begin() + static_cast<std::ptrdiff_t>(i * b.width()));
  return m;
}

Materialized assemble(const Materialized& own, const Materialized* source, int source_layer, const ad::HeadMix& mix,
                      size_t head_dim, size_t n) {
  if (source_layer == 0) return own;
  if (mix.empty()) return *source;
  Materialized m{mix.size() * head_dim, Vec(n * mix.size() * head_dim, 0.0f)};
  for (size_t i = 0; i < n; ++i)
    for (size_t s = 0; s < mix.size(); ++s) {
      float* dst = m.data.data() + i * m.width + s * head_dim;
      for (const auto& term : mix[s]) {
        const float* src = (term.from_bank ? source->row(i) : own.row(i)) + static_cast<size_t>(term.head) * head_dim;
        const float w = static_cast<float>(term.weight);
        for (size_t c = 0; c < head_dim; ++c) dst[c] += w * src[c];
      }
    }
  return m;
}

}  // namespace

Tensor32 decode_step(const Checkpoint& ck, DecodeCache& cache, TokenId token, const LayerHook& hook) {
  const ModelConfig& cfg = cache.cfg_;
  if (!(ck.config == cfg)) throw ConfigError("decode cache was built for a different model configuration");
  if (cache.length_ >= static_cast<size_t>(cfg.n_max)) {
    throw LengthError("decode cache is full at n_max=" + std::to_string(cfg.n_max));
  }
  if (token < 0 || token >= cfg.V) throw IndexError("token id " + std::to_string(token) + " outside vocabulary");
  const size_t pos = cache.length_, n = pos + 1, d = static_cast<size_t>(cfg.d);
  const float eps = static_cast<float>(cfg.ln_eps);
  const bool rotary = cfg.positional == Positional::Rotary;

  Vec x(ck.at("wte").row(static_cast<size_t>(token)), ck.at("wte").row(static_cast<size_t>(token)) + d);
  if (!rotary)
    for (size_t i = 0; i < d; ++i) x[i] += ck.at("wpe")(pos, i);

  std::vector<Materialized> keys, values, latents;
  for (int l = 1; l <= cfg.L; ++l) {
    const std::string p = layer_prefix(l);
    const LayerRole role = layer_role(cfg, l);
    auto& st = cache.layer(l);
    const size_t dh = static_cast<size_t>(role.d_head);
    const Vec xn = norm(x, ck.at(p + "ln1.gain"), ck.at(p + "ln1.bias"), eps);
    Vec q = matvec(ck.at(p + "attn.wq"), xn.data());
    Materialized K, V, C;
    if (role.mla) {
      st.latent.append(matvec(ck.at(p + "attn.wdkv"), xn.data()).data());
      C = own_rows(st.latent);
      if (role.latent_source != 0) {
        const Materialized& src = latents[static_cast<size_t>(role.latent_source - 1)];
        const size_t own = C.width;
        Materialized full{src.width, Vec(n * src.width)};
        for (size_t i = 0; i < n; ++i) {
          std::copy(C.row(i), C.row(i) + own, full.data.begin() + static_cast<std::ptrdiff_t>(i * full.width));
          std::copy(src.row(i) + own, src.row(i) + src.width, full.data.begin() + static_cast<std::ptrdiff_t>(i * full.width + own));
        }
        C = std::move(full);
      }
      const size_t dr = static_cast<size_t>(role.d_r), qk = static_cast<size_t>(role.qk_dim);
      Vec qr;
      if (dr > 0) {
        Vec kr = matvec(ck.at(p + "attn.wkr"), xn.data());
        rope_heads(kr, 1, role.d_r, pos);
        st.rope_k.append(kr.data());
        qr = matvec(ck.at(p + "attn.wqr"), xn.data());
        rope_heads(qr, role.q_heads, role.d_r, pos);
      }
      Vec full_q(static_cast<size_t>(role.q_heads) * qk);
      for (size_t h = 0; h < static_cast<size_t>(role.q_heads); ++h) {
        std::copy(q.begin() + static_cast<std::ptrdiff_t>(h * dh), q.begin() + static_cast<std::ptrdiff_t>((h + 1) * dh),
                  full_q.begin() + static_cast<std::ptrdiff_t>(h * qk));
        if (dr > 0) std::copy(qr.begin() + static_cast<std::ptrdiff_t>(h * dr), qr.begin() + static_cast<std::ptrdiff_t>((h + 1) * dr),
                              full_q.begin() + static_cast<std::ptrdiff_t>(h * qk + dh));
      }
      q = std::move(full_q);
      const size_t heads = static_cast<size_t>(role.q_heads);
      K = {heads * qk, Vec(n * heads * qk)};
      V = {heads * dh, Vec(n * heads * dh)};
      for (size_t i = 0; i < n; ++i) {
        const Vec kc = matvec(ck.at(p + "attn.wuk"), C.row(i));
        const Vec vc = matvec(ck.at(p + "attn.wuv"), C.row(i));
        std::copy(vc.begin(), vc.end(), V.data.begin() + static_cast<std::ptrdiff_t>(i * V.width));
        for (size_t h = 0; h < heads; ++h) {
          float* dst = K.data.data() + i * K.width + h * qk;
          std::copy(kc.begin() + static_cast<std::ptrdiff_t>(h * dh), kc.begin() + static_cast<std::ptrdiff_t>((h + 1) * dh), dst);
          if (dr > 0) std::copy(st.rope_k.row(i), st.rope_k.row(i) + dr, dst + dh);
        }
      }
    } else {
      if (rotary) rope_heads(q, role.q_heads, role.d_head, pos);
      if (role.k_local > 0) {
        Vec k = matvec(ck.at(p + "attn.wk"), xn.data());
        if (rotary) rope_heads(k, role.k_local, role.d_head, pos);
        st.k.append(k.data());
      }
      if (role.v_local > 0) st.v.append(matvec(ck.at(p + "attn.wv"), xn.data()).data());
      const Materialized* ks = role.k_source > 0 ? &keys[static_cast<size_t>(role.k_source - 1)] : nullptr;
      const Materialized* vs = role.v_source > 0 ? &values[static_cast<size_t>(role.v_source - 1)] : nullptr;
      K = assemble(own_rows(st.k), ks, role.k_source, role.k_mix, dh, n);
      V = assemble(own_rows(st.v), vs, role.v_source, role.v_mix, dh, n);
    }

    const size_t qk = static_cast<size_t>(role.qk_dim), vd = static_cast<size_t>(role.v_dim);
    const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(role.qk_dim)));
    Vec heads(static_cast<size_t>(role.q_heads) * vd, 0.0f), s(n);
    for (size_t h = 0; h < static_cast<size_t>(role.q_heads); ++h) {
      const size_t slot = static_cast<size_t>(role.kv_of_query[h]);
      float mx = -INFINITY;
      for (size_t i = 0; i < n; ++i) {
        const float* kr = K.row(i) + slot * qk;
        float dot = 0.0f;
        for (size_t c = 0; c < qk; ++c) dot += kr[c] * q[h * qk + c];
        s[i] = dot * scale;
        mx = std::max(mx, s[i]);
      }
      float z = 0.0f;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (size_t i = 0; i < n; ++i) {
        const float* vr = V.row(i) + slot * vd;
        const float w = s[i] / z;
        for (size_t c = 0; c < vd; ++c) heads[h * vd + c] += w * vr[c];
      }
    }
    const Vec y = matvec(ck.at(p + "attn.wo"), heads.data());
    for (size_t i = 0; i < d; ++i) x[i] += y[i];
    const Vec hn = norm(x, ck.at(p + "ln2.gain"), ck.at(p + "ln2.bias"), eps);
    Vec a = matvec(ck.at(p + "ffn.w1"), hn.data());
    for (auto& e : a) e = std::max(e, 0.0f);
    const Vec f = matvec(ck.at(p + "ffn.w2"), a.data());
    for (size_t i = 0; i < d; ++i) x[i] += f[i];
    keys.push_back(std::move(K));
    values.push_back(std::move(V));
    latents.push_back(std::move(C));
    if (hook) hook(l, cache);
  }
  cache.length_ = n;
  const Vec xf = norm(x, ck.at("lnf.gain"), ck.at("lnf.bias"), eps);
  return Tensor32({static_cast<size_t>(cfg.V)}, matvec(ck.at("wte"), xf.data()));
}

Tensor32 decode_sequence(const Checkpoint& ck, const std::vector<TokenId>& tokens) {
  DecodeCache cache(ck.config);
  Tensor32 out = Tensor32::matrix(static_cast<size_t>(ck.config.V), tokens.size());
  for (size_t j = 0; j < tokens.size(); ++j) {
    const Tensor32 logits = decode_step(ck, cache, tokens[j]);
    for (size_t i = 0; i < logits.size(); ++i) out(i, j) = logits[i];
  }
  return out;
}

std::vector<CacheRow> cache_report(const std::vector<ModelConfig>& configs, const std::vector<long>& seq_lens) {
  if (seq_lens.empty()) throw ConfigError("cache report needs at least one sequence length");
  std::vector<CacheRow> rows;
  for (const auto& cfg : configs) {
    const long per = bytes_per_token(cfg);
    for (long n : seq_lens) {
      if (n < 0) throw ConfigError("sequence length must be non-negative, got " + std::to_string(n));
      rows.push_back({to_string(cfg.variant), cfg.L, cfg.d, cfg.H, cfg.elem_bytes, n, n * per, per});
    }
  }
  return rows;
}

void write_cache_csv(std::ostream& os, const std::vector<CacheRow>& rows) {
  os << kCacheCsvHeader << "\n";
  for (const auto& r : rows) {
    os << r.variant << ',' << r.L << ',' << r.d << ',' << r.H << ',' << r.elem_bytes << ',' << r.seq_len << ','
       << r.kv_bytes_total << ',' << r.kv_bytes_per_token << "\n";
  }
}

std::vector<ModelConfig> cache_preset(const std::string& name) {
  ModelConfig base;
  base.L = 24;
  base.d = 1024;
  base.H = 16;
  base.r = 4096;
  base.V = 50257;
  base.n_max = 1024;
  auto with = [&](VariantKind v) {
    ModelConfig c = base;
    c.variant = v;
    return c;
  };
  if (name == "table3-gqa") {
    base.groups = 8;
    base.elem_bytes = 4;
    return {with(VariantKind::GQA), with(VariantKind::SkipV1GQA)};
  }
  if (name == "table3-mla") {
    base.d_c = 256;
    base.d_r = 32;
    base.elem_bytes = 2;
    return {with(VariantKind::MLA), with(VariantKind::SkipV1MLA)};
  }
  if (name == "slope") return {with(VariantKind::MHA), with(VariantKind::SkipV1)};
  throw ConfigError("unknown cache preset '" + name + "' (expected table3-gqa, table3-mla or slope)");
}

}  // namespace skv1
