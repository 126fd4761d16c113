// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#define EIGEN_DONT_PARALLELIZE
#include "skv1/harness.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <map>
#include <numeric>
#include <sstream>

#include "skv1/errors.hpp"
#include "skv1/rng.hpp"

namespace skv1 {

namespace {

uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr uint64_t kSplitSalt = 0x5b17c0de;

std::vector<size_t> evenly_spaced(const std::vector<size_t>& all, size_t count) {
  if (count == 0 || count >= all.size()) return all;
  std::vector<size_t> out(count);
  for (size_t i = 0; i < count; ++i) out[i] = all[i * all.size() / count];
  return out;
}

// Concatenated inputs and next-token targets of windows of seq_len + 1 tokens.
void gather(const TokenStream& data, const std::vector<size_t>& starts, size_t seq_len, std::vector<TokenId>& tokens,
            std::vector<TokenId>& targets) {
  tokens.clear();
  targets.clear();
  for (size_t s : starts) {
    tokens.insert(tokens.end(), data.tokens.begin() + static_cast<long>(s),
                  data.tokens.begin() + static_cast<long>(s + seq_len));
    targets.insert(targets.end(), data.tokens.begin() + static_cast<long>(s + 1),
                   data.tokens.begin() + static_cast<long>(s + seq_len + 1));
  }
}

constexpr size_t kEvalBatch = 8;

// Summed cross-entropy over windows, batched in a fixed order.
double summed_loss(const Checkpoint& ck, const TokenStream& data, const std::vector<size_t>& starts, size_t seq_len) {
  double total = 0;
  std::vector<TokenId> tokens, targets;
  for (size_t b = 0; b < starts.size(); b += kEvalBatch) {
    const std::vector<size_t> part(starts.begin() + static_cast<long>(b),
                                   starts.begin() + static_cast<long>(std::min(starts.size(), b + kEvalBatch)));
    gather(data, part, seq_len, tokens, targets);
    ForwardGraph<float> g;
    build_forward(g, ck.config, ck.tensors, tokens, seq_len, false);
    total += static_cast<double>(g.tape.value(attach_loss(g, targets))[0]) * static_cast<double>(targets.size());
  }
  return total;
}

std::string format(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

double cosine(const double* a, const double* b, size_t n) {
  double ab = 0, aa = 0, bb = 0;
  for (size_t i = 0; i < n; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) return 0;
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

// Symmetric cosine matrix of the given vectors; the diagonal is 1 by definition.
Tensor64 cosine_matrix(const std::vector<std::vector<double>>& vecs) {
  const size_t n = vecs.size();
  Tensor64 m = Tensor64::matrix(n, n);
  for (size_t i = 0; i < n; ++i) {
    m(i, i) = 1.0;
    for (size_t j = i + 1; j < n; ++j) m(i, j) = m(j, i) = cosine(vecs[i].data(), vecs[j].data(), vecs[i].size());
  }
  return m;
}

void check_layer(const ModelConfig& cfg, int layer) {
  if (layer < 1 || layer > cfg.L) {
    throw ConfigError("layer " + std::to_string(layer) + " outside [1, " + std::to_string(cfg.L) + "]");
  }
}

}  // namespace

size_t TokenStream::validation_count() const {
  return static_cast<size_t>(std::count(validation.begin(), validation.end(), uint8_t{1}));
}

double TokenStream::validation_fraction() const {
  return tokens.empty() ? 0.0 : static_cast<double>(validation_count()) / static_cast<double>(tokens.size());
}

TokenStream tokenize_bytes(const std::string& bytes, double validation_fraction) {
  if (!(validation_fraction >= 0 && validation_fraction < 1)) {
    throw ConfigError("validation fraction must lie in [0, 1)");
  }
  TokenStream s;
  s.tokens.reserve(bytes.size());
  for (unsigned char c : bytes) s.tokens.push_back(static_cast<TokenId>(c));
  s.validation.assign(bytes.size(), 0);
  const size_t blocks = (bytes.size() + kSplitBlock - 1) / kSplitBlock;
  for (size_t g0 = 0; g0 < blocks; g0 += kSplitGroup) {
    const size_t g1 = std::min(blocks, g0 + kSplitGroup);
    std::vector<size_t> order(g1 - g0);
    std::iota(order.begin(), order.end(), g0);
    std::sort(order.begin(), order.end(), [](size_t a, size_t b) {
      const uint64_t ha = mix64(a ^ kSplitSalt), hb = mix64(b ^ kSplitSalt);
      return ha != hb ? ha < hb : a < b;
    });
    const auto held = static_cast<size_t>(std::llround(validation_fraction * static_cast<double>(order.size())));
    for (size_t k = 0; k < held; ++k) {
      const size_t begin = order[k] * kSplitBlock;
      const size_t end = std::min(bytes.size(), begin + kSplitBlock);
      std::fill(s.validation.begin() + static_cast<long>(begin), s.validation.begin() + static_cast<long>(end), uint8_t{1});
    }
  }
  return s;
}

TokenStream ingest(const std::string& path, double validation_fraction) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read corpus '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("error while reading corpus '" + path + "'");
  if (bytes.empty()) throw DataError("corpus '" + path + "' is empty");
  return tokenize_bytes(bytes, validation_fraction);
}

std::vector<size_t> window_starts(const TokenStream& s, bool validation, size_t len, bool overlapping) {
  std::vector<size_t> out;
  if (len == 0) return out;
  const uint8_t want = validation ? 1 : 0;
  size_t run = 0;  // length of the current same-split run ending at i
  for (size_t i = 0; i < s.tokens.size(); ++i) {
    run = s.validation[i] == want ? run + 1 : 0;
    if (run < len) continue;
    const size_t start = i + 1 - len;
    if (overlapping || out.empty() || start >= out.back() + len) out.push_back(start);
  }
  return out;
}

void TrainConfig::validate() const {
  model.validate();
  if (steps < 1) throw ConfigError("steps must be at least 1");
  if (batch < 1) throw ConfigError("batch must be at least 1");
  if (seq_len < 1 || seq_len > model.n_max) throw ConfigError("seq_len must lie in [1, n_max]");
  if (!(warmup >= 0 && warmup < 1)) throw ConfigError("warmup fraction must lie in [0, 1)");
  if (!(floor > 0 && floor <= 1)) throw ConfigError("floor fraction must lie in (0, 1]");
  if (!(lr >= 0)) throw ConfigError("lr must be non-negative");
  if (!(weight_decay >= 0) || !(clip >= 0)) throw ConfigError("weight_decay and clip must be non-negative");
  if (!(val_fraction > 0 && val_fraction < 1)) throw ConfigError("val_fraction must lie in (0, 1)");
  if (model.V < 256) throw ConfigError("byte tokens need V >= 256");
  if (eval_every < 1 || eval_windows < 0) throw ConfigError("eval_every must be positive and eval_windows non-negative");
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  if (key == "steps") steps = parse_int(key, value);
  else if (key == "batch") batch = parse_int(key, value);
  else if (key == "seq_len") seq_len = parse_int(key, value);
  else if (key == "lr") lr = parse_real(key, value);
  else if (key == "warmup") warmup = parse_real(key, value);
  else if (key == "floor") floor = parse_real(key, value);
  else if (key == "weight_decay") weight_decay = parse_real(key, value);
  else if (key == "clip") clip = parse_real(key, value);
  else if (key == "beta1") beta1 = parse_real(key, value);
  else if (key == "beta2") beta2 = parse_real(key, value);
  else if (key == "eps") eps = parse_real(key, value);
  else if (key == "seed") seed = static_cast<uint64_t>(parse_int(key, value));
  else if (key == "corpus") corpus = value;
  else if (key == "val_fraction") val_fraction = parse_real(key, value);
  else if (key == "eval_every") eval_every = parse_int(key, value);
  else if (key == "eval_windows") eval_windows = parse_int(key, value);
  else model.set(key, value);
}

std::string TrainConfig::to_text() const {
  std::ostringstream s;
  s << "steps=" << steps << "\nbatch=" << batch << "\nseq_len=" << seq_len << "\nlr=" << format_real(lr)
    << "\nwarmup=" << format_real(warmup) << "\nfloor=" << format_real(floor)
    << "\nweight_decay=" << format_real(weight_decay) << "\nclip=" << format_real(clip)
    << "\nbeta1=" << format_real(beta1) << "\nbeta2=" << format_real(beta2) << "\neps=" << format_real(eps)
    << "\nseed=" << seed << "\ncorpus=" << corpus << "\nval_fraction=" << format_real(val_fraction)
    << "\neval_every=" << eval_every << "\neval_windows=" << eval_windows << "\n";
  return s.str() + model.to_text();
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig cfg;
  for (const auto& [k, v] : parse_key_values(text)) cfg.set(k, v);
  cfg.validate();
  return cfg;
}

double lr_at(const TrainConfig& cfg, int step) {
  const int warm = static_cast<int>(std::lround(cfg.warmup * cfg.steps));
  if (step < warm) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  const int span = std::max(1, cfg.steps - warm);
  const double progress = std::min(1.0, static_cast<double>(step - warm) / static_cast<double>(span));
  const double pi = std::acos(-1.0);
  return cfg.lr * (cfg.floor + (1 - cfg.floor) * 0.5 * (1 + std::cos(pi * progress)));
}

void write_echo(std::ostream& os, const Echo& echo) {
  for (const auto& [k, v] : echo) os << "# " << k << "=" << v << "\n";
}

Echo echo_of(const std::string& key_value_text) { return parse_key_values(key_value_text); }

const char* const kRunLogHeader = "step,lr,train_loss,val_loss,wall_ms";

void write_run_log(std::ostream& os, const RunLog& log, bool include_wall) {
  write_echo(os, log.echo);
  os << (include_wall ? kRunLogHeader : "step,lr,train_loss,val_loss") << "\n";
  for (const auto& r : log.rows) {
    os << r.step << "," << format(r.lr) << "," << format(r.train_loss) << "," << format(r.val_loss);
    if (include_wall) os << "," << format(r.wall_ms);
    os << "\n";
  }
}

RunLog read_run_log(std::istream& is) {
  RunLog log;
  std::string line;
  bool header = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line.rfind("# ", 0) == 0) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw DataError("run log echo line lacks '=': " + line);
      log.echo.emplace_back(line.substr(2, eq - 2), line.substr(eq + 1));
      continue;
    }
    if (!header) {
      if (line.rfind("step,lr,train_loss,val_loss", 0) != 0) throw DataError("run log header missing");
      header = true;
      continue;
    }
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() < 4) throw DataError("run log row has too few fields: " + line);
    RunRow r;
    try {
      r.step = std::stoi(f[0]);
      r.lr = std::stod(f[1]);
      r.train_loss = std::stod(f[2]);
      r.val_loss = std::stod(f[3]);
      if (f.size() > 4) r.wall_ms = std::stod(f[4]);
    } catch (const std::exception&) {
      throw DataError("unparseable run log row: " + line);
    }
    if (!log.rows.empty() && r.step <= log.rows.back().step) throw DataError("run log steps must increase");
    log.rows.push_back(r);
  }
  if (!header) throw DataError("run log header missing");
  return log;
}

EvalResult evaluate(const Checkpoint& ck, const TokenStream& data, size_t seq_len, size_t max_windows) {
  const auto starts = evenly_spaced(window_starts(data, true, seq_len + 1, false), max_windows);
  if (starts.empty()) throw DataError("no validation window of " + std::to_string(seq_len + 1) + " bytes");
  EvalResult r;
  r.tokens = starts.size() * seq_len;
  r.loss = summed_loss(ck, data, starts, seq_len) / static_cast<double>(r.tokens);
  r.perplexity = std::exp(r.loss);
  return r;
}

TrainResult train(const TrainConfig& cfg_in, const TokenStream& data, const Checkpoint* init) {
  TrainConfig cfg = cfg_in;
  if (init) cfg.model = init->config;
  cfg.validate();
  const auto seq = static_cast<size_t>(cfg.seq_len);
  const auto train_starts = window_starts(data, false, seq + 1, true);
  const auto val_all = window_starts(data, true, seq + 1, false);
  if (train_starts.empty() || val_all.empty()) {
    throw DataError("corpus has no training or validation window of " + std::to_string(seq + 1) + " bytes");
  }
  const auto val_periodic = evenly_spaced(val_all, static_cast<size_t>(cfg.eval_windows));
  const auto val_loss = [&](const Checkpoint& ck, const std::vector<size_t>& starts) {
    return summed_loss(ck, data, starts, seq) / static_cast<double>(starts.size() * seq);
  };

  TrainResult out;
  out.checkpoint = init ? *init : init_weights(cfg.model, cfg.seed);
  Checkpoint& ck = out.checkpoint;
  out.log.echo = echo_of(cfg.to_text());
  out.log.echo.emplace_back("train_windows", std::to_string(train_starts.size()));
  out.log.echo.emplace_back("val_windows", std::to_string(val_all.size()));
  const auto t0 = std::chrono::steady_clock::now();
  const auto elapsed_ms = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  };
  const double nan = std::nan("");
  out.initial_val_loss = val_loss(ck, val_all);
  out.log.rows.push_back({0, 0.0, nan, out.initial_val_loss, elapsed_ms()});

  std::map<std::string, Tensor32> m, v;
  for (const auto& [name, t] : ck.tensors) {
    m.emplace(name, Tensor32(t.shape()));
    v.emplace(name, Tensor32(t.shape()));
  }
  Rng rng(Rng::stream_seed(cfg.seed, 1));
  std::vector<size_t> batch(static_cast<size_t>(cfg.batch));
  std::vector<TokenId> tokens, targets;
  double b1t = 1, b2t = 1;
  for (int step = 1; step <= cfg.steps; ++step) {
    const double lr = lr_at(cfg, step - 1);
    for (auto& s : batch) s = train_starts[rng.below(train_starts.size())];
    gather(data, batch, seq, tokens, targets);
    ForwardGraph<float> g;
    build_forward(g, ck.config, ck.tensors, tokens, seq, true);
    const ad::Var loss = attach_loss(g, targets);
    const double loss_value = g.tape.value(loss)[0];
    if (!std::isfinite(loss_value)) {
      throw OptimizationError("training loss is not finite at step " + std::to_string(step), step);
    }
    g.tape.backward(loss);
    double norm2 = 0;
    for (const auto& [name, var] : g.params)
      for (float x : g.tape.grad(var).storage()) norm2 += static_cast<double>(x) * x;
    const double norm = std::sqrt(norm2);
    const float gscale = cfg.clip > 0 && norm > cfg.clip ? static_cast<float>(cfg.clip / norm) : 1.0f;
    b1t *= cfg.beta1;
    b2t *= cfg.beta2;
    const auto b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
    const auto c1 = static_cast<float>(1 - b1t), c2 = static_cast<float>(1 - b2t);
    const auto lrf = static_cast<float>(lr), eps = static_cast<float>(cfg.eps);
    for (const auto& [name, var] : g.params) {
      const Tensor32& grad = g.tape.grad(var);
      Tensor32& w = ck.at(name);
      Tensor32& mm = m.at(name);
      Tensor32& vv = v.at(name);
      const float decay = w.rank() >= 2 ? static_cast<float>(lr * cfg.weight_decay) : 0.0f;
      for (size_t i = 0; i < w.size(); ++i) {
        const float gi = grad.empty() ? 0.0f : grad[i] * gscale;
        mm[i] = b1 * mm[i] + (1 - b1) * gi;
        vv[i] = b2 * vv[i] + (1 - b2) * gi * gi;
        w[i] -= decay * w[i];
        w[i] -= lrf * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + eps);
      }
    }
    RunRow row{step, lr, loss_value, nan, 0};
    if (step == cfg.steps) {
      out.final_val_loss = val_loss(ck, val_all);
      row.val_loss = out.final_val_loss;
    } else if (step % cfg.eval_every == 0) {
      row.val_loss = val_loss(ck, val_periodic);
    }
    row.wall_ms = elapsed_ms();
    out.log.rows.push_back(row);
  }
  return out;
}

TrainResult train(const TrainConfig& cfg) {
  cfg.validate();
  return train(cfg, ingest(cfg.corpus, cfg.val_fraction));
}

namespace {

struct Features {
  Tensor32 x;  // d × N
  std::vector<TokenId> targets;
};

Features layer_features(const Checkpoint& ck, const TokenStream& data, const std::vector<size_t>& starts,
                        size_t seq_len, int layer) {
  Features f;
  std::vector<Tensor32> parts;
  std::vector<TokenId> tokens, targets;
  for (size_t b = 0; b < starts.size(); b += kEvalBatch) {
    const std::vector<size_t> part(starts.begin() + static_cast<long>(b),
                                   starts.begin() + static_cast<long>(std::min(starts.size(), b + kEvalBatch)));
    gather(data, part, seq_len, tokens, targets);
    ForwardGraph<float> g;
    build_forward(g, ck.config, ck.tensors, tokens, seq_len, false);
    parts.push_back(g.tape.value(g.layers[static_cast<size_t>(layer - 1)].output));
    f.targets.insert(f.targets.end(), targets.begin(), targets.end());
  }
  const size_t d = parts.front().rows();
  f.x = Tensor32::matrix(d, f.targets.size());
  size_t col = 0;
  for (const auto& p : parts) {
    for (size_t i = 0; i < d; ++i) std::copy(p.row(i), p.row(i) + p.cols(), f.x.row(i) + col);
    col += p.cols();
  }
  return f;
}

using FMat = Eigen::MatrixXf;
using FVec = Eigen::VectorXf;

struct ProbeData {
  FMat xhat;  // d × N, each column normalized to zero mean and unit variance
  std::vector<TokenId> targets;
};

ProbeData probe_data(const Features& f, double eps) {
  const size_t d = f.x.rows(), n = f.x.cols();
  ProbeData out{FMat(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(n)), f.targets};
  for (size_t c = 0; c < n; ++c) {
    double mean = 0, var = 0;
    for (size_t i = 0; i < d; ++i) mean += f.x(i, c);
    mean /= static_cast<double>(d);
    for (size_t i = 0; i < d; ++i) var += (f.x(i, c) - mean) * (f.x(i, c) - mean);
    const double inv = 1.0 / std::sqrt(var / static_cast<double>(d) + eps);
    for (size_t i = 0; i < d; ++i)
      out.xhat(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = static_cast<float>((f.x(i, c) - mean) * inv);
  }
  return out;
}

// Mean cross-entropy of column logits; optionally its gradient with respect to the logits.
double probe_loss(const FMat& logits, const std::vector<TokenId>& targets, FMat* grad) {
  const auto n = logits.cols();
  const Eigen::RowVectorXf mx = logits.colwise().maxCoeff();
  FMat e = (logits.rowwise() - mx).array().exp().matrix();
  const Eigen::RowVectorXf z = e.colwise().sum();
  double total = 0;
  for (Eigen::Index c = 0; c < n; ++c) {
    const auto t = static_cast<Eigen::Index>(targets[static_cast<size_t>(c)]);
    total += std::log(static_cast<double>(z(c))) - static_cast<double>(logits(t, c) - mx(c));
  }
  if (grad) {
    const float inv_n = 1.0f / static_cast<float>(n);
    e.array().rowwise() *= (inv_n / z.array());
    for (Eigen::Index c = 0; c < n; ++c) e(static_cast<Eigen::Index>(targets[static_cast<size_t>(c)]), c) -= inv_n;
    *grad = std::move(e);
  }
  return total / static_cast<double>(n);
}

}  // namespace

ProbeRow probe(const Checkpoint& ck, const TokenStream& data, int layer, const ProbeConfig& cfg) {
  check_layer(ck.config, layer);
  const auto train_starts =
      evenly_spaced(window_starts(data, false, cfg.seq_len + 1, false), cfg.train_windows);
  const auto val_starts = evenly_spaced(window_starts(data, true, cfg.seq_len + 1, false), cfg.val_windows);
  if (train_starts.empty() || val_starts.empty()) throw DataError("corpus too small for probing");
  const auto V = static_cast<Eigen::Index>(ck.config.V);
  const ProbeData tr = probe_data(layer_features(ck, data, train_starts, cfg.seq_len, layer), ck.config.ln_eps);
  const ProbeData va = probe_data(layer_features(ck, data, val_starts, cfg.seq_len, layer), ck.config.ln_eps);
  const Eigen::Index d = tr.xhat.rows();

  // Head: logits = W (g ∘ x̂ + b), with x̂ the normalized stream.
  FMat W = FMat::Zero(V, d);
  FVec g = FVec::Ones(d), b = FVec::Zero(d);
  FMat mW = FMat::Zero(V, d), vW = FMat::Zero(V, d);
  FVec mg = FVec::Zero(d), vg = FVec::Zero(d), mb = FVec::Zero(d), vb = FVec::Zero(d);
  const float b1 = 0.9f, b2 = 0.999f, lr = static_cast<float>(cfg.lr);
  float b1t = 1, b2t = 1;
  const auto adam = [&](auto& w, auto& m, auto& v, const auto& grad) {
    m = b1 * m + (1 - b1) * grad;
    v = b2 * v + (1 - b2) * grad.cwiseProduct(grad);
    w.array() -= lr * (m.array() / (1 - b1t)) / ((v.array() / (1 - b2t)).sqrt() + 1e-8f);
  };
  for (int step = 0; step < cfg.steps; ++step) {
    const FMat h = (tr.xhat.array().colwise() * g.array()).colwise() + b.array();
    FMat grad_logits;
    const double l = probe_loss(W * h, tr.targets, &grad_logits);
    if (!std::isfinite(l)) throw OptimizationError("probe loss is not finite at step " + std::to_string(step), step);
    const FMat dW = grad_logits * h.transpose();
    const FMat dh = W.transpose() * grad_logits;
    const FVec dg = dh.cwiseProduct(tr.xhat).rowwise().sum();
    const FVec db = dh.rowwise().sum();
    b1t *= b1;
    b2t *= b2;
    adam(W, mW, vW, dW);
    adam(g, mg, vg, dg);
    adam(b, mb, vb, db);
  }
  ProbeRow row;
  row.layer = layer;
  const FMat h = (va.xhat.array().colwise() * g.array()).colwise() + b.array();
  row.probe_loss = probe_loss(W * h, va.targets, nullptr);
  row.model_loss = summed_loss(ck, data, val_starts, cfg.seq_len) / static_cast<double>(va.targets.size());
  return row;
}

std::vector<ProbeRow> probe_all(const Checkpoint& ck, const TokenStream& data, const ProbeConfig& cfg) {
  std::vector<ProbeRow> rows;
  for (int l = 1; l <= ck.config.L; ++l) rows.push_back(probe(ck, data, l, cfg));
  return rows;
}

void write_probe_csv(std::ostream& os, const std::vector<ProbeRow>& rows) {
  os << "layer,probe_loss,model_loss\n";
  for (const auto& r : rows) os << r.layer << "," << format(r.probe_loss) << "," << format(r.model_loss) << "\n";
}

Similarity similarity(const Checkpoint& ck, const TokenStream& data, int layer, size_t seq_len, size_t windows) {
  check_layer(ck.config, layer);
  const auto starts = evenly_spaced(window_starts(data, true, seq_len, false), windows);
  if (starts.empty()) throw DataError("no validation window of " + std::to_string(seq_len) + " bytes");
  const LayerRole role = layer_role(ck.config, layer);
  const size_t vd = static_cast<size_t>(role.v_dim);
  Similarity out;
  for (size_t s : starts) {
    const std::vector<TokenId> tokens(data.tokens.begin() + static_cast<long>(s),
                                      data.tokens.begin() + static_cast<long>(s + seq_len));
    ForwardGraph<float> g;
    build_forward(g, ck.config, ck.tensors, tokens, seq_len, false);
    const LayerTrace& tr = g.layers[static_cast<size_t>(layer - 1)];
    const Tensor32& values = g.tape.value(tr.attn.v);
    std::vector<std::vector<double>> heads(values.rows() / vd);
    for (size_t h = 0; h < heads.size(); ++h)
      for (size_t r = 0; r < vd; ++r)
        for (size_t c = 0; c < values.cols(); ++c) heads[h].push_back(values(h * vd + r, c));
    const Tensor32& stream = g.tape.value(tr.output);
    std::vector<std::vector<double>> toks(stream.cols(), std::vector<double>(stream.rows()));
    for (size_t i = 0; i < stream.rows(); ++i)
      for (size_t c = 0; c < stream.cols(); ++c) toks[c][i] = stream(i, c);
    const Tensor64 hh = cosine_matrix(heads);
    const Tensor64 tt = cosine_matrix(toks);
    if (out.head_head.empty()) {
      out.head_head = Tensor64(hh.shape());
      out.token_token = Tensor64(tt.shape());
    }
    axpy(out.head_head, 1.0, hh);
    axpy(out.token_token, 1.0, tt);
  }
  const double inv = 1.0 / static_cast<double>(starts.size());
  out.head_head = scaled(out.head_head, inv);
  out.token_token = scaled(out.token_token, inv);
  for (size_t i = 0; i < out.head_head.rows(); ++i) out.head_head(i, i) = 1.0;
  for (size_t i = 0; i < out.token_token.rows(); ++i) out.token_token(i, i) = 1.0;
  return out;
}

void write_matrix_csv(std::ostream& os, const Tensor64& m) {
  os << "row";
  for (size_t j = 0; j < m.cols(); ++j) os << "," << j;
  os << "\n";
  for (size_t i = 0; i < m.rows(); ++i) {
    os << i;
    for (size_t j = 0; j < m.cols(); ++j) os << "," << format(m(i, j));
    os << "\n";
  }
}

std::vector<InitialLossRow> initial_loss_compare(const Checkpoint& mha, const TokenStream& data,
                                                 const std::vector<ConversionStrategy>& strategies, uint64_t control_seed,
                                                 size_t seq_len, size_t max_windows) {
  std::vector<InitialLossRow> rows;
  ModelConfig skip_cfg;
  for (auto s : strategies) {
    const Checkpoint converted = convert(mha, s);
    skip_cfg = converted.config;
    rows.push_back({to_string(s), evaluate(converted, data, seq_len, max_windows).loss});
  }
  if (strategies.empty()) skip_cfg = convert(mha, ConversionStrategy::MeanV).config;
  rows.push_back({"random", evaluate(init_weights(skip_cfg, control_seed), data, seq_len, max_windows).loss});
  return rows;
}

void write_initial_loss_csv(std::ostream& os, const std::vector<InitialLossRow>& rows) {
  os << "strategy,initial_loss\n";
  for (const auto& r : rows) os << r.label << "," << format(r.loss) << "\n";
}

}  // namespace skv1
