// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "skv1/errors.hpp"
#include "skv1/harness.hpp"

using namespace skv1;

namespace {

std::string corpus_bytes(size_t limit) {
  std::ifstream in(SKV1_DATA_DIR "/corpus.txt", std::ios::binary);
  std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return s.substr(0, limit);
}

std::filesystem::path temp_file(const std::string& name, const std::string& bytes) {
  const auto p = std::filesystem::temp_directory_path() / name;
  std::ofstream(p, std::ios::binary) << bytes;
  return p;
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.L = 2;
  m.d = 32;
  m.H = 4;
  m.r = 64;
  m.V = 256;
  m.n_max = 32;
  return m;
}

TrainConfig tiny_train(int steps) {
  TrainConfig c;
  c.model = tiny_model();
  c.steps = steps;
  c.batch = 4;
  c.seq_len = 32;
  c.lr = 1e-2;
  c.eval_every = 50;
  c.eval_windows = 8;
  return c;
}

// Cross-entropy on the probe's validation windows of byte frequencies counted on its training windows.
double unigram_cross_entropy(const TokenStream& data, const ProbeConfig& pc) {
  const auto pick = [&](bool val, size_t count) {
    auto all = window_starts(data, val, pc.seq_len + 1, false);
    std::vector<size_t> out;
    for (size_t i = 0; i < count && i < all.size(); ++i) out.push_back(all[i * all.size() / std::min(count, all.size())]);
    return out;
  };
  std::vector<double> freq(256, 0.0);
  double total = 0;
  for (size_t s : pick(false, pc.train_windows))
    for (size_t i = s + 1; i <= s + pc.seq_len; ++i) freq[static_cast<size_t>(data.tokens[i])] += 1, total += 1;
  double ce = 0, n = 0;
  for (size_t s : pick(true, pc.val_windows))
    for (size_t i = s + 1; i <= s + pc.seq_len; ++i) {
      const double p = freq[static_cast<size_t>(data.tokens[i])] / total;
      ce -= std::log(std::max(p, 1e-12)), n += 1;
    }
  return ce / n;
}

bool same_weights(const Checkpoint& a, const Checkpoint& b) {
  for (const auto& [name, t] : a.tensors)
    if (t.storage() != b.at(name).storage()) return false;
  return true;
}

}  // namespace

TEST_CASE("ingest tokenizes bytes and splits deterministically") {
  const auto one = temp_file("skv1_one_byte.txt", "Z");
  const TokenStream s = ingest(one.string());
  REQUIRE(s.tokens.size() == 1);
  CHECK(s.tokens[0] == static_cast<TokenId>('Z'));

  const std::string text = corpus_bytes(1000000);
  REQUIRE(text.size() == 1000000);
  const auto path = temp_file("skv1_corpus_copy.txt", text);
  const TokenStream a = ingest(path.string(), 0.1), b = ingest(path.string(), 0.1);
  CHECK(a.validation == b.validation);
  CHECK(std::abs(a.validation_fraction() - 0.1) < 1e-3);
  for (double f : {0.05, 0.2, 0.5}) CHECK(std::abs(tokenize_bytes(text, f).validation_fraction() - f) < 1e-3);
  for (size_t i = 0; i < text.size(); i += 997) CHECK(a.tokens[i] == static_cast<TokenId>(static_cast<unsigned char>(text[i])));

  CHECK_THROWS_AS(ingest("/nonexistent/skv1/corpus.txt"), IoError);
  const auto empty = temp_file("skv1_empty.txt", "");
  CHECK_THROWS_AS(ingest(empty.string()), DataError);
  CHECK_THROWS_AS(tokenize_bytes("abc", 1.0), ConfigError);
}

TEST_CASE("train and validation windows never share a position") {
  const TokenStream s = tokenize_bytes(corpus_bytes(200000), 0.1);
  std::vector<int> owner(s.tokens.size(), -1);
  const size_t len = 33;
  for (int split = 0; split < 2; ++split)
    for (size_t start : window_starts(s, split == 1, len, true))
      for (size_t i = start; i < start + len; ++i) {
        CHECK(s.validation[i] == split);
        if (owner[i] != -1) CHECK(owner[i] == split);
        owner[i] = split;
      }
  const auto packed = window_starts(s, true, len, false);
  for (size_t k = 1; k < packed.size(); ++k) CHECK(packed[k] >= packed[k - 1] + len);
}

TEST_CASE("learning-rate schedule") {
  TrainConfig c = tiny_train(100);
  c.lr = 1.0;
  CHECK(lr_at(c, 0) == doctest::Approx(0.1));
  CHECK(lr_at(c, 9) == doctest::Approx(1.0));
  CHECK(lr_at(c, 10) == doctest::Approx(1.0));
  CHECK(lr_at(c, 100) == doctest::Approx(0.1));
  for (int s = 10; s < 99; ++s) CHECK(lr_at(c, s + 1) <= lr_at(c, s));
  c.warmup = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.warmup = 0.1;
  c.floor = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.floor = 0.1;
  c.steps = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("train config text round trip") {
  TrainConfig c = tiny_train(17);
  c.corpus = "data/corpus.txt";
  c.model.variant = VariantKind::SkipV1;
  const TrainConfig back = TrainConfig::parse(c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK_THROWS_AS(TrainConfig::parse("steps=abc\n"), ConfigError);
}

TEST_CASE("one step moves the weights and lr=0 leaves them bit-identical") {
  const TokenStream data = tokenize_bytes(corpus_bytes(100000), 0.1);
  const Checkpoint init = init_weights(tiny_model(), 7);
  TrainConfig c = tiny_train(1);
  const TrainResult one = train(c, data);
  CHECK_FALSE(same_weights(one.checkpoint, init));
  REQUIRE(one.log.rows.size() == 2);
  CHECK(std::isnan(one.log.rows[0].train_loss));
  CHECK(one.log.rows[1].val_loss == one.final_val_loss);

  c.steps = 5;
  c.lr = 0;
  const TrainResult none = train(c, data);
  CHECK(same_weights(none.checkpoint, init));
  CHECK(none.final_val_loss == none.initial_val_loss);
}

TEST_CASE("training is deterministic and lowers the validation loss") {
  const TokenStream data = tokenize_bytes(corpus_bytes(200000), 0.1);
  const TrainConfig c = tiny_train(120);
  const TrainResult a = train(c, data), b = train(c, data);
  std::ostringstream sa, sb;
  write_run_log(sa, a.log, false);
  write_run_log(sb, b.log, false);
  CHECK(sa.str() == sb.str());
  CHECK(a.final_val_loss < 0.8 * a.initial_val_loss);
  for (size_t k = 1; k < a.log.rows.size(); ++k) CHECK(a.log.rows[k].step == a.log.rows[k - 1].step + 1);
}

TEST_CASE("non-finite loss aborts with the step index") {
  const TokenStream data = tokenize_bytes(corpus_bytes(50000), 0.1);
  Checkpoint bad = init_weights(tiny_model(), 3);
  for (auto& v : bad.at("wte").storage()) v = std::numeric_limits<float>::quiet_NaN();
  try {
    train(tiny_train(3), data, &bad);
    FAIL("expected OptimizationError");
  } catch (const OptimizationError& e) {
    CHECK(e.index() == 1);
  }
}

TEST_CASE("run log csv round trip") {
  RunLog log;
  log.echo = {{"steps", "3"}, {"variant", "MHA"}};
  const double nan = std::nan("");
  log.rows = {{0, 0.0, nan, 5.5, 1.0}, {1, 1e-3, 5.25, nan, 2.5}, {2, 2e-3, 4.75, 4.5, 3.0}};
  std::stringstream s;
  write_run_log(s, log);
  const RunLog back = read_run_log(s);
  CHECK(back.echo == log.echo);
  REQUIRE(back.rows.size() == 3);
  CHECK(std::isnan(back.rows[0].train_loss));
  CHECK(back.rows[2].val_loss == 4.5);
  CHECK(back.rows[1].wall_ms == 2.5);
  std::stringstream bad("step,lr,train_loss,val_loss\n2,0,1,1\n1,0,1,1\n");
  CHECK_THROWS_AS(read_run_log(bad), DataError);
}

TEST_CASE("uniform logits give the byte entropy") {
  const TokenStream data = tokenize_bytes(corpus_bytes(50000), 0.1);
  Checkpoint ck = init_weights(tiny_model(), 1);
  for (auto& [name, t] : ck.tensors) std::fill(t.storage().begin(), t.storage().end(), 0.0f);
  const EvalResult r = evaluate(ck, data, 32);
  CHECK(r.loss == doctest::Approx(std::log(256.0)).epsilon(1e-5));
  CHECK(r.perplexity == doctest::Approx(256.0).epsilon(1e-5));

  const Checkpoint rnd = init_weights(tiny_model(), 2);
  const EvalResult a = evaluate(rnd, data, 32), b = evaluate(rnd, data, 32);
  CHECK(a.loss == b.loss);
  CHECK(a.perplexity == std::exp(a.loss));
  CHECK(evaluate(rnd, data, 32, 4).tokens == 4 * 32);
}

TEST_CASE("probe of the last layer tracks the model and an untrained model carries nothing") {
  const TokenStream data = tokenize_bytes(corpus_bytes(200000), 0.1);
  const TrainResult trained = train(tiny_train(150), data);
  ProbeConfig pc;
  pc.seq_len = 32;
  const auto rows = probe_all(trained.checkpoint, data, pc);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].layer == 1);
  const ProbeRow& last = rows[1];
  CHECK(std::abs(last.probe_loss - last.model_loss) < 0.05 * last.model_loss);

  // Token identity removed: only positions reach the stream, so the probe cannot
  // beat the training-split byte frequencies and carries no more than ln 256.
  Checkpoint blank = init_weights(tiny_model(), 5);
  for (auto& v : blank.at("wte").storage()) v = 0.0f;
  const ProbeRow r = probe(blank, data, 2, pc);
  const double unigram = unigram_cross_entropy(data, pc);
  CHECK(r.probe_loss > 0.95 * unigram);
  CHECK(r.probe_loss < std::log(256.0));

  // A stream that is identically zero leaves the zero-initialized head at uniform logits.
  Checkpoint silent = init_weights(tiny_model(), 5);
  for (auto& v : silent.at("wte").storage()) v = 0.0f;
  for (auto& v : silent.at("wpe").storage()) v = 0.0f;
  CHECK(probe(silent, data, 2, pc).probe_loss == doctest::Approx(std::log(256.0)).epsilon(1e-5));
  CHECK_THROWS_AS(probe(blank, data, 3, pc), ConfigError);

  std::ostringstream csv;
  write_probe_csv(csv, rows);
  CHECK(csv.str().rfind("layer,probe_loss,model_loss\n1,", 0) == 0);
}

TEST_CASE("similarity matrices") {
  const TokenStream data = tokenize_bytes(corpus_bytes(100000), 0.1);
  Checkpoint ck = init_weights(tiny_model(), 9);
  Tensor32& wv = ck.at("layers.1.attn.wv");
  const size_t dh = wv.rows() / 4;
  for (size_t r = 0; r < dh; ++r)
    for (size_t c = 0; c < wv.cols(); ++c) wv(dh + r, c) = wv(r, c);
  const Similarity s = similarity(ck, data, 1, 32, 6);
  REQUIRE(s.head_head.rows() == 4);
  REQUIRE(s.token_token.rows() == 32);
  for (const Tensor64* m : {&s.head_head, &s.token_token})
    for (size_t i = 0; i < m->rows(); ++i) {
      CHECK((*m)(i, i) == 1.0);
      for (size_t j = 0; j < m->cols(); ++j) CHECK(std::abs((*m)(i, j) - (*m)(j, i)) < 1e-6);
    }
  CHECK(std::abs(s.head_head(0, 1) - 1.0) < 1e-6);
  CHECK(s.head_head(0, 2) < 0.9);
  CHECK_THROWS_AS(similarity(ck, data, 0, 32, 2), ConfigError);
}

TEST_CASE("initial loss table lists every strategy and the random control") {
  const TokenStream data = tokenize_bytes(corpus_bytes(100000), 0.1);
  const Checkpoint mha = init_weights(tiny_model(), 4);
  const auto rows = initial_loss_compare(mha, data, all_strategies(), 11, 32, 8);
  REQUIRE(rows.size() == all_strategies().size() + 1);
  CHECK(rows.back().label == "random");
  for (const auto& r : rows) CHECK(std::isfinite(r.loss));
  std::ostringstream csv;
  write_initial_loss_csv(csv, rows);
  CHECK(csv.str().rfind("strategy,initial_loss\n", 0) == 0);
}
