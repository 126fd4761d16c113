// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "skv1/convert.hpp"
#include "skv1/model.hpp"

namespace skv1 {

/// Byte tokens with a per-position split flag.
struct TokenStream {
  std::vector<TokenId> tokens;
  std::vector<uint8_t> validation;  // 1 for held-out positions

  size_t validation_count() const;
  double validation_fraction() const;
};

/// Positions are grouped in blocks of kSplitBlock bytes and blocks in groups of
/// kSplitGroup; a fixed hash of each block index orders the blocks of a group and
/// the first round(fraction·kSplitGroup) of them are held out.
constexpr size_t kSplitBlock = 256;
constexpr size_t kSplitGroup = 100;

TokenStream tokenize_bytes(const std::string& bytes, double validation_fraction = 0.1);
/// Throws IoError when the file cannot be read and DataError when it is empty.
TokenStream ingest(const std::string& path, double validation_fraction = 0.1);

/// Starts of windows of `len` positions lying entirely in one split. With
/// `overlapping` every such start is returned; otherwise windows are packed
/// left to right without overlap.
std::vector<size_t> window_starts(const TokenStream& s, bool validation, size_t len, bool overlapping);

struct TrainConfig {
  ModelConfig model;
  int steps = 2000;
  int batch = 4;
  int seq_len = 64;
  double lr = 3e-3;
  double warmup = 0.1;  // fraction of steps
  double floor = 0.1;   // final lr as a fraction of the peak
  double weight_decay = 0.1;
  double clip = 1.0;  // global gradient norm, 0 disables
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  uint64_t seed = 7;
  std::string corpus;
  double val_fraction = 0.1;
  int eval_every = 200;
  int eval_windows = 64;  // windows per periodic evaluation, 0 means all

  void validate() const;
  /// Training keys first, anything else is forwarded to the model config.
  void set(const std::string& key, const std::string& value);
  std::string to_text() const;
  static TrainConfig parse(const std::string& text);
};

/// Linear warmup to the peak, then cosine decay to floor·peak. Steps are 0-based.
double lr_at(const TrainConfig& cfg, int step);

using Echo = std::vector<std::pair<std::string, std::string>>;

/// Writes `# key=value` lines.
void write_echo(std::ostream& os, const Echo& echo);
Echo echo_of(const std::string& key_value_text);

struct RunRow {
  int step = 0;
  double lr = 0;
  double train_loss = 0;  // NaN on the step-0 row
  double val_loss = 0;    // NaN when not evaluated
  double wall_ms = 0;
};

struct RunLog {
  Echo echo;
  std::vector<RunRow> rows;
};

extern const char* const kRunLogHeader;
void write_run_log(std::ostream& os, const RunLog& log, bool include_wall = true);
RunLog read_run_log(std::istream& is);

struct TrainResult {
  Checkpoint checkpoint;
  RunLog log;
  double initial_val_loss = 0;
  double final_val_loss = 0;
};

/// AdamW with decoupled decay on matrices, global-norm clipping and the lr
/// schedule above. Starts from `init` when given (uptraining), else from
/// init_weights(model, seed). A non-finite loss throws OptimizationError with
/// the 1-based step.
TrainResult train(const TrainConfig& cfg, const TokenStream& data, const Checkpoint* init = nullptr);
TrainResult train(const TrainConfig& cfg);

struct EvalResult {
  double loss = 0;
  double perplexity = 0;
  size_t tokens = 0;
};

/// Mean next-token cross-entropy over non-overlapping validation windows of
/// seq_len + 1 bytes; `max_windows` > 0 takes that many, evenly spaced.
EvalResult evaluate(const Checkpoint& ck, const TokenStream& data, size_t seq_len, size_t max_windows = 0);

struct ProbeConfig {
  int steps = 300;
  double lr = 1e-2;
  size_t seq_len = 64;
  size_t train_windows = 256;
  size_t val_windows = 32;
};

struct ProbeRow {
  int layer = 0;
  double probe_loss = 0;
  double model_loss = 0;  // the full model on the same validation windows
};

/// Freezes the model, reads the residual stream leaving `layer`, fits a
/// layer norm plus linear head for next-token prediction and reports its
/// validation cross-entropy.
ProbeRow probe(const Checkpoint& ck, const TokenStream& data, int layer, const ProbeConfig& cfg = {});
std::vector<ProbeRow> probe_all(const Checkpoint& ck, const TokenStream& data, const ProbeConfig& cfg = {});
void write_probe_csv(std::ostream& os, const std::vector<ProbeRow>& rows);

struct Similarity {
  Tensor64 head_head;    // heads × heads, cosine of per-head value outputs
  Tensor64 token_token;  // seq_len × seq_len, cosine of residual-stream vectors
};

/// Averages over `windows` validation windows of seq_len tokens.
Similarity similarity(const Checkpoint& ck, const TokenStream& data, int layer, size_t seq_len, size_t windows);
void write_matrix_csv(std::ostream& os, const Tensor64& m);

struct InitialLossRow {
  std::string label;
  double loss = 0;
};

/// Validation loss of each conversion before any further training, plus a
/// "random" row: a freshly initialized skip model of the same shape.
std::vector<InitialLossRow> initial_loss_compare(const Checkpoint& mha, const TokenStream& data,
                                                 const std::vector<ConversionStrategy>& strategies, uint64_t control_seed,
                                                 size_t seq_len, size_t max_windows = 0);
void write_initial_loss_csv(std::ostream& os, const std::vector<InitialLossRow>& rows);

}  // namespace skv1
