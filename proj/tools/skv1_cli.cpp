// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#include <CLI11.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "skv1/checkpoint.hpp"
#include "skv1/convert.hpp"
#include "skv1/errors.hpp"
#include "skv1/harness.hpp"
#include "skv1/kv_cache.hpp"
#include "skv1/mesa.hpp"

namespace fs = std::filesystem;
using namespace skv1;

namespace {

struct Common {
  std::string out;
  std::string config;
  std::vector<std::string> sets;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--out", c.out, "Output directory (default: $SKV1_RUN_DIR, else runs/<command>)");
  app->add_option("--config", c.config, "key=value config file")->check(CLI::ExistingFile);
  app->add_option("--set", c.sets, "key=value override, repeatable");
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Config file first, then --set overrides, in order.
KeyValues overrides(const Common& c) {
  KeyValues kv;
  if (!c.config.empty()) kv = parse_key_values(read_file(c.config));
  for (const auto& s : c.sets) {
    const auto more = parse_key_values(s);
    if (more.empty()) throw ConfigError("--set expects key=value, got '" + s + "'");
    kv.insert(kv.end(), more.begin(), more.end());
  }
  return kv;
}

fs::path run_dir(const Common& c, const std::string& command) {
  fs::path dir;
  if (!c.out.empty()) {
    dir = c.out;
  } else if (const char* env = std::getenv("SKV1_RUN_DIR"); env && *env) {
    dir = env;
  } else {
    dir = fs::path("runs") / command;
  }
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write '" + path.string() + "'");
}

std::string with_echo(const Echo& echo, const std::string& body) {
  std::ostringstream s;
  write_echo(s, echo);
  s << body;
  return s.str();
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(10);
  s << v;
  return s.str();
}

// ---- train

struct TrainArgs {
  Common common;
  std::string corpus;
  std::string init;
  int steps = 0;
  long seed = -1;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg;
  for (const auto& [k, v] : overrides(a.common)) cfg.set(k, v);
  if (!a.corpus.empty()) cfg.corpus = a.corpus;
  if (a.steps > 0) cfg.steps = a.steps;
  if (a.seed >= 0) cfg.seed = static_cast<uint64_t>(a.seed);
  if (cfg.corpus.empty()) throw ConfigError("train needs a corpus (--corpus or corpus=...)");
  const fs::path dir = run_dir(a.common, "train");
  const TokenStream data = ingest(cfg.corpus, cfg.val_fraction);
  Checkpoint init;
  if (!a.init.empty()) init = load_checkpoint(a.init);
  const TrainResult r = train(cfg, data, a.init.empty() ? nullptr : &init);
  std::ostringstream log;
  write_run_log(log, r.log);
  write_text(dir / "run_log.csv", log.str());
  write_text(dir / "config.txt", cfg.to_text());
  save_checkpoint((dir / "model.skv1").string(), r.checkpoint);
  std::cout << "initial_val_loss,final_val_loss\n" << fmt(r.initial_val_loss) << "," << fmt(r.final_val_loss) << "\n";
  return 0;
}

// ---- eval

struct EvalArgs {
  Common common;
  std::string checkpoint, corpus;
  size_t seq_len = 64, windows = 0;
  double val_fraction = 0.1;
};

int run_eval(const EvalArgs& a) {
  const fs::path dir = run_dir(a.common, "eval");
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const EvalResult r = evaluate(ck, ingest(a.corpus, a.val_fraction), a.seq_len, a.windows);
  const Echo echo = {{"command", "eval"},
                     {"checkpoint", a.checkpoint},
                     {"corpus", a.corpus},
                     {"seq_len", std::to_string(a.seq_len)},
                     {"windows", std::to_string(a.windows)},
                     {"val_fraction", format_real(a.val_fraction)}};
  const std::string body =
      "loss,perplexity,tokens\n" + fmt(r.loss) + "," + fmt(r.perplexity) + "," + std::to_string(r.tokens) + "\n";
  write_text(dir / "eval.csv", with_echo(echo, body));
  std::cout << body;
  return 0;
}

// ---- convert

struct ConvertArgs {
  Common common;
  std::string checkpoint, corpus, strategy = "all";
  double ratio = 0.5;
  uint64_t control_seed = 7;
  size_t seq_len = 64, windows = 0;
};

int run_convert(const ConvertArgs& a) {
  const fs::path dir = run_dir(a.common, "convert");
  const Checkpoint mha = load_checkpoint(a.checkpoint);
  const std::vector<ConversionStrategy> strategies =
      a.strategy == "all" ? all_strategies() : std::vector<ConversionStrategy>{parse_strategy(a.strategy)};
  for (auto s : strategies)
    save_checkpoint((dir / ("converted_" + to_string(s) + ".skv1")).string(), convert(mha, s, a.ratio));
  if (a.corpus.empty()) {
    for (auto s : strategies) std::cout << (dir / ("converted_" + to_string(s) + ".skv1")).string() << "\n";
    return 0;
  }
  const auto rows = initial_loss_compare(mha, ingest(a.corpus), strategies, a.control_seed, a.seq_len, a.windows);
  std::ostringstream body;
  write_initial_loss_csv(body, rows);
  const Echo echo = {{"command", "convert"},
                     {"checkpoint", a.checkpoint},
                     {"corpus", a.corpus},
                     {"ratio", format_real(a.ratio)},
                     {"control_seed", std::to_string(a.control_seed)},
                     {"seq_len", std::to_string(a.seq_len)},
                     {"windows", std::to_string(a.windows)}};
  write_text(dir / "initial_loss.csv", with_echo(echo, body.str()));
  std::cout << body.str();
  return 0;
}

// ---- mesa

struct MesaArgs {
  Common common;
  std::string preset;
  int d = 4, a = 2, n = 16;
  double sigma = 0.1, w0_scale = 3.0;
  long mc = 50000;
  uint64_t seed = 7;
  int steps = 5000, restarts = 3;
  double lr = 1e-2;
  bool lemmas = false;
};

void apply_mesa_preset(MesaArgs& a) {
  if (a.preset.empty()) return;
  if (a.preset == "theorem") {
    a.d = 4, a.a = 2, a.n = 16, a.sigma = 0.1, a.w0_scale = 3.0, a.mc = 50000, a.steps = 5000, a.restarts = 3;
  } else if (a.preset == "theorem-small") {
    a.d = 4, a.a = 2, a.n = 16, a.sigma = 0.1, a.w0_scale = 3.0, a.mc = 10000, a.steps = 2000, a.restarts = 3;
  } else {
    throw ConfigError("unknown mesa preset '" + a.preset + "' (expected theorem or theorem-small)");
  }
}

int run_mesa(MesaArgs a) {
  apply_mesa_preset(a);
  const fs::path dir = run_dir(a.common, "mesa");
  const mesa::TaskSpec spec = mesa::TaskSpec::isotropic(a.d, a.a, a.n, a.sigma, a.w0_scale, a.mc, a.seed);
  mesa::TheoremOptions opt;
  opt.adam.steps = a.steps;
  opt.adam.lr = a.lr;
  opt.restarts = a.restarts;
  const mesa::TheoremReport r = mesa::verify_theorem(spec, opt);
  const Echo echo = {{"command", "mesa"},
                     {"preset", a.preset},
                     {"d", std::to_string(a.d)},
                     {"a", std::to_string(a.a)},
                     {"n", std::to_string(a.n)},
                     {"sigma", format_real(a.sigma)},
                     {"w0_scale", format_real(a.w0_scale)},
                     {"mc", std::to_string(a.mc)},
                     {"seed", std::to_string(a.seed)},
                     {"steps", std::to_string(a.steps)},
                     {"restarts", std::to_string(a.restarts)},
                     {"lr", format_real(a.lr)}};
  std::ostringstream full, row;
  mesa::write_theorem_csv(full, r);
  mesa::write_theorem_row(row, r);
  write_text(dir / "theorem.csv", with_echo(echo, full.str()));
  write_text(dir / "theorem_row.csv", with_echo(echo, row.str()));
  std::cout << row.str();
  if (a.lemmas) {
    Rng rng(Rng::stream_seed(a.seed, 9));
    const mesa::LemmaReport l = mesa::check_lemmas(spec, mesa::random_params(a.d, a.a, rng, 0.1));
    std::ostringstream s;
    s << "check,family,value,se\n";
    for (int k = 0; k < 2; ++k) {
      const std::string fam = k == 0 ? "MHA" : "Skip";
      s << "decomposition_gap," << fam << "," << fmt(l.decomposition_gap[k].mean) << ","
        << fmt(l.decomposition_gap[k].se) << "\n";
      s << "cross_term," << fam << "," << fmt(l.cross_term[k].mean) << "," << fmt(l.cross_term[k].se) << "\n";
    }
    s << "ridge_grad_norm,," << fmt(l.ridge_grad_norm) << "," << fmt(l.ridge_grad_scale) << "\n";
    s << "skip_block_residual,," << fmt(l.skip_block_residual) << ",\n";
    s << "skip_predictor_residual,," << fmt(l.skip_predictor_residual) << ",\n";
    write_text(dir / "lemmas.csv", with_echo(echo, s.str()));
    std::cout << s.str();
  }
  return 0;
}

// ---- cache-audit

struct CacheArgs {
  Common common;
  std::string preset;
  std::vector<long> seq_lens{2048};
};

int run_cache(const CacheArgs& a) {
  std::vector<ModelConfig> configs;
  if (!a.preset.empty()) {
    configs = cache_preset(a.preset);
  } else {
    ModelConfig cfg;
    for (const auto& [k, v] : overrides(a.common)) cfg.set(k, v);
    cfg.validate();
    configs.push_back(cfg);
  }
  const fs::path dir = run_dir(a.common, "cache-audit");
  std::ostringstream body;
  write_cache_csv(body, cache_report(configs, a.seq_lens));
  Echo echo = {{"command", "cache-audit"}, {"preset", a.preset}};
  for (size_t i = 0; i < configs.size(); ++i)
    for (const auto& [k, v] : echo_of(configs[i].to_text())) echo.emplace_back(std::to_string(i) + "." + k, v);
  write_text(dir / "cache.csv", with_echo(echo, body.str()));
  std::cout << body.str();
  return 0;
}

// ---- probe

struct ProbeArgs {
  Common common;
  std::string checkpoint, corpus;
  int layer = 0;
  ProbeConfig cfg;
};

int run_probe(const ProbeArgs& a) {
  const fs::path dir = run_dir(a.common, "probe");
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const TokenStream data = ingest(a.corpus);
  const auto rows = a.layer == 0 ? probe_all(ck, data, a.cfg) : std::vector<ProbeRow>{probe(ck, data, a.layer, a.cfg)};
  std::ostringstream body;
  write_probe_csv(body, rows);
  const Echo echo = {{"command", "probe"},
                     {"checkpoint", a.checkpoint},
                     {"corpus", a.corpus},
                     {"layer", std::to_string(a.layer)},
                     {"steps", std::to_string(a.cfg.steps)},
                     {"lr", format_real(a.cfg.lr)},
                     {"seq_len", std::to_string(a.cfg.seq_len)},
                     {"train_windows", std::to_string(a.cfg.train_windows)},
                     {"val_windows", std::to_string(a.cfg.val_windows)}};
  write_text(dir / "probe.csv", with_echo(echo, body.str()));
  std::cout << body.str();
  return 0;
}

// ---- similarity

struct SimilarityArgs {
  Common common;
  std::string checkpoint, corpus;
  int layer = 1;
  size_t seq_len = 64, windows = 16;
};

int run_similarity(const SimilarityArgs& a) {
  const fs::path dir = run_dir(a.common, "similarity");
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Similarity s = similarity(ck, ingest(a.corpus), a.layer, a.seq_len, a.windows);
  const Echo echo = {{"command", "similarity"},
                     {"checkpoint", a.checkpoint},
                     {"corpus", a.corpus},
                     {"layer", std::to_string(a.layer)},
                     {"seq_len", std::to_string(a.seq_len)},
                     {"windows", std::to_string(a.windows)}};
  const std::string tag = "_l" + std::to_string(a.layer) + ".csv";
  std::ostringstream hh, tt;
  write_matrix_csv(hh, s.head_head);
  write_matrix_csv(tt, s.token_token);
  write_text(dir / ("head_head" + tag), with_echo(echo, hh.str()));
  write_text(dir / ("token_token" + tag), with_echo(echo, tt.str()));
  std::cout << (dir / ("head_head" + tag)).string() << "\n" << (dir / ("token_token" + tag)).string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Value-skip transformer lab", "skv1"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a byte-level model");
  add_common(train_cmd, train_args.common);
  train_cmd->add_option("--corpus", train_args.corpus, "Text corpus");
  train_cmd->add_option("--init", train_args.init, "Start from this checkpoint (uptraining)");
  train_cmd->add_option("--steps", train_args.steps, "Optimizer steps");
  train_cmd->add_option("--seed", train_args.seed, "Seed");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Validation loss and perplexity");
  add_common(eval_cmd, eval_args.common);
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint)->required();
  eval_cmd->add_option("--corpus", eval_args.corpus)->required();
  eval_cmd->add_option("--seq-len", eval_args.seq_len);
  eval_cmd->add_option("--windows", eval_args.windows, "0 means every validation window");
  eval_cmd->add_option("--val-fraction", eval_args.val_fraction);

  ConvertArgs convert_args;
  auto* convert_cmd = app.add_subcommand("convert", "Convert a multi-head checkpoint to value-skip");
  add_common(convert_cmd, convert_args.common);
  convert_cmd->add_option("--checkpoint", convert_args.checkpoint)->required();
  convert_cmd->add_option("--strategy", convert_args.strategy, "MeanV, MeanVO, TopV, TopVO, SVD or all");
  convert_cmd->add_option("--ratio", convert_args.ratio);
  convert_cmd->add_option("--corpus", convert_args.corpus, "Also tabulate initial validation losses");
  convert_cmd->add_option("--control-seed", convert_args.control_seed);
  convert_cmd->add_option("--seq-len", convert_args.seq_len);
  convert_cmd->add_option("--windows", convert_args.windows);

  MesaArgs mesa_args;
  auto* mesa_cmd = app.add_subcommand("mesa", "Two-family linear-attention regression experiment");
  add_common(mesa_cmd, mesa_args.common);
  mesa_cmd->add_option("--preset", mesa_args.preset, "theorem or theorem-small; fixes every task setting except --seed and --lr");
  mesa_cmd->add_option("--d", mesa_args.d);
  mesa_cmd->add_option("--a", mesa_args.a);
  mesa_cmd->add_option("--n", mesa_args.n);
  mesa_cmd->add_option("--sigma", mesa_args.sigma);
  mesa_cmd->add_option("--w0-scale", mesa_args.w0_scale);
  mesa_cmd->add_option("--mc", mesa_args.mc);
  mesa_cmd->add_option("--seed", mesa_args.seed);
  mesa_cmd->add_option("--steps", mesa_args.steps);
  mesa_cmd->add_option("--restarts", mesa_args.restarts);
  mesa_cmd->add_option("--lr", mesa_args.lr);
  mesa_cmd->add_flag("--lemmas", mesa_args.lemmas, "Also run the Monte-Carlo identity checks");

  CacheArgs cache_args;
  auto* cache_cmd = app.add_subcommand("cache-audit", "KV-cache bytes per token");
  add_common(cache_cmd, cache_args.common);
  cache_cmd->add_option("--preset", cache_args.preset, "table3-gqa, table3-mla or slope");
  cache_cmd->add_option("--seq-len", cache_args.seq_lens);

  ProbeArgs probe_args;
  auto* probe_cmd = app.add_subcommand("probe", "Layerwise linear probes");
  add_common(probe_cmd, probe_args.common);
  probe_cmd->add_option("--checkpoint", probe_args.checkpoint)->required();
  probe_cmd->add_option("--corpus", probe_args.corpus)->required();
  probe_cmd->add_option("--layer", probe_args.layer, "0 probes every layer");
  probe_cmd->add_option("--steps", probe_args.cfg.steps);
  probe_cmd->add_option("--lr", probe_args.cfg.lr);
  probe_cmd->add_option("--seq-len", probe_args.cfg.seq_len);
  probe_cmd->add_option("--train-windows", probe_args.cfg.train_windows);
  probe_cmd->add_option("--val-windows", probe_args.cfg.val_windows);

  SimilarityArgs sim_args;
  auto* sim_cmd = app.add_subcommand("similarity", "Head-head and token-token cosine similarity");
  add_common(sim_cmd, sim_args.common);
  sim_cmd->add_option("--checkpoint", sim_args.checkpoint)->required();
  sim_cmd->add_option("--corpus", sim_args.corpus)->required();
  sim_cmd->add_option("--layer", sim_args.layer);
  sim_cmd->add_option("--seq-len", sim_args.seq_len);
  sim_cmd->add_option("--windows", sim_args.windows);

  if (argc < 2) {
    std::cerr << app.help();
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "skv1: " << e.what() << "\n";
    return 2;
  }
  try {
    if (*train_cmd) return run_train(train_args);
    if (*eval_cmd) return run_eval(eval_args);
    if (*convert_cmd) return run_convert(convert_args);
    if (*mesa_cmd) return run_mesa(mesa_args);
    if (*cache_cmd) return run_cache(cache_args);
    if (*probe_cmd) return run_probe(probe_args);
    if (*sim_cmd) return run_similarity(sim_args);
  } catch (const std::exception& e) {
    std::cerr << "skv1: error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
