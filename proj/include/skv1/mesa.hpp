// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "skv1/rng.hpp"

// Two-layer linear-attention model of in-context linear regression. The first
// layer is replaced by a fixed copy map; the second layer is either two
// ordinary heads or one ordinary head plus one head whose values are the raw
// input tokens.
namespace skv1::mesa {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct TaskSpec {
  int d = 4;
  int a = 2;  // copy rank
  int n = 16;
  double sigma = 0.1;
  Mat w0;  // d×d mean of the task matrix; empty means zero
  long mc = 50000;
  uint64_t seed = 7;

  /// w0 = scale·√d·I.
  static TaskSpec isotropic(int d, int a, int n, double sigma, double w0_scale, long mc, uint64_t seed);
  Mat mean_task() const;
  void validate() const;
  /// σ_min(w0) > 2√d·σ.
  bool precondition_holds() const;
};

struct SequenceData {
  Mat w_star;  // d×d
  Mat X;       // d×n
  Mat Y;       // d×n
  Vec x_query;
  Vec y_query;
};

/// Draws W*, the n context pairs and the query pair, in that order.
SequenceData sample_sequence(const TaskSpec& spec, Rng& rng);

/// Ridge solution Y Xᵀ (X Xᵀ + σ² I)⁻¹ by Cholesky. Throws NumericError when
/// the system is singular.
Mat ridge_predictor(const SequenceData& data, double sigma2);
Mat ridge_predictor(const Mat& xx, const Mat& yx, double sigma2);
/// Posterior mean of W* given the context: (Y Xᵀ + σ² W₀)(X Xᵀ + σ² I)⁻¹.
Mat posterior_predictor(const Mat& xx, const Mat& yx, double sigma2, const Mat& w0);

/// Compressed token (A x; B y) with A: a×d and B: (d−a)×d.
struct CopyMap {
  Mat A;
  Mat B;

  /// A holds the first a rows of the identity and B the last d−a rows.
  static CopyMap truncation(int d, int a);
  int d() const { return static_cast<int>(A.cols()); }
  int a() const { return static_cast<int>(A.rows()); }
  /// Throws ConfigError unless both maps read d inputs and emit d rows together.
  void validate(int d) const;
  Mat x_lift() const;  // (A; 0), d×d
  Mat y_lift() const;  // (0; B), d×d
};

/// First-layer output: columns x_1, (A x_1; B y_1), ..., x_n, (A x_n; B y_n),
/// (A x_{n+1}; 0). Returns d×(2n+1).
Mat copy_embed(const SequenceData& data, const CopyMap& map);

/// Σ x_i x_iᵀ + z_i z_iᵀ with z_i = (A x_i; B y_i).
Mat build_G1(const SequenceData& data, const CopyMap& map);
/// Gram matrices read by the two heads of the value-skip model: the first is
/// build_G1, the second is Σ x_i x_iᵀ + y_i z_iᵀ.
std::pair<Mat, Mat> build_G2(const SequenceData& data, const CopyMap& map);

/// Sufficient statistics of one draw.
struct Draw {
  Mat xx;  // X Xᵀ
  Mat xy;  // X Yᵀ
  Mat yy;  // Y Yᵀ
  Vec x_query;
  Vec y_query;
};
Draw summarize(const SequenceData& data);

enum class Family { MHA, Skip };
std::string to_string(Family f);

struct MesaParams {
  CopyMap map;
  Mat W[2];   // value path per head
  Mat QK[2];  // key-query product per head

  /// Query-side matrix of head h: QK^h (A; 0).
  Mat M(int h) const;
  int d() const { return map.d(); }
  int a() const { return map.a(); }
};

MesaParams zero_params(int d, int a);
/// Entries of every block drawn N(0, std²).
MesaParams random_params(int d, int a, Rng& rng, double std);
Vec pack(const MesaParams& p);
MesaParams unpack(const Vec& x, int d, int a);

/// Gram matrix read by head h of the family.
Mat head_gram(const Draw& draw, const CopyMap& map, Family family, int h);
/// U = Σ_h W^h G^h M^h; the prediction is U x_query.
Mat predictor_matrix(const MesaParams& p, Family family, const Draw& draw);

/// Split of U into the label-free part, the part even in Y and the part odd in Y.
struct Blocks {
  Mat n1;
  Mat n2;
  Mat n3;
};
Blocks decompose(const MesaParams& p, Family family, const Draw& draw);

struct Estimate {
  double mean = 0;
  double se = 0;
  double z() const { return se > 0 ? mean / se : 0; }
};
/// Sample mean and its standard error.
Estimate estimate(const std::vector<double>& values);

/// Fixed set of draws shared by every estimate built on it (common random numbers).
/// Draws are generated in chunks, each from its own stream, so the set does not
/// depend on the thread count.
class SamplePool {
 public:
  SamplePool(const TaskSpec& spec, uint64_t stream);
  const TaskSpec& spec() const { return spec_; }
  size_t size() const { return draws_.size(); }
  const Draw& operator[](size_t i) const { return draws_[i]; }
  /// Evaluates f on every draw in parallel; results are in draw order.
  std::vector<double> map(const std::function<double(const Draw&)>& f) const;

 private:
  TaskSpec spec_;
  std::vector<Draw> draws_;
};

/// Per-draw squared prediction error of the family.
std::vector<double> per_draw_loss(const MesaParams& p, Family family, const SamplePool& pool);
Estimate loss(const MesaParams& p, Family family, const SamplePool& pool);
/// Monte-Carlo losses of the two families on the same draws.
Estimate loss_L1(const MesaParams& p, const TaskSpec& spec);
Estimate loss_L2(const MesaParams& p, const TaskSpec& spec);

/// Exact pool average of the family's loss, evaluated from second moments of the
/// features S_ab·x_c (S ranging over X Xᵀ, X Yᵀ, Y Xᵀ, Y Yᵀ). Each evaluation costs
/// O(features²) instead of a pass over the pool.
class MomentLoss {
 public:
  MomentLoss(const SamplePool& pool, Family family);
  Family family() const { return family_; }
  int d() const { return d_; }
  double value(const MesaParams& p, MesaParams* grad = nullptr) const;

 private:
  Family family_;
  int d_;
  Mat phi_;   // feature second moments
  Mat beta_;  // feature-target cross moments, features × d
  double target_energy_ = 0;
};

struct AdamOptions {
  int steps = 5000;
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizeResult {
  Vec best;
  double best_loss = 0;
  double final_loss = 0;
  std::vector<double> trajectory;  // loss before each step
};

using Objective = std::function<double(const Vec& x, Vec* grad)>;

/// Adam on a deterministic objective. Keeps the best iterate seen. A non-finite
/// loss or gradient throws OptimizationError carrying the step index.
OptimizeResult optimize(const Objective& f, Vec init, const AdamOptions& opt);

struct ParamsResult {
  MesaParams best;
  double best_loss = 0;
  double final_loss = 0;
  std::vector<double> trajectory;
};
ParamsResult optimize(const MomentLoss& loss, const MesaParams& init, const AdamOptions& opt);

struct LambdaEstimate {
  Vec lambda;
  Vec se;
};
/// λ_i = E[Ŵ_{i,:} X Yᵀ_{:,i}] / E[‖X Yᵀ_{:,i}‖²], with delta-method standard errors.
/// Throws NumericError when a denominator is within 3 standard errors of zero.
LambdaEstimate estimate_lambda(const TaskSpec& spec);
LambdaEstimate estimate_lambda(const SamplePool& pool);

/// A = I, B empty, W¹ = −Λ/2, W² = Λ, QK¹ = QK² = I.
MesaParams construct_skip_optimum(const Vec& lambda);

/// E‖ΛYXᵀ − R_a(ΛYXᵀ)‖²_F where R_a is the best rank-a approximation.
Estimate rank_gap(const TaskSpec& spec, int a);
Estimate rank_gap(const SamplePool& pool, const Vec& lambda, int a);

struct RunOutcome {
  Family family = Family::MHA;
  int restart = 0;
  bool ok = true;
  double best_loss = 0;
  long failed_step = -1;
  std::string error;
};

struct TheoremReport {
  TaskSpec spec;
  bool precondition_ok = false;
  bool runs_ok = true;  // at least one run per family finished
  Estimate l1_min;
  Estimate l2_min;
  Estimate gap;  // L1 − L2 on shared draws
  Estimate c_lower;
  LambdaEstimate lambda;
  std::vector<RunOutcome> runs;
};

struct TheoremOptions {
  AdamOptions adam;
  int restarts = 3;
  double init_std = 0.1;
};

/// Minimizes both losses from matched starting points over the same training
/// draws, then evaluates the minima on fresh shared draws.
TheoremReport verify_theorem(const TaskSpec& spec, const TheoremOptions& opt = {});

void write_theorem_csv(std::ostream& os, const TheoremReport& r);
/// One-row form with a header line: settings, both minima, the gap and the
/// rank-gap estimate, each with its standard error.
extern const char* const kTheoremRowHeader;
void write_theorem_row(std::ostream& os, const TheoremReport& r);
std::string theorem_summary(const TheoremReport& r);

struct LemmaReport {
  Estimate decomposition_gap[2];  // L_k − (C + E‖U − Ŵ‖²) per family
  Estimate cross_term[2];         // E⟨Ŵ − N3, N1 + N2⟩ per family
  double ridge_grad_norm = 0;     // ‖E 2(Ŵx − y)xᵀ‖_F
  double ridge_grad_scale = 0;    // its null standard deviation
  double skip_block_residual = 0;      // max |N1'|, |N2'|, |N3' − ΛYXᵀ|
  double skip_predictor_residual = 0;  // max |U x − ΛYXᵀ x|
};

/// Monte-Carlo checks of the loss decomposition around the ridge solution, its
/// parity split and the skip-optimum identities, at the probe parameters.
LemmaReport check_lemmas(const TaskSpec& spec, const MesaParams& probe);

}  // namespace skv1::mesa
