// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#define EIGEN_DONT_PARALLELIZE
#include "skv1/mesa.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <exception>
#include <iomanip>
#include <limits>
#include <mutex>
#include <ostream>
#include <sstream>

#include "skv1/errors.hpp"
#include "skv1/tape.hpp"

namespace skv1::mesa {

namespace {

// Independent generator streams per purpose, derived from the task seed.
constexpr uint64_t kLossStream = 1;
constexpr uint64_t kTrainStream = 2;
constexpr uint64_t kEvalStream = 3;
constexpr uint64_t kLambdaStream = 4;
constexpr uint64_t kRankStream = 5;
constexpr uint64_t kLemmaStreamA = 6;
constexpr uint64_t kLemmaStreamB = 7;
constexpr uint64_t kInitStream = 100;

constexpr size_t kDrawChunk = 1024;
constexpr size_t kMomentChunk = 2048;

// Runs body(i) for i in [0, n) across threads; the first exception is rethrown.
template <typename F>
void parallel_for(size_t n, const F& body) {
  std::exception_ptr error;
  std::mutex mu;
  const long count = static_cast<long>(n);
#pragma omp parallel for schedule(static)
  for (long i = 0; i < count; ++i) {
    try {
      body(static_cast<size_t>(i));
    } catch (...) {
      std::lock_guard<std::mutex> lock(mu);
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

Tensor64 to_tensor(const Mat& m) {
  Tensor64 t = Tensor64::matrix(static_cast<size_t>(m.rows()), static_cast<size_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t(static_cast<size_t>(i), static_cast<size_t>(j)) = m(i, j);
  return t;
}

Mat to_mat(const Tensor64& t, Eigen::Index rows, Eigen::Index cols) {
  Mat m = Mat::Zero(rows, cols);
  if (t.empty()) return m;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = t(static_cast<size_t>(i), static_cast<size_t>(j));
  return m;
}

Mat ridge_from_draw(const Draw& draw, double sigma2) { return ridge_predictor(draw.xx, draw.xy.transpose(), sigma2); }

}  // namespace

TaskSpec TaskSpec::isotropic(int d, int a, int n, double sigma, double w0_scale, long mc, uint64_t seed) {
  TaskSpec s;
  s.d = d;
  s.a = a;
  s.n = n;
  s.sigma = sigma;
  s.w0 = w0_scale * std::sqrt(static_cast<double>(d)) * Mat::Identity(d, d);
  s.mc = mc;
  s.seed = seed;
  return s;
}

Mat TaskSpec::mean_task() const { return w0.size() == 0 ? Mat::Zero(d, d) : w0; }

void TaskSpec::validate() const {
  if (d < 1) throw ConfigError("mesa task: d must be positive, got " + std::to_string(d));
  if (a < 0 || a > d) throw ConfigError("mesa task: copy rank a=" + std::to_string(a) + " outside [0, d]");
  if (n < 0) throw ConfigError("mesa task: n must be non-negative");
  if (!(sigma >= 0) || !std::isfinite(sigma)) throw ConfigError("mesa task: sigma must be finite and non-negative");
  if (mc < 1) throw ConfigError("mesa task: mc must be at least 1");
  if (w0.size() != 0 && (w0.rows() != d || w0.cols() != d)) throw ConfigError("mesa task: w0 must be d×d");
}

bool TaskSpec::precondition_holds() const {
  const Eigen::JacobiSVD<Mat> svd(mean_task());
  const double smallest = svd.singularValues()(d - 1);
  return smallest > 2.0 * std::sqrt(static_cast<double>(d)) * sigma;
}

SequenceData sample_sequence(const TaskSpec& spec, Rng& rng) {
  spec.validate();
  const int d = spec.d;
  SequenceData s;
  s.w_star = spec.mean_task();
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) s.w_star(i, j) += rng.normal();
  s.X.resize(d, spec.n);
  for (int j = 0; j < spec.n; ++j)
    for (int i = 0; i < d; ++i) s.X(i, j) = rng.normal();
  s.Y = s.w_star * s.X;
  for (int j = 0; j < spec.n; ++j)
    for (int i = 0; i < d; ++i) s.Y(i, j) += spec.sigma * rng.normal();
  s.x_query.resize(d);
  for (int i = 0; i < d; ++i) s.x_query(i) = rng.normal();
  s.y_query = s.w_star * s.x_query;
  for (int i = 0; i < d; ++i) s.y_query(i) += spec.sigma * rng.normal();
  return s;
}

Mat ridge_predictor(const SequenceData& data, double sigma2) {
  return ridge_predictor(data.X * data.X.transpose(), data.Y * data.X.transpose(), sigma2);
}

Mat ridge_predictor(const Mat& xx, const Mat& yx, double sigma2) {
  if (!(sigma2 >= 0)) throw NumericError("ridge: negative regularization");
  const Eigen::Index d = xx.rows();
  const Mat system = xx + sigma2 * Mat::Identity(d, d);
  Eigen::LLT<Mat> llt(system);
  const Mat l = llt.matrixL();
  const double top = system.diagonal().cwiseAbs().maxCoeff();
  if (llt.info() != Eigen::Success || !(l.diagonal().minCoeff() > 0) ||
      l.diagonal().minCoeff() * l.diagonal().minCoeff() <= 1e-12 * std::max(top, 1e-300)) {
    throw NumericError("ridge: X Xᵀ + σ²I is singular");
  }
  // Ŵ (XXᵀ + σ²I) = YXᵀ, solved through the transpose of the symmetric system.
  return llt.solve(yx.transpose()).transpose();
}

Mat posterior_predictor(const Mat& xx, const Mat& yx, double sigma2, const Mat& w0) {
  return ridge_predictor(xx, yx + sigma2 * w0, sigma2);
}

CopyMap CopyMap::truncation(int d, int a) {
  if (a < 0 || a > d) throw ConfigError("copy map: a=" + std::to_string(a) + " outside [0, " + std::to_string(d) + "]");
  const Mat eye = Mat::Identity(d, d);
  return CopyMap{eye.topRows(a), eye.bottomRows(d - a)};
}

void CopyMap::validate(int dim) const {
  if (A.cols() != dim || B.cols() != dim || A.rows() + B.rows() != dim) {
    throw ConfigError("copy map: expected A a×d and B (d−a)×d with d=" + std::to_string(dim) + ", got A " +
                      std::to_string(A.rows()) + "×" + std::to_string(A.cols()) + " and B " + std::to_string(B.rows()) +
                      "×" + std::to_string(B.cols()));
  }
}

Mat CopyMap::x_lift() const {
  Mat k = Mat::Zero(d(), d());
  k.topRows(a()) = A;
  return k;
}

Mat CopyMap::y_lift() const {
  Mat k = Mat::Zero(d(), d());
  k.bottomRows(d() - a()) = B;
  return k;
}

Mat copy_embed(const SequenceData& data, const CopyMap& map) {
  const int d = static_cast<int>(data.X.rows());
  map.validate(d);
  const int n = static_cast<int>(data.X.cols());
  const int a = map.a();
  Mat out = Mat::Zero(d, 2 * n + 1);
  for (int i = 0; i < n; ++i) {
    out.col(2 * i) = data.X.col(i);
    out.col(2 * i + 1).head(a) = map.A * data.X.col(i);
    out.col(2 * i + 1).tail(d - a) = map.B * data.Y.col(i);
  }
  out.col(2 * n).head(a) = map.A * data.x_query;
  return out;
}

namespace {

Vec compressed(const CopyMap& map, const Vec& x, const Vec& y) {
  Vec z(map.d());
  z.head(map.a()) = map.A * x;
  z.tail(map.d() - map.a()) = map.B * y;
  return z;
}

}  // namespace

Mat build_G1(const SequenceData& data, const CopyMap& map) {
  const int d = static_cast<int>(data.X.rows());
  map.validate(d);
  Mat g = Mat::Zero(d, d);
  for (Eigen::Index i = 0; i < data.X.cols(); ++i) {
    const Vec x = data.X.col(i);
    const Vec z = compressed(map, x, data.Y.col(i));
    g += x * x.transpose() + z * z.transpose();
  }
  return g;
}

std::pair<Mat, Mat> build_G2(const SequenceData& data, const CopyMap& map) {
  const int d = static_cast<int>(data.X.rows());
  map.validate(d);
  Mat g = Mat::Zero(d, d);
  for (Eigen::Index i = 0; i < data.X.cols(); ++i) {
    const Vec x = data.X.col(i);
    const Vec y = data.Y.col(i);
    g += x * x.transpose() + y * compressed(map, x, y).transpose();
  }
  return {build_G1(data, map), g};
}

Draw summarize(const SequenceData& data) {
  return Draw{data.X * data.X.transpose(), data.X * data.Y.transpose(), data.Y * data.Y.transpose(), data.x_query,
              data.y_query};
}

std::string to_string(Family f) { return f == Family::MHA ? "mha" : "skip"; }

Mat MesaParams::M(int h) const { return QK[h] * map.x_lift(); }

MesaParams zero_params(int d, int a) {
  MesaParams p;
  p.map = CopyMap{Mat::Zero(a, d), Mat::Zero(d - a, d)};
  for (int h = 0; h < 2; ++h) {
    p.W[h] = Mat::Zero(d, d);
    p.QK[h] = Mat::Zero(d, d);
  }
  return p;
}

MesaParams random_params(int d, int a, Rng& rng, double std) {
  MesaParams p = zero_params(d, a);
  Vec x = pack(p);
  for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = std * rng.normal();
  return unpack(x, d, a);
}

namespace {

template <typename F>
void for_each_block(int d, int a, F&& f) {
  f(a, d);
  f(d - a, d);
  for (int k = 0; k < 4; ++k) f(d, d);
}

}  // namespace

Vec pack(const MesaParams& p) {
  const Mat* blocks[6] = {&p.map.A, &p.map.B, &p.W[0], &p.W[1], &p.QK[0], &p.QK[1]};
  Eigen::Index total = 0;
  for (const Mat* m : blocks) total += m->size();
  Vec x(total);
  Eigen::Index at = 0;
  for (const Mat* m : blocks)
    for (Eigen::Index i = 0; i < m->rows(); ++i)
      for (Eigen::Index j = 0; j < m->cols(); ++j) x(at++) = (*m)(i, j);
  return x;
}

MesaParams unpack(const Vec& x, int d, int a) {
  MesaParams p = zero_params(d, a);
  Mat* blocks[6] = {&p.map.A, &p.map.B, &p.W[0], &p.W[1], &p.QK[0], &p.QK[1]};
  Eigen::Index total = 0;
  for (Mat* m : blocks) total += m->size();
  if (x.size() != total) throw DimensionError("mesa unpack: expected " + std::to_string(total) + " values");
  Eigen::Index at = 0;
  for (Mat* m : blocks)
    for (Eigen::Index i = 0; i < m->rows(); ++i)
      for (Eigen::Index j = 0; j < m->cols(); ++j) (*m)(i, j) = x(at++);
  return p;
}

Mat head_gram(const Draw& draw, const CopyMap& map, Family family, int h) {
  const Mat kx = map.x_lift();
  const Mat ky = map.y_lift();
  const Mat yx = draw.xy.transpose();
  if (family == Family::MHA || h == 0) {
    return draw.xx + kx * draw.xx * kx.transpose() + kx * draw.xy * ky.transpose() + ky * yx * kx.transpose() +
           ky * draw.yy * ky.transpose();
  }
  return draw.xx + yx * kx.transpose() + draw.yy * ky.transpose();
}

Mat predictor_matrix(const MesaParams& p, Family family, const Draw& draw) {
  Mat u = Mat::Zero(p.d(), p.d());
  for (int h = 0; h < 2; ++h) u += p.W[h] * head_gram(draw, p.map, family, h) * p.M(h);
  return u;
}

Blocks decompose(const MesaParams& p, Family family, const Draw& draw) {
  const int d = p.d();
  const int a = p.a();
  const Mat& A = p.map.A;
  const Mat& B = p.map.B;
  const Mat yx = draw.xy.transpose();
  Blocks out{Mat::Zero(d, d), Mat::Zero(d, d), Mat::Zero(d, d)};
  for (int h = 0; h < 2; ++h) {
    const Mat& W = p.W[h];
    const Mat M = p.M(h);
    const Mat W1 = W.leftCols(a), W2 = W.rightCols(d - a);
    const Mat M1 = M.topRows(a), M2 = M.bottomRows(d - a);
    out.n1 += W * draw.xx * M;
    if (family == Family::MHA || h == 0) {
      out.n1 += W1 * A * draw.xx * A.transpose() * M1;
      out.n2 += W2 * B * draw.yy * B.transpose() * M2;
      out.n3 += W1 * A * draw.xy * B.transpose() * M2 + W2 * B * yx * A.transpose() * M1;
    } else {
      out.n2 += W * draw.yy * B.transpose() * M2;
      out.n3 += W * yx * A.transpose() * M1;
    }
  }
  return out;
}

Estimate estimate(const std::vector<double>& values) {
  if (values.empty()) return {};
  double sum = 0;
  for (double v : values) sum += v;
  const double n = static_cast<double>(values.size());
  const double mean = sum / n;
  if (values.size() < 2) return {mean, 0};
  double ss = 0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1) / n)};
}

SamplePool::SamplePool(const TaskSpec& spec, uint64_t stream) : spec_(spec) {
  spec.validate();
  draws_.resize(static_cast<size_t>(spec.mc));
  const size_t chunks = (draws_.size() + kDrawChunk - 1) / kDrawChunk;
  const uint64_t base = Rng::stream_seed(spec.seed, stream);
  parallel_for(chunks, [&](size_t c) {
    Rng rng(Rng::stream_seed(base, c));
    const size_t end = std::min(draws_.size(), (c + 1) * kDrawChunk);
    for (size_t i = c * kDrawChunk; i < end; ++i) draws_[i] = summarize(sample_sequence(spec_, rng));
  });
}

std::vector<double> SamplePool::map(const std::function<double(const Draw&)>& f) const {
  std::vector<double> out(draws_.size());
  parallel_for(draws_.size(), [&](size_t i) { out[i] = f(draws_[i]); });
  return out;
}

std::vector<double> per_draw_loss(const MesaParams& p, Family family, const SamplePool& pool) {
  p.map.validate(pool.spec().d);
  return pool.map([&](const Draw& draw) {
    return (predictor_matrix(p, family, draw) * draw.x_query - draw.y_query).squaredNorm();
  });
}

Estimate loss(const MesaParams& p, Family family, const SamplePool& pool) {
  return estimate(per_draw_loss(p, family, pool));
}

Estimate loss_L1(const MesaParams& p, const TaskSpec& spec) {
  return loss(p, Family::MHA, SamplePool(spec, kLossStream));
}

Estimate loss_L2(const MesaParams& p, const TaskSpec& spec) {
  return loss(p, Family::Skip, SamplePool(spec, kLossStream));
}

MomentLoss::MomentLoss(const SamplePool& pool, Family family) : family_(family), d_(pool.spec().d) {
  const Eigen::Index d = d_;
  const Eigen::Index cube = d * d * d;
  const Eigen::Index features = 4 * cube;
  const size_t chunks = (pool.size() + kMomentChunk - 1) / kMomentChunk;
  std::vector<Mat> phi_parts(chunks), beta_parts(chunks);
  std::vector<double> energy_parts(chunks, 0.0);
  parallel_for(chunks, [&](size_t c) {
    const size_t begin = c * kMomentChunk;
    const size_t end = std::min(pool.size(), begin + kMomentChunk);
    const Eigen::Index rows = static_cast<Eigen::Index>(end - begin);
    Mat f(rows, features), t(rows, d);
    double energy = 0;
    for (size_t s = begin; s < end; ++s) {
      const Draw& draw = pool[s];
      const Eigen::Index r = static_cast<Eigen::Index>(s - begin);
      const Mat* stats[4] = {&draw.xx, &draw.xy, nullptr, &draw.yy};
      for (int slot = 0; slot < 4; ++slot)
        for (Eigen::Index i = 0; i < d; ++i)
          for (Eigen::Index j = 0; j < d; ++j) {
            const double sij = slot == 2 ? draw.xy(j, i) : (*stats[slot])(i, j);
            for (Eigen::Index k = 0; k < d; ++k) f(r, slot * cube + i * d * d + j * d + k) = sij * draw.x_query(k);
          }
      t.row(r) = draw.y_query.transpose();
      energy += draw.y_query.squaredNorm();
    }
    phi_parts[c] = f.transpose() * f;
    beta_parts[c] = f.transpose() * t;
    energy_parts[c] = energy;
  });
  phi_ = Mat::Zero(features, features);
  beta_ = Mat::Zero(features, d);
  for (size_t c = 0; c < chunks; ++c) {
    phi_ += phi_parts[c];
    beta_ += beta_parts[c];
    target_energy_ += energy_parts[c];
  }
  const double n = static_cast<double>(pool.size());
  phi_ /= n;
  beta_ /= n;
  target_energy_ /= n;
}

double MomentLoss::value(const MesaParams& p, MesaParams* grad) const {
  using namespace skv1::ad;
  const int d = d_;
  const int a = p.a();
  p.map.validate(d);
  const bool want = grad != nullptr;
  Tape<double> t;
  const Var av = a > 0 ? t.leaf(to_tensor(p.map.A), want) : Var{};
  const Var bv = a < d ? t.leaf(to_tensor(p.map.B), want) : Var{};
  Var wv[2], qv[2];
  for (int h = 0; h < 2; ++h) {
    wv[h] = t.leaf(to_tensor(p.W[h]), want);
    qv[h] = t.leaf(to_tensor(p.QK[h]), want);
  }
  const size_t du = static_cast<size_t>(d);
  const size_t au = static_cast<size_t>(a);
  auto zeros = [&](size_t rows) { return t.leaf(Tensor64::matrix(rows, du)); };
  Var kx, ky;
  if (a == 0) {
    kx = zeros(du);
  } else if (a == d) {
    kx = av;
  } else {
    kx = concat_rows<double>(t, {av, zeros(du - au)});
  }
  if (a == d) {
    ky = zeros(du);
  } else if (a == 0) {
    ky = bv;
  } else {
    ky = concat_rows<double>(t, {zeros(au), bv});
  }
  const Var kxt = transpose(t, kx);
  const Var kyt = transpose(t, ky);
  // Slot order: X Xᵀ, X Yᵀ, Y Xᵀ, Y Yᵀ; each term contributes (W L)ᵀ ⊗ vec(N) for a
  // prediction W L S N x.
  std::vector<Var> slots[4];
  for (int h = 0; h < 2; ++h) {
    const Var r = matmul(t, qv[h], kx);
    const Var kxt_r = matmul(t, kxt, r);
    const Var kyt_r = matmul(t, kyt, r);
    slots[0].push_back(transposed_kron(t, wv[h], r));
    if (family_ == Family::MHA || h == 0) {
      const Var w_kx = matmul(t, wv[h], kx);
      const Var w_ky = matmul(t, wv[h], ky);
      slots[0].push_back(transposed_kron(t, w_kx, kxt_r));
      slots[1].push_back(transposed_kron(t, w_kx, kyt_r));
      slots[2].push_back(transposed_kron(t, w_ky, kxt_r));
      slots[3].push_back(transposed_kron(t, w_ky, kyt_r));
    } else {
      slots[2].push_back(transposed_kron(t, wv[h], kxt_r));
      slots[3].push_back(transposed_kron(t, wv[h], kyt_r));
    }
  }
  std::vector<Var> sums;
  for (auto& terms : slots) {
    Var s = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) s = add(t, s, terms[i]);
    sums.push_back(s);
  }
  const Var coef = concat_rows<double>(t, sums);
  const Mat c = to_mat(t.value(coef), phi_.rows(), d);
  const Mat phi_c = phi_ * c;
  const double value = c.cwiseProduct(phi_c).sum() - 2.0 * c.cwiseProduct(beta_).sum() + target_energy_;
  if (grad) {
    const Var seed = t.leaf(to_tensor(2.0 * (phi_c - beta_)));
    t.backward(frobenius_dot(t, coef, seed));
    *grad = zero_params(d, a);
    if (a > 0) grad->map.A = to_mat(t.grad(av), a, d);
    if (a < d) grad->map.B = to_mat(t.grad(bv), d - a, d);
    for (int h = 0; h < 2; ++h) {
      grad->W[h] = to_mat(t.grad(wv[h]), d, d);
      grad->QK[h] = to_mat(t.grad(qv[h]), d, d);
    }
  }
  return value;
}

OptimizeResult optimize(const Objective& f, Vec init, const AdamOptions& opt) {
  if (opt.steps < 1) throw ConfigError("optimize: steps must be at least 1");
  OptimizeResult out;
  Vec x = std::move(init);
  Vec m = Vec::Zero(x.size()), v = Vec::Zero(x.size()), g(x.size());
  out.best = x;
  out.best_loss = std::numeric_limits<double>::infinity();
  double b1t = 1, b2t = 1;
  for (int step = 0; step < opt.steps; ++step) {
    g.setZero();
    const double value = f(x, &g);
    if (!std::isfinite(value) || !g.allFinite()) {
      throw OptimizationError("optimize: non-finite loss or gradient at step " + std::to_string(step), step);
    }
    out.trajectory.push_back(value);
    if (value < out.best_loss) {
      out.best_loss = value;
      out.best = x;
    }
    b1t *= opt.beta1;
    b2t *= opt.beta2;
    m = opt.beta1 * m + (1 - opt.beta1) * g;
    v = opt.beta2 * v + (1 - opt.beta2) * g.cwiseProduct(g);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      x(i) -= opt.lr * (m(i) / (1 - b1t)) / (std::sqrt(v(i) / (1 - b2t)) + opt.eps);
    }
  }
  out.final_loss = f(x, nullptr);
  if (!std::isfinite(out.final_loss)) {
    throw OptimizationError("optimize: non-finite loss at step " + std::to_string(opt.steps), opt.steps);
  }
  if (out.final_loss < out.best_loss) {
    out.best_loss = out.final_loss;
    out.best = x;
  }
  return out;
}

ParamsResult optimize(const MomentLoss& loss, const MesaParams& init, const AdamOptions& opt) {
  const int d = init.d();
  const int a = init.a();
  const Objective f = [&](const Vec& x, Vec* grad) {
    MesaParams g;
    const double value = loss.value(unpack(x, d, a), grad ? &g : nullptr);
    if (grad) *grad = pack(g);
    return value;
  };
  OptimizeResult r = optimize(f, pack(init), opt);
  return ParamsResult{unpack(r.best, d, a), r.best_loss, r.final_loss, std::move(r.trajectory)};
}

LambdaEstimate estimate_lambda(const SamplePool& pool) {
  const int d = pool.spec().d;
  const double sigma2 = pool.spec().sigma * pool.spec().sigma;
  Mat num(static_cast<Eigen::Index>(pool.size()), d), den(static_cast<Eigen::Index>(pool.size()), d);
  parallel_for(pool.size(), [&](size_t s) {
    const Draw& draw = pool[s];
    const Mat w = ridge_from_draw(draw, sigma2);
    for (int i = 0; i < d; ++i) {
      const Vec v = draw.xy.col(i);  // X Yᵀ_{:,i}
      num(static_cast<Eigen::Index>(s), i) = w.row(i).dot(v);
      den(static_cast<Eigen::Index>(s), i) = v.squaredNorm();
    }
  });
  LambdaEstimate out{Vec(d), Vec(d)};
  for (int i = 0; i < d; ++i) {
    const std::vector<double> ni(num.col(i).data(), num.col(i).data() + num.rows());
    const std::vector<double> di(den.col(i).data(), den.col(i).data() + den.rows());
    const Estimate en = estimate(ni), ed = estimate(di);
    if (!(ed.mean > 3 * ed.se) || ed.mean <= 0) {
      throw NumericError("estimate_lambda: denominator of coordinate " + std::to_string(i) + " is not resolved from zero", i);
    }
    const double lambda = en.mean / ed.mean;
    std::vector<double> resid(ni.size());
    for (size_t s = 0; s < ni.size(); ++s) resid[s] = ni[s] - lambda * di[s];
    out.lambda(i) = lambda;
    out.se(i) = estimate(resid).se / ed.mean;
  }
  return out;
}

LambdaEstimate estimate_lambda(const TaskSpec& spec) { return estimate_lambda(SamplePool(spec, kLambdaStream)); }

MesaParams construct_skip_optimum(const Vec& lambda) {
  if (!lambda.allFinite()) throw NumericError("construct_skip_optimum: non-finite lambda");
  const int d = static_cast<int>(lambda.size());
  MesaParams p = zero_params(d, d);
  p.map = CopyMap::truncation(d, d);
  const Mat diag = lambda.asDiagonal();
  p.W[0] = -0.5 * diag;
  p.W[1] = diag;
  p.QK[0] = Mat::Identity(d, d);
  p.QK[1] = Mat::Identity(d, d);
  return p;
}

Estimate rank_gap(const SamplePool& pool, const Vec& lambda, int a) {
  const int d = pool.spec().d;
  if (a < 0 || a > d) throw ConfigError("rank_gap: a=" + std::to_string(a) + " outside [0, d]");
  return estimate(pool.map([&](const Draw& draw) {
    if (a == d) return 0.0;
    const Mat m = lambda.asDiagonal() * draw.xy.transpose();
    const Eigen::JacobiSVD<Mat> svd(m);
    double tail = 0;
    for (int i = a; i < d; ++i) tail += svd.singularValues()(i) * svd.singularValues()(i);
    return tail;
  }));
}

Estimate rank_gap(const TaskSpec& spec, int a) {
  return rank_gap(SamplePool(spec, kRankStream), estimate_lambda(spec).lambda, a);
}

TheoremReport verify_theorem(const TaskSpec& spec, const TheoremOptions& opt) {
  spec.validate();
  TheoremReport r;
  r.spec = spec;
  r.precondition_ok = spec.precondition_holds();
  const SamplePool train(spec, kTrainStream);
  const MomentLoss losses[2] = {MomentLoss(train, Family::MHA), MomentLoss(train, Family::Skip)};
  MesaParams best[2];
  double best_loss[2] = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  bool found[2] = {false, false};
  for (int restart = 0; restart < opt.restarts; ++restart) {
    Rng rng(Rng::stream_seed(spec.seed, kInitStream + static_cast<uint64_t>(restart)));
    const MesaParams init = random_params(spec.d, spec.a, rng, opt.init_std);
    for (int k = 0; k < 2; ++k) {
      RunOutcome run;
      run.family = losses[k].family();
      run.restart = restart;
      try {
        const ParamsResult res = optimize(losses[k], init, opt.adam);
        run.best_loss = res.best_loss;
        if (res.best_loss < best_loss[k]) {
          best_loss[k] = res.best_loss;
          best[k] = res.best;
          found[k] = true;
        }
      } catch (const OptimizationError& e) {
        run.ok = false;
        run.failed_step = e.index();
        run.error = e.what();
      }
      r.runs.push_back(run);
    }
  }
  r.lambda = estimate_lambda(spec);
  r.c_lower = rank_gap(SamplePool(spec, kRankStream), r.lambda.lambda, spec.a);
  r.runs_ok = found[0] && found[1];
  if (!r.runs_ok) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    r.l1_min = r.l2_min = r.gap = Estimate{nan, nan};
    return r;
  }
  const SamplePool eval(spec, kEvalStream);
  const std::vector<double> l1 = per_draw_loss(best[0], Family::MHA, eval);
  const std::vector<double> l2 = per_draw_loss(best[1], Family::Skip, eval);
  std::vector<double> diff(l1.size());
  for (size_t i = 0; i < l1.size(); ++i) diff[i] = l1[i] - l2[i];
  r.l1_min = estimate(l1);
  r.l2_min = estimate(l2);
  r.gap = estimate(diff);
  return r;
}

void write_theorem_csv(std::ostream& os, const TheoremReport& r) {
  std::ostringstream s;
  s << std::setprecision(12);
  const Eigen::JacobiSVD<Mat> svd(r.spec.mean_task());
  s << "key,value\n";
  s << "d," << r.spec.d << "\n";
  s << "a," << r.spec.a << "\n";
  s << "n," << r.spec.n << "\n";
  s << "sigma," << r.spec.sigma << "\n";
  s << "w0_min_singular," << svd.singularValues()(r.spec.d - 1) << "\n";
  s << "mc," << r.spec.mc << "\n";
  s << "seed," << r.spec.seed << "\n";
  s << "precondition_ok," << (r.precondition_ok ? 1 : 0) << "\n";
  s << "runs_ok," << (r.runs_ok ? 1 : 0) << "\n";
  s << "l1_min," << r.l1_min.mean << "\n";
  s << "l1_se," << r.l1_min.se << "\n";
  s << "l2_min," << r.l2_min.mean << "\n";
  s << "l2_se," << r.l2_min.se << "\n";
  s << "gap," << r.gap.mean << "\n";
  s << "gap_se," << r.gap.se << "\n";
  s << "gap_z," << r.gap.z() << "\n";
  s << "c_lower," << r.c_lower.mean << "\n";
  s << "c_se," << r.c_lower.se << "\n";
  s << "c_z," << r.c_lower.z() << "\n";
  for (Eigen::Index i = 0; i < r.lambda.lambda.size(); ++i) {
    s << "lambda_" << i << "," << r.lambda.lambda(i) << "\n";
    s << "lambda_se_" << i << "," << r.lambda.se(i) << "\n";
  }
  for (const auto& run : r.runs) {
    const std::string key = "run_" + to_string(run.family) + "_" + std::to_string(run.restart);
    if (run.ok) {
      s << key << "_train_loss," << run.best_loss << "\n";
    } else {
      s << key << "_failed_step," << run.failed_step << "\n";
    }
  }
  os << s.str();
}

const char* const kTheoremRowHeader =
    "d,a,n,sigma,mc,seed,precondition_ok,runs_ok,l1_min,l1_se,l2_min,l2_se,gap,gap_se,gap_z,c_lower,c_se,c_z";

void write_theorem_row(std::ostream& os, const TheoremReport& r) {
  std::ostringstream s;
  s << std::setprecision(12) << kTheoremRowHeader << "\n";
  s << r.spec.d << "," << r.spec.a << "," << r.spec.n << "," << r.spec.sigma << "," << r.spec.mc << "," << r.spec.seed
    << "," << (r.precondition_ok ? 1 : 0) << "," << (r.runs_ok ? 1 : 0) << "," << r.l1_min.mean << "," << r.l1_min.se
    << "," << r.l2_min.mean << "," << r.l2_min.se << "," << r.gap.mean << "," << r.gap.se << "," << r.gap.z() << ","
    << r.c_lower.mean << "," << r.c_lower.se << "," << r.c_lower.z() << "\n";
  os << s.str();
}

std::string theorem_summary(const TheoremReport& r) {
  std::ostringstream s;
  s << std::setprecision(6);
  s << "task: d=" << r.spec.d << " a=" << r.spec.a << " n=" << r.spec.n << " sigma=" << r.spec.sigma
    << " mc=" << r.spec.mc << " seed=" << r.spec.seed << "\n";
  s << "precondition sigma_min(W0) > 2 sqrt(d) sigma: " << (r.precondition_ok ? "holds" : "violated") << "\n";
  if (!r.runs_ok) {
    s << "optimization failed for at least one family\n";
  } else {
    s << "L1 min (two ordinary heads): " << r.l1_min.mean << " +- " << r.l1_min.se << "\n";
    s << "L2 min (value-skip head):    " << r.l2_min.mean << " +- " << r.l2_min.se << "\n";
    s << "gap L1 - L2: " << r.gap.mean << " +- " << r.gap.se << " (z = " << r.gap.z() << ")\n";
  }
  s << "rank gap c(a=" << r.spec.a << "): " << r.c_lower.mean << " +- " << r.c_lower.se << " (z = " << r.c_lower.z()
    << ")\n";
  for (const auto& run : r.runs) {
    s << "  run " << to_string(run.family) << " #" << run.restart << ": ";
    if (run.ok) {
      s << "train loss " << run.best_loss << "\n";
    } else {
      s << "failed at step " << run.failed_step << "\n";
    }
  }
  return s.str();
}

LemmaReport check_lemmas(const TaskSpec& spec, const MesaParams& probe) {
  spec.validate();
  probe.map.validate(spec.d);
  const int d = spec.d;
  const double sigma2 = spec.sigma * spec.sigma;
  const SamplePool pool_a(spec, kLemmaStreamA);
  const SamplePool pool_b(spec, kLemmaStreamB);
  LemmaReport out;
  const Family families[2] = {Family::MHA, Family::Skip};
  for (int k = 0; k < 2; ++k) {
    const Family fam = families[k];
    const Estimate lhs = loss(probe, fam, pool_a);
    const Estimate rhs = estimate(pool_b.map([&](const Draw& draw) {
      const Mat w = ridge_from_draw(draw, sigma2);
      const double residual = (draw.y_query - w * draw.x_query).squaredNorm();
      return residual + (predictor_matrix(probe, fam, draw) - w).squaredNorm();
    }));
    out.decomposition_gap[k] = Estimate{lhs.mean - rhs.mean, std::sqrt(lhs.se * lhs.se + rhs.se * rhs.se)};
    out.cross_term[k] = estimate(pool_b.map([&](const Draw& draw) {
      const Blocks b = decompose(probe, fam, draw);
      return (ridge_from_draw(draw, sigma2) - b.n3).cwiseProduct(b.n1 + b.n2).sum();
    }));
  }
  Mat grads(static_cast<Eigen::Index>(pool_b.size()), d * d);
  parallel_for(pool_b.size(), [&](size_t s) {
    const Draw& draw = pool_b[s];
    const Mat g = 2.0 * (ridge_from_draw(draw, sigma2) * draw.x_query - draw.y_query) * draw.x_query.transpose();
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) grads(static_cast<Eigen::Index>(s), i * d + j) = g(i, j);
  });
  double norm2 = 0, var = 0;
  for (Eigen::Index c = 0; c < grads.cols(); ++c) {
    const Estimate e = estimate(std::vector<double>(grads.col(c).data(), grads.col(c).data() + grads.rows()));
    norm2 += e.mean * e.mean;
    var += e.se * e.se;
  }
  out.ridge_grad_norm = std::sqrt(norm2);
  out.ridge_grad_scale = std::sqrt(var);

  const MesaParams opt = construct_skip_optimum(estimate_lambda(pool_a).lambda);
  const Vec lambda = opt.W[1].diagonal();
  std::vector<double> block_res = pool_b.map([&](const Draw& draw) {
    const Mat target = lambda.asDiagonal() * draw.xy.transpose();
    const Blocks b = decompose(opt, Family::Skip, draw);
    return std::max({b.n1.cwiseAbs().maxCoeff(), b.n2.cwiseAbs().maxCoeff(), (b.n3 - target).cwiseAbs().maxCoeff()});
  });
  std::vector<double> pred_res = pool_b.map([&](const Draw& draw) {
    const Mat target = lambda.asDiagonal() * draw.xy.transpose();
    return (predictor_matrix(opt, Family::Skip, draw) * draw.x_query - target * draw.x_query).cwiseAbs().maxCoeff();
  });
  out.skip_block_residual = *std::max_element(block_res.begin(), block_res.end());
  out.skip_predictor_residual = *std::max_element(pred_res.begin(), pred_res.end());
  return out;
}

}  // namespace skv1::mesa
