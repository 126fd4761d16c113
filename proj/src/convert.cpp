// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#include "skv1/convert.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "skv1/errors.hpp"

namespace skv1 {

namespace {

const std::vector<std::pair<ConversionStrategy, std::string>> kNames = {
    {ConversionStrategy::MeanV, "meanv"}, {ConversionStrategy::MeanVO, "meanvo"}, {ConversionStrategy::TopV, "topv"},
    {ConversionStrategy::TopVO, "topvo"}, {ConversionStrategy::SVD, "svd"}};

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

MatD to_eigen(const Tensor32& t) {
  MatD m(t.rows(), t.cols());
  for (size_t i = 0; i < t.rows(); ++i)
    for (size_t j = 0; j < t.cols(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t(i, j);
  return m;
}

double row_block_norm(const Tensor32& w, size_t r0, size_t rows) {
  double s = 0;
  for (size_t i = r0; i < r0 + rows; ++i)
    for (size_t j = 0; j < w.cols(); ++j) s += static_cast<double>(w(i, j)) * w(i, j);
  return std::sqrt(s);
}

double col_block_norm(const Tensor32& w, size_t c0, size_t cols) {
  double s = 0;
  for (size_t i = 0; i < w.rows(); ++i)
    for (size_t j = c0; j < c0 + cols; ++j) s += static_cast<double>(w(i, j)) * w(i, j);
  return std::sqrt(s);
}

// Indices of the k largest scores, returned in increasing index order. Ties go to the lower index.
std::vector<size_t> top_k(const std::vector<double>& score, size_t k) {
  std::vector<size_t> idx(score.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return score[a] > score[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

void copy_col_block(const Tensor32& src, size_t src_c0, Tensor32& dst, size_t dst_c0, size_t cols) {
  for (size_t i = 0; i < src.rows(); ++i)
    for (size_t j = 0; j < cols; ++j) dst(i, dst_c0 + j) = src(i, src_c0 + j);
}

}  // namespace

std::string to_string(ConversionStrategy s) {
  for (const auto& [k, name] : kNames)
    if (k == s) return name;
  return "?";
}

ConversionStrategy parse_strategy(const std::string& s) {
  for (const auto& [k, name] : kNames)
    if (name == s) return k;
  throw ConfigError("unknown conversion strategy '" + s + "' (expected meanv, meanvo, topv, topvo or svd)");
}

const std::vector<ConversionStrategy>& all_strategies() {
  static const std::vector<ConversionStrategy> all = {ConversionStrategy::MeanV, ConversionStrategy::MeanVO,
                                                      ConversionStrategy::TopV, ConversionStrategy::TopVO,
                                                      ConversionStrategy::SVD};
  return all;
}

Checkpoint convert(const Checkpoint& mha, ConversionStrategy strategy, double ratio) {
  if (mha.config.variant != VariantKind::MHA) {
    throw VariantError("conversion needs a multi-head checkpoint, got variant " + to_string(mha.config.variant));
  }
  check_weights(mha.config, mha.tensors);
  Checkpoint out;
  out.config = mha.config;
  out.config.variant = VariantKind::SkipV1;
  out.config.ratio = ratio;
  out.config.injection = HeadInjection::SecondHalf;
  out.config.validate();
  const size_t H = static_cast<size_t>(mha.config.H), dh = static_cast<size_t>(mha.config.d_head());
  const size_t d = static_cast<size_t>(mha.config.d);
  const size_t local = static_cast<size_t>(local_head_count(mha.config.H, ratio));
  const bool pooling = strategy == ConversionStrategy::MeanV || strategy == ConversionStrategy::MeanVO;
  if (pooling && H != 2 * local) {
    throw ConfigError("pair pooling needs exactly half the heads local; H=" + std::to_string(H) + " keeps " +
                      std::to_string(local));
  }
  out.tensors = mha.tensors;
  for (int l = 2; l <= mha.config.L; ++l) {
    const std::string p = layer_prefix(l);
    const Tensor32& wv = mha.at(p + "attn.wv");
    const Tensor32& wo = mha.at(p + "attn.wo");
    Tensor32 nv = Tensor32::matrix(local * dh, d);
    Tensor32 no = wo;
    switch (strategy) {
      case ConversionStrategy::MeanV:
      case ConversionStrategy::MeanVO:
        for (size_t j = 0; j < local; ++j)
          for (size_t r = 0; r < dh; ++r)
            for (size_t c = 0; c < d; ++c) nv(j * dh + r, c) = 0.5f * (wv(2 * j * dh + r, c) + wv((2 * j + 1) * dh + r, c));
        if (strategy == ConversionStrategy::MeanVO) {
          no.fill(0.0f);
          for (size_t i = 0; i < d; ++i)
            for (size_t j = 0; j < local; ++j)
              for (size_t r = 0; r < dh; ++r) no(i, j * dh + r) = 0.5f * (wo(i, 2 * j * dh + r) + wo(i, (2 * j + 1) * dh + r));
        }
        break;
      case ConversionStrategy::TopV:
      case ConversionStrategy::TopVO: {
        std::vector<double> vnorm(H), onorm(H);
        for (size_t h = 0; h < H; ++h) {
          vnorm[h] = row_block_norm(wv, h * dh, dh);
          onorm[h] = col_block_norm(wo, h * dh, dh);
        }
        const auto vsel = top_k(vnorm, local);
        for (size_t j = 0; j < local; ++j)
          for (size_t r = 0; r < dh; ++r)
            for (size_t c = 0; c < d; ++c) nv(j * dh + r, c) = wv(vsel[j] * dh + r, c);
        if (strategy == ConversionStrategy::TopVO) {
          const auto osel = top_k(onorm, local);
          for (size_t j = 0; j < local; ++j) copy_col_block(wo, osel[j] * dh, no, j * dh, dh);
        }
        break;
      }
      case ConversionStrategy::SVD: {
        const MatD prod = to_eigen(wo) * to_eigen(wv);
        Eigen::JacobiSVD<MatD> svd(prod, Eigen::ComputeThinU | Eigen::ComputeThinV);
        const Eigen::Index rank = static_cast<Eigen::Index>(local * dh);
        const Eigen::VectorXd root = svd.singularValues().head(rank).cwiseSqrt();
        const MatD left = svd.matrixU().leftCols(rank) * root.asDiagonal();
        const MatD right = root.asDiagonal() * svd.matrixV().leftCols(rank).transpose();
        for (Eigen::Index i = 0; i < rank; ++i)
          for (size_t c = 0; c < d; ++c) nv(static_cast<size_t>(i), c) = static_cast<float>(right(i, static_cast<Eigen::Index>(c)));
        for (size_t r = 0; r < d; ++r)
          for (Eigen::Index j = 0; j < rank; ++j) no(r, static_cast<size_t>(j)) = static_cast<float>(left(static_cast<Eigen::Index>(r), j));
        break;
      }
    }
    out.tensors.at(p + "attn.wv") = std::move(nv);
    out.tensors.at(p + "attn.wo") = std::move(no);
  }
  check_weights(out.config, out.tensors);
  return out;
}

}  // namespace skv1
