#pragma once

// Dense layer kernels with hand-written reverse passes. Tokens are rows.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include <Eigen/Core>

#include "fragpredict/params.hpp"

namespace fragpredict::nn {

template <typename Scalar>
using Mat = Matrix<Scalar>;

// y = x W + b, with b stored as a 1 x n row.
template <typename Derived, typename Scalar>
Mat<Scalar> Linear(const Eigen::MatrixBase<Derived>& x, const Mat<Scalar>& w, const Mat<Scalar>& b) {
  Mat<Scalar> y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

// Accumulates dW, db and returns dx.
template <typename Scalar>
Mat<Scalar> LinearBackward(const Mat<Scalar>& x, const Mat<Scalar>& w, const Mat<Scalar>& dy,
                           Mat<Scalar>& dw, Mat<Scalar>& db) {
  dw.noalias() += x.transpose() * dy;
  db += dy.colwise().sum();
  return dy * w.transpose();
}

template <typename Scalar>
struct LayerNormCache {
  Mat<Scalar> normalized;                          // x-hat
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rstd;  // 1 / sqrt(var + eps), per row
};

template <typename Scalar>
Mat<Scalar> LayerNorm(const Mat<Scalar>& x, const Mat<Scalar>& gamma, const Mat<Scalar>& beta,
                      Scalar eps, LayerNormCache<Scalar>* cache = nullptr) {
  const auto cols = static_cast<Scalar>(x.cols());
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean = x.rowwise().sum() / cols;
  Mat<Scalar> centered = x.colwise() - mean;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> var = centered.array().square().rowwise().sum() / cols;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rstd = (var.array() + eps).rsqrt();
  Mat<Scalar> xhat = centered.array().colwise() * rstd.array();
  Mat<Scalar> y = xhat.array().rowwise() * gamma.row(0).array();
  y.rowwise() += beta.row(0);
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <typename Scalar>
Mat<Scalar> LayerNormBackward(const LayerNormCache<Scalar>& cache, const Mat<Scalar>& gamma,
                              const Mat<Scalar>& dy, Mat<Scalar>& dgamma, Mat<Scalar>& dbeta) {
  const Mat<Scalar>& xhat = cache.normalized;
  dgamma += (dy.array() * xhat.array()).colwise().sum().matrix();
  dbeta += dy.colwise().sum();
  const Mat<Scalar> dxhat = dy.array().rowwise() * gamma.row(0).array();
  const auto cols = static_cast<Scalar>(dy.cols());
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean_d = dxhat.rowwise().sum() / cols;
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean_dx =
      (dxhat.array() * xhat.array()).rowwise().sum() / cols;
  Mat<Scalar> dx = dxhat.colwise() - mean_d;
  dx.array() -= xhat.array().colwise() * mean_dx.array();
  dx.array().colwise() *= cache.rstd.array();
  return dx;
}

// Exact GELU, x * Phi(x).
template <typename Scalar>
Mat<Scalar> Gelu(const Mat<Scalar>& x) {
  return x.unaryExpr([](Scalar v) {
    return static_cast<Scalar>(0.5) * v * (static_cast<Scalar>(1) + std::erf(v / std::numbers::sqrt2_v<Scalar>));
  });
}

template <typename Scalar>
Mat<Scalar> GeluBackward(const Mat<Scalar>& x, const Mat<Scalar>& dy) {
  const Mat<Scalar> slope = x.unaryExpr([](Scalar v) {
    const Scalar cdf = static_cast<Scalar>(0.5) * (static_cast<Scalar>(1) + std::erf(v / std::numbers::sqrt2_v<Scalar>));
    const Scalar pdf = std::exp(static_cast<Scalar>(-0.5) * v * v) / std::sqrt(2 * std::numbers::pi_v<Scalar>);
    return cdf + v * pdf;
  });
  return dy.cwiseProduct(slope);
}

// Row-wise softmax with max subtraction.
template <typename Scalar>
Mat<Scalar> SoftmaxRows(const Mat<Scalar>& s) {
  Mat<Scalar> e = (s.colwise() - s.rowwise().maxCoeff()).array().exp();
  e.array().colwise() /= e.rowwise().sum().array();
  return e;
}

template <typename Scalar>
struct AttentionCache {
  std::vector<Mat<Scalar>> probs;  // one (n_q x n_k) matrix per head
};

// Multi-head scaled dot-product attention. Head h uses columns
// [h*d, (h+1)*d) of q, k and v, with d = q.cols() / heads.
template <typename Scalar>
Mat<Scalar> MultiHeadAttention(const Mat<Scalar>& q, const Mat<Scalar>& k, const Mat<Scalar>& v,
                               int heads, AttentionCache<Scalar>* cache = nullptr) {
  const Eigen::Index d = q.cols() / heads;
  const Scalar scale = static_cast<Scalar>(1) / std::sqrt(static_cast<Scalar>(d));
  Mat<Scalar> out(q.rows(), v.cols());
  if (cache) cache->probs.resize(heads);
  for (int h = 0; h < heads; ++h) {
    const Mat<Scalar> scores = (q.middleCols(h * d, d) * k.middleCols(h * d, d).transpose()) * scale;
    Mat<Scalar> p = SoftmaxRows(scores);
    out.middleCols(h * d, d).noalias() = p * v.middleCols(h * d, d);
    if (cache) cache->probs[h] = std::move(p);
  }
  return out;
}

template <typename Scalar>
void MultiHeadAttentionBackward(const Mat<Scalar>& q, const Mat<Scalar>& k, const Mat<Scalar>& v,
                                int heads, const AttentionCache<Scalar>& cache, const Mat<Scalar>& dout,
                                Mat<Scalar>& dq, Mat<Scalar>& dk, Mat<Scalar>& dv) {
  const Eigen::Index d = q.cols() / heads;
  const Scalar scale = static_cast<Scalar>(1) / std::sqrt(static_cast<Scalar>(d));
  dq.setZero(q.rows(), q.cols());
  dk.setZero(k.rows(), k.cols());
  dv.setZero(v.rows(), v.cols());
  for (int h = 0; h < heads; ++h) {
    const Mat<Scalar>& p = cache.probs[h];
    const Mat<Scalar> dout_h = dout.middleCols(h * d, d);
    dv.middleCols(h * d, d).noalias() = p.transpose() * dout_h;
    const Mat<Scalar> dp = dout_h * v.middleCols(h * d, d).transpose();
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> row_dot = (dp.array() * p.array()).rowwise().sum();
    const Mat<Scalar> ds = (p.array() * (dp.colwise() - row_dot).array()) * scale;
    dq.middleCols(h * d, d).noalias() = ds * k.middleCols(h * d, d);
    dk.middleCols(h * d, d).noalias() = ds.transpose() * q.middleCols(h * d, d);
  }
}

template <typename Scalar>
Mat<Scalar> GatherRows(const Mat<Scalar>& x, const std::vector<int>& rows) {
  Mat<Scalar> out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  return out;
}

template <typename Scalar>
void ScatterAddRows(const Mat<Scalar>& src, const std::vector<int>& rows, Mat<Scalar>& dst) {
  for (std::size_t i = 0; i < rows.size(); ++i) dst.row(rows[i]) += src.row(static_cast<Eigen::Index>(i));
}

// Binary cross-entropy with logits for one sample.
template <typename Scalar>
Scalar BceWithLogits(Scalar logit, Scalar label) {
  return std::max(logit, Scalar(0)) - logit * label + std::log1p(std::exp(-std::abs(logit)));
}

template <typename Scalar>
Scalar Sigmoid(Scalar z) {
  if (z >= 0) return Scalar(1) / (Scalar(1) + std::exp(-z));
  const Scalar e = std::exp(z);
  return e / (Scalar(1) + e);
}

}  // namespace fragpredict::nn
