#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <random>
#include <vector>

#include <Eigen/Dense>
#include <torch/torch.h>

#include "posekey/evaluation.hpp"

namespace posekey::testing {

inline GaussianStats stats(const Eigen::VectorXd& mu, const Eigen::MatrixXd& cov) {
  GaussianStats s;
  s.mean = torch::from_blob(const_cast<double*>(mu.data()), {mu.size()}, torch::kFloat64).clone();
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = cov;
  s.covariance = torch::from_blob(rm.data(), {cov.rows(), cov.cols()}, torch::kFloat64).clone();
  return s;
}

inline Eigen::MatrixXd random_psd(std::mt19937_64& rng, int n, int rank) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd a(n, rank);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < rank; ++j) a(i, j) = g(rng);
  return a * a.transpose() / rank;
}

// ||mu1 - mu2||^2 + Tr(S1) + Tr(S2) - 2 sum sqrt(eig(S1 S2)), using the
// general (non-symmetric) eigen solver on the product directly.
inline double closed_form_fid(const Eigen::VectorXd& m1, const Eigen::MatrixXd& s1, const Eigen::VectorXd& m2,
                       const Eigen::MatrixXd& s2) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(s1 * s2, false);
  double tr_sqrt = 0.0;
  for (int i = 0; i < es.eigenvalues().size(); ++i)
    tr_sqrt += std::sqrt(std::complex<double>(es.eigenvalues()[i])).real();
  return (m1 - m2).squaredNorm() + s1.trace() + s2.trace() - 2 * tr_sqrt;
}

// Straight-loop MS-SSIM on one channel of [0,1] data.
using Plane = std::vector<std::vector<double>>;

inline Plane filter_valid(const Plane& p, const std::vector<double>& k1) {
  const int h = static_cast<int>(p.size()), w = static_cast<int>(p[0].size()), n = static_cast<int>(k1.size());
  Plane out(h - n + 1, std::vector<double>(w - n + 1, 0.0));
  for (int y = 0; y + n <= h; ++y)
    for (int x = 0; x + n <= w; ++x) {
      double s = 0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) s += k1[i] * k1[j] * p[y + i][x + j];
      out[y][x] = s;
    }
  return out;
}

inline Plane pointwise(const Plane& a, const Plane& b) {
  Plane o = a;
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < a[i].size(); ++j) o[i][j] = a[i][j] * b[i][j];
  return o;
}

inline Plane halve(const Plane& p) {
  const size_t h = p.size() / 2, w = p[0].size() / 2;
  Plane o(h, std::vector<double>(w));
  for (size_t i = 0; i < h; ++i)
    for (size_t j = 0; j < w; ++j)
      o[i][j] = 0.25 * (p[2 * i][2 * j] + p[2 * i + 1][2 * j] + p[2 * i][2 * j + 1] + p[2 * i + 1][2 * j + 1]);
  return o;
}

inline double reference_ms_ssim(const torch::Tensor& a, const torch::Tensor& b) {
  const double weights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  std::vector<double> k1(11);
  double ks = 0;
  for (int i = 0; i < 11; ++i) ks += k1[i] = std::exp(-(i - 5) * (i - 5) / (2 * 1.5 * 1.5));
  for (auto& v : k1) v /= ks;
  const int h = static_cast<int>(a.size(1)), w = static_cast<int>(a.size(2));
  int m = 5;
  while (m > 1 && (std::min(h, w) >> (m - 1)) < 11) --m;
  double wsum = 0;
  for (int s = 0; s < m; ++s) wsum += weights[s];
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  for (int c = 0; c < a.size(0); ++c) {
    Plane x(h, std::vector<double>(w)), y = x;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        x[i][j] = (a[c][i][j].item<double>() + 1) / 2;
        y[i][j] = (b[c][i][j].item<double>() + 1) / 2;
      }
    double value = 1.0;
    for (int s = 0; s < m; ++s) {
      auto mx = filter_valid(x, k1), my = filter_valid(y, k1);
      auto exx = filter_valid(pointwise(x, x), k1), eyy = filter_valid(pointwise(y, y), k1);
      auto exy = filter_valid(pointwise(x, y), k1);
      double cs = 0, l_cs = 0;
      const size_t n = mx.size() * mx[0].size();
      for (size_t i = 0; i < mx.size(); ++i)
        for (size_t j = 0; j < mx[0].size(); ++j) {
          const double vx = exx[i][j] - mx[i][j] * mx[i][j];
          const double vy = eyy[i][j] - my[i][j] * my[i][j];
          const double cov = exy[i][j] - mx[i][j] * my[i][j];
          const double csij = (2 * cov + c2) / (vx + vy + c2);
          cs += csij;
          l_cs += csij * (2 * mx[i][j] * my[i][j] + c1) / (mx[i][j] * mx[i][j] + my[i][j] * my[i][j] + c1);
        }
      const double term = s + 1 < m ? cs / n : l_cs / n;
      value *= std::pow(std::max(term, 0.0), weights[s] / wsum);
      x = halve(x);
      y = halve(y);
    }
    total += value;
  }
  return std::clamp(total / a.size(0), 0.0, 1.0);
}

// Max relative error between an autograd gradient and central differences.
template <class F>
inline double gradient_error(F f, torch::Tensor x, double h = 1e-4) {
  auto xg = x.clone().requires_grad_(true);
  auto y = f(xg);
  y.backward();
  auto analytic = xg.grad();
  auto flat = x.clone().view(-1);
  auto numeric = torch::zeros_like(flat);
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double v = flat[i].item<double>();
    flat[i] = v + h;
    const double up = f(flat.view(x.sizes())).template item<double>();
    flat[i] = v - h;
    const double down = f(flat.view(x.sizes())).template item<double>();
    flat[i] = v;
    numeric[i] = (up - down) / (2 * h);
  }
  const double denom = std::max(numeric.abs().max().item<double>(), 1e-6);
  return (analytic.view(-1) - numeric).abs().max().item<double>() / denom;
}

}  // namespace posekey::testing
