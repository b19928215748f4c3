#include "commvq/rope.hpp"

#include <cmath>
#include <stdexcept>

namespace commvq {

double theta(size_t i, size_t d, double base) {
  if (d == 0 || d % 2 != 0) throw std::invalid_argument("theta: d must be even");
  if (i < 1 || i > d / 2) throw std::invalid_argument("theta: index out of range");
  if (!(base > 0.0)) throw std::invalid_argument("theta: base must be positive");
  double exponent = -2.0 * static_cast<double>(i - 1) / static_cast<double>(d);
  return std::pow(base, exponent);
}

RopeParams RopeParams::make(size_t d, double base) {
  if (d == 0 || d % 2 != 0)
    throw std::invalid_argument("RopeParams: d must be positive and even");
  RopeParams p;
  p.d = d;
  p.base = base;
  p.thetas.resize(d / 2);
  for (size_t j = 0; j < d / 2; ++j) p.thetas[j] = theta(j + 1, d, base);
  return p;
}

Mat rotation_block(double angle) {
  double c = std::cos(angle);
  double s = std::sin(angle);
  Mat m(2, 2);
  m(0, 0) = c;
  m(0, 1) = -s;
  m(1, 0) = s;
  m(1, 1) = c;
  return m;
}

Mat rope_block(const RopeParams& params, size_t m, size_t subspace) {
  if (subspace >= params.subspaces())
    throw std::invalid_argument("rope_block: subspace out of range");
  return rotation_block(static_cast<double>(m) * params.thetas[subspace]);
}

Vec apply_rope(const RopeParams& params, const Vec& v, size_t m) {
  if (v.size() != params.d)
    throw std::invalid_argument("apply_rope: vector size != d");
  Vec out(v.size());
  for (size_t j = 0; j < params.subspaces(); ++j) {
    double a = static_cast<double>(m) * params.thetas[j];
    double c = std::cos(a);
    double s = std::sin(a);
    double x = v[2 * j];
    double y = v[2 * j + 1];
    out[2 * j] = x * c - y * s;
    out[2 * j + 1] = x * s + y * c;
  }
  return out;
}

Mat CommMat::dense() const {
  Mat m(2, 2);
  m(0, 0) = x;
  m(0, 1) = y;
  m(1, 0) = -y;
  m(1, 1) = x;
  return m;
}

CommMat comm_mat(double x, double y) {
  if (!std::isfinite(x) || !std::isfinite(y))
    throw std::invalid_argument("comm_mat: entries must be finite");
  return CommMat{x, y};
}

double commute_residual(const CommMat& a, const CommMat& b) {
  Mat ab = matmul(a.dense(), b.dense());
  Mat ba = matmul(b.dense(), a.dense());
  double mx = 0.0;
  for (size_t i = 0; i < 4; ++i)
    mx = std::max(mx, std::abs(ab.data[i] - ba.data[i]));
  return mx;
}

void RopeTable::ensure(size_t n_positions) {
  if (n_positions <= n_pos_) return;
  size_t s = params_.subspaces();
  if (s == 0) throw std::invalid_argument("RopeTable: params not set");
  cos_.resize(n_positions * s);
  sin_.resize(n_positions * s);
  for (size_t m = n_pos_; m < n_positions; ++m) {
    for (size_t j = 0; j < s; ++j) {
      double a = static_cast<double>(m) * params_.thetas[j];
      cos_[m * s + j] = std::cos(a);
      sin_[m * s + j] = std::sin(a);
    }
  }
  n_pos_ = n_positions;
}

}  // namespace commvq
