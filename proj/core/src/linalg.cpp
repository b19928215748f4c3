#include "commvq/linalg.hpp"

#include <cmath>
#include <stdexcept>

#include "commvq/error.hpp"

namespace commvq {

Mat Mat::identity(size_t n) {
  Mat m(n, n);
  for (size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols != b.rows) throw std::invalid_argument("matmul: shape mismatch");
  Mat c(a.rows, b.cols);
  for (size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.data.data() + i * a.cols;
    double* crow = c.data.data() + i * b.cols;
    for (size_t k = 0; k < a.cols; ++k) {
      double aik = arow[k];
      if (aik == 0.0) continue;
      const double* brow = b.data.data() + k * b.cols;
      for (size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

Vec matvec_left(const Vec& x, const Mat& a) {
  if (x.size() != a.rows)
    throw std::invalid_argument("matvec_left: shape mismatch");
  Vec y(a.cols, 0.0);
  for (size_t k = 0; k < a.rows; ++k) {
    double xk = x[k];
    if (xk == 0.0) continue;
    const double* arow = a.data.data() + k * a.cols;
    for (size_t j = 0; j < a.cols; ++j) y[j] += xk * arow[j];
  }
  return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: size mismatch");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("squared_distance: size mismatch");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

Vec softmax_row(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("softmax_row: empty input");
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  Vec out(v.size());
  double sum = 0.0;
  for (size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

double mse(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("mse: size mismatch");
  if (a.empty()) throw std::invalid_argument("mse: empty input");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

double mse(const Mat& a, const Mat& b) {
  if (a.rows != b.rows || a.cols != b.cols)
    throw std::invalid_argument("mse: shape mismatch");
  return mse(std::span<const double>(a.data),
             std::span<const double>(b.data));
}

CholeskyFactor cholesky_factor(const Mat& a) {
  if (a.rows != a.cols)
    throw std::invalid_argument("cholesky_factor: matrix not square");
  size_t n = a.rows;
  Mat l(n, n);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j <= i; ++j) {
      double s = a(i, j);
      for (size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      if (i == j) {
        if (s <= 0.0 || !std::isfinite(s))
          throw TrainingError("cholesky_factor: matrix not positive definite");
        l(i, i) = std::sqrt(s);
      } else {
        l(i, j) = s / l(j, j);
      }
    }
  }
  return CholeskyFactor{std::move(l)};
}

Vec CholeskyFactor::solve(const Vec& b) const {
  size_t n = l.rows;
  if (b.size() != n) throw std::invalid_argument("cholesky solve: size mismatch");
  Vec y(n);
  for (size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
  }
  Vec x(n);
  for (size_t ii = n; ii-- > 0;) {
    double s = y[ii];
    for (size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x[k];
    x[ii] = s / l(ii, ii);
  }
  return x;
}

Vec cholesky_solve(const Mat& a, const Vec& b) {
  return cholesky_factor(a).solve(b);
}

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace commvq
