#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace commvq {

using Vec = std::vector<double>;

// Dense row-major matrix of doubles. All training and reconstruction math
// runs in double; narrowing to f32 happens only at serialization boundaries.
struct Mat {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(size_t r, size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(size_t r, size_t c) { return data[r * cols + c]; }
  double operator()(size_t r, size_t c) const { return data[r * cols + c]; }

  std::span<double> row(size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(size_t r) const {
    return {data.data() + r * cols, cols};
  }

  static Mat identity(size_t n);
};

// C = A * B. The inner accumulation order is fixed (k-major, left to right)
// so results are bit-stable across runs and platforms.
Mat matmul(const Mat& a, const Mat& b);

// y = x * A for a row vector x (size A.rows). Same accumulation order.
Vec matvec_left(const Vec& x, const Mat& a);

double dot(std::span<const double> a, std::span<const double> b);
double squared_distance(std::span<const double> a, std::span<const double> b);

// Numerically stable softmax: subtracts the max before exponentiating.
// Rejects empty input.
Vec softmax_row(std::span<const double> v);

// Mean squared error over all entries. Shapes must match.
double mse(const Mat& a, const Mat& b);
double mse(std::span<const double> a, std::span<const double> b);

// Solves A x = b for symmetric positive definite A via Cholesky.
// Throws TrainingError if A is not positive definite.
Vec cholesky_solve(const Mat& a, const Vec& b);

// Factorization form for reusing one matrix across many right-hand sides.
struct CholeskyFactor {
  Mat l;  // lower triangular
  Vec solve(const Vec& b) const;
};
CholeskyFactor cholesky_factor(const Mat& a);

bool all_finite(std::span<const double> v);

}  // namespace commvq
