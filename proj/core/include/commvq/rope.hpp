#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "commvq/linalg.hpp"

namespace commvq {

// Rotary position embedding over interleaved coordinate pairs
// (v[0],v[1]), (v[2],v[3]), ... Subspace j (0-based) rotates by angle
// m * theta, theta = base^(-2j/d).
struct RopeParams {
  size_t d = 0;
  double base = 10000.0;
  std::vector<double> thetas;  // d/2 per-subspace frequencies

  static RopeParams make(size_t d, double base = 10000.0);
  size_t subspaces() const { return thetas.size(); }
};

// Frequency for 1-based subspace index i: base^(-2(i-1)/d). d must be even.
double theta(size_t i, size_t d, double base = 10000.0);

// 2x2 rotation by `angle`, laid out [[cos, -sin], [sin, cos]].
Mat rotation_block(double angle);

// Rotation block for position m in subspace `subspace` (0-based).
Mat rope_block(const RopeParams& params, size_t m, size_t subspace);

// Applies the position-m rotation to a row vector:
// (x, y) -> (x cos - y sin, x sin + y cos) per subspace pair.
Vec apply_rope(const RopeParams& params, const Vec& v, size_t m);

// Member of the commutative family [[x, y], [-y, x]]: a scaled rotation.
// Every pair of members commutes, and the family contains all RoPE blocks,
// so rotations can be folded through these matrices in either order.
struct CommMat {
  double x = 0.0;
  double y = 0.0;

  // Row-vector product p * A for A = [[x, y], [-y, x]].
  void apply(double px, double py, double& ox, double& oy) const {
    ox = px * x - py * y;
    oy = px * y + py * x;
  }

  Mat dense() const;
};

// Validates finiteness and constructs the family member with entries
// [[x, y], [-y, x]].
CommMat comm_mat(double x, double y);

// Max absolute entry of A*B - B*A; exactly zero for family members.
double commute_residual(const CommMat& a, const CommMat& b);

// Cos/sin of m * theta_j for all positions m < size() and subspaces j,
// computed once so attention kernels can look angles up instead of calling
// cos/sin per step.
class RopeTable {
 public:
  RopeTable() = default;
  explicit RopeTable(RopeParams params) : params_(std::move(params)) {}

  void ensure(size_t n_positions);
  size_t size() const { return n_pos_; }
  const RopeParams& params() const { return params_; }

  double cos_at(size_t m, size_t subspace) const {
    return cos_[m * params_.subspaces() + subspace];
  }
  double sin_at(size_t m, size_t subspace) const {
    return sin_[m * params_.subspaces() + subspace];
  }
  const double* cos_row(size_t m) const {
    return cos_.data() + m * params_.subspaces();
  }
  const double* sin_row(size_t m) const {
    return sin_.data() + m * params_.subspaces();
  }

 private:
  RopeParams params_;
  size_t n_pos_ = 0;
  std::vector<double> cos_;
  std::vector<double> sin_;
};

}  // namespace commvq
