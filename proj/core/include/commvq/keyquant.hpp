#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "commvq/linalg.hpp"
#include "commvq/rope.hpp"

namespace commvq {

// Shape of a key quantizer: d-dim keys split into d/2 rotation subspaces,
// grouped `group_size` consecutive subspaces per code, `n_levels` codebook
// rows per subspace, `rounds` residual refinement rounds.
struct KeyQuantConfig {
  size_t d = 0;
  size_t group_size = 0;
  size_t n_levels = 0;
  size_t rounds = 0;

  size_t subspaces() const { return d / 2; }
  size_t groups() const { return subspaces() / group_size; }
  size_t level_bits() const;                // log2(n_levels)
  size_t bits_per_token() const;            // rounds * groups * 2 * level_bits
  void validate() const;                    // throws std::invalid_argument
};

// Codebook entry layout: atom(round, subspace, level) is one commuting 2x2
// matrix [[x, y], [-y, x]]; storage is round-major, then subspace, then level.
struct KeyCodebook {
  KeyQuantConfig config;
  std::vector<CommMat> atoms;

  static KeyCodebook zeros(const KeyQuantConfig& config);

  size_t atom_index(size_t round, size_t subspace, size_t level) const {
    return (round * config.subspaces() + subspace) * config.n_levels + level;
  }
  const CommMat& atom(size_t round, size_t subspace, size_t level) const {
    return atoms[atom_index(round, subspace, level)];
  }
  CommMat& atom(size_t round, size_t subspace, size_t level) {
    return atoms[atom_index(round, subspace, level)];
  }
};

// Per-token code stream: for each round and group, one (a, b) index pair.
struct KeyCodes {
  size_t tokens = 0;
  size_t rounds = 0;
  size_t groups = 0;
  size_t n_levels = 0;
  std::vector<uint16_t> a;
  std::vector<uint16_t> b;

  size_t idx(size_t token, size_t round, size_t group) const {
    return (token * rounds + round) * groups + group;
  }
  static KeyCodes empty(const KeyQuantConfig& config, size_t tokens);
};

// Nearest-center search strategy. Brute force scans explicit centers and is
// the reference; factorized scores base(a, b) - 2(p.u_a + p.v_b), which ranks
// identically because |p|^2 is shared by every center.
enum class AssignSearch { brute_force, factorized };

// EM schedule. t0 = 0 means "median of the initial point-to-center
// distances"; ridge < 0 means "1e-8 scaled to the normal-matrix trace",
// ridge = 0 disables regularization.
struct EmConfig {
  size_t soft_iters = 30;
  size_t hard_iters_max = 100;
  double t0 = 0.0;
  double decay = 0.9;
  double tol = 1e-6;
  double ridge = -1.0;
  uint64_t seed = 1;
  AssignSearch search = AssignSearch::brute_force;
};

// Selector matrix mapping stacked atom parameters
// phi = [x_0, y_0, x_1, y_1, ...] to stacked center coordinates: center
// (a, b) has coordinates (x_a - y_b, y_a + x_b). Shape 2*n^2 x 2*n. Center
// blocks are ordered a-major.
Mat build_T(size_t n_levels);

// Center of code pair (a, b) for one group: the 2*group_size coordinates
// produced by applying atom a's first row and atom b's second row in each
// subspace of the group.
Vec cluster_center(const KeyCodebook& cb, size_t round, size_t group,
                   size_t a, size_t b);

// Nearest-center assignment for points (n x 2*group_size) against one
// (round, group) slice of the codebook. Ties break toward the smallest
// a * n_levels + b.
std::vector<std::pair<uint16_t, uint16_t>> e_step_assign(
    const Mat& points, const KeyCodebook& cb, size_t round, size_t group,
    AssignSearch search = AssignSearch::brute_force);

// Soft assignment weights from a distance matrix (n x n_centers):
// row-wise softmax of -dist / temperature (distances unsquared).
Mat soft_weights(const Mat& dists, double temperature);

// Weighted least-squares refit of one subspace's atoms. points is n x 2,
// weights is n x n_levels^2 (rows sum to 1, columns ordered a-major as in
// build_T), and T_matrix must come from build_T(n_levels). Returns the
// n_levels new atoms. ridge < 0 selects the automatic trace-scaled value;
// 0 disables regularization.
std::vector<CommMat> m_step(const Mat& points, const Mat& weights,
                            const Mat& T_matrix, double ridge = -1.0);

struct KeyTrainReport {
  struct Round {
    // Hard-phase objective (sum of squared residual distances) after each
    // E-step, one sequence per group. Non-increasing by construction.
    std::vector<std::vector<double>> hard_objective;
    double reconstruction_mse = 0.0;  // on the calibration set, cumulative
  };
  std::vector<Round> rounds;
};

struct KeyTrainResult {
  KeyCodebook codebook;
  KeyTrainReport report;
};

// Fits the residual codebook on calibration keys (n x d, pre-rotation).
// Each round fits the residual left by previous rounds; each group is an
// independent clustering problem solved by a soft-to-hard EM schedule.
KeyTrainResult train_key_codebook(const Mat& calib_keys,
                                  const KeyQuantConfig& config,
                                  const EmConfig& em = {});

KeyCodes encode_keys(const Mat& keys, const KeyCodebook& cb,
                     AssignSearch search = AssignSearch::brute_force);
Mat decode_keys(const KeyCodes& codes, const KeyCodebook& cb);

// Payload bits per original key dimension: rounds * log2(n_levels) / group_size.
double avg_bit_key(const KeyQuantConfig& config);

// Codebook storage: rounds * (d/2) * n_levels atoms, two f32 scalars each.
uint64_t key_codebook_bytes(size_t n_levels, size_t rounds, size_t d);
uint64_t key_codebook_bytes(const KeyQuantConfig& config);

void save_key_codebook(const KeyCodebook& cb, const std::string& path);
KeyCodebook load_key_codebook(const std::string& path);

}  // namespace commvq
