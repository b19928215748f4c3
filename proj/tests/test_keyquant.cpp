#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "commvq/error.hpp"
#include "commvq/keyquant.hpp"
#include "commvq/rng.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace commvq;

namespace {

// Independent nearest-center scan used to cross-check e_step_assign.
std::pair<uint16_t, uint16_t> nearest_center_scan(std::span<const double> p,
                                                  const KeyCodebook& cb,
                                                  size_t round, size_t group) {
  const size_t L = cb.config.n_levels;
  double best = std::numeric_limits<double>::infinity();
  size_t best_a = 0, best_b = 0;
  for (size_t a = 0; a < L; ++a) {
    for (size_t b = 0; b < L; ++b) {
      Vec c = cluster_center(cb, round, group, a, b);
      double dist = 0.0;
      for (size_t j = 0; j < c.size(); ++j) {
        double diff = p[j] - c[j];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        best_a = a;
        best_b = b;
      }
    }
  }
  return {static_cast<uint16_t>(best_a), static_cast<uint16_t>(best_b)};
}

KeyCodebook random_codebook(const KeyQuantConfig& cfg, uint64_t seed) {
  KeyCodebook cb = KeyCodebook::zeros(cfg);
  Rng rng(seed);
  for (CommMat& m : cb.atoms) m = comm_mat(rng.normal(), rng.normal());
  return cb;
}

Mat softmax_weight_rows(size_t n, size_t n_centers, uint64_t seed) {
  Rng rng(seed);
  Mat w(n, n_centers);
  for (size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (size_t c = 0; c < n_centers; ++c) {
      double e = std::exp(rng.normal());
      w(i, c) = e;
      sum += e;
    }
    for (size_t c = 0; c < n_centers; ++c) w(i, c) /= sum;
  }
  return w;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_SUITE_BEGIN("keyquant");

TEST_CASE("config arithmetic and validation") {
  KeyQuantConfig cfg{1024, 64, 64, 11};
  cfg.validate();
  CHECK(cfg.subspaces() == 512);
  CHECK(cfg.groups() == 8);
  CHECK(cfg.level_bits() == 6);
  CHECK(cfg.bits_per_token() == 1056);
  CHECK(avg_bit_key(cfg) == 1.03125);

  KeyQuantConfig one_bit{2, 1, 2, 1};
  one_bit.validate();
  CHECK(avg_bit_key(one_bit) == 1.0);

  CHECK_THROWS_AS((KeyQuantConfig{3, 1, 2, 1}).validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS((KeyQuantConfig{8, 3, 2, 1}).validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS((KeyQuantConfig{8, 2, 3, 1}).validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS((KeyQuantConfig{8, 2, 2, 0}).validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS((KeyQuantConfig{0, 1, 2, 1}).validate(),
                  std::invalid_argument);
}

TEST_CASE("codebook byte accounting") {
  CHECK(key_codebook_bytes(64, 11, 1024) == 2883584u);   // 2.75 MiB
  CHECK(key_codebook_bytes(64, 21, 1024) == 5505024u);   // 5.25 MiB
  CHECK(key_codebook_bytes(2, 1, 2) == 2u * 1u * 1u * 2u * 4u);
}

TEST_CASE("build_T pinned single-level case") {
  Mat t = build_T(1);
  REQUIRE(t.rows == 2);
  REQUIRE(t.cols == 2);
  CHECK(t(0, 0) == 1.0);
  CHECK(t(0, 1) == -1.0);
  CHECK(t(1, 0) == 1.0);
  CHECK(t(1, 1) == 1.0);
}

TEST_CASE("build_T matches the center definition for every pair") {
  for (size_t L : {2u, 4u}) {
    Mat t = build_T(L);
    REQUIRE(t.rows == 2 * L * L);
    REQUIRE(t.cols == 2 * L);
    for (size_t a = 0; a < L; ++a) {
      for (size_t b = 0; b < L; ++b) {
        Eigen::MatrixXd sel = oracles::center_selector(a, b, L);
        size_t c = a * L + b;
        for (size_t col = 0; col < 2 * L; ++col) {
          CHECK(t(2 * c, col) == sel(0, static_cast<long>(col)));
          CHECK(t(2 * c + 1, col) == sel(1, static_cast<long>(col)));
        }
      }
    }
  }
}

TEST_CASE("cluster_center hand case") {
  KeyQuantConfig cfg{4, 2, 2, 1};
  KeyCodebook cb = KeyCodebook::zeros(cfg);
  // Subspace 0 atoms: level 0 = (1, 2), level 1 = (3, 4).
  cb.atom(0, 0, 0) = comm_mat(1, 2);
  cb.atom(0, 0, 1) = comm_mat(3, 4);
  // Subspace 1 atoms: level 0 = (5, 6), level 1 = (7, 8).
  cb.atom(0, 1, 0) = comm_mat(5, 6);
  cb.atom(0, 1, 1) = comm_mat(7, 8);

  // Center (a=0, b=1): per subspace (x_a - y_b, y_a + x_b).
  Vec c = cluster_center(cb, 0, 0, 0, 1);
  REQUIRE(c.size() == 4);
  CHECK(c[0] == 1.0 - 4.0);   // subspace 0: x_0 - y'_1
  CHECK(c[1] == 2.0 + 3.0);   //             y_0 + x'_1
  CHECK(c[2] == 5.0 - 8.0);   // subspace 1 uses its own atoms
  CHECK(c[3] == 6.0 + 7.0);

  // Symmetric pair (a=1, b=0).
  Vec c2 = cluster_center(cb, 0, 0, 1, 0);
  CHECK(c2[0] == 3.0 - 2.0);
  CHECK(c2[1] == 4.0 + 1.0);

  CHECK_THROWS_AS(cluster_center(cb, 0, 0, 2, 0), std::invalid_argument);
  CHECK_THROWS_AS(cluster_center(cb, 1, 0, 0, 0), std::invalid_argument);
}

TEST_CASE("e_step_assign equals an exhaustive center scan") {
  KeyQuantConfig cfg{12, 3, 4, 2};
  KeyCodebook cb = random_codebook(cfg, 41);
  Mat points = oracles::random_mat(64, 2 * cfg.group_size, 42);
  for (size_t round = 0; round < cfg.rounds; ++round) {
    for (size_t group = 0; group < cfg.groups(); ++group) {
      auto brute =
          e_step_assign(points, cb, round, group, AssignSearch::brute_force);
      auto fact =
          e_step_assign(points, cb, round, group, AssignSearch::factorized);
      REQUIRE(brute.size() == points.rows);
      for (size_t i = 0; i < points.rows; ++i) {
        auto want = nearest_center_scan(points.row(i), cb, round, group);
        CHECK(brute[i] == want);
        CHECK(fact[i] == brute[i]);
      }
    }
  }
}

TEST_CASE("e_step_assign breaks ties toward the smallest pair index") {
  // All atoms identical: every center coincides, so every point must get
  // (a, b) = (0, 0).
  KeyQuantConfig cfg{4, 2, 4, 1};
  KeyCodebook cb = KeyCodebook::zeros(cfg);
  for (CommMat& m : cb.atoms) m = comm_mat(1.0, -0.5);
  Mat points = oracles::random_mat(16, 4, 77);
  for (auto search : {AssignSearch::brute_force, AssignSearch::factorized}) {
    auto got = e_step_assign(points, cb, 0, 0, search);
    for (auto [a, b] : got) {
      CHECK(a == 0);
      CHECK(b == 0);
    }
  }
}

TEST_CASE("soft_weights pinned row and invariants") {
  Mat dists(1, 2);
  dists(0, 0) = 0.0;
  dists(0, 1) = 1.0;
  Mat w = soft_weights(dists, 1.0);
  double z = 1.0 + std::exp(-1.0);
  CHECK(w(0, 0) == doctest::Approx(1.0 / z).epsilon(1e-15));
  CHECK(w(0, 1) == doctest::Approx(std::exp(-1.0) / z).epsilon(1e-15));

  Mat d2 = oracles::random_mat(8, 5, 9);
  for (double& v : d2.data) v = std::abs(v);
  Mat w2 = soft_weights(d2, 0.37);
  for (size_t i = 0; i < 8; ++i) {
    double sum = 0.0;
    for (size_t c = 0; c < 5; ++c) {
      CHECK(w2(i, c) >= 0.0);
      sum += w2(i, c);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }

  // Very high temperature flattens the distribution.
  Mat w3 = soft_weights(d2, 1e9);
  for (size_t i = 0; i < 8; ++i)
    for (size_t c = 0; c < 5; ++c)
      CHECK(w3(i, c) == doctest::Approx(0.2).epsilon(1e-6));

  CHECK_THROWS_AS(soft_weights(d2, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(soft_weights(Mat(), 1.0), std::invalid_argument);
}

TEST_CASE("m_step matches a dense least-squares oracle") {
  for (size_t L : {2u, 4u}) {
    Mat points = oracles::random_mat(96, 2, 100 + L);
    Mat weights = softmax_weight_rows(96, L * L, 200 + L);
    Mat t = build_T(L);

    for (double ridge : {0.0, 1e-4}) {
      auto atoms = m_step(points, weights, t, ridge);
      Eigen::VectorXd phi = oracles::m_step_oracle(points, weights, L, ridge);
      REQUIRE(atoms.size() == L);
      double num = 0.0, den = 0.0;
      for (size_t l = 0; l < L; ++l) {
        num += std::pow(atoms[l].x - phi(2 * static_cast<long>(l)), 2);
        num += std::pow(atoms[l].y - phi(2 * static_cast<long>(l) + 1), 2);
        den += std::pow(phi(2 * static_cast<long>(l)), 2);
        den += std::pow(phi(2 * static_cast<long>(l) + 1), 2);
      }
      CHECK(std::sqrt(num / den) <= 1e-8);
    }

    // Automatic ridge: the production default must match the oracle solved
    // at the oracle's own trace-scaled lambda.
    auto atoms_auto = m_step(points, weights, t, -1.0);
    double lam = oracles::auto_ridge_oracle(points, weights, L);
    Eigen::VectorXd phi_auto = oracles::m_step_oracle(points, weights, L, lam);
    for (size_t l = 0; l < L; ++l) {
      CHECK(atoms_auto[l].x ==
            doctest::Approx(phi_auto(2 * static_cast<long>(l))).epsilon(1e-8));
      CHECK(atoms_auto[l].y ==
            doctest::Approx(phi_auto(2 * static_cast<long>(l) + 1))
                .epsilon(1e-8));
    }
  }
}

TEST_CASE("m_step ridge perturbation is tiny") {
  Mat points = oracles::random_mat(64, 2, 301);
  Mat weights = softmax_weight_rows(64, 4, 302);
  Mat t = build_T(2);
  auto a0 = m_step(points, weights, t, 0.0);
  auto a1 = m_step(points, weights, t, 1e-8);
  for (size_t l = 0; l < 2; ++l) {
    CHECK(std::abs(a0[l].x - a1[l].x) <= 1e-6);
    CHECK(std::abs(a0[l].y - a1[l].y) <= 1e-6);
  }
}

TEST_CASE("m_step with one level recovers any shared point exactly") {
  // With L = 1 the single center is (x - y, y + x); any 2-d point p is
  // reachable via x = (p0 + p1) / 2, y = (p1 - p0) / 2.
  Mat points(5, 2);
  for (size_t i = 0; i < 5; ++i) {
    points(i, 0) = 3.0;
    points(i, 1) = -1.0;
  }
  Mat weights(5, 1, 1.0);
  auto atoms = m_step(points, weights, build_T(1), 0.0);
  REQUIRE(atoms.size() == 1);
  CHECK(atoms[0].x == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(atoms[0].y == doctest::Approx(-2.0).epsilon(1e-12));
}

TEST_CASE("m_step validates shapes and weight normalization") {
  Mat points = oracles::random_mat(8, 2, 1);
  Mat weights = softmax_weight_rows(8, 4, 2);
  Mat t = build_T(2);
  CHECK_THROWS_AS(m_step(oracles::random_mat(8, 3, 3), weights, t, 0.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(m_step(points, softmax_weight_rows(7, 4, 4), t, 0.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(m_step(points, oracles::random_mat(8, 3, 5), t, 0.0),
                  std::invalid_argument);
  Mat bad = weights;
  bad(0, 0) += 0.5;
  CHECK_THROWS_AS(m_step(points, bad, t, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(m_step(points, weights, build_T(4), 0.0),
                  std::invalid_argument);
}

TEST_CASE("training objective is non-increasing and reconstruction matches") {
  KeyQuantConfig cfg{16, 2, 4, 3};
  Mat calib = oracles::random_mat(512, 16, 7);
  EmConfig em;
  em.seed = 3;
  KeyTrainResult res = train_key_codebook(calib, cfg, em);

  REQUIRE(res.report.rounds.size() == 3);
  for (const auto& round : res.report.rounds) {
    REQUIRE(round.hard_objective.size() == cfg.groups());
    for (const auto& trace : round.hard_objective) {
      REQUIRE(!trace.empty());
      for (size_t i = 1; i < trace.size(); ++i) {
        CHECK(trace[i] <= trace[i - 1] * (1.0 + 1e-9) + 1e-300);
      }
    }
  }
  // Later rounds fit residuals, so cumulative reconstruction error may only
  // improve.
  for (size_t r = 1; r < 3; ++r) {
    CHECK(res.report.rounds[r].reconstruction_mse <=
          res.report.rounds[r - 1].reconstruction_mse + 1e-12);
  }

  // The reported final error is the actual encode/decode error.
  KeyCodes codes = encode_keys(calib, res.codebook);
  Mat rec = decode_keys(codes, res.codebook);
  double err = mse(rec, calib);
  CHECK(err == doctest::Approx(res.report.rounds.back().reconstruction_mse)
                   .epsilon(1e-9));

  // For a single round, decoded keys sit exactly on their centers, so
  // re-encoding them reproduces the codes. (Multi-round decodes sum residual
  // stages and need not re-encode identically per round.)
  KeyQuantConfig cfg1{16, 2, 4, 1};
  KeyTrainResult res1 = train_key_codebook(calib, cfg1, em);
  KeyCodes codes1 = encode_keys(calib, res1.codebook);
  KeyCodes codes1b = encode_keys(decode_keys(codes1, res1.codebook),
                                 res1.codebook);
  CHECK(codes1b.a == codes1.a);
  CHECK(codes1b.b == codes1.b);

  // Brute-force and factorized search agree on the trained codebook.
  KeyCodes codes3 = encode_keys(calib, res.codebook, AssignSearch::factorized);
  CHECK(codes3.a == codes.a);
  CHECK(codes3.b == codes.b);
}

TEST_CASE("training is deterministic for a fixed seed") {
  KeyQuantConfig cfg{8, 2, 2, 2};
  Mat calib = oracles::random_mat(128, 8, 13);
  EmConfig em;
  em.seed = 5;
  KeyTrainResult a = train_key_codebook(calib, cfg, em);
  KeyTrainResult b = train_key_codebook(calib, cfg, em);
  REQUIRE(a.codebook.atoms.size() == b.codebook.atoms.size());
  for (size_t i = 0; i < a.codebook.atoms.size(); ++i) {
    CHECK(a.codebook.atoms[i].x == b.codebook.atoms[i].x);
    CHECK(a.codebook.atoms[i].y == b.codebook.atoms[i].y);
  }
  em.seed = 6;
  KeyTrainResult c = train_key_codebook(calib, cfg, em);
  bool any_diff = false;
  for (size_t i = 0; i < a.codebook.atoms.size(); ++i) {
    if (a.codebook.atoms[i].x != c.codebook.atoms[i].x) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("training recovers planted centers") {
  // Data drawn exactly at the centers of a hidden two-level codebook; the
  // annealed fit must snap to the generating atoms (near-zero error). Two
  // levels keeps the landscape benign enough that recovery is deterministic;
  // denser planted codebooks admit local optima for any k-means-style fit.
  KeyQuantConfig cfg{8, 2, 2, 1};
  KeyCodebook truth = random_codebook(cfg, 99);
  Rng rng(100);
  const size_t n = 2048;
  Mat calib(n, cfg.d);
  for (size_t i = 0; i < n; ++i) {
    for (size_t g = 0; g < cfg.groups(); ++g) {
      size_t a = rng.index(cfg.n_levels);
      size_t b = rng.index(cfg.n_levels);
      Vec c = cluster_center(truth, 0, g, a, b);
      for (size_t j = 0; j < c.size(); ++j)
        calib(i, g * 2 * cfg.group_size + j) = c[j];
    }
  }
  EmConfig em;
  em.seed = 17;
  KeyTrainResult res = train_key_codebook(calib, cfg, em);
  CHECK(res.report.rounds.back().reconstruction_mse <= 1e-8);
}

TEST_CASE("training validates its inputs") {
  KeyQuantConfig cfg{8, 2, 4, 1};
  CHECK_THROWS_AS(train_key_codebook(oracles::random_mat(64, 6, 1), cfg, {}),
                  std::invalid_argument);
  CHECK_THROWS_AS(train_key_codebook(oracles::random_mat(15, 8, 1), cfg, {}),
                  std::invalid_argument);
  CHECK_THROWS_AS(train_key_codebook(Mat(64, 8, 0.0), cfg, {}), TrainingError);
}

TEST_CASE("decode_keys validates code/codebook agreement") {
  KeyQuantConfig cfg{8, 2, 2, 1};
  KeyCodebook cb = random_codebook(cfg, 3);
  KeyCodes codes = KeyCodes::empty(cfg, 4);
  codes.a[0] = 5;  // out of range for n_levels = 2
  CHECK_THROWS_AS(decode_keys(codes, cb), std::invalid_argument);
  KeyCodes wrong = KeyCodes::empty(KeyQuantConfig{8, 2, 2, 2}, 4);
  CHECK_THROWS_AS(decode_keys(wrong, cb), std::invalid_argument);
}

TEST_CASE("codebook serialization round-trips") {
  KeyQuantConfig cfg{12, 3, 4, 2};
  KeyCodebook cb = random_codebook(cfg, 55);
  std::string path = temp_path("kq_roundtrip.cvqk");
  save_key_codebook(cb, path);
  KeyCodebook back = load_key_codebook(path);
  CHECK(back.config.d == cfg.d);
  CHECK(back.config.group_size == cfg.group_size);
  CHECK(back.config.n_levels == cfg.n_levels);
  CHECK(back.config.rounds == cfg.rounds);
  REQUIRE(back.atoms.size() == cb.atoms.size());
  for (size_t i = 0; i < cb.atoms.size(); ++i) {
    // Storage is f32; the loaded values are the f32 roundings.
    CHECK(back.atoms[i].x == static_cast<double>(static_cast<float>(cb.atoms[i].x)));
    CHECK(back.atoms[i].y == static_cast<double>(static_cast<float>(cb.atoms[i].y)));
  }

  // Saving the loaded codebook again is byte-identical.
  std::string path2 = temp_path("kq_roundtrip2.cvqk");
  save_key_codebook(back, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), {});
  std::string b2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(b1 == b2);
  CHECK(b1.size() == 4 + 4 + 4 * 4 + cb.atoms.size() * 8);

  // Corruption is rejected.
  std::string bad = b1;
  bad[0] = 'X';
  std::string bad_path = temp_path("kq_badmagic.cvqk");
  std::ofstream(bad_path, std::ios::binary).write(bad.data(), bad.size());
  CHECK_THROWS_AS(load_key_codebook(bad_path), IoError);
  std::string trunc_path = temp_path("kq_trunc.cvqk");
  std::ofstream(trunc_path, std::ios::binary).write(b1.data(), b1.size() - 5);
  CHECK_THROWS_AS(load_key_codebook(trunc_path), IoError);
  CHECK_THROWS_AS(load_key_codebook(temp_path("kq_missing.cvqk")), IoError);

  std::remove(path.c_str());
  std::remove(path2.c_str());
  std::remove(bad_path.c_str());
  std::remove(trunc_path.c_str());
}

TEST_SUITE_END();
