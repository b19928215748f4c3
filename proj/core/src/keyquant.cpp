#include "commvq/keyquant.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "commvq/error.hpp"
#include "commvq/rng.hpp"

namespace commvq {

namespace {

bool is_pow2(size_t v) { return v != 0 && (v & (v - 1)) == 0; }

size_t ilog2(size_t v) {
  size_t b = 0;
  while ((size_t{1} << b) < v) ++b;
  return b;
}

// Distinct stream per (seed, round, group) so the fitting order of groups
// never changes results.
uint64_t mix_seed(uint64_t seed, size_t round, size_t group) {
  uint64_t h = seed;
  h ^= (round + 1) * 0x9E3779B97F4A7C15ull;
  h ^= (h >> 29);
  h *= 0xBF58476D1CE4E5B9ull;
  h ^= (group + 1) * 0x94D049BB133111EBull;
  h ^= (h >> 32);
  return h;
}

}  // namespace

size_t KeyQuantConfig::level_bits() const { return ilog2(n_levels); }

size_t KeyQuantConfig::bits_per_token() const {
  return rounds * groups() * 2 * level_bits();
}

void KeyQuantConfig::validate() const {
  if (d == 0 || d % 2 != 0)
    throw std::invalid_argument("KeyQuantConfig: d must be positive and even");
  if (group_size == 0)
    throw std::invalid_argument("KeyQuantConfig: group_size must be positive");
  if (subspaces() % group_size != 0)
    throw std::invalid_argument(
        "KeyQuantConfig: group_size must divide d/2 evenly");
  if (!is_pow2(n_levels))
    throw std::invalid_argument(
        "KeyQuantConfig: n_levels must be a power of two");
  if (n_levels > 65536)
    throw std::invalid_argument("KeyQuantConfig: n_levels too large");
  if (rounds == 0)
    throw std::invalid_argument("KeyQuantConfig: rounds must be positive");
}

KeyCodebook KeyCodebook::zeros(const KeyQuantConfig& config) {
  config.validate();
  KeyCodebook cb;
  cb.config = config;
  cb.atoms.assign(config.rounds * config.subspaces() * config.n_levels,
                  CommMat{});
  return cb;
}

KeyCodes KeyCodes::empty(const KeyQuantConfig& config, size_t tokens) {
  KeyCodes c;
  c.tokens = tokens;
  c.rounds = config.rounds;
  c.groups = config.groups();
  c.n_levels = config.n_levels;
  c.a.assign(tokens * c.rounds * c.groups, 0);
  c.b.assign(tokens * c.rounds * c.groups, 0);
  return c;
}

Mat build_T(size_t n_levels) {
  if (n_levels == 0) throw std::invalid_argument("build_T: n_levels == 0");
  size_t n = n_levels;
  Mat t(2 * n * n, 2 * n);
  for (size_t a = 0; a < n; ++a) {
    for (size_t b = 0; b < n; ++b) {
      size_t r0 = 2 * (a * n + b);
      t(r0, 2 * a) += 1.0;      // x_a
      t(r0, 2 * b + 1) -= 1.0;  // -y_b
      t(r0 + 1, 2 * b) += 1.0;  // x_b
      t(r0 + 1, 2 * a + 1) += 1.0;  // y_a
    }
  }
  return t;
}

Vec cluster_center(const KeyCodebook& cb, size_t round, size_t group,
                   size_t a, size_t b) {
  const KeyQuantConfig& cfg = cb.config;
  if (round >= cfg.rounds || group >= cfg.groups() || a >= cfg.n_levels ||
      b >= cfg.n_levels)
    throw std::invalid_argument("cluster_center: index out of range");
  size_t g = cfg.group_size;
  Vec c(2 * g);
  for (size_t s = 0; s < g; ++s) {
    size_t sub = group * g + s;
    const CommMat& aa = cb.atom(round, sub, a);
    const CommMat& ab = cb.atom(round, sub, b);
    c[2 * s] = aa.x - ab.y;
    c[2 * s + 1] = aa.y + ab.x;
  }
  return c;
}

namespace {

// Precomputed quantities for assigning points to the L^2 centers of one
// (round, group) slice. Atoms are subspace-major, level-minor. A center
// (a, b) decomposes as u_a + v_b, which drives the factorized search.
struct CenterCache {
  size_t g = 0;
  size_t L = 0;
  std::vector<double> u;        // L x 2g, row a = first-row stack of atom a
  std::vector<double> v;        // L x 2g, row b = second-row stack of atom b
  std::vector<double> base;     // L x L: |u_a|^2 + |v_b|^2 + 2 u_a.v_b
  std::vector<double> centers;  // L^2 x 2g, row a*L+b = u_a + v_b

  CenterCache(const CommMat* atoms, size_t g_, size_t L_) : g(g_), L(L_) {
    size_t w = 2 * g;
    u.assign(L * w, 0.0);
    v.assign(L * w, 0.0);
    for (size_t l = 0; l < L; ++l) {
      for (size_t s = 0; s < g; ++s) {
        const CommMat& m = atoms[s * L + l];
        u[l * w + 2 * s] = m.x;
        u[l * w + 2 * s + 1] = m.y;
        v[l * w + 2 * s] = -m.y;
        v[l * w + 2 * s + 1] = m.x;
      }
    }
    std::vector<double> unorm(L), vnorm(L);
    for (size_t l = 0; l < L; ++l) {
      unorm[l] = dot({&u[l * w], w}, {&u[l * w], w});
      vnorm[l] = dot({&v[l * w], w}, {&v[l * w], w});
    }
    base.assign(L * L, 0.0);
    for (size_t a = 0; a < L; ++a)
      for (size_t b = 0; b < L; ++b)
        base[a * L + b] =
            unorm[a] + vnorm[b] + 2.0 * dot({&u[a * w], w}, {&v[b * w], w});
    centers.assign(L * L * w, 0.0);
    for (size_t a = 0; a < L; ++a)
      for (size_t b = 0; b < L; ++b)
        for (size_t i = 0; i < w; ++i)
          centers[(a * L + b) * w + i] = u[a * w + i] + v[b * w + i];
  }

  std::span<const double> center(size_t a, size_t b) const {
    return {&centers[(a * L + b) * 2 * g], 2 * g};
  }

  // dot(p, u_a) and dot(p, v_b) for all levels.
  void project(const double* p, double* pu, double* pv) const {
    size_t w = 2 * g;
    for (size_t l = 0; l < L; ++l) {
      double su = 0.0, sv = 0.0;
      const double* ur = &u[l * w];
      const double* vr = &v[l * w];
      for (size_t i = 0; i < w; ++i) {
        su += p[i] * ur[i];
        sv += p[i] * vr[i];
      }
      pu[l] = su;
      pv[l] = sv;
    }
  }

  // Exact squared distances, one center at a time.
  void assign_brute(const double* p, uint16_t& a_out, uint16_t& b_out,
                    double& d2_out) const {
    size_t w = 2 * g;
    double best = std::numeric_limits<double>::infinity();
    size_t best_c = 0;
    for (size_t c = 0; c < L * L; ++c) {
      const double* cr = &centers[c * w];
      double s = 0.0;
      for (size_t i = 0; i < w; ++i) {
        double dif = p[i] - cr[i];
        s += dif * dif;
      }
      if (s < best) {
        best = s;
        best_c = c;
      }
    }
    a_out = static_cast<uint16_t>(best_c / L);
    b_out = static_cast<uint16_t>(best_c % L);
    d2_out = best;
  }

  // Same argmin through the u/v decomposition: the |p|^2 term is shared by
  // every center so the scan ranks base - 2(pu_a + pv_b) instead.
  void assign_factorized(const double* pu, const double* pv, double pnorm,
                         uint16_t& a_out, uint16_t& b_out,
                         double& d2_out) const {
    double best = std::numeric_limits<double>::infinity();
    size_t best_c = 0;
    for (size_t a = 0; a < L; ++a) {
      const double* br = &base[a * L];
      double pa2 = 2.0 * pu[a];
      for (size_t b = 0; b < L; ++b) {
        double s = br[b] - pa2 - 2.0 * pv[b];
        size_t c = a * L + b;
        if (s < best) {
          best = s;
          best_c = c;
        }
      }
    }
    a_out = static_cast<uint16_t>(best_c / L);
    b_out = static_cast<uint16_t>(best_c % L);
    d2_out = best + pnorm;
  }
};

// Moment accumulators that feed the atom refit. The normal equations only
// need the joint center weights plus index-marginal weighted point sums, so
// the soft pass never materializes an n x L^2 x 2g tensor.
struct Moments {
  size_t g = 0, L = 0;
  std::vector<double> joint;  // L x L, total weight per center (a, b)
  std::vector<double> num_a;  // L x 2g, sum of w * p marginalized over b
  std::vector<double> num_b;  // L x 2g, sum of w * p marginalized over a

  Moments(size_t g_, size_t L_) : g(g_), L(L_) {
    joint.assign(L * L, 0.0);
    num_a.assign(L * 2 * g, 0.0);
    num_b.assign(L * 2 * g, 0.0);
  }

  void add_hard(const double* p, size_t a, size_t b) {
    size_t w = 2 * g;
    joint[a * L + b] += 1.0;
    for (size_t i = 0; i < w; ++i) {
      num_a[a * w + i] += p[i];
      num_b[b * w + i] += p[i];
    }
  }

  // weights is one point's full L^2 row; marg_a/marg_b are scratch of size L.
  void add_soft(const double* p, const double* weights, double* marg_a,
                double* marg_b) {
    size_t w = 2 * g;
    std::fill(marg_a, marg_a + L, 0.0);
    std::fill(marg_b, marg_b + L, 0.0);
    for (size_t a = 0; a < L; ++a) {
      const double* wr = weights + a * L;
      double* jr = &joint[a * L];
      double sa = 0.0;
      for (size_t b = 0; b < L; ++b) {
        jr[b] += wr[b];
        sa += wr[b];
        marg_b[b] += wr[b];
      }
      marg_a[a] = sa;
    }
    for (size_t l = 0; l < L; ++l) {
      double wa = marg_a[l], wb = marg_b[l];
      if (wa != 0.0) {
        double* r = &num_a[l * w];
        for (size_t i = 0; i < w; ++i) r[i] += wa * p[i];
      }
      if (wb != 0.0) {
        double* r = &num_b[l * w];
        for (size_t i = 0; i < w; ++i) r[i] += wb * p[i];
      }
    }
  }
};

// Solves the ridged normal equations for every subspace of a group given the
// accumulated moments. The system matrix depends only on the joint weights,
// so it is factored once and reused for all subspaces.
std::vector<CommMat> refit_atoms(const Moments& mom, double ridge) {
  size_t L = mom.L, g = mom.g, w = 2 * g;
  Mat a(2 * L, 2 * L);
  for (size_t ia = 0; ia < L; ++ia) {
    for (size_t ib = 0; ib < L; ++ib) {
      double wt = mom.joint[ia * L + ib];
      if (wt == 0.0) continue;
      size_t xa = 2 * ia, ya = 2 * ia + 1, xb = 2 * ib, yb = 2 * ib + 1;
      // x-coordinate rows: x_a - y_b.
      a(xa, xa) += wt;
      a(yb, yb) += wt;
      a(xa, yb) -= wt;
      a(yb, xa) -= wt;
      // y-coordinate rows: y_a + x_b.
      a(xb, xb) += wt;
      a(ya, ya) += wt;
      a(xb, ya) += wt;
      a(ya, xb) += wt;
    }
  }
  double lam = ridge;
  if (lam < 0.0) {
    double trace = 0.0;
    for (size_t i = 0; i < 2 * L; ++i) trace += a(i, i);
    lam = 1e-8 * trace / static_cast<double>(2 * L);
    if (!(lam > 0.0)) lam = 1e-12;
  }
  for (size_t i = 0; i < 2 * L; ++i) a(i, i) += lam;

  CholeskyFactor chol;
  try {
    chol = cholesky_factor(a);
  } catch (const TrainingError&) {
    throw TrainingError(
        "refit_atoms: normal equations singular after ridge; the group's "
        "weights are too degenerate to fit atoms");
  }

  std::vector<CommMat> out(g * L);
  Vec rhs(2 * L);
  for (size_t s = 0; s < g; ++s) {
    for (size_t l = 0; l < L; ++l) {
      // Column x_l collects +num_a on x rows and +num_b on y rows;
      // column y_l collects +num_a on y rows and -num_b on x rows.
      rhs[2 * l] = mom.num_a[l * w + 2 * s] + mom.num_b[l * w + 2 * s + 1];
      rhs[2 * l + 1] = mom.num_a[l * w + 2 * s + 1] - mom.num_b[l * w + 2 * s];
    }
    Vec phi = chol.solve(rhs);
    for (size_t l = 0; l < L; ++l)
      out[s * L + l] = CommMat{phi[2 * l], phi[2 * l + 1]};
  }
  return out;
}

// Soft-to-hard EM for one (round, group) clustering problem.
class GroupEm {
 public:
  GroupEm(const Mat& pts, size_t g, size_t L, const EmConfig& em, Rng rng)
      : pts_(pts), n_(pts.rows), g_(g), L_(L), em_(em), rng_(rng) {
    assign_.assign(n_, {0, 0});
    pnorm_.resize(n_);
    for (size_t p = 0; p < n_; ++p) {
      auto row = pts_.row(p);
      pnorm_[p] = dot(row, row);
    }
  }

  // Runs the schedule and leaves atoms/assignments in place.
  void run() {
    init_atoms();
    double t0 = em_.t0 > 0.0 ? em_.t0 : auto_temperature();
    for (size_t it = 0; it < em_.soft_iters; ++it) {
      double temp = std::max(t0 * std::pow(em_.decay, static_cast<double>(it)),
                             1e-12);
      soft_update(temp);
    }
    hard_phase();
  }

  const std::vector<CommMat>& atoms() const { return atoms_; }
  const std::vector<std::pair<uint16_t, uint16_t>>& assignments() const {
    return assign_;
  }
  const std::vector<double>& objective_trace() const { return obj_trace_; }

 private:
  void init_atoms() {
    atoms_.resize(g_ * L_);
    for (size_t s = 0; s < g_; ++s) {
      // Scale per subspace so initial centers match the data spread.
      double var = 0.0;
      for (size_t p = 0; p < n_; ++p) {
        double x = pts_(p, 2 * s), y = pts_(p, 2 * s + 1);
        var += x * x + y * y;
      }
      var /= static_cast<double>(2 * n_);
      double sigma = std::sqrt(var / 2.0);
      if (!(sigma > 0.0)) sigma = 1e-3;
      for (size_t l = 0; l < L_; ++l)
        atoms_[s * L_ + l] =
            CommMat{sigma * rng_.normal(), sigma * rng_.normal()};
    }
  }

  double auto_temperature() {
    CenterCache cache(atoms_.data(), g_, L_);
    size_t stride = std::max<size_t>(1, n_ / 512);
    std::vector<double> pu(L_), pv(L_);
    std::vector<double> samples;
    samples.reserve((n_ / stride + 1) * L_ * L_);
    for (size_t p = 0; p < n_; p += stride) {
      const double* pr = pts_.row(p).data();
      cache.project(pr, pu.data(), pv.data());
      for (size_t a = 0; a < L_; ++a)
        for (size_t b = 0; b < L_; ++b) {
          double d2 = cache.base[a * L_ + b] - 2.0 * (pu[a] + pv[b]) +
                      pnorm_[p];
          samples.push_back(std::sqrt(std::max(d2, 0.0)));
        }
    }
    size_t mid = samples.size() / 2;
    std::nth_element(samples.begin(), samples.begin() + mid, samples.end());
    double med = samples[mid];
    return med > 0.0 ? med : 1.0;
  }

  void soft_update(double temp) {
    CenterCache cache(atoms_.data(), g_, L_);
    Moments mom(g_, L_);
    std::vector<double> pu(L_), pv(L_), wrow(L_ * L_), ma(L_), mb(L_);
    for (size_t p = 0; p < n_; ++p) {
      const double* pr = pts_.row(p).data();
      cache.project(pr, pu.data(), pv.data());
      // Unsquared distances scored against the annealing temperature.
      double lo = std::numeric_limits<double>::infinity();
      for (size_t a = 0; a < L_; ++a)
        for (size_t b = 0; b < L_; ++b) {
          double d2 = cache.base[a * L_ + b] - 2.0 * (pu[a] + pv[b]) +
                      pnorm_[p];
          double d = std::sqrt(std::max(d2, 0.0));
          wrow[a * L_ + b] = d;
          lo = std::min(lo, d);
        }
      double sum = 0.0;
      for (size_t c = 0; c < L_ * L_; ++c) {
        wrow[c] = std::exp(-(wrow[c] - lo) / temp);
        sum += wrow[c];
      }
      for (size_t c = 0; c < L_ * L_; ++c) wrow[c] /= sum;
      mom.add_soft(pr, wrow.data(), ma.data(), mb.data());
    }
    atoms_ = refit_atoms(mom, em_.ridge);
  }

  // One E-step: assigns every point, accumulates hard moments, returns the
  // objective (sum of squared distances).
  double e_step(Moments& mom, bool brute) {
    CenterCache cache(atoms_.data(), g_, L_);
    std::vector<double> pu(L_), pv(L_);
    double obj = 0.0;
    for (size_t p = 0; p < n_; ++p) {
      const double* pr = pts_.row(p).data();
      uint16_t a, b;
      double d2;
      if (brute) {
        cache.assign_brute(pr, a, b, d2);
      } else {
        cache.project(pr, pu.data(), pv.data());
        cache.assign_factorized(pu.data(), pv.data(), pnorm_[p], a, b, d2);
      }
      assign_[p] = {a, b};
      dist_[p] = d2;
      mom.add_hard(pr, a, b);
      obj += d2;
    }
    return obj;
  }

  // Moves the farthest points onto empty centers. Mutates assignments only;
  // the following M-step pulls atoms toward the new occupancy.
  bool repair_empty(Moments& mom) {
    double threshold = 1e-6 * static_cast<double>(n_) /
                       static_cast<double>(L_ * L_);
    std::vector<size_t> empty;
    for (size_t c = 0; c < L_ * L_; ++c)
      if (mom.joint[c] <= threshold) empty.push_back(c);
    if (empty.empty()) return false;

    std::vector<size_t> order(n_);
    for (size_t p = 0; p < n_; ++p) order[p] = p;
    std::sort(order.begin(), order.end(), [&](size_t x, size_t y) {
      if (dist_[x] != dist_[y]) return dist_[x] > dist_[y];
      return x < y;
    });
    size_t take = std::min(empty.size(), n_);
    for (size_t k = 0; k < take; ++k) {
      size_t c = empty[k];
      assign_[order[k]] = {static_cast<uint16_t>(c / L_),
                           static_cast<uint16_t>(c % L_)};
    }
    // Rebuild moments from the edited assignments.
    mom = Moments(g_, L_);
    for (size_t p = 0; p < n_; ++p)
      mom.add_hard(pts_.row(p).data(), assign_[p].first, assign_[p].second);
    return true;
  }

  void hard_phase() {
    bool brute = em_.search == AssignSearch::brute_force;
    bool repair_enabled = true;
    dist_.assign(n_, 0.0);

    Moments mom(g_, L_);
    double obj = e_step(mom, brute);
    obj_trace_.push_back(obj);

    for (size_t it = 0; it < em_.hard_iters_max; ++it) {
      // Snapshot the moments so a repair that worsens the fit can be undone
      // by refitting from the pre-repair assignments.
      Moments mom_snap(g_, L_);
      bool repaired = false;
      if (repair_enabled) {
        mom_snap = mom;
        repaired = repair_empty(mom);
      }

      atoms_ = refit_atoms(mom, em_.ridge);
      Moments next(g_, L_);
      double new_obj = e_step(next, brute);

      if (repaired && new_obj > obj * (1.0 + 1e-12) + 1e-300) {
        // Repair hurt the objective: roll back and fall through to the
        // plain monotone step, with repair off for the rest of this group.
        atoms_ = refit_atoms(mom_snap, em_.ridge);
        next = Moments(g_, L_);
        new_obj = e_step(next, brute);
        repair_enabled = false;
      }

      obj_trace_.push_back(new_obj);
      mom = std::move(next);
      double drop = obj - new_obj;
      obj = new_obj;
      if (drop <= em_.tol * std::max(obj, 1e-300)) break;
    }
  }

  const Mat& pts_;
  size_t n_, g_, L_;
  EmConfig em_;
  Rng rng_;
  std::vector<CommMat> atoms_;
  std::vector<std::pair<uint16_t, uint16_t>> assign_;
  std::vector<double> pnorm_;
  std::vector<double> dist_;
  std::vector<double> obj_trace_;
};

Mat extract_group(const Mat& m, size_t group, size_t group_size) {
  size_t w = 2 * group_size;
  size_t col0 = group * w;
  Mat out(m.rows, w);
  for (size_t r = 0; r < m.rows; ++r)
    std::memcpy(out.row(r).data(), m.row(r).data() + col0, w * sizeof(double));
  return out;
}

}  // namespace

Mat soft_weights(const Mat& dists, double temperature) {
  if (!(temperature > 0.0))
    throw std::invalid_argument("soft_weights: temperature must be positive");
  if (dists.rows == 0 || dists.cols == 0)
    throw std::invalid_argument("soft_weights: empty distance matrix");
  Mat w(dists.rows, dists.cols);
  for (size_t r = 0; r < dists.rows; ++r) {
    double lo = dists(r, 0);
    for (size_t c = 0; c < dists.cols; ++c) lo = std::min(lo, dists(r, c));
    double sum = 0.0;
    for (size_t c = 0; c < dists.cols; ++c) {
      double e = std::exp(-(dists(r, c) - lo) / temperature);
      w(r, c) = e;
      sum += e;
    }
    for (size_t c = 0; c < dists.cols; ++c) w(r, c) /= sum;
  }
  return w;
}

std::vector<CommMat> m_step(const Mat& points, const Mat& weights,
                            const Mat& T_matrix, double ridge) {
  if (points.cols != 2)
    throw std::invalid_argument("m_step: points must be n x 2");
  if (weights.rows != points.rows)
    throw std::invalid_argument("m_step: weights rows != points rows");
  size_t l2 = weights.cols;
  size_t L = static_cast<size_t>(std::llround(std::sqrt(double(l2))));
  if (L * L != l2)
    throw std::invalid_argument("m_step: weights cols must be a square");
  if (T_matrix.rows != 2 * l2 || T_matrix.cols != 2 * L)
    throw std::invalid_argument("m_step: T matrix shape mismatch");

  // One-subspace group: accumulate the same moments the trainer uses.
  Moments mom(1, L);
  for (size_t p = 0; p < points.rows; ++p) {
    const double* pr = points.row(p).data();
    const double* wr = weights.row(p).data();
    double row_sum = 0.0;
    for (size_t c = 0; c < l2; ++c) row_sum += wr[c];
    if (std::abs(row_sum - 1.0) > 1e-6)
      throw std::invalid_argument("m_step: weight rows must sum to 1");
    for (size_t a = 0; a < L; ++a) {
      for (size_t b = 0; b < L; ++b) {
        double w = wr[a * L + b];
        if (w == 0.0) continue;
        mom.joint[a * L + b] += w;
        mom.num_a[a * 2 + 0] += w * pr[0];
        mom.num_a[a * 2 + 1] += w * pr[1];
        mom.num_b[b * 2 + 0] += w * pr[0];
        mom.num_b[b * 2 + 1] += w * pr[1];
      }
    }
  }
  return refit_atoms(mom, ridge);
}

std::vector<std::pair<uint16_t, uint16_t>> e_step_assign(
    const Mat& points, const KeyCodebook& cb, size_t round, size_t group,
    AssignSearch search) {
  const KeyQuantConfig& cfg = cb.config;
  if (round >= cfg.rounds || group >= cfg.groups())
    throw std::invalid_argument("e_step_assign: index out of range");
  if (points.cols != 2 * cfg.group_size)
    throw std::invalid_argument("e_step_assign: points width != 2*group_size");
  size_t g = cfg.group_size, L = cfg.n_levels;
  const CommMat* slice =
      &cb.atoms[(round * cfg.subspaces() + group * g) * L];
  CenterCache cache(slice, g, L);
  std::vector<std::pair<uint16_t, uint16_t>> out(points.rows);
  std::vector<double> pu(L), pv(L);
  for (size_t p = 0; p < points.rows; ++p) {
    const double* pr = points.row(p).data();
    uint16_t a, b;
    double d2;
    if (search == AssignSearch::brute_force) {
      cache.assign_brute(pr, a, b, d2);
    } else {
      auto row = points.row(p);
      cache.project(pr, pu.data(), pv.data());
      cache.assign_factorized(pu.data(), pv.data(), dot(row, row), a, b, d2);
    }
    out[p] = {a, b};
  }
  return out;
}

KeyTrainResult train_key_codebook(const Mat& calib_keys,
                                  const KeyQuantConfig& config,
                                  const EmConfig& em) {
  config.validate();
  if (calib_keys.cols != config.d)
    throw std::invalid_argument("train_key_codebook: calib width != d");
  if (calib_keys.rows < config.n_levels * config.n_levels)
    throw std::invalid_argument(
        "train_key_codebook: need at least n_levels^2 calibration rows");
  if (!all_finite(calib_keys.data))
    throw std::invalid_argument("train_key_codebook: calib not finite");
  bool all_zero = true;
  for (double x : calib_keys.data)
    if (x != 0.0) {
      all_zero = false;
      break;
    }
  if (all_zero)
    throw TrainingError("train_key_codebook: degenerate all-zero calibration");

  size_t n = calib_keys.rows;
  KeyCodebook cb = KeyCodebook::zeros(config);
  KeyTrainReport report;
  report.rounds.resize(config.rounds);

  Mat residual = calib_keys;
  double denom = static_cast<double>(n * config.d);

  for (size_t r = 0; r < config.rounds; ++r) {
    auto& round_rep = report.rounds[r];
    round_rep.hard_objective.resize(config.groups());
    for (size_t grp = 0; grp < config.groups(); ++grp) {
      Mat pts = extract_group(residual, grp, config.group_size);
      GroupEm fit(pts, config.group_size, config.n_levels, em,
                  Rng(mix_seed(em.seed, r, grp)));
      fit.run();
      round_rep.hard_objective[grp] = fit.objective_trace();

      const auto& atoms = fit.atoms();
      size_t g = config.group_size, L = config.n_levels;
      for (size_t s = 0; s < g; ++s)
        for (size_t l = 0; l < L; ++l)
          cb.atom(r, grp * g + s, l) = atoms[s * L + l];

      // Subtract the assigned centers to form the next round's residual.
      const auto& assign = fit.assignments();
      for (size_t p = 0; p < n; ++p) {
        auto [a, b] = assign[p];
        double* row = residual.row(p).data() + grp * 2 * g;
        for (size_t s = 0; s < g; ++s) {
          const CommMat& aa = atoms[s * L + a];
          const CommMat& ab = atoms[s * L + b];
          row[2 * s] -= aa.x - ab.y;
          row[2 * s + 1] -= aa.y + ab.x;
        }
      }
    }
    double sq = 0.0;
    for (double x : residual.data) sq += x * x;
    round_rep.reconstruction_mse = sq / denom;
  }
  return {std::move(cb), std::move(report)};
}

KeyCodes encode_keys(const Mat& keys, const KeyCodebook& cb,
                     AssignSearch search) {
  const KeyQuantConfig& cfg = cb.config;
  cfg.validate();
  if (keys.cols != cfg.d)
    throw std::invalid_argument("encode_keys: keys width != d");
  KeyCodes codes = KeyCodes::empty(cfg, keys.rows);
  Mat residual = keys;
  size_t g = cfg.group_size, L = cfg.n_levels;
  std::vector<double> pu(L), pv(L);
  for (size_t r = 0; r < cfg.rounds; ++r) {
    for (size_t grp = 0; grp < cfg.groups(); ++grp) {
      const CommMat* slice = &cb.atoms[(r * cfg.subspaces() + grp * g) * L];
      CenterCache cache(slice, g, L);
      size_t w = 2 * g;
      for (size_t p = 0; p < keys.rows; ++p) {
        double* row = residual.row(p).data() + grp * w;
        uint16_t a, b;
        double d2;
        if (search == AssignSearch::brute_force) {
          cache.assign_brute(row, a, b, d2);
        } else {
          double pn = dot({row, w}, {row, w});
          cache.project(row, pu.data(), pv.data());
          cache.assign_factorized(pu.data(), pv.data(), pn, a, b, d2);
        }
        codes.a[codes.idx(p, r, grp)] = a;
        codes.b[codes.idx(p, r, grp)] = b;
        auto c = cache.center(a, b);
        for (size_t i = 0; i < w; ++i) row[i] -= c[i];
      }
    }
  }
  return codes;
}

Mat decode_keys(const KeyCodes& codes, const KeyCodebook& cb) {
  const KeyQuantConfig& cfg = cb.config;
  if (codes.rounds != cfg.rounds || codes.groups != cfg.groups() ||
      codes.n_levels != cfg.n_levels)
    throw std::invalid_argument("decode_keys: codes do not match codebook");
  Mat out(codes.tokens, cfg.d);
  size_t g = cfg.group_size, L = cfg.n_levels;
  for (size_t r = 0; r < cfg.rounds; ++r) {
    for (size_t grp = 0; grp < cfg.groups(); ++grp) {
      const CommMat* slice = &cb.atoms[(r * cfg.subspaces() + grp * g) * L];
      size_t w = 2 * g;
      for (size_t p = 0; p < codes.tokens; ++p) {
        uint16_t a = codes.a[codes.idx(p, r, grp)];
        uint16_t b = codes.b[codes.idx(p, r, grp)];
        if (a >= L || b >= L)
          throw std::invalid_argument("decode_keys: code out of range");
        double* row = out.row(p).data() + grp * w;
        for (size_t s = 0; s < g; ++s) {
          const CommMat& aa = slice[s * L + a];
          const CommMat& ab = slice[s * L + b];
          row[2 * s] += aa.x - ab.y;
          row[2 * s + 1] += aa.y + ab.x;
        }
      }
    }
  }
  return out;
}

double avg_bit_key(const KeyQuantConfig& config) {
  config.validate();
  return static_cast<double>(config.rounds) *
         static_cast<double>(config.level_bits()) /
         static_cast<double>(config.group_size);
}

uint64_t key_codebook_bytes(size_t n_levels, size_t rounds, size_t d) {
  return uint64_t{2} * 2 * n_levels * rounds * (d / 2) * 2;
}

uint64_t key_codebook_bytes(const KeyQuantConfig& config) {
  return key_codebook_bytes(config.n_levels, config.rounds, config.d);
}

namespace {

constexpr uint32_t kKeyMagic = 0x4B515643u;  // "CVQK" little-endian
constexpr uint32_t kFormatVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_f32(std::ostream& os, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  write_u32(os, u);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("unexpected end of file");
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 |
         uint32_t(b[3]) << 24;
}

float read_f32(std::istream& is) {
  uint32_t u = read_u32(is);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

}  // namespace

void save_key_codebook(const KeyCodebook& cb, const std::string& path) {
  cb.config.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_key_codebook: cannot open " + path);
  write_u32(os, kKeyMagic);
  write_u32(os, kFormatVersion);
  write_u32(os, static_cast<uint32_t>(cb.config.d));
  write_u32(os, static_cast<uint32_t>(cb.config.group_size));
  write_u32(os, static_cast<uint32_t>(cb.config.n_levels));
  write_u32(os, static_cast<uint32_t>(cb.config.rounds));
  for (const CommMat& m : cb.atoms) {
    write_f32(os, static_cast<float>(m.x));
    write_f32(os, static_cast<float>(m.y));
  }
  if (!os) throw IoError("save_key_codebook: write failed for " + path);
}

KeyCodebook load_key_codebook(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_key_codebook: cannot open " + path);
  if (read_u32(is) != kKeyMagic)
    throw IoError("load_key_codebook: bad magic in " + path);
  if (read_u32(is) != kFormatVersion)
    throw IoError("load_key_codebook: unsupported version in " + path);
  KeyQuantConfig cfg;
  cfg.d = read_u32(is);
  cfg.group_size = read_u32(is);
  cfg.n_levels = read_u32(is);
  cfg.rounds = read_u32(is);
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw IoError(std::string("load_key_codebook: invalid header: ") +
                  e.what());
  }
  KeyCodebook cb = KeyCodebook::zeros(cfg);
  for (CommMat& m : cb.atoms) {
    m.x = read_f32(is);
    m.y = read_f32(is);
    if (!std::isfinite(m.x) || !std::isfinite(m.y))
      throw IoError("load_key_codebook: non-finite atom in " + path);
  }
  is.peek();
  if (!is.eof()) throw IoError("load_key_codebook: trailing bytes in " + path);
  return cb;
}

}  // namespace commvq
