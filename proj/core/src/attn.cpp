#include "commvq/attn.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace commvq {

std::string FlopReport::to_json() const {
  std::ostringstream os;
  os << "{\"pathway\":\"" << pathway << "\",\"N\":" << tokens
     << ",\"d\":" << d << ",\"N_c\":" << n_codes << ",\"R\":" << rounds
     << ",\"N_cprime\":" << n_levels
     << ",\"predicted_mults\":" << predicted_mults
     << ",\"measured_mults\":" << measured_mults << "}";
  return os.str();
}

namespace {

// Shared attention core used by the reference path (counter off) and the
// naive quantized path (counter on). Rotations take cos/sin either from the
// table or from libm; both evaluate the same expressions.
Vec attention_core(const Vec& q, const Mat& keys, const Mat& values,
                   const RopeParams& rope, size_t t, const RopeTable* table,
                   uint64_t* mults) {
  size_t n = keys.rows;
  size_t d = rope.d;
  size_t subs = rope.subspaces();
  if (n == 0) throw std::invalid_argument("attention: empty cache");
  if (t + 1 < n)
    throw std::invalid_argument("attention: query position precedes cache");
  if (q.size() != d || keys.cols != d || values.rows != n ||
      values.cols != d)
    throw std::invalid_argument("attention: shape mismatch");

  // Query rotated to its position.
  Vec qr(d);
  for (size_t j = 0; j < subs; ++j) {
    double c, s;
    if (table) {
      c = table->cos_at(t, j);
      s = table->sin_at(t, j);
    } else {
      double a = static_cast<double>(t) * rope.thetas[j];
      c = std::cos(a);
      s = std::sin(a);
    }
    double x = q[2 * j], y = q[2 * j + 1];
    qr[2 * j] = x * c - y * s;
    qr[2 * j + 1] = x * s + y * c;
  }
  if (mults) *mults += 2 * d;

  Vec scores(n);
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (size_t i = 0; i < n; ++i) {
    const double* krow = keys.row(i).data();
    double acc = 0.0;
    for (size_t j = 0; j < subs; ++j) {
      double c, s;
      if (table) {
        c = table->cos_at(i, j);
        s = table->sin_at(i, j);
      } else {
        double a = static_cast<double>(i) * rope.thetas[j];
        c = std::cos(a);
        s = std::sin(a);
      }
      double x = krow[2 * j], y = krow[2 * j + 1];
      double rx = x * c - y * s;
      double ry = x * s + y * c;
      acc += qr[2 * j] * rx + qr[2 * j + 1] * ry;
    }
    scores[i] = acc * inv_sqrt_d;
  }
  if (mults) *mults += (2 * d + d + 1) * static_cast<uint64_t>(n);

  Vec w = softmax_row(scores);

  Vec out(d, 0.0);
  for (size_t i = 0; i < n; ++i) {
    double wi = w[i];
    const double* vrow = values.row(i).data();
    for (size_t j = 0; j < d; ++j) out[j] += wi * vrow[j];
  }
  if (mults) *mults += static_cast<uint64_t>(n) * d;
  return out;
}

void validate_input(const AttnInput& in, const RopeTable& table) {
  const KeyQuantConfig& kc = in.key_codebook.config;
  size_t n = in.key_codes.tokens;
  if (n == 0) throw std::invalid_argument("attention: empty cache");
  if (in.value_codes.tokens != n)
    throw std::invalid_argument("attention: key/value token counts differ");
  if (in.t + 1 < n)
    throw std::invalid_argument("attention: query position precedes cache");
  if (in.q.size() != kc.d || in.value_codebook.d != kc.d ||
      in.rope.d != kc.d)
    throw std::invalid_argument("attention: dimension mismatch");
  if (in.value_codes.n_codes != in.value_codebook.n_codes)
    throw std::invalid_argument("attention: value codes/codebook mismatch");
  if (in.key_codes.rounds != kc.rounds ||
      in.key_codes.groups != kc.groups() ||
      in.key_codes.n_levels != kc.n_levels)
    throw std::invalid_argument("attention: key codes/codebook mismatch");
  if (table.params().d != kc.d)
    throw std::invalid_argument("attention: rope table dimension mismatch");
}

FlopReport make_report(const AttnInput& in, const char* pathway) {
  FlopReport r;
  r.pathway = pathway;
  r.tokens = in.key_codes.tokens;
  r.d = in.key_codebook.config.d;
  r.n_codes = in.value_codebook.n_codes;
  r.rounds = in.key_codebook.config.rounds;
  r.n_levels = in.key_codebook.config.n_levels;
  return r;
}

}  // namespace

Vec reference_attention(const Vec& q, const Mat& K, const Mat& V,
                        const RopeParams& rope, size_t t) {
  return attention_core(q, K, V, rope, t, nullptr, nullptr);
}

AttnResult naive_quantized_attention(const AttnInput& in, RopeTable& table) {
  validate_input(in, table);
  size_t n = in.key_codes.tokens;
  size_t d = in.key_codebook.config.d;
  size_t n_codes = in.value_codebook.n_codes;
  table.ensure(std::max(n, in.t + 1));

  FlopReport report = make_report(in, "naive");
  report.predicted_mults = predicted_flops_naive(n, d, n_codes);
  uint64_t mults = 0;

  Mat keys = decode_keys(in.key_codes, in.key_codebook);  // additions only

  // Dense value decode: every (code bit x codebook entry) product is
  // executed, matching the uncompressed decode this pathway models. The
  // result is bit-for-bit equal to decode_values (bits are exactly 0 or 1).
  Mat values(n, d);
  for (size_t i = 0; i < n; ++i) {
    double* vrow = values.row(i).data();
    for (size_t k = 0; k < n_codes; ++k) {
      double bit = static_cast<double>(in.value_codes.get(i, k));
      const double* crow = in.value_codebook.rows.row(k).data();
      for (size_t j = 0; j < d; ++j) vrow[j] += bit * crow[j];
    }
  }
  mults += static_cast<uint64_t>(n) * n_codes * d;

  AttnResult res;
  res.out = attention_core(in.q, keys, values, in.rope, in.t, &table, &mults);
  report.measured_mults = mults;
  res.flops = report;
  return res;
}

AttnResult fused_attention(const AttnInput& in, RopeTable& table) {
  validate_input(in, table);
  const KeyQuantConfig& kc = in.key_codebook.config;
  size_t n = in.key_codes.tokens;
  size_t d = kc.d;
  size_t subs = kc.subspaces();
  size_t g = kc.group_size;
  size_t rounds = kc.rounds;
  size_t levels = kc.n_levels;
  size_t n_codes = in.value_codebook.n_codes;
  table.ensure(std::max(n, in.t + 1));

  FlopReport report = make_report(in, "fused");
  report.predicted_mults =
      predicted_flops_fused(n, d, n_codes, rounds, levels);
  uint64_t mults = 0;

  // Query rotated to position t.
  Vec qr(d);
  for (size_t j = 0; j < subs; ++j) {
    double c = table.cos_at(in.t, j);
    double s = table.sin_at(in.t, j);
    double x = in.q[2 * j], y = in.q[2 * j + 1];
    qr[2 * j] = x * c - y * s;
    qr[2 * j + 1] = x * s + y * c;
  }
  mults += 2 * d;

  // Fold the rotated query through every atom once: p = qr_j * A_l^T.
  // Commutativity lets the per-token rotation act on p instead of the key.
  std::vector<double> px(rounds * subs * levels);
  std::vector<double> py(rounds * subs * levels);
  for (size_t r = 0; r < rounds; ++r) {
    for (size_t j = 0; j < subs; ++j) {
      double qx = qr[2 * j], qy = qr[2 * j + 1];
      size_t base = (r * subs + j) * levels;
      for (size_t l = 0; l < levels; ++l) {
        const CommMat& m = in.key_codebook.atom(r, j, l);
        px[base + l] = qx * m.x + qy * m.y;
        py[base + l] = qy * m.x - qx * m.y;
      }
    }
  }
  mults += uint64_t{2} * d * rounds * levels;

  // Per token: alpha_i = sum over rounds and subspaces of the first
  // component of p_a and second of p_b, both rotated by -i*theta_j. The two
  // rotations share cos/sin factors, so each contributes
  // cos*(px_a + py_b) + sin*(py_a - px_b): two multiplies.
  Vec scores(n);
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (size_t i = 0; i < n; ++i) {
    const double* crow = table.cos_row(i);
    const double* srow = table.sin_row(i);
    double alpha = 0.0;
    for (size_t r = 0; r < rounds; ++r) {
      for (size_t grp = 0; grp < kc.groups(); ++grp) {
        size_t a = in.key_codes.a[in.key_codes.idx(i, r, grp)];
        size_t b = in.key_codes.b[in.key_codes.idx(i, r, grp)];
        if (a >= levels || b >= levels)
          throw std::invalid_argument("fused_attention: code out of range");
        for (size_t s = 0; s < g; ++s) {
          size_t j = grp * g + s;
          size_t base = (r * subs + j) * levels;
          alpha += crow[j] * (px[base + a] + py[base + b]) +
                   srow[j] * (py[base + a] - px[base + b]);
        }
      }
    }
    scores[i] = alpha * inv_sqrt_d;
  }
  mults += static_cast<uint64_t>(n) * (rounds * d + 1);

  Vec w = softmax_row(scores);

  // softmax(A) * S_V: binary selection, additions only.
  Vec z(n_codes, 0.0);
  for (size_t i = 0; i < n; ++i) {
    double wi = w[i];
    const uint8_t* bits = in.value_codes.bits.data() +
                          i * in.value_codes.n_codes;
    for (size_t k = 0; k < n_codes; ++k)
      if (bits[k]) z[k] += wi;
  }

  // Then one pass through the value codebook.
  Vec out(d, 0.0);
  for (size_t k = 0; k < n_codes; ++k) {
    double zk = z[k];
    const double* crow = in.value_codebook.rows.row(k).data();
    for (size_t j = 0; j < d; ++j) out[j] += zk * crow[j];
  }
  mults += uint64_t{n_codes} * d;

  AttnResult res;
  res.out = std::move(out);
  report.measured_mults = mults;
  res.flops = report;
  return res;
}

uint64_t predicted_flops_naive(size_t n_tokens, size_t d, size_t n_codes) {
  if (n_tokens == 0 || d == 0 || n_codes == 0)
    throw std::invalid_argument("predicted_flops_naive: inputs must be > 0");
  uint64_t n = n_tokens;
  return (2 * uint64_t{d} + 1) * n + 2 * uint64_t{d} * n_codes * n;
}

uint64_t predicted_flops_fused(size_t n_tokens, size_t d, size_t n_codes,
                               size_t rounds, size_t n_levels) {
  if (n_tokens == 0 || d == 0 || n_codes == 0 || rounds == 0 ||
      n_levels == 0)
    throw std::invalid_argument("predicted_flops_fused: inputs must be > 0");
  uint64_t n = n_tokens;
  return (uint64_t{rounds} * d + n_codes + 1) * n +
         uint64_t{d} * (n_codes + uint64_t{rounds} * n_levels);
}

}  // namespace commvq
