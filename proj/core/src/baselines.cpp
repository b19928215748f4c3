#include "commvq/baselines.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <stdexcept>

namespace commvq {

namespace {

// Deterministic round-half-to-even, independent of the FP environment.
double round_half_even(double x) {
  double lo = std::floor(x);
  double frac = x - lo;
  if (frac < 0.5) return lo;
  if (frac > 0.5) return lo + 1.0;
  return (std::fmod(lo, 2.0) == 0.0) ? lo : lo + 1.0;
}

// Shortest decimal that round-trips to the same double; stable across runs.
std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void check_bits(unsigned bits) {
  if (bits < 1 || bits > 16)
    throw std::invalid_argument("asym: bits must be in [1, 16]");
}

}  // namespace

AsymCodes asym_quantize(const Vec& t, unsigned bits) {
  check_bits(bits);
  if (t.empty()) throw std::invalid_argument("asym_quantize: empty vector");
  if (!all_finite(t))
    throw std::invalid_argument("asym_quantize: non-finite input");
  double mn = t[0], mx = t[0];
  for (double v : t) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  AsymCodes out;
  out.params.bits = bits;
  out.params.zero_point = mn;
  out.codes.resize(t.size());
  double levels = static_cast<double>((1u << bits) - 1);
  if (mx == mn) {
    out.params.scale = 1.0;  // constant token: codes stay 0, exact roundtrip
    return out;
  }
  out.params.scale = (mx - mn) / levels;
  for (size_t i = 0; i < t.size(); ++i) {
    double code = round_half_even((t[i] - mn) / out.params.scale);
    code = std::clamp(code, 0.0, levels);
    out.codes[i] = static_cast<uint16_t>(code);
  }
  return out;
}

Vec asym_dequantize(const std::vector<uint16_t>& codes,
                    const AsymParams& params) {
  check_bits(params.bits);
  if (!(params.scale > 0.0))
    throw std::invalid_argument("asym_dequantize: scale must be positive");
  uint16_t max_code = static_cast<uint16_t>((1u << params.bits) - 1);
  Vec out(codes.size());
  for (size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] > max_code)
      throw std::invalid_argument("asym_dequantize: code out of range");
    out[i] = params.zero_point + codes[i] * params.scale;
  }
  return out;
}

Mat asym_roundtrip(const Mat& data, unsigned bits) {
  Mat out(data.rows, data.cols);
  for (size_t t = 0; t < data.rows; ++t) {
    auto span = data.row(t);
    Vec row(span.begin(), span.end());
    AsymCodes q = asym_quantize(row, bits);
    Vec rec = asym_dequantize(q.codes, q.params);
    for (size_t j = 0; j < data.cols; ++j) out(t, j) = rec[j];
  }
  return out;
}

MseMethod MseMethod::identity(std::string name) {
  MseMethod m;
  m.name = std::move(name);
  m.kind = Kind::identity;
  return m;
}

MseMethod MseMethod::asym(unsigned bits) {
  MseMethod m;
  m.name = "asym-" + std::to_string(bits) + "bit";
  m.kind = Kind::asym;
  m.bits = bits;
  return m;
}

MseMethod MseMethod::value_quantizer(const ValueEncoder& enc,
                                     const ValueCodebook& cb,
                                     std::string name) {
  MseMethod m;
  m.name = std::move(name);
  m.kind = Kind::value_quantizer;
  m.encoder = &enc;
  m.codebook = &cb;
  return m;
}

std::vector<MseRow> mse_report(const Mat& data,
                               const std::vector<MseMethod>& methods) {
  if (data.rows == 0 || data.cols == 0)
    throw std::invalid_argument("mse_report: empty data");
  std::vector<MseRow> rows;
  rows.reserve(methods.size());
  for (const MseMethod& m : methods) {
    MseRow row;
    row.method = m.name;
    switch (m.kind) {
      case MseMethod::Kind::identity:
        row.avg_bit = 16.0;  // stored-as-is baseline, fp16 framing
        row.mse = 0.0;
        break;
      case MseMethod::Kind::asym: {
        check_bits(m.bits);
        row.avg_bit = static_cast<double>(m.bits);
        row.mse = mse(data, asym_roundtrip(data, m.bits));
        break;
      }
      case MseMethod::Kind::value_quantizer: {
        if (m.encoder == nullptr || m.codebook == nullptr)
          throw std::invalid_argument("mse_report: untrained quantizer entry");
        if (m.encoder->d != data.cols || m.codebook->d != data.cols ||
            m.encoder->n_codes != m.codebook->n_codes)
          throw std::invalid_argument(
              "mse_report: quantizer does not match data dimension");
        row.avg_bit = avg_bit_value(m.codebook->n_codes, data.cols);
        double sq = 0.0;
        for (size_t t = 0; t < data.rows; ++t) {
          auto span = data.row(t);
          Vec v(span.begin(), span.end());
          EncoderOut out =
              encoder_forward(v, *m.encoder, EncoderMode::infer, 1.0);
          Vec rec = decode_value(out.bits, *m.codebook);
          for (size_t j = 0; j < data.cols; ++j) {
            double diff = rec[j] - v[j];
            sq += diff * diff;
          }
        }
        row.mse = sq / (static_cast<double>(data.rows) * data.cols);
        break;
      }
    }
    rows.push_back(std::move(row));
  }
  std::sort(rows.begin(), rows.end(), [](const MseRow& a, const MseRow& b) {
    if (a.avg_bit != b.avg_bit) return a.avg_bit > b.avg_bit;
    if (a.mse != b.mse) return a.mse < b.mse;
    return a.method < b.method;
  });
  return rows;
}

std::string mse_report_csv(const std::vector<MseRow>& rows) {
  std::string out = "method,avg_bit,mse\n";
  for (const MseRow& r : rows) {
    out += r.method;
    out += ',';
    out += format_double(r.avg_bit);
    out += ',';
    out += format_double(r.mse);
    out += '\n';
  }
  return out;
}

std::string mse_report_jsonl(const std::vector<MseRow>& rows) {
  std::string out;
  for (const MseRow& r : rows) {
    out += "{\"method\":\"" + r.method + "\",\"avg_bit\":" +
           format_double(r.avg_bit) + ",\"mse\":" + format_double(r.mse) +
           "}\n";
  }
  return out;
}

}  // namespace commvq
