#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "commvq/linalg.hpp"
#include "commvq/valquant.hpp"

namespace commvq {

// Per-token affine scalar quantization (the standard min/max baseline).
struct AsymParams {
  unsigned bits = 0;
  double scale = 1.0;
  double zero_point = 0.0;
};

struct AsymCodes {
  AsymParams params;
  std::vector<uint16_t> codes;
};

// scale = (max - min) / (2^bits - 1), zero_point = min, codes round
// half-to-even and clamp to [0, 2^bits - 1]. Constant vectors use scale = 1
// with all-zero codes (exact reconstruction). bits in [1, 16]; 16 serves as
// the near-lossless sanity setting. Non-finite input is rejected.
AsymCodes asym_quantize(const Vec& t, unsigned bits);

// codes * scale + zero_point. Out-of-range codes are rejected.
Vec asym_dequantize(const std::vector<uint16_t>& codes,
                    const AsymParams& params);

// Quantize + dequantize every row of `data` at the given width.
Mat asym_roundtrip(const Mat& data, unsigned bits);

// One reconstruction method entered into an MSE comparison.
struct MseMethod {
  enum class Kind { identity, asym, value_quantizer };

  std::string name;
  Kind kind = Kind::identity;
  unsigned bits = 0;  // asym only
  // value_quantizer only; both must be set (an untrained entry is rejected).
  const ValueEncoder* encoder = nullptr;
  const ValueCodebook* codebook = nullptr;

  static MseMethod identity(std::string name = "identity");
  static MseMethod asym(unsigned bits);
  static MseMethod value_quantizer(const ValueEncoder& enc,
                                   const ValueCodebook& cb,
                                   std::string name = "value-quantizer");
};

struct MseRow {
  std::string method;
  double avg_bit = 0.0;
  double mse = 0.0;
};

// Reconstruction MSE of every method over `data` (tokens x d). Rows are
// sorted by avg_bit descending, then MSE ascending, then name, so reruns
// emit byte-identical reports.
std::vector<MseRow> mse_report(const Mat& data,
                               const std::vector<MseMethod>& methods);

// "method,avg_bit,mse" CSV / JSON-lines renderings with fixed number
// formatting (shortest round-trip decimal).
std::string mse_report_csv(const std::vector<MseRow>& rows);
std::string mse_report_jsonl(const std::vector<MseRow>& rows);

}  // namespace commvq
