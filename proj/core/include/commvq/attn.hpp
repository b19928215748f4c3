#pragma once

#include <cstdint>
#include <string>

#include "commvq/keyquant.hpp"
#include "commvq/linalg.hpp"
#include "commvq/rope.hpp"
#include "commvq/valquant.hpp"

namespace commvq {

// Multiply counts for one attention invocation. Only scalar multiplies are
// counted (additions, exp, divisions and table lookups are free); the
// cos/sin tables are built once per (N, d) and excluded.
struct FlopReport {
  std::string pathway;
  size_t tokens = 0;     // N
  size_t d = 0;
  size_t n_codes = 0;    // value codebook rows
  size_t rounds = 0;     // key residual rounds
  size_t n_levels = 0;   // key levels per subspace
  uint64_t predicted_mults = 0;
  uint64_t measured_mults = 0;

  std::string to_json() const;
};

// One decode step over a quantized cache: pre-RoPE query q at position t
// against N cached tokens' key and value codes.
struct AttnInput {
  const Vec& q;
  size_t t;
  const KeyCodes& key_codes;
  const ValueCodes& value_codes;
  const KeyCodebook& key_codebook;
  const ValueCodebook& value_codebook;
  const RopeParams& rope;
};

// Full-precision single-step attention: rotates q at position t and K row i
// at position i, then softmax(q K^T / sqrt(d)) V with fixed accumulation
// order.
Vec reference_attention(const Vec& q, const Mat& K, const Mat& V,
                        const RopeParams& rope, size_t t);

struct AttnResult {
  Vec out;
  FlopReport flops;
};

// Decode-then-attend: reconstructs all keys and values from their codes and
// runs reference attention on the reconstructions. The value reconstruction
// is executed as a dense code-times-codebook multiply, the uncompressed cost
// model this pathway exists to measure.
AttnResult naive_quantized_attention(const AttnInput& in, RopeTable& table);

// Commutative pathway: folds the query rotation through the key codebook
// once, so each cached token costs two multiplies per (round, subspace), then
// applies softmax weights to the binary value codes before touching the value
// codebook.
AttnResult fused_attention(const AttnInput& in, RopeTable& table);

// Cost model for the naive pathway: (2d+1)N + 2 d N_c N.
uint64_t predicted_flops_naive(size_t n_tokens, size_t d, size_t n_codes);

// Cost model for the fused pathway: (R d + N_c + 1) N + d (N_c + R N_c').
uint64_t predicted_flops_fused(size_t n_tokens, size_t d, size_t n_codes,
                               size_t rounds, size_t n_levels);

}  // namespace commvq
