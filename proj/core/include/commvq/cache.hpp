#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "commvq/attn.hpp"
#include "commvq/keyquant.hpp"
#include "commvq/linalg.hpp"
#include "commvq/rope.hpp"
#include "commvq/valquant.hpp"

namespace commvq {

// Append-only bit stream over 64-bit words, little-endian bit order: stream
// bit k lives at bit (k % 64) of word (k / 64). Padding exists only past the
// last written bit.
class BitBuffer {
 public:
  void append(uint64_t value, unsigned nbits);
  uint64_t read(uint64_t bit_pos, unsigned nbits) const;
  uint64_t bit_size() const { return bits_; }
  const std::vector<uint64_t>& words() const { return words_; }

  static BitBuffer from_words(std::vector<uint64_t> words, uint64_t bits);

 private:
  std::vector<uint64_t> words_;
  uint64_t bits_ = 0;
};

// Key codes pack as, per token: (a, b) per group per round, each index in
// log2(n_levels) bits, rounds outer, groups inner. Value codes pack as
// n_codes bits per token in ascending bit order.
std::vector<uint64_t> pack_key_codes(const KeyCodes& codes);
KeyCodes unpack_key_codes(const std::vector<uint64_t>& words, size_t tokens,
                          const KeyQuantConfig& config);
std::vector<uint64_t> pack_value_codes(const ValueCodes& codes);
ValueCodes unpack_value_codes(const std::vector<uint64_t>& words,
                              size_t tokens, size_t n_codes);

struct CacheStats {
  size_t tokens = 0;
  uint64_t fp16_equivalent_bytes = 0;  // N * d * 2 sides * 2 bytes
  uint64_t quantized_payload_bits = 0;
  double quantized_payload_bytes = 0.0;
  uint64_t codebook_bytes = 0;
  double avg_bit_effective = 0.0;   // payload bits per stored fp16 scalar
  double avg_bit_amortized = 0.0;   // payload + codebook at this N
  double avg_bit_key_side = 0.0;
  double avg_bit_value_side = 0.0;
};

// Closed-form stats for a hypothetical cache of `tokens` tokens; lets size
// questions about 128K-token caches be answered without building one.
CacheStats compute_cache_stats(const KeyQuantConfig& key_config,
                               size_t n_codes, size_t tokens);

// Quantized KV cache: bit-packed key and value codes plus shared immutable
// codebooks. Single writer (append/decode_step), any number of readers.
class QuantizedKVCache {
 public:
  QuantizedKVCache(std::shared_ptr<const KeyCodebook> key_codebook,
                   std::shared_ptr<const ValueCodebook> value_codebook,
                   std::shared_ptr<const ValueEncoder> encoder);

  static QuantizedKVCache prefill(
      const Mat& keys, const Mat& values,
      std::shared_ptr<const KeyCodebook> key_codebook,
      std::shared_ptr<const ValueCodebook> value_codebook,
      std::shared_ptr<const ValueEncoder> encoder);

  size_t size() const { return tokens_; }

  // Encodes and appends one token's key and value.
  void append(const Vec& key, const Vec& value);

  // Appends the new token, then runs fused attention for query q at the new
  // last position. Optionally exposes the flop report.
  Vec decode_step(const Vec& key, const Vec& value, const Vec& q,
                  FlopReport* flops = nullptr);

  const KeyCodes& key_codes() const { return key_codes_; }
  const ValueCodes& value_codes() const { return value_codes_; }
  const BitBuffer& packed_keys() const { return key_bits_; }
  const BitBuffer& packed_values() const { return value_bits_; }
  const KeyCodebook& key_codebook() const { return *key_codebook_; }
  const ValueCodebook& value_codebook() const { return *value_codebook_; }

  CacheStats stats() const;

  void save(const std::string& path) const;
  static QuantizedKVCache load(
      const std::string& path,
      std::shared_ptr<const KeyCodebook> key_codebook,
      std::shared_ptr<const ValueCodebook> value_codebook,
      std::shared_ptr<const ValueEncoder> encoder);

 private:
  std::shared_ptr<const KeyCodebook> key_codebook_;
  std::shared_ptr<const ValueCodebook> value_codebook_;
  std::shared_ptr<const ValueEncoder> encoder_;
  RopeParams rope_;
  RopeTable table_;
  size_t tokens_ = 0;
  // Packed words are the persisted form; the unpacked mirrors keep decode
  // steps from re-reading the bit stream every token.
  BitBuffer key_bits_;
  BitBuffer value_bits_;
  KeyCodes key_codes_;
  ValueCodes value_codes_;
};

}  // namespace commvq
