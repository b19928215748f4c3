#include "commvq/cache.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <utility>

#include "commvq/error.hpp"

namespace commvq {

namespace {

constexpr uint32_t kCacheMagic = 0x43515643;  // "CVQC" little-endian
constexpr uint32_t kCacheVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("cache file: truncated read");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

void write_u64(std::ostream& os, uint64_t v) {
  write_u32(os, static_cast<uint32_t>(v & 0xffffffffull));
  write_u32(os, static_cast<uint32_t>(v >> 32));
}

uint64_t read_u64(std::istream& is) {
  uint64_t lo = read_u32(is);
  uint64_t hi = read_u32(is);
  return lo | (hi << 32);
}

uint64_t words_for_bits(uint64_t bits) { return (bits + 63) / 64; }

RopeParams rope_for(const std::shared_ptr<const KeyCodebook>& kcb) {
  if (!kcb) throw std::invalid_argument("cache: key codebook is null");
  return RopeParams::make(kcb->config.d);
}

}  // namespace

void BitBuffer::append(uint64_t value, unsigned nbits) {
  if (nbits > 64) throw std::invalid_argument("BitBuffer: nbits > 64");
  if (nbits == 0) return;
  if (nbits < 64) value &= (uint64_t{1} << nbits) - 1;
  uint64_t word = bits_ / 64;
  unsigned off = static_cast<unsigned>(bits_ % 64);
  bits_ += nbits;
  words_.resize(words_for_bits(bits_), 0);
  words_[word] |= value << off;
  if (off + nbits > 64) words_[word + 1] |= value >> (64 - off);
}

uint64_t BitBuffer::read(uint64_t bit_pos, unsigned nbits) const {
  if (nbits == 0) return 0;
  if (nbits > 64 || bit_pos + nbits > bits_)
    throw std::out_of_range("BitBuffer: read out of range");
  uint64_t word = bit_pos / 64;
  unsigned off = static_cast<unsigned>(bit_pos % 64);
  uint64_t v = words_[word] >> off;
  if (off + nbits > 64) v |= words_[word + 1] << (64 - off);
  if (nbits < 64) v &= (uint64_t{1} << nbits) - 1;
  return v;
}

BitBuffer BitBuffer::from_words(std::vector<uint64_t> words, uint64_t bits) {
  if (words.size() != words_for_bits(bits))
    throw std::invalid_argument("BitBuffer: word count mismatch");
  unsigned tail = static_cast<unsigned>(bits % 64);
  if (tail != 0 && (words.back() >> tail) != 0)
    throw std::invalid_argument("BitBuffer: nonzero padding bits");
  BitBuffer buf;
  buf.words_ = std::move(words);
  buf.bits_ = bits;
  return buf;
}

std::vector<uint64_t> pack_key_codes(const KeyCodes& codes) {
  size_t level_bits = 0;
  while ((size_t{1} << level_bits) < codes.n_levels) ++level_bits;
  if (codes.n_levels == 0 || (size_t{1} << level_bits) != codes.n_levels)
    throw std::invalid_argument("pack_key_codes: n_levels not a power of two");
  BitBuffer buf;
  for (size_t t = 0; t < codes.tokens; ++t) {
    for (size_t r = 0; r < codes.rounds; ++r) {
      for (size_t g = 0; g < codes.groups; ++g) {
        size_t i = codes.idx(t, r, g);
        buf.append(codes.a[i], static_cast<unsigned>(level_bits));
        buf.append(codes.b[i], static_cast<unsigned>(level_bits));
      }
    }
  }
  return buf.words();
}

KeyCodes unpack_key_codes(const std::vector<uint64_t>& words, size_t tokens,
                          const KeyQuantConfig& config) {
  config.validate();
  uint64_t total_bits =
      static_cast<uint64_t>(tokens) * config.bits_per_token();
  BitBuffer buf = BitBuffer::from_words(words, total_bits);
  KeyCodes codes;
  codes.tokens = tokens;
  codes.rounds = config.rounds;
  codes.groups = config.groups();
  codes.n_levels = config.n_levels;
  codes.a.resize(tokens * config.rounds * config.groups());
  codes.b.resize(codes.a.size());
  unsigned lb = static_cast<unsigned>(config.level_bits());
  uint64_t pos = 0;
  for (size_t t = 0; t < tokens; ++t) {
    for (size_t r = 0; r < config.rounds; ++r) {
      for (size_t g = 0; g < config.groups(); ++g) {
        size_t i = codes.idx(t, r, g);
        codes.a[i] = static_cast<uint16_t>(buf.read(pos, lb));
        pos += lb;
        codes.b[i] = static_cast<uint16_t>(buf.read(pos, lb));
        pos += lb;
      }
    }
  }
  return codes;
}

std::vector<uint64_t> pack_value_codes(const ValueCodes& codes) {
  BitBuffer buf;
  for (size_t t = 0; t < codes.tokens; ++t)
    for (size_t k = 0; k < codes.n_codes; ++k)
      buf.append(codes.get(t, k), 1);
  return buf.words();
}

ValueCodes unpack_value_codes(const std::vector<uint64_t>& words,
                              size_t tokens, size_t n_codes) {
  uint64_t total_bits = static_cast<uint64_t>(tokens) * n_codes;
  BitBuffer buf = BitBuffer::from_words(words, total_bits);
  ValueCodes codes = ValueCodes::empty(n_codes, tokens);
  uint64_t pos = 0;
  for (size_t t = 0; t < tokens; ++t)
    for (size_t k = 0; k < n_codes; ++k)
      codes.set(t, k, static_cast<uint8_t>(buf.read(pos++, 1)));
  return codes;
}

CacheStats compute_cache_stats(const KeyQuantConfig& key_config,
                               size_t n_codes, size_t tokens) {
  key_config.validate();
  if (n_codes == 0)
    throw std::invalid_argument("cache stats: n_codes must be positive");
  CacheStats s;
  if (tokens == 0) return s;  // empty cache reports all zeros
  size_t d = key_config.d;
  uint64_t key_bits =
      static_cast<uint64_t>(tokens) * key_config.bits_per_token();
  uint64_t value_bits = static_cast<uint64_t>(tokens) * n_codes;
  s.tokens = tokens;
  s.fp16_equivalent_bytes = static_cast<uint64_t>(tokens) * d * 2 * 2;
  s.quantized_payload_bits = key_bits + value_bits;
  s.quantized_payload_bytes =
      static_cast<double>(s.quantized_payload_bits) / 8.0;
  s.codebook_bytes =
      key_codebook_bytes(key_config) + value_codebook_bytes(n_codes, d);
  double scalars = static_cast<double>(tokens) * d * 2;
  s.avg_bit_effective = static_cast<double>(s.quantized_payload_bits) / scalars;
  s.avg_bit_amortized =
      (static_cast<double>(s.quantized_payload_bits) +
       8.0 * static_cast<double>(s.codebook_bytes)) /
      scalars;
  s.avg_bit_key_side =
      static_cast<double>(key_bits) / (static_cast<double>(tokens) * d);
  s.avg_bit_value_side =
      static_cast<double>(value_bits) / (static_cast<double>(tokens) * d);
  return s;
}

QuantizedKVCache::QuantizedKVCache(
    std::shared_ptr<const KeyCodebook> key_codebook,
    std::shared_ptr<const ValueCodebook> value_codebook,
    std::shared_ptr<const ValueEncoder> encoder)
    : key_codebook_(std::move(key_codebook)),
      value_codebook_(std::move(value_codebook)),
      encoder_(std::move(encoder)),
      rope_(rope_for(key_codebook_)),
      table_(rope_) {
  if (!value_codebook_)
    throw std::invalid_argument("cache: value codebook is null");
  if (!encoder_) throw std::invalid_argument("cache: encoder is null");
  const KeyQuantConfig& cfg = key_codebook_->config;
  cfg.validate();
  if (value_codebook_->d != cfg.d)
    throw std::invalid_argument("cache: key/value dimension mismatch");
  if (encoder_->d != cfg.d || encoder_->n_codes != value_codebook_->n_codes)
    throw std::invalid_argument("cache: encoder does not match value codebook");
  key_codes_.tokens = 0;
  key_codes_.rounds = cfg.rounds;
  key_codes_.groups = cfg.groups();
  key_codes_.n_levels = cfg.n_levels;
  value_codes_ = ValueCodes::empty(value_codebook_->n_codes, 0);
}

QuantizedKVCache QuantizedKVCache::prefill(
    const Mat& keys, const Mat& values,
    std::shared_ptr<const KeyCodebook> key_codebook,
    std::shared_ptr<const ValueCodebook> value_codebook,
    std::shared_ptr<const ValueEncoder> encoder) {
  QuantizedKVCache cache(std::move(key_codebook), std::move(value_codebook),
                         std::move(encoder));
  if (keys.rows != values.rows)
    throw std::invalid_argument("prefill: key/value token count mismatch");
  size_t d = cache.key_codebook_->config.d;
  if (keys.rows > 0 && (keys.cols != d || values.cols != d))
    throw std::invalid_argument("prefill: wrong dimension");
  if (keys.rows == 0) return cache;

  // Batch encode, then lay the bits down token by token in append order.
  KeyCodes kc = encode_keys(keys, *cache.key_codebook_);
  size_t n_codes = cache.value_codebook_->n_codes;
  ValueCodes vc = ValueCodes::empty(n_codes, keys.rows);
  for (size_t t = 0; t < values.rows; ++t) {
    auto span = values.row(t);
    Vec row(span.begin(), span.end());
    EncoderOut out =
        encoder_forward(row, *cache.encoder_, EncoderMode::infer, 1.0);
    for (size_t k = 0; k < n_codes; ++k) vc.set(t, k, out.bits[k] ? 1 : 0);
  }
  unsigned lb = static_cast<unsigned>(cache.key_codebook_->config.level_bits());
  for (size_t t = 0; t < kc.tokens; ++t) {
    for (size_t r = 0; r < kc.rounds; ++r) {
      for (size_t g = 0; g < kc.groups; ++g) {
        size_t i = kc.idx(t, r, g);
        cache.key_bits_.append(kc.a[i], lb);
        cache.key_bits_.append(kc.b[i], lb);
      }
    }
    for (size_t k = 0; k < n_codes; ++k)
      cache.value_bits_.append(vc.get(t, k), 1);
  }
  cache.key_codes_ = std::move(kc);
  cache.value_codes_ = std::move(vc);
  cache.tokens_ = keys.rows;
  return cache;
}

void QuantizedKVCache::append(const Vec& key, const Vec& value) {
  size_t d = key_codebook_->config.d;
  if (key.size() != d || value.size() != d)
    throw std::invalid_argument("append: wrong dimension");

  Mat one(1, d);
  for (size_t j = 0; j < d; ++j) one(0, j) = key[j];
  KeyCodes kc = encode_keys(one, *key_codebook_);
  unsigned lb = static_cast<unsigned>(key_codebook_->config.level_bits());
  for (size_t r = 0; r < kc.rounds; ++r) {
    for (size_t g = 0; g < kc.groups; ++g) {
      size_t i = kc.idx(0, r, g);
      key_codes_.a.push_back(kc.a[i]);
      key_codes_.b.push_back(kc.b[i]);
      key_bits_.append(kc.a[i], lb);
      key_bits_.append(kc.b[i], lb);
    }
  }
  key_codes_.tokens += 1;

  EncoderOut out = encoder_forward(value, *encoder_, EncoderMode::infer, 1.0);
  size_t n_codes = value_codebook_->n_codes;
  for (size_t k = 0; k < n_codes; ++k) {
    uint8_t bit = out.bits[k] ? 1 : 0;
    value_codes_.bits.push_back(bit);
    value_bits_.append(bit, 1);
  }
  value_codes_.tokens += 1;
  tokens_ += 1;
}

Vec QuantizedKVCache::decode_step(const Vec& key, const Vec& value,
                                  const Vec& q, FlopReport* flops) {
  append(key, value);
  AttnInput in{q,           tokens_ - 1,      key_codes_,
               value_codes_, *key_codebook_,  *value_codebook_,
               rope_};
  AttnResult res = fused_attention(in, table_);
  if (flops != nullptr) *flops = res.flops;
  return res.out;
}

CacheStats QuantizedKVCache::stats() const {
  CacheStats s = compute_cache_stats(key_codebook_->config,
                                     value_codebook_->n_codes, tokens_);
  if (tokens_ > 0) {
    // The formula sizes and the physical buffers must agree exactly.
    uint64_t actual = key_bits_.bit_size() + value_bits_.bit_size();
    if (actual != s.quantized_payload_bits)
      throw std::logic_error("cache stats: payload size drifted from formula");
  }
  return s;
}

void QuantizedKVCache::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  const KeyQuantConfig& cfg = key_codebook_->config;
  write_u32(os, kCacheMagic);
  write_u32(os, kCacheVersion);
  write_u32(os, static_cast<uint32_t>(cfg.d));
  write_u32(os, static_cast<uint32_t>(cfg.group_size));
  write_u32(os, static_cast<uint32_t>(cfg.n_levels));
  write_u32(os, static_cast<uint32_t>(cfg.rounds));
  write_u32(os, static_cast<uint32_t>(value_codebook_->n_codes));
  write_u64(os, tokens_);
  write_u64(os, key_bits_.words().size());
  for (uint64_t w : key_bits_.words()) write_u64(os, w);
  write_u64(os, value_bits_.words().size());
  for (uint64_t w : value_bits_.words()) write_u64(os, w);
  if (!os) throw IoError("write failed: " + path);
}

QuantizedKVCache QuantizedKVCache::load(
    const std::string& path, std::shared_ptr<const KeyCodebook> key_codebook,
    std::shared_ptr<const ValueCodebook> value_codebook,
    std::shared_ptr<const ValueEncoder> encoder) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  if (read_u32(is) != kCacheMagic) throw IoError("not a cache file: " + path);
  if (read_u32(is) != kCacheVersion)
    throw IoError("unsupported cache version: " + path);
  QuantizedKVCache cache(std::move(key_codebook), std::move(value_codebook),
                         std::move(encoder));
  const KeyQuantConfig& cfg = cache.key_codebook_->config;
  uint32_t d = read_u32(is), g = read_u32(is), L = read_u32(is),
           r = read_u32(is), nc = read_u32(is);
  if (d != cfg.d || g != cfg.group_size || L != cfg.n_levels ||
      r != cfg.rounds || nc != cache.value_codebook_->n_codes)
    throw IoError("cache config does not match provided codebooks: " + path);
  uint64_t tokens = read_u64(is);
  uint64_t key_bits = tokens * cfg.bits_per_token();
  uint64_t value_bits = tokens * cache.value_codebook_->n_codes;
  uint64_t n_key_words = read_u64(is);
  if (n_key_words != words_for_bits(key_bits))
    throw IoError("cache key payload size mismatch: " + path);
  std::vector<uint64_t> kw(n_key_words);
  for (auto& w : kw) w = read_u64(is);
  uint64_t n_value_words = read_u64(is);
  if (n_value_words != words_for_bits(value_bits))
    throw IoError("cache value payload size mismatch: " + path);
  std::vector<uint64_t> vw(n_value_words);
  for (auto& w : vw) w = read_u64(is);
  is.peek();
  if (!is.eof()) throw IoError("trailing bytes in cache file: " + path);

  try {
    cache.key_codes_ = unpack_key_codes(kw, tokens, cfg);
    cache.value_codes_ =
        unpack_value_codes(vw, tokens, cache.value_codebook_->n_codes);
    cache.key_bits_ = BitBuffer::from_words(std::move(kw), key_bits);
    cache.value_bits_ = BitBuffer::from_words(std::move(vw), value_bits);
  } catch (const std::invalid_argument& e) {
    throw IoError(std::string("corrupt cache payload: ") + e.what());
  }
  cache.tokens_ = tokens;
  return cache;
}

}  // namespace commvq
