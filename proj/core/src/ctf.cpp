#include "commvq/ctf.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "commvq/error.hpp"
#include "commvq/rng.hpp"

namespace commvq {

namespace {

constexpr uint32_t kCtfMagic = 0x54515643;  // "CVQT" little-endian
constexpr uint32_t kCtfVersion = 1;
constexpr uint32_t kDtypeF32 = 1;

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, uint64_t v) {
  write_u32(os, static_cast<uint32_t>(v & 0xffffffffull));
  write_u32(os, static_cast<uint32_t>(v >> 32));
}

void write_f32(std::ostream& os, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  write_u32(os, u);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("tensor file: truncated read");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

uint64_t read_u64(std::istream& is) {
  uint64_t lo = read_u32(is);
  uint64_t hi = read_u32(is);
  return lo | (hi << 32);
}

float read_f32(std::istream& is) {
  uint32_t u = read_u32(is);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

}  // namespace

void save_ctf(const Mat& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  write_u32(os, kCtfMagic);
  write_u32(os, kCtfVersion);
  write_u32(os, 2);  // ndims
  write_u64(os, m.rows);
  write_u64(os, m.cols);
  write_u32(os, kDtypeF32);
  for (double v : m.data) write_f32(os, static_cast<float>(v));
  if (!os) throw IoError("write failed: " + path);
}

Mat load_ctf(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  if (read_u32(is) != kCtfMagic) throw IoError("not a tensor file: " + path);
  if (read_u32(is) != kCtfVersion)
    throw IoError("unsupported tensor version: " + path);
  uint32_t ndims = read_u32(is);
  if (ndims != 2) throw IoError("expected a 2-d tensor: " + path);
  uint64_t rows = read_u64(is);
  uint64_t cols = read_u64(is);
  if (read_u32(is) != kDtypeF32)
    throw IoError("unsupported tensor dtype: " + path);
  if (rows * cols > (uint64_t{1} << 32))
    throw IoError("tensor too large: " + path);
  Mat m(static_cast<size_t>(rows), static_cast<size_t>(cols));
  for (double& v : m.data) v = read_f32(is);
  is.peek();
  if (!is.eof()) throw IoError("trailing bytes in tensor file: " + path);
  return m;
}

Mat gen_synth(size_t n, size_t d, size_t rank, uint64_t seed) {
  if (d == 0 || n == 0) throw std::invalid_argument("gen_synth: empty shape");
  if (rank < 1 || rank > d)
    throw std::invalid_argument("gen_synth: rank must be in [1, d]");
  Rng rng(seed);

  // Orthonormal mixing rows via modified Gram-Schmidt on gaussian draws, so
  // rank = d gives identity covariance up to sampling error and rank < d
  // concentrates variance in exactly `rank` directions.
  Mat a(rank, d);
  for (double& v : a.data) v = rng.normal();
  for (size_t i = 0; i < rank; ++i) {
    auto ri = a.row(i);
    for (size_t j = 0; j < i; ++j) {
      auto rj = a.row(j);
      double proj = dot(ri, rj);
      for (size_t k = 0; k < d; ++k) ri[k] -= proj * rj[k];
    }
    double norm = std::sqrt(dot(ri, ri));
    while (norm < 1e-8) {  // astronomically unlikely; redraw deterministically
      for (size_t k = 0; k < d; ++k) ri[k] = rng.normal();
      for (size_t j = 0; j < i; ++j) {
        auto rj = a.row(j);
        double proj = dot(ri, rj);
        for (size_t k = 0; k < d; ++k) ri[k] -= proj * rj[k];
      }
      norm = std::sqrt(dot(ri, ri));
    }
    for (size_t k = 0; k < d; ++k) ri[k] /= norm;
  }

  // Per-coordinate signal std is sqrt(rank/d); noise sits at 1% of it.
  double sigma_noise =
      0.01 * std::sqrt(static_cast<double>(rank) / static_cast<double>(d));
  Mat x(n, d);
  Vec z(rank);
  for (size_t t = 0; t < n; ++t) {
    for (size_t j = 0; j < rank; ++j) z[j] = rng.normal();
    auto row = x.row(t);
    for (size_t k = 0; k < d; ++k) {
      double acc = 0.0;
      for (size_t j = 0; j < rank; ++j) acc += z[j] * a(j, k);
      acc += sigma_noise * rng.normal();
      row[k] = static_cast<double>(static_cast<float>(acc));
    }
  }
  return x;
}

}  // namespace commvq
