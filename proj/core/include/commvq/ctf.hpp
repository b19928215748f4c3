#pragma once

#include <cstdint>
#include <string>

#include "commvq/linalg.hpp"

namespace commvq {

// CTF: a minimal calibration tensor file. Layout, all little-endian:
// magic "CVQT", version u32, ndims u32, dims u64[ndims], dtype u32
// (1 = f32), then the row-major f32 payload.
void save_ctf(const Mat& m, const std::string& path);
Mat load_ctf(const std::string& path);

// Synthetic correlated calibration data: x = z A + eps with z ~ N(0, I_rank),
// A a seeded rank x d matrix with orthonormal rows, and isotropic noise at
// 1% of the per-coordinate signal scale. Every entry is rounded through f32
// so the returned matrix matches its serialized form exactly.
// Requires 1 <= rank <= d.
Mat gen_synth(size_t n, size_t d, size_t rank, uint64_t seed);

}  // namespace commvq
