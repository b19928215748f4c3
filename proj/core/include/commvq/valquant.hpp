#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "commvq/linalg.hpp"
#include "commvq/rng.hpp"

namespace commvq {

// Value quantizer: a token v is stored as n_codes bits s, reconstructed as
// the sum of the codebook rows whose bit is set. avg bits per dimension is
// n_codes / d.
struct ValueCodebook {
  size_t n_codes = 0;
  size_t d = 0;
  Mat rows;  // n_codes x d

  static ValueCodebook zeros(size_t n_codes, size_t d);
};

// Two-layer ReLU encoder producing one logit per bit.
struct ValueEncoder {
  size_t d = 0;
  size_t hidden = 0;
  size_t n_codes = 0;
  Mat w1;  // d x hidden
  Vec b1;  // hidden
  Mat w2;  // hidden x n_codes
  Vec b2;  // n_codes

  static ValueEncoder zeros(size_t d, size_t hidden, size_t n_codes);
};

// Bit planes for a token stream; bits[t * n_codes + i] is 0 or 1.
struct ValueCodes {
  size_t tokens = 0;
  size_t n_codes = 0;
  std::vector<uint8_t> bits;

  static ValueCodes empty(size_t n_codes, size_t tokens);
  uint8_t get(size_t token, size_t code) const {
    return bits[token * n_codes + code];
  }
  void set(size_t token, size_t code, uint8_t v) {
    bits[token * n_codes + code] = v;
  }
};

enum class EncoderMode { train, infer };

struct EncoderOut {
  std::vector<uint8_t> bits;  // hard codes
  Vec soft;                   // relaxed per-bit probabilities
  Vec logits;                 // pre-noise logits
};

// Runs the encoder on one token. Train mode perturbs each logit with a pair
// of Gumbel draws (two-class relaxation) before thresholding; infer mode
// thresholds the raw logit at zero. rng must be non-null in train mode.
EncoderOut encoder_forward(const Vec& t, const ValueEncoder& enc,
                           EncoderMode mode, double temperature,
                           Rng* rng = nullptr);

// Sum of selected codebook rows per token; additions only.
Mat decode_values(const ValueCodes& codes, const ValueCodebook& cb);
Vec decode_value(const std::vector<uint8_t>& bits, const ValueCodebook& cb);

// Deterministic reference encoder: matching pursuit over the codebook rows.
// Starting from the empty code, repeatedly sets the unused bit that most
// reduces the squared residual; stops when no bit helps. Ties go to the
// lowest bit index.
std::vector<uint8_t> greedy_encode(const Vec& t, const ValueCodebook& cb);

struct ValTrainConfig {
  size_t steps = 10000;
  size_t batch = 256;
  double step_size = 1e-3;
  double gumbel_t_start = 1.0;
  double gumbel_t_end = 0.1;
  size_t hidden = 0;  // 0 -> 2 * n_codes
  uint64_t seed = 1;
  size_t checkpoint_every = 100;
  bool freeze_codebook = false;
};

struct ValueTrainResult {
  ValueEncoder encoder;
  ValueCodebook codebook;
  std::vector<double> loss_curve;  // per-step batch loss (per-element MSE)
  bool diverged = false;
  size_t steps_run = 0;
};

// Trains encoder and codebook jointly by plain SGD on straight-through
// gradients: the forward pass uses hard bits, the backward pass routes
// through the Gumbel-sigmoid relaxation. If the loss stops being finite or
// explodes past 100x its initial value, training stops, the result carries
// the last healthy checkpoint, and `diverged` is set.
ValueTrainResult train_value_quantizer(const Mat& calib, size_t n_codes,
                                       const ValTrainConfig& cfg = {},
                                       const ValueCodebook* init_codebook =
                                           nullptr);

double avg_bit_value(size_t n_codes, size_t d);

// Metric bytes for the codebook at half precision, matching the size-report
// accounting (serialized files hold f32 for fidelity).
uint64_t value_codebook_bytes(size_t n_codes, size_t d);

// Serializes encoder + codebook together; reconstruction needs only the
// codebook but re-encoding needs both.
void save_value_quantizer(const ValueEncoder& enc, const ValueCodebook& cb,
                          const std::string& path);
struct ValueQuantizer {
  ValueEncoder encoder;
  ValueCodebook codebook;
};
ValueQuantizer load_value_quantizer(const std::string& path);

}  // namespace commvq
