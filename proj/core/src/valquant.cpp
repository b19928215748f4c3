#include "commvq/valquant.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "commvq/error.hpp"

namespace commvq {

ValueCodebook ValueCodebook::zeros(size_t n_codes, size_t d) {
  if (n_codes == 0 || d == 0)
    throw std::invalid_argument("ValueCodebook: zero dimension");
  ValueCodebook cb;
  cb.n_codes = n_codes;
  cb.d = d;
  cb.rows = Mat(n_codes, d);
  return cb;
}

ValueEncoder ValueEncoder::zeros(size_t d, size_t hidden, size_t n_codes) {
  if (d == 0 || hidden == 0 || n_codes == 0)
    throw std::invalid_argument("ValueEncoder: zero dimension");
  ValueEncoder e;
  e.d = d;
  e.hidden = hidden;
  e.n_codes = n_codes;
  e.w1 = Mat(d, hidden);
  e.b1.assign(hidden, 0.0);
  e.w2 = Mat(hidden, n_codes);
  e.b2.assign(n_codes, 0.0);
  return e;
}

ValueCodes ValueCodes::empty(size_t n_codes, size_t tokens) {
  ValueCodes c;
  c.tokens = tokens;
  c.n_codes = n_codes;
  c.bits.assign(tokens * n_codes, 0);
  return c;
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// h = relu(t * w1 + b1), logits = h * w2 + b2.
void mlp_forward(const Vec& t, const ValueEncoder& enc, Vec& h, Vec& logits) {
  h.assign(enc.hidden, 0.0);
  for (size_t i = 0; i < enc.d; ++i) {
    double ti = t[i];
    if (ti == 0.0) continue;
    const double* wrow = enc.w1.row(i).data();
    for (size_t j = 0; j < enc.hidden; ++j) h[j] += ti * wrow[j];
  }
  for (size_t j = 0; j < enc.hidden; ++j) {
    h[j] += enc.b1[j];
    if (h[j] < 0.0) h[j] = 0.0;
  }
  logits.assign(enc.n_codes, 0.0);
  for (size_t j = 0; j < enc.hidden; ++j) {
    double hj = h[j];
    if (hj == 0.0) continue;
    const double* wrow = enc.w2.row(j).data();
    for (size_t k = 0; k < enc.n_codes; ++k) logits[k] += hj * wrow[k];
  }
  for (size_t k = 0; k < enc.n_codes; ++k) logits[k] += enc.b2[k];
}

}  // namespace

EncoderOut encoder_forward(const Vec& t, const ValueEncoder& enc,
                           EncoderMode mode, double temperature, Rng* rng) {
  if (t.size() != enc.d)
    throw std::invalid_argument("encoder_forward: input size != d");
  if (!(temperature > 0.0))
    throw std::invalid_argument("encoder_forward: temperature must be > 0");
  if (mode == EncoderMode::train && rng == nullptr)
    throw std::invalid_argument("encoder_forward: train mode needs an rng");

  EncoderOut out;
  Vec h;
  mlp_forward(t, enc, h, out.logits);
  if (!all_finite(out.logits))
    throw TrainingError("encoder_forward: non-finite activations");
  out.bits.resize(enc.n_codes);
  out.soft.resize(enc.n_codes);
  for (size_t k = 0; k < enc.n_codes; ++k) {
    double u = out.logits[k];
    if (mode == EncoderMode::train) {
      double g1 = rng->gumbel();
      double g0 = rng->gumbel();
      u += g1 - g0;
    }
    out.soft[k] = sigmoid(u / temperature);
    out.bits[k] = u > 0.0 ? 1 : 0;
  }
  return out;
}

Vec decode_value(const std::vector<uint8_t>& bits, const ValueCodebook& cb) {
  if (bits.size() != cb.n_codes)
    throw std::invalid_argument("decode_value: bits size != n_codes");
  Vec out(cb.d, 0.0);
  for (size_t k = 0; k < cb.n_codes; ++k) {
    if (!bits[k]) continue;
    const double* row = cb.rows.row(k).data();
    for (size_t j = 0; j < cb.d; ++j) out[j] += row[j];
  }
  return out;
}

Mat decode_values(const ValueCodes& codes, const ValueCodebook& cb) {
  if (codes.n_codes != cb.n_codes)
    throw std::invalid_argument("decode_values: codes do not match codebook");
  Mat out(codes.tokens, cb.d);
  for (size_t p = 0; p < codes.tokens; ++p) {
    double* orow = out.row(p).data();
    for (size_t k = 0; k < cb.n_codes; ++k) {
      if (!codes.get(p, k)) continue;
      const double* row = cb.rows.row(k).data();
      for (size_t j = 0; j < cb.d; ++j) orow[j] += row[j];
    }
  }
  return out;
}

std::vector<uint8_t> greedy_encode(const Vec& t, const ValueCodebook& cb) {
  if (t.size() != cb.d)
    throw std::invalid_argument("greedy_encode: input size != d");
  std::vector<uint8_t> bits(cb.n_codes, 0);
  Vec residual = t;
  Vec row_norm(cb.n_codes);
  for (size_t k = 0; k < cb.n_codes; ++k) {
    auto row = cb.rows.row(k);
    row_norm[k] = dot(row, row);
  }
  // Matching pursuit over unused bits: setting bit k changes the squared
  // residual by |c_k|^2 - 2 r.c_k. Pick the biggest reduction; ties go to
  // the lowest index via strict comparison in scan order.
  for (;;) {
    double best_delta = 0.0;
    size_t best_k = cb.n_codes;
    for (size_t k = 0; k < cb.n_codes; ++k) {
      if (bits[k]) continue;
      double rc = dot(std::span<const double>(residual), cb.rows.row(k));
      double delta = row_norm[k] - 2.0 * rc;
      if (delta < best_delta) {
        best_delta = delta;
        best_k = k;
      }
    }
    if (best_k == cb.n_codes) break;
    const double* row = cb.rows.row(best_k).data();
    for (size_t j = 0; j < cb.d; ++j) residual[j] -= row[j];
    bits[best_k] = 1;
  }
  return bits;
}

namespace {

struct TrainState {
  ValueEncoder enc;
  ValueCodebook cb;
};

}  // namespace

ValueTrainResult train_value_quantizer(const Mat& calib, size_t n_codes,
                                       const ValTrainConfig& cfg,
                                       const ValueCodebook* init_codebook) {
  if (calib.rows == 0 || calib.cols == 0)
    throw std::invalid_argument("train_value_quantizer: empty calibration");
  if (n_codes == 0)
    throw std::invalid_argument("train_value_quantizer: n_codes == 0");
  if (!all_finite(calib.data))
    throw std::invalid_argument("train_value_quantizer: calib not finite");
  if (cfg.steps == 0 || cfg.batch == 0)
    throw std::invalid_argument("train_value_quantizer: steps/batch == 0");
  if (calib.rows < cfg.batch)
    throw std::invalid_argument("train_value_quantizer: fewer rows than batch");
  if (!(cfg.step_size > 0.0))
    throw std::invalid_argument("train_value_quantizer: step_size <= 0");
  if (!(cfg.gumbel_t_start > 0.0) || !(cfg.gumbel_t_end > 0.0))
    throw std::invalid_argument("train_value_quantizer: temperatures <= 0");
  if (cfg.gumbel_t_start < cfg.gumbel_t_end)
    throw std::invalid_argument(
        "train_value_quantizer: temperature must not rise");
  size_t d = calib.cols;
  size_t n = calib.rows;
  size_t hidden = cfg.hidden ? cfg.hidden : 2 * n_codes;
  if (init_codebook &&
      (init_codebook->n_codes != n_codes || init_codebook->d != d))
    throw std::invalid_argument(
        "train_value_quantizer: init codebook shape mismatch");

  Rng rng(cfg.seed);

  TrainState st;
  st.enc = ValueEncoder::zeros(d, hidden, n_codes);
  double s1 = std::sqrt(2.0 / static_cast<double>(d));
  for (double& w : st.enc.w1.data) w = s1 * rng.normal();
  double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (double& w : st.enc.w2.data) w = s2 * rng.normal();

  if (init_codebook) {
    st.cb = *init_codebook;
  } else {
    // Rows are sampled calibration vectors scaled by 1/E[popcount]: about
    // half the bits fire, so sums of ~n_codes/2 rows land near data scale.
    st.cb = ValueCodebook::zeros(n_codes, d);
    double sc = 2.0 / static_cast<double>(n_codes);
    for (size_t k = 0; k < n_codes; ++k) {
      const double* src = calib.row(rng.index(n)).data();
      double* dst = st.cb.rows.row(k).data();
      for (size_t j = 0; j < d; ++j) dst[j] = sc * src[j];
    }
  }

  ValueTrainResult result;
  result.loss_curve.reserve(cfg.steps);

  TrainState checkpoint = st;
  size_t checkpoint_step = 0;
  double initial_loss = -1.0;

  Vec h, logits, t_hat, dl_dthat, dl_dz, dl_dh;
  Mat gw1(d, hidden), gw2(hidden, n_codes), gcb(n_codes, d);
  Vec gb1(hidden), gb2(n_codes);
  std::vector<uint8_t> bits(n_codes);
  Vec soft(n_codes);

  size_t steps_done = 0;

  for (size_t step = 0; step < cfg.steps; ++step) {
    double frac = cfg.steps > 1
                      ? static_cast<double>(step) /
                            static_cast<double>(cfg.steps - 1)
                      : 0.0;
    double tau =
        cfg.gumbel_t_start + (cfg.gumbel_t_end - cfg.gumbel_t_start) * frac;

    std::fill(gw1.data.begin(), gw1.data.end(), 0.0);
    std::fill(gw2.data.begin(), gw2.data.end(), 0.0);
    std::fill(gcb.data.begin(), gcb.data.end(), 0.0);
    std::fill(gb1.begin(), gb1.end(), 0.0);
    std::fill(gb2.begin(), gb2.end(), 0.0);

    double batch_loss = 0.0;
    for (size_t s = 0; s < cfg.batch; ++s) {
      size_t row = rng.index(n);
      const double* t = calib.row(row).data();

      // Forward. Hard bits drive the reconstruction; the sigmoid relaxation
      // only shapes the backward pass.
      h.assign(hidden, 0.0);
      for (size_t i = 0; i < d; ++i) {
        double ti = t[i];
        if (ti == 0.0) continue;
        const double* wrow = st.enc.w1.row(i).data();
        for (size_t j = 0; j < hidden; ++j) h[j] += ti * wrow[j];
      }
      for (size_t j = 0; j < hidden; ++j) {
        h[j] += st.enc.b1[j];
        if (h[j] < 0.0) h[j] = 0.0;
      }
      logits.assign(n_codes, 0.0);
      for (size_t j = 0; j < hidden; ++j) {
        double hj = h[j];
        if (hj == 0.0) continue;
        const double* wrow = st.enc.w2.row(j).data();
        for (size_t k = 0; k < n_codes; ++k) logits[k] += hj * wrow[k];
      }
      for (size_t k = 0; k < n_codes; ++k) {
        double u = logits[k] + st.enc.b2[k];
        double g1 = rng.gumbel();
        double g0 = rng.gumbel();
        u += g1 - g0;
        soft[k] = sigmoid(u / tau);
        bits[k] = u > 0.0 ? 1 : 0;
      }

      t_hat.assign(d, 0.0);
      for (size_t k = 0; k < n_codes; ++k) {
        if (!bits[k]) continue;
        const double* crow = st.cb.rows.row(k).data();
        for (size_t j = 0; j < d; ++j) t_hat[j] += crow[j];
      }

      // Objective: squared reconstruction error per sample, batch-averaged.
      // The curve records it per element so it reads as an MSE.
      double sq = 0.0;
      dl_dthat.assign(d, 0.0);
      for (size_t j = 0; j < d; ++j) {
        double diff = t_hat[j] - t[j];
        sq += diff * diff;
        dl_dthat[j] = 2.0 * diff;
      }
      batch_loss += sq / static_cast<double>(d);

      // Codebook gradient uses the hard bits.
      if (!cfg.freeze_codebook) {
        for (size_t k = 0; k < n_codes; ++k) {
          if (!bits[k]) continue;
          double* grow = gcb.row(k).data();
          for (size_t j = 0; j < d; ++j) grow[j] += dl_dthat[j];
        }
      }

      // Straight-through: gradient reaches the logit via the relaxed
      // sigmoid's slope.
      dl_dz.assign(n_codes, 0.0);
      for (size_t k = 0; k < n_codes; ++k) {
        double g = dot(std::span<const double>(st.cb.rows.row(k)),
                       std::span<const double>(dl_dthat));
        double slope = soft[k] * (1.0 - soft[k]) / tau;
        dl_dz[k] = g * slope;
      }

      for (size_t k = 0; k < n_codes; ++k) gb2[k] += dl_dz[k];
      for (size_t j = 0; j < hidden; ++j) {
        double hj = h[j];
        if (hj == 0.0) continue;
        double* grow = gw2.row(j).data();
        for (size_t k = 0; k < n_codes; ++k) grow[k] += hj * dl_dz[k];
      }

      dl_dh.assign(hidden, 0.0);
      for (size_t j = 0; j < hidden; ++j) {
        if (h[j] <= 0.0) continue;  // ReLU gate (h holds post-ReLU values)
        const double* wrow = st.enc.w2.row(j).data();
        double acc = 0.0;
        for (size_t k = 0; k < n_codes; ++k) acc += wrow[k] * dl_dz[k];
        dl_dh[j] = acc;
      }
      for (size_t j = 0; j < hidden; ++j) gb1[j] += dl_dh[j];
      for (size_t i = 0; i < d; ++i) {
        double ti = t[i];
        if (ti == 0.0) continue;
        double* grow = gw1.row(i).data();
        for (size_t j = 0; j < hidden; ++j) grow[j] += ti * dl_dh[j];
      }
    }

    batch_loss /= static_cast<double>(cfg.batch);
    result.loss_curve.push_back(batch_loss);
    if (initial_loss < 0.0) initial_loss = batch_loss;

    bool bad = !std::isfinite(batch_loss) ||
               (initial_loss > 0.0 && batch_loss > 100.0 * initial_loss);
    if (bad) {
      result.diverged = true;
      st = checkpoint;
      steps_done = checkpoint_step;
      break;
    }

    double scale = cfg.step_size / static_cast<double>(cfg.batch);
    for (size_t i = 0; i < gw1.data.size(); ++i)
      st.enc.w1.data[i] -= scale * gw1.data[i];
    for (size_t j = 0; j < hidden; ++j) st.enc.b1[j] -= scale * gb1[j];
    for (size_t i = 0; i < gw2.data.size(); ++i)
      st.enc.w2.data[i] -= scale * gw2.data[i];
    for (size_t k = 0; k < n_codes; ++k) st.enc.b2[k] -= scale * gb2[k];
    if (!cfg.freeze_codebook)
      for (size_t i = 0; i < gcb.data.size(); ++i)
        st.cb.rows.data[i] -= scale * gcb.data[i];
    steps_done = step + 1;

    if (cfg.checkpoint_every && (step + 1) % cfg.checkpoint_every == 0) {
      checkpoint = st;
      checkpoint_step = steps_done;
    }
  }

  result.encoder = std::move(st.enc);
  result.codebook = std::move(st.cb);
  result.steps_run = steps_done;
  return result;
}

double avg_bit_value(size_t n_codes, size_t d) {
  if (d == 0) throw std::invalid_argument("avg_bit_value: d == 0");
  return static_cast<double>(n_codes) / static_cast<double>(d);
}

uint64_t value_codebook_bytes(size_t n_codes, size_t d) {
  return uint64_t{n_codes} * d * 2;
}

namespace {

constexpr uint32_t kValMagic = 0x56515643u;  // "CVQV" little-endian
constexpr uint32_t kValVersion = 1;

void write_u32v(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32v(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("unexpected end of file");
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 |
         uint32_t(b[3]) << 24;
}

void write_f32_block(std::ostream& os, const std::vector<double>& v) {
  for (double x : v) {
    float f = static_cast<float>(x);
    uint32_t u;
    std::memcpy(&u, &f, 4);
    write_u32v(os, u);
  }
}

void read_f32_block(std::istream& is, std::vector<double>& v,
                    const std::string& path) {
  for (double& x : v) {
    uint32_t u = read_u32v(is);
    float f;
    std::memcpy(&f, &u, 4);
    if (!std::isfinite(f))
      throw IoError("load_value_quantizer: non-finite value in " + path);
    x = f;
  }
}

}  // namespace

void save_value_quantizer(const ValueEncoder& enc, const ValueCodebook& cb,
                          const std::string& path) {
  if (enc.d != cb.d || enc.n_codes != cb.n_codes)
    throw std::invalid_argument(
        "save_value_quantizer: encoder/codebook mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_value_quantizer: cannot open " + path);
  write_u32v(os, kValMagic);
  write_u32v(os, kValVersion);
  write_u32v(os, static_cast<uint32_t>(enc.d));
  write_u32v(os, static_cast<uint32_t>(enc.hidden));
  write_u32v(os, static_cast<uint32_t>(enc.n_codes));
  write_f32_block(os, enc.w1.data);
  write_f32_block(os, enc.b1);
  write_f32_block(os, enc.w2.data);
  write_f32_block(os, enc.b2);
  write_f32_block(os, cb.rows.data);
  if (!os) throw IoError("save_value_quantizer: write failed for " + path);
}

ValueQuantizer load_value_quantizer(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_value_quantizer: cannot open " + path);
  if (read_u32v(is) != kValMagic)
    throw IoError("load_value_quantizer: bad magic in " + path);
  if (read_u32v(is) != kValVersion)
    throw IoError("load_value_quantizer: unsupported version in " + path);
  size_t d = read_u32v(is);
  size_t hidden = read_u32v(is);
  size_t n_codes = read_u32v(is);
  if (d == 0 || hidden == 0 || n_codes == 0)
    throw IoError("load_value_quantizer: invalid header in " + path);
  ValueQuantizer q;
  q.encoder = ValueEncoder::zeros(d, hidden, n_codes);
  q.codebook = ValueCodebook::zeros(n_codes, d);
  read_f32_block(is, q.encoder.w1.data, path);
  read_f32_block(is, q.encoder.b1, path);
  read_f32_block(is, q.encoder.w2.data, path);
  read_f32_block(is, q.encoder.b2, path);
  read_f32_block(is, q.codebook.rows.data, path);
  is.peek();
  if (!is.eof())
    throw IoError("load_value_quantizer: trailing bytes in " + path);
  return q;
}

}  // namespace commvq
