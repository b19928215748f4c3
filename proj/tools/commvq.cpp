// commvq: train, apply and measure commutative KV-cache quantizers.
//
// Subcommands: gen-synth, train-key, train-value, quantize, reconstruct,
// mse-report, bench-attn, size-report, ablate. Every run is deterministic
// given (seed, inputs); reports are JSON (plus a CSV mirror for the MSE
// table) and all files are written atomically.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "commvq/attn.hpp"
#include "commvq/baselines.hpp"
#include "commvq/cache.hpp"
#include "commvq/ctf.hpp"
#include "commvq/error.hpp"
#include "commvq/keyquant.hpp"
#include "commvq/linalg.hpp"
#include "commvq/rng.hpp"
#include "commvq/rope.hpp"
#include "commvq/valquant.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace commvq;

namespace {

constexpr int kExitInternal = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitTraining = 4;

// ---------------------------------------------------------------- config --

struct RunConfig {
  KeyQuantConfig key{1024, 64, 64, 11};  // d, group_size, n_levels, rounds
  size_t n_codes = 1024;
  ValTrainConfig value;
  EmConfig em;
  uint64_t seed = 1;
  int threads = 1;
};

RunConfig preset_config(const std::string& name) {
  RunConfig rc;
  if (name == "1bit") {
    rc.key = KeyQuantConfig{1024, 64, 64, 11};
    rc.n_codes = 1024;
  } else if (name == "2bit") {
    rc.key = KeyQuantConfig{1024, 64, 64, 21};
    rc.n_codes = 2048;
  } else {
    throw std::invalid_argument("unknown preset: " + name +
                                " (expected 1bit or 2bit)");
  }
  return rc;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) ok = true;
    if (!ok)
      throw std::invalid_argument("config: unknown key \"" + it.key() +
                                  "\" in " + where);
  }
}

void apply_config_json(RunConfig& rc, const json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: expected object");
  check_keys(j, {"d", "key", "value", "em", "seed"}, "top level");
  if (j.contains("d")) rc.key.d = j.at("d").get<size_t>();
  if (j.contains("seed")) rc.seed = j.at("seed").get<uint64_t>();
  if (j.contains("key")) {
    const json& k = j.at("key");
    check_keys(k, {"group_size", "n_levels", "rounds"}, "key");
    if (k.contains("group_size"))
      rc.key.group_size = k.at("group_size").get<size_t>();
    if (k.contains("n_levels")) rc.key.n_levels = k.at("n_levels").get<size_t>();
    if (k.contains("rounds")) rc.key.rounds = k.at("rounds").get<size_t>();
  }
  if (j.contains("value")) {
    const json& v = j.at("value");
    check_keys(v,
               {"n_codes", "hidden", "steps", "batch", "step_size", "t_start",
                "t_end", "checkpoint_every"},
               "value");
    if (v.contains("n_codes")) rc.n_codes = v.at("n_codes").get<size_t>();
    if (v.contains("hidden")) rc.value.hidden = v.at("hidden").get<size_t>();
    if (v.contains("steps")) rc.value.steps = v.at("steps").get<size_t>();
    if (v.contains("batch")) rc.value.batch = v.at("batch").get<size_t>();
    if (v.contains("step_size"))
      rc.value.step_size = v.at("step_size").get<double>();
    if (v.contains("t_start"))
      rc.value.gumbel_t_start = v.at("t_start").get<double>();
    if (v.contains("t_end")) rc.value.gumbel_t_end = v.at("t_end").get<double>();
    if (v.contains("checkpoint_every"))
      rc.value.checkpoint_every = v.at("checkpoint_every").get<size_t>();
  }
  if (j.contains("em")) {
    const json& e = j.at("em");
    check_keys(e,
               {"soft_iters", "hard_iters_max", "t0", "decay", "tol", "ridge",
                "search"},
               "em");
    if (e.contains("soft_iters"))
      rc.em.soft_iters = e.at("soft_iters").get<size_t>();
    if (e.contains("hard_iters_max"))
      rc.em.hard_iters_max = e.at("hard_iters_max").get<size_t>();
    if (e.contains("t0")) rc.em.t0 = e.at("t0").get<double>();
    if (e.contains("decay")) rc.em.decay = e.at("decay").get<double>();
    if (e.contains("tol")) rc.em.tol = e.at("tol").get<double>();
    if (e.contains("ridge")) rc.em.ridge = e.at("ridge").get<double>();
    if (e.contains("search")) {
      std::string s = e.at("search").get<std::string>();
      if (s == "brute")
        rc.em.search = AssignSearch::brute_force;
      else if (s == "factorized")
        rc.em.search = AssignSearch::factorized;
      else
        throw std::invalid_argument(
            "config: em.search must be \"brute\" or \"factorized\"");
    }
  }
}

struct GlobalOpts {
  std::string config_path;
  std::string preset;
  uint64_t seed = 1;
  bool seed_set = false;
  std::string out_dir = ".";
  int threads = 1;
};

RunConfig resolve_config(const GlobalOpts& g) {
  RunConfig rc = g.preset.empty() ? RunConfig{} : preset_config(g.preset);
  if (!g.config_path.empty()) {
    std::ifstream is(g.config_path);
    // A config path that does not exist is a bad invocation, not a data
    // integrity failure; report it on the usage channel.
    if (!is)
      throw std::invalid_argument("cannot open config: " + g.config_path);
    json j;
    try {
      is >> j;
    } catch (const json::exception& e) {
      throw std::invalid_argument("config: parse error in " + g.config_path +
                                  ": " + e.what());
    }
    apply_config_json(rc, j);
  }
  if (g.seed_set) rc.seed = g.seed;
  if (g.threads < 1)
    throw std::invalid_argument("config: --threads must be >= 1");
  rc.threads = g.threads;
  rc.em.seed = rc.seed;
  rc.value.seed = rc.seed;
  return rc;
}

json config_json(const RunConfig& rc) {
  return json{
      {"d", rc.key.d},
      {"key",
       {{"group_size", rc.key.group_size},
        {"n_levels", rc.key.n_levels},
        {"rounds", rc.key.rounds}}},
      {"value",
       {{"n_codes", rc.n_codes},
        {"hidden", rc.value.hidden},
        {"steps", rc.value.steps},
        {"batch", rc.value.batch},
        {"step_size", rc.value.step_size},
        {"t_start", rc.value.gumbel_t_start},
        {"t_end", rc.value.gumbel_t_end}}},
      {"em",
       {{"soft_iters", rc.em.soft_iters},
        {"hard_iters_max", rc.em.hard_iters_max},
        {"t0", rc.em.t0},
        {"decay", rc.em.decay},
        {"tol", rc.em.tol},
        {"ridge", rc.em.ridge},
        {"search", rc.em.search == AssignSearch::brute_force ? "brute"
                                                             : "factorized"}}}};
}

// ------------------------------------------------------------------- io ---

void atomic_write(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp~";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for write: " + tmp.string());
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!os) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_report(const fs::path& path, const json& j) {
  atomic_write(path, j.dump(2) + "\n");
}

fs::path ensure_out_dir(const std::string& out) {
  fs::path dir(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory: " + out);
  return dir;
}

// Core serializers write directly; route them through a temp name so every
// artifact lands atomically.
template <typename Fn>
void atomic_artifact(const fs::path& path, Fn&& save_fn) {
  fs::path tmp = path;
  tmp += ".tmp~";
  save_fn(tmp.string());
  fs::rename(tmp, path);
}

std::vector<size_t> parse_lengths(const std::string& csv) {
  std::vector<size_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    size_t pos = 0;
    unsigned long long v = std::stoull(item, &pos);
    if (pos != item.size() || v == 0)
      throw std::invalid_argument("invalid --lengths entry: " + item);
    out.push_back(static_cast<size_t>(v));
  }
  if (out.empty()) throw std::invalid_argument("--lengths is empty");
  return out;
}

double mb(uint64_t bytes) {
  return static_cast<double>(bytes) / (1024.0 * 1024.0);
}

std::string mb_string(uint64_t bytes) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", mb(bytes));
  return buf;
}

// ------------------------------------------------------------ subcommands --

struct GenSynthOpts {
  size_t n = 0;
  size_t d = 0;
  size_t rank = 0;  // 0 -> d
  std::string name = "synth.ctf";
};

void cmd_gen_synth(const GlobalOpts& g, const GenSynthOpts& o) {
  RunConfig rc = resolve_config(g);
  size_t d = o.d > 0 ? o.d : rc.key.d;
  size_t rank = o.rank > 0 ? o.rank : d;
  Mat x = gen_synth(o.n, d, rank, rc.seed);
  fs::path dir = ensure_out_dir(g.out_dir);
  fs::path file = dir / o.name;
  atomic_artifact(file, [&](const std::string& p) { save_ctf(x, p); });
  json out{{"command", "gen-synth"}, {"n", o.n},       {"d", d},
           {"rank", rank},           {"seed", rc.seed}, {"artifact", file.filename().string()}};
  std::puts(out.dump().c_str());
}

void cmd_train_key(const GlobalOpts& g, const std::string& data_path) {
  RunConfig rc = resolve_config(g);
  Mat calib = load_ctf(data_path);
  if (calib.cols != rc.key.d)
    throw std::invalid_argument(
        "train-key: data dimension " + std::to_string(calib.cols) +
        " does not match configured d = " + std::to_string(rc.key.d));
  KeyTrainResult res = train_key_codebook(calib, rc.key, rc.em);
  fs::path dir = ensure_out_dir(g.out_dir);
  fs::path artifact = dir / "key.cvqk";
  atomic_artifact(artifact, [&](const std::string& p) {
    save_key_codebook(res.codebook, p);
  });

  json rounds = json::array();
  for (size_t r = 0; r < res.report.rounds.size(); ++r) {
    const auto& round = res.report.rounds[r];
    json iters = json::array();
    for (const auto& grp : round.hard_objective) iters.push_back(grp.size());
    rounds.push_back(json{{"round", r},
                          {"reconstruction_mse", round.reconstruction_mse},
                          {"hard_iterations", iters}});
  }
  json report{{"command", "train-key"},
              {"seed", rc.seed},
              {"config", config_json(rc)},
              {"tokens", calib.rows},
              {"avg_bit_key", avg_bit_key(rc.key)},
              {"codebook_bytes", key_codebook_bytes(rc.key)},
              {"rounds", rounds},
              {"final_mse", res.report.rounds.back().reconstruction_mse},
              {"artifact", artifact.filename().string()}};
  write_report(dir / "train-key-report.json", report);
  std::puts(report.dump().c_str());
}

void cmd_train_value(const GlobalOpts& g, const std::string& data_path) {
  RunConfig rc = resolve_config(g);
  Mat calib = load_ctf(data_path);
  if (calib.cols != rc.key.d)
    throw std::invalid_argument(
        "train-value: data dimension " + std::to_string(calib.cols) +
        " does not match configured d = " + std::to_string(rc.key.d));
  ValueTrainResult res = train_value_quantizer(calib, rc.n_codes, rc.value);
  fs::path dir = ensure_out_dir(g.out_dir);
  fs::path artifact = dir / "value.cvqv";
  atomic_artifact(artifact, [&](const std::string& p) {
    save_value_quantizer(res.encoder, res.codebook, p);
  });

  // Reconstruction error with the trained quantizer, recomputed from the
  // artifacts rather than the loss curve.
  double sq = 0.0;
  for (size_t t = 0; t < calib.rows; ++t) {
    auto span = calib.row(t);
    Vec v(span.begin(), span.end());
    EncoderOut out = encoder_forward(v, res.encoder, EncoderMode::infer, 1.0);
    Vec rec = decode_value(out.bits, res.codebook);
    for (size_t j = 0; j < calib.cols; ++j) {
      double diff = rec[j] - v[j];
      sq += diff * diff;
    }
  }
  double calib_mse = sq / (static_cast<double>(calib.rows) * calib.cols);
  double tail = 0.0;
  size_t tail_n = std::min<size_t>(100, res.loss_curve.size());
  for (size_t i = res.loss_curve.size() - tail_n; i < res.loss_curve.size();
       ++i)
    tail += res.loss_curve[i];
  if (tail_n > 0) tail /= static_cast<double>(tail_n);

  json report{{"command", "train-value"},
              {"seed", rc.seed},
              {"config", config_json(rc)},
              {"tokens", calib.rows},
              {"avg_bit_value", avg_bit_value(rc.n_codes, rc.key.d)},
              {"codebook_bytes", value_codebook_bytes(rc.n_codes, rc.key.d)},
              {"steps_run", res.steps_run},
              {"diverged", res.diverged},
              {"final_loss", tail},
              {"calib_mse", calib_mse},
              {"artifact", artifact.filename().string()}};
  write_report(dir / "train-value-report.json", report);
  std::puts(report.dump().c_str());
}

struct QuantizeOpts {
  std::string keys_path;
  std::string values_path;
  std::string key_codebook;
  std::string value_quantizer;
};

void cmd_quantize(const GlobalOpts& g, const QuantizeOpts& o) {
  Mat keys = load_ctf(o.keys_path);
  Mat values = load_ctf(o.values_path);
  auto kcb = std::make_shared<KeyCodebook>(load_key_codebook(o.key_codebook));
  ValueQuantizer vq = load_value_quantizer(o.value_quantizer);
  auto vcb = std::make_shared<ValueCodebook>(std::move(vq.codebook));
  auto enc = std::make_shared<ValueEncoder>(std::move(vq.encoder));

  QuantizedKVCache cache = QuantizedKVCache::prefill(keys, values, kcb, vcb, enc);
  fs::path dir = ensure_out_dir(g.out_dir);
  fs::path artifact = dir / "cache.cvqc";
  atomic_artifact(artifact,
                  [&](const std::string& p) { cache.save(p); });

  Mat keys_rec = decode_keys(cache.key_codes(), *kcb);
  Mat values_rec = decode_values(cache.value_codes(), *vcb);
  // Reported errors describe the persistable artifacts: reconstructions are
  // rounded through f32 exactly as `reconstruct` serializes them, so the
  // numbers can be reproduced from the files alone.
  for (double& v : keys_rec.data) v = static_cast<float>(v);
  for (double& v : values_rec.data) v = static_cast<float>(v);
  CacheStats st = cache.stats();
  json report{{"command", "quantize"},
              {"tokens", cache.size()},
              {"key_mse", mse(keys, keys_rec)},
              {"value_mse", mse(values, values_rec)},
              {"stats",
               {{"tokens", st.tokens},
                {"fp16_equivalent_bytes", st.fp16_equivalent_bytes},
                {"quantized_payload_bits", st.quantized_payload_bits},
                {"quantized_payload_bytes", st.quantized_payload_bytes},
                {"codebook_bytes", st.codebook_bytes},
                {"avg_bit_effective", st.avg_bit_effective},
                {"avg_bit_amortized", st.avg_bit_amortized},
                {"avg_bit_key_side", st.avg_bit_key_side},
                {"avg_bit_value_side", st.avg_bit_value_side}}},
              {"artifact", artifact.filename().string()}};
  write_report(dir / "quantize-report.json", report);
  std::puts(report.dump().c_str());
}

struct ReconstructOpts {
  std::string cache_path;
  std::string key_codebook;
  std::string value_quantizer;
};

void cmd_reconstruct(const GlobalOpts& g, const ReconstructOpts& o) {
  auto kcb = std::make_shared<KeyCodebook>(load_key_codebook(o.key_codebook));
  ValueQuantizer vq = load_value_quantizer(o.value_quantizer);
  auto vcb = std::make_shared<ValueCodebook>(std::move(vq.codebook));
  auto enc = std::make_shared<ValueEncoder>(std::move(vq.encoder));
  QuantizedKVCache cache = QuantizedKVCache::load(o.cache_path, kcb, vcb, enc);

  Mat keys = decode_keys(cache.key_codes(), *kcb);
  Mat values = decode_values(cache.value_codes(), *vcb);
  fs::path dir = ensure_out_dir(g.out_dir);
  fs::path kf = dir / "keys-reconstructed.ctf";
  fs::path vf = dir / "values-reconstructed.ctf";
  atomic_artifact(kf, [&](const std::string& p) { save_ctf(keys, p); });
  atomic_artifact(vf, [&](const std::string& p) { save_ctf(values, p); });
  json report{{"command", "reconstruct"},
              {"tokens", cache.size()},
              {"keys", kf.filename().string()},
              {"values", vf.filename().string()}};
  std::puts(report.dump().c_str());
}

struct MseReportOpts {
  std::string data_path;
  std::string value_quantizer;  // optional
  std::string bits = "1,2,4,8";
};

void cmd_mse_report(const GlobalOpts& g, const MseReportOpts& o) {
  Mat data = load_ctf(o.data_path);
  std::vector<MseMethod> methods;
  methods.push_back(MseMethod::identity());
  for (size_t b : parse_lengths(o.bits))
    methods.push_back(MseMethod::asym(static_cast<unsigned>(b)));
  ValueQuantizer vq;
  if (!o.value_quantizer.empty()) {
    vq = load_value_quantizer(o.value_quantizer);
    methods.push_back(MseMethod::value_quantizer(vq.encoder, vq.codebook));
  }
  std::vector<MseRow> rows = mse_report(data, methods);
  fs::path dir = ensure_out_dir(g.out_dir);
  atomic_write(dir / "mse-report.csv", mse_report_csv(rows));
  atomic_write(dir / "mse-report.jsonl", mse_report_jsonl(rows));
  json out{{"command", "mse-report"},
           {"rows", rows.size()},
           {"csv", "mse-report.csv"},
           {"jsonl", "mse-report.jsonl"}};
  std::puts(out.dump().c_str());
}

struct BenchOpts {
  std::string lengths = "1024,4096,8192";
  bool use_run_config = false;
};

// Random-but-seeded instance; multiply counts do not depend on the values.
void cmd_bench_attn(const GlobalOpts& g, const BenchOpts& o) {
  RunConfig rc = resolve_config(g);
  KeyQuantConfig kq = rc.key;
  size_t n_codes = rc.n_codes;
  if (!o.use_run_config) {
    // Light defaults keep the default invocation quick; pass --preset or
    // --config to benchmark a full-size configuration.
    kq = KeyQuantConfig{128, 8, 16, 3};
    n_codes = 128;
  }
  kq.validate();
  std::vector<size_t> lengths = parse_lengths(o.lengths);

  Rng rng(rc.seed);
  KeyCodebook cb = KeyCodebook::zeros(kq);
  for (auto& atom : cb.atoms) {
    atom.x = 0.5 * rng.normal();
    atom.y = 0.5 * rng.normal();
  }
  ValueCodebook vcb = ValueCodebook::zeros(n_codes, kq.d);
  for (double& v : vcb.rows.data) v = rng.normal() * 2.0 / n_codes;
  RopeParams rope = RopeParams::make(kq.d);

  json rows = json::array();
  for (size_t n : lengths) {
    KeyCodes kc = KeyCodes::empty(kq, n);
    for (auto& v : kc.a) v = static_cast<uint16_t>(rng.index(kq.n_levels));
    for (auto& v : kc.b) v = static_cast<uint16_t>(rng.index(kq.n_levels));
    ValueCodes vc = ValueCodes::empty(n_codes, n);
    for (auto& bit : vc.bits) bit = static_cast<uint8_t>(rng.next_u64() & 1);
    Vec q(kq.d);
    for (double& v : q) v = rng.normal();

    AttnInput in{q, n - 1, kc, vc, cb, vcb, rope};
    RopeTable table(rope);
    AttnResult naive = naive_quantized_attention(in, table);
    AttnResult fused = fused_attention(in, table);
    double speedup = static_cast<double>(naive.flops.measured_mults) /
                     static_cast<double>(fused.flops.measured_mults);
    rows.push_back(json{
        {"n", n},
        {"naive",
         {{"predicted_mults", naive.flops.predicted_mults},
          {"measured_mults", naive.flops.measured_mults}}},
        {"fused",
         {{"predicted_mults", fused.flops.predicted_mults},
          {"measured_mults", fused.flops.measured_mults}}},
        {"speedup_measured", speedup}});
  }
  json report{{"command", "bench-attn"},
              {"seed", rc.seed},
              {"d", kq.d},
              {"n_codes", n_codes},
              {"rounds", kq.rounds},
              {"n_levels", kq.n_levels},
              {"group_size", kq.group_size},
              {"rows", rows}};
  fs::path dir = ensure_out_dir(g.out_dir);
  write_report(dir / "bench-attn.json", report);
  std::puts(report.dump().c_str());
}

void cmd_size_report(const GlobalOpts& g, const std::string& lengths_csv) {
  RunConfig rc = resolve_config(g);
  rc.key.validate();
  std::vector<size_t> lengths = parse_lengths(lengths_csv);
  json rows = json::array();
  for (size_t n : lengths) {
    CacheStats st = compute_cache_stats(rc.key, rc.n_codes, n);
    rows.push_back(json{{"n", n},
                        {"fp16_equivalent_bytes", st.fp16_equivalent_bytes},
                        {"fp16_mb_per_side", mb_string(st.fp16_equivalent_bytes / 2)},
                        {"quantized_payload_bytes", st.quantized_payload_bytes},
                        {"avg_bit_effective", st.avg_bit_effective},
                        {"avg_bit_amortized", st.avg_bit_amortized}});
  }
  uint64_t kb = key_codebook_bytes(rc.key);
  uint64_t vb = value_codebook_bytes(rc.n_codes, rc.key.d);
  json report{{"command", "size-report"},
              {"config", config_json(rc)},
              {"avg_bit_key", avg_bit_key(rc.key)},
              {"avg_bit_value", avg_bit_value(rc.n_codes, rc.key.d)},
              {"key_codebook_bytes", kb},
              {"key_codebook_mb", mb_string(kb)},
              {"value_codebook_bytes", vb},
              {"value_codebook_mb", mb_string(vb)},
              {"rows", rows}};
  fs::path dir = ensure_out_dir(g.out_dir);
  write_report(dir / "size-report.json", report);
  std::puts(report.dump().c_str());
}

struct AblateOpts {
  std::string data_path;  // optional; generated when empty
  size_t n = 4096;
  size_t d = 128;
  size_t rank = 0;  // 0 -> d/4
  std::string pairs = "16:4,32:16,64:64";
  std::string rounds = "1,3,5,8,11";
};

std::vector<std::pair<size_t, size_t>> parse_pairs(const std::string& csv) {
  std::vector<std::pair<size_t, size_t>> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    size_t colon = item.find(':');
    if (colon == std::string::npos)
      throw std::invalid_argument("invalid --pairs entry (want g:levels): " +
                                  item);
    out.emplace_back(std::stoull(item.substr(0, colon)),
                     std::stoull(item.substr(colon + 1)));
  }
  if (out.empty()) throw std::invalid_argument("--pairs is empty");
  return out;
}

void cmd_ablate(const GlobalOpts& g, const AblateOpts& o) {
  RunConfig rc = resolve_config(g);
  Mat data;
  json data_desc;
  if (!o.data_path.empty()) {
    data = load_ctf(o.data_path);
    data_desc = json{{"path", o.data_path},
                     {"n", data.rows},
                     {"d", data.cols}};
  } else {
    size_t rank = o.rank > 0 ? o.rank : std::max<size_t>(1, o.d / 4);
    data = gen_synth(o.n, o.d, rank, rc.seed);
    data_desc = json{{"n", o.n}, {"d", o.d}, {"rank", rank}};
  }

  // Group-size sweep at R = 1, each point at its matched level count.
  json group_rows = json::array();
  for (auto [grp, levels] : parse_pairs(o.pairs)) {
    KeyQuantConfig kq{data.cols, grp, levels, 1};
    kq.validate();
    EmConfig em = rc.em;
    em.seed = rc.seed;
    KeyTrainResult res = train_key_codebook(data, kq, em);
    group_rows.push_back(json{{"group_size", grp},
                              {"n_levels", levels},
                              {"rounds", 1},
                              {"avg_bit_key", avg_bit_key(kq)},
                              {"mse", res.report.rounds.back().reconstruction_mse}});
  }

  // Round sweep: one training at the largest R; earlier R values are read
  // off the per-round cumulative error of the same run (rounds are fit
  // sequentially, so a shorter run is a prefix of a longer one).
  std::vector<size_t> round_list = parse_lengths(o.rounds);
  size_t max_r = 0;
  for (size_t r : round_list) max_r = std::max(max_r, r);
  KeyQuantConfig kq{data.cols, rc.key.group_size, rc.key.n_levels, max_r};
  if (data.cols < 2 * kq.group_size || (data.cols / 2) % kq.group_size != 0)
    kq.group_size = std::min<size_t>(data.cols / 2, 64);
  // Clamp the level count so the n >= n_levels^2 training precondition
  // holds on the given data.
  while (kq.n_levels > 2 && kq.n_levels * kq.n_levels > data.rows)
    kq.n_levels /= 2;
  kq.validate();
  EmConfig em = rc.em;
  em.seed = rc.seed;
  KeyTrainResult res = train_key_codebook(data, kq, em);
  json round_rows = json::array();
  for (size_t r : round_list) {
    if (r < 1 || r > max_r)
      throw std::invalid_argument("--rounds entries must be in [1, max]");
    round_rows.push_back(
        json{{"rounds", r},
             {"group_size", kq.group_size},
             {"n_levels", kq.n_levels},
             {"avg_bit_key",
              avg_bit_key(KeyQuantConfig{kq.d, kq.group_size, kq.n_levels, r})},
             {"mse", res.report.rounds[r - 1].reconstruction_mse}});
  }

  json report{{"command", "ablate"},
              {"seed", rc.seed},
              {"data", data_desc},
              {"group_sweep", group_rows},
              {"round_sweep", round_rows}};
  fs::path dir = ensure_out_dir(g.out_dir);
  write_report(dir / "ablate-report.json", report);
  std::puts(report.dump().c_str());
}

// ----------------------------------------------------------------- main ---

void emit_error(int code, const std::string& kind, const std::string& msg) {
  json err{{"error", {{"exit_code", code}, {"type", kind}, {"message", msg}}}};
  std::fputs((err.dump() + "\n").c_str(), stderr);
}

int run_guarded(const std::function<void()>& fn) {
  try {
    fn();
    return 0;
  } catch (const json::exception& e) {
    emit_error(kExitConfig, "config", e.what());
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    emit_error(kExitConfig, "config", e.what());
    return kExitConfig;
  } catch (const IoError& e) {
    emit_error(kExitIo, "io", e.what());
    return kExitIo;
  } catch (const TrainingError& e) {
    emit_error(kExitTraining, "training", e.what());
    return kExitTraining;
  } catch (const std::exception& e) {
    emit_error(kExitInternal, "internal", e.what());
    return kExitInternal;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"commutative KV-cache quantization laboratory"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "commvq 0.1.0");

  GlobalOpts g;
  app.add_option("--config", g.config_path, "JSON config file")
      ->expected(1);
  app.add_option("--preset", g.preset, "configuration preset: 1bit or 2bit");
  auto* seed_opt = app.add_option("--seed", g.seed, "RNG seed");
  app.add_option("--out", g.out_dir, "output directory (default .)");
  app.add_option("--threads", g.threads,
                 "worker threads (reports echo it; execution is sequential)");

  GenSynthOpts gs;
  auto* c_gen = app.add_subcommand("gen-synth",
                                   "generate synthetic correlated tokens");
  c_gen->add_option("--n", gs.n, "token count")->required();
  c_gen->add_option("--d", gs.d, "dimension (default: config d)");
  c_gen->add_option("--rank", gs.rank, "latent rank (default: d)");
  c_gen->add_option("--name", gs.name, "output file name");

  std::string train_key_data;
  auto* c_tk = app.add_subcommand("train-key", "fit the key codebook");
  c_tk->add_option("--data", train_key_data, "calibration CTF file")
      ->required();

  std::string train_value_data;
  auto* c_tv = app.add_subcommand("train-value",
                                  "fit the value encoder + codebook");
  c_tv->add_option("--data", train_value_data, "calibration CTF file")
      ->required();

  QuantizeOpts qo;
  auto* c_q = app.add_subcommand("quantize", "prefill a quantized cache");
  c_q->add_option("--keys", qo.keys_path, "keys CTF file")->required();
  c_q->add_option("--values", qo.values_path, "values CTF file")->required();
  c_q->add_option("--key-codebook", qo.key_codebook, "CVQK file")->required();
  c_q->add_option("--value-quantizer", qo.value_quantizer, "CVQV file")
      ->required();

  ReconstructOpts ro;
  auto* c_r = app.add_subcommand("reconstruct",
                                 "decode a cache back to dense tensors");
  c_r->add_option("--cache", ro.cache_path, "CVQC file")->required();
  c_r->add_option("--key-codebook", ro.key_codebook, "CVQK file")->required();
  c_r->add_option("--value-quantizer", ro.value_quantizer, "CVQV file")
      ->required();

  MseReportOpts mo;
  auto* c_m = app.add_subcommand("mse-report",
                                 "reconstruction-error comparison table");
  c_m->add_option("--data", mo.data_path, "CTF data file")->required();
  c_m->add_option("--value-quantizer", mo.value_quantizer,
                  "CVQV file (adds the trained method)");
  c_m->add_option("--bits", mo.bits, "asym bit widths, e.g. 1,2,4,8");

  BenchOpts bo;
  auto* c_b = app.add_subcommand("bench-attn",
                                 "count multiplies for both attention paths");
  c_b->add_option("--lengths", bo.lengths, "token counts, e.g. 1024,4096");

  std::string size_lengths = "1024,8192,131072";
  auto* c_s = app.add_subcommand("size-report", "cache and codebook sizes");
  c_s->add_option("--lengths", size_lengths, "token counts for the table");

  AblateOpts ao;
  auto* c_a = app.add_subcommand("ablate", "sweep group size and rounds");
  c_a->add_option("--data", ao.data_path, "CTF data (generated when absent)");
  c_a->add_option("--n", ao.n, "generated token count");
  c_a->add_option("--d", ao.d, "generated dimension");
  c_a->add_option("--rank", ao.rank, "generated latent rank (default d/4)");
  c_a->add_option("--pairs", ao.pairs, "group:levels pairs for the g sweep");
  c_a->add_option("--rounds", ao.rounds, "round counts for the R sweep");

  // Global flags may appear after the subcommand name.
  for (CLI::App* sub : app.get_subcommands(nullptr)) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error(kExitConfig, "usage", e.what());
    return kExitConfig;
  }
  g.seed_set = seed_opt->count() > 0;
  bo.use_run_config = !g.preset.empty() || !g.config_path.empty();

  if (c_gen->parsed()) return run_guarded([&] { cmd_gen_synth(g, gs); });
  if (c_tk->parsed())
    return run_guarded([&] { cmd_train_key(g, train_key_data); });
  if (c_tv->parsed())
    return run_guarded([&] { cmd_train_value(g, train_value_data); });
  if (c_q->parsed()) return run_guarded([&] { cmd_quantize(g, qo); });
  if (c_r->parsed()) return run_guarded([&] { cmd_reconstruct(g, ro); });
  if (c_m->parsed()) return run_guarded([&] { cmd_mse_report(g, mo); });
  if (c_b->parsed()) return run_guarded([&] { cmd_bench_attn(g, bo); });
  if (c_s->parsed())
    return run_guarded([&] { cmd_size_report(g, size_lengths); });
  if (c_a->parsed()) return run_guarded([&] { cmd_ablate(g, ao); });
  emit_error(kExitConfig, "usage", "no subcommand given");
  return kExitConfig;
}
