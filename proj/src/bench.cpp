#include "lsf/bench_run.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "lsf/attention.hpp"
#include "lsf/encoder.hpp"

namespace lsf {

namespace {

template <typename S>
Tensor<S> randn_tensor(Shape shape, Rng& rng) {
  Tensor<S> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.mutable_values()) v = static_cast<S>(dist(rng));
  return t;
}

template <typename S>
BenchReport attention_bench_impl(const AttentionBenchOptions& opts) {
  if (opts.lengths.empty()) throw UsageError("bench-attention: no lengths given");
  if (opts.repeats < kMinBenchRepeats) {
    throw UsageError(cat("bench-attention: repeats must be >= ", kMinBenchRepeats,
                         ", got ", opts.repeats));
  }
  BenchReport report;
  report.seed = opts.seed;
  report.dtype = opts.dtype;

  Rng rng = make_rng(opts.seed, 0xa77e);
  auto sa = AttentionLayer<S>::make(opts.d_model, opts.heads, AttentionVariant::SA, rng);
  auto la = AttentionLayer<S>::make(opts.d_model, opts.heads, AttentionVariant::LA, rng);

  struct OpSeries {
    const char* name;
    std::vector<double> lengths, times;
  };
  OpSeries series[2] = {{"sa_forward", {}, {}}, {"la_forward", {}, {}}};

  for (std::size_t n : opts.lengths) {
    Tensor<S> x =
        randn_tensor<S>(Shape{n, static_cast<std::size_t>(opts.d_model)}, rng);
    for (int op = 0; op < 2; ++op) {
      BenchRow row;
      row.name = series[op].name;
      row.length = n;
      row.repeats = opts.repeats;
      row.seed = opts.seed;
      if (op == 0) {
        // Scores and attention matrices dominate the softmax path.
        const std::size_t bytes = 2 * n * n * sizeof(S);
        if (bytes > opts.memory_budget_bytes) {
          row.skipped = true;
          row.note = cat("skipped: needs ~", bytes / (1u << 20),
                         " MiB > budget");
          report.rows.push_back(row);
          continue;
        }
      }
      auto [median, mad] = time_median_ms(
          [&] {
            Tensor<S> y = op == 0 ? sa_forward(x, sa) : la_forward(x, la);
            (void)y;
          },
          opts.repeats);
      row.median_ms = median;
      row.mad_ms = mad;
      series[op].lengths.push_back(static_cast<double>(n));
      series[op].times.push_back(median);
      report.rows.push_back(row);
    }
  }

  for (auto& s : series) {
    if (s.lengths.size() >= 2) {
      report.has_slopes = true;
      const double slope = fit_loglog_slope(s.lengths, s.times);
      for (auto& row : report.rows) {
        if (row.name == s.name && !row.skipped) row.slope = slope;
      }
    }
  }
  return report;
}

template <typename S>
BenchReport encoder_bench_impl(const EncoderBenchOptions& opts) {
  if (opts.audio_seconds.empty()) throw UsageError("bench-encoder: no lengths given");
  if (opts.repeats < kMinBenchRepeats) {
    throw UsageError(cat("bench-encoder: repeats must be >= ", kMinBenchRepeats,
                         ", got ", opts.repeats));
  }
  if (opts.configs.empty()) throw UsageError("bench-encoder: no configs given");
  std::set<std::string> seen;
  for (const auto& c : opts.configs) {
    if (c != "hybrid" && c != "all_sa") {
      throw UsageError(cat("bench-encoder: unknown config '", c,
                           "' (want hybrid|all_sa)"));
    }
    if (!seen.insert(c).second) {
      throw UsageError(cat("bench-encoder: duplicate config name '", c, "'"));
    }
  }

  BenchReport report;
  report.seed = opts.seed;
  report.dtype = opts.dtype;

  struct Timed {
    std::string config;
    std::size_t frames;
    double median;
  };
  std::vector<Timed> timed;

  for (const auto& name : opts.configs) {
    EncoderConfig cfg = opts.geometry;
    cfg.force_all_sa = name == "all_sa";
    cfg.validate();
    Rng rng = make_rng(opts.seed, 0xe4c0);  // same stream: identical weights
    Encoder<S> enc = Encoder<S>::make(cfg, rng);
    Encoder<S> fused = fuse_encoder(enc);
    for (double seconds : opts.audio_seconds) {
      const std::size_t frames = static_cast<std::size_t>(
          std::llround(seconds * 1000.0 / opts.frame_hop_ms));
      Rng in_rng = make_rng(opts.seed, 0x1d + frames);
      Tensor<S> x = randn_tensor<S>(
          Shape{frames, static_cast<std::size_t>(cfg.feature_dim)}, in_rng);
      BenchRow row;
      row.name = name;
      row.length = frames;
      row.repeats = opts.repeats;
      row.seed = opts.seed;
      auto [median, mad] = time_median_ms(
          [&] {
            Tensor<S> y = encoder_forward(x, fused, BnMode::Eval);
            (void)y;
          },
          opts.repeats);
      row.median_ms = median;
      row.mad_ms = mad;
      report.rows.push_back(row);
      timed.push_back({name, frames, median});
    }
  }

  // Speedup of hybrid relative to all_sa at matching lengths.
  for (auto& row : report.rows) {
    if (row.name != "hybrid") continue;
    for (const auto& t : timed) {
      if (t.config == "all_sa" && t.frames == row.length) {
        report.has_speedups = true;
        row.speedup = (t.median - row.median_ms) / t.median;
      }
    }
  }
  return report;
}

}  // namespace

BenchReport run_attention_bench(const AttentionBenchOptions& opts) {
  if (opts.dtype == "f32") return attention_bench_impl<float>(opts);
  if (opts.dtype == "f64") return attention_bench_impl<double>(opts);
  throw UsageError(cat("unknown dtype '", opts.dtype, "' (want f32|f64)"));
}

BenchReport run_encoder_bench(const EncoderBenchOptions& opts) {
  if (opts.dtype == "f32") return encoder_bench_impl<float>(opts);
  if (opts.dtype == "f64") return encoder_bench_impl<double>(opts);
  throw UsageError(cat("unknown dtype '", opts.dtype, "' (want f32|f64)"));
}

}  // namespace lsf
