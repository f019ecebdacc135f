#ifndef LSF_BENCH_RUN_HPP
#define LSF_BENCH_RUN_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "lsf/bench.hpp"
#include "lsf/config.hpp"

namespace lsf {

struct AttentionBenchOptions {
  std::vector<std::size_t> lengths = {256, 512, 1024, 2048, 4096};
  int d_model = 64;
  int heads = 1;
  int repeats = 5;
  std::string dtype = "f32";
  std::uint64_t seed = 1;
  std::size_t memory_budget_bytes = 4ull << 30;
};

// Times sa_forward and la_forward per length and appends fitted log-log
// slopes per operator when two or more lengths were measured.
BenchReport run_attention_bench(const AttentionBenchOptions& opts);

struct EncoderBenchOptions {
  std::vector<double> audio_seconds = {2.4, 7.5, 15.0, 30.0};
  std::vector<std::string> configs = {"hybrid", "all_sa"};
  EncoderConfig geometry;  // attention variants are overridden per config
  int repeats = 5;
  std::string dtype = "f32";
  std::uint64_t seed = 1;
  double frame_hop_ms = 10.0;  // audio seconds -> frames
};

// Times fused-form encoder forwards per config and length; hybrid rows carry
// speedup = (t_all_sa - t_hybrid) / t_all_sa at the same length.
BenchReport run_encoder_bench(const EncoderBenchOptions& opts);

}  // namespace lsf

#endif  // LSF_BENCH_RUN_HPP
