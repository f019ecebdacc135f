#ifndef LSF_BENCH_HPP
#define LSF_BENCH_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "lsf/common.hpp"

namespace lsf {

struct BenchRow {
  std::string name;
  std::size_t length = 0;
  double median_ms = 0.0;
  double mad_ms = 0.0;
  int repeats = 0;
  std::uint64_t seed = 0;
  std::optional<double> slope;    // fitted log-log slope for this operator
  std::optional<double> speedup;  // (t_ref - t) / t_ref at this length
  std::string note;               // e.g. skip reason
  bool skipped = false;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::uint64_t seed = 0;
  std::string dtype = "f32";
  bool has_slopes = false;
  bool has_speedups = false;
};

inline constexpr int kMinBenchRepeats = 5;
inline constexpr int kBenchWarmupIters = 3;

// Median wall time of fn() over `repeats` timed runs after fixed warm-up
// iterations, plus the median absolute deviation. Monotonic clock.
template <typename F>
std::pair<double, double> time_median_ms(F&& fn, int repeats,
                                         int warmup = kBenchWarmupIters) {
  using Clock = std::chrono::steady_clock;
  for (int i = 0; i < warmup; ++i) fn();
  std::vector<double> times;
  times.reserve(static_cast<std::size_t>(repeats));
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = Clock::now();
    fn();
    const auto t1 = Clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  const double median = times[times.size() / 2];
  std::vector<double> dev;
  dev.reserve(times.size());
  for (double t : times) dev.push_back(std::abs(t - median));
  std::sort(dev.begin(), dev.end());
  return {median, dev[dev.size() / 2]};
}

// Least-squares slope of log(time) against log(length).
inline double fit_loglog_slope(const std::vector<double>& lengths,
                               const std::vector<double>& times_ms) {
  const std::size_t n = lengths.size();
  if (n < 2) throw ContractError("fit_loglog_slope: need at least two points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = std::log(lengths[i]);
    const double y = std::log(times_ms[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double denom = static_cast<double>(n) * sxx - sx * sx;
  return (static_cast<double>(n) * sxy - sx * sy) / denom;
}

namespace detail {

// RFC 4180: quote fields containing commas, quotes, or newlines.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += "\"";
  return out;
}

inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace detail

inline std::string machine_note() {
  return cat("linux-", std::thread::hardware_concurrency(), "-threads");
}

inline void write_csv(std::ostream& os, const BenchReport& report) {
  os << "# lsf bench v1 seed=" << report.seed << " dtype=" << report.dtype
     << " machine=" << machine_note() << "\n";
  os << "name,length,median_ms,mad_ms,repeats,seed";
  if (report.has_slopes) os << ",loglog_slope";
  if (report.has_speedups) os << ",speedup";
  os << ",note\n";
  for (const auto& row : report.rows) {
    os << detail::csv_field(row.name) << "," << row.length << ",";
    if (!row.skipped) {
      os << detail::fmt_g(row.median_ms) << "," << detail::fmt_g(row.mad_ms);
    } else {
      os << ",";
    }
    os << "," << row.repeats << "," << row.seed;
    if (report.has_slopes) {
      os << ",";
      if (row.slope) os << detail::fmt_g(*row.slope);
    }
    if (report.has_speedups) {
      os << ",";
      if (row.speedup) os << detail::fmt_g(*row.speedup);
    }
    os << "," << detail::csv_field(row.note) << "\n";
  }
}

inline void write_csv_file(const std::string& path, const BenchReport& report) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError(cat("cannot open CSV output: ", path));
  write_csv(f, report);
}

}  // namespace lsf

#endif  // LSF_BENCH_HPP
