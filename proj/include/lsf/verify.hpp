#ifndef LSF_VERIFY_HPP
#define LSF_VERIFY_HPP

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace lsf::verify {

struct PropertyResult {
  std::string name;
  double observed = 0.0;   // worst-case observed error or measured value
  double tolerance = 0.0;  // bound it is compared against
  bool pass = false;
  std::string detail;      // optional context (counts, lengths, ...)
};

struct VerifyOptions {
  std::uint64_t seed = 1;
  int gradient_seeds = 100;  // seeds per op in the gradient suite
  bool fault_inject = false; // deliberately corrupt one fused kernel
  // Geometry for the latency suite.
  int latency_repeats = 5;
  bool quick_latency = false;  // fewer/shorter lengths, for tests
};

// Suites: "gradients", "fusion", "invariances", "all" (which also runs the
// latency group). Unknown names raise UsageError.
std::vector<PropertyResult> run_verify_suite(const std::string& suite,
                                             const VerifyOptions& opts);

// One line per property; returns the number of failures.
int print_results(std::ostream& os, const std::vector<PropertyResult>& results);

}  // namespace lsf::verify

#endif  // LSF_VERIFY_HPP
