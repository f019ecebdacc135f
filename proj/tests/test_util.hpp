#ifndef LSF_TESTS_TEST_UTIL_HPP
#define LSF_TESTS_TEST_UTIL_HPP

#include <cmath>
#include <cstdint>
#include <vector>

#include "lsf/common.hpp"
#include "lsf/tensor.hpp"

namespace testutil {

template <typename S>
lsf::Tensor<S> randn(lsf::Shape shape, lsf::Rng& rng, double std_dev = 1.0) {
  lsf::Tensor<S> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std_dev);
  for (auto& v : t.mutable_values()) v = static_cast<S>(dist(rng));
  return t;
}

template <typename S>
double max_abs_diff(const lsf::Tensor<S>& a, const std::vector<double>& b) {
  double worst = 0.0;
  auto av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(av[i]) - b[i]));
  }
  return worst;
}

template <typename S>
double max_abs_diff(const lsf::Tensor<S>& a, const lsf::Tensor<S>& b) {
  double worst = 0.0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) {
    worst = std::max(worst,
                     std::abs(static_cast<double>(av[i]) - static_cast<double>(bv[i])));
  }
  return worst;
}

template <typename S>
std::vector<double> to_doubles(const lsf::Tensor<S>& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

}  // namespace testutil

#endif  // LSF_TESTS_TEST_UTIL_HPP
