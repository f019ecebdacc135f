#ifndef LSF_ROPE_HPP
#define LSF_ROPE_HPP

#include <cmath>
#include <cstddef>
#include <vector>

#include "lsf/ops.hpp"
#include "lsf/tensor.hpp"

namespace lsf {

// Rotary embedding table: theta_i = base^(-2(i-1)/d) for i in [1, d/2].
template <typename S>
struct RopeConfig {
  int dim = 0;
  S base = S(10000);
  std::vector<S> theta;  // d/2 entries, theta[0] == 1

  static RopeConfig make(int dim, S base = S(10000)) {
    if (dim <= 0 || dim % 2 != 0) {
      throw ConfigError(cat("rope dimension must be positive and even, got ", dim));
    }
    RopeConfig cfg;
    cfg.dim = dim;
    cfg.base = base;
    cfg.theta.resize(static_cast<std::size_t>(dim) / 2);
    for (std::size_t i = 0; i < cfg.theta.size(); ++i) {
      cfg.theta[i] = static_cast<S>(
          std::pow(static_cast<double>(base),
                   -2.0 * static_cast<double>(i) / static_cast<double>(dim)));
    }
    return cfg;
  }
};

namespace detail {

// Rotate interleaved pairs (x[2p], x[2p+1]) of every row by m * theta_p,
// m = row + offset (negated angles when invert is set, i.e. R^T).
template <typename S>
void rope_rotate(const std::vector<S>& src, std::vector<S>& dst, std::size_t rows,
                 std::size_t d, const std::vector<S>& theta,
                 std::ptrdiff_t offset, bool invert) {
  const S sign = invert ? S(-1) : S(1);
  for (std::size_t r = 0; r < rows; ++r) {
    const double m = static_cast<double>(static_cast<std::ptrdiff_t>(r) + offset);
    for (std::size_t p = 0; p < d / 2; ++p) {
      const double ang = m * static_cast<double>(theta[p]);
      const S c = static_cast<S>(std::cos(ang));
      const S s = sign * static_cast<S>(std::sin(ang));
      const S x0 = src[r * d + 2 * p];
      const S x1 = src[r * d + 2 * p + 1];
      dst[r * d + 2 * p] = c * x0 - s * x1;
      dst[r * d + 2 * p + 1] = s * x0 + c * x1;
    }
  }
}

}  // namespace detail

// Row m of the output is R_{m+offset} x_m. The rotation is applied pairwise;
// the d x d matrix form exists only in the test oracle. R is orthogonal, so
// the backward pass rotates the gradient by the transposed (negated) angles.
template <typename S>
Tensor<S> apply_rope(const Tensor<S>& x, const RopeConfig<S>& cfg,
                     std::ptrdiff_t offset = 0) {
  detail::require_rank(x, 2, "apply_rope");
  const std::size_t n = x.extent(0);
  const std::size_t d = x.extent(1);
  if (static_cast<int>(d) != cfg.dim) {
    throw ConfigError(cat("apply_rope: input width ", d,
                          " does not match rope dimension ", cfg.dim));
  }
  Tensor<S> out(x.shape());
  detail::rope_rotate(x.impl()->value, out.impl()->value, n, d, cfg.theta, offset,
                      false);
  detail::maybe_record(out, x.requires_grad(),
                       [xi = x.impl(), oi = out.impl(), n, d,
                        theta = cfg.theta, offset] {
                         if (!xi->requires_grad) return;
                         std::vector<S> tmp(xi->value.size());
                         detail::rope_rotate(*oi->grad, tmp, n, d, theta, offset, true);
                         auto& gx = detail::grad_buf(xi);
                         for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
                       });
  return out;
}

// Scalar attention weight between token embeddings x_m and x_n at positions
// m and n: (R_m W_q x_m)^T (R_n W_k x_n). The equivalent relative form
// x_m^T W_q^T R_{n-m} W_k x_n is kept in the tests as the cross-check.
template <typename S>
S attention_weight(const Tensor<S>& x_m, const Tensor<S>& x_n, std::ptrdiff_t m,
                   std::ptrdiff_t n, const Tensor<S>& w_q, const Tensor<S>& w_k,
                   const RopeConfig<S>& cfg) {
  if (m < 0 || n < 0) {
    throw ContractError(cat("attention_weight: negative position m=", m, " n=", n));
  }
  Tensor<S> xm = reshape(x_m, Shape{1, x_m.size()});
  Tensor<S> xn = reshape(x_n, Shape{1, x_n.size()});
  Tensor<S> q = apply_rope(linear_nobias(xm, w_q), cfg, m);
  Tensor<S> k = apply_rope(linear_nobias(xn, w_k), cfg, n);
  S acc = S(0);
  auto qv = q.values();
  auto kv = k.values();
  for (std::size_t i = 0; i < qv.size(); ++i) acc += qv[i] * kv[i];
  return acc;
}

}  // namespace lsf

#endif  // LSF_ROPE_HPP
