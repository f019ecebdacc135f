#ifndef LSF_ATTENTION_HPP
#define LSF_ATTENTION_HPP

#include <cmath>
#include <cstddef>
#include <vector>

#include "lsf/ops.hpp"
#include "lsf/rope.hpp"
#include "lsf/tensor.hpp"

namespace lsf {

enum class AttentionVariant { SA, LA };

enum class PhiKind { EluPlusOne, Relu, Exp };

inline const char* phi_name(PhiKind k) {
  switch (k) {
    case PhiKind::EluPlusOne: return "elu1";
    case PhiKind::Relu: return "relu";
    case PhiKind::Exp: return "exp";
  }
  return "?";
}

// Non-negativity map for the linear-attention feature space. The default
// elu(x)+1 is strictly positive; relu can reach exact zero, which makes the
// denominator epsilon load-bearing.
template <typename S>
Tensor<S> phi(const Tensor<S>& x, PhiKind kind = PhiKind::EluPlusOne) {
  switch (kind) {
    case PhiKind::EluPlusOne: return elu_plus_one(x);
    case PhiKind::Relu: return relu(x);
    case PhiKind::Exp: return exp(x);
  }
  throw ConfigError("phi: unknown feature map");
}

// Multi-head attention parameters. Projections are bias-free [d_model x
// d_model] matrices applied as x W^T; rotation acts per head, so head_dim
// must be even.
template <typename S>
struct AttentionLayer {
  Tensor<S> w_q, w_k, w_v, w_o;
  int heads = 1;
  AttentionVariant variant = AttentionVariant::SA;
  PhiKind phi_kind = PhiKind::EluPlusOne;
  S la_eps = S(1e-6);
  RopeConfig<S> rope;

  int d_model() const { return static_cast<int>(w_q.extent(0)); }
  int head_dim() const { return d_model() / heads; }

  static AttentionLayer make(int d_model, int heads, AttentionVariant variant,
                             Rng& rng, PhiKind phi_kind = PhiKind::EluPlusOne,
                             S la_eps = S(1e-6)) {
    if (d_model <= 0 || heads <= 0 || d_model % heads != 0) {
      throw ConfigError(cat("attention: d_model ", d_model,
                            " not divisible by heads ", heads));
    }
    const int hd = d_model / heads;
    if (hd % 2 != 0) {
      throw ConfigError(cat("attention: head_dim ", hd, " must be even for rotation"));
    }
    AttentionLayer layer;
    layer.heads = heads;
    layer.variant = variant;
    layer.phi_kind = phi_kind;
    layer.la_eps = la_eps;
    layer.rope = RopeConfig<S>::make(hd);
    const S std_dev = S(1) / std::sqrt(static_cast<S>(d_model));
    std::normal_distribution<double> dist(0.0, static_cast<double>(std_dev));
    auto init = [&](Tensor<S>& t) {
      t = Tensor<S>(Shape{static_cast<std::size_t>(d_model),
                          static_cast<std::size_t>(d_model)});
      for (auto& v : t.mutable_values()) v = static_cast<S>(dist(rng));
    };
    init(layer.w_q);
    init(layer.w_k);
    init(layer.w_v);
    init(layer.w_o);
    return layer;
  }

  std::vector<Tensor<S>> parameters() { return {w_q, w_k, w_v, w_o}; }
};

// Attention weight using a layer's projections on one head's slice.
template <typename S>
S attention_weight(const Tensor<S>& x_m, const Tensor<S>& x_n, std::ptrdiff_t m,
                   std::ptrdiff_t n, const AttentionLayer<S>& layer, int head = 0) {
  const std::size_t hd = static_cast<std::size_t>(layer.head_dim());
  const std::size_t c0 = static_cast<std::size_t>(head) * hd;
  Tensor<S> xm = reshape(x_m, Shape{1, x_m.size()});
  Tensor<S> xn = reshape(x_n, Shape{1, x_n.size()});
  Tensor<S> q = slice_cols(linear_nobias(xm, layer.w_q), c0, c0 + hd);
  Tensor<S> k = slice_cols(linear_nobias(xn, layer.w_k), c0, c0 + hd);
  if (m < 0 || n < 0) {
    throw ContractError(cat("attention_weight: negative position m=", m, " n=", n));
  }
  Tensor<S> qr = apply_rope(q, layer.rope, m);
  Tensor<S> kr = apply_rope(k, layer.rope, n);
  S acc = S(0);
  for (std::size_t i = 0; i < hd; ++i) acc += qr.at(i) * kr.at(i);
  return acc;
}

// Softmax attention: rotated q and k, scores scaled by 1/sqrt(head_dim),
// row softmax, weighted sum of unrotated values, heads concatenated, output
// projection.
template <typename S>
Tensor<S> sa_forward(const Tensor<S>& x, const AttentionLayer<S>& layer,
                     std::ptrdiff_t position_offset = 0) {
  if (layer.variant != AttentionVariant::SA) {
    throw ContractError("sa_forward: layer variant is not SA");
  }
  detail::require_rank(x, 2, "sa_forward");
  if (x.extent(0) == 0) throw ShapeError("sa_forward: empty input sequence");
  const std::size_t hd = static_cast<std::size_t>(layer.head_dim());
  const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(hd));

  Tensor<S> q = linear_nobias(x, layer.w_q);
  Tensor<S> k = linear_nobias(x, layer.w_k);
  Tensor<S> v = linear_nobias(x, layer.w_v);

  std::vector<Tensor<S>> heads_out;
  heads_out.reserve(static_cast<std::size_t>(layer.heads));
  for (int h = 0; h < layer.heads; ++h) {
    const std::size_t c0 = static_cast<std::size_t>(h) * hd;
    Tensor<S> qh = apply_rope(slice_cols(q, c0, c0 + hd), layer.rope, position_offset);
    Tensor<S> kh = apply_rope(slice_cols(k, c0, c0 + hd), layer.rope, position_offset);
    Tensor<S> vh = slice_cols(v, c0, c0 + hd);
    Tensor<S> scores = scale(matmul(qh, transpose(kh)), inv_sqrt_d);
    Tensor<S> attn = softmax(scores, -1);
    heads_out.push_back(matmul(attn, vh));
  }
  Tensor<S> merged = layer.heads == 1 ? heads_out[0] : concat_cols(heads_out);
  return linear_nobias(merged, layer.w_o);
}

// Linear attention via the aggregate sums S = sum_n (R_n phi(k_n)) v_n^T and
// z = sum_n phi(k_n): O(N * head_dim^2) total. The denominator uses the
// unrotated features; a stability epsilon guards relu-style feature maps.
template <typename S>
Tensor<S> la_forward(const Tensor<S>& x, const AttentionLayer<S>& layer,
                     std::ptrdiff_t position_offset = 0) {
  if (layer.variant != AttentionVariant::LA) {
    throw ContractError("la_forward: layer variant is not LA");
  }
  detail::require_rank(x, 2, "la_forward");
  if (x.extent(0) == 0) throw ShapeError("la_forward: empty input sequence");
  const std::size_t hd = static_cast<std::size_t>(layer.head_dim());

  Tensor<S> q = linear_nobias(x, layer.w_q);
  Tensor<S> k = linear_nobias(x, layer.w_k);
  Tensor<S> v = linear_nobias(x, layer.w_v);

  std::vector<Tensor<S>> heads_out;
  heads_out.reserve(static_cast<std::size_t>(layer.heads));
  for (int h = 0; h < layer.heads; ++h) {
    const std::size_t c0 = static_cast<std::size_t>(h) * hd;
    Tensor<S> qf = phi(slice_cols(q, c0, c0 + hd), layer.phi_kind);
    Tensor<S> kf = phi(slice_cols(k, c0, c0 + hd), layer.phi_kind);
    Tensor<S> vh = slice_cols(v, c0, c0 + hd);

    Tensor<S> qr = apply_rope(qf, layer.rope, position_offset);
    Tensor<S> kr = apply_rope(kf, layer.rope, position_offset);

    Tensor<S> agg = matmul(transpose(kr), vh);      // [hd x hd]
    Tensor<S> numer = matmul(qr, agg);              // [N x hd]
    Tensor<S> z = colwise_sum(kf);                  // [hd]
    Tensor<S> denom = reshape(matmul(qf, reshape(z, Shape{hd, 1})),
                              Shape{x.extent(0)});  // [N]
    Tensor<S> denom_eps = add_scalar(denom, layer.la_eps);
    auto dv = denom_eps.values();
    for (std::size_t i = 0; i < dv.size(); ++i) {
      if (!(dv[i] > S(0))) {
        throw NumericError(cat("la_forward: denominator underflow at position ", i,
                               " (value ", dv[i], ")"));
      }
    }
    heads_out.push_back(div_colvec(numer, denom_eps));
  }
  Tensor<S> merged = layer.heads == 1 ? heads_out[0] : concat_cols(heads_out);
  return linear_nobias(merged, layer.w_o);
}

// Variant-dispatching forward.
template <typename S>
Tensor<S> attention_forward(const Tensor<S>& x, const AttentionLayer<S>& layer,
                            std::ptrdiff_t position_offset = 0) {
  return layer.variant == AttentionVariant::SA
             ? sa_forward(x, layer, position_offset)
             : la_forward(x, layer, position_offset);
}

}  // namespace lsf

#endif  // LSF_ATTENTION_HPP
