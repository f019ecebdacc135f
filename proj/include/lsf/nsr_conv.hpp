#ifndef LSF_NSR_CONV_HPP
#define LSF_NSR_CONV_HPP

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "lsf/ops.hpp"
#include "lsf/tensor.hpp"

namespace lsf {

inline constexpr int kTrunkTaps = 31;

template <typename S>
struct BnParams {
  Tensor<S> gamma, beta;               // trainable
  Tensor<S> running_mean, running_var;  // buffers
  S eps = S(1e-5);
  S momentum = S(0.1);

  static BnParams neutral(std::size_t channels, S eps = S(1e-5)) {
    BnParams bn;
    bn.eps = eps;
    bn.gamma = Tensor<S>(Shape{channels}, S(1));
    bn.beta = Tensor<S>(Shape{channels}, S(0));
    bn.running_mean = Tensor<S>(Shape{channels}, S(0));
    bn.running_var = Tensor<S>(Shape{channels}, S(1) - eps);
    return bn;
  }
};

template <typename S>
Tensor<S> batchnorm(const Tensor<S>& x, BnParams<S>& bn, BnMode mode,
                    bool update_running = true) {
  return batchnorm(x, bn.gamma, bn.beta, bn.running_mean, bn.running_var, bn.eps,
                   mode, bn.momentum, update_running);
}

// One searched candidate: a depthwise conv of the given kernel size followed
// by BN. kernel_size 0 is the BN-only branch; it carries no conv parameters
// and folds as a centred 1-tap delta kernel.
template <typename S>
struct BranchSpec {
  int kernel_size = 0;  // in [0, 30]
  std::optional<Tensor<S>> kernel;  // [k x C], absent when kernel_size == 0
  std::optional<Tensor<S>> bias;    // [C]
  BnParams<S> bn;

  void validate(std::size_t channels) const {
    if (kernel_size < 0 || kernel_size > kTrunkTaps - 1) {
      throw ContractError(cat("branch kernel size ", kernel_size,
                              " outside [0, ", kTrunkTaps - 1, "]"));
    }
    if (kernel_size == 0) {
      if (kernel || bias) {
        throw ContractError("kernel_size 0 branch must not carry conv parameters");
      }
    } else {
      if (!kernel || !bias) {
        throw ContractError(cat("branch k=", kernel_size, " missing conv parameters"));
      }
      if (kernel->extent(0) != static_cast<std::size_t>(kernel_size) ||
          kernel->extent(1) != channels) {
        throw ShapeError(cat("branch kernel shape ", shape_str(kernel->shape()),
                             " does not match k=", kernel_size, " C=", channels));
      }
    }
  }
};

// Training-form module: pw conv + GLU gate, trunk 31-tap depthwise conv with
// BN, weighted candidate branches, module-level BN, Swish, closing pw conv.
template <typename S>
struct NsrConvModule {
  std::size_t channels = 0;
  Tensor<S> pw_in_w, pw_in_b;    // [2C x C], [2C]
  Tensor<S> trunk_kernel;        // [31 x C]
  Tensor<S> trunk_bias;          // [C]
  BnParams<S> trunk_bn;
  std::vector<BranchSpec<S>> branches;
  Tensor<S> logits;                       // [branches], architecture params
  std::optional<std::vector<S>> fixed_alpha;  // retrain stage: frozen weights
  BnParams<S> post_bn;
  Tensor<S> pw_out_w, pw_out_b;  // [C x C], [C]

  // Branch mixture weights: softmax of the logits on the active tape, or the
  // frozen re-softmaxed weights when the module is in the retrain stage.
  Tensor<S> alpha_tensor() const {
    if (fixed_alpha) return Tensor<S>(Shape{fixed_alpha->size()}, *fixed_alpha);
    return softmax(logits, -1);
  }

  std::vector<S> alpha_values() const {
    if (branches.empty()) return {};
    Tensor<S> a = alpha_tensor();
    return std::vector<S>(a.values().begin(), a.values().end());
  }

  // Trainable model weights (w); logits (c) are deliberately excluded.
  std::vector<Tensor<S>> weights() {
    std::vector<Tensor<S>> out = {pw_in_w, pw_in_b, trunk_kernel, trunk_bias,
                                  trunk_bn.gamma, trunk_bn.beta};
    for (auto& br : branches) {
      if (br.kernel) out.push_back(*br.kernel);
      if (br.bias) out.push_back(*br.bias);
      out.push_back(br.bn.gamma);
      out.push_back(br.bn.beta);
    }
    out.push_back(post_bn.gamma);
    out.push_back(post_bn.beta);
    out.push_back(pw_out_w);
    out.push_back(pw_out_b);
    return out;
  }
};

// Inference-form module: the depthwise stage is one 31-tap conv, no BN left.
template <typename S>
struct FusedConvModule {
  std::size_t channels = 0;
  Tensor<S> pw_in_w, pw_in_b;
  Tensor<S> fused_kernel;  // [31 x C]
  Tensor<S> fused_bias;    // [C]
  Tensor<S> pw_out_w, pw_out_b;
};

namespace detail {

template <typename S>
Tensor<S> branch_conv(const Tensor<S>& g, const BranchSpec<S>& br) {
  if (br.kernel_size == 0) return g;
  auto [pl, pr] = same_pads(static_cast<std::size_t>(br.kernel_size));
  return depthwise_conv1d(g, *br.kernel, *br.bias, pl, pr);
}

}  // namespace detail

// The depthwise mixing stage: trunk plus alpha-weighted candidate branches,
// evaluated on the gated input g.
template <typename S>
Tensor<S> mixed_op_forward(const Tensor<S>& g, NsrConvModule<S>& m, BnMode mode,
                           bool update_running = true) {
  auto [pl, pr] = same_pads(kTrunkTaps);
  Tensor<S> mix = batchnorm(depthwise_conv1d(g, m.trunk_kernel, m.trunk_bias, pl, pr),
                            m.trunk_bn, mode, update_running);
  if (!m.branches.empty()) {
    Tensor<S> alpha = m.alpha_tensor();
    if (alpha.size() != m.branches.size()) {
      throw ContractError(cat("mixed op: ", m.branches.size(), " branches but ",
                              alpha.size(), " weights"));
    }
    for (std::size_t i = 0; i < m.branches.size(); ++i) {
      Tensor<S> b = batchnorm(detail::branch_conv(g, m.branches[i]), m.branches[i].bn,
                              mode, update_running);
      mix = add(mix, scale_by(b, select(alpha, i)));
    }
  }
  return mix;
}

template <typename S>
Tensor<S> nsr_forward_train(const Tensor<S>& x, NsrConvModule<S>& m, BnMode mode,
                            bool update_running = true) {
  detail::require_rank(x, 2, "nsr_forward_train");
  if (x.extent(0) < 1) throw ShapeError("nsr_forward_train: empty time axis");
  if (x.extent(1) != m.channels) {
    throw ShapeError(cat("nsr_forward_train: expected ", m.channels, " channels, got ",
                         shape_str(x.shape())));
  }
  Tensor<S> g = glu(linear(x, m.pw_in_w, m.pw_in_b));
  Tensor<S> mix = mixed_op_forward(g, m, mode, update_running);
  Tensor<S> normed = batchnorm(mix, m.post_bn, mode, update_running);
  return linear(swish(normed), m.pw_out_w, m.pw_out_b);
}

template <typename S>
Tensor<S> nsr_forward_fused(const Tensor<S>& x, const FusedConvModule<S>& m) {
  detail::require_rank(x, 2, "nsr_forward_fused");
  if (x.extent(0) < 1) throw ShapeError("nsr_forward_fused: empty time axis");
  if (x.extent(1) != m.channels) {
    throw ShapeError(cat("nsr_forward_fused: expected ", m.channels,
                         " channels, got ", shape_str(x.shape())));
  }
  Tensor<S> g = glu(linear(x, m.pw_in_w, m.pw_in_b));
  auto [pl, pr] = same_pads(kTrunkTaps);
  Tensor<S> conv = depthwise_conv1d(g, m.fused_kernel, m.fused_bias, pl, pr);
  return linear(swish(conv), m.pw_out_w, m.pw_out_b);
}

// Merge an eval-mode BN into the preceding depthwise conv:
//   kernel'[., c] = kernel[., c] * gamma_c / sqrt(var_c + eps)
//   bias'_c      = beta_c + (bias_c - mean_c) * gamma_c / sqrt(var_c + eps)
// Arithmetic runs in double regardless of S.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> fold_bn(const Tensor<S>& kernel, const Tensor<S>& bias,
                                        const BnParams<S>& bn) {
  detail::require_rank(kernel, 2, "fold_bn kernel");
  const std::size_t k = kernel.extent(0), c = kernel.extent(1);
  if (bias.extent(0) != c || bn.gamma.extent(0) != c) {
    throw ShapeError(cat("fold_bn: channel mismatch, kernel ",
                         shape_str(kernel.shape())));
  }
  Tensor<S> out_kernel(Shape{k, c});
  Tensor<S> out_bias(Shape{c});
  auto ok = out_kernel.mutable_values();
  auto ob = out_bias.mutable_values();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double var_eps = static_cast<double>(bn.running_var.at(ch)) +
                           static_cast<double>(bn.eps);
    if (!(var_eps > 0.0)) {
      throw NumericError(cat("fold_bn: non-positive variance ", var_eps,
                             " at channel ", ch));
    }
    const double s = static_cast<double>(bn.gamma.at(ch)) / std::sqrt(var_eps);
    for (std::size_t j = 0; j < k; ++j) {
      ok[j * c + ch] = static_cast<S>(static_cast<double>(kernel.at(j, ch)) * s);
    }
    ob[ch] = static_cast<S>(
        static_cast<double>(bn.beta.at(ch)) +
        (static_cast<double>(bias.at(ch)) - static_cast<double>(bn.running_mean.at(ch))) * s);
  }
  return {out_kernel, out_bias};
}

// Zero-pad a k-tap depthwise kernel into a target-tap kernel so that both
// convs compute the same function under their respective SAME paddings. The
// k taps land at offset floor((target - k) / 2); for even k that leaves one
// extra zero on the right, matching same_pads().
template <typename S>
Tensor<S> pad_kernel(const Tensor<S>& kernel, std::size_t target = kTrunkTaps) {
  detail::require_rank(kernel, 2, "pad_kernel");
  const std::size_t k = kernel.extent(0), c = kernel.extent(1);
  if (k > target) {
    throw ContractError(cat("pad_kernel: kernel taps ", k, " exceed target ", target));
  }
  Tensor<S> out(Shape{target, c});
  const std::size_t offset = (target - k) / 2;
  auto ov = out.mutable_values();
  auto kv = kernel.values();
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t ch = 0; ch < c; ++ch)
      ov[(offset + j) * c + ch] = kv[j * c + ch];
  return out;
}

// The delta kernel that realises the k=0 (BN-only) branch as a conv.
template <typename S>
Tensor<S> delta_kernel(std::size_t channels) {
  return Tensor<S>(Shape{1, channels}, std::vector<S>(channels, S(1)));
}

// Collapse the depthwise mixing stage (trunk plus weighted branches, each
// with its BN folded) into one 31-tap kernel and bias. The module-level BN
// is not included; see fuse() for the whole-module form.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> fuse_depthwise_stage(const NsrConvModule<S>& m,
                                                     const std::vector<S>& alpha) {
  if (alpha.size() != m.branches.size()) {
    throw ContractError(cat("fuse: ", m.branches.size(), " branches but ",
                            alpha.size(), " weights"));
  }
  if (!alpha.empty()) {
    S sum = S(0);
    for (S a : alpha) {
      if (!(a > S(0))) throw ContractError(cat("fuse: non-positive weight ", a));
      sum += a;
    }
    if (std::abs(static_cast<double>(sum) - 1.0) > 1e-6) {
      throw ContractError(cat("fuse: weights sum to ", sum, ", expected 1"));
    }
  }

  auto [kernel, bias] = fold_bn(m.trunk_kernel, m.trunk_bias, m.trunk_bn);
  kernel = pad_kernel(kernel, kTrunkTaps);
  auto kacc = kernel.mutable_values();
  auto bacc = bias.mutable_values();

  for (std::size_t i = 0; i < m.branches.size(); ++i) {
    const auto& br = m.branches[i];
    br.validate(m.channels);
    Tensor<S> bk = br.kernel ? *br.kernel : delta_kernel<S>(m.channels);
    Tensor<S> bb = br.bias ? *br.bias : Tensor<S>(Shape{m.channels}, S(0));
    auto [fk, fb] = fold_bn(bk, bb, br.bn);
    Tensor<S> pk = pad_kernel(fk, kTrunkTaps);
    auto pkv = pk.values();
    auto fbv = fb.values();
    for (std::size_t j = 0; j < kacc.size(); ++j) kacc[j] += alpha[i] * pkv[j];
    for (std::size_t cch = 0; cch < bacc.size(); ++cch)
      bacc[cch] += alpha[i] * fbv[cch];
  }
  return {kernel, bias};
}

// Collapse a training-form module into the single-branch inference form:
// per-branch BN folding, padding to 31 taps, alpha-weighted summation with
// trunk weight 1, then the module-level BN folded into the resulting conv.
template <typename S>
FusedConvModule<S> fuse(const NsrConvModule<S>& m, const std::vector<S>& alpha) {
  auto [kernel, bias] = fuse_depthwise_stage(m, alpha);
  auto [final_kernel, final_bias] = fold_bn(kernel, bias, m.post_bn);

  FusedConvModule<S> fused;
  fused.channels = m.channels;
  fused.pw_in_w = m.pw_in_w.clone();
  fused.pw_in_b = m.pw_in_b.clone();
  fused.fused_kernel = final_kernel;
  fused.fused_bias = final_bias;
  fused.pw_out_w = m.pw_out_w.clone();
  fused.pw_out_b = m.pw_out_b.clone();
  return fused;
}

template <typename S>
FusedConvModule<S> fuse(const NsrConvModule<S>& m) {
  return fuse(m, m.alpha_values());
}

// ---------------------------------------------------------------------------
// Cost model: multiply-accumulates plus activation element touches for one
// forward pass over T frames. The fused count depends only on (T, C): branch
// count never appears.
// ---------------------------------------------------------------------------

inline std::uint64_t nsr_flops_gate_and_pw(std::uint64_t t, std::uint64_t c) {
  const std::uint64_t pw_in = 2 * t * c * (2 * c);  // C -> 2C
  const std::uint64_t gate = 4 * t * c;             // sigmoid + product
  const std::uint64_t pw_out = 2 * t * c * c;       // C -> C
  const std::uint64_t swish_cost = 4 * t * c;
  return pw_in + gate + pw_out + swish_cost;
}

template <typename S>
std::uint64_t flop_count(const FusedConvModule<S>& m, std::uint64_t t) {
  const std::uint64_t c = m.channels;
  const std::uint64_t conv = 2 * t * c * kTrunkTaps;
  return nsr_flops_gate_and_pw(t, c) + conv;
}

template <typename S>
std::uint64_t flop_count(const NsrConvModule<S>& m, std::uint64_t t) {
  const std::uint64_t c = m.channels;
  std::uint64_t total = nsr_flops_gate_and_pw(t, c);
  total += 2 * t * c * kTrunkTaps + 4 * t * c;  // trunk conv + its BN
  for (const auto& br : m.branches) {
    if (br.kernel_size > 0) {
      total += 2 * t * c * static_cast<std::uint64_t>(br.kernel_size);
    }
    total += 4 * t * c;  // branch BN
    total += t * c;      // alpha-weighted accumulation
  }
  total += 4 * t * c;  // post BN
  return total;
}

// ---------------------------------------------------------------------------
// Factories
// ---------------------------------------------------------------------------

template <typename S>
struct NsrInitOptions {
  S pw_std = S(0);        // 0 -> 1/sqrt(fan_in)
  S kernel_std = S(0.1);  // branch kernels
  S trunk_std = S(0);     // 0 -> same as kernel_std
  bool random_bn_stats = false;  // otherwise neutral BN
};

template <typename S>
NsrConvModule<S> make_nsr_module(std::size_t channels,
                                 const std::vector<int>& branch_kernels, Rng& rng,
                                 NsrInitOptions<S> opts = {}) {
  NsrConvModule<S> m;
  m.channels = channels;
  auto normal = [&rng](S std_dev) {
    std::normal_distribution<double> d(0.0, static_cast<double>(std_dev));
    return [&rng, d]() mutable { return static_cast<S>(d(rng)); };
  };
  auto fill = [&](Tensor<S>& t, Shape shape, S std_dev) {
    t = Tensor<S>(std::move(shape));
    auto gen = normal(std_dev);
    for (auto& v : t.mutable_values()) v = gen();
  };
  const S pw_std = opts.pw_std > S(0) ? opts.pw_std
                                      : S(1) / std::sqrt(static_cast<S>(channels));
  fill(m.pw_in_w, Shape{2 * channels, channels}, pw_std);
  fill(m.pw_in_b, Shape{2 * channels}, S(0.01));
  fill(m.trunk_kernel, Shape{kTrunkTaps, channels},
       opts.trunk_std > S(0) ? opts.trunk_std : opts.kernel_std);
  fill(m.trunk_bias, Shape{channels}, S(0.01));
  fill(m.pw_out_w, Shape{channels, channels}, pw_std);
  fill(m.pw_out_b, Shape{channels}, S(0.01));

  auto make_bn = [&]() {
    BnParams<S> bn = BnParams<S>::neutral(channels);
    if (opts.random_bn_stats) {
      std::uniform_real_distribution<double> gu(0.5, 1.5), vu(0.5, 2.0);
      std::normal_distribution<double> mn(0.0, 0.3), bn_beta(0.0, 0.2);
      for (auto& v : bn.gamma.mutable_values()) v = static_cast<S>(gu(rng));
      for (auto& v : bn.beta.mutable_values()) v = static_cast<S>(bn_beta(rng));
      for (auto& v : bn.running_mean.mutable_values()) v = static_cast<S>(mn(rng));
      for (auto& v : bn.running_var.mutable_values()) v = static_cast<S>(vu(rng));
    }
    return bn;
  };
  m.trunk_bn = make_bn();
  m.post_bn = make_bn();

  for (int k : branch_kernels) {
    BranchSpec<S> br;
    br.kernel_size = k;
    if (k > 0) {
      Tensor<S> kern, bias;
      fill(kern, Shape{static_cast<std::size_t>(k), channels}, opts.kernel_std);
      fill(bias, Shape{channels}, S(0.01));
      br.kernel = kern;
      br.bias = bias;
    }
    br.bn = make_bn();
    br.validate(channels);
    m.branches.push_back(std::move(br));
  }
  m.logits = Tensor<S>(Shape{m.branches.size()}, S(0));
  return m;
}

// Mark every trainable weight (not the logits) with requires_grad.
template <typename S>
void mark_weights_trainable(NsrConvModule<S>& m, bool on = true) {
  for (auto& t : m.weights()) t.set_requires_grad(on);
}

}  // namespace lsf

#endif  // LSF_NSR_CONV_HPP
