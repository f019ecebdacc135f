#ifndef LSF_MODULE_IO_HPP
#define LSF_MODULE_IO_HPP

#include <string>
#include <vector>

#include "lsf/checkpoint.hpp"
#include "lsf/nsr_conv.hpp"
#include "lsf/search.hpp"

namespace lsf {

// Form tag values stored under "<prefix>form".
inline constexpr double kFormTrain = 0.0;
inline constexpr double kFormFused = 1.0;

template <typename S>
void append_bn(NamedTensorList<S>& out, const std::string& prefix, BnParams<S>& bn) {
  out.emplace_back(prefix + "gamma", bn.gamma);
  out.emplace_back(prefix + "beta", bn.beta);
  out.emplace_back(prefix + "running_mean", bn.running_mean);
  out.emplace_back(prefix + "running_var", bn.running_var);
  out.emplace_back(prefix + "eps", Tensor<S>::scalar(bn.eps));
  out.emplace_back(prefix + "momentum", Tensor<S>::scalar(bn.momentum));
}

template <typename S>
BnParams<S> read_bn(TensorBundle<S>& bundle, const std::string& prefix,
                    std::size_t channels) {
  BnParams<S> bn;
  bn.gamma = bundle.take(prefix + "gamma", Shape{channels});
  bn.beta = bundle.take(prefix + "beta", Shape{channels});
  bn.running_mean = bundle.take(prefix + "running_mean", Shape{channels});
  bn.running_var = bundle.take(prefix + "running_var", Shape{channels});
  bn.eps = bundle.take(prefix + "eps", Shape{}).item();
  bn.momentum = bundle.take(prefix + "momentum", Shape{}).item();
  return bn;
}

template <typename S>
void append_module(NamedTensorList<S>& out, const std::string& prefix,
                   NsrConvModule<S>& m) {
  out.emplace_back(prefix + "form", Tensor<S>::scalar(static_cast<S>(kFormTrain)));
  out.emplace_back(prefix + "pw_in.weight", m.pw_in_w);
  out.emplace_back(prefix + "pw_in.bias", m.pw_in_b);
  out.emplace_back(prefix + "trunk.kernel", m.trunk_kernel);
  out.emplace_back(prefix + "trunk.bias", m.trunk_bias);
  append_bn(out, prefix + "trunk.bn.", m.trunk_bn);
  Tensor<S> sizes(Shape{m.branches.size()});
  {
    auto sv = sizes.mutable_values();
    for (std::size_t i = 0; i < m.branches.size(); ++i) {
      sv[i] = static_cast<S>(m.branches[i].kernel_size);
    }
  }
  out.emplace_back(prefix + "branches.sizes", sizes);
  for (std::size_t i = 0; i < m.branches.size(); ++i) {
    auto& br = m.branches[i];
    const std::string bp = cat(prefix, "branch", i, ".");
    if (br.kernel) out.emplace_back(bp + "kernel", *br.kernel);
    if (br.bias) out.emplace_back(bp + "bias", *br.bias);
    append_bn(out, bp + "bn.", br.bn);
  }
  out.emplace_back(prefix + "logits", m.logits);
  if (m.fixed_alpha) {
    out.emplace_back(prefix + "fixed_alpha",
                     Tensor<S>(Shape{m.fixed_alpha->size()}, *m.fixed_alpha));
  }
  append_bn(out, prefix + "post_bn.", m.post_bn);
  out.emplace_back(prefix + "pw_out.weight", m.pw_out_w);
  out.emplace_back(prefix + "pw_out.bias", m.pw_out_b);
}

template <typename S>
NsrConvModule<S> read_module(TensorBundle<S>& bundle, const std::string& prefix) {
  NsrConvModule<S> m;
  const Tensor<S>* raw = bundle.find(prefix + "pw_in.weight");
  if (raw == nullptr || raw->rank() != 2) {
    throw IoError(cat("checkpoint: ", prefix, "pw_in.weight missing or malformed"));
  }
  const std::size_t c = raw->extent(1);
  m.channels = c;
  m.pw_in_w = raw->clone();
  m.pw_in_b = bundle.take(prefix + "pw_in.bias", Shape{2 * c});
  m.trunk_kernel = bundle.take(prefix + "trunk.kernel", Shape{kTrunkTaps, c});
  m.trunk_bias = bundle.take(prefix + "trunk.bias", Shape{c});
  m.trunk_bn = read_bn(bundle, prefix + "trunk.bn.", c);
  const Tensor<S>* sizes = bundle.find(prefix + "branches.sizes");
  if (sizes == nullptr) {
    throw IoError(cat("checkpoint: ", prefix, "branches.sizes missing"));
  }
  for (std::size_t i = 0; i < sizes->size(); ++i) {
    BranchSpec<S> br;
    br.kernel_size = static_cast<int>(sizes->at(i));
    const std::string bp = cat(prefix, "branch", i, ".");
    if (br.kernel_size > 0) {
      br.kernel = bundle.take(bp + "kernel",
                              Shape{static_cast<std::size_t>(br.kernel_size), c});
      br.bias = bundle.take(bp + "bias", Shape{c});
    }
    br.bn = read_bn(bundle, bp + "bn.", c);
    m.branches.push_back(std::move(br));
  }
  m.logits = bundle.take(prefix + "logits", Shape{m.branches.size()});
  if (bundle.contains(prefix + "fixed_alpha")) {
    const Tensor<S>* fa = bundle.find(prefix + "fixed_alpha");
    m.fixed_alpha = std::vector<S>(fa->values().begin(), fa->values().end());
  }
  m.post_bn = read_bn(bundle, prefix + "post_bn.", c);
  m.pw_out_w = bundle.take(prefix + "pw_out.weight", Shape{c, c});
  m.pw_out_b = bundle.take(prefix + "pw_out.bias", Shape{c});
  return m;
}

template <typename S>
void append_fused(NamedTensorList<S>& out, const std::string& prefix,
                  FusedConvModule<S>& m) {
  out.emplace_back(prefix + "form", Tensor<S>::scalar(static_cast<S>(kFormFused)));
  out.emplace_back(prefix + "pw_in.weight", m.pw_in_w);
  out.emplace_back(prefix + "pw_in.bias", m.pw_in_b);
  out.emplace_back(prefix + "fused.kernel", m.fused_kernel);
  out.emplace_back(prefix + "fused.bias", m.fused_bias);
  out.emplace_back(prefix + "pw_out.weight", m.pw_out_w);
  out.emplace_back(prefix + "pw_out.bias", m.pw_out_b);
}

template <typename S>
FusedConvModule<S> read_fused(TensorBundle<S>& bundle, const std::string& prefix) {
  FusedConvModule<S> m;
  const Tensor<S>* raw = bundle.find(prefix + "pw_in.weight");
  if (raw == nullptr || raw->rank() != 2) {
    throw IoError(cat("checkpoint: ", prefix, "pw_in.weight missing or malformed"));
  }
  const std::size_t c = raw->extent(1);
  m.channels = c;
  m.pw_in_w = raw->clone();
  m.pw_in_b = bundle.take(prefix + "pw_in.bias", Shape{2 * c});
  m.fused_kernel = bundle.take(prefix + "fused.kernel", Shape{kTrunkTaps, c});
  m.fused_bias = bundle.take(prefix + "fused.bias", Shape{c});
  m.pw_out_w = bundle.take(prefix + "pw_out.weight", Shape{c, c});
  m.pw_out_b = bundle.take(prefix + "pw_out.bias", Shape{c});
  return m;
}

// Form tag of a module stored under the given prefix, if present.
template <typename S>
double module_form(TensorBundle<S>& bundle, const std::string& prefix) {
  const Tensor<S>* tag = bundle.find(prefix + "form");
  if (tag == nullptr) throw IoError(cat("checkpoint: ", prefix, "form tag missing"));
  return static_cast<double>(tag->item());
}

}  // namespace lsf

#endif  // LSF_MODULE_IO_HPP
