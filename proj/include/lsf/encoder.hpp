#ifndef LSF_ENCODER_HPP
#define LSF_ENCODER_HPP

#include <optional>
#include <string>
#include <vector>

#include "lsf/attention.hpp"
#include "lsf/config.hpp"
#include "lsf/module_io.hpp"
#include "lsf/nsr_conv.hpp"
#include "lsf/ops.hpp"

namespace lsf {

template <typename S>
struct LayerNormParams {
  Tensor<S> gamma, beta;
  static LayerNormParams make(std::size_t d) {
    LayerNormParams p;
    p.gamma = Tensor<S>(Shape{d}, S(1));
    p.beta = Tensor<S>(Shape{d}, S(0));
    return p;
  }
};

template <typename S>
struct FeedForward {
  Tensor<S> w1, b1;  // [ffn x d], [ffn]
  Tensor<S> w2, b2;  // [d x ffn], [d]

  Tensor<S> forward(const Tensor<S>& x) const {
    return linear(swish(linear(x, w1, b1)), w2, b2);
  }
};

// Two stride-2 stages (full conv, then depthwise-separable) followed by a
// linear projection; T frames become ceil(T/4).
template <typename S>
struct Subsample {
  Tensor<S> conv1_kernel;  // [3 x F x d]
  Tensor<S> conv1_bias;    // [d]
  Tensor<S> dw_kernel;     // [3 x d]
  Tensor<S> dw_bias;       // [d]
  Tensor<S> pw_weight;     // [d x d]
  Tensor<S> pw_bias;       // [d]
  Tensor<S> proj_weight;   // [d x d]
  Tensor<S> proj_bias;     // [d]

  Tensor<S> forward(const Tensor<S>& features) const {
    detail::require_rank(features, 2, "subsample");
    const std::size_t t = features.extent(0);
    if (t < 4) {
      throw ShapeError(cat("subsample: input too short (", t, " < 4 frames)"));
    }
    auto [pl1, pr1] = same_pads_strided(t, 3, 2);
    Tensor<S> h = swish(conv1d(features, conv1_kernel, conv1_bias, pl1, pr1, 2));
    auto [pl2, pr2] = same_pads_strided(h.extent(0), 3, 2);
    h = depthwise_conv1d(h, dw_kernel, dw_bias, pl2, pr2, 2);
    h = swish(linear(h, pw_weight, pw_bias));
    return linear(h, proj_weight, proj_bias);
  }
};

// Stride-2 depthwise pooling; the kernel starts as a uniform average so a
// constant signal stays (approximately) constant at initialisation.
template <typename S>
struct TimeReduce {
  Tensor<S> kernel;  // [3 x d]
  Tensor<S> bias;    // [d]

  Tensor<S> forward(const Tensor<S>& x) const {
    auto [pl, pr] = same_pads_strided(x.extent(0), 3, 2);
    return depthwise_conv1d(x, kernel, bias, pl, pr, 2);
  }
};

template <typename S>
Tensor<S> time_recover(const Tensor<S>& x, const Tensor<S>& skip) {
  Tensor<S> up = repeat_rows_x2(x, skip.extent(0));
  return add(up, skip);
}

template <typename S>
struct HybridBlock {
  AttentionLayer<S> attention;
  FeedForward<S> ffn1, ffn2;
  NsrConvModule<S> conv;
  std::optional<FusedConvModule<S>> conv_fused;
  LayerNormParams<S> norm_attn, norm_ffn1, norm_conv, norm_ffn2;
};

enum class EncoderForm { Train, Fused };

template <typename S>
struct Encoder {
  EncoderConfig config;
  EncoderForm form = EncoderForm::Train;
  Subsample<S> subsample;
  TimeReduce<S> reduce;
  std::vector<HybridBlock<S>> blocks;
  LayerNormParams<S> final_norm;

  static Encoder make(const EncoderConfig& cfg, Rng& rng,
                      bool random_bn_stats = false) {
    cfg.validate();
    Encoder enc;
    enc.config = cfg;
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t f = static_cast<std::size_t>(cfg.feature_dim);
    const std::size_t ffn = static_cast<std::size_t>(cfg.ffn_dim);

    auto fill = [&rng](Tensor<S>& t, Shape shape, double std_dev) {
      t = Tensor<S>(std::move(shape));
      std::normal_distribution<double> dist(0.0, std_dev);
      for (auto& v : t.mutable_values()) v = static_cast<S>(dist(rng));
    };
    const double ds = 1.0 / std::sqrt(static_cast<double>(d));
    fill(enc.subsample.conv1_kernel, Shape{3, f, d},
         1.0 / std::sqrt(3.0 * static_cast<double>(f)));
    fill(enc.subsample.conv1_bias, Shape{d}, 0.01);
    fill(enc.subsample.dw_kernel, Shape{3, d}, 0.3);
    fill(enc.subsample.dw_bias, Shape{d}, 0.01);
    fill(enc.subsample.pw_weight, Shape{d, d}, ds);
    fill(enc.subsample.pw_bias, Shape{d}, 0.01);
    fill(enc.subsample.proj_weight, Shape{d, d}, ds);
    fill(enc.subsample.proj_bias, Shape{d}, 0.01);

    enc.reduce.kernel = Tensor<S>(Shape{3, d}, S(1) / S(3));
    enc.reduce.bias = Tensor<S>(Shape{d}, S(0));

    for (int j = 1; j <= cfg.blocks; ++j) {
      HybridBlock<S> block;
      block.attention = AttentionLayer<S>::make(
          cfg.d_model, cfg.heads, cfg.variant_for_block(j), rng, cfg.phi_kind,
          static_cast<S>(cfg.la_eps));
      auto make_ffn = [&](FeedForward<S>& fnet) {
        fill(fnet.w1, Shape{ffn, d}, ds);
        fill(fnet.b1, Shape{ffn}, 0.01);
        fill(fnet.w2, Shape{d, ffn}, 1.0 / std::sqrt(static_cast<double>(ffn)));
        fill(fnet.b2, Shape{d}, 0.01);
      };
      make_ffn(block.ffn1);
      make_ffn(block.ffn2);
      NsrInitOptions<S> conv_init;
      conv_init.kernel_std = S(0.1);
      conv_init.random_bn_stats = random_bn_stats;
      block.conv = make_nsr_module<S>(d, {}, rng, conv_init);
      block.norm_attn = LayerNormParams<S>::make(d);
      block.norm_ffn1 = LayerNormParams<S>::make(d);
      block.norm_conv = LayerNormParams<S>::make(d);
      block.norm_ffn2 = LayerNormParams<S>::make(d);
      enc.blocks.push_back(std::move(block));
    }
    enc.final_norm = LayerNormParams<S>::make(d);
    return enc;
  }

  std::vector<Tensor<S>> parameters() {
    std::vector<Tensor<S>> out = {
        subsample.conv1_kernel, subsample.conv1_bias, subsample.dw_kernel,
        subsample.dw_bias,      subsample.pw_weight,  subsample.pw_bias,
        subsample.proj_weight,  subsample.proj_bias,  reduce.kernel,
        reduce.bias};
    for (auto& b : blocks) {
      out.push_back(b.attention.w_q);
      out.push_back(b.attention.w_k);
      out.push_back(b.attention.w_v);
      out.push_back(b.attention.w_o);
      for (FeedForward<S>* fnet : {&b.ffn1, &b.ffn2}) {
        out.push_back(fnet->w1);
        out.push_back(fnet->b1);
        out.push_back(fnet->w2);
        out.push_back(fnet->b2);
      }
      auto conv_w = b.conv.weights();
      out.insert(out.end(), conv_w.begin(), conv_w.end());
      for (LayerNormParams<S>* n :
           {&b.norm_attn, &b.norm_ffn1, &b.norm_conv, &b.norm_ffn2}) {
        out.push_back(n->gamma);
        out.push_back(n->beta);
      }
    }
    out.push_back(final_norm.gamma);
    out.push_back(final_norm.beta);
    return out;
  }
};

namespace detail {

template <typename S>
Tensor<S> block_forward(const Tensor<S>& x, HybridBlock<S>& block, EncoderForm form,
                        BnMode mode, bool update_running) {
  Tensor<S> h = x;
  h = layer_norm(add(h, attention_forward(h, block.attention)),
                 block.norm_attn.gamma, block.norm_attn.beta);
  h = layer_norm(add(h, block.ffn1.forward(h)), block.norm_ffn1.gamma,
                 block.norm_ffn1.beta);
  Tensor<S> conv_out;
  if (form == EncoderForm::Fused) {
    if (!block.conv_fused) {
      throw ContractError("encoder block has no fused conv module");
    }
    conv_out = nsr_forward_fused(h, *block.conv_fused);
  } else {
    conv_out = nsr_forward_train(h, block.conv, mode, update_running);
  }
  h = layer_norm(add(h, conv_out), block.norm_conv.gamma, block.norm_conv.beta);
  h = layer_norm(add(h, block.ffn2.forward(h)), block.norm_ffn2.gamma,
                 block.norm_ffn2.beta);
  return h;
}

}  // namespace detail

// Subsample -> LA blocks at the base rate -> time_reduce -> SA blocks at the
// halved rate -> time_recover with the skip -> trailing LA blocks -> final
// norm. Rotation positions restart from 0 whenever the rate changes, which
// happens implicitly: every attention call indexes rows from zero.
template <typename S>
Tensor<S> encoder_forward(const Tensor<S>& features, Encoder<S>& enc,
                          BnMode mode = BnMode::Eval, bool update_running = false) {
  enc.config.validate();
  Tensor<S> h = enc.subsample.forward(features);
  Tensor<S> skip;
  bool squeezed = false;
  for (int j = 1; j <= enc.config.blocks; ++j) {
    if (j == enc.config.downsample_after + 1) {
      skip = h;
      h = enc.reduce.forward(h);
      squeezed = true;
    }
    if (j == enc.config.upsample_before && squeezed) {
      h = time_recover(h, skip);
      squeezed = false;
    }
    h = detail::block_forward(h, enc.blocks[static_cast<std::size_t>(j - 1)],
                              enc.form, mode, update_running);
  }
  return layer_norm(h, enc.final_norm.gamma, enc.final_norm.beta);
}

// Fold every block's conv module; attention and FFN weights are shared.
template <typename S>
Encoder<S> fuse_encoder(const Encoder<S>& enc) {
  Encoder<S> out = enc;
  out.form = EncoderForm::Fused;
  for (auto& block : out.blocks) {
    block.conv_fused = fuse(block.conv, block.conv.alpha_values());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint layout
// ---------------------------------------------------------------------------

template <typename S>
void append_encoder(NamedTensorList<S>& out, Encoder<S>& enc) {
  out.emplace_back("enc.form",
                   Tensor<S>::scalar(enc.form == EncoderForm::Train
                                         ? static_cast<S>(kFormTrain)
                                         : static_cast<S>(kFormFused)));
  const EncoderConfig& cfg = enc.config;
  auto meta = [&out](const std::string& name, double v) {
    out.emplace_back("enc.meta." + name, Tensor<S>::scalar(static_cast<S>(v)));
  };
  meta("d_model", cfg.d_model);
  meta("heads", cfg.heads);
  meta("ffn_dim", cfg.ffn_dim);
  meta("blocks", cfg.blocks);
  meta("downsample_after", cfg.downsample_after);
  meta("upsample_before", cfg.upsample_before);
  meta("feature_dim", cfg.feature_dim);
  meta("phi", static_cast<double>(static_cast<int>(cfg.phi_kind)));
  meta("la_eps", cfg.la_eps);
  meta("force_all_sa", cfg.force_all_sa ? 1.0 : 0.0);
  out.emplace_back("enc.subsample.conv1.kernel", enc.subsample.conv1_kernel);
  out.emplace_back("enc.subsample.conv1.bias", enc.subsample.conv1_bias);
  out.emplace_back("enc.subsample.dw.kernel", enc.subsample.dw_kernel);
  out.emplace_back("enc.subsample.dw.bias", enc.subsample.dw_bias);
  out.emplace_back("enc.subsample.pw.weight", enc.subsample.pw_weight);
  out.emplace_back("enc.subsample.pw.bias", enc.subsample.pw_bias);
  out.emplace_back("enc.subsample.proj.weight", enc.subsample.proj_weight);
  out.emplace_back("enc.subsample.proj.bias", enc.subsample.proj_bias);
  out.emplace_back("enc.reduce.kernel", enc.reduce.kernel);
  out.emplace_back("enc.reduce.bias", enc.reduce.bias);
  for (std::size_t b = 0; b < enc.blocks.size(); ++b) {
    auto& block = enc.blocks[b];
    const std::string prefix = cat("enc.block", b, ".");
    out.emplace_back(prefix + "attn.wq", block.attention.w_q);
    out.emplace_back(prefix + "attn.wk", block.attention.w_k);
    out.emplace_back(prefix + "attn.wv", block.attention.w_v);
    out.emplace_back(prefix + "attn.wo", block.attention.w_o);
    out.emplace_back(prefix + "ffn1.w1", block.ffn1.w1);
    out.emplace_back(prefix + "ffn1.b1", block.ffn1.b1);
    out.emplace_back(prefix + "ffn1.w2", block.ffn1.w2);
    out.emplace_back(prefix + "ffn1.b2", block.ffn1.b2);
    out.emplace_back(prefix + "ffn2.w1", block.ffn2.w1);
    out.emplace_back(prefix + "ffn2.b1", block.ffn2.b1);
    out.emplace_back(prefix + "ffn2.w2", block.ffn2.w2);
    out.emplace_back(prefix + "ffn2.b2", block.ffn2.b2);
    if (enc.form == EncoderForm::Fused) {
      append_fused(out, prefix + "conv.", *block.conv_fused);
    } else {
      append_module(out, prefix + "conv.", block.conv);
    }
    for (auto [name, norm] :
         {std::pair{"norm_attn.", &block.norm_attn},
          std::pair{"norm_ffn1.", &block.norm_ffn1},
          std::pair{"norm_conv.", &block.norm_conv},
          std::pair{"norm_ffn2.", &block.norm_ffn2}}) {
      out.emplace_back(prefix + name + "gamma", norm->gamma);
      out.emplace_back(prefix + name + "beta", norm->beta);
    }
  }
  out.emplace_back("enc.final_norm.gamma", enc.final_norm.gamma);
  out.emplace_back("enc.final_norm.beta", enc.final_norm.beta);
}

template <typename S>
void save_encoder(const std::string& path, Encoder<S>& enc) {
  NamedTensorList<S> out;
  append_encoder(out, enc);
  save_checkpoint(path, out);
}

// Rebuild an encoder from a checkpoint in the requested form; the geometry
// travels inside the file. A train-form file loads as fused by folding each
// block; a fused-form file cannot become a train form again.
template <typename S>
Encoder<S> build_from_checkpoint(const std::string& path, EncoderForm want) {
  TensorBundle<S> bundle(load_checkpoint<S>(path));
  const double stored_form =
      static_cast<double>(bundle.take("enc.form", Shape{}).item());
  if (stored_form == kFormFused && want == EncoderForm::Train) {
    throw ContractError("checkpoint holds a fused encoder; train form cannot be "
                        "reconstructed");
  }
  EncoderConfig cfg;
  auto meta = [&bundle](const std::string& name) {
    return static_cast<double>(bundle.take("enc.meta." + name, Shape{}).item());
  };
  cfg.d_model = static_cast<int>(meta("d_model"));
  cfg.heads = static_cast<int>(meta("heads"));
  cfg.ffn_dim = static_cast<int>(meta("ffn_dim"));
  cfg.blocks = static_cast<int>(meta("blocks"));
  cfg.downsample_after = static_cast<int>(meta("downsample_after"));
  cfg.upsample_before = static_cast<int>(meta("upsample_before"));
  cfg.feature_dim = static_cast<int>(meta("feature_dim"));
  cfg.phi_kind = static_cast<PhiKind>(static_cast<int>(meta("phi")));
  cfg.la_eps = meta("la_eps");
  cfg.force_all_sa = meta("force_all_sa") != 0.0;
  cfg.validate();
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t f = static_cast<std::size_t>(cfg.feature_dim);
  const std::size_t ffn = static_cast<std::size_t>(cfg.ffn_dim);

  Rng dummy = make_rng(0);
  Encoder<S> enc = Encoder<S>::make(cfg, dummy);
  enc.form = stored_form == kFormFused ? EncoderForm::Fused : EncoderForm::Train;
  enc.subsample.conv1_kernel = bundle.take("enc.subsample.conv1.kernel", Shape{3, f, d});
  enc.subsample.conv1_bias = bundle.take("enc.subsample.conv1.bias", Shape{d});
  enc.subsample.dw_kernel = bundle.take("enc.subsample.dw.kernel", Shape{3, d});
  enc.subsample.dw_bias = bundle.take("enc.subsample.dw.bias", Shape{d});
  enc.subsample.pw_weight = bundle.take("enc.subsample.pw.weight", Shape{d, d});
  enc.subsample.pw_bias = bundle.take("enc.subsample.pw.bias", Shape{d});
  enc.subsample.proj_weight = bundle.take("enc.subsample.proj.weight", Shape{d, d});
  enc.subsample.proj_bias = bundle.take("enc.subsample.proj.bias", Shape{d});
  enc.reduce.kernel = bundle.take("enc.reduce.kernel", Shape{3, d});
  enc.reduce.bias = bundle.take("enc.reduce.bias", Shape{d});
  for (std::size_t b = 0; b < enc.blocks.size(); ++b) {
    auto& block = enc.blocks[b];
    const std::string prefix = cat("enc.block", b, ".");
    block.attention.w_q = bundle.take(prefix + "attn.wq", Shape{d, d});
    block.attention.w_k = bundle.take(prefix + "attn.wk", Shape{d, d});
    block.attention.w_v = bundle.take(prefix + "attn.wv", Shape{d, d});
    block.attention.w_o = bundle.take(prefix + "attn.wo", Shape{d, d});
    block.ffn1.w1 = bundle.take(prefix + "ffn1.w1", Shape{ffn, d});
    block.ffn1.b1 = bundle.take(prefix + "ffn1.b1", Shape{ffn});
    block.ffn1.w2 = bundle.take(prefix + "ffn1.w2", Shape{d, ffn});
    block.ffn1.b2 = bundle.take(prefix + "ffn1.b2", Shape{d});
    block.ffn2.w1 = bundle.take(prefix + "ffn2.w1", Shape{ffn, d});
    block.ffn2.b1 = bundle.take(prefix + "ffn2.b1", Shape{ffn});
    block.ffn2.w2 = bundle.take(prefix + "ffn2.w2", Shape{d, ffn});
    block.ffn2.b2 = bundle.take(prefix + "ffn2.b2", Shape{d});
    if (enc.form == EncoderForm::Fused) {
      block.conv_fused = read_fused(bundle, prefix + "conv.");
    } else {
      block.conv = read_module(bundle, prefix + "conv.");
    }
    for (auto [name, norm] :
         {std::pair{"norm_attn.", &block.norm_attn},
          std::pair{"norm_ffn1.", &block.norm_ffn1},
          std::pair{"norm_conv.", &block.norm_conv},
          std::pair{"norm_ffn2.", &block.norm_ffn2}}) {
      norm->gamma = bundle.take(prefix + name + "gamma", Shape{d});
      norm->beta = bundle.take(prefix + name + "beta", Shape{d});
    }
  }
  enc.final_norm.gamma = bundle.take("enc.final_norm.gamma", Shape{d});
  enc.final_norm.beta = bundle.take("enc.final_norm.beta", Shape{d});
  bundle.finish("encoder");
  if (want == EncoderForm::Fused && enc.form == EncoderForm::Train) {
    enc = fuse_encoder(enc);
  }
  return enc;
}

}  // namespace lsf

#endif  // LSF_ENCODER_HPP
