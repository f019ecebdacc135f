#ifndef LSF_CONFIG_HPP
#define LSF_CONFIG_HPP

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsf/attention.hpp"
#include "lsf/common.hpp"
#include "lsf/search.hpp"

namespace lsf {

using Json = nlohmann::ordered_json;

inline Json load_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError(cat("cannot open config file: ", path));
  Json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(cat("malformed JSON in ", path, ": ", e.what()));
  }
  return j;
}

inline PhiKind parse_phi(const std::string& name) {
  if (name == "elu1") return PhiKind::EluPlusOne;
  if (name == "relu") return PhiKind::Relu;
  if (name == "exp") return PhiKind::Exp;
  throw ConfigError(cat("unknown phi map '", name, "' (want elu1|relu|exp)"));
}

// ---------------------------------------------------------------------------
// Encoder geometry
// ---------------------------------------------------------------------------

struct EncoderConfig {
  int d_model = 256;
  int heads = 4;
  int ffn_dim = 1024;
  int conv_kernel = kTrunkTaps;
  int blocks = 12;
  int downsample_after = 6;   // time_reduce runs after this block
  int upsample_before = 12;   // time_recover runs before this block
  int feature_dim = 80;
  PhiKind phi_kind = PhiKind::EluPlusOne;
  double la_eps = 1e-6;
  // Frame durations at the two working rates; informational, the variant
  // rule depends only on the squeeze interval.
  double base_frame_ms = 40.0;
  double squeezed_frame_ms = 80.0;
  bool force_all_sa = false;  // ablation: SA everywhere

  void validate() const {
    if (blocks < 1) throw ConfigError("encoder: needs at least one block");
    if (!(0 < downsample_after && downsample_after < upsample_before &&
          upsample_before <= blocks)) {
      throw ConfigError(cat("encoder: need 0 < downsample_after (",
                            downsample_after, ") < upsample_before (",
                            upsample_before, ") <= blocks (", blocks, ")"));
    }
    if (d_model % heads != 0 || (d_model / heads) % 2 != 0) {
      throw ConfigError(cat("encoder: d_model ", d_model, " / heads ", heads,
                            " must give an even head dim"));
    }
    if (conv_kernel != kTrunkTaps) {
      throw ConfigError(cat("encoder: conv kernel must be ", kTrunkTaps));
    }
  }

  // Blocks strictly inside the squeezed interval run at the halved rate and
  // use softmax attention; everything else runs linear attention.
  AttentionVariant variant_for_block(int block_index_1based) const {
    if (force_all_sa) return AttentionVariant::SA;
    const bool squeezed = block_index_1based > downsample_after &&
                          block_index_1based < upsample_before;
    return squeezed ? AttentionVariant::SA : AttentionVariant::LA;
  }
};

inline EncoderConfig encoder_config_from_json(const Json& j) {
  EncoderConfig cfg;
  cfg.d_model = j.value("d_model", cfg.d_model);
  cfg.heads = j.value("heads", cfg.heads);
  cfg.ffn_dim = j.value("ffn_dim", cfg.ffn_dim);
  cfg.conv_kernel = j.value("conv_kernel", cfg.conv_kernel);
  cfg.blocks = j.value("blocks", cfg.blocks);
  cfg.downsample_after = j.value("downsample_after", cfg.downsample_after);
  cfg.upsample_before = j.value("upsample_before", cfg.upsample_before);
  cfg.feature_dim = j.value("feature_dim", cfg.feature_dim);
  if (j.contains("phi")) cfg.phi_kind = parse_phi(j.at("phi").get<std::string>());
  cfg.la_eps = j.value("la_eps", cfg.la_eps);
  cfg.base_frame_ms = j.value("base_frame_ms", cfg.base_frame_ms);
  cfg.squeezed_frame_ms = j.value("squeezed_frame_ms", cfg.squeezed_frame_ms);
  cfg.force_all_sa = j.value("force_all_sa", cfg.force_all_sa);
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Search run configuration
// ---------------------------------------------------------------------------

struct SearchRunConfig {
  // Synthetic task.
  std::size_t channels = 16;
  std::size_t time_steps = 32;
  int planted_kernel = 7;
  double noise_sigma = 0.05;
  std::size_t n_train = 32;
  std::size_t n_val = 8;
  // Space: same candidate set on every block.
  int blocks = 2;
  std::vector<int> candidates = {0, 3, 5, 7, 15, 30};
  // Stage 1.
  std::size_t warmup_epochs = 100;
  std::size_t epochs = 10;
  std::size_t steps_per_epoch = 20;
  std::size_t batch_size = 16;
  double lr_w = 0.05;
  double bilevel_lr_w = 0.01;  // 0 -> lr_w
  double momentum = 0.9;
  double lr_c = 3e-4;
  double xi = 0.0;
  std::string model = "conv_stage";  // or "full_module"
  std::size_t ring_capacity = 5;
  // Stage 2.
  std::string crop_mode = "logit_sign";  // or "below_uniform"
  std::size_t retrain_steps = 600;
  double retrain_lr = 0.05;  // 0 -> lr_w
  bool fuse_output = true;
  double init_kernel_std = 0.3;
  double init_trunk_std = 0.05;  // 0 -> init_kernel_std
  std::uint64_t seed = 1;

  SearchModelKind model_kind() const {
    if (model == "conv_stage") return SearchModelKind::ConvStage;
    if (model == "full_module") return SearchModelKind::FullModule;
    throw ConfigError(cat("unknown search model '", model,
                          "' (want conv_stage|full_module)"));
  }

  CropMode crop() const {
    if (crop_mode == "logit_sign") return CropMode::LogitSign;
    if (crop_mode == "below_uniform") return CropMode::BelowUniform;
    throw ConfigError(cat("unknown crop mode '", crop_mode,
                          "' (want logit_sign|below_uniform)"));
  }

  SearchSpace space() const { return SearchSpace::uniform(blocks, candidates); }
};

inline SearchRunConfig search_config_from_json(const Json& j) {
  SearchRunConfig cfg;
  cfg.channels = j.value("channels", cfg.channels);
  cfg.time_steps = j.value("time_steps", cfg.time_steps);
  cfg.planted_kernel = j.value("planted_kernel", cfg.planted_kernel);
  cfg.noise_sigma = j.value("noise_sigma", cfg.noise_sigma);
  cfg.n_train = j.value("n_train", cfg.n_train);
  cfg.n_val = j.value("n_val", cfg.n_val);
  cfg.blocks = j.value("blocks", cfg.blocks);
  if (j.contains("candidates")) {
    cfg.candidates = j.at("candidates").get<std::vector<int>>();
  }
  cfg.warmup_epochs = j.value("warmup_epochs", cfg.warmup_epochs);
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.steps_per_epoch = j.value("steps_per_epoch", cfg.steps_per_epoch);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.lr_w = j.value("lr_w", cfg.lr_w);
  cfg.bilevel_lr_w = j.value("bilevel_lr_w", cfg.bilevel_lr_w);
  cfg.momentum = j.value("momentum", cfg.momentum);
  if (j.contains("model")) cfg.model = j.at("model").get<std::string>();
  cfg.lr_c = j.value("lr_c", cfg.lr_c);
  cfg.xi = j.value("xi", cfg.xi);
  cfg.ring_capacity = j.value("ring_capacity", cfg.ring_capacity);
  cfg.crop_mode = j.value("crop_mode", cfg.crop_mode);
  cfg.retrain_steps = j.value("retrain_steps", cfg.retrain_steps);
  cfg.retrain_lr = j.value("retrain_lr", cfg.retrain_lr);
  cfg.fuse_output = j.value("fuse_output", cfg.fuse_output);
  cfg.init_kernel_std = j.value("init_kernel_std", cfg.init_kernel_std);
  cfg.init_trunk_std = j.value("init_trunk_std", cfg.init_trunk_std);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.space();  // validates
  cfg.crop();
  cfg.model_kind();
  return cfg;
}

}  // namespace lsf

#endif  // LSF_CONFIG_HPP
