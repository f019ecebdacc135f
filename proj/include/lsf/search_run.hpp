#ifndef LSF_SEARCH_RUN_HPP
#define LSF_SEARCH_RUN_HPP

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "lsf/config.hpp"
#include "lsf/module_io.hpp"
#include "lsf/search.hpp"

namespace lsf {

template <typename S>
struct SearchRunResult {
  std::vector<RetainedBlock> retained;
  double multibranch_val_mse = 0.0;
  double retrained_val_mse = 0.0;
  double fused_val_mse = 0.0;
  std::string manifest_path;
  std::string log_path;
  std::string checkpoint_path;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

template <typename S>
std::vector<std::size_t> draw_batch(Rng& rng, std::size_t dataset_size,
                                    std::size_t batch_size) {
  std::uniform_int_distribution<std::size_t> pick(0, dataset_size - 1);
  std::vector<std::size_t> out(std::min(batch_size, dataset_size));
  for (auto& v : out) v = pick(rng);
  return out;
}

template <typename S>
void save_search_state(const std::string& path, SearchState<S>& state) {
  NamedTensorList<S> out;
  out.emplace_back("search.blocks",
                   Tensor<S>::scalar(static_cast<S>(state.model.blocks.size())));
  out.emplace_back("search.epochs_done",
                   Tensor<S>::scalar(static_cast<S>(state.epochs_done)));
  out.emplace_back("search.bilevel_steps",
                   Tensor<S>::scalar(static_cast<S>(state.bilevel_steps_done)));
  out.emplace_back("search.adam_t", Tensor<S>::scalar(static_cast<S>(state.c_opt.t)));
  for (std::size_t b = 0; b < state.model.blocks.size(); ++b) {
    append_module(out, cat("block", b, "."), state.model.blocks[b]);
  }
  auto push_flat = [&out](const std::string& name, const std::vector<S>& v) {
    out.emplace_back(name, Tensor<S>(Shape{v.size()}, v));
  };
  for (std::size_t i = 0; i < state.w_opt.velocity.size(); ++i) {
    push_flat(cat("opt.w.vel.", i), state.w_opt.velocity[i]);
  }
  for (std::size_t i = 0; i < state.c_opt.m1.size(); ++i) {
    push_flat(cat("opt.c.m1.", i), state.c_opt.m1[i]);
    push_flat(cat("opt.c.m2.", i), state.c_opt.m2[i]);
  }
  out.emplace_back("ring.count",
                   Tensor<S>::scalar(static_cast<S>(state.ring.size())));
  for (std::size_t r = 0; r < state.ring.size(); ++r) {
    out.emplace_back(cat("ring.", r, ".val_loss"),
                     Tensor<S>::scalar(state.ring[r].val_loss));
    out.emplace_back(cat("ring.", r, ".epoch"),
                     Tensor<S>::scalar(static_cast<S>(state.ring[r].epoch)));
    for (std::size_t t = 0; t < state.ring[r].values.size(); ++t) {
      push_flat(cat("ring.", r, ".v.", t), state.ring[r].values[t]);
    }
  }
  save_checkpoint(path, out);
}

template <typename S>
bool load_search_state(const std::string& path, SearchState<S>& state) {
  if (!std::filesystem::exists(path)) return false;
  TensorBundle<S> bundle(load_checkpoint<S>(path));
  const std::size_t blocks =
      static_cast<std::size_t>(bundle.take("search.blocks", Shape{}).item());
  state.model.blocks.clear();
  for (std::size_t b = 0; b < blocks; ++b) {
    state.model.blocks.push_back(read_module(bundle, cat("block", b, ".")));
  }
  state.epochs_done =
      static_cast<std::size_t>(bundle.take("search.epochs_done", Shape{}).item());
  state.bilevel_steps_done = static_cast<std::uint64_t>(
      bundle.take("search.bilevel_steps", Shape{}).item());
  state.c_opt.t = static_cast<std::int64_t>(bundle.take("search.adam_t", Shape{}).item());

  auto w = state.model.search_weights();
  state.w_opt.velocity.clear();
  for (std::size_t i = 0; i < w.size(); ++i) {
    Tensor<S> v = bundle.take(cat("opt.w.vel.", i), Shape{w[i].size()});
    state.w_opt.velocity.emplace_back(v.values().begin(), v.values().end());
  }
  auto c = state.model.arch_params();
  state.c_opt.m1.clear();
  state.c_opt.m2.clear();
  for (std::size_t i = 0; i < c.size(); ++i) {
    Tensor<S> a = bundle.take(cat("opt.c.m1.", i), Shape{c[i].size()});
    Tensor<S> b = bundle.take(cat("opt.c.m2.", i), Shape{c[i].size()});
    state.c_opt.m1.emplace_back(a.values().begin(), a.values().end());
    state.c_opt.m2.emplace_back(b.values().begin(), b.values().end());
  }
  const std::size_t ring_count =
      static_cast<std::size_t>(bundle.take("ring.count", Shape{}).item());
  const std::size_t n_tensors = state.snapshot_order().size();
  state.ring.clear();
  for (std::size_t r = 0; r < ring_count; ++r) {
    StateSnapshot<S> snap;
    snap.val_loss = bundle.take(cat("ring.", r, ".val_loss"), Shape{}).item();
    snap.epoch =
        static_cast<std::size_t>(bundle.take(cat("ring.", r, ".epoch"), Shape{}).item());
    auto order = state.snapshot_order();
    for (std::size_t t = 0; t < n_tensors; ++t) {
      Tensor<S> v = bundle.take(cat("ring.", r, ".v.", t), Shape{order[t].size()});
      snap.values.emplace_back(v.values().begin(), v.values().end());
    }
    state.ring.push_back(std::move(snap));
  }
  bundle.finish("search state");
  return true;
}

template <typename S>
double fused_stack_val_mse(std::vector<FusedConvModule<S>>& fused,
                           const Dataset<S>& val) {
  double total = 0.0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    Tensor<S> h = val.inputs[i];
    for (auto& f : fused) h = nsr_forward_fused(h, f);
    total += static_cast<double>(mse(h, val.targets[i]).item());
  }
  return total / static_cast<double>(val.size());
}

// Fused conv-stage stack: each block collapses to one depthwise conv.
template <typename S>
double fused_conv_stage_val_mse(
    const std::vector<std::pair<Tensor<S>, Tensor<S>>>& stage, const Dataset<S>& val) {
  auto [pl, pr] = same_pads(kTrunkTaps);
  double total = 0.0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    Tensor<S> h = val.inputs[i];
    for (const auto& [kernel, bias] : stage) {
      h = depthwise_conv1d(h, kernel, bias, pl, pr);
    }
    total += static_cast<double>(mse(h, val.targets[i]).item());
  }
  return total / static_cast<double>(val.size());
}

}  // namespace detail

// Full two-stage pipeline: warm-up, alternating bilevel updates with an
// epoch-level checkpoint ring, checkpoint averaging, crop + re-softmax,
// retraining of the retained model, optional fusion. Deterministic for a
// fixed config and seed; every stochastic draw derives from (seed, stream).
template <typename S>
SearchRunResult<S> run_search(const SearchRunConfig& cfg, const std::string& out_dir,
                              bool resume = false) {
  std::filesystem::create_directories(out_dir);
  SearchRunResult<S> result;
  result.log_path = out_dir + "/search_log.csv";
  result.manifest_path = out_dir + "/manifest.json";
  result.checkpoint_path = out_dir + "/final.lsf";
  const std::string state_path = out_dir + "/search_state.lsf";

  PlantedTask<S> task;
  task.channels = cfg.channels;
  task.time_steps = cfg.time_steps;
  task.planted_kernel = cfg.planted_kernel;
  task.noise_sigma = static_cast<S>(cfg.noise_sigma);
  task.n_train = cfg.n_train;
  task.n_val = cfg.n_val;
  DataSplit<S> split = task.make_split(cfg.seed);
  Dataset<S> full_train;
  for (const Dataset<S>* d : {&split.train1, &split.train2}) {
    full_train.inputs.insert(full_train.inputs.end(), d->inputs.begin(),
                             d->inputs.end());
    full_train.targets.insert(full_train.targets.end(), d->targets.begin(),
                              d->targets.end());
  }

  SearchState<S> state;
  state.xi = static_cast<S>(cfg.xi);
  state.ring_capacity = cfg.ring_capacity;
  state.w_opt.lr = static_cast<S>(cfg.lr_w);
  state.w_opt.momentum = static_cast<S>(cfg.momentum);
  state.c_opt.lr = static_cast<S>(cfg.lr_c);

  bool resumed = false;
  if (resume) resumed = detail::load_search_state(state_path, state);
  if (!resumed) {
    Rng init_rng = make_rng(cfg.seed, /*stream=*/1);
    NsrInitOptions<S> init;
    init.kernel_std = static_cast<S>(cfg.init_kernel_std);
    init.trunk_std = static_cast<S>(cfg.init_trunk_std);
    state.model = make_search_model<S>(cfg.channels, cfg.space(), init_rng, init,
                                       cfg.model_kind());
  }

  std::FILE* log = std::fopen(result.log_path.c_str(), resumed ? "a" : "w");
  if (log == nullptr) throw IoError(cat("cannot open run log: ", result.log_path));
  if (!resumed) {
    std::fprintf(log, "# lsf search seed=%" PRIu64 " dtype=%s blocks=%d\n",
                 cfg.seed, dtype_tag<S>() == 0 ? "f32" : "f64", cfg.blocks);
    std::fprintf(log, "step,phase,l_train1,l_train2,l_val");
    for (int b = 0; b < cfg.blocks; ++b) {
      for (int k : cfg.candidates) std::fprintf(log, ",alpha_b%d_k%d", b, k);
    }
    std::fprintf(log, "\n");
  }
  auto log_row = [&](std::uint64_t step, const char* phase, double l1, double l2,
                     double lval) {
    std::fprintf(log, "%" PRIu64 ",%s,%s,%s,%s", step, phase,
                 detail::fmt_double(l1).c_str(), detail::fmt_double(l2).c_str(),
                 detail::fmt_double(lval).c_str());
    for (auto& block : state.model.blocks) {
      for (S a : block.alpha_values()) {
        std::fprintf(log, ",%s", detail::fmt_double(static_cast<double>(a)).c_str());
      }
    }
    std::fprintf(log, "\n");
  };

  if (!resumed) {
    warmup(state, split.train1, cfg.warmup_epochs, cfg.batch_size, cfg.seed);
    const double l1 = static_cast<double>(eval_loss(state.model, split.train1,
                                                    BnMode::Train));
    const double lval = static_cast<double>(eval_loss(state.model, split.val,
                                                      BnMode::Train));
    log_row(0, "warmup", l1, 0.0, lval);
    detail::save_search_state(state_path, state);
  }

  state.w_opt.lr = static_cast<S>(cfg.bilevel_lr_w > 0 ? cfg.bilevel_lr_w : cfg.lr_w);
  for (std::size_t epoch = state.epochs_done; epoch < cfg.epochs; ++epoch) {
    Rng batch_rng = make_rng(cfg.seed, 0xb11e + epoch);
    for (std::size_t s = 0; s < cfg.steps_per_epoch; ++s) {
      auto b1 = detail::draw_batch<S>(batch_rng, split.train1.size(), cfg.batch_size);
      auto b2 = detail::draw_batch<S>(batch_rng, split.train2.size(), cfg.batch_size);
      BilevelStats stats = bilevel_step(state, split.train1, b1, split.train2, b2);
      const double lval = static_cast<double>(eval_loss(state.model, split.val,
                                                        BnMode::Train));
      log_row(state.bilevel_steps_done, "search", stats.l_train1, stats.l_train2,
              lval);
    }
    const S val_loss = eval_loss(state.model, split.val, BnMode::Train);
    state.offer_to_ring(state.take_snapshot(val_loss, epoch + 1));
    state.epochs_done = epoch + 1;
    detail::save_search_state(state_path, state);
  }

  // Average the retained checkpoints and continue from the averaged state.
  StateSnapshot<S> averaged = average_checkpoints(state.ring);
  state.restore_snapshot(averaged);
  result.multibranch_val_mse =
      static_cast<double>(eval_loss(state.model, split.val, BnMode::Eval));

  result.retained = crop_and_resoftmax(state.model, cfg.crop());

  Rng retrain_rng = make_rng(cfg.seed, /*stream=*/2);
  NsrInitOptions<S> init;
  init.kernel_std = static_cast<S>(cfg.init_kernel_std);
  SearchModel<S> retrained = build_retained_model<S>(
      result.retained, cfg.channels, retrain_rng, init, cfg.model_kind());
  SgdMomentum<S> retrain_opt;
  retrain_opt.lr = static_cast<S>(cfg.retrain_lr > 0 ? cfg.retrain_lr : cfg.lr_w);
  retrain_opt.momentum = static_cast<S>(cfg.momentum);
  retrain(retrained, retrain_opt, full_train, cfg.retrain_steps, cfg.batch_size,
          cfg.seed);
  const double l_retrain = static_cast<double>(eval_loss(retrained, full_train,
                                                         BnMode::Train));
  result.retrained_val_mse =
      static_cast<double>(eval_loss(retrained, split.val, BnMode::Eval));
  log_row(state.bilevel_steps_done, "retrain", l_retrain, 0.0,
          result.retrained_val_mse);
  std::fclose(log);

  NamedTensorList<S> final_out;
  final_out.emplace_back("model.blocks",
                         Tensor<S>::scalar(static_cast<S>(retrained.blocks.size())));
  for (std::size_t b = 0; b < retrained.blocks.size(); ++b) {
    append_module(final_out, cat("block", b, "."), retrained.blocks[b]);
  }
  save_checkpoint(result.checkpoint_path, final_out);

  NamedTensorList<S> fused_out;
  fused_out.emplace_back("model.blocks",
                         Tensor<S>::scalar(static_cast<S>(retrained.blocks.size())));
  if (cfg.model_kind() == SearchModelKind::FullModule) {
    std::vector<FusedConvModule<S>> fused;
    for (auto& block : retrained.blocks) fused.push_back(fuse(block));
    result.fused_val_mse = detail::fused_stack_val_mse(fused, split.val);
    for (std::size_t b = 0; b < fused.size(); ++b) {
      append_fused(fused_out, cat("block", b, "."), fused[b]);
    }
  } else {
    std::vector<std::pair<Tensor<S>, Tensor<S>>> stage;
    for (auto& block : retrained.blocks) {
      stage.push_back(fuse_depthwise_stage(block, block.alpha_values()));
    }
    result.fused_val_mse = detail::fused_conv_stage_val_mse(stage, split.val);
    for (std::size_t b = 0; b < stage.size(); ++b) {
      fused_out.emplace_back(cat("block", b, ".fused.kernel"), stage[b].first);
      fused_out.emplace_back(cat("block", b, ".fused.bias"), stage[b].second);
    }
  }
  if (cfg.fuse_output) {
    save_checkpoint(out_dir + "/final_fused.lsf", fused_out);
  }

  // Structured sidecar: block index -> kernel sizes -> re-softmaxed weights.
  Json manifest;
  manifest["seed"] = cfg.seed;
  manifest["crop_mode"] = cfg.crop_mode;
  manifest["bilevel_steps"] = state.bilevel_steps_done;
  Json blocks = Json::array();
  for (std::size_t b = 0; b < result.retained.size(); ++b) {
    Json jb;
    jb["block"] = b;
    jb["kernels"] = result.retained[b].kernels;
    jb["alpha"] = result.retained[b].alpha;
    blocks.push_back(jb);
  }
  manifest["blocks"] = blocks;
  manifest["metrics"] = {{"multibranch_val_mse", result.multibranch_val_mse},
                         {"retrained_val_mse", result.retrained_val_mse},
                         {"fused_val_mse", result.fused_val_mse}};
  std::ofstream mf(result.manifest_path, std::ios::trunc);
  if (!mf) throw IoError(cat("cannot write manifest: ", result.manifest_path));
  mf << manifest.dump(2) << "\n";
  return result;
}

}  // namespace lsf

#endif  // LSF_SEARCH_RUN_HPP
