#ifndef LSF_SEARCH_HPP
#define LSF_SEARCH_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lsf/nsr_conv.hpp"
#include "lsf/ops.hpp"
#include "lsf/tensor.hpp"

namespace lsf {

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

template <typename S>
void zero_grads(std::vector<Tensor<S>>& params) {
  for (auto& p : params) p.zero_grad();
}

template <typename S>
struct SgdMomentum {
  S lr = S(0.05);
  S momentum = S(0.9);
  std::vector<std::vector<S>> velocity;

  void step(std::vector<Tensor<S>>& params) {
    if (velocity.empty()) {
      velocity.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i)
        velocity[i].assign(params[i].size(), S(0));
    }
    if (velocity.size() != params.size()) {
      throw ContractError("sgd: parameter list changed size under the optimizer");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].has_grad()) continue;
      auto g = params[i].grad();
      auto v = params[i].mutable_values();
      auto& vel = velocity[i];
      for (std::size_t j = 0; j < v.size(); ++j) {
        vel[j] = momentum * vel[j] + g[j];
        v[j] -= lr * vel[j];
      }
    }
  }
};

template <typename S>
struct Adam {
  S lr = S(3e-4);
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  std::int64_t t = 0;
  std::vector<std::vector<S>> m1, m2;

  // Applies externally supplied gradients (the bilevel update owns them).
  void step_with_grads(std::vector<Tensor<S>>& params,
                       const std::vector<std::vector<S>>& grads) {
    if (m1.empty()) {
      m1.resize(params.size());
      m2.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m1[i].assign(params[i].size(), S(0));
        m2[i].assign(params[i].size(), S(0));
      }
    }
    ++t;
    const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta1), t));
    const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta2), t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto v = params[i].mutable_values();
      const auto& g = grads[i];
      for (std::size_t j = 0; j < v.size(); ++j) {
        m1[i][j] = beta1 * m1[i][j] + (S(1) - beta1) * g[j];
        m2[i][j] = beta2 * m2[i][j] + (S(1) - beta2) * g[j] * g[j];
        const S mhat = m1[i][j] / bc1;
        const S vhat = m2[i][j] / bc2;
        v[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Search space and dataset
// ---------------------------------------------------------------------------

struct SearchSpace {
  std::vector<std::vector<int>> candidates;  // per block

  static SearchSpace uniform(int blocks, std::vector<int> kernels) {
    SearchSpace s;
    s.candidates.assign(static_cast<std::size_t>(blocks), kernels);
    s.validate();
    return s;
  }

  // Desk-scale default: {0, 3, 5, 7, 15, 30} on two blocks.
  static SearchSpace desk_default() { return uniform(2, {0, 3, 5, 7, 15, 30}); }

  // The full space of the original twelve-block model: kernels 0..30.
  static SearchSpace full_preset() {
    std::vector<int> ks(31);
    std::iota(ks.begin(), ks.end(), 0);
    return uniform(12, ks);
  }

  void validate() const {
    if (candidates.empty()) throw ConfigError("search space has no blocks");
    for (const auto& ks : candidates) {
      if (ks.empty()) throw ConfigError("search space has an empty candidate set");
      for (int k : ks) {
        if (k < 0 || k > kTrunkTaps - 1) {
          throw ConfigError(cat("candidate kernel size ", k, " outside [0, ",
                                kTrunkTaps - 1, "]"));
        }
      }
    }
  }

  std::size_t blocks() const { return candidates.size(); }
};

template <typename S>
struct Dataset {
  std::vector<Tensor<S>> inputs;
  std::vector<Tensor<S>> targets;

  std::size_t size() const { return inputs.size(); }
};

template <typename S>
struct DataSplit {
  Dataset<S> train1, train2, val;
};

// Alternating split of a training set into two halves of size n/2 (+-1).
template <typename S>
std::pair<Dataset<S>, Dataset<S>> split_equally(const Dataset<S>& train) {
  Dataset<S> a, b;
  for (std::size_t i = 0; i < train.size(); ++i) {
    Dataset<S>& dst = (i % 2 == 0) ? a : b;
    dst.inputs.push_back(train.inputs[i]);
    dst.targets.push_back(train.targets[i]);
  }
  return {a, b};
}

// Synthetic regression with a known answer: gaussian input sequences pushed
// through a frozen depthwise conv of the planted kernel size, plus optional
// observation noise. Every tap of the planted kernel carries signal so that
// narrower candidates pay an irreducible cost.
template <typename S>
struct PlantedTask {
  std::size_t channels = 4;
  std::size_t time_steps = 32;
  int planted_kernel = 7;
  S noise_sigma = S(0.05);
  std::size_t n_train = 32;
  std::size_t n_val = 8;

  // Tap magnitudes ramp up toward the kernel edges, so any candidate too
  // narrow for the planted support pays a large irreducible cost.
  Tensor<S> make_kernel(Rng& rng) const {
    const std::size_t taps = static_cast<std::size_t>(planted_kernel);
    Tensor<S> k(Shape{taps, channels});
    std::uniform_real_distribution<double> jitter(0.9, 1.1);
    std::bernoulli_distribution flip(0.5);
    auto kv = k.mutable_values();
    const double centre = (static_cast<double>(taps) - 1.0) / 2.0;
    for (std::size_t j = 0; j < taps; ++j) {
      const double dist = centre > 0 ? std::abs(j - centre) / centre : 0.0;
      const double mag = 0.25 + 0.55 * dist;
      for (std::size_t ch = 0; ch < channels; ++ch) {
        kv[j * channels + ch] = static_cast<S>(mag * jitter(rng)) *
                                (flip(rng) ? S(1) : S(-1));
      }
    }
    return k;
  }

  DataSplit<S> make_split(std::uint64_t seed, Tensor<S>* planted_out = nullptr) const {
    Rng rng = make_rng(seed, /*stream=*/0xda7a);
    Tensor<S> kernel = make_kernel(rng);
    if (planted_out != nullptr) *planted_out = kernel.clone();
    Tensor<S> bias(Shape{channels}, S(0));
    auto [pl, pr] = same_pads(static_cast<std::size_t>(planted_kernel));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, static_cast<double>(noise_sigma));

    auto draw = [&](Dataset<S>& out, std::size_t count) {
      for (std::size_t i = 0; i < count; ++i) {
        Tensor<S> x(Shape{time_steps, channels});
        for (auto& v : x.mutable_values()) v = static_cast<S>(gauss(rng));
        Tensor<S> y = depthwise_conv1d(x, kernel, bias, pl, pr);
        if (noise_sigma > S(0)) {
          for (auto& v : y.mutable_values()) v += static_cast<S>(noise(rng));
        }
        out.inputs.push_back(std::move(x));
        out.targets.push_back(std::move(y));
      }
    };
    Dataset<S> train, val;
    draw(train, n_train);
    draw(val, n_val);
    DataSplit<S> split;
    auto [t1, t2] = split_equally(train);
    split.train1 = std::move(t1);
    split.train2 = std::move(t2);
    split.val = std::move(val);
    return split;
  }
};

// ---------------------------------------------------------------------------
// The searched model: a stack of NSR conv modules
// ---------------------------------------------------------------------------

// What the searched model is made of. ConvStage stacks the depthwise mixed
// ops directly (Algorithm-style "mixed operation" blocks); FullModule stacks
// whole gated conv modules.
enum class SearchModelKind { ConvStage, FullModule };

template <typename S>
struct SearchModel {
  SearchModelKind kind = SearchModelKind::ConvStage;
  std::vector<NsrConvModule<S>> blocks;

  Tensor<S> forward(const Tensor<S>& x, BnMode mode, bool update_running = false) {
    Tensor<S> h = x;
    for (auto& b : blocks) {
      h = kind == SearchModelKind::ConvStage
              ? mixed_op_forward(h, b, mode, update_running)
              : nsr_forward_train(h, b, mode, update_running);
    }
    return h;
  }

  std::vector<Tensor<S>> weight_params() {
    std::vector<Tensor<S>> out;
    for (auto& b : blocks) {
      auto w = b.weights();
      out.insert(out.end(), w.begin(), w.end());
    }
    return out;
  }

  // Stage-1 trainable weights. BN affine parameters stay frozen during the
  // search: a trainable gamma makes alpha * gamma a single degenerate gain
  // and the architecture weights lose their meaning.
  std::vector<Tensor<S>> search_weights() {
    std::vector<Tensor<S>> out;
    for (auto& b : blocks) {
      if (kind == SearchModelKind::FullModule) {
        out.push_back(b.pw_in_w);
        out.push_back(b.pw_in_b);
      }
      out.push_back(b.trunk_kernel);
      out.push_back(b.trunk_bias);
      for (auto& br : b.branches) {
        if (br.kernel) out.push_back(*br.kernel);
        if (br.bias) out.push_back(*br.bias);
      }
      if (kind == SearchModelKind::FullModule) {
        out.push_back(b.pw_out_w);
        out.push_back(b.pw_out_b);
      }
    }
    return out;
  }

  // Stage-2 trainable weights: everything the active stage evaluates,
  // BN affine included.
  std::vector<Tensor<S>> retrain_weights() {
    if (kind == SearchModelKind::FullModule) return weight_params();
    std::vector<Tensor<S>> out = search_weights();
    for (auto& b : blocks) {
      out.push_back(b.trunk_bn.gamma);
      out.push_back(b.trunk_bn.beta);
      for (auto& br : b.branches) {
        out.push_back(br.bn.gamma);
        out.push_back(br.bn.beta);
      }
    }
    return out;
  }

  std::vector<Tensor<S>> arch_params() {
    std::vector<Tensor<S>> out;
    for (auto& b : blocks) out.push_back(b.logits);
    return out;
  }

  std::vector<Tensor<S>> buffers() {
    std::vector<Tensor<S>> out;
    auto push_bn = [&out](BnParams<S>& bn) {
      out.push_back(bn.running_mean);
      out.push_back(bn.running_var);
    };
    for (auto& b : blocks) {
      push_bn(b.trunk_bn);
      for (auto& br : b.branches) push_bn(br.bn);
      push_bn(b.post_bn);
    }
    return out;
  }

  void set_weights_trainable(bool on) {
    for (auto& b : blocks) mark_weights_trainable(b, on);
  }
  void set_arch_trainable(bool on) {
    for (auto& b : blocks) b.logits.set_requires_grad(on);
  }
};

template <typename S>
SearchModel<S> make_search_model(std::size_t channels, const SearchSpace& space,
                                 Rng& rng, NsrInitOptions<S> init = {},
                                 SearchModelKind kind = SearchModelKind::ConvStage) {
  space.validate();
  SearchModel<S> model;
  model.kind = kind;
  for (const auto& ks : space.candidates) {
    model.blocks.push_back(make_nsr_module<S>(channels, ks, rng, init));
  }
  return model;
}

// Mean MSE of the model over the given dataset indices.
template <typename S>
Tensor<S> batch_loss(SearchModel<S>& model, const Dataset<S>& data,
                     const std::vector<std::size_t>& idx, BnMode mode,
                     bool update_running = false) {
  if (idx.empty()) throw ContractError("batch_loss: empty batch");
  Tensor<S> total = Tensor<S>::scalar(S(0));
  for (std::size_t i : idx) {
    Tensor<S> pred = model.forward(data.inputs.at(i), mode, update_running);
    total = add(total, mse(pred, data.targets.at(i)));
  }
  return scale(total, S(1) / static_cast<S>(idx.size()));
}

template <typename S>
S eval_loss(SearchModel<S>& model, const Dataset<S>& data, BnMode mode) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return batch_loss(model, data, all, mode, false).item();
}

// ---------------------------------------------------------------------------
// Search state: parameters, optimizers, checkpoint ring
// ---------------------------------------------------------------------------

template <typename S>
struct StateSnapshot {
  std::vector<std::vector<S>> values;  // weights + buffers + logits, fixed order
  S val_loss = S(0);
  std::size_t epoch = 0;
};

template <typename S>
struct SearchState {
  SearchModel<S> model;
  SgdMomentum<S> w_opt;
  Adam<S> c_opt;
  S xi = S(0);
  std::size_t ring_capacity = 5;
  std::vector<StateSnapshot<S>> ring;  // best val losses, ascending
  std::uint64_t bilevel_steps_done = 0;
  std::size_t epochs_done = 0;

  std::vector<Tensor<S>> snapshot_order() {
    std::vector<Tensor<S>> all = model.weight_params();
    auto bufs = model.buffers();
    all.insert(all.end(), bufs.begin(), bufs.end());
    auto arch = model.arch_params();
    all.insert(all.end(), arch.begin(), arch.end());
    return all;
  }

  StateSnapshot<S> take_snapshot(S val_loss, std::size_t epoch) {
    StateSnapshot<S> snap;
    snap.val_loss = val_loss;
    snap.epoch = epoch;
    for (auto& t : snapshot_order()) {
      snap.values.emplace_back(t.values().begin(), t.values().end());
    }
    return snap;
  }

  void restore_snapshot(const StateSnapshot<S>& snap) {
    auto order = snapshot_order();
    if (snap.values.size() != order.size()) {
      throw ContractError(cat("snapshot holds ", snap.values.size(),
                              " tensors, model expects ", order.size()));
    }
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (snap.values[i].size() != order[i].size()) {
        throw ContractError(cat("snapshot tensor ", i, " has ", snap.values[i].size(),
                                " values, expected ", order[i].size()));
      }
      auto v = order[i].mutable_values();
      std::copy(snap.values[i].begin(), snap.values[i].end(), v.begin());
    }
  }

  void offer_to_ring(StateSnapshot<S> snap) {
    ring.push_back(std::move(snap));
    std::stable_sort(ring.begin(), ring.end(),
                     [](const StateSnapshot<S>& a, const StateSnapshot<S>& b) {
                       return a.val_loss < b.val_loss;
                     });
    if (ring.size() > ring_capacity) ring.resize(ring_capacity);
  }
};

// Elementwise arithmetic mean of every tensor (weights, buffers, and logits)
// across the retained checkpoints; mixture weights follow from the averaged
// logits through the usual softmax.
template <typename S>
StateSnapshot<S> average_checkpoints(const std::vector<StateSnapshot<S>>& ring) {
  if (ring.empty()) throw ContractError("average_checkpoints: empty ring");
  StateSnapshot<S> out = ring.front();
  for (std::size_t i = 1; i < ring.size(); ++i) {
    if (ring[i].values.size() != out.values.size()) {
      throw ContractError("average_checkpoints: checkpoint tensor counts differ");
    }
    for (std::size_t t = 0; t < out.values.size(); ++t) {
      if (ring[i].values[t].size() != out.values[t].size()) {
        throw ContractError(cat("average_checkpoints: tensor ", t,
                                " shape mismatch across checkpoints"));
      }
      for (std::size_t j = 0; j < out.values[t].size(); ++j) {
        out.values[t][j] += ring[i].values[t][j];
      }
    }
  }
  const S count = static_cast<S>(ring.size());
  for (auto& vec : out.values)
    for (auto& v : vec) v /= count;
  return out;
}

// ---------------------------------------------------------------------------
// Training stages
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
std::vector<std::vector<S>> grads_of(std::vector<Tensor<S>>& params) {
  std::vector<std::vector<S>> out(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].has_grad()) {
      out[i].assign(params[i].grad().begin(), params[i].grad().end());
    } else {
      out[i].assign(params[i].size(), S(0));
    }
  }
  return out;
}

template <typename S>
std::vector<std::vector<S>> values_of(std::vector<Tensor<S>>& params) {
  std::vector<std::vector<S>> out(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    out[i].assign(params[i].values().begin(), params[i].values().end());
  }
  return out;
}

template <typename S>
void assign_values(std::vector<Tensor<S>>& params,
                   const std::vector<std::vector<S>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto v = params[i].mutable_values();
    std::copy(values[i].begin(), values[i].end(), v.begin());
  }
}

template <typename S>
void axpy(std::vector<Tensor<S>>& params, S a, const std::vector<std::vector<S>>& x) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto v = params[i].mutable_values();
    for (std::size_t j = 0; j < v.size(); ++j) v[j] += a * x[i][j];
  }
}

template <typename S>
double norm_of(const std::vector<std::vector<S>>& grads) {
  double acc = 0.0;
  for (const auto& g : grads)
    for (S v : g) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc);
}

// One tape pass of `loss_fn`; gradients land on whatever requires grad.
template <typename S, typename LossFn>
S tape_backward(LossFn&& loss_fn) {
  Tape<S> tape;
  TapeScope<S> scope(tape);
  Tensor<S> loss = loss_fn();
  tape.backward(loss);
  return loss.item();
}

}  // namespace detail

// Warm-up: update only the model weights on train1; the architecture logits
// stay bit-identical.
template <typename S>
void warmup(SearchState<S>& state, const Dataset<S>& train1, std::size_t epochs,
            std::size_t batch_size, std::uint64_t seed) {
  if (train1.size() == 0) throw ContractError("warmup: empty train1 dataset");
  if (epochs == 0) return;
  auto w = state.model.search_weights();
  for (auto& t : w) t.set_requires_grad(true);
  state.model.set_arch_trainable(false);
  for (std::size_t e = 0; e < epochs; ++e) {
    Rng rng = make_rng(seed, 0x3a11 + e);
    std::vector<std::size_t> order(train1.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t ofs = 0; ofs < order.size(); ofs += batch_size) {
      std::vector<std::size_t> batch(
          order.begin() + ofs,
          order.begin() + std::min(order.size(), ofs + batch_size));
      zero_grads(w);
      detail::tape_backward<S>([&] {
        return batch_loss(state.model, train1, batch, BnMode::Train,
                          /*update_running=*/true);
      });
      state.w_opt.step(w);
    }
  }
  zero_grads(w);
  state.model.set_arch_trainable(true);
}

struct BilevelStats {
  double l_train1 = 0.0;
  double l_train2 = 0.0;
  double arch_grad_norm = 0.0;
  bool second_order_skipped = false;
};

// One alternating update per the first-/second-order scheme: architecture
// logits first (gradient of the train2 loss at the one-step-unrolled weights
// when xi > 0), then the weights on train1.
template <typename S>
BilevelStats bilevel_step(SearchState<S>& state, const Dataset<S>& train1,
                          const std::vector<std::size_t>& train1_batch,
                          const Dataset<S>& train2,
                          const std::vector<std::size_t>& train2_batch,
                          std::vector<std::vector<S>>* arch_grad_out = nullptr) {
  if (state.xi < S(0)) throw ContractError("bilevel_step: xi must be >= 0");
  BilevelStats stats;
  auto w = state.model.search_weights();
  auto c = state.model.arch_params();
  for (auto& t : w) t.set_requires_grad(true);
  state.model.set_arch_trainable(true);

  auto loss1 = [&] {
    return batch_loss(state.model, train1, train1_batch, BnMode::Train, false);
  };
  auto loss2 = [&] {
    return batch_loss(state.model, train2, train2_batch, BnMode::Train, false);
  };

  std::vector<std::vector<S>> arch_grad;
  if (state.xi == S(0)) {
    zero_grads(w);
    zero_grads(c);
    stats.l_train2 = detail::tape_backward<S>(loss2);
    arch_grad = detail::grads_of(c);
  } else {
    // Virtual step w' = w - xi * grad_w L1(w, alpha).
    zero_grads(w);
    zero_grads(c);
    detail::tape_backward<S>(loss1);
    auto g1 = detail::grads_of(w);
    auto w_backup = detail::values_of(w);
    for (std::size_t i = 0; i < w.size(); ++i) {
      auto v = w[i].mutable_values();
      for (std::size_t j = 0; j < v.size(); ++j) v[j] -= state.xi * g1[i][j];
    }
    // First term and the HvP direction v = grad_{w'} L2(w', alpha).
    zero_grads(w);
    zero_grads(c);
    stats.l_train2 = detail::tape_backward<S>(loss2);
    arch_grad = detail::grads_of(c);
    auto v_dir = detail::grads_of(w);
    detail::assign_values(w, w_backup);

    const double v_norm = detail::norm_of(v_dir);
    if (v_norm == 0.0) {
      stats.second_order_skipped = true;
    } else {
      const S eps_fd = static_cast<S>(0.01 / v_norm);
      detail::axpy(w, eps_fd, v_dir);
      zero_grads(c);
      zero_grads(w);
      detail::tape_backward<S>(loss1);
      auto g_plus = detail::grads_of(c);
      detail::axpy(w, S(-2) * eps_fd, v_dir);
      zero_grads(c);
      zero_grads(w);
      detail::tape_backward<S>(loss1);
      auto g_minus = detail::grads_of(c);
      detail::assign_values(w, w_backup);
      for (std::size_t i = 0; i < arch_grad.size(); ++i) {
        for (std::size_t j = 0; j < arch_grad[i].size(); ++j) {
          arch_grad[i][j] -= state.xi * (g_plus[i][j] - g_minus[i][j]) /
                             (S(2) * eps_fd);
        }
      }
    }
  }
  stats.arch_grad_norm = detail::norm_of(arch_grad);
  if (arch_grad_out != nullptr) *arch_grad_out = arch_grad;
  state.c_opt.step_with_grads(c, arch_grad);

  // Weight update on train1 at the refreshed alpha.
  zero_grads(w);
  zero_grads(c);
  stats.l_train1 = detail::tape_backward<S>([&] {
    return batch_loss(state.model, train1, train1_batch, BnMode::Train,
                      /*update_running=*/true);
  });
  state.w_opt.step(w);
  zero_grads(w);
  zero_grads(c);
  ++state.bilevel_steps_done;
  return stats;
}

// ---------------------------------------------------------------------------
// Stage 2: crop, re-softmax, retrain
// ---------------------------------------------------------------------------

enum class CropMode { LogitSign, BelowUniform };

struct RetainedBlock {
  std::vector<int> kernels;
  std::vector<double> alpha;
};

// Per block: drop candidates by the crop rule (pre-softmax logit < 0 by
// default, below-uniform alpha as the alternative) and re-softmax the
// surviving logits. If everything would be cropped the single best candidate
// survives with weight 1.
template <typename S>
std::vector<RetainedBlock> crop_and_resoftmax(SearchModel<S>& model,
                                              CropMode mode = CropMode::LogitSign) {
  std::vector<RetainedBlock> out;
  for (auto& block : model.blocks) {
    RetainedBlock rb;
    const std::size_t n = block.branches.size();
    if (n == 0) {
      out.push_back(rb);
      continue;
    }
    std::vector<S> logits(block.logits.values().begin(), block.logits.values().end());
    std::vector<S> alpha = block.alpha_values();
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < n; ++i) {
      const bool cropped = mode == CropMode::LogitSign
                               ? logits[i] < S(0)
                               : alpha[i] < S(1) / static_cast<S>(n);
      if (!cropped) keep.push_back(i);
    }
    if (keep.empty()) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < n; ++i) {
        if (logits[i] > logits[best]) best = i;
      }
      keep.push_back(best);
    }
    // Softmax over the retained logits only.
    double mx = -1e300;
    for (std::size_t i : keep) mx = std::max(mx, static_cast<double>(logits[i]));
    double denom = 0.0;
    for (std::size_t i : keep) denom += std::exp(static_cast<double>(logits[i]) - mx);
    for (std::size_t i : keep) {
      rb.kernels.push_back(block.branches[i].kernel_size);
      rb.alpha.push_back(std::exp(static_cast<double>(logits[i]) - mx) / denom);
    }
    out.push_back(rb);
  }
  return out;
}

// Fresh model containing only the retained branches, with the re-softmaxed
// weights frozen (fixed_alpha), ready for Stage-2 training and fusion.
template <typename S>
SearchModel<S> build_retained_model(const std::vector<RetainedBlock>& retained,
                                    std::size_t channels, Rng& rng,
                                    NsrInitOptions<S> init = {},
                                    SearchModelKind kind = SearchModelKind::ConvStage) {
  SearchModel<S> model;
  model.kind = kind;
  for (const auto& rb : retained) {
    NsrConvModule<S> block = make_nsr_module<S>(channels, rb.kernels, rng, init);
    std::vector<S> alpha(rb.alpha.begin(), rb.alpha.end());
    block.fixed_alpha = std::move(alpha);
    model.blocks.push_back(std::move(block));
  }
  return model;
}

// Stage-2 weight training with the architecture frozen.
template <typename S>
void retrain(SearchModel<S>& model, SgdMomentum<S>& opt, const Dataset<S>& train,
             std::size_t steps, std::size_t batch_size, std::uint64_t seed) {
  if (train.size() == 0) throw ContractError("retrain: empty train dataset");
  if (steps == 0) return;
  auto w = model.retrain_weights();
  for (auto& t : w) t.set_requires_grad(true);
  model.set_arch_trainable(false);
  Rng rng = make_rng(seed, 0x5e7a);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<std::size_t> batch;
    for (std::size_t i = 0; i < batch_size; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    zero_grads(w);
    detail::tape_backward<S>([&] {
      return batch_loss(model, train, batch, BnMode::Train, /*update_running=*/true);
    });
    opt.step(w);
  }
  zero_grads(w);
}

}  // namespace lsf

#endif  // LSF_SEARCH_HPP
