#include "doctest.h"

#include <cmath>
#include <cstddef>
#include <vector>

#include "lsf/nsr_conv.hpp"
#include "lsf/ops.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using lsf::BnMode;
using lsf::BnParams;
using lsf::BranchSpec;
using lsf::FusedConvModule;
using lsf::NsrConvModule;
using lsf::Shape;
using lsf::Tensor;
using T64 = Tensor<double>;
using T32 = Tensor<float>;

namespace {

// Straight-line re-coding of the training-form forward with plain loops.
// Reads only raw parameter values; shares no op code with the library.
std::vector<double> nsr_train_oracle(const NsrConvModule<double>& m,
                                     const std::vector<double>& x, std::size_t t,
                                     bool train_mode) {
  const std::size_t c = m.channels;

  auto matvec_rows = [](const std::vector<double>& in, std::size_t rows,
                        std::size_t cin, const std::vector<double>& w,
                        const std::vector<double>& b, std::size_t cout) {
    std::vector<double> out(rows * cout);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t o = 0; o < cout; ++o) {
        double acc = b[o];
        for (std::size_t j = 0; j < cin; ++j) acc += w[o * cin + j] * in[i * cin + j];
        out[i * cout + o] = acc;
      }
    return out;
  };
  auto bn_apply = [&](const std::vector<double>& in, const BnParams<double>& bn) {
    std::vector<double> gamma = testutil::to_doubles(bn.gamma);
    std::vector<double> beta = testutil::to_doubles(bn.beta);
    std::vector<double> mean, var;
    if (train_mode) {
      mean.assign(c, 0.0);
      var.assign(c, 0.0);
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) mean[ch] += in[i * c + ch];
      for (auto& v : mean) v /= static_cast<double>(t);
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double d = in[i * c + ch] - mean[ch];
          var[ch] += d * d;
        }
      for (auto& v : var) v /= static_cast<double>(t);
    } else {
      mean = testutil::to_doubles(bn.running_mean);
      var = testutil::to_doubles(bn.running_var);
    }
    return oracles::bn_eval_affine_oracle(in, t, c, gamma, beta, mean, var,
                                          static_cast<double>(bn.eps));
  };
  auto conv_same = [&](const std::vector<double>& in, const std::vector<double>& k,
                       std::size_t taps, const std::vector<double>& bias) {
    const std::size_t pl = taps / 2, pr = (taps - 1) / 2;
    return oracles::depthwise_conv_oracle(in, t, c, k, taps, bias, pl, pr);
  };

  // Gate: pointwise C -> 2C, then GLU.
  auto pre = matvec_rows(x, t, c, testutil::to_doubles(m.pw_in_w),
                         testutil::to_doubles(m.pw_in_b), 2 * c);
  std::vector<double> g(t * c);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double a = pre[i * 2 * c + ch];
      const double b = pre[i * 2 * c + c + ch];
      g[i * c + ch] = a / (1.0 + std::exp(-b));
    }

  auto mix = bn_apply(conv_same(g, testutil::to_doubles(m.trunk_kernel), lsf::kTrunkTaps,
                                testutil::to_doubles(m.trunk_bias)),
                      m.trunk_bn);
  if (!m.branches.empty()) {
    std::vector<double> logits = testutil::to_doubles(m.logits);
    std::vector<double> alpha(logits.size());
    if (m.fixed_alpha) {
      alpha.assign(m.fixed_alpha->begin(), m.fixed_alpha->end());
    } else {
      double mx = logits[0], sum = 0.0;
      for (double v : logits) mx = std::max(mx, v);
      for (std::size_t i = 0; i < logits.size(); ++i) {
        alpha[i] = std::exp(logits[i] - mx);
        sum += alpha[i];
      }
      for (auto& v : alpha) v /= sum;
    }
    for (std::size_t bi = 0; bi < m.branches.size(); ++bi) {
      const auto& br = m.branches[bi];
      std::vector<double> branch_out;
      if (br.kernel_size == 0) {
        branch_out = bn_apply(g, br.bn);
      } else {
        branch_out = bn_apply(
            conv_same(g, testutil::to_doubles(*br.kernel),
                      static_cast<std::size_t>(br.kernel_size),
                      testutil::to_doubles(*br.bias)),
            br.bn);
      }
      for (std::size_t i = 0; i < t * c; ++i) mix[i] += alpha[bi] * branch_out[i];
    }
  }

  auto normed = bn_apply(mix, m.post_bn);
  std::vector<double> activated(t * c);
  for (std::size_t i = 0; i < t * c; ++i) {
    activated[i] = normed[i] / (1.0 + std::exp(-normed[i]));
  }
  return matvec_rows(activated, t, c, testutil::to_doubles(m.pw_out_w),
                     testutil::to_doubles(m.pw_out_b), c);
}

template <typename S>
NsrConvModule<S> random_eval_module(std::size_t channels, std::vector<int> kernels,
                                    std::uint64_t seed) {
  auto rng = lsf::make_rng(seed);
  lsf::NsrInitOptions<S> opts;
  opts.random_bn_stats = true;
  return lsf::make_nsr_module<S>(channels, kernels, rng, opts);
}

template <typename S>
Tensor<S> identity_matrix(std::size_t n) {
  Tensor<S> t(Shape{n, n});
  auto v = t.mutable_values();
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = S(1);
  return t;
}

// Identity-composed module: pw_in stacks [I; 0] so the GLU gate sits at 0,
// trunk is a centred delta kernel, every BN neutral, pw_out identity.
NsrConvModule<double> identity_module(std::size_t c, std::vector<int> branch_kernels) {
  auto rng = lsf::make_rng(1);
  NsrConvModule<double> m = lsf::make_nsr_module<double>(c, branch_kernels, rng);
  m.pw_in_w = Tensor<double>(Shape{2 * c, c});
  {
    auto v = m.pw_in_w.mutable_values();
    for (std::size_t i = 0; i < c; ++i) v[i * c + i] = 1.0;
  }
  m.pw_in_b = Tensor<double>(Shape{2 * c}, 0.0);
  m.trunk_kernel = Tensor<double>(Shape{lsf::kTrunkTaps, c}, 0.0);
  {
    auto v = m.trunk_kernel.mutable_values();
    for (std::size_t ch = 0; ch < c; ++ch) v[15 * c + ch] = 1.0;
  }
  m.trunk_bias = Tensor<double>(Shape{c}, 0.0);
  m.trunk_bn = BnParams<double>::neutral(c);
  m.post_bn = BnParams<double>::neutral(c);
  for (auto& br : m.branches) br.bn = BnParams<double>::neutral(c);
  m.pw_out_w = identity_matrix<double>(c);
  m.pw_out_b = Tensor<double>(Shape{c}, 0.0);
  return m;
}

}  // namespace

TEST_SUITE_BEGIN("nsr-conv");

TEST_CASE("identity-composed module reduces to swish of the gated input") {
  auto rng = lsf::make_rng(3);
  NsrConvModule<double> m = identity_module(3, {});
  T64 x = testutil::randn<double>(Shape{10, 3}, rng);
  T64 y = lsf::nsr_forward_train(x, m, BnMode::Eval);
  // GLU gate at 0 halves the signal; everything else is the identity.
  T64 want = lsf::swish(lsf::scale(x, 0.5));
  CHECK(testutil::max_abs_diff(y, testutil::to_doubles(want)) <= 1e-14);
}

TEST_CASE("single k=0 branch with unit weight adds the gated input") {
  auto rng = lsf::make_rng(5);
  NsrConvModule<double> m = identity_module(2, {0});
  // One branch: softmax over a single logit is exactly [1].
  T64 x = testutil::randn<double>(Shape{6, 2}, rng);
  T64 y = lsf::nsr_forward_train(x, m, BnMode::Eval);
  // trunk delta gives g, the k=0 branch adds g: mix = 2g = x.
  T64 want = lsf::swish(x);
  CHECK(testutil::max_abs_diff(y, testutil::to_doubles(want)) <= 1e-14);

  std::vector<double> alpha = m.alpha_values();
  REQUIRE(alpha.size() == 1);
  CHECK(alpha[0] == 1.0);
}

TEST_CASE("training forward matches the straight-line oracle") {
  for (bool train_mode : {false, true}) {
    auto m = random_eval_module<double>(8, {0, 3, 4, 15}, 11);
    auto rng = lsf::make_rng(13);
    T64 x = testutil::randn<double>(Shape{32, 8}, rng);
    T64 y = lsf::nsr_forward_train(x, m, train_mode ? BnMode::Train : BnMode::Eval,
                                   /*update_running=*/false);
    auto want = nsr_train_oracle(m, testutil::to_doubles(x), 32, train_mode);
    CAPTURE(train_mode);
    CHECK(testutil::max_abs_diff(y, want) <= 1e-11);
  }
}

TEST_CASE("training forward rejects empty input and wrong channels") {
  auto m = random_eval_module<double>(4, {3}, 17);
  T64 empty(Shape{0, 4});
  CHECK_THROWS_AS(lsf::nsr_forward_train(empty, m, BnMode::Eval), lsf::ShapeError);
  T64 wrong(Shape{5, 3});
  CHECK_THROWS_AS(lsf::nsr_forward_train(wrong, m, BnMode::Eval), lsf::ShapeError);
}

TEST_CASE("fold_bn with neutral statistics is the identity") {
  auto rng = lsf::make_rng(19);
  T64 kernel = testutil::randn<double>(Shape{5, 3}, rng);
  T64 bias = testutil::randn<double>(Shape{3}, rng);
  auto bn = BnParams<double>::neutral(3);
  auto [fk, fb] = lsf::fold_bn(kernel, bias, bn);
  CHECK(testutil::max_abs_diff(fk, testutil::to_doubles(kernel)) <= 1e-15);
  CHECK(testutil::max_abs_diff(fb, testutil::to_doubles(bias)) <= 1e-15);
}

TEST_CASE("fold_bn of the k=0 delta with gamma=2 beta=1") {
  const double eps = 1e-5;
  BnParams<double> bn = BnParams<double>::neutral(2, eps);
  bn.gamma = T64(Shape{2}, 2.0);
  bn.beta = T64(Shape{2}, 1.0);
  T64 delta = lsf::delta_kernel<double>(2);
  T64 zero_bias(Shape{2}, 0.0);
  auto [fk, fb] = lsf::fold_bn(delta, zero_bias, bn);
  CHECK(fk.at(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(fk.at(0, 1) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(fb.at(0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("fold_bn equals conv-then-eval-BN composition") {
  auto rng = lsf::make_rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    T64 kernel = testutil::randn<double>(Shape{7, 4}, rng);
    T64 bias = testutil::randn<double>(Shape{4}, rng);
    BnParams<double> bn = BnParams<double>::neutral(4);
    std::uniform_real_distribution<double> vu(0.4, 2.0);
    for (auto& v : bn.gamma.mutable_values()) v = vu(rng);
    for (auto& v : bn.beta.mutable_values()) v = vu(rng) - 1.0;
    for (auto& v : bn.running_mean.mutable_values()) v = vu(rng) - 1.2;
    for (auto& v : bn.running_var.mutable_values()) v = vu(rng);

    T64 x = testutil::randn<double>(Shape{12, 4}, rng);
    T64 direct = lsf::batchnorm(lsf::depthwise_conv1d(x, kernel, bias, 3, 3), bn,
                                BnMode::Eval);
    auto [fk, fb] = lsf::fold_bn(kernel, bias, bn);
    T64 folded = lsf::depthwise_conv1d(x, fk, fb, 3, 3);
    CHECK(testutil::max_abs_diff(direct, testutil::to_doubles(folded)) <= 1e-10);
  }
}

TEST_CASE("fold_bn names the offending channel on bad variance") {
  T64 kernel(Shape{3, 2});
  T64 bias(Shape{2});
  BnParams<double> bn = BnParams<double>::neutral(2);
  bn.running_var.mutable_values()[1] = -1.0;
  CHECK_THROWS_WITH_AS(lsf::fold_bn(kernel, bias, bn), doctest::Contains("channel 1"),
                       lsf::NumericError);
}

TEST_CASE("pad_kernel placements") {
  auto rng = lsf::make_rng(29);
  T64 k31 = testutil::randn<double>(Shape{31, 2}, rng);
  T64 padded31 = lsf::pad_kernel(k31);
  CHECK(testutil::max_abs_diff(padded31, testutil::to_doubles(k31)) == 0.0);

  T64 k1(Shape{1, 2}, {5.0, 7.0});
  T64 padded1 = lsf::pad_kernel(k1);
  CHECK(padded1.at(15, 0) == 5.0);
  CHECK(padded1.at(15, 1) == 7.0);
  double off_centre = 0.0;
  for (std::size_t j = 0; j < 31; ++j) {
    if (j == 15) continue;
    off_centre += std::abs(padded1.at(j, 0)) + std::abs(padded1.at(j, 1));
  }
  CHECK(off_centre == 0.0);

  T64 k32(Shape{32, 2});
  CHECK_THROWS_AS(lsf::pad_kernel(k32), lsf::ContractError);
}

TEST_CASE("padded kernels convolve identically to the originals") {
  auto rng = lsf::make_rng(31);
  for (std::size_t k : {1u, 4u, 5u, 30u}) {
    T64 kernel = testutil::randn<double>(Shape{k, 3}, rng);
    T64 bias = testutil::randn<double>(Shape{3}, rng);
    T64 x = testutil::randn<double>(Shape{40, 3}, rng);
    auto [pl, pr] = lsf::same_pads(k);
    T64 direct = lsf::depthwise_conv1d(x, kernel, bias, pl, pr);
    T64 padded = lsf::pad_kernel(kernel);
    auto [pl31, pr31] = lsf::same_pads(lsf::kTrunkTaps);
    T64 via31 = lsf::depthwise_conv1d(x, padded, bias, pl31, pr31);
    CAPTURE(k);
    CHECK(testutil::max_abs_diff(direct, testutil::to_doubles(via31)) == 0.0);
  }
}

TEST_CASE("fuse of a trunk-only module with neutral BNs keeps the kernel") {
  auto rng = lsf::make_rng(37);
  NsrConvModule<double> m = lsf::make_nsr_module<double>(4, {}, rng);
  m.trunk_bn = BnParams<double>::neutral(4);
  m.post_bn = BnParams<double>::neutral(4);
  FusedConvModule<double> fused = lsf::fuse(m);
  CHECK(testutil::max_abs_diff(fused.fused_kernel,
                               testutil::to_doubles(m.trunk_kernel)) <= 1e-15);
  CHECK(testutil::max_abs_diff(fused.fused_bias,
                               testutil::to_doubles(m.trunk_bias)) <= 1e-15);
}

TEST_CASE("fusion equivalence on the retained-branch fixture weights") {
  auto m = random_eval_module<double>(4, {5, 4, 3, 7}, 41);
  const std::vector<double> alpha = {0.377, 0.279, 0.246, 0.098};
  FusedConvModule<double> fused = lsf::fuse(m, alpha);
  m.fixed_alpha = alpha;
  auto rng = lsf::make_rng(43);
  for (int trial = 0; trial < 20; ++trial) {
    T64 x = testutil::randn<double>(Shape{32, 4}, rng);
    T64 train_out = lsf::nsr_forward_train(x, m, BnMode::Eval);
    T64 fused_out = lsf::nsr_forward_fused(x, fused);
    CHECK(testutil::max_abs_diff(train_out, testutil::to_doubles(fused_out)) <= 1e-10);
  }
}

TEST_CASE("fusion equivalence over random modules, FP64 and FP32") {
  const std::vector<std::vector<int>> branch_sets = {
      {}, {0}, {3, 7}, {0, 1, 4, 9}, {2, 5, 8, 15, 22, 30}};
  std::uint64_t seed = 100;
  for (std::size_t c : {2u, 4u, 8u}) {
    for (const auto& ks : branch_sets) {
      {
        auto m = random_eval_module<double>(c, ks, seed);
        FusedConvModule<double> fused = lsf::fuse(m);
        auto rng = lsf::make_rng(seed + 1);
        T64 x = testutil::randn<double>(Shape{32, c}, rng);
        T64 a = lsf::nsr_forward_train(x, m, BnMode::Eval);
        T64 b = lsf::nsr_forward_fused(x, fused);
        CHECK(testutil::max_abs_diff(a, testutil::to_doubles(b)) <= 1e-10);
      }
      {
        auto m = random_eval_module<float>(c, ks, seed + 2);
        FusedConvModule<float> fused = lsf::fuse(m);
        auto rng = lsf::make_rng(seed + 3);
        T32 x = testutil::randn<float>(Shape{32, c}, rng);
        T32 a = lsf::nsr_forward_train(x, m, BnMode::Eval);
        T32 b = lsf::nsr_forward_fused(x, fused);
        CHECK(testutil::max_abs_diff(a, b) <= 1e-5);
      }
      ++seed;
    }
  }
}

TEST_CASE("fuse validates the weight vector") {
  auto m = random_eval_module<double>(2, {3, 5}, 53);
  CHECK_THROWS_AS(lsf::fuse(m, {1.0}), lsf::ContractError);
  CHECK_THROWS_AS(lsf::fuse(m, {0.9, 0.2}), lsf::ContractError);
  CHECK_THROWS_AS(lsf::fuse(m, {1.2, -0.2}), lsf::ContractError);
}

TEST_CASE("fused flop count ignores branches and beats the train form") {
  auto with_branches = random_eval_module<double>(8, {0, 3, 5, 7, 15, 30}, 59);
  auto trunk_only = random_eval_module<double>(8, {}, 61);
  const std::uint64_t t = 128;
  const auto fused_a = lsf::flop_count(lsf::fuse(with_branches), t);
  const auto fused_b = lsf::flop_count(lsf::fuse(trunk_only), t);
  CHECK(fused_a == fused_b);
  CHECK(lsf::flop_count(with_branches, t) > fused_a);
}

TEST_CASE("module weights train but logits stay out of the weight list") {
  auto m = random_eval_module<double>(2, {3, 5}, 67);
  auto weights = m.weights();
  for (auto& w : weights) CHECK_FALSE(w.same_storage(m.logits));
}

TEST_SUITE_END();
