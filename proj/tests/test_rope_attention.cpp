#include "doctest.h"

#include <cmath>
#include <vector>

#include "lsf/attention.hpp"
#include "lsf/ops.hpp"
#include "lsf/rope.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using lsf::AttentionLayer;
using lsf::AttentionVariant;
using lsf::RopeConfig;
using lsf::Shape;
using lsf::Tensor;
using T64 = Tensor<double>;

namespace {

// Projection y = x W^T with plain loops, kept independent of lsf::matmul.
std::vector<double> project(const std::vector<double>& x, std::size_t n,
                            std::size_t d, const std::vector<double>& w) {
  std::vector<double> out(n * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < d; ++o)
      for (std::size_t j = 0; j < d; ++j) out[i * d + o] += x[i * d + j] * w[o * d + j];
  return out;
}

std::vector<double> head_theta(std::size_t hd) {
  std::vector<double> theta(hd / 2);
  for (std::size_t p = 0; p < theta.size(); ++p) {
    theta[p] = std::pow(10000.0, -2.0 * static_cast<double>(p) /
                                     static_cast<double>(hd));
  }
  return theta;
}

// Whole-layer oracle: per-head double loops plus output projection.
std::vector<double> attention_oracle(const AttentionLayer<double>& layer,
                                     const T64& x, bool linear, double offset) {
  const std::size_t n = x.extent(0);
  const std::size_t dm = x.extent(1);
  const std::size_t hd = static_cast<std::size_t>(layer.head_dim());
  auto xv = testutil::to_doubles(x);
  auto q = project(xv, n, dm, testutil::to_doubles(layer.w_q));
  auto k = project(xv, n, dm, testutil::to_doubles(layer.w_k));
  auto v = project(xv, n, dm, testutil::to_doubles(layer.w_v));

  std::vector<double> merged(n * dm, 0.0);
  for (int h = 0; h < layer.heads; ++h) {
    const std::size_t c0 = static_cast<std::size_t>(h) * hd;
    oracles::AttentionOracleInput in;
    in.n = n;
    in.d = hd;
    in.theta = head_theta(hd);
    in.offset = offset;
    in.q.resize(n * hd);
    in.k.resize(n * hd);
    in.v.resize(n * hd);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t e = 0; e < hd; ++e) {
        in.q[i * hd + e] = q[i * dm + c0 + e];
        in.k[i * hd + e] = k[i * dm + c0 + e];
        in.v[i * hd + e] = v[i * dm + c0 + e];
      }
    std::vector<double> head =
        linear ? oracles::la_head_oracle(
                     in, [](double t) { return t >= 0.0 ? t + 1.0 : std::exp(t); },
                     static_cast<double>(layer.la_eps))
               : oracles::sa_head_oracle(in);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t e = 0; e < hd; ++e) merged[i * dm + c0 + e] = head[i * hd + e];
  }
  return project(merged, n, dm, testutil::to_doubles(layer.w_o));
}

}  // namespace

TEST_SUITE_BEGIN("rope-attention");

TEST_CASE("rope config theta starts at one and stays positive") {
  auto cfg = RopeConfig<double>::make(8);
  CHECK(cfg.theta.size() == 4);
  CHECK(cfg.theta[0] == 1.0);
  for (double t : cfg.theta) CHECK(t > 0.0);
  CHECK_THROWS_AS(RopeConfig<double>::make(7), lsf::ConfigError);
}

TEST_CASE("rope at position zero is the identity") {
  auto rng = lsf::make_rng(2);
  auto cfg = RopeConfig<double>::make(6);
  T64 x = testutil::randn<double>(Shape{1, 6}, rng);
  T64 y = lsf::apply_rope(x, cfg, 0);
  CHECK(testutil::max_abs_diff(y, testutil::to_doubles(x)) == 0.0);
}

TEST_CASE("rope on d=2 unit vector gives (cos m, sin m)") {
  auto cfg = RopeConfig<double>::make(2);
  for (int m : {1, 3, 10}) {
    T64 x(Shape{1, 2}, {1.0, 0.0});
    T64 y = lsf::apply_rope(x, cfg, m);
    CHECK(y.at(0, 0) == doctest::Approx(std::cos(m)).epsilon(1e-14));
    CHECK(y.at(0, 1) == doctest::Approx(std::sin(m)).epsilon(1e-14));
  }
}

TEST_CASE("rope matches the explicit block-diagonal matrix oracle") {
  auto rng = lsf::make_rng(29);
  for (std::size_t d : {2u, 4u, 8u}) {
    auto cfg = RopeConfig<double>::make(static_cast<int>(d));
    const std::size_t n = 5;
    T64 x = testutil::randn<double>(Shape{n, d}, rng);
    T64 y = lsf::apply_rope(x, cfg, 3);
    auto xv = testutil::to_doubles(x);
    std::vector<double> theta(cfg.theta.begin(), cfg.theta.end());
    for (std::size_t i = 0; i < n; ++i) {
      auto r = oracles::rotation_matrix(d, static_cast<double>(i) + 3.0, theta);
      auto want = oracles::matvec(
          r, d, d, std::vector<double>(xv.begin() + i * d, xv.begin() + (i + 1) * d));
      for (std::size_t e = 0; e < d; ++e) {
        CHECK(std::abs(y.at(i, e) - want[e]) <= 1e-12);
      }
    }
  }
}

TEST_CASE("rope preserves row norms") {
  auto rng = lsf::make_rng(37);
  auto cfg = RopeConfig<double>::make(16);
  T64 x = testutil::randn<double>(Shape{12, 16}, rng);
  T64 y = lsf::apply_rope(x, cfg, 7);
  for (std::size_t i = 0; i < 12; ++i) {
    double nx = 0.0, ny = 0.0;
    for (std::size_t e = 0; e < 16; ++e) {
      nx += x.at(i, e) * x.at(i, e);
      ny += y.at(i, e) * y.at(i, e);
    }
    CHECK(std::abs(std::sqrt(ny) / std::sqrt(nx) - 1.0) <= 1e-6);
  }
}

TEST_CASE("rope dimension mismatch raises a config error") {
  auto cfg = RopeConfig<double>::make(4);
  T64 x(Shape{2, 6});
  CHECK_THROWS_AS(lsf::apply_rope(x, cfg), lsf::ConfigError);
}

TEST_CASE("rope gradient passes FD") {
  auto rng = lsf::make_rng(101);
  auto cfg = RopeConfig<double>::make(8);
  T64 x = testutil::randn<double>(Shape{4, 8}, rng);
  T64 w = testutil::randn<double>(Shape{4, 8}, rng);
  auto rep = oracles::check_gradients<double>(
      {x}, [&] { return lsf::sum_all(lsf::mul(lsf::apply_rope(x, cfg, 2), w)); });
  CHECK(rep.max_rel_err <= 1e-6);
}

TEST_CASE("attention weight: equal positions cancel the rotations") {
  auto rng = lsf::make_rng(43);
  auto layer = AttentionLayer<double>::make(8, 1, AttentionVariant::SA, rng);
  T64 xm = testutil::randn<double>(Shape{8}, rng);
  T64 xn = testutil::randn<double>(Shape{8}, rng);
  const double a = lsf::attention_weight(xm, xn, 5, 5, layer);
  // (W_q x_m)^T (W_k x_n) with no rotation at all.
  const double b = lsf::attention_weight(xm, xn, 0, 0, layer);
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("attention weight: absolute and relative formulas agree") {
  auto rng = lsf::make_rng(47);
  auto layer = AttentionLayer<double>::make(8, 1, AttentionVariant::SA, rng);
  auto theta = head_theta(8);
  for (int trial = 0; trial < 20; ++trial) {
    T64 xm = testutil::randn<double>(Shape{8}, rng);
    T64 xn = testutil::randn<double>(Shape{8}, rng);
    const std::ptrdiff_t m = trial % 7, n = (trial * 3) % 11;
    const double direct = lsf::attention_weight(xm, xn, m, n, layer);

    // Relative form: x_m^T W_q^T R_{n-m} W_k x_n via the materialised matrix.
    auto qm = project(testutil::to_doubles(xm), 1, 8, testutil::to_doubles(layer.w_q));
    auto kn = project(testutil::to_doubles(xn), 1, 8, testutil::to_doubles(layer.w_k));
    auto r = oracles::rotation_matrix(8, static_cast<double>(n - m), theta);
    auto rk = oracles::matvec(r, 8, 8, kn);
    double rel = 0.0;
    for (std::size_t e = 0; e < 8; ++e) rel += qm[e] * rk[e];
    CHECK(std::abs(direct - rel) <= 1e-10);
  }
}

TEST_CASE("attention weight is invariant under a global position shift") {
  auto rng = lsf::make_rng(53);
  auto layer = AttentionLayer<double>::make(8, 2, AttentionVariant::SA, rng);
  T64 xm = testutil::randn<double>(Shape{8}, rng);
  T64 xn = testutil::randn<double>(Shape{8}, rng);
  const double base = lsf::attention_weight(xm, xn, 2, 9, layer, 1);
  for (std::ptrdiff_t s : {1, 5, 40}) {
    const double shifted = lsf::attention_weight(xm, xn, 2 + s, 9 + s, layer, 1);
    CHECK(std::abs(shifted - base) <= 1e-10);
  }
}

TEST_CASE("sa_forward on a single token reduces to W_o W_v x") {
  auto rng = lsf::make_rng(59);
  auto layer = AttentionLayer<double>::make(8, 2, AttentionVariant::SA, rng);
  T64 x = testutil::randn<double>(Shape{1, 8}, rng);
  T64 y = lsf::sa_forward(x, layer);
  T64 want = lsf::linear_nobias(lsf::linear_nobias(x, layer.w_v), layer.w_o);
  CHECK(testutil::max_abs_diff(y, testutil::to_doubles(want)) <= 1e-14);
}

TEST_CASE("sa_forward rejects empty input") {
  auto rng = lsf::make_rng(61);
  auto layer = AttentionLayer<double>::make(8, 2, AttentionVariant::SA, rng);
  T64 x(Shape{0, 8});
  CHECK_THROWS_AS(lsf::sa_forward(x, layer), lsf::ShapeError);
}

TEST_CASE("sa_forward matches the double-loop oracle for short sequences") {
  auto rng = lsf::make_rng(67);
  for (std::size_t n : {1u, 2u, 5u, 8u}) {
    auto layer = AttentionLayer<double>::make(8, 2, AttentionVariant::SA, rng);
    T64 x = testutil::randn<double>(Shape{n, 8}, rng);
    T64 y = lsf::sa_forward(x, layer);
    auto want = attention_oracle(layer, x, /*linear=*/false, 0.0);
    CHECK(testutil::max_abs_diff(y, want) <= 1e-10);
  }
}

TEST_CASE("la_forward matches the literal double-sum oracle") {
  auto rng = lsf::make_rng(71);
  for (std::size_t n : {1u, 3u, 8u}) {
    auto layer = AttentionLayer<double>::make(8, 2, AttentionVariant::LA, rng);
    T64 x = testutil::randn<double>(Shape{n, 8}, rng);
    T64 y = lsf::la_forward(x, layer);
    auto want = attention_oracle(layer, x, /*linear=*/true, 0.0);
    CHECK(testutil::max_abs_diff(y, want) <= 1e-10);
  }
}

TEST_CASE("la_forward on one token returns roughly its value projection") {
  auto rng = lsf::make_rng(73);
  auto layer = AttentionLayer<double>::make(4, 1, AttentionVariant::LA, rng);
  // Identity output projection isolates the head result.
  layer.w_o = T64(Shape{4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  T64 x = testutil::randn<double>(Shape{1, 4}, rng);
  T64 y = lsf::la_forward(x, layer);
  T64 v = lsf::linear_nobias(x, layer.w_v);
  // out = den/(den+eps) * v with den = phi(q)^T phi(k) >= (small) > 0.
  for (std::size_t e = 0; e < 4; ++e) {
    CHECK(std::abs(y.at(0, e) - v.at(0, e)) <=
          1e-4 * std::max(1.0, std::abs(v.at(0, e))));
  }
}

TEST_CASE("both operators are invariant under a global position shift") {
  auto rng = lsf::make_rng(79);
  for (int trial = 0; trial < 5; ++trial) {
    auto sa = AttentionLayer<double>::make(8, 2, AttentionVariant::SA, rng);
    auto la = AttentionLayer<double>::make(8, 2, AttentionVariant::LA, rng);
    T64 x = testutil::randn<double>(Shape{6, 8}, rng);
    const std::ptrdiff_t shift = 1 + trial * 13;
    T64 sa0 = lsf::sa_forward(x, sa, 0), sa1 = lsf::sa_forward(x, sa, shift);
    T64 la0 = lsf::la_forward(x, la, 0), la1 = lsf::la_forward(x, la, shift);
    CHECK(testutil::max_abs_diff(sa0, testutil::to_doubles(sa1)) <= 1e-10);
    CHECK(testutil::max_abs_diff(la0, testutil::to_doubles(la1)) <= 1e-10);
  }
}

TEST_CASE("phi maps: defaults, positivity, and the relu underflow path") {
  T64 zero(Shape{1}, {0.0});
  T64 pz = lsf::phi(zero);
  CHECK(pz.at(0) == 1.0);

  auto rng = lsf::make_rng(83);
  T64 x = testutil::randn<double>(Shape{4, 4}, rng, 3.0);
  T64 px = lsf::phi(x);
  for (double v : px.values()) CHECK(v > 0.0);

  T64 neg(Shape{1}, {-3.0});
  T64 pr = lsf::phi(neg, lsf::PhiKind::Relu);
  CHECK(pr.at(0) == 0.0);

  // relu phi with eps = 0 can hit an exactly-zero denominator.
  auto layer = AttentionLayer<double>::make(4, 1, AttentionVariant::LA, rng,
                                            lsf::PhiKind::Relu, 0.0);
  T64 all_neg(Shape{2, 4}, -5.0);
  // Force projections that keep phi at zero: positive weights, negative input.
  layer.w_q = T64(Shape{4, 4}, 0.5);
  layer.w_k = T64(Shape{4, 4}, 0.5);
  CHECK_THROWS_WITH_AS(lsf::la_forward(all_neg, layer),
                       doctest::Contains("position"), lsf::NumericError);
}

TEST_CASE("variant mismatch raises a contract error") {
  auto rng = lsf::make_rng(89);
  auto sa = AttentionLayer<double>::make(8, 2, AttentionVariant::SA, rng);
  auto la = AttentionLayer<double>::make(8, 2, AttentionVariant::LA, rng);
  T64 x = testutil::randn<double>(Shape{3, 8}, rng);
  CHECK_THROWS_AS(lsf::la_forward(x, sa), lsf::ContractError);
  CHECK_THROWS_AS(lsf::sa_forward(x, la), lsf::ContractError);
}

TEST_CASE("layer construction validates head geometry") {
  auto rng = lsf::make_rng(97);
  CHECK_THROWS_AS(AttentionLayer<double>::make(10, 4, AttentionVariant::SA, rng),
                  lsf::ConfigError);
  // head_dim 3 is odd: rotation pairs do not fit.
  CHECK_THROWS_AS(AttentionLayer<double>::make(9, 3, AttentionVariant::SA, rng),
                  lsf::ConfigError);
}

TEST_CASE("attention gradients pass FD for both operators") {
  auto rng = lsf::make_rng(103);
  for (bool linear_attn : {false, true}) {
    auto layer = AttentionLayer<double>::make(
        8, 2, linear_attn ? AttentionVariant::LA : AttentionVariant::SA, rng);
    T64 x = testutil::randn<double>(Shape{5, 8}, rng);
    T64 w = testutil::randn<double>(Shape{5, 8}, rng);
    auto fn = [&]() -> T64 {
      T64 y = linear_attn ? lsf::la_forward(x, layer) : lsf::sa_forward(x, layer);
      return lsf::sum_all(lsf::mul(y, w));
    };
    auto rep = oracles::check_gradients<double>(
        {x, layer.w_q, layer.w_k, layer.w_v}, fn);
    CAPTURE(linear_attn);
    CHECK(rep.max_rel_err <= 1e-4);
  }
}

TEST_SUITE_END();
