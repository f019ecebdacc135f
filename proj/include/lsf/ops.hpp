#ifndef LSF_OPS_HPP
#define LSF_OPS_HPP

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "lsf/tensor.hpp"

namespace lsf {

enum class BnMode { Train, Eval };

namespace detail {

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
Eigen::Map<const EMat<S>> mat_view(const TensorImpl<S>& t, std::size_t rows,
                                   std::size_t cols) {
  return Eigen::Map<const EMat<S>>(t.value.data(), static_cast<Eigen::Index>(rows),
                                   static_cast<Eigen::Index>(cols));
}

template <typename S>
Eigen::Map<EMat<S>> mat_view_mut(std::vector<S>& v, std::size_t rows,
                                 std::size_t cols) {
  return Eigen::Map<EMat<S>>(v.data(), static_cast<Eigen::Index>(rows),
                             static_cast<Eigen::Index>(cols));
}

template <typename S>
std::vector<S>& grad_buf(const std::shared_ptr<TensorImpl<S>>& i) {
  if (!i->grad) i->grad.emplace(i->value.size(), S(0));
  return *i->grad;
}

template <typename S>
void require_rank(const Tensor<S>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(cat(what, " expects rank-", rank, " tensor, got ",
                         shape_str(t.shape())));
  }
}

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(cat(what, ": shape mismatch ", shape_str(a.shape()), " vs ",
                         shape_str(b.shape())));
  }
}

template <typename S, typename F>
void maybe_record(Tensor<S>& out, bool any_requires, F&& backprop) {
  if (Tape<S>* tape = active_tape<S>(); tape != nullptr && any_requires) {
    out.set_requires_grad(true);
    tape->record(out, std::forward<F>(backprop));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix product and transpose
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_rank(a, 2, "matmul lhs");
  detail::require_rank(b, 2, "matmul rhs");
  const std::size_t m = a.extent(0), k = a.extent(1);
  const std::size_t k2 = b.extent(0), p = b.extent(1);
  if (k != k2) {
    throw ShapeError(cat("matmul: inner extents differ, ", shape_str(a.shape()),
                         " vs ", shape_str(b.shape())));
  }
  Tensor<S> out(Shape{m, p});
  detail::mat_view_mut(out.impl()->value, m, p).noalias() =
      detail::mat_view(*a.impl(), m, k) * detail::mat_view(*b.impl(), k, p);
  detail::maybe_record(out, a.requires_grad() || b.requires_grad(),
                       [ai = a.impl(), bi = b.impl(), oi = out.impl(), m, k, p] {
                         Eigen::Map<const detail::EMat<S>> gm(
                             oi->grad->data(), static_cast<Eigen::Index>(m),
                             static_cast<Eigen::Index>(p));
                         if (ai->requires_grad) {
                           detail::mat_view_mut(detail::grad_buf(ai), m, k).noalias() +=
                               gm * detail::mat_view(*bi, k, p).transpose();
                         }
                         if (bi->requires_grad) {
                           detail::mat_view_mut(detail::grad_buf(bi), k, p).noalias() +=
                               detail::mat_view(*ai, m, k).transpose() * gm;
                         }
                       });
  return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.extent(0), n = a.extent(1);
  Tensor<S> out(Shape{n, m});
  detail::mat_view_mut(out.impl()->value, n, m).noalias() =
      detail::mat_view(*a.impl(), m, n).transpose();
  detail::maybe_record(out, a.requires_grad(), [ai = a.impl(), oi = out.impl(), m, n] {
    if (!ai->requires_grad) return;
    Eigen::Map<const detail::EMat<S>> gm(oi->grad->data(),
                                         static_cast<Eigen::Index>(n),
                                         static_cast<Eigen::Index>(m));
    detail::mat_view_mut(detail::grad_buf(ai), m, n).noalias() += gm.transpose();
  });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise binary ops (same shape)
// ---------------------------------------------------------------------------

namespace detail {

template <typename S, typename Fwd, typename Bwd>
Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b, const char* name,
                    Fwd fwd, Bwd bwd) {
  require_same_shape(a, b, name);
  Tensor<S> out(a.shape());
  auto ov = out.mutable_values();
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i], bv[i]);
  maybe_record(out, a.requires_grad() || b.requires_grad(),
               [ai = a.impl(), bi = b.impl(), oi = out.impl(), bwd] {
                 const auto& g = *oi->grad;
                 std::vector<S>* ga = ai->requires_grad ? &grad_buf(ai) : nullptr;
                 std::vector<S>* gb = bi->requires_grad ? &grad_buf(bi) : nullptr;
                 for (std::size_t i = 0; i < g.size(); ++i) {
                   auto [da, db] = bwd(ai->value[i], bi->value[i], g[i]);
                   if (ga) (*ga)[i] += da;
                   if (gb) (*gb)[i] += db;
                 }
               });
  return out;
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, "add", [](S x, S y) { return x + y; },
      [](S, S, S g) { return std::pair<S, S>(g, g); });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, "sub", [](S x, S y) { return x - y; },
      [](S, S, S g) { return std::pair<S, S>(g, -g); });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, "mul", [](S x, S y) { return x * y; },
      [](S x, S y, S g) { return std::pair<S, S>(g * y, g * x); });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename S, typename Fwd, typename Bwd>
Tensor<S> unary_op(const Tensor<S>& a, Fwd fwd, Bwd bwd_from_input) {
  Tensor<S> out(a.shape());
  auto ov = out.mutable_values();
  auto av = a.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i]);
  maybe_record(out, a.requires_grad(), [ai = a.impl(), oi = out.impl(), bwd_from_input] {
    if (!ai->requires_grad) return;
    const auto& g = *oi->grad;
    auto& ga = grad_buf(ai);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * bwd_from_input(ai->value[i], oi->value[i]);
    }
  });
  return out;
}

}  // namespace detail

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  return detail::unary_op(
      a, [c](S x) { return x * c; }, [c](S, S) { return c; });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  return detail::unary_op(
      a, [c](S x) { return x + c; }, [](S, S) { return S(1); });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return scale(a, S(-1));
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  return detail::unary_op(
      a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  return detail::unary_op(
      a,
      [](S x) {
        if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
        const S e = std::exp(x);
        return e / (S(1) + e);
      },
      [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  return detail::unary_op(
      a, [](S x) { return x > S(0) ? x : S(0); },
      [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

// elu(x) + 1: strictly positive, C1 continuous.
template <typename S>
Tensor<S> elu_plus_one(const Tensor<S>& a) {
  return detail::unary_op(
      a, [](S x) { return x >= S(0) ? x + S(1) : std::exp(x); },
      [](S x, S) { return x >= S(0) ? S(1) : std::exp(x); });
}

template <typename S>
Tensor<S> square(const Tensor<S>& a) {
  return detail::unary_op(
      a, [](S x) { return x * x; }, [](S x, S) { return S(2) * x; });
}

// 1 / sqrt(x + shift); throws if any x + shift <= 0.
template <typename S>
Tensor<S> rsqrt_shift(const Tensor<S>& a, S shift) {
  auto av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (!(av[i] + shift > S(0))) {
      throw NumericError(cat("rsqrt_shift: non-positive argument ", av[i] + shift,
                             " at index ", i));
    }
  }
  return detail::unary_op(
      a, [shift](S x) { return S(1) / std::sqrt(x + shift); },
      [shift](S x, S y) { return S(-0.5) * y / (x + shift); });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum_all(const Tensor<S>& a) {
  S acc = S(0);
  for (S v : a.values()) acc += v;
  Tensor<S> out = Tensor<S>::scalar(acc);
  detail::maybe_record(out, a.requires_grad(), [ai = a.impl(), oi = out.impl()] {
    if (!ai->requires_grad) return;
    const S g = (*oi->grad)[0];
    auto& ga = detail::grad_buf(ai);
    for (auto& v : ga) v += g;
  });
  return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& a) {
  return scale(sum_all(a), S(1) / static_cast<S>(a.size()));
}

// Per-column sums of a [T x C] matrix -> [C].
template <typename S>
Tensor<S> colwise_sum(const Tensor<S>& a) {
  detail::require_rank(a, 2, "colwise_sum");
  const std::size_t t = a.extent(0), c = a.extent(1);
  Tensor<S> out(Shape{c});
  auto ov = out.mutable_values();
  auto av = a.values();
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < c; ++j) ov[j] += av[i * c + j];
  detail::maybe_record(out, a.requires_grad(), [ai = a.impl(), oi = out.impl(), t, c] {
    if (!ai->requires_grad) return;
    const auto& g = *oi->grad;
    auto& ga = detail::grad_buf(ai);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j];
  });
  return out;
}

template <typename S>
Tensor<S> colwise_mean(const Tensor<S>& a) {
  return scale(colwise_sum(a), S(1) / static_cast<S>(a.extent(0)));
}

// Per-row sums of a [T x C] matrix -> [T].
template <typename S>
Tensor<S> rowwise_sum(const Tensor<S>& a) {
  detail::require_rank(a, 2, "rowwise_sum");
  const std::size_t t = a.extent(0), c = a.extent(1);
  Tensor<S> out(Shape{t});
  auto ov = out.mutable_values();
  auto av = a.values();
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < c; ++j) ov[i] += av[i * c + j];
  detail::maybe_record(out, a.requires_grad(), [ai = a.impl(), oi = out.impl(), t, c] {
    if (!ai->requires_grad) return;
    const auto& g = *oi->grad;
    auto& ga = detail::grad_buf(ai);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i];
  });
  return out;
}

template <typename S>
Tensor<S> rowwise_mean(const Tensor<S>& a) {
  return scale(rowwise_sum(a), S(1) / static_cast<S>(a.extent(1)));
}

// ---------------------------------------------------------------------------
// Broadcast ops: row vector v[C] against every row of x[T x C], column
// vector u[T] against every column of x[T x C].
// ---------------------------------------------------------------------------

namespace detail {

template <typename S, typename Fwd, typename BwdX, typename BwdV>
Tensor<S> rowvec_op(const Tensor<S>& x, const Tensor<S>& v, const char* name,
                    Fwd fwd, BwdX bx, BwdV bv) {
  require_rank(x, 2, name);
  require_rank(v, 1, name);
  const std::size_t t = x.extent(0), c = x.extent(1);
  if (v.extent(0) != c) {
    throw ShapeError(cat(name, ": vector length ", v.extent(0),
                         " does not match columns of ", shape_str(x.shape())));
  }
  Tensor<S> out(Shape{t, c});
  auto ov = out.mutable_values();
  auto xv = x.values();
  auto vv = v.values();
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < c; ++j) ov[i * c + j] = fwd(xv[i * c + j], vv[j]);
  maybe_record(out, x.requires_grad() || v.requires_grad(),
               [xi = x.impl(), vi = v.impl(), oi = out.impl(), t, c, bx, bv] {
                 const auto& g = *oi->grad;
                 std::vector<S>* gx = xi->requires_grad ? &grad_buf(xi) : nullptr;
                 std::vector<S>* gv = vi->requires_grad ? &grad_buf(vi) : nullptr;
                 for (std::size_t i = 0; i < t; ++i)
                   for (std::size_t j = 0; j < c; ++j) {
                     const std::size_t k = i * c + j;
                     if (gx) (*gx)[k] += bx(xi->value[k], vi->value[j], g[k]);
                     if (gv) (*gv)[j] += bv(xi->value[k], vi->value[j], g[k]);
                   }
               });
  return out;
}

template <typename S, typename Fwd, typename BwdX, typename BwdU>
Tensor<S> colvec_op(const Tensor<S>& x, const Tensor<S>& u, const char* name,
                    Fwd fwd, BwdX bx, BwdU bu) {
  require_rank(x, 2, name);
  require_rank(u, 1, name);
  const std::size_t t = x.extent(0), c = x.extent(1);
  if (u.extent(0) != t) {
    throw ShapeError(cat(name, ": vector length ", u.extent(0),
                         " does not match rows of ", shape_str(x.shape())));
  }
  Tensor<S> out(Shape{t, c});
  auto ov = out.mutable_values();
  auto xv = x.values();
  auto uv = u.values();
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < c; ++j) ov[i * c + j] = fwd(xv[i * c + j], uv[i]);
  maybe_record(out, x.requires_grad() || u.requires_grad(),
               [xi = x.impl(), ui = u.impl(), oi = out.impl(), t, c, bx, bu] {
                 const auto& g = *oi->grad;
                 std::vector<S>* gx = xi->requires_grad ? &grad_buf(xi) : nullptr;
                 std::vector<S>* gu = ui->requires_grad ? &grad_buf(ui) : nullptr;
                 for (std::size_t i = 0; i < t; ++i)
                   for (std::size_t j = 0; j < c; ++j) {
                     const std::size_t k = i * c + j;
                     if (gx) (*gx)[k] += bx(xi->value[k], ui->value[i], g[k]);
                     if (gu) (*gu)[i] += bu(xi->value[k], ui->value[i], g[k]);
                   }
               });
  return out;
}

}  // namespace detail

template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
  return detail::rowvec_op(
      x, v, "add_rowvec", [](S a, S b) { return a + b; },
      [](S, S, S g) { return g; }, [](S, S, S g) { return g; });
}

template <typename S>
Tensor<S> sub_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
  return detail::rowvec_op(
      x, v, "sub_rowvec", [](S a, S b) { return a - b; },
      [](S, S, S g) { return g; }, [](S, S, S g) { return -g; });
}

template <typename S>
Tensor<S> mul_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
  return detail::rowvec_op(
      x, v, "mul_rowvec", [](S a, S b) { return a * b; },
      [](S, S b, S g) { return g * b; }, [](S a, S, S g) { return g * a; });
}

template <typename S>
Tensor<S> sub_colvec(const Tensor<S>& x, const Tensor<S>& u) {
  return detail::colvec_op(
      x, u, "sub_colvec", [](S a, S b) { return a - b; },
      [](S, S, S g) { return g; }, [](S, S, S g) { return -g; });
}

template <typename S>
Tensor<S> mul_colvec(const Tensor<S>& x, const Tensor<S>& u) {
  return detail::colvec_op(
      x, u, "mul_colvec", [](S a, S b) { return a * b; },
      [](S, S b, S g) { return g * b; }, [](S a, S, S g) { return g * a; });
}

template <typename S>
Tensor<S> div_colvec(const Tensor<S>& x, const Tensor<S>& u) {
  return detail::colvec_op(
      x, u, "div_colvec", [](S a, S b) { return a / b; },
      [](S, S b, S g) { return g / b; },
      [](S a, S b, S g) { return -g * a / (b * b); });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw ShapeError(cat("reshape: cannot view ", shape_str(a.shape()), " as ",
                         shape_str(shape)));
  }
  Tensor<S> out(std::move(shape), std::vector<S>(a.values().begin(), a.values().end()));
  detail::maybe_record(out, a.requires_grad(), [ai = a.impl(), oi = out.impl()] {
    if (!ai->requires_grad) return;
    const auto& g = *oi->grad;
    auto& ga = detail::grad_buf(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
  return out;
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& x, std::size_t c0, std::size_t c1) {
  detail::require_rank(x, 2, "slice_cols");
  const std::size_t t = x.extent(0), c = x.extent(1);
  if (c0 > c1 || c1 > c) {
    throw ShapeError(cat("slice_cols: range [", c0, ", ", c1, ") out of ",
                         shape_str(x.shape())));
  }
  const std::size_t w = c1 - c0;
  Tensor<S> out(Shape{t, w});
  auto ov = out.mutable_values();
  auto xv = x.values();
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < w; ++j) ov[i * w + j] = xv[i * c + c0 + j];
  detail::maybe_record(out, x.requires_grad(),
                       [xi = x.impl(), oi = out.impl(), t, c, c0, w] {
                         if (!xi->requires_grad) return;
                         const auto& g = *oi->grad;
                         auto& gx = detail::grad_buf(xi);
                         for (std::size_t i = 0; i < t; ++i)
                           for (std::size_t j = 0; j < w; ++j)
                             gx[i * c + c0 + j] += g[i * w + j];
                       });
  return out;
}

template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty input list");
  const std::size_t t = parts[0].extent(0);
  std::size_t total = 0;
  bool any_req = false;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.extent(0) != t) {
      throw ShapeError(cat("concat_cols: row mismatch ", shape_str(p.shape())));
    }
    total += p.extent(1);
    any_req = any_req || p.requires_grad();
  }
  Tensor<S> out(Shape{t, total});
  auto ov = out.mutable_values();
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.extent(1);
    auto pv = p.values();
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < w; ++j) ov[i * total + off + j] = pv[i * w + j];
    off += w;
  }
  std::vector<std::shared_ptr<TensorImpl<S>>> impls;
  impls.reserve(parts.size());
  for (const auto& p : parts) impls.push_back(p.impl());
  detail::maybe_record(out, any_req, [impls, oi = out.impl(), t, total] {
    const auto& g = *oi->grad;
    std::size_t off = 0;
    for (const auto& pi : impls) {
      const std::size_t w = pi->shape[1];
      if (pi->requires_grad) {
        auto& gp = detail::grad_buf(pi);
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < w; ++j)
            gp[i * w + j] += g[i * total + off + j];
      }
      off += w;
    }
  });
  return out;
}

// Pick one entry of a rank-1 tensor as a scalar tensor.
template <typename S>
Tensor<S> select(const Tensor<S>& v, std::size_t index) {
  detail::require_rank(v, 1, "select");
  if (index >= v.extent(0)) {
    throw ShapeError(cat("select: index ", index, " out of ", shape_str(v.shape())));
  }
  Tensor<S> out = Tensor<S>::scalar(v.at(index));
  detail::maybe_record(out, v.requires_grad(), [vi = v.impl(), oi = out.impl(), index] {
    if (!vi->requires_grad) return;
    detail::grad_buf(vi)[index] += (*oi->grad)[0];
  });
  return out;
}

// Multiply a whole tensor by a scalar tensor (rank 0 or single element).
template <typename S>
Tensor<S> scale_by(const Tensor<S>& x, const Tensor<S>& s) {
  if (s.size() != 1) {
    throw ShapeError(cat("scale_by: scale must be scalar, got ", shape_str(s.shape())));
  }
  Tensor<S> out(x.shape());
  const S sv = s.values()[0];
  auto ov = out.mutable_values();
  auto xv = x.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * sv;
  detail::maybe_record(out, x.requires_grad() || s.requires_grad(),
                       [xi = x.impl(), si = s.impl(), oi = out.impl()] {
                         const auto& g = *oi->grad;
                         const S sv = si->value[0];
                         if (xi->requires_grad) {
                           auto& gx = detail::grad_buf(xi);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv;
                         }
                         if (si->requires_grad) {
                           S acc = S(0);
                           for (std::size_t i = 0; i < g.size(); ++i)
                             acc += g[i] * xi->value[i];
                           detail::grad_buf(si)[0] += acc;
                         }
                       });
  return out;
}

// Nearest-neighbour upsampling by 2 along rows, truncated to target_rows.
// target_rows must be 2n or 2n-1 for an n-row input.
template <typename S>
Tensor<S> repeat_rows_x2(const Tensor<S>& x, std::size_t target_rows) {
  detail::require_rank(x, 2, "repeat_rows_x2");
  const std::size_t n = x.extent(0), c = x.extent(1);
  if (target_rows + 1 < 2 * n || target_rows > 2 * n) {
    throw ContractError(cat("repeat_rows_x2: target rows ", target_rows,
                            " incompatible with input rows ", n));
  }
  Tensor<S> out(Shape{target_rows, c});
  auto ov = out.mutable_values();
  auto xv = x.values();
  for (std::size_t i = 0; i < target_rows; ++i)
    for (std::size_t j = 0; j < c; ++j) ov[i * c + j] = xv[(i / 2) * c + j];
  detail::maybe_record(out, x.requires_grad(),
                       [xi = x.impl(), oi = out.impl(), target_rows, c] {
                         if (!xi->requires_grad) return;
                         const auto& g = *oi->grad;
                         auto& gx = detail::grad_buf(xi);
                         for (std::size_t i = 0; i < target_rows; ++i)
                           for (std::size_t j = 0; j < c; ++j)
                             gx[(i / 2) * c + j] += g[i * c + j];
                       });
  return out;
}

// ---------------------------------------------------------------------------
// Softmax along an arbitrary axis, max-subtracted for stability.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis = -1) {
  const std::size_t r = x.rank();
  if (r == 0) throw ShapeError("softmax: scalar input has no axis");
  const std::size_t ax = axis < 0 ? r + static_cast<std::size_t>(axis + 1) - 1
                                  : static_cast<std::size_t>(axis);
  if (ax >= r) {
    throw ShapeError(cat("softmax: axis ", axis, " out of rank ", r));
  }
  const std::size_t n = x.extent(ax);
  if (n < 1) throw ShapeError("softmax: empty axis");
  std::size_t inner = 1, outer = 1;
  for (std::size_t i = ax + 1; i < r; ++i) inner *= x.extent(i);
  for (std::size_t i = 0; i < ax; ++i) outer *= x.extent(i);

  Tensor<S> out(x.shape());
  auto ov = out.mutable_values();
  auto xv = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      S m = xv[base];
      for (std::size_t j = 1; j < n; ++j) {
        const S v = xv[base + j * inner];
        if (v > m) m = v;
      }
      S sum = S(0);
      for (std::size_t j = 0; j < n; ++j) {
        const S e = std::exp(xv[base + j * inner] - m);
        ov[base + j * inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < n; ++j) ov[base + j * inner] /= sum;
    }
  }
  detail::maybe_record(
      out, x.requires_grad(), [xi = x.impl(), oi = out.impl(), n, inner, outer] {
        if (!xi->requires_grad) return;
        const auto& g = *oi->grad;
        const auto& y = oi->value;
        auto& gx = detail::grad_buf(xi);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            S dot = S(0);
            for (std::size_t j = 0; j < n; ++j)
              dot += g[base + j * inner] * y[base + j * inner];
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t k = base + j * inner;
              gx[k] += (g[k] - dot) * y[k];
            }
          }
        }
      });
  return out;
}

// ---------------------------------------------------------------------------
// 1-D convolutions over the time axis (cross-correlation convention).
// ---------------------------------------------------------------------------

// Depthwise: x[T x C] * kernel[k x C] + bias[C] -> [To x C],
// To = (T + pad_left + pad_right - k) / stride + 1 with zero padding.
template <typename S>
Tensor<S> depthwise_conv1d(const Tensor<S>& x, const Tensor<S>& kernel,
                           const Tensor<S>& bias, std::size_t pad_left,
                           std::size_t pad_right, std::size_t stride = 1) {
  detail::require_rank(x, 2, "depthwise_conv1d input");
  detail::require_rank(kernel, 2, "depthwise_conv1d kernel");
  detail::require_rank(bias, 1, "depthwise_conv1d bias");
  const std::size_t t = x.extent(0), c = x.extent(1);
  const std::size_t k = kernel.extent(0);
  if (kernel.extent(1) != c || bias.extent(0) != c) {
    throw ShapeError(cat("depthwise_conv1d: channel mismatch, input ",
                         shape_str(x.shape()), " kernel ", shape_str(kernel.shape()),
                         " bias ", shape_str(bias.shape())));
  }
  if (k < 1) throw ShapeError("depthwise_conv1d: empty kernel");
  if (k > t + pad_left + pad_right) {
    throw ShapeError(cat("depthwise_conv1d: kernel size ", k,
                         " exceeds padded input length ", t + pad_left + pad_right));
  }
  const std::size_t to = (t + pad_left + pad_right - k) / stride + 1;
  Tensor<S> out(Shape{to, c});
  auto ov = out.mutable_values();
  auto xv = x.values();
  auto kv = kernel.values();
  auto bv = bias.values();
  for (std::size_t i = 0; i < to; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      S acc = bv[ch];
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t src =
            static_cast<std::ptrdiff_t>(i * stride + j) -
            static_cast<std::ptrdiff_t>(pad_left);
        if (src >= 0 && src < static_cast<std::ptrdiff_t>(t)) {
          acc += kv[j * c + ch] * xv[static_cast<std::size_t>(src) * c + ch];
        }
      }
      ov[i * c + ch] = acc;
    }
  }
  detail::maybe_record(
      out, x.requires_grad() || kernel.requires_grad() || bias.requires_grad(),
      [xi = x.impl(), ki = kernel.impl(), bi = bias.impl(), oi = out.impl(), t, c, k,
       to, pad_left, stride] {
        const auto& g = *oi->grad;
        std::vector<S>* gx = xi->requires_grad ? &detail::grad_buf(xi) : nullptr;
        std::vector<S>* gk = ki->requires_grad ? &detail::grad_buf(ki) : nullptr;
        std::vector<S>* gb = bi->requires_grad ? &detail::grad_buf(bi) : nullptr;
        for (std::size_t i = 0; i < to; ++i) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const S go = g[i * c + ch];
            if (gb) (*gb)[ch] += go;
            for (std::size_t j = 0; j < k; ++j) {
              const std::ptrdiff_t src =
                  static_cast<std::ptrdiff_t>(i * stride + j) -
                  static_cast<std::ptrdiff_t>(pad_left);
              if (src < 0 || src >= static_cast<std::ptrdiff_t>(t)) continue;
              const std::size_t xs = static_cast<std::size_t>(src) * c + ch;
              if (gk) (*gk)[j * c + ch] += go * xi->value[xs];
              if (gx) (*gx)[xs] += go * ki->value[j * c + ch];
            }
          }
        }
      });
  return out;
}

// Full conv: x[T x Cin] * kernel[k x Cin x Cout] + bias[Cout] -> [To x Cout].
template <typename S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>& bias,
                 std::size_t pad_left, std::size_t pad_right, std::size_t stride = 1) {
  detail::require_rank(x, 2, "conv1d input");
  detail::require_rank(kernel, 3, "conv1d kernel");
  detail::require_rank(bias, 1, "conv1d bias");
  const std::size_t t = x.extent(0), cin = x.extent(1);
  const std::size_t k = kernel.extent(0), kin = kernel.extent(1),
                    cout = kernel.extent(2);
  if (kin != cin || bias.extent(0) != cout) {
    throw ShapeError(cat("conv1d: channel mismatch, input ", shape_str(x.shape()),
                         " kernel ", shape_str(kernel.shape())));
  }
  if (k > t + pad_left + pad_right) {
    throw ShapeError(cat("conv1d: kernel size ", k, " exceeds padded input length ",
                         t + pad_left + pad_right));
  }
  const std::size_t to = (t + pad_left + pad_right - k) / stride + 1;
  Tensor<S> out(Shape{to, cout});
  auto ov = out.mutable_values();
  auto xv = x.values();
  auto kv = kernel.values();
  auto bv = bias.values();
  for (std::size_t i = 0; i < to; ++i) {
    for (std::size_t co = 0; co < cout; ++co) ov[i * cout + co] = bv[co];
    for (std::size_t j = 0; j < k; ++j) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i * stride + j) -
                                 static_cast<std::ptrdiff_t>(pad_left);
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(t)) continue;
      const S* xrow = &xv[static_cast<std::size_t>(src) * cin];
      const S* krow = &kv[j * cin * cout];
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const S xc = xrow[ci];
        const S* kk = &krow[ci * cout];
        for (std::size_t co = 0; co < cout; ++co) ov[i * cout + co] += xc * kk[co];
      }
    }
  }
  detail::maybe_record(
      out, x.requires_grad() || kernel.requires_grad() || bias.requires_grad(),
      [xi = x.impl(), ki = kernel.impl(), bi = bias.impl(), oi = out.impl(), t, cin,
       cout, k, to, pad_left, stride] {
        const auto& g = *oi->grad;
        std::vector<S>* gx = xi->requires_grad ? &detail::grad_buf(xi) : nullptr;
        std::vector<S>* gk = ki->requires_grad ? &detail::grad_buf(ki) : nullptr;
        std::vector<S>* gb = bi->requires_grad ? &detail::grad_buf(bi) : nullptr;
        for (std::size_t i = 0; i < to; ++i) {
          if (gb) {
            for (std::size_t co = 0; co < cout; ++co)
              (*gb)[co] += g[i * cout + co];
          }
          for (std::size_t j = 0; j < k; ++j) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i * stride + j) -
                                       static_cast<std::ptrdiff_t>(pad_left);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(t)) continue;
            const std::size_t xbase = static_cast<std::size_t>(src) * cin;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const std::size_t kbase = (j * cin + ci) * cout;
              for (std::size_t co = 0; co < cout; ++co) {
                const S go = g[i * cout + co];
                if (gk) (*gk)[kbase + co] += go * xi->value[xbase + ci];
                if (gx) (*gx)[xbase + ci] += go * ki->value[kbase + co];
              }
            }
          }
        }
      });
  return out;
}

// SAME padding for a stride-1 conv of width k: output length equals input
// length, the heavier pad goes left.
inline std::pair<std::size_t, std::size_t> same_pads(std::size_t k) {
  return {k / 2, (k - 1) / 2};
}

// SAME padding for strided convs: output length is ceil(T / stride).
inline std::pair<std::size_t, std::size_t> same_pads_strided(std::size_t t,
                                                             std::size_t k,
                                                             std::size_t stride) {
  const std::size_t out = (t + stride - 1) / stride;
  const std::size_t needed = (out - 1) * stride + k;
  const std::size_t total = needed > t ? needed - t : 0;
  const std::size_t right = total / 2;
  return {total - right, right};
}

// ---------------------------------------------------------------------------
// Normalisation and gated activations
// ---------------------------------------------------------------------------

// Batch normalisation over the row (time) axis of x[T x C]. Train mode uses
// batch statistics and, when update_running is set, folds them into the
// running buffers with the configured momentum (unbiased variance, PyTorch
// convention). Eval mode applies the affine map implied by the running stats.
template <typename S>
Tensor<S> batchnorm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                    Tensor<S>& running_mean, Tensor<S>& running_var, S eps,
                    BnMode mode, S momentum = S(0.1), bool update_running = true) {
  detail::require_rank(x, 2, "batchnorm input");
  const std::size_t t = x.extent(0), c = x.extent(1);
  if (gamma.extent(0) != c || beta.extent(0) != c || running_mean.extent(0) != c ||
      running_var.extent(0) != c) {
    throw ShapeError(cat("batchnorm: per-channel parameter shapes do not match ",
                         shape_str(x.shape())));
  }
  if (!(eps > S(0))) throw NumericError("batchnorm: eps must be positive");

  if (mode == BnMode::Eval) {
    auto rv = running_var.values();
    for (std::size_t j = 0; j < c; ++j) {
      if (!(rv[j] + eps > S(0))) {
        throw NumericError(cat("batchnorm: non-positive variance ", rv[j] + eps,
                               " at channel ", j));
      }
    }
    Tensor<S> inv = rsqrt_shift(running_var, eps);
    Tensor<S> centered = sub_rowvec(x, running_mean);
    return add_rowvec(mul_rowvec(centered, mul(gamma, inv)), beta);
  }

  if (t < 1) throw ShapeError("batchnorm: empty batch in train mode");
  Tensor<S> mu = colwise_mean(x);
  Tensor<S> centered = sub_rowvec(x, mu);
  Tensor<S> var = colwise_mean(square(centered));
  Tensor<S> inv = rsqrt_shift(var, eps);
  Tensor<S> y = add_rowvec(mul_rowvec(mul_rowvec(centered, inv), gamma), beta);

  if (update_running) {
    auto rm = running_mean.mutable_values();
    auto rv = running_var.mutable_values();
    auto mv = mu.values();
    auto vv = var.values();
    const S unbias = t > 1 ? static_cast<S>(t) / static_cast<S>(t - 1) : S(1);
    for (std::size_t j = 0; j < c; ++j) {
      rm[j] = (S(1) - momentum) * rm[j] + momentum * mv[j];
      rv[j] = (S(1) - momentum) * rv[j] + momentum * vv[j] * unbias;
    }
  }
  return y;
}

// GLU over the last axis: split into halves a,b and return a * sigmoid(b).
template <typename S>
Tensor<S> glu(const Tensor<S>& x) {
  detail::require_rank(x, 2, "glu");
  const std::size_t c2 = x.extent(1);
  if (c2 % 2 != 0) {
    throw ShapeError(cat("glu: last extent must be even, got ", shape_str(x.shape())));
  }
  const std::size_t c = c2 / 2;
  Tensor<S> a = slice_cols(x, 0, c);
  Tensor<S> b = slice_cols(x, c, c2);
  return mul(a, sigmoid(b));
}

template <typename S>
Tensor<S> swish(const Tensor<S>& x) {
  return mul(x, sigmoid(x));
}

// Layer normalisation over the last axis of x[N x d].
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-5)) {
  detail::require_rank(x, 2, "layer_norm");
  const std::size_t d = x.extent(1);
  if (gamma.extent(0) != d || beta.extent(0) != d) {
    throw ShapeError(cat("layer_norm: parameter length does not match ",
                         shape_str(x.shape())));
  }
  Tensor<S> mu = rowwise_mean(x);
  Tensor<S> centered = sub_colvec(x, mu);
  Tensor<S> var = rowwise_mean(square(centered));
  Tensor<S> inv = rsqrt_shift(var, eps);
  Tensor<S> y = mul_colvec(centered, inv);
  return add_rowvec(mul_rowvec(y, gamma), beta);
}

// y = x W^T + b with W stored [out x in], the usual projection-layer layout.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  Tensor<S> y = matmul(x, transpose(w));
  return add_rowvec(y, b);
}

template <typename S>
Tensor<S> linear_nobias(const Tensor<S>& x, const Tensor<S>& w) {
  return matmul(x, transpose(w));
}

// Mean squared error between two same-shape tensors.
template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
  return mean_all(square(sub(a, b)));
}

}  // namespace lsf

#endif  // LSF_OPS_HPP
