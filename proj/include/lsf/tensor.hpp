#ifndef LSF_TENSOR_HPP
#define LSF_TENSOR_HPP

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "lsf/common.hpp"

namespace lsf {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

template <typename S>
struct TensorImpl {
  Shape shape;
  std::vector<S> value;
  std::optional<std::vector<S>> grad;
  bool requires_grad = false;
};

template <typename S>
class Tape;

template <typename S>
Tape<S>* active_tape();

// Dense row-major tensor with value semantics over a shared payload.
// Copies are cheap handles; the payload is immutable after construction
// except for gradient accumulation and explicit mutable_values() access
// (used by optimizers between forward passes).
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() : impl_(std::make_shared<TensorImpl<S>>()) {}

  explicit Tensor(Shape shape, S fill = S(0))
      : impl_(std::make_shared<TensorImpl<S>>()) {
    impl_->shape = std::move(shape);
    impl_->value.assign(shape_numel(impl_->shape), fill);
  }

  Tensor(Shape shape, std::vector<S> values)
      : impl_(std::make_shared<TensorImpl<S>>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError(cat("tensor data size ", values.size(),
                           " does not match shape ", shape_str(shape)));
    }
    impl_->shape = std::move(shape);
    impl_->value = std::move(values);
  }

  static Tensor scalar(S v) { return Tensor(Shape{}, std::vector<S>{v}); }

  static Tensor from_impl(std::shared_ptr<TensorImpl<S>> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->value.size(); }
  std::size_t extent(std::size_t axis) const { return impl_->shape.at(axis); }

  std::span<const S> values() const { return impl_->value; }
  std::span<S> mutable_values() { return impl_->value; }

  S at(std::size_t i) const { return impl_->value.at(i); }
  S at(std::size_t r, std::size_t c) const {
    return impl_->value.at(r * impl_->shape.at(1) + c);
  }

  S item() const {
    if (size() != 1) {
      throw ContractError(cat("item() on non-scalar tensor ",
                              shape_str(impl_->shape)));
    }
    return impl_->value[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return impl_->grad.has_value(); }
  std::span<const S> grad() const {
    if (!impl_->grad) {
      throw ContractError("grad() requested but no gradient has been accumulated");
    }
    return *impl_->grad;
  }
  std::span<S> grad_or_alloc() {
    if (!impl_->grad) impl_->grad.emplace(impl_->value.size(), S(0));
    return *impl_->grad;
  }
  void zero_grad() { impl_->grad.reset(); }

  // Deep copy of the payload (grad not copied).
  Tensor clone() const {
    Tensor t;
    t.impl_->shape = impl_->shape;
    t.impl_->value = impl_->value;
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
  }

  const std::shared_ptr<TensorImpl<S>>& impl() const { return impl_; }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorImpl<S>> impl_;
};

// Reverse-mode tape. Ops record one node per call while a TapeScope is
// active and at least one input requires grad; backward() replays the
// nodes in reverse recording order exactly once. Nodes whose output never
// received a gradient are skipped, so unreachable subgraphs stay untouched.
template <typename S>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const Tensor<S>& out, std::function<void()> backprop) {
    records_.push_back({out.impl(), std::move(backprop)});
  }

  std::size_t node_count() const { return records_.size(); }

  void backward(const Tensor<S>& loss) {
    if (loss.size() != 1) {
      throw ContractError(cat("backward() requires a scalar loss, got ",
                              shape_str(loss.shape())));
    }
    // Non-leaf grads are per-sweep scratch; only leaves accumulate across
    // repeated backward calls.
    for (auto& r : records_) r.out->grad.reset();
    loss.impl()->grad.emplace(1, S(1));
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->out->grad.has_value()) it->backprop();
    }
  }

 private:
  struct Record {
    std::shared_ptr<TensorImpl<S>> out;
    std::function<void()> backprop;
  };
  std::vector<Record> records_;
};

namespace detail {
template <typename S>
inline Tape<S>*& tape_slot() {
  thread_local Tape<S>* slot = nullptr;
  return slot;
}
}  // namespace detail

template <typename S>
Tape<S>* active_tape() {
  return detail::tape_slot<S>();
}

// Explicit per-thread activation; no tape is ever active unless a scope is
// open on the current thread.
template <typename S>
class TapeScope {
 public:
  explicit TapeScope(Tape<S>& tape) : prev_(detail::tape_slot<S>()) {
    detail::tape_slot<S>() = &tape;
  }
  ~TapeScope() { detail::tape_slot<S>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<S>* prev_;
};

template <typename S>
void backward(Tape<S>& tape, const Tensor<S>& loss) {
  tape.backward(loss);
}

}  // namespace lsf

#endif  // LSF_TENSOR_HPP
