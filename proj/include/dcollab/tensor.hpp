#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dcollab/errors.hpp"

namespace dcollab {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

// Forward vs. evaluation semantics for layers with batch statistics.
enum class Mode { kTrain, kEval };

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated on demand, same length as data
  bool requires_grad = false;

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Dense N-dimensional array handle with an optional gradient record.
// Copying a Tensor copies the handle, not the storage; `clone` deep-copies.
// Values are immutable after a forward pass by convention -- only `grad`
// accumulates during backward, and only the optimizer writes to parameter
// data (externally synchronized).
template <typename T>
class Tensor {
 public:
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape) { return filled(std::move(shape), T(0)); }

  static Tensor filled(Shape shape, T value) {
    validate_shape(shape);
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
    t.impl_->shape = std::move(shape);
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<T> values) {
    validate_shape(shape);
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
      throw ShapeError("tensor: shape " + shape_to_string(shape) +
                       " does not match value count " +
                       std::to_string(values.size()));
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    return t;
  }

  static Tensor scalar(T value) { return from_data({1}, {value}); }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::int64_t dim(std::size_t i) const { return impl_->shape[i]; }
  std::int64_t numel() const { return impl_ ? impl_->numel() : 0; }

  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }
  std::vector<T>& values() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  T item() const {
    if (numel() != 1)
      throw UsageError("item: tensor with " + std::to_string(numel()) +
                       " elements is not a scalar");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::vector<T>& grad() { return impl_->ensure_grad(); }
  const std::vector<T>& grad() const { return impl_->grad; }

  void zero_grad() {
    if (impl_ && !impl_->grad.empty())
      impl_->grad.assign(impl_->data.size(), T(0));
  }

  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<Impl>(*impl_);
    return t;
  }

  const std::shared_ptr<Impl>& impl() const { return impl_; }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty())
      throw ShapeError("tensor: rank-0 shapes are not supported");
    for (auto d : shape)
      if (d <= 0)
        throw ShapeError("tensor: non-positive dimension in " +
                         shape_to_string(shape));
  }

  std::shared_ptr<Impl> impl_;
};

// Eager-recorded computation graph for one forward pass. Operations push
// their adjoint closures in execution order together with their output
// storage; backward() replays the closures in reverse, so every input
// precedes its consumers on the record. The tape is discarded when the guard
// object goes out of scope.
//
// Usage: construct a GradTape on the stack around the forward pass, then call
// backward(loss). Ops consult GradTape::current(); with no live tape (or an
// inner NoGradScope), nothing is recorded and no tensor requires grad.
template <typename T>
class GradTape {
 public:
  using ImplPtr = std::shared_ptr<detail::TensorImpl<T>>;

  GradTape() : prev_(current_slot()) { current_slot() = this; }
  ~GradTape() { current_slot() = prev_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* current() { return current_slot(); }

  // Swap the active tape; used by NoGradScope to disable recording.
  static GradTape* swap_current(GradTape* next) {
    GradTape* prev = current_slot();
    current_slot() = next;
    return prev;
  }

  void record(std::function<void()> adjoint, ImplPtr output) {
    nodes_.push_back(std::move(adjoint));
    outputs_.push_back({std::move(output)});
  }

  void record(std::function<void()> adjoint, std::vector<ImplPtr> outputs) {
    nodes_.push_back(std::move(adjoint));
    outputs_.push_back(std::move(outputs));
  }

  std::size_t size() const { return nodes_.size(); }

  // Visits each recorded operation exactly once, in reverse, after resetting
  // the intermediates' adjoint buffers and seeding d(loss)/d(loss) = 1.
  // Leaf gradients accumulate: a second backward() without zero_grad adds
  // another unit pass.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw UsageError("backward: loss must be scalar, got shape " +
                       shape_to_string(loss.shape()));
    for (const auto& outs : outputs_)
      for (const auto& impl : outs)
        if (!impl->grad.empty()) impl->grad.assign(impl->data.size(), T(0));
    loss.impl()->ensure_grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  static GradTape*& current_slot() {
    thread_local GradTape* slot = nullptr;
    return slot;
  }

  std::vector<std::function<void()>> nodes_;
  std::vector<std::vector<ImplPtr>> outputs_;
  GradTape* prev_;
};

// Suppresses recording within a live tape, e.g. for evaluation passes inside
// a training run.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : saved_(GradTape<T>::swap_current(nullptr)) {}
  ~NoGradScope() { GradTape<T>::swap_current(saved_); }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradTape<T>* saved_;
};

}  // namespace dcollab
