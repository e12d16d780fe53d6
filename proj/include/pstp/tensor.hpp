#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pstp/errors.hpp"

namespace pstp {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <typename Real>
class Tape;

template <typename Real>
struct TensorStorage {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // same length as value once gradients are tracked
  bool requires_grad = false;
};

// Dense row-major tensor. Copies share storage (shallow, shared_ptr), which is
// what the pullback closures recorded on the tape rely on: they capture Tensor
// copies and accumulate into the shared grad buffers. Because a Tensor is a
// handle, constness of the handle does not propagate to the storage; accessors
// are const-qualified and hand out mutable references, like shared_ptr does.
template <typename Real>
class Tensor {
 public:
  using Storage = TensorStorage<Real>;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return Tensor(std::move(shape), /*fill=*/Real(0));
  }

  static Tensor full(Shape shape, Real v) { return Tensor(std::move(shape), v); }

  static Tensor scalar(Real v) { return Tensor(Shape{1}, v); }

  static Tensor from_data(Shape shape, std::vector<Real> data) {
    if (numel(shape) != static_cast<std::int64_t>(data.size()))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->value = std::move(data);
    return t;
  }

  bool defined() const { return static_cast<bool>(s_); }

  const Shape& shape() const { return s_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(s_->shape.size()); }
  std::int64_t dim(std::int64_t i) const { return s_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(s_->value.size()); }

  std::vector<Real>& value() const { return s_->value; }
  Real* data() const { return s_->value.data(); }

  // Element access for 2-d tensors (row-major); used mostly by tests and the
  // handful of spots where index arithmetic is clearer than an op.
  Real& at(std::int64_t r, std::int64_t c) const {
    return s_->value[static_cast<std::size_t>(r * s_->shape[1] + c)];
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  void set_requires_grad(bool b) const {
    s_->requires_grad = b;
    if (b) ensure_grad();
  }

  // Allocates (zeroed) grad storage if absent.
  void ensure_grad() const {
    if (s_->grad.size() != s_->value.size()) s_->grad.assign(s_->value.size(), Real(0));
  }

  bool has_grad() const { return s_ && s_->grad.size() == s_->value.size(); }

  std::vector<Real>& grad() const {
    if (!has_grad())
      throw NumericalError("gradient requested for tensor with no grad storage (shape " +
                           shape_str(s_->shape) + ")");
    return s_->grad;
  }

  void zero_grad() const {
    if (s_ && !s_->grad.empty()) s_->grad.assign(s_->value.size(), Real(0));
  }

  // Deep copy of values only; the copy tracks no gradients.
  Tensor detached_copy() const {
    return Tensor::from_data(s_->shape, s_->value);
  }

  // Identity of the underlying storage; lets callers check aliasing.
  const void* storage_id() const { return s_.get(); }

 private:
  Tensor(Shape shape, Real fill) {
    s_ = std::make_shared<Storage>();
    std::int64_t n = numel(shape);
    s_->shape = std::move(shape);
    s_->value.assign(static_cast<std::size_t>(n), fill);
  }

  std::shared_ptr<Storage> s_;
};

// Gradient tape: an ordered record of pullback closures, one per recorded
// primitive op, in forward construction order. backward() replays them in
// exact reverse construction order; because ops append at execution time,
// that reversal is a valid topological order of the data-flow graph.
template <typename Real>
class Tape {
 public:
  // The tape ops record onto; set via TapeScope. Null means "not recording"
  // (inference), which is what makes frozen-parameter inference safe to run
  // from many threads at once.
  static Tape*& active() {
    thread_local Tape* t = nullptr;
    return t;
  }

  void record(std::function<void()> pullback) {
    nodes_.push_back(std::move(pullback));
  }

  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays all pullbacks in reverse
  // construction order. Running a tape twice without reset() would
  // double-accumulate every gradient, so it is an error.
  void backward(Tensor<Real>& loss) {
    if (consumed_)
      throw NumericalError("backward() called twice on the same tape; call reset() first");
    if (loss.size() != 1)
      throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    consumed_ = true;
    loss.ensure_grad();
    loss.grad()[0] = Real(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

// RAII guard installing a tape as the active one for the current thread.
template <typename Real>
class TapeScope {
 public:
  explicit TapeScope(Tape<Real>& t) : prev_(Tape<Real>::active()) {
    Tape<Real>::active() = &t;
  }
  ~TapeScope() { Tape<Real>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Real>* prev_;
};

}  // namespace pstp
