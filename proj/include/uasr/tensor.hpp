#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "uasr/error.hpp"

namespace uasr {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool same_shape(const Shape& a, const Shape& b);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // allocated iff requires_grad, same length as data
};
}  // namespace detail

// Dense row-major tensor of doubles. A Tensor is a cheap shared handle;
// the underlying values are immutable after construction except for the
// grad slot and explicit parameter updates through mutable_data().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const;
  int64_t ndim() const;
  // 2-d accessors; throw ShapeError when the rank does not match.
  int64_t rows() const;
  int64_t cols() const;
  double at2(int64_t r, int64_t c) const;

  std::span<const double> data() const;
  std::span<double> mutable_data();  // optimizer updates only
  double item() const;               // value of a one-element tensor

  bool requires_grad() const;
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad();
  // Promotes a freshly built op output onto the tape: sets requires_grad
  // and allocates a zeroed grad slot.
  void enable_grad();

  // Throws NumericError naming `what` and the first bad index on NaN/Inf.
  void check_finite(const std::string& what) const;
  bool all_finite() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  std::shared_ptr<detail::TensorImpl> impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Ordered record of executed differentiable operations. Ops append records
// in execution order, which is a topological order of the value graph by
// construction; backward() replays the records once, in reverse.
class Tape {
 public:
  void record(Tensor& out, std::function<void()> backward_fn);
  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

  friend void backward(const Tensor& loss, Tape& tape);

 private:
  std::vector<std::function<void()>> records_;
  bool consumed_ = false;
};

// Accumulates d(loss)/d(tensor) into the grad slot of every requires_grad
// tensor reachable from `loss` through `tape`. The tape is single-use.
void backward(const Tensor& loss, Tape& tape);

}  // namespace uasr
