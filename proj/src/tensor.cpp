#include "uasr/tensor.hpp"

#include <cmath>
#include <sstream>

namespace uasr {

int64_t shape_numel(const Shape& shape) {
  if (shape.empty()) throw ShapeError("shape must have at least one extent");
  int64_t n = 1;
  for (int64_t e : shape) {
    if (e <= 0)
      throw ShapeError("shape " + shape_str(shape) +
                       " has a non-positive extent");
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  int64_t n = shape_numel(shape);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<std::size_t>(n), value);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->grad.assign(static_cast<std::size_t>(n), 0.0);
  return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(data.size()))
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->grad.assign(static_cast<std::size_t>(n), 0.0);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return impl_->shape;
}

int64_t Tensor::numel() const {
  return static_cast<int64_t>(shape().empty() ? 0 : impl_->data.size());
}

int64_t Tensor::ndim() const { return static_cast<int64_t>(shape().size()); }

int64_t Tensor::rows() const {
  if (ndim() != 2)
    throw ShapeError("expected a 2-d tensor, got " + shape_str(shape()));
  return impl_->shape[0];
}

int64_t Tensor::cols() const {
  if (ndim() != 2)
    throw ShapeError("expected a 2-d tensor, got " + shape_str(shape()));
  return impl_->shape[1];
}

double Tensor::at2(int64_t r, int64_t c) const {
  return impl_->data[static_cast<std::size_t>(r * cols() + c)];
}

std::span<const double> Tensor::data() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1)
    throw ShapeError("item() requires a one-element tensor, got " +
                     shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

std::span<const double> Tensor::grad() const {
  if (!requires_grad())
    throw ContractError("grad slot absent: tensor does not require grad");
  return impl_->grad;
}

std::span<double> Tensor::grad_mut() {
  if (!requires_grad())
    throw ContractError("grad slot absent: tensor does not require grad");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (requires_grad()) impl_->grad.assign(impl_->data.size(), 0.0);
}

void Tensor::enable_grad() {
  if (!impl_) throw ContractError("use of an undefined tensor");
  if (!impl_->requires_grad) {
    impl_->requires_grad = true;
    impl_->grad.assign(impl_->data.size(), 0.0);
  }
}

bool Tensor::all_finite() const {
  for (double v : data())
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::check_finite(const std::string& what) const {
  const auto d = data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i]))
      throw NumericError(what + ": non-finite value at flat index " +
                         std::to_string(i));
  }
}

void Tape::record(Tensor& out, std::function<void()> backward_fn) {
  out.enable_grad();
  records_.push_back(std::move(backward_fn));
}

void backward(const Tensor& loss, Tape& tape) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward: loss must be a defined scalar tensor");
  if (!loss.requires_grad())
    throw ContractError("backward: loss was not produced through the tape");
  if (tape.consumed_)
    throw ContractError("backward: tape already consumed; build a new tape");
  tape.consumed_ = true;
  loss.impl()->grad[0] += 1.0;
  for (auto it = tape.records_.rbegin(); it != tape.records_.rend(); ++it)
    (*it)();
}

}  // namespace uasr
