#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "uasr/ops.hpp"
#include "uasr/rng.hpp"
#include "uasr/tensor.hpp"

namespace uasr::test {

inline Tensor random_tensor(Shape shape, RngStream& rng, double scale = 1.0,
                            bool requires_grad = true) {
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
  for (double& v : data) v = rng.uniform(-scale, scale);
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

// sum(y * w) as a differentiable scalar, for reducing any op output.
inline Tensor reduce_weighted(const Tensor& y, const Tensor& w, Tape* tape) {
  Tensor prod = mul(y, w, tape);
  int64_t n = prod.numel();
  Tensor flat = reshape(prod, {1, n}, tape);
  Tensor ones = Tensor::full({n, 1}, 1.0);
  return matmul(flat, ones, tape);
}

// Central-difference check of d(f)/d(each element of wrt). `f` must rebuild
// the same graph from the same tensor handles on every call; it sees the
// perturbed values through them. Returns the worst relative error.
inline double max_grad_rel_err(const std::vector<Tensor>& wrt,
                               const std::function<Tensor(Tape*)>& f,
                               double h = 1e-5) {
  for (Tensor t : wrt) t.zero_grad();
  Tape tape;
  Tensor loss = f(&tape);
  backward(loss, tape);
  std::vector<std::vector<double>> analytic;
  for (const Tensor& t : wrt)
    analytic.emplace_back(t.grad().begin(), t.grad().end());

  double worst = 0.0;
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    Tensor t = wrt[ti];
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      double keep = data[i];
      data[i] = keep + h;
      double lp = f(nullptr).item();
      data[i] = keep - h;
      double lm = f(nullptr).item();
      data[i] = keep;
      double numeric = (lp - lm) / (2.0 * h);
      double a = analytic[ti][i];
      double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-3});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
  }
  return worst;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i)
    worst = std::max(worst, std::fabs(ad[i] - bd[i]));
  return worst;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i)
    if (ad[i] != bd[i]) return false;
  return true;
}

}  // namespace uasr::test
