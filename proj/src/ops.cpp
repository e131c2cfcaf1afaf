#include "uasr/ops.hpp"

#include <cmath>
#include <cstring>

namespace uasr {

namespace {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

bool track(const Tape* tape, std::initializer_list<const Tensor*> ins) {
  if (!tape) return false;
  for (const Tensor* t : ins)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

void require_2d(const Tensor& t, const char* who) {
  if (t.ndim() != 2)
    throw ShapeError(std::string(who) + ": expected a 2-d tensor, got " +
                     shape_str(t.shape()));
}

// [rows, cols] view of any tensor, treating the last extent as columns.
std::pair<int64_t, int64_t> rowcol_view(const Tensor& t) {
  const Shape& s = t.shape();
  int64_t cols = s.back();
  int64_t rows = t.numel() / cols;
  return {rows, cols};
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  if (!same_shape(a.shape(), b.shape()))
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  if (track(tape, {&a, &b})) {
    ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr(), yi = y.impl_ptr();
    tape->record(y, [ai, bi, yi] {
      const auto& g = yi->grad;
      if (ai->requires_grad)
        for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
      if (bi->requires_grad)
        for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i];
    });
  }
  return y;
}

Tensor add_rowvec(const Tensor& a, const Tensor& b, Tape* tape) {
  auto [rows, cols] = rowcol_view(a);
  if (b.ndim() != 1 || b.shape()[0] != cols)
    throw ShapeError("add_rowvec: " + shape_str(a.shape()) + " + " +
                     shape_str(b.shape()));
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) out[r * cols + c] += bd[c];
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  if (track(tape, {&a, &b})) {
    ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr(), yi = y.impl_ptr();
    tape->record(y, [ai, bi, yi, rows, cols] {
      const auto& g = yi->grad;
      if (ai->requires_grad)
        for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
      if (bi->requires_grad)
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t c = 0; c < cols; ++c) bi->grad[c] += g[r * cols + c];
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
  if (!same_shape(a.shape(), b.shape()))
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<double> out(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  if (track(tape, {&a, &b})) {
    ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr(), yi = y.impl_ptr();
    tape->record(y, [ai, bi, yi] {
      const auto& g = yi->grad;
      if (ai->requires_grad)
        for (std::size_t i = 0; i < g.size(); ++i)
          ai->grad[i] += g[i] * bi->data[i];
      if (bi->requires_grad)
        for (std::size_t i = 0; i < g.size(); ++i)
          bi->grad[i] += g[i] * ai->data[i];
    });
  }
  return y;
}

Tensor scale(const Tensor& a, double s, Tape* tape) {
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * s;
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  if (track(tape, {&a})) {
    ImplPtr ai = a.impl_ptr(), yi = y.impl_ptr();
    tape->record(y, [ai, yi, s] {
      const auto& g = yi->grad;
      for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * s;
    });
  }
  return y;
}

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  int64_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2)
    throw ShapeError("matmul: inner extents differ: " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
  const auto ad = a.data(), bd = b.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      double av = ad[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &bd[p * n];
      double* orow = &out[i * n];
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  Tensor y = Tensor::from_data({m, n}, std::move(out));
  if (track(tape, {&a, &b})) {
    ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr(), yi = y.impl_ptr();
    tape->record(y, [ai, bi, yi, m, k, n] {
      const auto& g = yi->grad;
      if (ai->requires_grad) {
        // dA = dY * B^T
        for (int64_t i = 0; i < m; ++i)
          for (int64_t p = 0; p < k; ++p) {
            double acc = 0.0;
            const double* grow = &g[i * n];
            const double* brow = &bi->data[p * n];
            for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ai->grad[i * k + p] += acc;
          }
      }
      if (bi->requires_grad) {
        // dB = A^T * dY
        for (int64_t i = 0; i < m; ++i) {
          const double* grow = &g[i * n];
          for (int64_t p = 0; p < k; ++p) {
            double av = ai->data[i * k + p];
            if (av == 0.0) continue;
            double* brow = &bi->grad[p * n];
            for (int64_t j = 0; j < n; ++j) brow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return y;
}

Tensor transpose(const Tensor& a, Tape* tape) {
  require_2d(a, "transpose");
  int64_t r = a.rows(), c = a.cols();
  std::vector<double> out(static_cast<std::size_t>(r * c));
  const auto ad = a.data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out[j * r + i] = ad[i * c + j];
  Tensor y = Tensor::from_data({c, r}, std::move(out));
  if (track(tape, {&a})) {
    ImplPtr ai = a.impl_ptr(), yi = y.impl_ptr();
    tape->record(y, [ai, yi, r, c] {
      const auto& g = yi->grad;
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) ai->grad[i * c + j] += g[j * r + i];
    });
  }
  return y;
}

Tensor relu(const Tensor& a, Tape* tape) {
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = ad[i] > 0.0 ? ad[i] : 0.0;
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  if (track(tape, {&a})) {
    ImplPtr ai = a.impl_ptr(), yi = y.impl_ptr();
    tape->record(y, [ai, yi] {
      const auto& g = yi->grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (ai->data[i] > 0.0) ai->grad[i] += g[i];
    });
  }
  return y;
}

namespace {

Tensor softmax_impl(const Tensor& x, const AttnMask* mask, Tape* tape) {
  if (x.ndim() < 1)
    throw ShapeError("softmax: rank-0 input");
  auto [rows, cols] = rowcol_view(x);
  if (mask) {
    if (mask->rows != rows || mask->cols != cols)
      throw ShapeError("softmax mask " + std::to_string(mask->rows) + "x" +
                       std::to_string(mask->cols) + " does not match scores " +
                       shape_str(x.shape()));
  }
  std::vector<double> out(x.numel(), 0.0);
  const auto xd = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = &xd[r * cols];
    double* yr = &out[r * cols];
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (int64_t c = 0; c < cols; ++c) {
      if (mask && !mask->allowed(r, c)) continue;
      if (std::isnan(xr[c]))
        throw NumericError("softmax: NaN input at row " + std::to_string(r));
      any = true;
      if (xr[c] > mx) mx = xr[c];
    }
    if (!any)
      throw ContractError("softmax: fully masked row " + std::to_string(r));
    if (!std::isfinite(mx))
      throw NumericError("softmax: non-finite input at row " +
                         std::to_string(r));
    double sum = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      if (!mask || mask->allowed(r, c)) {
        yr[c] = std::exp(xr[c] - mx);
        sum += yr[c];
      }
    }
    for (int64_t c = 0; c < cols; ++c) yr[c] /= sum;
  }
  Tensor y = Tensor::from_data(x.shape(), std::move(out));
  if (track(tape, {&x})) {
    ImplPtr xi = x.impl_ptr(), yi = y.impl_ptr();
    tape->record(y, [xi, yi, rows, cols] {
      const auto& g = yi->grad;
      const auto& yv = yi->data;
      for (int64_t r = 0; r < rows; ++r) {
        const double* gr = &g[r * cols];
        const double* yr = &yv[r * cols];
        double dot = 0.0;
        for (int64_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
        for (int64_t c = 0; c < cols; ++c)
          xi->grad[r * cols + c] += yr[c] * (gr[c] - dot);
      }
    });
  }
  return y;
}

}  // namespace

Tensor softmax_lastdim(const Tensor& x, Tape* tape) {
  return softmax_impl(x, nullptr, tape);
}

Tensor masked_softmax_lastdim(const Tensor& x, const AttnMask& mask,
                              Tape* tape) {
  return softmax_impl(x, &mask, tape);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps, Tape* tape) {
  auto [rows, d] = rowcol_view(x);
  if (gamma.ndim() != 1 || gamma.shape()[0] != d || beta.ndim() != 1 ||
      beta.shape()[0] != d)
    throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) +
                     "/" + shape_str(beta.shape()) + " do not match width " +
                     std::to_string(d));
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  std::vector<double> out(x.numel());
  const auto xd = x.data(), gd = gamma.data(), bd = beta.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = &xd[r * d];
    double* yr = &out[r * d];
    double mean = 0.0;
    for (int64_t c = 0; c < d; ++c) mean += xr[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t c = 0; c < d; ++c) {
      double dv = xr[c] - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(var + eps);
    for (int64_t c = 0; c < d; ++c)
      yr[c] = (xr[c] - mean) * inv * gd[c] + bd[c];
  }
  Tensor y = Tensor::from_data(x.shape(), std::move(out));
  if (track(tape, {&x, &gamma, &beta})) {
    ImplPtr xi = x.impl_ptr(), gi = gamma.impl_ptr(), bi = beta.impl_ptr(),
            yi = y.impl_ptr();
    tape->record(y, [xi, gi, bi, yi, rows, d, eps] {
      const auto& g = yi->grad;
      for (int64_t r = 0; r < rows; ++r) {
        const double* xr = &xi->data[r * d];
        const double* gr = &g[r * d];
        double mean = 0.0;
        for (int64_t c = 0; c < d; ++c) mean += xr[c];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t c = 0; c < d; ++c) {
          double dv = xr[c] - mean;
          var += dv * dv;
        }
        var /= static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + eps);
        // dxhat, plus parameter grads
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int64_t c = 0; c < d; ++c) {
          double xhat = (xr[c] - mean) * inv;
          double dxhat = gr[c] * gi->data[c];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
          if (gi->requires_grad) gi->grad[c] += gr[c] * xhat;
          if (bi->requires_grad) bi->grad[c] += gr[c];
        }
        if (xi->requires_grad) {
          double inv_d = 1.0 / static_cast<double>(d);
          for (int64_t c = 0; c < d; ++c) {
            double xhat = (xr[c] - mean) * inv;
            double dxhat = gr[c] * gi->data[c];
            xi->grad[r * d + c] +=
                inv * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
          }
        }
      }
    });
  }
  return y;
}

Tensor depthwise_conv1d(const Tensor& v, const Tensor& left_taps,
                        const Tensor& right_taps, const Tensor& left_context,
                        Tape* tape) {
  require_2d(v, "depthwise_conv1d");
  require_2d(left_taps, "depthwise_conv1d");
  int64_t T = v.rows(), d = v.cols();
  int64_t ll = left_taps.rows();
  if (left_taps.cols() != d)
    throw ShapeError("depthwise_conv1d: left taps " +
                     shape_str(left_taps.shape()) + " do not match width " +
                     std::to_string(d));
  int64_t lr = 0;
  if (right_taps.defined()) {
    require_2d(right_taps, "depthwise_conv1d");
    if (right_taps.cols() != d)
      throw ShapeError("depthwise_conv1d: right taps " +
                       shape_str(right_taps.shape()) +
                       " do not match width " + std::to_string(d));
    lr = right_taps.rows();
  }
  int64_t ctx_rows = 0;
  if (left_context.defined()) {
    require_2d(left_context, "depthwise_conv1d");
    if (left_context.cols() != d)
      throw ShapeError("depthwise_conv1d: left context " +
                       shape_str(left_context.shape()) +
                       " does not match width " + std::to_string(d));
    ctx_rows = left_context.rows();
    if (ctx_rows > ll - 1)
      throw ContractError(
          "depthwise_conv1d: left context has " + std::to_string(ctx_rows) +
          " rows; at most L_l-1 = " + std::to_string(ll - 1) + " are usable");
  }

  const auto vd = v.data(), ad = left_taps.data();
  std::vector<double> out(static_cast<std::size_t>(T * d), 0.0);
  for (int64_t t = 0; t < T; ++t) {
    double* yr = &out[t * d];
    for (int64_t i = 0; i < ll; ++i) {
      int64_t src = t - i;
      const double* row = nullptr;
      if (src >= 0) {
        row = &vd[src * d];
      } else if (src >= -ctx_rows) {
        row = &left_context.data()[(ctx_rows + src) * d];
      } else {
        continue;
      }
      const double* taps = &ad[i * d];
      for (int64_t c = 0; c < d; ++c) yr[c] += taps[c] * row[c];
    }
    for (int64_t j = 1; j <= lr; ++j) {
      int64_t src = t + j;
      if (src >= T) break;
      const double* taps = &right_taps.data()[(j - 1) * d];
      const double* row = &vd[src * d];
      for (int64_t c = 0; c < d; ++c) yr[c] += taps[c] * row[c];
    }
  }
  Tensor y = Tensor::from_data({T, d}, std::move(out));
  if (track(tape, {&v, &left_taps, &right_taps, &left_context})) {
    ImplPtr vi = v.impl_ptr(), ai = left_taps.impl_ptr(), yi = y.impl_ptr();
    ImplPtr ri = right_taps.defined() ? right_taps.impl_ptr() : nullptr;
    ImplPtr ci = left_context.defined() ? left_context.impl_ptr() : nullptr;
    tape->record(y, [vi, ai, ri, ci, yi, T, d, ll, lr, ctx_rows] {
      const auto& g = yi->grad;
      for (int64_t t = 0; t < T; ++t) {
        const double* gr = &g[t * d];
        for (int64_t i = 0; i < ll; ++i) {
          int64_t src = t - i;
          const double* row;
          double* row_grad = nullptr;
          if (src >= 0) {
            row = &vi->data[src * d];
            if (vi->requires_grad) row_grad = &vi->grad[src * d];
          } else if (ci && src >= -ctx_rows) {
            row = &ci->data[(ctx_rows + src) * d];
            if (ci->requires_grad) row_grad = &ci->grad[(ctx_rows + src) * d];
          } else {
            continue;
          }
          const double* taps = &ai->data[i * d];
          for (int64_t c = 0; c < d; ++c) {
            if (ai->requires_grad) ai->grad[i * d + c] += gr[c] * row[c];
            if (row_grad) row_grad[c] += gr[c] * taps[c];
          }
        }
        for (int64_t j = 1; j <= lr; ++j) {
          int64_t src = t + j;
          if (src >= T) break;
          const double* taps = &ri->data[(j - 1) * d];
          for (int64_t c = 0; c < d; ++c) {
            if (ri->requires_grad)
              ri->grad[(j - 1) * d + c] += gr[c] * vi->data[src * d + c];
            if (vi->requires_grad)
              vi->grad[src * d + c] += gr[c] * taps[c];
          }
        }
      }
    });
  }
  return y;
}

Tensor conv1d_stride2(const Tensor& x, const Tensor& kernel,
                      const Tensor& bias, int64_t kernel_size, Tape* tape) {
  require_2d(x, "conv1d_stride2");
  require_2d(kernel, "conv1d_stride2");
  int64_t T = x.rows(), din = x.cols();
  if (kernel_size < 1 || kernel_size % 2 == 0)
    throw ContractError("conv1d_stride2: kernel size must be odd, got " +
                        std::to_string(kernel_size));
  if (kernel.rows() != kernel_size * din)
    throw ShapeError("conv1d_stride2: kernel " + shape_str(kernel.shape()) +
                     " does not match K*d_in = " +
                     std::to_string(kernel_size * din));
  int64_t dout = kernel.cols();
  if (bias.ndim() != 1 || bias.shape()[0] != dout)
    throw ShapeError("conv1d_stride2: bias " + shape_str(bias.shape()) +
                     " does not match output width " + std::to_string(dout));
  int64_t O = (T + 1) / 2;
  int64_t half = kernel_size / 2;
  std::vector<double> out(static_cast<std::size_t>(O * dout), 0.0);
  const auto xd = x.data(), kd = kernel.data(), bd = bias.data();
  for (int64_t t = 0; t < O; ++t) {
    double* yr = &out[t * dout];
    for (int64_t o = 0; o < dout; ++o) yr[o] = bd[o];
    for (int64_t j = 0; j < kernel_size; ++j) {
      int64_t src = 2 * t + j - half;
      if (src < 0 || src >= T) continue;
      const double* xr = &xd[src * din];
      for (int64_t f = 0; f < din; ++f) {
        double xv = xr[f];
        if (xv == 0.0) continue;
        const double* krow = &kd[(j * din + f) * dout];
        for (int64_t o = 0; o < dout; ++o) yr[o] += xv * krow[o];
      }
    }
  }
  Tensor y = Tensor::from_data({O, dout}, std::move(out));
  if (track(tape, {&x, &kernel, &bias})) {
    ImplPtr xi = x.impl_ptr(), ki = kernel.impl_ptr(), bi = bias.impl_ptr(),
            yi = y.impl_ptr();
    tape->record(y, [xi, ki, bi, yi, T, din, dout, O, half, kernel_size] {
      const auto& g = yi->grad;
      for (int64_t t = 0; t < O; ++t) {
        const double* gr = &g[t * dout];
        if (bi->requires_grad)
          for (int64_t o = 0; o < dout; ++o) bi->grad[o] += gr[o];
        for (int64_t j = 0; j < kernel_size; ++j) {
          int64_t src = 2 * t + j - half;
          if (src < 0 || src >= T) continue;
          for (int64_t f = 0; f < din; ++f) {
            double xv = xi->data[src * din + f];
            const double* krow = &ki->data[(j * din + f) * dout];
            double* kgrow =
                ki->requires_grad ? &ki->grad[(j * din + f) * dout] : nullptr;
            double xg = 0.0;
            for (int64_t o = 0; o < dout; ++o) {
              if (kgrow) kgrow[o] += xv * gr[o];
              xg += krow[o] * gr[o];
            }
            if (xi->requires_grad) xi->grad[src * din + f] += xg;
          }
        }
      }
    });
  }
  return y;
}

Tensor slice_rows(const Tensor& a, int64_t row0, int64_t n, Tape* tape) {
  require_2d(a, "slice_rows");
  int64_t R = a.rows(), C = a.cols();
  if (row0 < 0 || n <= 0 || row0 + n > R)
    throw ShapeError("slice_rows: range [" + std::to_string(row0) + ", " +
                     std::to_string(row0 + n) + ") outside " +
                     shape_str(a.shape()));
  std::vector<double> out(a.data().begin() + row0 * C,
                          a.data().begin() + (row0 + n) * C);
  Tensor y = Tensor::from_data({n, C}, std::move(out));
  if (track(tape, {&a})) {
    ImplPtr ai = a.impl_ptr(), yi = y.impl_ptr();
    tape->record(y, [ai, yi, row0, n, C] {
      const auto& g = yi->grad;
      for (int64_t i = 0; i < n * C; ++i) ai->grad[row0 * C + i] += g[i];
    });
  }
  return y;
}

Tensor slice_cols(const Tensor& a, int64_t col0, int64_t n, Tape* tape) {
  require_2d(a, "slice_cols");
  int64_t R = a.rows(), C = a.cols();
  if (col0 < 0 || n <= 0 || col0 + n > C)
    throw ShapeError("slice_cols: range [" + std::to_string(col0) + ", " +
                     std::to_string(col0 + n) + ") outside " +
                     shape_str(a.shape()));
  std::vector<double> out(static_cast<std::size_t>(R * n));
  const auto ad = a.data();
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < n; ++c) out[r * n + c] = ad[r * C + col0 + c];
  Tensor y = Tensor::from_data({R, n}, std::move(out));
  if (track(tape, {&a})) {
    ImplPtr ai = a.impl_ptr(), yi = y.impl_ptr();
    tape->record(y, [ai, yi, col0, R, C, n] {
      const auto& g = yi->grad;
      for (int64_t r = 0; r < R; ++r)
        for (int64_t c = 0; c < n; ++c)
          ai->grad[r * C + col0 + c] += g[r * n + c];
    });
  }
  return y;
}

Tensor concat_rows(const std::vector<Tensor>& parts, Tape* tape) {
  if (parts.empty()) throw ContractError("concat_rows: no parts");
  int64_t C = parts[0].cols();
  int64_t R = 0;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_rows");
    if (p.cols() != C)
      throw ShapeError("concat_rows: column mismatch " +
                       shape_str(p.shape()) + " vs width " +
                       std::to_string(C));
    R += p.rows();
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(R * C));
  for (const Tensor& p : parts)
    out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor y = Tensor::from_data({R, C}, std::move(out));
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  if (tape && any) {
    std::vector<ImplPtr> impls;
    impls.reserve(parts.size());
    for (const Tensor& p : parts) impls.push_back(p.impl_ptr());
    ImplPtr yi = y.impl_ptr();
    tape->record(y, [impls, yi] {
      const auto& g = yi->grad;
      std::size_t off = 0;
      for (const ImplPtr& pi : impls) {
        std::size_t sz = pi->data.size();
        if (pi->requires_grad)
          for (std::size_t i = 0; i < sz; ++i) pi->grad[i] += g[off + i];
        off += sz;
      }
    });
  }
  return y;
}

Tensor concat_cols(const std::vector<Tensor>& parts, Tape* tape) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  int64_t R = parts[0].rows();
  int64_t C = 0;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_cols");
    if (p.rows() != R)
      throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()) +
                       " vs height " + std::to_string(R));
    C += p.cols();
  }
  std::vector<double> out(static_cast<std::size_t>(R * C));
  int64_t col0 = 0;
  for (const Tensor& p : parts) {
    int64_t pc = p.cols();
    const auto pd = p.data();
    for (int64_t r = 0; r < R; ++r)
      for (int64_t c = 0; c < pc; ++c) out[r * C + col0 + c] = pd[r * pc + c];
    col0 += pc;
  }
  Tensor y = Tensor::from_data({R, C}, std::move(out));
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  if (tape && any) {
    std::vector<ImplPtr> impls;
    std::vector<int64_t> widths;
    for (const Tensor& p : parts) {
      impls.push_back(p.impl_ptr());
      widths.push_back(p.cols());
    }
    ImplPtr yi = y.impl_ptr();
    tape->record(y, [impls, widths, yi, R, C] {
      const auto& g = yi->grad;
      int64_t col0 = 0;
      for (std::size_t k = 0; k < impls.size(); ++k) {
        int64_t pc = widths[k];
        if (impls[k]->requires_grad)
          for (int64_t r = 0; r < R; ++r)
            for (int64_t c = 0; c < pc; ++c)
              impls[k]->grad[r * pc + c] += g[r * C + col0 + c];
        col0 += pc;
      }
    });
  }
  return y;
}

Tensor reshape(const Tensor& a, Shape shape, Tape* tape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " +
                     shape_str(shape) + " changes element count");
  std::vector<double> out(a.data().begin(), a.data().end());
  Tensor y = Tensor::from_data(std::move(shape), std::move(out));
  if (track(tape, {&a})) {
    ImplPtr ai = a.impl_ptr(), yi = y.impl_ptr();
    tape->record(y, [ai, yi] {
      const auto& g = yi->grad;
      for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
    });
  }
  return y;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids,
                   Tape* tape) {
  require_2d(table, "gather_rows");
  if (ids.empty()) throw ContractError("gather_rows: empty id list");
  int64_t V = table.rows(), d = table.cols();
  for (int id : ids)
    if (id < 0 || id >= V)
      throw IndexError("gather_rows: id " + std::to_string(id) +
                       " outside table of " + std::to_string(V) + " rows");
  int64_t N = static_cast<int64_t>(ids.size());
  std::vector<double> out(static_cast<std::size_t>(N * d));
  const auto td = table.data();
  for (int64_t r = 0; r < N; ++r)
    std::memcpy(&out[r * d], &td[static_cast<int64_t>(ids[r]) * d],
                sizeof(double) * static_cast<std::size_t>(d));
  Tensor y = Tensor::from_data({N, d}, std::move(out));
  if (track(tape, {&table})) {
    ImplPtr ti = table.impl_ptr(), yi = y.impl_ptr();
    std::vector<int> ids_copy = ids;
    tape->record(y, [ti, yi, ids_copy, d] {
      const auto& g = yi->grad;
      for (std::size_t r = 0; r < ids_copy.size(); ++r)
        for (int64_t c = 0; c < d; ++c)
          ti->grad[static_cast<int64_t>(ids_copy[r]) * d + c] +=
              g[static_cast<int64_t>(r) * d + c];
    });
  }
  return y;
}

Tensor cross_entropy_label_smoothed(const Tensor& logits,
                                    const std::vector<int>& targets,
                                    double epsilon,
                                    const std::vector<uint8_t>& ignore_mask,
                                    Tape* tape) {
  require_2d(logits, "cross_entropy");
  int64_t N = logits.rows(), V = logits.cols();
  if (static_cast<int64_t>(targets.size()) != N)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(N) + " rows");
  if (!ignore_mask.empty() && static_cast<int64_t>(ignore_mask.size()) != N)
    throw ShapeError("cross_entropy: ignore mask length " +
                     std::to_string(ignore_mask.size()) + " for " +
                     std::to_string(N) + " rows");
  if (epsilon < 0.0 || epsilon >= 1.0)
    throw ContractError("cross_entropy: epsilon must be in [0, 1)");
  for (int64_t r = 0; r < N; ++r) {
    bool live = ignore_mask.empty() || !ignore_mask[r];
    if (live && (targets[r] < 0 || targets[r] >= V))
      throw IndexError("cross_entropy: target " + std::to_string(targets[r]) +
                       " outside [0, " + std::to_string(V) + ") at row " +
                       std::to_string(r));
  }
  int64_t live_rows = 0;
  for (int64_t r = 0; r < N; ++r)
    if (ignore_mask.empty() || !ignore_mask[r]) ++live_rows;

  const double q_off = epsilon / static_cast<double>(V);
  const double q_on = 1.0 - epsilon + q_off;
  const auto xd = logits.data();
  double total = 0.0;
  for (int64_t r = 0; r < N; ++r) {
    if (!ignore_mask.empty() && ignore_mask[r]) continue;
    const double* xr = &xd[r * V];
    double mx = xr[0];
    for (int64_t v = 1; v < V; ++v) mx = std::max(mx, xr[v]);
    double sum = 0.0;
    for (int64_t v = 0; v < V; ++v) sum += std::exp(xr[v] - mx);
    double lse = mx + std::log(sum);
    double row_loss = 0.0;
    for (int64_t v = 0; v < V; ++v) {
      double q = (v == targets[r]) ? q_on : q_off;
      if (q != 0.0) row_loss -= q * (xr[v] - lse);
    }
    total += row_loss;
  }
  double denom = live_rows > 0 ? static_cast<double>(live_rows) : 1.0;
  Tensor y = Tensor::scalar(total / denom);
  if (track(tape, {&logits}) && live_rows > 0) {
    ImplPtr xi = logits.impl_ptr(), yi = y.impl_ptr();
    std::vector<int> tg = targets;
    std::vector<uint8_t> msk = ignore_mask;
    tape->record(y, [xi, yi, tg, msk, N, V, q_on, q_off, denom] {
      double go = yi->grad[0] / denom;
      for (int64_t r = 0; r < N; ++r) {
        if (!msk.empty() && msk[r]) continue;
        const double* xr = &xi->data[r * V];
        double mx = xr[0];
        for (int64_t v = 1; v < V; ++v) mx = std::max(mx, xr[v]);
        double sum = 0.0;
        for (int64_t v = 0; v < V; ++v) sum += std::exp(xr[v] - mx);
        for (int64_t v = 0; v < V; ++v) {
          double p = std::exp(xr[v] - mx) / sum;
          double q = (v == tg[r]) ? q_on : q_off;
          xi->grad[r * V + v] += go * (p - q);
        }
      }
    });
  }
  return y;
}

Tensor nll_sum_from_probs(const Tensor& probs, const std::vector<int>& targets,
                          Tape* tape) {
  require_2d(probs, "nll_sum_from_probs");
  int64_t K = probs.rows(), C = probs.cols();
  if (static_cast<int64_t>(targets.size()) != K)
    throw ShapeError("nll_sum_from_probs: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(K) + " rows");
  for (int64_t k = 0; k < K; ++k)
    if (targets[k] < 0 || targets[k] >= C)
      throw IndexError("nll_sum_from_probs: class " +
                       std::to_string(targets[k]) + " outside [0, " +
                       std::to_string(C) + ") at row " + std::to_string(k));
  const auto pd = probs.data();
  double total = 0.0;
  for (int64_t k = 0; k < K; ++k) total -= std::log(pd[k * C + targets[k]]);
  Tensor y = Tensor::scalar(total);
  if (track(tape, {&probs})) {
    ImplPtr pi = probs.impl_ptr(), yi = y.impl_ptr();
    std::vector<int> tg = targets;
    tape->record(y, [pi, yi, tg, C] {
      double go = yi->grad[0];
      for (std::size_t k = 0; k < tg.size(); ++k) {
        std::size_t idx = k * C + static_cast<std::size_t>(tg[k]);
        pi->grad[idx] -= go / pi->data[idx];
      }
    });
  }
  return y;
}

int64_t argmax(std::span<const double> v) {
  int64_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = static_cast<int64_t>(i);
  return best;
}

}  // namespace uasr
