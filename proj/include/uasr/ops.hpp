#pragma once

#include <cstdint>
#include <vector>

#include "uasr/tensor.hpp"

namespace uasr {

// Boolean attention mask, row-major [rows x cols]; allow[r*cols+c] != 0
// means query row r may attend position c.
struct AttnMask {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<uint8_t> allow;

  bool allowed(int64_t r, int64_t c) const {
    return allow[static_cast<std::size_t>(r * cols + c)] != 0;
  }
};

// Every op computes its forward value eagerly. When `tape` is non-null and
// any differentiable operand requires grad, a backward record is appended;
// otherwise the result is a plain value. Ops never mutate their inputs.

Tensor add(const Tensor& a, const Tensor& b, Tape* tape);
// a[R x C] + row vector b[C], broadcast over rows.
Tensor add_rowvec(const Tensor& a, const Tensor& b, Tape* tape);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape);
Tensor scale(const Tensor& a, double s, Tape* tape);
Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape);
Tensor transpose(const Tensor& a, Tape* tape);
Tensor relu(const Tensor& a, Tape* tape);

// Numerically stabilized softmax over the last dimension. With a mask,
// disallowed entries get weight exactly zero; a fully masked row is a
// contract error. The mask is metadata, not a differentiable operand.
Tensor softmax_lastdim(const Tensor& x, Tape* tape);
Tensor masked_softmax_lastdim(const Tensor& x, const AttnMask& mask,
                              Tape* tape);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps, Tape* tape);

// Per-dimension tap mixture over neighboring rows, WITHOUT the identity
// term (callers add the skip). Row t of the result is
//   sum_i left_taps[i] * v[t-i]  +  sum_j right_taps[j-1] * v[t+j]
// with i in [0, L_l) and j in [1, L_r]. Out-of-range rows read as zero
// unless `left_context` supplies up to L_l-1 carried rows (streaming).
// `right_taps` and `left_context` may be undefined tensors.
Tensor depthwise_conv1d(const Tensor& v, const Tensor& left_taps,
                        const Tensor& right_taps, const Tensor& left_context,
                        Tape* tape);

// 1-d convolution over rows with stride 2 and odd kernel size K; output row
// t is centered on input row 2t, zero padded, so the output always has
// ceil(T/2) rows. kernel is [(K*d_in) x d_out], bias [d_out].
Tensor conv1d_stride2(const Tensor& x, const Tensor& kernel,
                      const Tensor& bias, int64_t kernel_size, Tape* tape);

Tensor slice_rows(const Tensor& a, int64_t row0, int64_t n, Tape* tape);
Tensor slice_cols(const Tensor& a, int64_t col0, int64_t n, Tape* tape);
Tensor concat_rows(const std::vector<Tensor>& parts, Tape* tape);
Tensor concat_cols(const std::vector<Tensor>& parts, Tape* tape);
// Same data, new shape (row-major order preserved).
Tensor reshape(const Tensor& a, Shape shape, Tape* tape);
// Rows of `table` selected by id; backward scatter-adds into the table.
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids,
                   Tape* tape);

// Mean over unmasked rows of the smoothed negative log-likelihood
//   -sum_v q_v log softmax(logits)_v,  q_target = 1-eps+eps/V, else eps/V.
// `ignore_mask` may be empty (nothing ignored) or one flag per row.
Tensor cross_entropy_label_smoothed(const Tensor& logits,
                                    const std::vector<int>& targets,
                                    double epsilon,
                                    const std::vector<uint8_t>& ignore_mask,
                                    Tape* tape);

// Sum over rows of -log probs[k, targets[k]], for already-normalized rows.
Tensor nll_sum_from_probs(const Tensor& probs, const std::vector<int>& targets,
                          Tape* tape);

// Index of the largest value; ties break toward the lower index.
int64_t argmax(std::span<const double> v);

}  // namespace uasr
