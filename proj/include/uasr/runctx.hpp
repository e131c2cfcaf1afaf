#pragma once

#include "uasr/ops.hpp"
#include "uasr/rng.hpp"
#include "uasr/tensor.hpp"

namespace uasr {

// Forward-pass context. Inference uses the default: no tape, no dropout.
// Training passes a tape plus a seeded rng for inverted dropout masks.
struct FwdCtx {
  Tape* tape = nullptr;
  RngStream* rng = nullptr;
  double dropout = 0.0;

  bool training() const { return rng != nullptr && dropout > 0.0; }
};

// Inverted dropout: scales kept entries by 1/keep, identity at inference.
inline Tensor apply_dropout(const Tensor& x, const FwdCtx& ctx) {
  if (!ctx.training()) return x;
  double keep = 1.0 - ctx.dropout;
  std::vector<double> mask(static_cast<std::size_t>(x.numel()));
  for (double& m : mask) m = ctx.rng->uniform() < keep ? 1.0 / keep : 0.0;
  Tensor mask_t = Tensor::from_data(x.shape(), std::move(mask));
  return mul(x, mask_t, ctx.tape);
}

}  // namespace uasr
