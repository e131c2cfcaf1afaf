#pragma once

#include <cstdint>
#include <vector>

#include "uasr/ops.hpp"
#include "uasr/runctx.hpp"
#include "uasr/tensor.hpp"

namespace uasr {

inline constexpr double kLayerNormEps = 1e-5;

// Packed multi-head projections; per-head matrices are column slices.
struct MhaProj {
  Tensor wq, wk, wv, wo;  // each [d_model x d_model]
  int64_t heads = 1;
};

// Self-attention layer fused with a tap-mixture memory block over the
// attention values, plus pre-norm residual wiring and a feed-forward block.
struct SanMLayerParams {
  MhaProj attn;
  Tensor fsmn_left_taps;   // [L_l x d_model] (unidirectional: [L x d_model])
  Tensor fsmn_right_taps;  // undefined for unidirectional layers
  Tensor ln1_gamma, ln1_beta;
  Tensor ln2_gamma, ln2_beta;
  Tensor ffn_w1, ffn_b1;  // [d x d_ff], [d_ff]
  Tensor ffn_w2, ffn_b2;  // [d_ff x d], [d]

  bool unidirectional() const { return !fsmn_right_taps.defined(); }
};

// Per-layer online state for chunk-incremental evaluation: caches of every
// projected key/value row seen so far plus the memory-block left context.
struct LayerStreamState {
  Tensor key_cache;    // [frames x d_model], undefined until the first chunk
  Tensor value_cache;  // [frames x d_model]
  Tensor fsmn_tail;    // last min(frames, L-1) value rows
  int64_t chunk_index = 0;
  int64_t frames = 0;
};

// Scaled dot-product attention over packed projections: q [Tq x d],
// k/v [Tkv x d], d split into `heads` equal slices. Returns the
// re-concatenated per-head context [Tq x d] (no output projection).
Tensor mha_core(const Tensor& q, const Tensor& k, const Tensor& v,
                int64_t heads, const AttnMask* mask, Tape* tape);

// Full multi-head attention: projections, per-head attention, output
// projection. Masked positions get zero weight; a fully masked row is a
// contract error.
Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv,
                            const MhaProj& p, const AttnMask* mask,
                            Tape* tape);

// Memory block INCLUDING the identity term: v + taps applied to neighbors.
// Unidirectional mode forbids right taps and accepts streaming left context;
// bidirectional mode forbids left context.
Tensor fsmn_memory(const Tensor& v, const Tensor& left_taps,
                   const Tensor& right_taps, bool unidirectional,
                   const Tensor& left_context, Tape* tape);

// Attention-plus-memory core on a raw input block:
//   core(x) = MultiHead(x) + M(x W^V).
Tensor san_m_core(const Tensor& x, const SanMLayerParams& p,
                  const AttnMask* mask, Tape* tape);

// Whole pre-norm layer: x + core(ln1(x)), then + ffn(ln2(.)).
Tensor san_m_layer(const Tensor& x, const SanMLayerParams& p,
                   const AttnMask* mask, const FwdCtx& ctx);

// One chunk through the latency-controlled layer: queries attend every
// cached key/value, caches grow by the chunk, memory block uses the carried
// left context. Advances `state`.
Tensor lc_san_m_chunk_step(const Tensor& x_chunk, const SanMLayerParams& p,
                           LayerStreamState& state, const FwdCtx& ctx);

// Batch-equivalent of running lc_san_m_chunk_step over all chunks of x:
// full-sequence attention under a block mask that lets row t see positions
// of chunks <= chunk(t), with a unidirectional memory block. Mutual oracle
// for the incremental path.
Tensor lc_san_m_oracle_full(const Tensor& x, const SanMLayerParams& p,
                            int64_t chunk_size, const FwdCtx& ctx);

// allow(t, s) <=> chunk(s) <= chunk(t)
AttnMask chunk_causal_mask(int64_t T, int64_t chunk_size);

}  // namespace uasr
