#include "uasr/attention.hpp"

#include <cmath>

namespace uasr {

namespace {

void check_mask_rows(const AttnMask& mask) {
  for (int64_t r = 0; r < mask.rows; ++r) {
    bool any = false;
    for (int64_t c = 0; c < mask.cols && !any; ++c) any = mask.allowed(r, c);
    if (!any)
      throw ContractError("attention mask row " + std::to_string(r) +
                          " allows no positions");
  }
}

Tensor ffn_block(const Tensor& x, const SanMLayerParams& p, Tape* tape) {
  Tensor h = add_rowvec(matmul(x, p.ffn_w1, tape), p.ffn_b1, tape);
  h = relu(h, tape);
  return add_rowvec(matmul(h, p.ffn_w2, tape), p.ffn_b2, tape);
}

}  // namespace

AttnMask chunk_causal_mask(int64_t T, int64_t chunk_size) {
  if (chunk_size < 1)
    throw ContractError("chunk_causal_mask: chunk size must be >= 1");
  AttnMask m;
  m.rows = T;
  m.cols = T;
  m.allow.assign(static_cast<std::size_t>(T * T), 0);
  for (int64_t t = 0; t < T; ++t) {
    int64_t chunk_end = (t / chunk_size + 1) * chunk_size;
    int64_t upto = std::min(T, chunk_end);
    for (int64_t s = 0; s < upto; ++s) m.allow[t * T + s] = 1;
  }
  return m;
}

Tensor mha_core(const Tensor& q, const Tensor& k, const Tensor& v,
                int64_t heads, const AttnMask* mask, Tape* tape) {
  int64_t d = q.cols();
  if (k.cols() != d || v.cols() != d)
    throw ShapeError("mha_core: key/value width " + shape_str(k.shape()) +
                     "/" + shape_str(v.shape()) + " does not match query " +
                     shape_str(q.shape()));
  if (k.rows() != v.rows())
    throw ShapeError("mha_core: key rows != value rows");
  if (heads < 1 || d % heads != 0)
    throw ContractError("mha_core: width " + std::to_string(d) +
                        " not divisible by " + std::to_string(heads) +
                        " heads");
  if (mask) {
    if (mask->rows != q.rows() || mask->cols != k.rows())
      throw ShapeError("mha_core: mask " + std::to_string(mask->rows) + "x" +
                       std::to_string(mask->cols) + " does not match " +
                       std::to_string(q.rows()) + " queries x " +
                       std::to_string(k.rows()) + " keys");
    check_mask_rows(*mask);
  }
  int64_t dk = d / heads;
  double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Tensor> contexts;
  contexts.reserve(static_cast<std::size_t>(heads));
  for (int64_t h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dk, dk, tape);
    Tensor kh = slice_cols(k, h * dk, dk, tape);
    Tensor vh = slice_cols(v, h * dk, dk, tape);
    Tensor scores =
        scale(matmul(qh, transpose(kh, tape), tape), inv_sqrt_dk, tape);
    Tensor w = mask ? masked_softmax_lastdim(scores, *mask, tape)
                    : softmax_lastdim(scores, tape);
    contexts.push_back(matmul(w, vh, tape));
  }
  return heads == 1 ? contexts[0] : concat_cols(contexts, tape);
}

Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv,
                            const MhaProj& p, const AttnMask* mask,
                            Tape* tape) {
  Tensor q = matmul(x_q, p.wq, tape);
  Tensor k = matmul(x_kv, p.wk, tape);
  Tensor v = matmul(x_kv, p.wv, tape);
  Tensor ctx = mha_core(q, k, v, p.heads, mask, tape);
  return matmul(ctx, p.wo, tape);
}

Tensor fsmn_memory(const Tensor& v, const Tensor& left_taps,
                   const Tensor& right_taps, bool unidirectional,
                   const Tensor& left_context, Tape* tape) {
  if (unidirectional && right_taps.defined())
    throw ContractError("fsmn_memory: unidirectional mode forbids right taps");
  if (!unidirectional && left_context.defined())
    throw ContractError(
        "fsmn_memory: left context is a streaming (unidirectional) feature");
  Tensor conv = depthwise_conv1d(v, left_taps,
                                 unidirectional ? Tensor() : right_taps,
                                 left_context, tape);
  return add(v, conv, tape);
}

Tensor san_m_core(const Tensor& x, const SanMLayerParams& p,
                  const AttnMask* mask, Tape* tape) {
  Tensor q = matmul(x, p.attn.wq, tape);
  Tensor k = matmul(x, p.attn.wk, tape);
  Tensor v = matmul(x, p.attn.wv, tape);
  Tensor attn =
      matmul(mha_core(q, k, v, p.attn.heads, mask, tape), p.attn.wo, tape);
  Tensor m = fsmn_memory(v, p.fsmn_left_taps, p.fsmn_right_taps,
                         p.unidirectional(), Tensor(), tape);
  return add(attn, m, tape);
}

Tensor san_m_layer(const Tensor& x, const SanMLayerParams& p,
                   const AttnMask* mask, const FwdCtx& ctx) {
  Tensor a = layer_norm(x, p.ln1_gamma, p.ln1_beta, kLayerNormEps, ctx.tape);
  Tensor core = san_m_core(a, p, mask, ctx.tape);
  Tensor h = add(x, apply_dropout(core, ctx), ctx.tape);
  Tensor f = layer_norm(h, p.ln2_gamma, p.ln2_beta, kLayerNormEps, ctx.tape);
  return add(h, apply_dropout(ffn_block(f, p, ctx.tape), ctx), ctx.tape);
}

Tensor lc_san_m_chunk_step(const Tensor& x_chunk, const SanMLayerParams& p,
                           LayerStreamState& state, const FwdCtx& ctx) {
  if (!p.unidirectional())
    throw ContractError(
        "lc_san_m_chunk_step: layer must be unidirectional (no right taps)");
  Tape* tape = ctx.tape;
  int64_t c = x_chunk.rows();
  Tensor a =
      layer_norm(x_chunk, p.ln1_gamma, p.ln1_beta, kLayerNormEps, tape);
  Tensor q = matmul(a, p.attn.wq, tape);
  Tensor k = matmul(a, p.attn.wk, tape);
  Tensor v = matmul(a, p.attn.wv, tape);

  Tensor key_cache = state.key_cache.defined()
                         ? concat_rows({state.key_cache, k}, tape)
                         : k;
  Tensor value_cache = state.value_cache.defined()
                           ? concat_rows({state.value_cache, v}, tape)
                           : v;

  Tensor attn = matmul(
      mha_core(q, key_cache, value_cache, p.attn.heads, nullptr, tape),
      p.attn.wo, tape);
  Tensor conv =
      depthwise_conv1d(v, p.fsmn_left_taps, Tensor(), state.fsmn_tail, tape);
  Tensor m = add(v, conv, tape);
  Tensor core = add(attn, m, tape);

  Tensor h = add(x_chunk, apply_dropout(core, ctx), tape);
  Tensor f = layer_norm(h, p.ln2_gamma, p.ln2_beta, kLayerNormEps, tape);
  Tensor y = add(h, apply_dropout(ffn_block(f, p, tape), ctx), tape);

  state.key_cache = key_cache;
  state.value_cache = value_cache;
  state.frames += c;
  state.chunk_index += 1;
  int64_t order = p.fsmn_left_taps.rows();
  int64_t tail = std::min(state.frames, order - 1);
  state.fsmn_tail = tail > 0 ? slice_rows(value_cache, state.frames - tail,
                                          tail, tape)
                             : Tensor();
  return y;
}

Tensor lc_san_m_oracle_full(const Tensor& x, const SanMLayerParams& p,
                            int64_t chunk_size, const FwdCtx& ctx) {
  if (!p.unidirectional())
    throw ContractError(
        "lc_san_m_oracle_full: layer must be unidirectional (no right taps)");
  AttnMask mask = chunk_causal_mask(x.rows(), chunk_size);
  return san_m_layer(x, p, &mask, ctx);
}

}  // namespace uasr
