#include "uasr/scama.hpp"

#include <cmath>

namespace uasr {

Tensor splice_chunk(const Tensor& encoder_chunk, int64_t chunk_size,
                    Tape* tape) {
  int64_t rows = encoder_chunk.rows(), d = encoder_chunk.cols();
  if (rows > chunk_size)
    throw ContractError("splice_chunk: chunk has " + std::to_string(rows) +
                        " rows, expected at most " +
                        std::to_string(chunk_size));
  Tensor padded = encoder_chunk;
  if (rows < chunk_size) {
    Tensor pad = Tensor::zeros({chunk_size - rows, d});
    padded = concat_rows({encoder_chunk, pad}, tape);
  }
  return reshape(padded, {1, chunk_size * d}, tape);
}

Tensor predictor_forward(const Tensor& h_spliced, const PredictorParams& p,
                         Tape* tape) {
  Tensor h = add_rowvec(matmul(h_spliced, p.w1, tape), p.b1, tape);
  h = relu(h, tape);
  Tensor logits = add_rowvec(matmul(h, p.w2, tape), p.b2, tape);
  return softmax_lastdim(logits, tape);
}

ChunkAlignment chunk_counts_from_alignment(const std::vector<Span>& spans,
                                           int64_t total_frames,
                                           int64_t chunk_size, int n_max) {
  if (chunk_size < 1)
    throw ContractError("chunk_counts_from_alignment: chunk size must be >= 1");
  int64_t n_chunks = (total_frames + chunk_size - 1) / chunk_size;
  ChunkAlignment out;
  out.chunk_size = chunk_size;
  out.counts.assign(static_cast<std::size_t>(n_chunks), 0);
  out.token_chunk.reserve(spans.size());
  int64_t prev_end = 0;
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const Span& s = spans[i];
    if (s.len <= 0 || s.begin < prev_end || s.begin + s.len > total_frames)
      throw ContractError(
          "chunk_counts_from_alignment: spans must be ordered, disjoint and "
          "inside the utterance (token " +
          std::to_string(i) + ")");
    prev_end = s.begin + s.len;
    int64_t last_frame = s.begin + s.len - 1;
    int64_t chunk = last_frame / chunk_size;
    out.token_chunk.push_back(static_cast<int>(chunk));
    out.counts[static_cast<std::size_t>(chunk)] += 1;
    if (out.counts[static_cast<std::size_t>(chunk)] > n_max)
      throw LabelError("chunk " + std::to_string(chunk) + " holds more than " +
                       std::to_string(n_max) +
                       " tokens; raise n_max or the chunk size");
  }
  return out;
}

AttnMask scama_cross_attention_mask(const ChunkAlignment& alignment,
                                    int64_t n_tokens, int64_t n_chunks) {
  if (static_cast<int64_t>(alignment.token_chunk.size()) != n_tokens)
    throw ContractError("scama mask: alignment covers " +
                        std::to_string(alignment.token_chunk.size()) +
                        " tokens, expected " + std::to_string(n_tokens));
  AttnMask m;
  m.rows = n_tokens;
  m.cols = n_chunks;
  m.allow.assign(static_cast<std::size_t>(n_tokens * n_chunks), 0);
  for (int64_t t = 0; t < n_tokens; ++t) {
    int tc = alignment.token_chunk[static_cast<std::size_t>(t)];
    if (tc >= n_chunks)
      throw ContractError("scama mask: token " + std::to_string(t) +
                          " sits in chunk " + std::to_string(tc) +
                          " beyond the " + std::to_string(n_chunks) +
                          " chunks");
    for (int64_t k = 0; k <= tc; ++k) m.allow[t * n_chunks + k] = 1;
  }
  return m;
}

AttnMask scama_frame_mask(const ChunkAlignment& alignment, int64_t n_tokens,
                          int64_t total_frames) {
  int64_t c = alignment.chunk_size;
  int64_t n_chunks = (total_frames + c - 1) / c;
  AttnMask chunk_mask =
      scama_cross_attention_mask(alignment, n_tokens, n_chunks);
  AttnMask m;
  m.rows = n_tokens;
  m.cols = total_frames;
  m.allow.assign(static_cast<std::size_t>(n_tokens * total_frames), 0);
  for (int64_t t = 0; t < n_tokens; ++t)
    for (int64_t f = 0; f < total_frames; ++f)
      m.allow[t * total_frames + f] = chunk_mask.allowed(t, f / c) ? 1 : 0;
  return m;
}

Tensor predictor_loss(const Tensor& probs, const std::vector<int>& counts,
                      Tape* tape) {
  return nll_sum_from_probs(probs, counts, tape);
}

Tensor joint_loss(const Tensor& l_e2e, const Tensor& l_pred, double alpha,
                  Tape* tape) {
  double e = l_e2e.item(), p = l_pred.item();
  if (!std::isfinite(e) || !std::isfinite(p))
    throw ContractError("joint_loss: non-finite component");
  if (e < 0.0 || p < 0.0)
    throw ContractError("joint_loss: negative loss component");
  return add(l_e2e, scale(l_pred, alpha, tape), tape);
}

}  // namespace uasr
