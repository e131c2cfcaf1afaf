#pragma once

#include <cstdint>
#include <vector>

#include "uasr/ops.hpp"
#include "uasr/tensor.hpp"

namespace uasr {

// Frame span of one token inside an utterance: [begin, begin+len).
struct Span {
  int64_t begin = 0;
  int64_t len = 0;
};

// Ground-truth token counts per chunk plus each token's chunk index.
struct ChunkAlignment {
  int64_t chunk_size = 0;
  std::vector<int> counts;       // t_k, one per chunk
  std::vector<int> token_chunk;  // chunk index of each target token

  int64_t total_tokens() const {
    int64_t n = 0;
    for (int c : counts) n += c;
    return n;
  }
};

// Token-count head over the spliced chunk memory; classes are 0..n_max.
struct PredictorParams {
  Tensor w1;  // [(c*d_model) x d_hidden]
  Tensor b1;  // [d_hidden]
  Tensor w2;  // [d_hidden x (n_max+1)]
  Tensor b2;  // [n_max+1]
};

// Row-major flatten of a chunk to [1 x (c*d_model)], zero padded on the
// right when the chunk is shorter than `chunk_size` rows.
Tensor splice_chunk(const Tensor& encoder_chunk, int64_t chunk_size,
                    Tape* tape);

// softmax(relu(h W1 + b1) W2 + b2) -> [1 x (n_max+1)]
Tensor predictor_forward(const Tensor& h_spliced, const PredictorParams& p,
                         Tape* tape);

// Assigns each token to the chunk holding its LAST aligned frame. Throws
// LabelError naming the chunk when a count exceeds n_max.
ChunkAlignment chunk_counts_from_alignment(const std::vector<Span>& spans,
                                           int64_t total_frames,
                                           int64_t chunk_size, int n_max);

// allow(token, chunk) <=> chunk <= token_chunk[token]
AttnMask scama_cross_attention_mask(const ChunkAlignment& alignment,
                                    int64_t n_tokens, int64_t n_chunks);

// Chunk-level mask expanded to encoder-frame granularity (each chunk column
// repeated by the chunk's frame count; the last chunk may be short).
AttnMask scama_frame_mask(const ChunkAlignment& alignment, int64_t n_tokens,
                          int64_t total_frames);

// Sum over chunks of -log p_k[t_k] (no label smoothing).
Tensor predictor_loss(const Tensor& probs, const std::vector<int>& counts,
                      Tape* tape);

// l_e2e + alpha * l_pred over scalar tensors; components must be finite
// and non-negative.
Tensor joint_loss(const Tensor& l_e2e, const Tensor& l_pred, double alpha,
                  Tape* tape);

}  // namespace uasr
