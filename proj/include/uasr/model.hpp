#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uasr/attention.hpp"
#include "uasr/dataset.hpp"
#include "uasr/kv.hpp"
#include "uasr/optim.hpp"
#include "uasr/params.hpp"
#include "uasr/rng.hpp"
#include "uasr/runctx.hpp"
#include "uasr/scama.hpp"

namespace uasr {

// Reserved vocabulary ids; content tokens start at kNumSpecialTokens.
inline constexpr int kPadToken = 0;
inline constexpr int kBosToken = 1;
inline constexpr int kEosToken = 2;
inline constexpr int kNumSpecialTokens = 3;

enum class TextInputMode { kGreedy, kGroundTruth };

struct ModelConfig {
  int64_t d_input = 8;
  int64_t d_model = 32;
  int64_t heads = 4;
  int64_t vocab_size = 35;  // content tokens + PAD/BOS/EOS
  int64_t online_encoder_layers = 2;
  int64_t online_decoder_layers = 1;
  int64_t offline_encoder_layers = 1;
  int64_t text_encoder_layers = 1;
  int64_t offline_decoder_layers = 1;
  int64_t fsmn_l_online = 4;   // unidirectional filter order L
  int64_t fsmn_l_left = 2;     // bidirectional look-back order
  int64_t fsmn_l_right = 2;    // bidirectional look-ahead order
  int64_t d_ff = 128;
  int64_t d_hidden_predictor = 32;
  std::vector<int64_t> chunk_size_set = {2, 4, 8};
  int64_t n_max = 6;
  int64_t stride_kernel = 5;
  int64_t stride = 2;
  double alpha = 0.1;
  double lambda_offline = 1.0;
  double label_smoothing = 0.1;
  double dropout = 0.1;
  double frame_period_ms = 60.0;
  bool text_encoder_enabled = true;
  TextInputMode text_input_mode = TextInputMode::kGreedy;
  // learning-rate schedule / Adam constants
  double sched_k = 4.0;
  double sched_d_model = 512.0;
  double sched_warmup = 8000.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-9;

  void validate() const;  // ConfigError names the offending field
  bool has_chunk_size(int64_t c) const;
  int64_t content_vocab() const { return vocab_size - kNumSpecialTokens; }

  KvMap to_kv() const;
  static ModelConfig from_kv(const KvMap& kv);  // unknown keys are errors
  static ModelConfig from_file(const std::string& path);
  void to_file(const std::string& path) const;
};

// ---- parameter inventory ----------------------------------------------

enum class InitKind { kFanInUniform, kZeros, kOnes };

struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind kind;
};

// The full list of named tensors, derivable from the config alone.
std::vector<ParamSpec> param_inventory(const ModelConfig& config);

// Deterministic initialization: U(-s, s) with s = 1/sqrt(fan_in) for
// weights, zeros for biases/beta, ones for layer-norm gain.
ParamStore init_model(const ModelConfig& config, uint64_t seed);

OptimizerState make_optimizer(const ModelConfig& config);

// ---- typed views over the store ----------------------------------------

SanMLayerParams san_m_layer_params(const ParamStore& params,
                                   const std::string& prefix,
                                   const ModelConfig& config,
                                   bool unidirectional);

struct DecoderLayerParams {
  Tensor ln_f_gamma, ln_f_beta;
  Tensor fsmn_taps;  // [L x d_model], unidirectional
  Tensor ln_c_gamma, ln_c_beta;
  MhaProj cross;
  Tensor ln2_gamma, ln2_beta;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct OfflineDecoderLayerParams {
  Tensor ln_f_gamma, ln_f_beta;
  Tensor fsmn_taps;
  Tensor ln_c_gamma, ln_c_beta;
  Tensor ac_wq, ac_wk, ac_wv;     // acoustic attention over E2
  Tensor sem_wq, sem_wk, sem_wv;  // semantic attention over E3
  Tensor merge_w, merge_b;        // [2*d x d], [d]
  Tensor ln2_gamma, ln2_beta;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

PredictorParams predictor_params(const ParamStore& params, int64_t chunk_size);

// ---- forward passes ------------------------------------------------------

struct OnlineEncoderState {
  std::vector<LayerStreamState> layers;
  int64_t frames = 0;
  int64_t chunks = 0;
};

OnlineEncoderState make_online_encoder_state(const ModelConfig& config);

// Input projection + stacked chunk-incremental layers + final norm.
// Returns the chunk memory E1_m and advances every layer state.
Tensor online_encoder_chunk(const Tensor& x_chunk, const ParamStore& params,
                            const ModelConfig& config,
                            OnlineEncoderState& state, const FwdCtx& ctx);

// Oracle: the same stack evaluated on the whole sequence with block masks.
Tensor online_encoder_oracle_full(const Tensor& x, const ParamStore& params,
                                  const ModelConfig& config,
                                  int64_t chunk_size, const FwdCtx& ctx);

// Teacher-forced first-pass decoder: memory-block layers over the embedded
// (BOS-shifted) target prefix with cross-attention under the frame-level
// truncation mask. Returns vocab logits, one row per target position.
Tensor online_decoder_forward(const std::vector<int>& input_tokens,
                              const Tensor& e1, const AttnMask& frame_mask,
                              const ParamStore& params,
                              const ModelConfig& config, const FwdCtx& ctx);

// Stride-2 downsampling conv (odd kernel, zero padding, output length
// exactly ceil(T/2)) followed by ReLU and layer norm.
Tensor stride_conv_downsample(const Tensor& x_cat, const ParamStore& params,
                              const ModelConfig& config, const FwdCtx& ctx);

Tensor offline_encoder_forward(const Tensor& x_downsampled,
                               const ParamStore& params,
                               const ModelConfig& config, const FwdCtx& ctx);

// BOS-prefixed token sequence -> semantic memory E3.
Tensor text_encoder_forward(const std::vector<int>& tokens,
                            const ParamStore& params,
                            const ModelConfig& config, const FwdCtx& ctx);

// Dual-attention decoder over acoustic memory E2 and semantic memory E3
// (E3 undefined when the text encoder is disabled). Returns vocab logits.
Tensor offline_decoder_logits(const std::vector<int>& input_tokens,
                              const Tensor& e2, const Tensor& e3,
                              const ParamStore& params,
                              const ModelConfig& config, const FwdCtx& ctx);

// Whole second pass: concat(x, E1) -> stride conv -> full-sequence encoder
// -> E2; text encoder over first-pass tokens -> E3; dual-attention decoder
// with teacher-forced inputs. Returns vocab logits per target position.
Tensor offline_forward(const Tensor& x_full, const Tensor& e1_full,
                       const std::vector<int>& y1_tokens,
                       const std::vector<int>& decoder_input_tokens,
                       const ParamStore& params, const ModelConfig& config,
                       const FwdCtx& ctx);

// ---- incremental first-pass decoding ------------------------------------

// Greedy, token-at-a-time first-pass decoder over a growing memory. Shared
// by the streaming runtime and by training's detached first pass.
class IncrementalDecoder {
 public:
  IncrementalDecoder(const ParamStore& params, const ModelConfig& config);

  // Appends freshly produced chunk-memory rows (values only, no tape).
  void extend_memory(const Tensor& e1_chunk);
  // Runs one greedy step conditioned on everything emitted so far and all
  // memory rows seen so far; returns the emitted token id.
  int step();

  const std::vector<int>& emitted() const { return emitted_; }
  int64_t memory_rows() const { return memory_rows_; }

 private:
  struct LayerState {
    Tensor mem_k, mem_v;    // projected memory caches
    Tensor fsmn_tail;       // last L-1 pre-conv rows on the target side
  };

  const ParamStore& params_;
  const ModelConfig& config_;
  std::vector<LayerState> layers_;
  std::vector<int> emitted_;
  int64_t memory_rows_ = 0;
};

// ---- training ------------------------------------------------------------

int64_t dlt_sample_chunk_size(const ModelConfig& config, RngStream& rng);

struct LossReport {
  double l_online = 0.0;
  double l_offline = 0.0;
  double l_pred = 0.0;
  double l_total = 0.0;
};

// Builds the joint loss graph for a batch on `tape`:
//   l_total = mean l_online + lambda_offline * mean l_offline
//           + alpha * mean l_pred.
// Chunk sizes are drawn per utterance from `rng`; dropout masks come from
// the same stream. Pure given (batch, params, config, rng state).
Tensor universal_training_loss(const std::vector<Utterance>& batch,
                               const ParamStore& params,
                               const ModelConfig& config, RngStream& rng,
                               Tape* tape, LossReport* report);

// Loss + backward + Adam update; returns the loss report.
LossReport universal_training_step(const std::vector<Utterance>& batch,
                                   ParamStore& params, OptimizerState& opt,
                                   const ModelConfig& config, RngStream& rng);

}  // namespace uasr
