#include "uasr/streaming.hpp"

#include <chrono>

namespace uasr {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

}  // namespace

double latency_of_chunk_size(int64_t chunk_size, double frame_period_ms) {
  if (chunk_size < 1)
    throw ContractError("latency_of_chunk_size: chunk size must be >= 1");
  return static_cast<double>(chunk_size) * frame_period_ms;
}

StreamSession::StreamSession(const ParamStore& params,
                             const ModelConfig& config, int64_t chunk_size)
    : params_(params),
      config_(config),
      chunk_size_(chunk_size),
      encoder_state_(make_online_encoder_state(config)),
      decoder_(params, config) {
  if (!config.has_chunk_size(chunk_size))
    throw ConfigError("chunk_size " + std::to_string(chunk_size) +
                      " is not in the trained set {" +
                      int_list_str(config.chunk_size_set) + "}");
}

PartialResult StreamSession::push_chunk(const Tensor& x_chunk) {
  if (finalized_)
    throw StateError("push_chunk: session already finalized");
  if (x_chunk.rows() > chunk_size_)
    throw ContractError("push_chunk: got " + std::to_string(x_chunk.rows()) +
                        " frames, chunk size is " +
                        std::to_string(chunk_size_));
  auto t0 = std::chrono::steady_clock::now();
  FwdCtx ctx;  // inference: no tape, no dropout
  Tensor e1_k =
      online_encoder_chunk(x_chunk, params_, config_, encoder_state_, ctx);
  raw_frames_ = raw_frames_.defined()
                    ? concat_rows({raw_frames_, x_chunk}, nullptr)
                    : x_chunk;
  e1_rows_ =
      e1_rows_.defined() ? concat_rows({e1_rows_, e1_k}, nullptr) : e1_k;
  decoder_.extend_memory(e1_k);

  PredictorParams pp = predictor_params(params_, chunk_size_);
  Tensor probs =
      predictor_forward(splice_chunk(e1_k, chunk_size_, nullptr), pp, nullptr);
  int64_t n_k = argmax(probs.data());
  predicted_total_ += n_k;

  PartialResult out;
  out.chunk_index = chunk_counter_;
  for (int64_t i = 0; i < n_k; ++i) out.new_tokens.push_back(decoder_.step());
  out.hypothesis = decoder_.emitted();
  out.predictor_probs.assign(probs.data().begin(), probs.data().end());

  frames_ += x_chunk.rows();
  chunk_counter_ += 1;
  online_seconds_ += seconds_since(t0);
  return out;
}

FinalResult StreamSession::finalize() {
  if (finalized_) throw StateError("finalize: session already finalized");
  finalized_ = true;

  FinalResult out;
  out.online_hypothesis = decoder_.emitted();
  out.latency.chunk_size = chunk_size_;
  out.latency.frame_period_ms = config_.frame_period_ms;
  out.latency.algorithmic_ms =
      latency_of_chunk_size(chunk_size_, config_.frame_period_ms);

  double audio_seconds =
      static_cast<double>(frames_) * config_.frame_period_ms / 1000.0;
  out.latency.online_rtf =
      audio_seconds > 0.0 ? online_seconds_ / audio_seconds : 0.0;

  if (frames_ == 0) return out;  // empty session: both hypotheses empty

  auto t0 = std::chrono::steady_clock::now();
  FwdCtx ctx;
  // greedy autoregressive second pass over the shared chunk memory
  Tensor cat = concat_cols({raw_frames_, e1_rows_}, nullptr);
  Tensor e2 = offline_encoder_forward(
      stride_conv_downsample(cat, params_, config_, ctx), params_, config_,
      ctx);
  Tensor e3;
  if (config_.text_encoder_enabled)
    e3 = text_encoder_forward(out.online_hypothesis, params_, config_, ctx);
  int64_t cap = 2 * ((frames_ + 1) / 2);
  std::vector<int> emitted;
  for (int64_t step = 0; step < cap; ++step) {
    std::vector<int> dec_in;
    dec_in.reserve(emitted.size() + 1);
    dec_in.push_back(kBosToken);
    dec_in.insert(dec_in.end(), emitted.begin(), emitted.end());
    Tensor logits =
        offline_decoder_logits(dec_in, e2, e3, params_, config_, ctx);
    Tensor last = slice_rows(logits, logits.rows() - 1, 1, nullptr);
    int tok = static_cast<int>(argmax(last.data()));
    if (tok == kEosToken) break;
    emitted.push_back(tok);
  }
  out.rectified_hypothesis = std::move(emitted);
  out.latency.offline_rtf =
      audio_seconds > 0.0 ? seconds_since(t0) / audio_seconds : 0.0;
  return out;
}

}  // namespace uasr
