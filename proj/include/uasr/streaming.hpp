#pragma once

#include <cstdint>
#include <vector>

#include "uasr/model.hpp"

namespace uasr {

struct PartialResult {
  int64_t chunk_index = 0;
  std::vector<int> new_tokens;
  std::vector<int> hypothesis;          // cumulative emissions so far
  std::vector<double> predictor_probs;  // p_k over counts 0..n_max
};

struct LatencyReport {
  int64_t chunk_size = 0;
  double frame_period_ms = 0.0;
  double algorithmic_ms = 0.0;  // chunk_size * frame period
  double online_rtf = 0.0;      // wall clock per audio second, informational
  double offline_rtf = 0.0;
};

struct FinalResult {
  std::vector<int> online_hypothesis;     // Y1
  std::vector<int> rectified_hypothesis;  // Y2, replaces Y1 wholesale
  LatencyReport latency;
};

// Maximum algorithmic delay of the online pass for a chunk size.
double latency_of_chunk_size(int64_t chunk_size, double frame_period_ms);

// One utterance's online session: push chunks, collect incremental
// emissions, then finalize to run the rectification pass. Pure inference;
// many sessions may share one immutable parameter store.
class StreamSession {
 public:
  StreamSession(const ParamStore& params, const ModelConfig& config,
                int64_t chunk_size);

  // Feeds up to chunk_size frames; returns this chunk's emissions.
  PartialResult push_chunk(const Tensor& x_chunk);
  // Runs the offline pass over everything accumulated and closes the
  // session. Callable once.
  FinalResult finalize();

  const std::vector<int>& hypothesis() const { return decoder_.emitted(); }
  // Accumulated chunk memory; undefined before the first push.
  const Tensor& chunk_memory() const { return e1_rows_; }
  int64_t frames_consumed() const { return frames_; }
  int64_t chunks_consumed() const { return chunk_counter_; }
  bool finalized() const { return finalized_; }
  // Sum of predictor argmaxes over all pushed chunks.
  int64_t predicted_token_total() const { return predicted_total_; }

 private:
  const ParamStore& params_;
  const ModelConfig& config_;
  int64_t chunk_size_;
  OnlineEncoderState encoder_state_;
  IncrementalDecoder decoder_;
  Tensor raw_frames_;   // accumulated input rows
  Tensor e1_rows_;      // accumulated chunk memory
  int64_t frames_ = 0;
  int64_t chunk_counter_ = 0;
  int64_t predicted_total_ = 0;
  double online_seconds_ = 0.0;
  bool finalized_ = false;
};

}  // namespace uasr
