#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "uasr/dataset.hpp"
#include "uasr/model.hpp"
#include "uasr/optim.hpp"
#include "uasr/streaming.hpp"

namespace uasr {

enum class EvalMode { kOnline, kOffline, kBoth };

struct EvalReport {
  int64_t chunk_size = 0;
  double ter_online = -1.0;   // -1 when the mode skipped this pass
  double ter_offline = -1.0;
  int64_t utterances = 0;
  int64_t ref_tokens = 0;
};

// Streams every utterance through a fresh session at the given chunk size
// and aggregates corpus-level token error rates.
EvalReport evaluate_split(const ParamStore& params, const ModelConfig& config,
                          const std::vector<Utterance>& split,
                          int64_t chunk_size, EvalMode mode);

struct TrainOptions {
  int64_t steps = 0;
  int64_t batch_size = 8;
  int64_t eval_every = 50;     // metrics-log period (steps)
  uint64_t seed = 1;
  std::string out_dir;         // empty: no checkpoints written
};

struct TrainResult {
  int64_t steps_run = 0;
  LossReport last_loss;
  EvalReport last_eval;  // dev, at the largest configured chunk size
};

// Fixed-order batching over the train split with periodic dev evaluation.
// Writes one tab-separated metrics line per eval point to `metrics_log`
// (step, l_online, l_offline, l_pred, dev TER online/offline) and, when
// out_dir is set, a checkpoint per eval point plus a final checkpoint.
// A non-finite loss aborts with a NumericError naming the step.
TrainResult run_training_loop(const ModelConfig& config, const Dataset& data,
                              ParamStore& params, OptimizerState& opt,
                              const TrainOptions& options,
                              std::ostream& metrics_log);

}  // namespace uasr
