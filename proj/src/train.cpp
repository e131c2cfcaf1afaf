#include "uasr/train.hpp"

#include <cmath>
#include <filesystem>
#include <iomanip>

#include "uasr/checkpoint.hpp"
#include "uasr/metrics.hpp"

namespace uasr {

EvalReport evaluate_split(const ParamStore& params, const ModelConfig& config,
                          const std::vector<Utterance>& split,
                          int64_t chunk_size, EvalMode mode) {
  if (!config.has_chunk_size(chunk_size))
    throw ConfigError("chunk_size " + std::to_string(chunk_size) +
                      " is not in the trained set {" +
                      int_list_str(config.chunk_size_set) + "}");
  EvalReport report;
  report.chunk_size = chunk_size;
  TerAccumulator online, offline;
  for (const Utterance& utt : split) {
    StreamSession session(params, config, chunk_size);
    int64_t T = utt.features.rows();
    for (int64_t f = 0; f < T; f += chunk_size) {
      int64_t len = std::min(chunk_size, T - f);
      session.push_chunk(slice_rows(utt.features, f, len, nullptr));
    }
    FinalResult fin = session.finalize();
    if (mode != EvalMode::kOffline) online.add(utt.tokens, fin.online_hypothesis);
    if (mode != EvalMode::kOnline)
      offline.add(utt.tokens, fin.rectified_hypothesis);
    report.utterances += 1;
  }
  report.ref_tokens =
      mode != EvalMode::kOffline ? online.ref_tokens : offline.ref_tokens;
  if (mode != EvalMode::kOffline) report.ter_online = online.ter();
  if (mode != EvalMode::kOnline) report.ter_offline = offline.ter();
  return report;
}

namespace {

void write_metrics_header(std::ostream& os) {
  os << "# step\tl_online\tl_offline\tl_pred\tdev_ter_online\tdev_ter_offline\n";
}

void write_metrics_line(std::ostream& os, int64_t step,
                        const LossReport& loss, const EvalReport& eval) {
  os << step << '\t' << std::setprecision(10) << loss.l_online << '\t'
     << loss.l_offline << '\t' << loss.l_pred << '\t' << eval.ter_online
     << '\t' << eval.ter_offline << '\n';
  os.flush();
}

}  // namespace

TrainResult run_training_loop(const ModelConfig& config, const Dataset& data,
                              ParamStore& params, OptimizerState& opt,
                              const TrainOptions& options,
                              std::ostream& metrics_log) {
  if (data.train.empty())
    throw ContractError("run_training_loop: empty training split");
  // dev TER is tracked at the largest configured chunk size
  int64_t eval_chunk = config.chunk_size_set.front();
  for (int64_t c : config.chunk_size_set) eval_chunk = std::max(eval_chunk, c);

  const bool save = !options.out_dir.empty();
  if (save) std::filesystem::create_directories(options.out_dir);
  auto checkpoint_path = [&](const std::string& tag) {
    return options.out_dir + "/checkpoint_" + tag + ".uasr";
  };
  if (save) checkpoint_save(params, config, checkpoint_path("init"));

  write_metrics_header(metrics_log);
  RngStream rng(options.seed);
  TrainResult result;

  int64_t cursor = 0;
  for (int64_t step = 1; step <= options.steps; ++step) {
    std::vector<Utterance> batch;
    batch.reserve(static_cast<std::size_t>(options.batch_size));
    for (int64_t i = 0; i < options.batch_size; ++i) {
      batch.push_back(data.train[static_cast<std::size_t>(cursor)]);
      cursor = (cursor + 1) % static_cast<int64_t>(data.train.size());
    }
    LossReport loss;
    try {
      loss = universal_training_step(batch, params, opt, config, rng);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step) + ": " + e.what());
    }
    result.last_loss = loss;
    result.steps_run = step;

    if (step % options.eval_every == 0 || step == options.steps) {
      EvalReport eval = evaluate_split(params, config, data.dev, eval_chunk,
                                       EvalMode::kBoth);
      result.last_eval = eval;
      write_metrics_line(metrics_log, step, loss, eval);
      if (save) checkpoint_save(params, config, checkpoint_path("latest"));
    }
  }
  if (options.steps == 0) {
    EvalReport eval;
    if (!data.dev.empty())
      eval = evaluate_split(params, config, data.dev, eval_chunk,
                            EvalMode::kBoth);
    result.last_eval = eval;
    write_metrics_line(metrics_log, 0, result.last_loss, eval);
  }
  if (save) checkpoint_save(params, config, checkpoint_path("final"));
  return result;
}

}  // namespace uasr
