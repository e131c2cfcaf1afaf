// Command-line surface: synthetic corpus generation, training, evaluation
// and single-utterance streaming over feature files.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "uasr/checkpoint.hpp"
#include "uasr/dataset.hpp"
#include "uasr/metrics.hpp"
#include "uasr/model.hpp"
#include "uasr/streaming.hpp"
#include "uasr/train.hpp"

namespace {

std::string tokens_str(const std::vector<int>& toks) {
  std::string s;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i) s += " ";
    s += std::to_string(toks[i]);
  }
  return s;
}

int cmd_gen_data(const std::string& manifest_path, const std::string& out_dir,
                 int64_t seed_override) {
  uasr::DatasetManifest manifest =
      uasr::DatasetManifest::from_file(manifest_path);
  if (seed_override >= 0) manifest.seed = static_cast<uint64_t>(seed_override);
  uasr::Dataset ds = uasr::synth_dataset_generate(manifest);

  std::filesystem::create_directories(out_dir);
  manifest.to_file(out_dir + "/manifest.txt");
  auto dump_split = [&](const char* name,
                        const std::vector<uasr::Utterance>& split) {
    std::filesystem::create_directories(out_dir + "/" + name);
    std::ofstream idx(out_dir + "/" + name + ".tsv");
    idx << "# id\ttokens\tspans(begin:len)\tfeature_file\n";
    for (std::size_t i = 0; i < split.size(); ++i) {
      std::string feat = std::string(name) + "/" + std::to_string(i) + ".feat";
      uasr::write_features(out_dir + "/" + feat, split[i].features);
      idx << i << '\t' << tokens_str(split[i].tokens) << '\t';
      for (std::size_t s = 0; s < split[i].alignment.size(); ++s) {
        if (s) idx << ",";
        idx << split[i].alignment[s].begin << ":" << split[i].alignment[s].len;
      }
      idx << '\t' << feat << '\n';
    }
  };
  dump_split("train", ds.train);
  dump_split("dev", ds.dev);
  dump_split("test", ds.test);
  std::cout << "wrote " << ds.train.size() << " train / " << ds.dev.size()
            << " dev / " << ds.test.size() << " test utterances to " << out_dir
            << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& manifest_path,
              const std::string& out_dir, int64_t steps, int64_t batch_size,
              int64_t eval_every, uint64_t seed) {
  uasr::ModelConfig config = uasr::ModelConfig::from_file(config_path);
  uasr::DatasetManifest manifest =
      uasr::DatasetManifest::from_file(manifest_path);
  uasr::Dataset ds = uasr::synth_dataset_generate(manifest);
  uasr::ParamStore params = uasr::init_model(config, seed);
  uasr::OptimizerState opt = uasr::make_optimizer(config);

  std::filesystem::create_directories(out_dir);
  std::ofstream metrics(out_dir + "/metrics.tsv");
  if (!metrics) throw uasr::IoError("cannot write " + out_dir + "/metrics.tsv");

  uasr::TrainOptions opts;
  opts.steps = steps;
  opts.batch_size = batch_size;
  opts.eval_every = eval_every;
  opts.seed = seed;
  opts.out_dir = out_dir;
  uasr::TrainResult result =
      uasr::run_training_loop(config, ds, params, opt, opts, metrics);
  std::cout << "trained " << result.steps_run << " steps; final loss "
            << result.last_loss.l_total << "; dev TER online "
            << result.last_eval.ter_online << " offline "
            << result.last_eval.ter_offline << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint_path,
             const std::string& manifest_path, const std::string& split,
             int64_t chunk_size, const std::string& mode_str) {
  auto [params, config] = uasr::checkpoint_load(checkpoint_path);
  uasr::DatasetManifest manifest =
      uasr::DatasetManifest::from_file(manifest_path);
  uasr::Dataset ds = uasr::synth_dataset_generate(manifest);
  const std::vector<uasr::Utterance>* utts = nullptr;
  if (split == "train")
    utts = &ds.train;
  else if (split == "dev")
    utts = &ds.dev;
  else if (split == "test")
    utts = &ds.test;
  else
    throw uasr::ConfigError("split: expected train|dev|test, got '" + split +
                            "'");
  uasr::EvalMode mode;
  if (mode_str == "online")
    mode = uasr::EvalMode::kOnline;
  else if (mode_str == "offline")
    mode = uasr::EvalMode::kOffline;
  else if (mode_str == "both")
    mode = uasr::EvalMode::kBoth;
  else
    throw uasr::ConfigError("mode: expected online|offline|both, got '" +
                            mode_str + "'");

  uasr::EvalReport rep =
      uasr::evaluate_split(params, config, *utts, chunk_size, mode);
  std::cout << "# chunk_size\tsplit\tutterances\tref_tokens\tter_online\t"
               "ter_offline\n";
  std::cout << rep.chunk_size << '\t' << split << '\t' << rep.utterances
            << '\t' << rep.ref_tokens << '\t' << std::setprecision(6)
            << rep.ter_online << '\t' << rep.ter_offline << "\n";
  return 0;
}

int cmd_stream(const std::string& checkpoint_path,
               const std::string& feature_path, int64_t chunk_size) {
  auto [params, config] = uasr::checkpoint_load(checkpoint_path);
  uasr::Tensor feats = uasr::read_features(feature_path);
  if (feats.cols() != config.d_input)
    throw uasr::ConfigError(
        "feature width " + std::to_string(feats.cols()) +
        " does not match the model's d_input " + std::to_string(config.d_input));
  uasr::StreamSession session(params, config, chunk_size);
  int64_t T = feats.rows();
  for (int64_t f = 0; f < T; f += chunk_size) {
    int64_t len = std::min(chunk_size, T - f);
    uasr::PartialResult part =
        session.push_chunk(uasr::slice_rows(feats, f, len, nullptr));
    std::cout << "chunk " << part.chunk_index << ": +["
              << tokens_str(part.new_tokens) << "] hyp=["
              << tokens_str(part.hypothesis) << "]\n";
  }
  uasr::FinalResult fin = session.finalize();
  std::cout << "online  Y1=[" << tokens_str(fin.online_hypothesis) << "]\n";
  std::cout << "offline Y2=[" << tokens_str(fin.rectified_hypothesis) << "]\n";
  std::cout << "latency: chunk_size=" << fin.latency.chunk_size
            << " algorithmic_ms=" << fin.latency.algorithmic_ms
            << " online_rtf=" << std::setprecision(4) << fin.latency.online_rtf
            << " offline_rtf=" << fin.latency.offline_rtf << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-pass streaming/offline speech recognition, desk scale"};
  app.require_subcommand(1);

  std::string config_path, manifest_path, out_dir, checkpoint_path;
  std::string feature_path, split = "test", mode = "both";
  int64_t steps = 1000, batch_size = 8, eval_every = 50, chunk_size = 0;
  int64_t seed = 1, gen_seed = -1;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
  gen->add_option("--manifest", manifest_path, "manifest file")->required();
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--seed", gen_seed, "override the manifest seed");

  auto* train = app.add_subcommand("train", "train from scratch");
  train->add_option("--config", config_path, "model config file")->required();
  train->add_option("--manifest", manifest_path, "manifest file")->required();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--steps", steps, "training steps");
  train->add_option("--batch-size", batch_size, "utterances per step");
  train->add_option("--eval-every", eval_every, "metrics period (steps)");
  train->add_option("--seed", seed, "init/training seed");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("checkpoint", checkpoint_path, "checkpoint file")
      ->required();
  eval->add_option("--manifest", manifest_path, "manifest file")->required();
  eval->add_option("--split", split, "train|dev|test");
  eval->add_option("--chunk-size", chunk_size, "streaming chunk size")
      ->required();
  eval->add_option("--mode", mode, "online|offline|both");

  auto* stream = app.add_subcommand("stream", "stream one feature file");
  stream->add_option("checkpoint", checkpoint_path, "checkpoint file")
      ->required();
  stream->add_option("features", feature_path, "feature file")->required();
  stream->add_option("--chunk-size", chunk_size, "streaming chunk size")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(manifest_path, out_dir, gen_seed);
    if (train->parsed())
      return cmd_train(config_path, manifest_path, out_dir, steps, batch_size,
                       eval_every, static_cast<uint64_t>(seed));
    if (eval->parsed())
      return cmd_eval(checkpoint_path, manifest_path, split, chunk_size, mode);
    if (stream->parsed())
      return cmd_stream(checkpoint_path, feature_path, chunk_size);
  } catch (const uasr::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
