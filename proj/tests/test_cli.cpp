#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_util.hpp"
#include "uasr/checkpoint.hpp"
#include "uasr/dataset.hpp"
#include "uasr/metrics.hpp"
#include "uasr/train.hpp"

using namespace uasr;

namespace {

DatasetManifest tiny_manifest() {
  DatasetManifest m;
  m.seed = 404;
  m.vocab_size = 6;
  m.utterance_count = 24;
  m.feature_dim = 3;
  m.noise_stdev = 0.05;
  m.transcript_len_min = 2;
  m.transcript_len_max = 4;
  return m;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_input = 3;
  c.d_model = 4;
  c.heads = 2;
  c.vocab_size = 9;  // 6 content + specials
  c.online_encoder_layers = 1;
  c.online_decoder_layers = 1;
  c.offline_encoder_layers = 1;
  c.text_encoder_layers = 1;
  c.offline_decoder_layers = 1;
  c.fsmn_l_online = 2;
  c.fsmn_l_left = 2;
  c.fsmn_l_right = 1;
  c.d_ff = 8;
  c.d_hidden_predictor = 4;
  c.chunk_size_set = {2, 4};
  c.n_max = 4;
  c.dropout = 0.0;
  return c;
}

std::string temp_path(const std::string& leaf) {
  return (std::filesystem::temp_directory_path() / leaf).string();
}

std::vector<uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<uint8_t>& buf) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
}

}  // namespace

TEST_CASE("synthetic corpus generation") {
  DatasetManifest m = tiny_manifest();
  Dataset a = synth_dataset_generate(m);
  Dataset b = synth_dataset_generate(m);

  CHECK(a.train.size() == 20);
  CHECK(a.dev.size() == 2);
  CHECK(a.test.size() == 2);

  // bitwise reproducibility from (manifest, seed)
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].tokens == b.train[i].tokens);
    CHECK(test::bitwise_equal(a.train[i].features, b.train[i].features));
  }

  // spans: ordered, lengths in [3,6], covering [0, T) exactly
  for (const Utterance& u : a.train) {
    CHECK(u.tokens.size() == u.alignment.size());
    int64_t cursor = 0;
    for (const Span& s : u.alignment) {
      CHECK(s.begin == cursor);
      CHECK(s.len >= 3);
      CHECK(s.len <= 6);
      cursor += s.len;
    }
    CHECK(cursor == u.features.rows());
    for (int t : u.tokens) {
      CHECK(t >= kNumSpecialTokens);
      CHECK(t < kNumSpecialTokens + m.vocab_size);
    }
  }

  // zero noise: identical transcripts yield identical features
  DatasetManifest clean = m;
  clean.noise_stdev = 0.0;
  clean.utterance_count = 40;
  Dataset c = synth_dataset_generate(clean);
  bool found_pair = false;
  for (std::size_t i = 0; i < c.train.size() && !found_pair; ++i)
    for (std::size_t j = i + 1; j < c.train.size(); ++j)
      if (c.train[i].tokens == c.train[j].tokens) {
        CHECK(test::bitwise_equal(c.train[i].features, c.train[j].features));
        found_pair = true;
        break;
      }
  CHECK(found_pair);  // seed chosen so a repeated transcript exists

  DatasetManifest bad = m;
  bad.vocab_size = 1;
  CHECK_THROWS_AS(synth_dataset_generate(bad), ConfigError);
}

TEST_CASE("token error rate") {
  CHECK(levenshtein({1, 2, 3}, {1, 2, 3}) == 0);
  CHECK(levenshtein({1, 2}, {2}) == 1);
  CHECK(levenshtein({}, {5, 6}) == 2);

  TerAccumulator acc;
  acc.add({1, 2}, {2});  // 1 edit / 2 ref
  CHECK(acc.ter() == doctest::Approx(0.5));

  // corpus aggregation is edits-sum over ref-sum, not a mean of ratios
  TerAccumulator corpus;
  corpus.add({1, 2, 3, 4, 5, 6, 7, 8}, {1, 2, 3, 4, 5, 6, 7, 8});
  corpus.add({1, 2}, {9, 9});
  CHECK(corpus.ter() == doctest::Approx(2.0 / 10.0));
  double mean_of_ratios = (0.0 + 1.0) / 2.0;
  CHECK(corpus.ter() != doctest::Approx(mean_of_ratios));
}

TEST_CASE("checkpoint round trip and corruption rejection") {
  ModelConfig cfg = tiny_config();
  ParamStore params = init_model(cfg, 99);
  std::string p1 = temp_path("uasr_test_ckpt1.uasr");
  std::string p2 = temp_path("uasr_test_ckpt2.uasr");

  checkpoint_save(params, cfg, p1);
  auto [loaded, cfg2] = checkpoint_load(p1);
  CHECK(cfg2.to_kv() == cfg.to_kv());

  // a second save of the loaded store is byte-identical (32-bit fixpoint)
  checkpoint_save(loaded, cfg2, p2);
  CHECK(slurp(p1) == slurp(p2));

  // values survive within f32 rounding, and the reloaded set is exact
  for (auto& [name, t] : params) {
    const Tensor& l = loaded.at(name);
    for (std::size_t i = 0; i < t.data().size(); ++i)
      CHECK(static_cast<float>(t.data()[i]) ==
            static_cast<float>(l.data()[i]));
  }
  auto [again, cfg3] = checkpoint_load(p2);
  for (auto& [name, t] : loaded)
    CHECK(test::bitwise_equal(t, again.at(name)));

  // corrupt magic
  auto buf = slurp(p1);
  auto bad = buf;
  bad[0] = 'X';
  spit(p2, bad);
  CHECK_THROWS_WITH_AS(checkpoint_load(p2), doctest::Contains("offset 0"),
                       IoError);

  // truncation
  auto cut = buf;
  cut.resize(cut.size() - 4);
  spit(p2, cut);
  CHECK_THROWS_AS(checkpoint_load(p2), IoError);

  // bit flip in the middle trips the checksum
  auto flipped = buf;
  flipped[flipped.size() / 2] ^= 0x40;
  spit(p2, flipped);
  CHECK_THROWS_WITH_AS(checkpoint_load(p2), doctest::Contains("checksum"),
                       IoError);

  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("feature file round trip") {
  RngStream rng(5);
  Tensor f = test::random_tensor({4, 3}, rng, 1.0, false);
  std::string path = temp_path("uasr_test_features.feat");
  write_features(path, f);
  Tensor g = read_features(path);
  CHECK(g.shape() == f.shape());
  for (std::size_t i = 0; i < f.data().size(); ++i)
    CHECK(static_cast<float>(f.data()[i]) == static_cast<float>(g.data()[i]));

  auto buf = slurp(path);
  buf.push_back(0);
  spit(path, buf);
  CHECK_THROWS_WITH_AS(read_features(path), doctest::Contains("trailing"),
                       IoError);
  std::remove(path.c_str());
}

TEST_CASE("training loop determinism, checkpoints and NaN abort") {
  ModelConfig cfg = tiny_config();
  DatasetManifest m = tiny_manifest();
  Dataset data = synth_dataset_generate(m);

  TrainOptions opts;
  opts.steps = 4;
  opts.batch_size = 4;
  opts.eval_every = 2;
  opts.seed = 5;

  auto run = [&] {
    ParamStore params = init_model(cfg, 5);
    OptimizerState opt = make_optimizer(cfg);
    std::ostringstream log;
    run_training_loop(cfg, data, params, opt, opts, log);
    return log.str();
  };
  std::string log1 = run(), log2 = run();
  CHECK(log1 == log2);
  CHECK(log1.find("# step") == 0);

  // steps=0 still writes the initial checkpoint and an eval line
  std::string out_dir = temp_path("uasr_test_run");
  std::filesystem::remove_all(out_dir);
  TrainOptions zero = opts;
  zero.steps = 0;
  zero.out_dir = out_dir;
  ParamStore params = init_model(cfg, 5);
  OptimizerState opt = make_optimizer(cfg);
  std::ostringstream log;
  run_training_loop(cfg, data, params, opt, zero, log);
  CHECK(std::filesystem::exists(out_dir + "/checkpoint_init.uasr"));
  CHECK(std::filesystem::exists(out_dir + "/checkpoint_final.uasr"));
  std::filesystem::remove_all(out_dir);

  // poisoned parameters abort with the failing step named
  ParamStore poisoned = init_model(cfg, 5);
  poisoned.at("in_proj.w").mutable_data()[0] = std::nan("");
  OptimizerState opt2 = make_optimizer(cfg);
  std::ostringstream log3;
  TrainOptions one = opts;
  one.steps = 1;
  CHECK_THROWS_WITH_AS(
      run_training_loop(cfg, data, poisoned, opt2, one, log3),
      doctest::Contains("step 1"), NumericError);
}

TEST_CASE("evaluation guards the trained chunk sizes") {
  ModelConfig cfg = tiny_config();
  ParamStore params = init_model(cfg, 1);
  Dataset data = synth_dataset_generate(tiny_manifest());
  CHECK_THROWS_AS(
      evaluate_split(params, cfg, data.test, 3, EvalMode::kBoth),
      ConfigError);
  EvalReport rep = evaluate_split(params, cfg, data.test, 2, EvalMode::kBoth);
  CHECK(rep.utterances == 2);
  CHECK(rep.ter_online >= 0.0);
  CHECK(rep.ter_offline >= 0.0);
}
