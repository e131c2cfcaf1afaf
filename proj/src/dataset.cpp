#include "uasr/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "uasr/model.hpp"
#include "uasr/rng.hpp"

namespace uasr {

namespace {

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void DatasetManifest::validate() const {
  if (vocab_size < 2)
    throw ConfigError("vocab_size: need at least 2 content tokens");
  if (utterance_count < 1)
    throw ConfigError("utterance_count: must be >= 1");
  if (feature_dim < 1) throw ConfigError("feature_dim: must be >= 1");
  if (template_len_min < 1 || template_len_max < template_len_min)
    throw ConfigError("template_len_min/max: need 1 <= min <= max");
  if (transcript_len_min < 1 || transcript_len_max < transcript_len_min)
    throw ConfigError("transcript_len_min/max: need 1 <= min <= max");
  if (noise_stdev < 0.0) throw ConfigError("noise_stdev: must be >= 0");
  if (split_train < 0.0 || split_dev < 0.0 || split_test < 0.0 ||
      split_train + split_dev + split_test <= 0.0)
    throw ConfigError("split weights: must be non-negative with positive sum");
}

KvMap DatasetManifest::to_kv() const {
  KvMap kv;
  kv["seed"] = std::to_string(seed);
  kv["vocab_size"] = std::to_string(vocab_size);
  kv["utterance_count"] = std::to_string(utterance_count);
  kv["feature_dim"] = std::to_string(feature_dim);
  kv["template_len_min"] = std::to_string(template_len_min);
  kv["template_len_max"] = std::to_string(template_len_max);
  kv["transcript_len_min"] = std::to_string(transcript_len_min);
  kv["transcript_len_max"] = std::to_string(transcript_len_max);
  kv["noise_stdev"] = fmt_double(noise_stdev);
  kv["split_train"] = fmt_double(split_train);
  kv["split_dev"] = fmt_double(split_dev);
  kv["split_test"] = fmt_double(split_test);
  return kv;
}

DatasetManifest DatasetManifest::from_kv(const KvMap& kv) {
  DatasetManifest m;
  const KvMap known = m.to_kv();
  for (const auto& [k, v] : kv)
    if (!known.count(k)) throw ConfigError("unknown manifest key '" + k + "'");
  if (kv.count("seed"))
    m.seed = static_cast<uint64_t>(kv_get_int(kv, "seed"));
  auto geti = [&](const char* k, int64_t& out) {
    if (kv.count(k)) out = kv_get_int(kv, k);
  };
  auto getd = [&](const char* k, double& out) {
    if (kv.count(k)) out = kv_get_double(kv, k);
  };
  geti("vocab_size", m.vocab_size);
  geti("utterance_count", m.utterance_count);
  geti("feature_dim", m.feature_dim);
  geti("template_len_min", m.template_len_min);
  geti("template_len_max", m.template_len_max);
  geti("transcript_len_min", m.transcript_len_min);
  geti("transcript_len_max", m.transcript_len_max);
  getd("noise_stdev", m.noise_stdev);
  getd("split_train", m.split_train);
  getd("split_dev", m.split_dev);
  getd("split_test", m.split_test);
  m.validate();
  return m;
}

DatasetManifest DatasetManifest::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_kv(kv_parse(ss.str()));
}

void DatasetManifest::to_file(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest file: " + path);
  out << kv_serialize(to_kv());
}

Dataset synth_dataset_generate(const DatasetManifest& m) {
  m.validate();
  RngStream rng(m.seed);

  // one fixed feature template per content token
  std::vector<std::vector<double>> templates(
      static_cast<std::size_t>(m.vocab_size));
  std::vector<int64_t> template_len(static_cast<std::size_t>(m.vocab_size));
  for (int64_t tok = 0; tok < m.vocab_size; ++tok) {
    int64_t len = rng.uniform_int(static_cast<int>(m.template_len_min),
                                  static_cast<int>(m.template_len_max));
    template_len[static_cast<std::size_t>(tok)] = len;
    auto& tpl = templates[static_cast<std::size_t>(tok)];
    tpl.resize(static_cast<std::size_t>(len * m.feature_dim));
    for (double& v : tpl) v = rng.normal();
  }

  std::vector<Utterance> all;
  all.reserve(static_cast<std::size_t>(m.utterance_count));
  for (int64_t u = 0; u < m.utterance_count; ++u) {
    int64_t n_tok = rng.uniform_int(static_cast<int>(m.transcript_len_min),
                                    static_cast<int>(m.transcript_len_max));
    n_tok = std::min(n_tok, m.vocab_size);
    Utterance utt;
    utt.tokens.reserve(static_cast<std::size_t>(n_tok));
    int64_t total_frames = 0;
    std::vector<int> content_ids;
    for (int64_t i = 0; i < n_tok; ++i) {
      // token types are drawn without replacement within an utterance: the
      // decoders carry no positional signal beyond their memory-block
      // window, so periodic token cycles would be unresolvable by design
      int content;
      do {
        content = static_cast<int>(
            rng.uniform_index(static_cast<uint64_t>(m.vocab_size)));
      } while (std::find(content_ids.begin(), content_ids.end(), content) !=
               content_ids.end());
      content_ids.push_back(content);
      utt.tokens.push_back(content + kNumSpecialTokens);
      total_frames += template_len[static_cast<std::size_t>(content)];
    }
    std::vector<double> feat;
    feat.reserve(static_cast<std::size_t>(total_frames * m.feature_dim));
    int64_t cursor = 0;
    for (int64_t i = 0; i < n_tok; ++i) {
      int content = content_ids[static_cast<std::size_t>(i)];
      const auto& tpl = templates[static_cast<std::size_t>(content)];
      int64_t len = template_len[static_cast<std::size_t>(content)];
      for (double v : tpl) feat.push_back(v + m.noise_stdev * rng.normal());
      utt.alignment.push_back({cursor, len});
      cursor += len;
    }
    utt.features =
        Tensor::from_data({total_frames, m.feature_dim}, std::move(feat));
    all.push_back(std::move(utt));
  }

  double total_w = m.split_train + m.split_dev + m.split_test;
  int64_t n_train = static_cast<int64_t>(
      std::llround(static_cast<double>(m.utterance_count) * m.split_train /
                   total_w));
  int64_t n_dev = static_cast<int64_t>(
      std::llround(static_cast<double>(m.utterance_count) * m.split_dev /
                   total_w));
  n_train = std::min(n_train, m.utterance_count);
  n_dev = std::min(n_dev, m.utterance_count - n_train);

  Dataset ds;
  ds.train.assign(all.begin(), all.begin() + n_train);
  ds.dev.assign(all.begin() + n_train, all.begin() + n_train + n_dev);
  ds.test.assign(all.begin() + n_train + n_dev, all.end());
  return ds;
}

}  // namespace uasr
