#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uasr/kv.hpp"
#include "uasr/scama.hpp"
#include "uasr/tensor.hpp"

namespace uasr {

// One synthetic utterance. Tokens are model-vocabulary ids (content ids
// start after the reserved specials); `alignment` gives each token's frame
// span, ordered, disjoint and covering [0, T) exactly.
struct Utterance {
  Tensor features;             // [T x feature_dim]
  std::vector<int> tokens;     // transcript, model ids
  std::vector<Span> alignment;  // one span per token
};

// Everything needed to regenerate a corpus bit-exactly.
struct DatasetManifest {
  uint64_t seed = 1234;
  int64_t vocab_size = 32;  // content token types (specials come on top)
  int64_t utterance_count = 2400;
  int64_t feature_dim = 8;
  int64_t template_len_min = 3;
  int64_t template_len_max = 6;
  int64_t transcript_len_min = 2;
  int64_t transcript_len_max = 6;
  double noise_stdev = 0.1;
  // Relative split weights, normalized over their sum.
  double split_train = 10.0;
  double split_dev = 1.0;
  double split_test = 1.0;

  void validate() const;
  KvMap to_kv() const;
  static DatasetManifest from_kv(const KvMap& kv);
  static DatasetManifest from_file(const std::string& path);
  void to_file(const std::string& path) const;
};

struct Dataset {
  std::vector<Utterance> train, dev, test;
};

// Each content token owns a fixed random feature template; an utterance is
// the concatenation of its transcript's templates plus Gaussian noise.
// Deterministic in (manifest contents, manifest seed).
Dataset synth_dataset_generate(const DatasetManifest& manifest);

}  // namespace uasr
