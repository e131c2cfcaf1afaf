#pragma once

#include <cstdint>
#include <vector>

namespace uasr {

// Edit distance (insert/delete/substitute, all cost 1).
int64_t levenshtein(const std::vector<int>& a, const std::vector<int>& b);

// Corpus-level token error rate: total edits over total reference tokens
// (not the mean of per-utterance ratios).
struct TerAccumulator {
  int64_t edits = 0;
  int64_t ref_tokens = 0;

  void add(const std::vector<int>& ref, const std::vector<int>& hyp) {
    edits += levenshtein(ref, hyp);
    ref_tokens += static_cast<int64_t>(ref.size());
  }
  double ter() const {
    return ref_tokens == 0 ? 0.0
                           : static_cast<double>(edits) /
                                 static_cast<double>(ref_tokens);
  }
};

}  // namespace uasr
