#include "uasr/metrics.hpp"

#include <algorithm>

namespace uasr {

int64_t levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<int64_t> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<int64_t>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int64_t>(i);
    for (std::size_t j = 1; j <= m; ++j) {
      int64_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

}  // namespace uasr
