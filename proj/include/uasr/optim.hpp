#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "uasr/params.hpp"

namespace uasr {

// Adam with the warmup-then-inverse-sqrt learning-rate schedule
//   lr(step) = k * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).
struct OptimizerState {
  double sched_k = 4.0;
  double sched_d_model = 512.0;
  double sched_warmup = 8000.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-9;
  int64_t step = 0;  // number of completed updates

  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

double noam_lr(const OptimizerState& state, int64_t step);

// One Adam update over every parameter in the store, in name order.
// Every parameter must carry a grad slot; grads are cleared afterwards.
void optimizer_step(ParamStore& params, OptimizerState& state);

}  // namespace uasr
