#include "uasr/optim.hpp"

#include <cmath>

namespace uasr {

double noam_lr(const OptimizerState& state, int64_t step) {
  if (step < 1) throw ContractError("noam_lr: step counter must be >= 1");
  double s = static_cast<double>(step);
  double warm = s * std::pow(state.sched_warmup, -1.5);
  double decay = 1.0 / std::sqrt(s);
  return state.sched_k / std::sqrt(state.sched_d_model) *
         std::min(decay, warm);
}

void optimizer_step(ParamStore& params, OptimizerState& state) {
  state.step += 1;
  const double lr = noam_lr(state, state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, state.step);
  const double bc2 = 1.0 - std::pow(state.beta2, state.step);
  for (auto& [name, p] : params) {
    if (!p.requires_grad())
      throw ContractError("optimizer_step: parameter '" + name +
                          "' has no grad slot");
    auto g = p.grad_mut();
    auto w = p.mutable_data();
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(w.size(), 0.0);
    if (v.empty()) v.assign(w.size(), 0.0);
    if (m.size() != w.size() || v.size() != w.size())
      throw ContractError("optimizer_step: moment shape drifted for '" + name +
                          "'");
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
      g[i] = 0.0;
    }
  }
}

}  // namespace uasr
