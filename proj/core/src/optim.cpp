#include "epi_unwarp/optim.hpp"

#include <cmath>

#include "epi_unwarp/errors.hpp"

namespace epi::nn {

OptimState OptimState::for_params(const UNetParams& params, double learning_rate) {
  if (!(learning_rate > 0.0)) raise(ErrorKind::InvalidArgument, "learning rate must be positive");
  OptimState s;
  s.learning_rate = learning_rate;
  for (const auto& t : params.tensors) {
    s.first_moment.emplace_back(t.values.size(), 0.0);
    s.second_moment.emplace_back(t.values.size(), 0.0);
  }
  return s;
}

void adam_step(UNetParams& params, const Gradients& grads, OptimState& state, const AdamConfig& cfg) {
  const std::size_t n = params.tensors.size();
  if (grads.size() != n || state.first_moment.size() != n || state.second_moment.size() != n) {
    raise(ErrorKind::ShapeMismatch, "gradient/moment buffers do not match parameters");
  }
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = params.tensors[i].values.size();
    if (grads[i].size() != len || state.first_moment[i].size() != len || state.second_moment[i].size() != len) {
      raise(ErrorKind::ShapeMismatch, "gradient shape mismatch for " + params.tensors[i].name);
    }
    for (double g : grads[i]) {
      if (!std::isfinite(g)) raise(ErrorKind::NonFiniteGradient, "non-finite gradient in " + params.tensors[i].name);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < n; ++i) {
    auto& p = params.tensors[i].values;
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double m_hat = m[k] / c1;
      const double v_hat = v[k] / c2;
      p[k] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
  }
}

bool scheduler_step(OptimState& state, double validation_loss, const SchedulerConfig& cfg) {
  if (!std::isfinite(validation_loss)) raise(ErrorKind::NonFiniteLoss, "validation loss is not finite");
  if (validation_loss < state.best_validation) {
    state.best_validation = validation_loss;
    state.plateau_count = 0;
    state.stagnant_epochs = 0;
    return false;
  }
  ++state.plateau_count;
  ++state.stagnant_epochs;
  if (state.stagnant_epochs >= cfg.early_stop_patience) state.early_stop = true;
  if (state.plateau_count >= cfg.plateau_patience) {
    state.learning_rate *= cfg.factor;
    state.plateau_count = 0;
    return true;
  }
  return false;
}

}  // namespace epi::nn
