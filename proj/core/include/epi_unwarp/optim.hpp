#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "epi_unwarp/unet.hpp"

namespace epi::nn {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct SchedulerConfig {
  int plateau_patience = 5;  // epochs without improvement before halving
  double factor = 0.5;
  int early_stop_patience = 30;
  friend bool operator==(const SchedulerConfig&, const SchedulerConfig&) = default;
};

struct OptimState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::int64_t step = 0;
  double learning_rate = 1e-3;
  int plateau_count = 0;
  double best_validation = std::numeric_limits<double>::infinity();
  int stagnant_epochs = 0;
  bool early_stop = false;

  static OptimState for_params(const UNetParams& params, double learning_rate = 1e-3);
  friend bool operator==(const OptimState&, const OptimState&) = default;
};

/// Bias-corrected Adam update, in place.
void adam_step(UNetParams& params, const Gradients& grads, OptimState& state, const AdamConfig& cfg = {});

/// Halve-on-plateau scheduling plus the early-stop counter. Improvement is
/// strict (tolerance 0). Returns true when the learning rate changed.
bool scheduler_step(OptimState& state, double validation_loss, const SchedulerConfig& cfg = {});

}  // namespace epi::nn
