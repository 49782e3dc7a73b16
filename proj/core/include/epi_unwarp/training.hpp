#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "epi_unwarp/data_pipeline.hpp"
#include "epi_unwarp/measures.hpp"
#include "epi_unwarp/optim.hpp"
#include "epi_unwarp/unet.hpp"
#include "epi_unwarp/volume.hpp"

namespace epi {

struct TrainConfig {
  nn::UNetConfig net;
  LossWeights weights;
  SsimConfig ssim;
  MiConfig mi;
  AugmentConfig augment;
  SplitSpec split;
  nn::AdamConfig adam;
  nn::SchedulerConfig scheduler;
  double learning_rate = 1e-3;
  int batch_size = 8;
  int epochs = 96;
  bool use_t1 = true;  // false zeroes the three T1w input channels
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Network input for a stack, with T1w channels zeroed when `use_t1` is off.
nn::Tensor network_input(const SliceStack& s, bool use_t1);

/// Training-time objective of one sample: soft-binned MI, dropout per
/// `opt`. When `grads` is non-null, d(sample loss)/d(params) is accumulated
/// into it. The weight penalty is not included (it is per batch).
LossBreakdown sample_objective(const nn::UNet& net, const nn::UNetParams& params, const SliceStack& s, const TrainConfig& cfg,
                               const nn::ForwardOptions& opt, nn::Gradients* grads);

/// Evaluation-time loss of one sample (hard MI, no dropout).
LossBreakdown evaluate_sample(const nn::UNet& net, const nn::UNetParams& params, const SliceStack& s, const TrainConfig& cfg);

/// Mean evaluation loss over `stacks`, weight penalty included.
LossBreakdown evaluate_stacks(const nn::UNet& net, const nn::UNetParams& params, const std::vector<SliceStack>& stacks,
                              const TrainConfig& cfg);

/// One Adam step on the batch mean of sample_objective plus the weight
/// penalty. Samples are used as given (no augmentation). Returns the batch
/// mean breakdown before the update.
LossBreakdown train_step(const nn::UNet& net, nn::UNetParams& params, nn::OptimState& state, const std::vector<const SliceStack*>& batch,
                         const TrainConfig& cfg, std::uint64_t step_seed);

struct EpochRecord {
  int epoch = 0;
  LossBreakdown train;
  double val_total = 0.0;
  double learning_rate = 0.0;
};

struct TrainResult {
  nn::UNetParams best_params;
  nn::OptimState state;  // state at the best epoch
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  bool stopped_early = false;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Full loop: shuffle, augment, batch, Adam, validation, plateau scheduling
/// and early stopping. Keeps the parameters of the best validation epoch.
TrainResult train(const TrainConfig& cfg, const std::vector<SliceStack>& train_set, const std::vector<SliceStack>& val_set,
                  const EpochCallback& on_epoch = {});

/// Slice-wise inference over a whole volume. Inputs are normalised within
/// `mask`; the returned map lives on b0's grid and PE axis.
DisplacementMap predict_vdm(const nn::UNet& net, const nn::UNetParams& params, const Volume3D& b0, const Volume3D& t1, const Mask3D& mask,
                            bool use_t1 = true);

}  // namespace epi
