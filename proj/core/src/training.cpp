#include "epi_unwarp/training.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "epi_unwarp/errors.hpp"
#include "epi_unwarp/parallel.hpp"
#include "epi_unwarp/unwarp.hpp"

namespace epi {

namespace {

constexpr int kInferenceBatch = 8;

GridView grid(const SliceStack& s, const std::vector<double>& v) { return {s.plane_extents(), v}; }

// Stream tags keep the per-purpose seeds apart.
constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kAugmentStream = 0x4147;
constexpr std::uint64_t kDropoutStream = 0x4452;

void accumulate(nn::Gradients& into, const nn::Gradients& from, double scale) {
  for (std::size_t i = 0; i < into.size(); ++i) {
    for (std::size_t k = 0; k < into[i].size(); ++k) into[i][k] += scale * from[i][k];
  }
}

}  // namespace

void TrainConfig::validate() const {
  net.validate();
  weights.validate();
  augment.validate();
  split.validate();
  if (!(learning_rate > 0.0)) raise(ErrorKind::InvalidArgument, "learning rate must be positive");
  if (batch_size < 1) raise(ErrorKind::InvalidArgument, "batch size must be >= 1");
  if (epochs < 1) raise(ErrorKind::InvalidArgument, "epochs must be >= 1");
  if (net.in_channels != kStackChannels || net.out_channels != 1) {
    raise(ErrorKind::InvalidArgument, "the network must map 6 input channels to one VDM channel");
  }
}

nn::Tensor network_input(const SliceStack& s, bool use_t1) {
  nn::Tensor x = s.input;
  if (!use_t1) {
    for (int c = 3; c < 6; ++c) std::ranges::fill(x.channel(c), 0.0);
  }
  return x;
}

LossBreakdown sample_objective(const nn::UNet& net, const nn::UNetParams& params, const SliceStack& s, const TrainConfig& cfg,
                               const nn::ForwardOptions& opt, nn::Gradients* grads) {
  const LossWeights& w = cfg.weights;
  nn::Tape tape;
  const nn::Tensor pred = net.forward(network_input(s, cfg.use_t1), params, opt, grads ? &tape : nullptr);
  const std::vector<double> pv(pred.data.begin(), pred.data.end());
  const Volume3D distorted = s.plane(s.distorted_b0);
  const DisplacementMap vdm(s.plane(pv));
  const Volume3D corrected = apply_vdm(distorted, vdm, true);
  const GridView pred_view = grid(s, pv);
  const GridView target_view = grid(s, s.target_vdm);
  const GridView corr_view = corrected.view();
  const MaskView m = s.mask_view();

  LossBreakdown out;
  std::vector<double> g_pred(pv.size(), 0.0);
  std::vector<double> g_corr(pv.size(), 0.0);
  out.vdm_l1 = masked_l1(pred_view, target_view, m);
  if (grads && w.vdm_l1 != 0.0) {
    const auto g = masked_l1_grad(pred_view, target_view, m);
    for (std::size_t i = 0; i < g.size(); ++i) g_pred[i] += w.vdm_l1 * g[i];
  }
  if (w.gradient != 0.0) {
    out.grad_l2 = masked_grad_l2(pred_view, target_view, m);
    if (grads) {
      const auto g = masked_grad_l2_grad(pred_view, target_view, m);
      for (std::size_t i = 0; i < g.size(); ++i) g_pred[i] += w.gradient * g[i];
    }
  }
  if (w.structural != 0.0) {
    const ValueAndGrad r = ssim_with_grad(grid(s, s.reference_b0), corr_view, m, cfg.ssim);
    out.dssim = 1.0 - r.value;
    for (std::size_t i = 0; i < g_corr.size(); ++i) g_corr[i] -= w.structural * r.grad[i];
  }
  if (w.mutual_info != 0.0) {
    const ValueAndGrad r = soft_mutual_information(grid(s, s.t1), corr_view, m, cfg.mi);
    out.neg_mi = -r.value;
    for (std::size_t i = 0; i < g_corr.size(); ++i) g_corr[i] -= w.mutual_info * r.grad[i];
  }
  out.combine(w);
  if (grads) {
    if (w.structural != 0.0 || w.mutual_info != 0.0) {
      const auto g = apply_vdm_vjp(distorted, vdm, true, g_corr);
      for (std::size_t i = 0; i < g.size(); ++i) g_pred[i] += g[i];
    }
    nn::Tensor gt(1, s.height, s.width);
    gt.data = std::move(g_pred);
    net.backward(tape, gt, params, *grads);
  }
  return out;
}

LossBreakdown evaluate_sample(const nn::UNet& net, const nn::UNetParams& params, const SliceStack& s, const TrainConfig& cfg) {
  const nn::Tensor pred = net.forward(network_input(s, cfg.use_t1), params);
  const std::vector<double> pv(pred.data.begin(), pred.data.end());
  const Volume3D corrected = apply_vdm(s.plane(s.distorted_b0), DisplacementMap(s.plane(pv)), true);
  const LossInputs in{grid(s, pv), grid(s, s.target_vdm), corrected.view(), grid(s, s.reference_b0), grid(s, s.t1), s.mask_view()};
  return total_loss(in, cfg.weights, 0.0, cfg.ssim, cfg.mi);
}

LossBreakdown evaluate_stacks(const nn::UNet& net, const nn::UNetParams& params, const std::vector<SliceStack>& stacks,
                              const TrainConfig& cfg) {
  std::vector<LossBreakdown> per(stacks.size());
  parallel_for(stacks.size(), [&](std::size_t i) { per[i] = evaluate_sample(net, params, stacks[i], cfg); });
  LossBreakdown mean;
  for (const auto& b : per) {
    mean.vdm_l1 += b.vdm_l1;
    mean.grad_l2 += b.grad_l2;
    mean.dssim += b.dssim;
    mean.neg_mi += b.neg_mi;
  }
  const double n = std::max<double>(1.0, static_cast<double>(per.size()));
  mean.vdm_l1 /= n;
  mean.grad_l2 /= n;
  mean.dssim /= n;
  mean.neg_mi /= n;
  mean.weight_l1 = params.weight_l1();
  mean.combine(cfg.weights);
  return mean;
}

LossBreakdown train_step(const nn::UNet& net, nn::UNetParams& params, nn::OptimState& state, const std::vector<const SliceStack*>& batch,
                         const TrainConfig& cfg, std::uint64_t step_seed) {
  if (batch.empty()) raise(ErrorKind::InvalidArgument, "empty batch");
  std::vector<nn::Gradients> per_grad(batch.size());
  std::vector<LossBreakdown> per_loss(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    per_grad[i] = nn::zero_gradients(params);
    const nn::ForwardOptions opt{true, derive_seed(step_seed ^ kDropoutStream, i)};
    per_loss[i] = sample_objective(net, params, *batch[i], cfg, opt, &per_grad[i]);
  });
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  nn::Gradients grads = nn::zero_gradients(params);
  LossBreakdown mean;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    accumulate(grads, per_grad[i], inv_b);
    mean.vdm_l1 += per_loss[i].vdm_l1 * inv_b;
    mean.grad_l2 += per_loss[i].grad_l2 * inv_b;
    mean.dssim += per_loss[i].dssim * inv_b;
    mean.neg_mi += per_loss[i].neg_mi * inv_b;
  }
  mean.weight_l1 = params.weight_l1();
  mean.combine(cfg.weights);
  if (!std::isfinite(mean.total)) {
    std::ostringstream msg;
    msg << "non-finite training loss in batch starting with " << batch.front()->subject_id << " slice " << batch.front()->slice_index;
    raise(ErrorKind::NonFiniteLoss, msg.str());
  }
  nn::add_weight_l1_gradient(params, cfg.weights.weight_l1, grads);
  nn::adam_step(params, grads, state, cfg.adam);
  return mean;
}

TrainResult train(const TrainConfig& cfg, const std::vector<SliceStack>& train_set, const std::vector<SliceStack>& val_set,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_set.empty()) raise(ErrorKind::InvalidArgument, "training set is empty");
  if (val_set.empty()) raise(ErrorKind::InvalidArgument, "validation set is empty");
  const nn::UNet net(cfg.net);
  for (const auto& s : train_set) {
    if (s.height % cfg.net.divisor() != 0 || s.width % cfg.net.divisor() != 0) {
      raise(ErrorKind::IndivisibleExtent, "slice extents must be multiples of " + std::to_string(cfg.net.divisor()));
    }
  }

  TrainResult result;
  nn::UNetParams params = net.init_params(cfg.seed);
  nn::OptimState state = nn::OptimState::for_params(params, cfg.learning_rate);
  result.best_params = params;
  result.state = state;

  const std::size_t n = train_set.size();
  const std::size_t b = static_cast<std::size_t>(cfg.batch_size);
  std::vector<std::size_t> order(n);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const std::uint64_t epoch_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch));
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 shuffle(epoch_seed ^ kShuffleStream);
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[static_cast<std::size_t>(shuffle() % (i + 1))]);

    LossBreakdown epoch_mean;
    std::size_t batches = 0;
    std::vector<SliceStack> augmented;
    for (std::size_t start = 0; start < n; start += b) {
      const std::size_t count = std::min(b, n - start);
      const std::uint64_t step_seed = derive_seed(epoch_seed, start / b);
      augmented.assign(count, SliceStack{});
      parallel_for(count, [&](std::size_t i) {
        std::mt19937_64 rng(derive_seed(step_seed ^ kAugmentStream, i));
        const SliceStack& partner = train_set[static_cast<std::size_t>(rng() % n)];
        augmented[i] = augment(train_set[order[start + i]], cfg.augment, rng, &partner);
      });
      std::vector<const SliceStack*> batch;
      for (const auto& s : augmented) batch.push_back(&s);
      const LossBreakdown lb = train_step(net, params, state, batch, cfg, step_seed);
      epoch_mean.vdm_l1 += lb.vdm_l1;
      epoch_mean.grad_l2 += lb.grad_l2;
      epoch_mean.dssim += lb.dssim;
      epoch_mean.neg_mi += lb.neg_mi;
      epoch_mean.weight_l1 += lb.weight_l1;
      ++batches;
    }
    const double inv = 1.0 / static_cast<double>(batches);
    epoch_mean.vdm_l1 *= inv;
    epoch_mean.grad_l2 *= inv;
    epoch_mean.dssim *= inv;
    epoch_mean.neg_mi *= inv;
    epoch_mean.weight_l1 *= inv;
    epoch_mean.combine(cfg.weights);

    const double val_total = evaluate_stacks(net, params, val_set, cfg).total;
    const double lr_used = state.learning_rate;
    nn::scheduler_step(state, val_total, cfg.scheduler);
    if (state.stagnant_epochs == 0) {
      result.best_params = params;
      result.state = state;
      result.best_epoch = epoch;
    }
    const EpochRecord rec{epoch, epoch_mean, val_total, lr_used};
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (state.early_stop) {
      result.stopped_early = true;
      break;
    }
  }
  // Counters reflect the end of the run; parameters and moments the best epoch.
  result.state.plateau_count = state.plateau_count;
  result.state.stagnant_epochs = state.stagnant_epochs;
  result.state.early_stop = state.early_stop;
  result.state.learning_rate = state.learning_rate;
  return result;
}

DisplacementMap predict_vdm(const nn::UNet& net, const nn::UNetParams& params, const Volume3D& b0, const Volume3D& t1, const Mask3D& mask,
                            bool use_t1) {
  if (!b0.same_grid(t1) || b0.extents() != mask.extents()) raise(ErrorKind::GridMismatch, "b0, T1w and mask must share a grid");
  net.check_params(params);
  Volume3D t1_pe = t1;
  t1_pe.set_pe_axis(b0.pe_axis());
  const Volume3D nb = normalize_intensity(b0, mask).volume;
  const Volume3D nt = normalize_intensity(t1_pe, mask).volume;
  const int nz = b0.extents().nz;
  Volume3D out = Volume3D::like(b0, std::vector<double>(b0.extents().count(), 0.0));
  for (int z0 = 0; z0 < nz; z0 += kInferenceBatch) {
    const int count = std::min(kInferenceBatch, nz - z0);
    std::vector<std::vector<double>> planes(static_cast<std::size_t>(count));
    parallel_for(static_cast<std::size_t>(count), [&](std::size_t i) {
      nn::Tensor x = stack_input(nb, nt, z0 + static_cast<int>(i));
      if (!use_t1) {
        for (int c = 3; c < 6; ++c) std::ranges::fill(x.channel(c), 0.0);
      }
      if (x.height % net.config().divisor() != 0 || x.width % net.config().divisor() != 0) {
        raise(ErrorKind::IndivisibleExtent, "slice extents must be multiples of " + std::to_string(net.config().divisor()));
      }
      planes[i] = std::move(net.forward(x, params).data);
    });
    for (int i = 0; i < count; ++i) set_canonical_plane(out, z0 + i, planes[static_cast<std::size_t>(i)]);
  }
  return DisplacementMap(std::move(out));
}

}  // namespace epi
