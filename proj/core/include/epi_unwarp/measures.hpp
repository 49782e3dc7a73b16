#pragma once

#include <span>
#include <vector>

#include "epi_unwarp/volume.hpp"

namespace epi {

/// Weights of the composite objective. Defaults are the published ones.
struct LossWeights {
  double vdm_l1 = 1.0;
  double gradient = 0.5;
  double structural = 0.3;
  double mutual_info = 0.5;
  double weight_l1 = 1e-5;

  void validate() const;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct LossBreakdown {
  double vdm_l1 = 0.0;
  double grad_l2 = 0.0;
  double dssim = 0.0;   // 1 - SSIM
  double neg_mi = 0.0;  // -MI
  double weight_l1 = 0.0;
  double total = 0.0;

  /// Sets `total` from the components.
  void combine(const LossWeights& w);
};

struct SsimConfig {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
  friend bool operator==(const SsimConfig&, const SsimConfig&) = default;
};

struct MiConfig {
  int bins = 32;
  double sigma = 1.0;     // in bins; 0 disables smoothing
  double truncate = 4.0;  // kernel radius in sigmas
  friend bool operator==(const MiConfig&, const MiConfig&) = default;
};

struct ValueAndGrad {
  double value = 0.0;
  std::vector<double> grad;
};

double masked_l1(GridView a, GridView b, MaskView m);
/// d masked_l1 / d a.
std::vector<double> masked_l1_grad(GridView a, GridView b, MaskView m);

/// RMS over the mask of the in-plane gradient discrepancy of (a - b).
double masked_grad_l2(GridView a, GridView b, MaskView m);
/// d masked_grad_l2 / d a (zero when the discrepancy vanishes).
std::vector<double> masked_grad_l2_grad(GridView a, GridView b, MaskView m);

/// Mean local SSIM over the mask with a Gaussian window, computed per slice.
double ssim(GridView a, GridView b, MaskView m, const SsimConfig& cfg = {});
/// SSIM and its gradient with respect to `b`.
ValueAndGrad ssim_with_grad(GridView a, GridView b, MaskView m, const SsimConfig& cfg = {});

/// Hard-binned joint-histogram mutual information in nats.
double mutual_information(GridView a, GridView b, MaskView m, const MiConfig& cfg = {});
/// Triangular (Parzen) soft-binned MI and its gradient with respect to `b`.
ValueAndGrad soft_mutual_information(GridView a, GridView b, MaskView m, const MiConfig& cfg = {});

double rmse(GridView a, GridView b, MaskView m);

struct LossInputs {
  GridView pred_vdm;
  GridView ref_vdm;
  GridView b0_corrected;
  GridView b0_ref;
  GridView t1w;
  MaskView mask;
};

/// Evaluation-time composite loss with hard-binned MI. Terms with zero
/// weight are skipped and reported as 0.
LossBreakdown total_loss(const LossInputs& in, const LossWeights& weights, double params_l1,
                         const SsimConfig& ssim_cfg = {}, const MiConfig& mi_cfg = {});

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  int dof = 0;
};

/// Paired two-sided Student t-test on x - y.
TTestResult paired_t_test(std::span<const double> x, std::span<const double> y);

/// Regularized incomplete beta I_x(a, b) via Lentz's continued fraction.
double incomplete_beta(double a, double b, double x);

/// P(|T| >= |t|) for Student's t with `dof` degrees of freedom.
double student_t_two_sided_p(double t, double dof);

}  // namespace epi
