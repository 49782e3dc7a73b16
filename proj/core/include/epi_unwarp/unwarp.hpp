#pragma once

#include <span>
#include <vector>

#include "epi_unwarp/volume.hpp"

namespace epi {

/// Off-resonance field in Hz.
class FieldMap {
 public:
  explicit FieldMap(Volume3D hz) : hz_(std::move(hz)) {}
  const Volume3D& hz() const noexcept { return hz_; }

 private:
  Volume3D hz_;
};

struct AcquisitionParams {
  double readout_time = 0.05;  // seconds
  double pe_voxel_size = 1.8125;  // mm
  int pe_sign = +1;  // blip polarity

  void validate() const;
  friend bool operator==(const AcquisitionParams&, const AcquisitionParams&) = default;
};

/// VDM = sign * FM * readout_time * pe_voxel_size, elementwise.
DisplacementMap fieldmap_to_vdm(const FieldMap& fm, const AcquisitionParams& acq);

/// J = 1 + d(VDM / s_pe)/d(index) along the PE axis; central differences in
/// the interior, one-sided at both ends.
Volume3D jacobian_along_pe(const DisplacementMap& vdm);

/// Pull-back resampling along PE: out(p) = img(p + VDM(p)/s_pe * e_pe),
/// optionally multiplied by the Jacobian of the displacement.
Volume3D apply_vdm(const Volume3D& img, const DisplacementMap& vdm, bool modulate);

/// Vector-Jacobian product of apply_vdm with respect to the VDM (mm):
/// returns sum_p grad_out[p] * d out[p] / d vdm[q] for every q.
std::vector<double> apply_vdm_vjp(const Volume3D& img, const DisplacementMap& vdm, bool modulate,
                                  std::span<const double> grad_out);

inline constexpr double kInversionTolerance = 1e-6;  // voxels
inline constexpr int kInversionMaxIterations = 60;

/// Simulates acquisition through `vdm_true` as the numerical inverse of
/// apply_vdm(., vdm_true, modulate = true).
Volume3D forward_distort(const Volume3D& img, const DisplacementMap& vdm_true);

/// apply_vdm with modulation, evaluated slice by slice and restacked.
Volume3D correct_b0(const Volume3D& distorted, const DisplacementMap& vdm);

}  // namespace epi
