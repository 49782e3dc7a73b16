#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "epi_unwarp/data_pipeline.hpp"
#include "epi_unwarp/volume.hpp"

namespace epi {

/// Intensity ranges of one pseudo-tissue class, drawn once per subject.
struct TissueContrast {
  double b0_low = 0.0;
  double b0_high = 0.0;
  double t1_low = 0.0;
  double t1_high = 0.0;
  friend bool operator==(const TissueContrast&, const TissueContrast&) = default;
};

enum class Tissue : std::uint8_t { Background = 0, Scalp, Csf, Grey, White, Air, Count };

struct PhantomSpec {
  Extents extents{128, 128, 80};
  std::array<double, 3> voxel_size{1.8125, 1.8125, 2.0};

  // Head ellipsoid semi-axes as fractions of the extents.
  double head_radius_min = 0.32;
  double head_radius_max = 0.40;
  double head_z_radius_min = 0.40;
  double head_z_radius_max = 0.46;
  int deep_nuclei_min = 2;
  int deep_nuclei_max = 4;
  std::array<TissueContrast, static_cast<std::size_t>(Tissue::Count)> contrast{{
      {0.00, 0.00, 0.00, 0.00},  // background
      {0.15, 0.25, 0.55, 0.70},  // scalp
      {0.85, 1.00, 0.10, 0.25},  // CSF
      {0.55, 0.70, 0.45, 0.60},  // grey matter
      {0.35, 0.50, 0.75, 0.90},  // white matter
      {0.03, 0.08, 0.02, 0.05},  // air cavity
  }};
  double bias_amplitude = 0.10;  // relative, smooth multiplicative field
  double blur_sigma = 1.0;       // voxels
  double noise_sigma = 0.005;    // relative to unit intensity, before scaling
  double intensity_scale = 1000.0;

  // Field: one Gaussian bump per air cavity; frontal cavities push +PE,
  // temporal ones -PE. Magnitude grows with cavity size.
  int bumps_min = 2;
  int bumps_max = 6;
  double amplitude_min = 2.0;  // mm
  double amplitude_max = 8.0;  // mm
  double width_min = 12.0;     // voxels, in-plane sigma
  double width_max = 24.0;
  double z_width_min = 6.0;    // slices
  double z_width_max = 14.0;
  double min_jacobian = 0.30;      // amplitudes are scaled down to keep J above this
  double max_shift_voxels = 5.0;

  int mask_dilation = 3;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const PhantomSpec&, const PhantomSpec&) = default;
};

/// Jacobian floor every generated field must respect.
inline constexpr double kInvertibilityMargin = 0.25;

struct FieldBump {
  double amplitude = 0.0;  // mm
  std::array<double, 3> centre{};  // voxels
  std::array<double, 3> sigma{};   // voxels
};

/// Closed-form displacement field (mm along y) as a sum of Gaussian bumps.
struct PhantomField {
  std::vector<FieldBump> bumps;

  double displacement(double x, double y, double z) const noexcept;
  /// d displacement / d y in mm per voxel.
  double d_dy(double x, double y, double z) const noexcept;
  Volume3D sample(const Extents& ext, const std::array<double, 3>& voxel_size) const;
  /// Min over the grid of 1 + d_dy / pe_voxel_size.
  double min_jacobian(const Extents& ext, double pe_voxel_size) const;
  double max_abs_displacement(const Extents& ext) const;
};

struct Phantom {
  Volume3D t1;
  Volume3D b0;            // undistorted
  Volume3D distorted_b0;  // b0 pushed through the field
  DisplacementMap vdm;
  Mask3D mask;
  std::vector<std::uint8_t> labels;  // Tissue per voxel
  PhantomField field;
};

Phantom generate_phantom(const PhantomSpec& spec);

struct SubjectFieldStats {
  std::string id;
  double min_vdm = 0.0;
  double max_vdm = 0.0;
  double min_jacobian = 0.0;
};

struct GeneratedDataset {
  std::vector<ManifestRow> rows;
  std::filesystem::path manifest;
  std::vector<SubjectFieldStats> stats;
};

/// Writes <id>_b0 (distorted), _t1, _vdm and _mask .nii.gz per subject plus
/// manifest.tsv. Subject i uses derive_seed(spec.seed, i).
GeneratedDataset generate_dataset(int n_subjects, const PhantomSpec& spec, const std::filesystem::path& out_dir);

}  // namespace epi
