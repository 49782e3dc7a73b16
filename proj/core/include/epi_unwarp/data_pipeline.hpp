#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "epi_unwarp/layers.hpp"
#include "epi_unwarp/volume.hpp"

namespace epi {

/// One 2.5D training sample. Planes are stored PE-canonical: rows run
/// along the phase-encoding axis, so the warp always acts along y.
struct SliceStack {
  // Channels: b0[k-1], b0[k], b0[k+1], t1[k-1], t1[k], t1[k+1].
  nn::Tensor input;
  std::vector<double> target_vdm;  // mm
  std::vector<std::uint8_t> mask;
  std::vector<double> distorted_b0;  // centre b0 before noise
  std::vector<double> reference_b0;  // centre b0 corrected with the target VDM
  std::vector<double> t1;            // centre T1w before noise
  int width = 0;
  int height = 0;
  std::array<double, 3> voxel_size{1.0, 1.0, 1.0};  // PE-canonical (x, y=PE, z)
  std::string subject_id;
  int slice_index = 0;

  Extents plane_extents() const noexcept { return {width, height, 1}; }
  /// A one-slice volume (PE axis 1) on this stack's grid.
  Volume3D plane(std::vector<double> values) const;
  MaskView mask_view() const noexcept { return {plane_extents(), mask}; }
};

inline constexpr int kStackChannels = 6;

/// Normalised 2.5D input planes for slice z; edge neighbours duplicate the
/// nearest slice. Volumes must already be intensity-normalised.
nn::Tensor stack_input(const Volume3D& b0, const Volume3D& t1, int z);

/// Plane z in PE-canonical orientation (transposed when PE is axis 0).
std::vector<double> canonical_plane(const Volume3D& v, int z);
std::vector<std::uint8_t> canonical_plane(const Mask3D& m, int z, int pe_axis);
void set_canonical_plane(Volume3D& v, int z, std::span<const double> plane);

/// One stack per slice with a non-empty mask. Intensities of b0 and t1 are
/// normalised within `mask`; the reference b0 is the distorted b0 corrected
/// with `vdm`.
std::vector<SliceStack> build_stacks(const Volume3D& b0, const Volume3D& t1, const DisplacementMap& vdm, const Mask3D& mask,
                                     const std::string& subject_id = {});

/// Recomputes reference_b0 from distorted_b0 and target_vdm.
void refresh_reference(SliceStack& s);

struct AugmentConfig {
  bool enabled = true;
  double apply_probability = 0.5;  // one of translation / crop / noise
  int translation_max = 5;         // pixels
  double crop_min = 0.50;
  double crop_max = 0.90;
  double noise_sigma = 0.05;
  bool flip_enabled = true;
  double flip_probability = 0.5;
  bool mixcut_enabled = true;
  double mixcut_probability = 0.1;

  void validate() const;
  friend bool operator==(const AugmentConfig&, const AugmentConfig&) = default;
};

/// out(x, y) = in(x - dx, y - dy); vacated pixels are zero.
SliceStack translate(const SliceStack& s, int dx, int dy);
/// Keeps the size x size square at (x0, y0) and zeroes everything else.
SliceStack crop_square(const SliceStack& s, int x0, int y0, int size);
/// Gaussian noise on the six input channels only.
SliceStack add_noise(const SliceStack& s, double sigma, std::mt19937_64& rng);
SliceStack flip_horizontal(const SliceStack& s);
/// Right half (x >= width/2) of every plane taken from `partner`.
SliceStack mixcut(const SliceStack& s, const SliceStack& partner);

/// Random augmentation. `partner` supplies the mixcut half; when null,
/// mixcut is skipped.
SliceStack augment(const SliceStack& s, const AugmentConfig& cfg, std::mt19937_64& rng, const SliceStack* partner = nullptr);

struct SplitSpec {
  double train = 0.75;
  double val = 0.15;
  double test = 0.10;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const SplitSpec&, const SplitSpec&) = default;
};

struct SubjectSplit {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
};

/// Seeded shuffle, then floor(n * train) / floor(n * val) subjects with the
/// remainder going to test; every part keeps at least one subject.
SubjectSplit split_subjects(const std::vector<std::string>& ids, const SplitSpec& spec);

struct ManifestRow {
  std::string id;
  std::filesystem::path b0;
  std::filesystem::path t1;
  std::filesystem::path vdm;
  std::filesystem::path mask;
  friend bool operator==(const ManifestRow&, const ManifestRow&) = default;
};

/// Tab-separated table with header "id b0 t1 vdm mask". Relative paths are
/// resolved against the manifest's directory on read.
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::vector<ManifestRow>& rows, const std::filesystem::path& path);

struct SubjectVolumes {
  std::string id;
  Volume3D b0;
  Volume3D t1;
  DisplacementMap vdm;
  Mask3D mask;
};

SubjectVolumes load_subject(const ManifestRow& row, int pe_axis = 1);

}  // namespace epi
