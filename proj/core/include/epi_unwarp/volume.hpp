#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace epi {

struct Extents {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t count() const noexcept {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
  }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny); }
  int operator[](int axis) const noexcept { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
  std::size_t stride(int axis) const noexcept { return axis == 0 ? 1 : (axis == 1 ? static_cast<std::size_t>(nx) : plane()); }
  std::size_t index(int x, int y, int z) const noexcept {
    return static_cast<std::size_t>(x) + static_cast<std::size_t>(nx) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(ny) * static_cast<std::size_t>(z));
  }
  friend bool operator==(const Extents&, const Extents&) = default;
};

using Affine = std::array<std::array<double, 4>, 3>;

Affine scaling_affine(const std::array<double, 3>& voxel_size);

/// Read-only view of a scalar grid; the currency of the measures module.
struct GridView {
  Extents ext;
  std::span<const double> values;
};

struct MaskView {
  Extents ext;
  std::span<const std::uint8_t> values;
};

/// Scalar grid with geometry. Values are finite by construction.
class Volume3D {
 public:
  Volume3D() = default;
  Volume3D(Extents ext, std::array<double, 3> voxel_size, int pe_axis = 1);
  Volume3D(Extents ext, std::array<double, 3> voxel_size, int pe_axis, std::vector<double> values);

  /// A volume on the same grid as `like`, filled with `values`.
  static Volume3D like(const Volume3D& like, std::vector<double> values);

  const Extents& extents() const noexcept { return ext_; }
  const std::array<double, 3>& voxel_size() const noexcept { return voxel_size_; }
  int pe_axis() const noexcept { return pe_axis_; }
  double pe_voxel_size() const noexcept { return voxel_size_[static_cast<std::size_t>(pe_axis_)]; }
  const Affine& affine() const noexcept { return affine_; }
  void set_affine(const Affine& a) { affine_ = a; }
  void set_pe_axis(int axis);

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  std::vector<double> release() && { return std::move(values_); }

  double operator()(int x, int y, int z) const noexcept { return values_[ext_.index(x, y, z)]; }
  double& operator()(int x, int y, int z) noexcept { return values_[ext_.index(x, y, z)]; }

  GridView view() const noexcept { return {ext_, values_}; }

  /// Single axial plane as a one-slice volume on the same in-plane grid.
  Volume3D slice(int z) const;
  void set_slice(int z, const Volume3D& plane);

  bool same_grid(const Volume3D& other) const noexcept { return ext_ == other.ext_; }

 private:
  Extents ext_{};
  std::array<double, 3> voxel_size_{1.0, 1.0, 1.0};
  int pe_axis_ = 1;
  Affine affine_{};
  std::vector<double> values_;
};

class Mask3D {
 public:
  Mask3D() = default;
  explicit Mask3D(Extents ext);
  Mask3D(Extents ext, std::vector<std::uint8_t> values);

  static Mask3D from_volume(const Volume3D& v, double threshold = 0.5);
  Volume3D to_volume(const Volume3D& grid) const;

  const Extents& extents() const noexcept { return ext_; }
  std::span<const std::uint8_t> values() const noexcept { return values_; }
  std::span<std::uint8_t> values() noexcept { return values_; }
  std::uint8_t operator()(int x, int y, int z) const noexcept { return values_[ext_.index(x, y, z)]; }
  std::uint8_t& operator()(int x, int y, int z) noexcept { return values_[ext_.index(x, y, z)]; }
  std::size_t count() const noexcept;
  bool empty() const noexcept { return count() == 0; }
  MaskView view() const noexcept { return {ext_, values_}; }
  Mask3D slice(int z) const;

  friend bool operator==(const Mask3D&, const Mask3D&) = default;

 private:
  Extents ext_{};
  std::vector<std::uint8_t> values_;
};

/// Displacement along the PE axis, in millimetres.
class DisplacementMap {
 public:
  DisplacementMap() = default;
  explicit DisplacementMap(Volume3D mm) : mm_(std::move(mm)) {}

  const Volume3D& mm() const noexcept { return mm_; }
  Volume3D& mm() noexcept { return mm_; }
  const Extents& extents() const noexcept { return mm_.extents(); }
  int pe_axis() const noexcept { return mm_.pe_axis(); }
  double pe_voxel_size() const noexcept { return mm_.pe_voxel_size(); }
  DisplacementMap slice(int z) const { return DisplacementMap(mm_.slice(z)); }

 private:
  Volume3D mm_;
};

/// Visits every 1-D line of `ext` running along `axis`: fn(first_index, stride, length).
template <class Fn>
void for_each_line(const Extents& ext, int axis, Fn&& fn) {
  const std::size_t stride = ext.stride(axis);
  const int len = ext[axis];
  const int a = axis == 0 ? 1 : 0;
  const int b = axis == 2 ? 1 : 2;
  for (int j = 0; j < ext[b]; ++j) {
    for (int i = 0; i < ext[a]; ++i) {
      std::size_t first = 0;
      first += static_cast<std::size_t>(i) * ext.stride(a);
      first += static_cast<std::size_t>(j) * ext.stride(b);
      fn(first, stride, len);
    }
  }
}

/// Linear interpolation on a sampled line; positions outside [0, n-1]
/// clamp to the border sample.
double sample_line_linear(std::span<const double> column, double position) noexcept;

/// Derivative of sample_line_linear with respect to position (right
/// derivative at nodes, zero in the clamped region).
double sample_line_slope(std::span<const double> column, double position) noexcept;

/// Box (L-infinity) dilation within each axial slice.
Mask3D dilate_mask(const Mask3D& m, int radius);

/// Voxels strictly above the given intensity quantile, restricted to the
/// largest 6-connected component.
Mask3D threshold_mask(const Volume3D& v, double quantile);

/// Type-7 (linear between order statistics) sample quantile.
double quantile(std::vector<double> values, double q);

struct IntensityMapping {
  double low = 0.0;   // maps to 0
  double high = 1.0;  // maps to 1
  double apply(double v) const noexcept;
  double invert(double u) const noexcept { return low + u * (high - low); }
};

struct NormalizedVolume {
  Volume3D volume;
  IntensityMapping mapping;
};

inline constexpr double kNormalizeLowPercentile = 0.005;
inline constexpr double kNormalizeHighPercentile = 0.995;

/// Maps the in-mask 0.5th/99.5th percentiles to 0/1 and clamps to [0, 1].
NormalizedVolume normalize_intensity(const Volume3D& v, const Mask3D& m);

}  // namespace epi
