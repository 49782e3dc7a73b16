#include "epi_unwarp/volume.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "epi_unwarp/errors.hpp"

namespace epi {

Affine scaling_affine(const std::array<double, 3>& voxel_size) {
  Affine a{};
  for (std::size_t i = 0; i < 3; ++i) a[i][i] = voxel_size[i];
  return a;
}

Volume3D::Volume3D(Extents ext, std::array<double, 3> voxel_size, int pe_axis)
    : Volume3D(ext, voxel_size, pe_axis, std::vector<double>(ext.count(), 0.0)) {}

Volume3D::Volume3D(Extents ext, std::array<double, 3> voxel_size, int pe_axis, std::vector<double> values)
    : ext_(ext), voxel_size_(voxel_size), affine_(scaling_affine(voxel_size)), values_(std::move(values)) {
  if (ext.nx < 1 || ext.ny < 1 || ext.nz < 1) raise(ErrorKind::InvalidArgument, "extents must be positive");
  for (double s : voxel_size) {
    if (!(s > 0.0) || !std::isfinite(s)) raise(ErrorKind::InvalidArgument, "voxel sizes must be positive");
  }
  if (values_.size() != ext.count()) raise(ErrorKind::ShapeMismatch, "value count does not match extents");
  for (double v : values_) {
    if (!std::isfinite(v)) raise(ErrorKind::InvalidArgument, "volume values must be finite");
  }
  set_pe_axis(pe_axis);
}

Volume3D Volume3D::like(const Volume3D& like, std::vector<double> values) {
  Volume3D out(like.ext_, like.voxel_size_, like.pe_axis_, std::move(values));
  out.affine_ = like.affine_;
  return out;
}

void Volume3D::set_pe_axis(int axis) {
  if (axis < 0 || axis > 2) raise(ErrorKind::InvalidArgument, "pe axis must be 0, 1 or 2");
  pe_axis_ = axis;
}

Volume3D Volume3D::slice(int z) const {
  if (z < 0 || z >= ext_.nz) raise(ErrorKind::InvalidArgument, "slice index out of range");
  const auto first = values_.begin() + static_cast<std::ptrdiff_t>(ext_.plane() * static_cast<std::size_t>(z));
  Volume3D out({ext_.nx, ext_.ny, 1}, voxel_size_, pe_axis_,
               std::vector<double>(first, first + static_cast<std::ptrdiff_t>(ext_.plane())));
  out.affine_ = affine_;
  return out;
}

void Volume3D::set_slice(int z, const Volume3D& plane) {
  if (plane.ext_.nx != ext_.nx || plane.ext_.ny != ext_.ny || plane.ext_.nz != 1) {
    raise(ErrorKind::GridMismatch, "plane does not match the volume's in-plane grid");
  }
  std::copy(plane.values_.begin(), plane.values_.end(),
            values_.begin() + static_cast<std::ptrdiff_t>(ext_.plane() * static_cast<std::size_t>(z)));
}

Mask3D::Mask3D(Extents ext) : ext_(ext), values_(ext.count(), 0) {}

Mask3D::Mask3D(Extents ext, std::vector<std::uint8_t> values) : ext_(ext), values_(std::move(values)) {
  if (values_.size() != ext.count()) raise(ErrorKind::ShapeMismatch, "mask size does not match extents");
  for (auto& v : values_) v = v ? 1 : 0;
}

Mask3D Mask3D::from_volume(const Volume3D& v, double threshold) {
  Mask3D m(v.extents());
  const auto src = v.values();
  for (std::size_t i = 0; i < src.size(); ++i) m.values_[i] = src[i] > threshold ? 1 : 0;
  return m;
}

Volume3D Mask3D::to_volume(const Volume3D& grid) const {
  if (grid.extents() != ext_) raise(ErrorKind::GridMismatch, "mask and grid extents differ");
  return Volume3D::like(grid, std::vector<double>(values_.begin(), values_.end()));
}

std::size_t Mask3D::count() const noexcept {
  return static_cast<std::size_t>(std::count(values_.begin(), values_.end(), std::uint8_t{1}));
}

Mask3D Mask3D::slice(int z) const {
  const auto first = values_.begin() + static_cast<std::ptrdiff_t>(ext_.plane() * static_cast<std::size_t>(z));
  return Mask3D({ext_.nx, ext_.ny, 1}, std::vector<std::uint8_t>(first, first + static_cast<std::ptrdiff_t>(ext_.plane())));
}

double sample_line_linear(std::span<const double> column, double position) noexcept {
  const auto n = static_cast<std::ptrdiff_t>(column.size());
  if (n == 1 || position <= 0.0) return column.front();
  if (position >= static_cast<double>(n - 1)) return column.back();
  const double base = std::floor(position);
  const auto i = static_cast<std::size_t>(base);
  const double t = position - base;
  return column[i] + t * (column[i + 1] - column[i]);
}

double sample_line_slope(std::span<const double> column, double position) noexcept {
  const auto n = static_cast<std::ptrdiff_t>(column.size());
  if (n == 1 || position < 0.0 || position >= static_cast<double>(n - 1)) return 0.0;
  const auto i = static_cast<std::size_t>(std::floor(position));
  return column[i + 1] - column[i];
}

Mask3D dilate_mask(const Mask3D& m, int radius) {
  if (radius < 0) raise(ErrorKind::InvalidArgument, "dilation radius must be non-negative");
  if (radius == 0) return m;
  const Extents ext = m.extents();
  // Separable box dilation: along x, then along y, inside each slice.
  std::vector<std::uint8_t> tmp(ext.count(), 0);
  std::vector<std::uint8_t> out(ext.count(), 0);
  const auto src = m.values();
  for (int z = 0; z < ext.nz; ++z) {
    for (int y = 0; y < ext.ny; ++y) {
      for (int x = 0; x < ext.nx; ++x) {
        if (!src[ext.index(x, y, z)]) continue;
        const int lo = std::max(0, x - radius), hi = std::min(ext.nx - 1, x + radius);
        for (int xx = lo; xx <= hi; ++xx) tmp[ext.index(xx, y, z)] = 1;
      }
    }
    for (int y = 0; y < ext.ny; ++y) {
      for (int x = 0; x < ext.nx; ++x) {
        if (!tmp[ext.index(x, y, z)]) continue;
        const int lo = std::max(0, y - radius), hi = std::min(ext.ny - 1, y + radius);
        for (int yy = lo; yy <= hi; ++yy) out[ext.index(x, yy, z)] = 1;
      }
    }
  }
  return Mask3D(ext, std::move(out));
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) raise(ErrorKind::EmptyMask, "quantile of an empty sample");
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
  const double a = values[lo];
  double b = a;
  if (hi != lo) b = *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(hi), values.end());
  return a + (pos - static_cast<double>(lo)) * (b - a);
}

Mask3D threshold_mask(const Volume3D& v, double q) {
  if (!(q > 0.0 && q < 1.0)) raise(ErrorKind::InvalidArgument, "quantile must lie in (0, 1)");
  const auto vals = v.values();
  const auto [mn, mx] = std::minmax_element(vals.begin(), vals.end());
  if (*mn == *mx) raise(ErrorKind::DegenerateVolume, "constant-valued volume");
  const double threshold = quantile(std::vector<double>(vals.begin(), vals.end()), q);

  const Extents ext = v.extents();
  std::vector<std::uint8_t> above(ext.count());
  for (std::size_t i = 0; i < vals.size(); ++i) above[i] = vals[i] > threshold ? 1 : 0;

  // Flood-fill labelling; keep the largest 6-connected component.
  std::vector<int> label(ext.count(), 0);
  std::vector<std::size_t> stack;
  int best_label = 0;
  std::size_t best_size = 0;
  int next_label = 0;
  for (std::size_t seed = 0; seed < above.size(); ++seed) {
    if (!above[seed] || label[seed]) continue;
    ++next_label;
    std::size_t size = 0;
    stack.push_back(seed);
    label[seed] = next_label;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++size;
      const int x = static_cast<int>(i % static_cast<std::size_t>(ext.nx));
      const int y = static_cast<int>((i / static_cast<std::size_t>(ext.nx)) % static_cast<std::size_t>(ext.ny));
      const int z = static_cast<int>(i / ext.plane());
      const std::array<std::array<int, 3>, 6> nbrs{{{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z},
                                                     {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}}};
      for (const auto& n : nbrs) {
        if (n[0] < 0 || n[1] < 0 || n[2] < 0 || n[0] >= ext.nx || n[1] >= ext.ny || n[2] >= ext.nz) continue;
        const std::size_t j = ext.index(n[0], n[1], n[2]);
        if (above[j] && !label[j]) {
          label[j] = next_label;
          stack.push_back(j);
        }
      }
    }
    if (size > best_size) {
      best_size = size;
      best_label = next_label;
    }
  }
  if (best_size == 0) raise(ErrorKind::DegenerateVolume, "no voxels above the threshold");
  std::vector<std::uint8_t> out(ext.count());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = label[i] == best_label ? 1 : 0;
  return Mask3D(ext, std::move(out));
}

double IntensityMapping::apply(double v) const noexcept {
  return std::clamp((v - low) / (high - low), 0.0, 1.0);
}

NormalizedVolume normalize_intensity(const Volume3D& v, const Mask3D& m) {
  if (v.extents() != m.extents()) raise(ErrorKind::GridMismatch, "mask and volume extents differ");
  std::vector<double> inside;
  const auto vals = v.values();
  const auto mv = m.values();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    if (mv[i]) inside.push_back(vals[i]);
  }
  if (inside.empty()) raise(ErrorKind::EmptyMask, "normalization mask is empty");
  IntensityMapping map;
  map.low = quantile(inside, kNormalizeLowPercentile);
  map.high = quantile(std::move(inside), kNormalizeHighPercentile);
  if (!(map.high > map.low)) raise(ErrorKind::DegenerateVolume, "in-mask percentile span is zero");
  std::vector<double> out(vals.size());
  for (std::size_t i = 0; i < vals.size(); ++i) out[i] = map.apply(vals[i]);
  return {Volume3D::like(v, std::move(out)), map};
}

}  // namespace epi
