#include "epi_unwarp/volume_io.hpp"

#include <array>
#include <cmath>
#include <vector>

#include "epi_unwarp/errors.hpp"

namespace epi {

int frame_count(const nifti::RawVolume& raw) {
  return raw.header.rank() == 4 ? std::max<int>(1, raw.header.dim[4]) : 1;
}

Volume3D to_volume(const nifti::RawVolume& raw, int pe_axis, int frame) {
  const auto& h = raw.header;
  if (frame < 0 || frame >= frame_count(raw)) raise(ErrorKind::InvalidArgument, "frame index out of range");
  const Extents ext{h.dim[1], h.dim[2], h.dim[3]};
  std::array<double, 3> voxel{};
  for (int i = 0; i < 3; ++i) {
    voxel[static_cast<std::size_t>(i)] = std::abs(static_cast<double>(h.pixdim[static_cast<std::size_t>(i + 1)]));
    if (!(voxel[static_cast<std::size_t>(i)] > 0.0)) voxel[static_cast<std::size_t>(i)] = 1.0;
  }
  const std::size_t n = ext.count();
  if (raw.data.size() < n * static_cast<std::size_t>(frame + 1)) raise(ErrorKind::TruncatedData, "volume payload too short");
  std::vector<double> values(raw.data.begin() + static_cast<std::ptrdiff_t>(n * static_cast<std::size_t>(frame)),
                             raw.data.begin() + static_cast<std::ptrdiff_t>(n * static_cast<std::size_t>(frame + 1)));
  Volume3D v(ext, voxel, pe_axis, std::move(values));
  if (h.sform_code > 0) {
    Affine a{};
    for (int c = 0; c < 4; ++c) {
      a[0][static_cast<std::size_t>(c)] = h.srow_x[static_cast<std::size_t>(c)];
      a[1][static_cast<std::size_t>(c)] = h.srow_y[static_cast<std::size_t>(c)];
      a[2][static_cast<std::size_t>(c)] = h.srow_z[static_cast<std::size_t>(c)];
    }
    v.set_affine(a);
  }
  return v;
}

nifti::RawVolume to_raw(std::span<const Volume3D> frames) {
  if (frames.empty()) raise(ErrorKind::InvalidArgument, "no frames to write");
  const Volume3D& first = frames.front();
  const Extents& e = first.extents();
  std::vector<int> extents{e.nx, e.ny, e.nz};
  if (frames.size() > 1) extents.push_back(static_cast<int>(frames.size()));
  const auto& vs = first.voxel_size();
  nifti::RawVolume raw;
  raw.header = nifti::make_header(extents, std::span<const double>(vs.data(), vs.size()));
  const Affine& a = first.affine();
  for (int c = 0; c < 4; ++c) {
    raw.header.srow_x[static_cast<std::size_t>(c)] = static_cast<float>(a[0][static_cast<std::size_t>(c)]);
    raw.header.srow_y[static_cast<std::size_t>(c)] = static_cast<float>(a[1][static_cast<std::size_t>(c)]);
    raw.header.srow_z[static_cast<std::size_t>(c)] = static_cast<float>(a[2][static_cast<std::size_t>(c)]);
  }
  raw.data.reserve(e.count() * frames.size());
  for (const auto& f : frames) {
    if (!f.same_grid(first)) raise(ErrorKind::GridMismatch, "frames of a series must share a grid");
    raw.data.insert(raw.data.end(), f.values().begin(), f.values().end());
  }
  return raw;
}

nifti::RawVolume to_raw(const Volume3D& v) { return to_raw(std::span<const Volume3D>(&v, 1)); }

Volume3D load_volume(const std::filesystem::path& path, int pe_axis) {
  return to_volume(nifti::read_nifti(path), pe_axis, 0);
}

void save_volume(const Volume3D& v, const std::filesystem::path& path) { nifti::write_nifti(to_raw(v), path); }

Mask3D load_mask(const std::filesystem::path& path) {
  const Volume3D v = load_volume(path);
  std::vector<std::uint8_t> bits(v.values().size());
  for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = v.values()[i] != 0.0 ? 1 : 0;
  return Mask3D(v.extents(), std::move(bits));
}

void save_mask(const Mask3D& m, const Volume3D& grid, const std::filesystem::path& path) {
  save_volume(m.to_volume(grid), path);
}

}  // namespace epi
