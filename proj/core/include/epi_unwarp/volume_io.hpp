#pragma once

#include <filesystem>

#include "epi_unwarp/nifti_io.hpp"
#include "epi_unwarp/volume.hpp"

namespace epi {

/// Number of 3-D frames in a (possibly 4-D) raw volume.
int frame_count(const nifti::RawVolume& raw);

/// One 3-D frame as a Volume3D. The sform is kept when present.
Volume3D to_volume(const nifti::RawVolume& raw, int pe_axis = 1, int frame = 0);

/// Frames stacked along dim[4]; all must share a grid.
nifti::RawVolume to_raw(std::span<const Volume3D> frames);
nifti::RawVolume to_raw(const Volume3D& v);

Volume3D load_volume(const std::filesystem::path& path, int pe_axis = 1);
void save_volume(const Volume3D& v, const std::filesystem::path& path);

/// Nonzero voxels are inside.
Mask3D load_mask(const std::filesystem::path& path);
void save_mask(const Mask3D& m, const Volume3D& grid, const std::filesystem::path& path);

}  // namespace epi
