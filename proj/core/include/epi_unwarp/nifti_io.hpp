#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace epi::nifti {

// On-disk datatype codes accepted by the reader.
enum class Datatype : std::int16_t {
  UInt8 = 2,
  Int16 = 4,
  Int32 = 8,
  Float32 = 16,
  Float64 = 64,
};

inline constexpr std::int32_t kHeaderSize = 348;
inline constexpr std::int32_t kSingleFileOffset = 352;

/// Decoded NIfTI-1 header. Only the fields the toolkit reads or carries
/// through are kept; everything else is zero-filled on write.
struct Header {
  std::int32_t sizeof_hdr = kHeaderSize;
  std::array<std::int16_t, 8> dim{};
  std::int16_t datatype = static_cast<std::int16_t>(Datatype::Float32);
  std::int16_t bitpix = 32;
  std::array<float, 8> pixdim{};
  float vox_offset = static_cast<float>(kSingleFileOffset);
  float scl_slope = 1.0f;
  float scl_inter = 0.0f;
  std::uint8_t xyzt_units = 0;
  std::int16_t qform_code = 0;
  std::int16_t sform_code = 0;
  float quatern_b = 0.0f;
  float quatern_c = 0.0f;
  float quatern_d = 0.0f;
  float qoffset_x = 0.0f;
  float qoffset_y = 0.0f;
  float qoffset_z = 0.0f;
  std::array<float, 4> srow_x{};
  std::array<float, 4> srow_y{};
  std::array<float, 4> srow_z{};
  std::array<char, 80> descrip{};
  std::array<char, 4> magic{'n', '+', '1', '\0'};

  int rank() const noexcept { return dim[0]; }
  std::size_t voxel_count() const noexcept;
};

/// Header plus scalar payload, already mapped through scl_slope/scl_inter.
struct RawVolume {
  Header header;
  std::vector<double> data;  // x fastest
};

/// Builds a float32-ready header for the given extents and voxel sizes
/// (pixdim[1..3]). A 4th extent > 1 makes the header rank 4.
Header make_header(std::span<const int> extents, std::span<const double> voxel_size);

RawVolume decode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode(const RawVolume& volume);

/// Reads a single-file NIfTI-1 volume; gzip containers are detected by
/// their magic bytes rather than the file extension.
RawVolume read_nifti(const std::filesystem::path& path);

/// Writes float32, vox_offset 352, host byte order. A ".gz" suffix on the
/// path selects a gzip container.
void write_nifti(const RawVolume& volume, const std::filesystem::path& path);

namespace detail {
std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> gzip(std::span<const std::uint8_t> bytes);
// Reverses each `width`-byte word in place.
void swap_words(std::span<std::uint8_t> bytes, std::size_t width);
}  // namespace detail

}  // namespace epi::nifti
