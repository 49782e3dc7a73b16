#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "epi_unwarp/errors.hpp"
#include "epi_unwarp/volume.hpp"

namespace epi::test {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("epi_unwarp_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::vector<double> random_values(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline Volume3D random_volume(Extents e, std::uint64_t seed, double lo = 0.0, double hi = 1.0,
                              std::array<double, 3> voxel = {1.0, 1.0, 1.0}, int pe_axis = 1) {
  return Volume3D(e, voxel, pe_axis, random_values(e.count(), seed, lo, hi));
}

inline Mask3D full_mask(Extents e) { return Mask3D(e, std::vector<std::uint8_t>(e.count(), 1)); }

/// Runs fn and returns the kind of epi::Error it raised; fails otherwise.
template <class Fn>
ErrorKind error_kind(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  throw std::runtime_error("expected an epi::Error");
}

}  // namespace epi::test
