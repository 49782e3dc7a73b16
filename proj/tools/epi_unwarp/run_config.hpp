#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "epi_unwarp/phantom.hpp"
#include "epi_unwarp/training.hpp"
#include "epi_unwarp/unwarp.hpp"

namespace epi::cli {

inline constexpr int kConfigVersion = 1;

/// Everything a command can be configured with. Missing keys in a config
/// file keep these defaults.
struct RunConfig {
  int version = kConfigVersion;
  TrainConfig train;
  AcquisitionParams acquisition;
  PhantomSpec phantom;
  int pe_axis = 1;
  int subjects = 26;  // simulate

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Thrown for malformed config documents; the CLI maps it to a usage error.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string serialize(const RunConfig& cfg);
RunConfig parse_config(std::string_view json_text);
RunConfig load_config(const std::filesystem::path& path);

}  // namespace epi::cli
