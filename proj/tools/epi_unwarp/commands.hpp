#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "epi_unwarp/measures.hpp"
#include "epi_unwarp/phantom.hpp"
#include "epi_unwarp/training.hpp"
#include "run_config.hpp"

namespace epi::cli {

enum ExitCode : int { kOk = 0, kUsageError = 1, kDataError = 2 };

/// Generates `cfg.subjects` phantom subjects into `out_dir`; prints one
/// field-statistics line per subject to `report`.
GeneratedDataset cmd_simulate(const RunConfig& cfg, const std::filesystem::path& out_dir, std::ostream& report);

/// Field map (Hz) to VDM (mm). Without an explicit PE voxel size the
/// header's voxel size along the PE axis is used.
void cmd_fm2vdm(const std::filesystem::path& fieldmap, const AcquisitionParams& acq, bool pe_voxel_size_given, int pe_axis,
                const std::filesystem::path& out);

struct TrainReport {
  SubjectSplit split;
  TrainResult result;
  std::size_t train_slices = 0;
  std::size_t val_slices = 0;
};

/// Column header of the per-epoch log.
std::string train_log_header();
std::string train_log_row(const EpochRecord& r);

/// Splits the manifest's subjects, trains, writes the best-validation
/// checkpoint and the per-epoch log table to `log_path`.
TrainReport cmd_train(const RunConfig& cfg, const std::filesystem::path& manifest, const std::filesystem::path& checkpoint_out,
                      const std::filesystem::path& log_path, std::ostream& log);

struct CorrectReport {
  std::filesystem::path vdm_path;
  std::filesystem::path corrected_path;
  double seconds = 0.0;
  int frames = 1;
};

/// Predicts the VDM from the first b0 frame and corrects every frame.
/// Writes <prefix>_vdm.nii.gz and <prefix>_b0_corrected.nii.gz.
CorrectReport cmd_correct(const std::filesystem::path& checkpoint, const std::filesystem::path& b0_path, const std::filesystem::path& t1_path,
                          const std::filesystem::path& mask_path, const std::string& out_prefix, int pe_axis);

struct EvaluateInputs {
  std::optional<std::filesystem::path> pred_vdm;
  std::optional<std::filesystem::path> ref_vdm;
  std::optional<std::filesystem::path> pred_b0;
  std::optional<std::filesystem::path> ref_b0;
  std::optional<std::filesystem::path> t1;
  std::optional<std::filesystem::path> mask;
  std::optional<std::filesystem::path> mi_a;  // per-subject MI lists for the paired t-test
  std::optional<std::filesystem::path> mi_b;
};

struct EvaluateReport {
  std::optional<double> vdm_rmse;
  std::optional<double> b0_rmse;
  std::optional<double> mi;
  std::optional<TTestResult> t_test;
};

EvaluateReport cmd_evaluate(const EvaluateInputs& in, int pe_axis);
/// key=value lines.
void print_report(const EvaluateReport& r, std::ostream& out);

/// Whitespace-separated numbers.
std::vector<double> read_number_list(const std::filesystem::path& path);

/// Full command-line entry point; returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace epi::cli
