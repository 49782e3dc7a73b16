#include "commands.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "epi_unwarp/checkpoint.hpp"
#include "epi_unwarp/errors.hpp"
#include "epi_unwarp/nifti_io.hpp"
#include "epi_unwarp/unwarp.hpp"
#include "epi_unwarp/volume_io.hpp"

namespace epi::cli {

namespace fs = std::filesystem;

GeneratedDataset cmd_simulate(const RunConfig& cfg, const fs::path& out_dir, std::ostream& report) {
  GeneratedDataset ds = generate_dataset(cfg.subjects, cfg.phantom, out_dir);
  for (const auto& s : ds.stats) {
    report << "subject=" << s.id << " vdm_min_mm=" << s.min_vdm << " vdm_max_mm=" << s.max_vdm << " min_jacobian=" << s.min_jacobian
           << '\n';
  }
  report << "manifest=" << ds.manifest.string() << '\n';
  return ds;
}

void cmd_fm2vdm(const fs::path& fieldmap, const AcquisitionParams& acq, bool pe_voxel_size_given, int pe_axis, const fs::path& out) {
  const nifti::RawVolume raw = nifti::read_nifti(fieldmap);
  if (frame_count(raw) != 1) raise(ErrorKind::InvalidArgument, "field map must be a single 3-D volume");
  const Volume3D hz = to_volume(raw, pe_axis);
  AcquisitionParams a = acq;
  if (!pe_voxel_size_given) a.pe_voxel_size = hz.pe_voxel_size();
  const DisplacementMap vdm = fieldmap_to_vdm(FieldMap(hz), a);
  save_volume(vdm.mm(), out);
}

std::string train_log_header() { return "epoch\tvdm_l1\tgrad_l2\tdssim\tneg_mi\tweight_l1\ttotal\tval_total\tlr"; }

std::string train_log_row(const EpochRecord& r) {
  std::ostringstream os;
  os << std::setprecision(9) << r.epoch << '\t' << r.train.vdm_l1 << '\t' << r.train.grad_l2 << '\t' << r.train.dssim << '\t' << r.train.neg_mi
     << '\t' << r.train.weight_l1 << '\t' << r.train.total << '\t' << r.val_total << '\t' << r.learning_rate;
  return os.str();
}

TrainReport cmd_train(const RunConfig& cfg, const fs::path& manifest, const fs::path& checkpoint_out, const fs::path& log_path,
                      std::ostream& log) {
  cfg.train.validate();
  const auto rows = read_manifest(manifest);
  if (rows.empty()) raise(ErrorKind::TooFewSubjects, "manifest lists no subjects");
  std::vector<std::string> ids;
  for (const auto& r : rows) ids.push_back(r.id);

  TrainReport report;
  if (ids.size() >= 3) {
    report.split = split_subjects(ids, cfg.train.split);
  } else {
    log << "fewer than 3 subjects: training and validating on the same subjects\n";
    report.split.train = ids;
    report.split.val = ids;
  }
  auto stacks_for = [&](const std::vector<std::string>& part) {
    std::vector<SliceStack> out;
    for (const auto& id : part) {
      const auto it = std::find_if(rows.begin(), rows.end(), [&](const ManifestRow& r) { return r.id == id; });
      const SubjectVolumes s = load_subject(*it, cfg.pe_axis);
      auto st = build_stacks(s.b0, s.t1, s.vdm, s.mask, s.id);
      out.insert(out.end(), std::make_move_iterator(st.begin()), std::make_move_iterator(st.end()));
    }
    return out;
  };
  const auto train_set = stacks_for(report.split.train);
  const auto val_set = stacks_for(report.split.val);
  report.train_slices = train_set.size();
  report.val_slices = val_set.size();
  log << "subjects train=" << report.split.train.size() << " val=" << report.split.val.size() << " test=" << report.split.test.size()
      << " slices train=" << train_set.size() << " val=" << val_set.size() << '\n';

  std::ofstream table(log_path, std::ios::trunc);
  if (!table) raise(ErrorKind::Io, "cannot write " + log_path.string());
  table << train_log_header() << '\n';
  report.result = train(cfg.train, train_set, val_set, [&](const EpochRecord& r) {
    table << train_log_row(r) << '\n' << std::flush;
    log << "epoch " << r.epoch << " train_total=" << r.train.total << " val_total=" << r.val_total << " lr=" << r.learning_rate << '\n';
  });
  if (!table) raise(ErrorKind::Io, "write failed for " + log_path.string());

  nn::Checkpoint ck{cfg.train.net, report.result.best_params, report.result.state, cfg.train.use_t1};
  nn::save_checkpoint(ck, checkpoint_out);
  log << "best epoch " << report.result.best_epoch << (report.result.stopped_early ? " (stopped early)" : "") << ", checkpoint "
      << checkpoint_out.string() << '\n';
  return report;
}

CorrectReport cmd_correct(const fs::path& checkpoint, const fs::path& b0_path, const fs::path& t1_path, const fs::path& mask_path,
                          const std::string& out_prefix, int pe_axis) {
  const auto start = std::chrono::steady_clock::now();
  const nn::Checkpoint ck = nn::load_checkpoint(checkpoint);
  const nn::UNet net(ck.config);
  const nifti::RawVolume raw = nifti::read_nifti(b0_path);
  const int frames = frame_count(raw);
  const Volume3D b0 = to_volume(raw, pe_axis, 0);
  const Volume3D t1 = load_volume(t1_path, pe_axis);
  const Mask3D mask = load_mask(mask_path);
  if (!b0.same_grid(t1) || b0.extents() != mask.extents()) raise(ErrorKind::GridMismatch, "b0, T1w and mask grids differ");

  const DisplacementMap vdm = predict_vdm(net, ck.params, b0, t1, mask, ck.use_t1);
  std::vector<Volume3D> corrected;
  for (int f = 0; f < frames; ++f) corrected.push_back(correct_b0(to_volume(raw, pe_axis, f), vdm));

  CorrectReport r;
  r.frames = frames;
  r.vdm_path = out_prefix + "_vdm.nii.gz";
  r.corrected_path = out_prefix + "_b0_corrected.nii.gz";
  save_volume(vdm.mm(), r.vdm_path);
  nifti::write_nifti(to_raw(corrected), r.corrected_path);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

std::vector<double> read_number_list(const fs::path& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorKind::Io, "cannot open " + path.string());
  std::vector<double> v;
  std::string tok;
  while (in >> tok) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      raise(ErrorKind::InvalidArgument, path.string() + ": not a number: " + tok);
    }
  }
  return v;
}

EvaluateReport cmd_evaluate(const EvaluateInputs& in, int pe_axis) {
  EvaluateReport r;
  const bool images = in.pred_vdm || in.ref_vdm || in.pred_b0 || in.ref_b0 || in.t1;
  if (in.pred_vdm.has_value() != in.ref_vdm.has_value()) raise(ErrorKind::InvalidArgument, "VDM RMSE needs both --pred-vdm and --ref-vdm");
  if (in.ref_b0 && !in.pred_b0) raise(ErrorKind::InvalidArgument, "b0 RMSE needs --pred-b0");
  if (in.t1 && !in.pred_b0) raise(ErrorKind::InvalidArgument, "MI needs --pred-b0");
  if (in.mi_a.has_value() != in.mi_b.has_value()) raise(ErrorKind::InvalidArgument, "the t-test needs both --mi-a and --mi-b");
  if (images) {
    if (!in.mask) raise(ErrorKind::InvalidArgument, "image metrics need --mask");
    const Mask3D mask = load_mask(*in.mask);
    auto load = [&](const fs::path& p) {
      Volume3D v = load_volume(p, pe_axis);
      if (v.extents() != mask.extents()) raise(ErrorKind::GridMismatch, p.string() + " does not match the mask grid");
      return v;
    };
    if (in.pred_vdm) r.vdm_rmse = rmse(load(*in.pred_vdm).view(), load(*in.ref_vdm).view(), mask.view());
    if (in.pred_b0) {
      const Volume3D pred = load(*in.pred_b0);
      if (in.ref_b0) r.b0_rmse = rmse(pred.view(), load(*in.ref_b0).view(), mask.view());
      if (in.t1) r.mi = mutual_information(load(*in.t1).view(), pred.view(), mask.view());
    }
  }
  if (in.mi_a) {
    const auto a = read_number_list(*in.mi_a);
    const auto b = read_number_list(*in.mi_b);
    r.t_test = paired_t_test(a, b);
  }
  return r;
}

void print_report(const EvaluateReport& r, std::ostream& out) {
  out << std::setprecision(10);
  if (r.vdm_rmse) out << "vdm_rmse=" << *r.vdm_rmse << '\n';
  if (r.b0_rmse) out << "b0_rmse=" << *r.b0_rmse << '\n';
  if (r.mi) out << "mi=" << *r.mi << '\n';
  if (r.t_test) out << "t=" << r.t_test->t << "\np=" << r.t_test->p << "\ndof=" << r.t_test->dof << '\n';
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"EPI susceptibility distortion toolkit", "epi-unwarp"};
  app.require_subcommand(1);
  std::string config_path;
  bool print_config = false;
  app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_flag("--print-config", print_config, "Print the effective configuration and exit");

  // simulate
  auto* sim = app.add_subcommand("simulate", "Generate a phantom dataset");
  std::string sim_out;
  int sim_subjects = 0;
  std::uint64_t sim_seed = 0;
  sim->add_option("--out", sim_out, "Output directory")->required();
  auto* sim_n = sim->add_option("--subjects", sim_subjects, "Number of subjects")->check(CLI::PositiveNumber);
  auto* sim_s = sim->add_option("--seed", sim_seed, "Master seed");

  // fm2vdm
  auto* fm = app.add_subcommand("fm2vdm", "Convert a field map (Hz) into a VDM (mm)");
  std::string fm_in, fm_out;
  double fm_readout = 0.0, fm_voxel = 0.0;
  int fm_sign = 1, fm_axis = 1;
  fm->add_option("--fieldmap", fm_in, "Field map NIfTI")->required()->check(CLI::ExistingFile);
  fm->add_option("--out", fm_out, "Output VDM NIfTI")->required();
  auto* fm_r = fm->add_option("--readout", fm_readout, "Total readout time in seconds");
  auto* fm_v = fm->add_option("--pe-voxel-size", fm_voxel, "PE voxel size in mm (default: from header)");
  auto* fm_s = fm->add_option("--pe-sign", fm_sign, "PE polarity, +1 or -1");
  auto* fm_a = fm->add_option("--pe-axis", fm_axis, "PE axis (0 or 1)");

  // train
  auto* tr = app.add_subcommand("train", "Train the network on a manifest");
  std::string tr_manifest, tr_ckpt, tr_log;
  int tr_epochs = 0, tr_batch = 0, tr_levels = 0, tr_base = 0;
  double tr_lr = 0.0;
  std::uint64_t tr_seed = 0;
  bool tr_no_t1 = false;
  tr->add_option("--manifest", tr_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  tr->add_option("--checkpoint", tr_ckpt, "Checkpoint output path")->required();
  tr->add_option("--log", tr_log, "Per-epoch loss table (default: <checkpoint>.log.tsv)");
  auto* tr_e = tr->add_option("--epochs", tr_epochs, "Maximum epochs")->check(CLI::PositiveNumber);
  auto* tr_b = tr->add_option("--batch-size", tr_batch, "Batch size")->check(CLI::PositiveNumber);
  auto* tr_l = tr->add_option("--lr", tr_lr, "Initial learning rate")->check(CLI::PositiveNumber);
  auto* tr_s = tr->add_option("--seed", tr_seed, "Seed");
  auto* tr_lv = tr->add_option("--levels", tr_levels, "Network depth")->check(CLI::PositiveNumber);
  auto* tr_bc = tr->add_option("--base-channels", tr_base, "Feature maps at the first level")->check(CLI::PositiveNumber);
  tr->add_flag("--no-t1", tr_no_t1, "Zero the T1w channels and drop the MI term");

  // correct
  auto* co = app.add_subcommand("correct", "Predict a VDM and correct a b0 volume");
  std::string co_ckpt, co_b0, co_t1, co_mask, co_prefix;
  int co_axis = 1;
  co->add_option("--checkpoint", co_ckpt, "Trained checkpoint")->required()->check(CLI::ExistingFile);
  co->add_option("--b0", co_b0, "Distorted b0 (3-D or 4-D)")->required()->check(CLI::ExistingFile);
  co->add_option("--t1", co_t1, "Co-registered T1w")->required()->check(CLI::ExistingFile);
  co->add_option("--mask", co_mask, "Brain mask")->required()->check(CLI::ExistingFile);
  co->add_option("--out-prefix", co_prefix, "Output prefix")->required();
  auto* co_a = co->add_option("--pe-axis", co_axis, "PE axis (0 or 1)");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Report RMSE, MI and paired t statistics");
  std::string ev_pv, ev_rv, ev_pb, ev_rb, ev_t1, ev_mask, ev_ma, ev_mb;
  int ev_axis = 1;
  auto* ev_pv_o = ev->add_option("--pred-vdm", ev_pv)->check(CLI::ExistingFile);
  auto* ev_rv_o = ev->add_option("--ref-vdm", ev_rv)->check(CLI::ExistingFile);
  auto* ev_pb_o = ev->add_option("--pred-b0", ev_pb)->check(CLI::ExistingFile);
  auto* ev_rb_o = ev->add_option("--ref-b0", ev_rb)->check(CLI::ExistingFile);
  auto* ev_t1_o = ev->add_option("--t1", ev_t1)->check(CLI::ExistingFile);
  auto* ev_m_o = ev->add_option("--mask", ev_mask)->check(CLI::ExistingFile);
  auto* ev_ma_o = ev->add_option("--mi-a", ev_ma, "Per-subject MI list, method A")->check(CLI::ExistingFile);
  auto* ev_mb_o = ev->add_option("--mi-b", ev_mb, "Per-subject MI list, method B")->check(CLI::ExistingFile);
  auto* ev_a = ev->add_option("--pe-axis", ev_axis, "PE axis (0 or 1)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, r;
    const int code = app.exit(e, o, r);
    out << o.str();
    err << r.str();
    return code == 0 ? kOk : kUsageError;
  }

  RunConfig cfg;
  try {
    if (!config_path.empty()) cfg = load_config(config_path);
  } catch (const ConfigError& e) {
    err << "epi-unwarp: " << e.what() << '\n';
    return kUsageError;
  }
  // Command-line flags win over the config file.
  if (*sim_n) cfg.subjects = sim_subjects;
  if (*sim_s) cfg.phantom.seed = sim_seed;
  if (*fm_r) cfg.acquisition.readout_time = fm_readout;
  if (*fm_v) cfg.acquisition.pe_voxel_size = fm_voxel;
  if (*fm_s) cfg.acquisition.pe_sign = fm_sign;
  if (*fm_a) cfg.pe_axis = fm_axis;
  if (*tr_e) cfg.train.epochs = tr_epochs;
  if (*tr_b) cfg.train.batch_size = tr_batch;
  if (*tr_l) cfg.train.learning_rate = tr_lr;
  if (*tr_s) cfg.train.seed = tr_seed;
  if (*tr_lv) cfg.train.net.levels = tr_levels;
  if (*tr_bc) cfg.train.net.base_channels = tr_base;
  if (tr_no_t1) {
    cfg.train.use_t1 = false;
    cfg.train.weights.mutual_info = 0.0;
  }
  if (*co_a) cfg.pe_axis = co_axis;
  if (*ev_a) cfg.pe_axis = ev_axis;

  if (print_config) {
    out << serialize(cfg);
    return kOk;
  }

  try {
    if (*sim) {
      cmd_simulate(cfg, sim_out, out);
    } else if (*fm) {
      cmd_fm2vdm(fm_in, cfg.acquisition, static_cast<bool>(*fm_v), cfg.pe_axis, fm_out);
      out << "vdm=" << fm_out << '\n';
    } else if (*tr) {
      const std::string log_path = tr_log.empty() ? tr_ckpt + ".log.tsv" : tr_log;
      const TrainReport rep = cmd_train(cfg, tr_manifest, tr_ckpt, log_path, err);
      out << "checkpoint=" << tr_ckpt << "\nlog=" << log_path << "\nepochs=" << rep.result.history.size() << "\nbest_epoch=" << rep.result.best_epoch
          << "\ntest_subjects=";
      for (std::size_t i = 0; i < rep.split.test.size(); ++i) out << (i ? "," : "") << rep.split.test[i];
      out << '\n';
    } else if (*co) {
      const CorrectReport rep = cmd_correct(co_ckpt, co_b0, co_t1, co_mask, co_prefix, cfg.pe_axis);
      out << "vdm=" << rep.vdm_path.string() << "\nb0_corrected=" << rep.corrected_path.string() << "\nframes=" << rep.frames
          << "\nseconds=" << rep.seconds << '\n';
    } else if (*ev) {
      EvaluateInputs in;
      auto opt = [](CLI::Option* o, const std::string& v) { return *o ? std::optional<fs::path>(v) : std::nullopt; };
      in.pred_vdm = opt(ev_pv_o, ev_pv);
      in.ref_vdm = opt(ev_rv_o, ev_rv);
      in.pred_b0 = opt(ev_pb_o, ev_pb);
      in.ref_b0 = opt(ev_rb_o, ev_rb);
      in.t1 = opt(ev_t1_o, ev_t1);
      in.mask = opt(ev_m_o, ev_mask);
      in.mi_a = opt(ev_ma_o, ev_ma);
      in.mi_b = opt(ev_mb_o, ev_mb);
      print_report(cmd_evaluate(in, cfg.pe_axis), out);
    }
  } catch (const Error& e) {
    err << "epi-unwarp: " << to_string(e.kind()) << ": " << e.what() << '\n';
    return e.kind() == ErrorKind::InvalidArgument ? kUsageError : kDataError;
  } catch (const std::exception& e) {
    err << "epi-unwarp: " << e.what() << '\n';
    return kDataError;
  }
  return kOk;
}

}  // namespace epi::cli
