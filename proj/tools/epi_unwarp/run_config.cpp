#include "run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace epi::cli {

namespace {

using nlohmann::json;

// Reads keys of one JSON object into fields, rejecting unknown keys.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
  }
  // Rejects keys no field() or object() call asked for.
  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError("unknown key " + path_ + "." + key);
    }
  }

  template <class T>
  Reader& field(const char* key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return *this;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("");
      }
      out = it->get<T>();
    } catch (const std::exception&) {
      throw ConfigError("bad value for " + path_ + "." + key);
    }
    return *this;
  }

  template <class Fn>
  Reader& object(const char* key, Fn&& fn) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it != j_.end()) fn(*it, path_ + "." + key);
    return *this;
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json to_json(const nn::UNetConfig& c) {
  return {{"in_channels", c.in_channels}, {"base_channels", c.base_channels}, {"levels", c.levels}, {"max_channels", c.max_channels},
          {"out_channels", c.out_channels}, {"dropout_rate", c.dropout_rate}, {"kernel", c.kernel}};
}
void from_json(const json& j, const std::string& p, nn::UNetConfig& c) {
  Reader(j, p)
      .field("in_channels", c.in_channels)
      .field("base_channels", c.base_channels)
      .field("levels", c.levels)
      .field("max_channels", c.max_channels)
      .field("out_channels", c.out_channels)
      .field("dropout_rate", c.dropout_rate)
      .field("kernel", c.kernel).finish();
}

json to_json(const LossWeights& w) {
  return {{"vdm_l1", w.vdm_l1}, {"gradient", w.gradient}, {"structural", w.structural}, {"mutual_info", w.mutual_info},
          {"weight_l1", w.weight_l1}};
}
void from_json(const json& j, const std::string& p, LossWeights& w) {
  Reader(j, p)
      .field("vdm_l1", w.vdm_l1)
      .field("gradient", w.gradient)
      .field("structural", w.structural)
      .field("mutual_info", w.mutual_info)
      .field("weight_l1", w.weight_l1).finish();
}

json to_json(const SsimConfig& s) {
  return {{"window", s.window}, {"sigma", s.sigma}, {"k1", s.k1}, {"k2", s.k2}, {"dynamic_range", s.dynamic_range}};
}
void from_json(const json& j, const std::string& p, SsimConfig& s) {
  Reader(j, p).field("window", s.window).field("sigma", s.sigma).field("k1", s.k1).field("k2", s.k2).field("dynamic_range", s.dynamic_range).finish();
}

json to_json(const MiConfig& m) { return {{"bins", m.bins}, {"sigma", m.sigma}, {"truncate", m.truncate}}; }
void from_json(const json& j, const std::string& p, MiConfig& m) {
  Reader(j, p).field("bins", m.bins).field("sigma", m.sigma).field("truncate", m.truncate).finish();
}

json to_json(const AugmentConfig& a) {
  return {{"enabled", a.enabled},
          {"apply_probability", a.apply_probability},
          {"translation_max", a.translation_max},
          {"crop_min", a.crop_min},
          {"crop_max", a.crop_max},
          {"noise_sigma", a.noise_sigma},
          {"flip_enabled", a.flip_enabled},
          {"flip_probability", a.flip_probability},
          {"mixcut_enabled", a.mixcut_enabled},
          {"mixcut_probability", a.mixcut_probability}};
}
void from_json(const json& j, const std::string& p, AugmentConfig& a) {
  Reader(j, p)
      .field("enabled", a.enabled)
      .field("apply_probability", a.apply_probability)
      .field("translation_max", a.translation_max)
      .field("crop_min", a.crop_min)
      .field("crop_max", a.crop_max)
      .field("noise_sigma", a.noise_sigma)
      .field("flip_enabled", a.flip_enabled)
      .field("flip_probability", a.flip_probability)
      .field("mixcut_enabled", a.mixcut_enabled)
      .field("mixcut_probability", a.mixcut_probability).finish();
}

json to_json(const SplitSpec& s) { return {{"train", s.train}, {"val", s.val}, {"test", s.test}, {"seed", s.seed}}; }
void from_json(const json& j, const std::string& p, SplitSpec& s) {
  Reader(j, p).field("train", s.train).field("val", s.val).field("test", s.test).field("seed", s.seed).finish();
}

json to_json(const TrainConfig& t) {
  return {{"net", to_json(t.net)},
          {"weights", to_json(t.weights)},
          {"ssim", to_json(t.ssim)},
          {"mi", to_json(t.mi)},
          {"augment", to_json(t.augment)},
          {"split", to_json(t.split)},
          {"adam", {{"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"epsilon", t.adam.epsilon}}},
          {"scheduler",
           {{"plateau_patience", t.scheduler.plateau_patience},
            {"factor", t.scheduler.factor},
            {"early_stop_patience", t.scheduler.early_stop_patience}}},
          {"learning_rate", t.learning_rate},
          {"batch_size", t.batch_size},
          {"epochs", t.epochs},
          {"use_t1", t.use_t1},
          {"seed", t.seed}};
}
void from_json(const json& j, const std::string& p, TrainConfig& t) {
  Reader(j, p)
      .object("net", [&](const json& v, const std::string& q) { from_json(v, q, t.net); })
      .object("weights", [&](const json& v, const std::string& q) { from_json(v, q, t.weights); })
      .object("ssim", [&](const json& v, const std::string& q) { from_json(v, q, t.ssim); })
      .object("mi", [&](const json& v, const std::string& q) { from_json(v, q, t.mi); })
      .object("augment", [&](const json& v, const std::string& q) { from_json(v, q, t.augment); })
      .object("split", [&](const json& v, const std::string& q) { from_json(v, q, t.split); })
      .object("adam",
              [&](const json& v, const std::string& q) {
                Reader(v, q).field("beta1", t.adam.beta1).field("beta2", t.adam.beta2).field("epsilon", t.adam.epsilon).finish();
              })
      .object("scheduler",
              [&](const json& v, const std::string& q) {
                Reader(v, q)
                    .field("plateau_patience", t.scheduler.plateau_patience)
                    .field("factor", t.scheduler.factor)
                    .field("early_stop_patience", t.scheduler.early_stop_patience).finish();
              })
      .field("learning_rate", t.learning_rate)
      .field("batch_size", t.batch_size)
      .field("epochs", t.epochs)
      .field("use_t1", t.use_t1)
      .field("seed", t.seed).finish();
}

json to_json(const PhantomSpec& s) {
  json contrast = json::array();
  for (const auto& c : s.contrast) contrast.push_back({{"b0_low", c.b0_low}, {"b0_high", c.b0_high}, {"t1_low", c.t1_low}, {"t1_high", c.t1_high}});
  return {{"extents", {s.extents.nx, s.extents.ny, s.extents.nz}},
          {"voxel_size", s.voxel_size},
          {"head_radius_min", s.head_radius_min},
          {"head_radius_max", s.head_radius_max},
          {"head_z_radius_min", s.head_z_radius_min},
          {"head_z_radius_max", s.head_z_radius_max},
          {"deep_nuclei_min", s.deep_nuclei_min},
          {"deep_nuclei_max", s.deep_nuclei_max},
          {"contrast", contrast},
          {"bias_amplitude", s.bias_amplitude},
          {"blur_sigma", s.blur_sigma},
          {"noise_sigma", s.noise_sigma},
          {"intensity_scale", s.intensity_scale},
          {"bumps_min", s.bumps_min},
          {"bumps_max", s.bumps_max},
          {"amplitude_min", s.amplitude_min},
          {"amplitude_max", s.amplitude_max},
          {"width_min", s.width_min},
          {"width_max", s.width_max},
          {"z_width_min", s.z_width_min},
          {"z_width_max", s.z_width_max},
          {"min_jacobian", s.min_jacobian},
          {"max_shift_voxels", s.max_shift_voxels},
          {"mask_dilation", s.mask_dilation},
          {"seed", s.seed}};
}
void from_json(const json& j, const std::string& p, PhantomSpec& s) {
  std::array<int, 3> ext{s.extents.nx, s.extents.ny, s.extents.nz};
  Reader(j, p)
      .field("extents", ext)
      .field("voxel_size", s.voxel_size)
      .field("head_radius_min", s.head_radius_min)
      .field("head_radius_max", s.head_radius_max)
      .field("head_z_radius_min", s.head_z_radius_min)
      .field("head_z_radius_max", s.head_z_radius_max)
      .field("deep_nuclei_min", s.deep_nuclei_min)
      .field("deep_nuclei_max", s.deep_nuclei_max)
      .object("contrast",
              [&](const json& v, const std::string& q) {
                if (!v.is_array() || v.size() != s.contrast.size()) {
                  throw ConfigError(q + " must list " + std::to_string(s.contrast.size()) + " tissue classes");
                }
                for (std::size_t i = 0; i < s.contrast.size(); ++i) {
                  auto& c = s.contrast[i];
                  Reader(v[i], q + "[" + std::to_string(i) + "]")
                      .field("b0_low", c.b0_low)
                      .field("b0_high", c.b0_high)
                      .field("t1_low", c.t1_low)
                      .field("t1_high", c.t1_high).finish();
                }
              })
      .field("bias_amplitude", s.bias_amplitude)
      .field("blur_sigma", s.blur_sigma)
      .field("noise_sigma", s.noise_sigma)
      .field("intensity_scale", s.intensity_scale)
      .field("bumps_min", s.bumps_min)
      .field("bumps_max", s.bumps_max)
      .field("amplitude_min", s.amplitude_min)
      .field("amplitude_max", s.amplitude_max)
      .field("width_min", s.width_min)
      .field("width_max", s.width_max)
      .field("z_width_min", s.z_width_min)
      .field("z_width_max", s.z_width_max)
      .field("min_jacobian", s.min_jacobian)
      .field("max_shift_voxels", s.max_shift_voxels)
      .field("mask_dilation", s.mask_dilation)
      .field("seed", s.seed).finish();
  s.extents = {ext[0], ext[1], ext[2]};
}

}  // namespace

std::string serialize(const RunConfig& cfg) {
  const json j = {{"version", cfg.version},
                  {"train", to_json(cfg.train)},
                  {"acquisition",
                   {{"readout_time", cfg.acquisition.readout_time},
                    {"pe_voxel_size", cfg.acquisition.pe_voxel_size},
                    {"pe_sign", cfg.acquisition.pe_sign}}},
                  {"phantom", to_json(cfg.phantom)},
                  {"pe_axis", cfg.pe_axis},
                  {"subjects", cfg.subjects}};
  return j.dump(2) + "\n";
}

RunConfig parse_config(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (!j.contains("version")) throw ConfigError("config needs a \"version\" field");
  Reader(j, "config")
      .field("version", cfg.version)
      .object("train", [&](const json& v, const std::string& q) { from_json(v, q, cfg.train); })
      .object("acquisition",
              [&](const json& v, const std::string& q) {
                Reader(v, q)
                    .field("readout_time", cfg.acquisition.readout_time)
                    .field("pe_voxel_size", cfg.acquisition.pe_voxel_size)
                    .field("pe_sign", cfg.acquisition.pe_sign).finish();
              })
      .object("phantom", [&](const json& v, const std::string& q) { from_json(v, q, cfg.phantom); })
      .field("pe_axis", cfg.pe_axis)
      .field("subjects", cfg.subjects).finish();
  if (cfg.version != kConfigVersion) {
    throw ConfigError("config version " + std::to_string(cfg.version) + " is not supported (expected " + std::to_string(kConfigVersion) + ")");
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace epi::cli
