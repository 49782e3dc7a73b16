#include "epi_unwarp/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

#include "epi_unwarp/errors.hpp"
#include "epi_unwarp/parallel.hpp"
#include "epi_unwarp/unwarp.hpp"
#include "epi_unwarp/volume_io.hpp"

namespace epi {

namespace {

struct Ellipsoid {
  std::array<double, 3> centre{};
  std::array<double, 3> radius{};
  double angle = 0.0;  // in-plane rotation

  // Normalised radius; <= 1 inside.
  double rho(double x, double y, double z) const noexcept {
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double dx = x - centre[0];
    const double dy = y - centre[1];
    const double u = (c * dx + s * dy) / radius[0];
    const double v = (-s * dx + c * dy) / radius[1];
    const double w = (z - centre[2]) / radius[2];
    return std::sqrt(u * u + v * v + w * w);
  }
};

class Draw {
 public:
  explicit Draw(std::uint64_t seed) : rng_(seed) {}
  double uniform(double lo, double hi) { return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  double normal(double sigma) { return sigma > 0.0 ? std::normal_distribution<double>(0.0, sigma)(rng_) : 0.0; }
  bool coin() { return integer(0, 1) == 1; }

 private:
  std::mt19937_64 rng_;
};

void blur_axis(std::vector<double>& v, const Extents& ext, int axis, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[static_cast<std::size_t>(i + radius)];
  }
  for (auto& w : k) w /= sum;
  std::vector<double> line;
  for_each_line(ext, axis, [&](std::size_t first, std::size_t stride, int len) {
    line.resize(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) line[static_cast<std::size_t>(i)] = v[first + stride * static_cast<std::size_t>(i)];
    for (int i = 0; i < len; ++i) {
      double acc = 0.0;
      for (int j = -radius; j <= radius; ++j) {
        const int p = std::clamp(i + j, 0, len - 1);
        acc += k[static_cast<std::size_t>(j + radius)] * line[static_cast<std::size_t>(p)];
      }
      v[first + stride * static_cast<std::size_t>(i)] = acc;
    }
  });
}

// Smooth multiplicative field 1 + b(x, y, z) with |b| <= amplitude.
std::vector<double> bias_field(const Extents& ext, double amplitude, Draw& draw) {
  std::array<double, 5> c{};
  for (auto& v : c) v = draw.uniform(-1.0, 1.0);
  const double norm = std::abs(c[0]) + std::abs(c[1]) + std::abs(c[2]) + std::abs(c[3]) + std::abs(c[4]);
  std::vector<double> out(ext.count());
  for (int z = 0; z < ext.nz; ++z) {
    const double w = ext.nz > 1 ? 2.0 * z / (ext.nz - 1) - 1.0 : 0.0;
    for (int y = 0; y < ext.ny; ++y) {
      const double v = 2.0 * y / (ext.ny - 1) - 1.0;
      for (int x = 0; x < ext.nx; ++x) {
        const double u = 2.0 * x / (ext.nx - 1) - 1.0;
        const double b = c[0] * u + c[1] * v + c[2] * w + c[3] * u * v + c[4] * (u * u + v * v - 1.0);
        out[ext.index(x, y, z)] = 1.0 + amplitude * b / std::max(norm, 1e-12);
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> build_labels(const PhantomSpec& spec, Draw& draw, Ellipsoid& head, std::vector<Ellipsoid>& cavities,
                                       std::vector<bool>& frontal) {
  const Extents& e = spec.extents;
  head.centre = {0.5 * e.nx + draw.uniform(-3.0, 3.0), 0.5 * e.ny + draw.uniform(-3.0, 3.0), 0.5 * e.nz + draw.uniform(-2.0, 2.0)};
  head.radius = {draw.uniform(spec.head_radius_min, spec.head_radius_max) * e.nx,
                 std::min(0.45, 1.08 * draw.uniform(spec.head_radius_min, spec.head_radius_max)) * e.ny,
                 draw.uniform(spec.head_z_radius_min, spec.head_z_radius_max) * e.nz};
  head.angle = draw.uniform(-0.15, 0.15);

  std::vector<Ellipsoid> ventricles;
  for (int side : {-1, 1}) {
    Ellipsoid v;
    v.centre = {head.centre[0] + side * 0.12 * head.radius[0], head.centre[1] + draw.uniform(-2.0, 2.0), head.centre[2] + 0.1 * head.radius[2]};
    v.radius = {0.08 * head.radius[0] * draw.uniform(0.8, 1.2), 0.28 * head.radius[1] * draw.uniform(0.8, 1.2), 0.22 * head.radius[2]};
    v.angle = head.angle;
    ventricles.push_back(v);
  }
  std::vector<Ellipsoid> nuclei(static_cast<std::size_t>(draw.integer(spec.deep_nuclei_min, spec.deep_nuclei_max)));
  for (auto& n : nuclei) {
    const double phi = draw.uniform(0.0, 2.0 * std::numbers::pi);
    const double r = draw.uniform(0.15, 0.45);
    n.centre = {head.centre[0] + r * head.radius[0] * std::cos(phi), head.centre[1] + r * head.radius[1] * std::sin(phi),
                head.centre[2] + draw.uniform(-0.3, 0.2) * head.radius[2]};
    n.radius = {draw.uniform(3.0, 7.0), draw.uniform(3.0, 7.0), draw.uniform(3.0, 6.0)};
  }

  const int n_cav = draw.integer(spec.bumps_min, spec.bumps_max);
  for (int i = 0; i < n_cav; ++i) {
    // Alternate so both kinds appear whenever there are two or more.
    const bool is_frontal = (i % 2 == 0) ? true : draw.coin();
    double phi = 0.0;
    double rho = 0.0;
    double zc = 0.0;
    if (is_frontal) {
      phi = 0.5 * std::numbers::pi + draw.uniform(-0.45, 0.45);
      rho = draw.uniform(0.78, 0.90);
      zc = head.centre[2] + draw.uniform(0.0, 0.35) * head.radius[2];
    } else {
      phi = (draw.coin() ? 0.0 : std::numbers::pi) + draw.uniform(-0.35, 0.35);
      rho = draw.uniform(0.75, 0.88);
      zc = head.centre[2] - draw.uniform(0.05, 0.40) * head.radius[2];
    }
    const double u = rho * head.radius[0] * std::cos(phi);
    const double v = rho * head.radius[1] * std::sin(phi);
    const double c = std::cos(head.angle);
    const double s = std::sin(head.angle);
    Ellipsoid cav;
    cav.centre = {head.centre[0] + c * u - s * v, head.centre[1] + s * u + c * v, zc};
    const double size = draw.uniform(3.5, 8.0);
    cav.radius = {size * draw.uniform(0.8, 1.2), size * draw.uniform(0.8, 1.2), size * draw.uniform(0.6, 1.0)};
    cav.angle = head.angle;
    cavities.push_back(cav);
    frontal.push_back(is_frontal);
  }

  std::vector<std::uint8_t> labels(e.count(), static_cast<std::uint8_t>(Tissue::Background));
  for (int z = 0; z < e.nz; ++z) {
    for (int y = 0; y < e.ny; ++y) {
      for (int x = 0; x < e.nx; ++x) {
        const double r = head.rho(x, y, z);
        Tissue t = Tissue::Background;
        if (r <= 1.0) {
          if (r > 0.92) {
            t = Tissue::Scalp;
          } else if (r > 0.86) {
            t = Tissue::Csf;
          } else if (r > 0.70) {
            t = Tissue::Grey;
          } else {
            t = Tissue::White;
            for (const auto& n : nuclei) {
              if (n.rho(x, y, z) <= 1.0) t = Tissue::Grey;
            }
            for (const auto& v : ventricles) {
              if (v.rho(x, y, z) <= 1.0) t = Tissue::Csf;
            }
          }
          for (const auto& c : cavities) {
            if (c.rho(x, y, z) <= 1.0) t = Tissue::Air;
          }
        }
        labels[e.index(x, y, z)] = static_cast<std::uint8_t>(t);
      }
    }
  }
  return labels;
}

Volume3D render(const PhantomSpec& spec, const std::vector<std::uint8_t>& labels, bool b0_contrast, Draw& draw) {
  const Extents& e = spec.extents;
  std::array<double, static_cast<std::size_t>(Tissue::Count)> level{};
  for (std::size_t c = 0; c < level.size(); ++c) {
    const auto& tc = spec.contrast[c];
    level[c] = b0_contrast ? draw.uniform(tc.b0_low, tc.b0_high) : draw.uniform(tc.t1_low, tc.t1_high);
  }
  std::vector<double> v(e.count());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = level[labels[i]];
  const auto bias = bias_field(e, spec.bias_amplitude, draw);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= bias[i];
  if (spec.blur_sigma > 0.0) {
    for (int axis = 0; axis < 3; ++axis) blur_axis(v, e, axis, spec.blur_sigma);
  }
  for (double& x : v) x = (x + draw.normal(spec.noise_sigma)) * spec.intensity_scale;
  return Volume3D(e, spec.voxel_size, 1, std::move(v));
}

}  // namespace

void PhantomSpec::validate() const {
  const Extents& e = extents;
  if (e.nx < 16 || e.ny < 16 || e.nz < 1 || e.nx % 16 != 0 || e.ny % 16 != 0) {
    raise(ErrorKind::SpecInvalid, "in-plane extents must be positive multiples of 16");
  }
  for (double v : voxel_size) {
    if (!(v > 0.0)) raise(ErrorKind::SpecInvalid, "voxel sizes must be positive");
  }
  auto range = [](double lo, double hi, const char* what) {
    if (!(lo <= hi) || !std::isfinite(lo) || !std::isfinite(hi)) raise(ErrorKind::SpecInvalid, std::string("bad range for ") + what);
  };
  range(head_radius_min, head_radius_max, "head radius");
  range(head_z_radius_min, head_z_radius_max, "head z radius");
  if (head_radius_min <= 0.0 || head_radius_max > 0.5 || head_z_radius_min <= 0.0 || head_z_radius_max > 0.5) {
    raise(ErrorKind::SpecInvalid, "head radii must lie in (0, 0.5] of the extent");
  }
  if (deep_nuclei_min < 0 || deep_nuclei_min > deep_nuclei_max) raise(ErrorKind::SpecInvalid, "bad deep-nuclei count range");
  for (const auto& c : contrast) {
    range(c.b0_low, c.b0_high, "b0 contrast");
    range(c.t1_low, c.t1_high, "T1 contrast");
  }
  if (bias_amplitude < 0.0 || bias_amplitude >= 1.0) raise(ErrorKind::SpecInvalid, "bias amplitude must lie in [0, 1)");
  if (blur_sigma < 0.0 || noise_sigma < 0.0 || !(intensity_scale > 0.0)) raise(ErrorKind::SpecInvalid, "bad image parameters");
  if (bumps_min < 0 || bumps_min > bumps_max) raise(ErrorKind::SpecInvalid, "bad bump count range");
  range(amplitude_min, amplitude_max, "amplitude");
  if (amplitude_min < 0.0) raise(ErrorKind::SpecInvalid, "amplitudes are magnitudes and must be >= 0");
  range(width_min, width_max, "width");
  range(z_width_min, z_width_max, "z width");
  if (!(width_min > 0.0) || !(z_width_min > 0.0)) raise(ErrorKind::SpecInvalid, "bump widths must be positive");
  if (!(min_jacobian > kInvertibilityMargin && min_jacobian < 1.0)) {
    raise(ErrorKind::SpecInvalid, "Jacobian floor must lie in (0.25, 1)");
  }
  if (!(max_shift_voxels > 0.0)) raise(ErrorKind::SpecInvalid, "max shift must be positive");
  if (mask_dilation < 0) raise(ErrorKind::SpecInvalid, "mask dilation must be >= 0");
}

double PhantomField::displacement(double x, double y, double z) const noexcept {
  double d = 0.0;
  for (const auto& b : bumps) {
    const double u = (x - b.centre[0]) / b.sigma[0];
    const double v = (y - b.centre[1]) / b.sigma[1];
    const double w = (z - b.centre[2]) / b.sigma[2];
    d += b.amplitude * std::exp(-0.5 * (u * u + v * v + w * w));
  }
  return d;
}

double PhantomField::d_dy(double x, double y, double z) const noexcept {
  double d = 0.0;
  for (const auto& b : bumps) {
    const double u = (x - b.centre[0]) / b.sigma[0];
    const double v = (y - b.centre[1]) / b.sigma[1];
    const double w = (z - b.centre[2]) / b.sigma[2];
    d += -b.amplitude * v / b.sigma[1] * std::exp(-0.5 * (u * u + v * v + w * w));
  }
  return d;
}

Volume3D PhantomField::sample(const Extents& ext, const std::array<double, 3>& voxel_size) const {
  std::vector<double> v(ext.count());
  for (int z = 0; z < ext.nz; ++z) {
    for (int y = 0; y < ext.ny; ++y) {
      for (int x = 0; x < ext.nx; ++x) v[ext.index(x, y, z)] = displacement(x, y, z);
    }
  }
  return Volume3D(ext, voxel_size, 1, std::move(v));
}

double PhantomField::min_jacobian(const Extents& ext, double pe_voxel_size) const {
  double m = 1.0;
  for (int z = 0; z < ext.nz; ++z) {
    for (int y = 0; y < ext.ny; ++y) {
      for (int x = 0; x < ext.nx; ++x) m = std::min(m, 1.0 + d_dy(x, y, z) / pe_voxel_size);
    }
  }
  return m;
}

double PhantomField::max_abs_displacement(const Extents& ext) const {
  double m = 0.0;
  for (int z = 0; z < ext.nz; ++z) {
    for (int y = 0; y < ext.ny; ++y) {
      for (int x = 0; x < ext.nx; ++x) m = std::max(m, std::abs(displacement(x, y, z)));
    }
  }
  return m;
}

Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  Draw draw(spec.seed);
  Ellipsoid head;
  std::vector<Ellipsoid> cavities;
  std::vector<bool> frontal;
  Phantom p;
  p.labels = build_labels(spec, draw, head, cavities, frontal);

  const double s_pe = spec.voxel_size[1];
  const double cav_min = 3.5;
  const double cav_max = 8.0;
  for (std::size_t i = 0; i < cavities.size(); ++i) {
    const auto& c = cavities[i];
    const double size = (c.radius[0] + c.radius[1]) / 2.0;
    const double t = std::clamp((size - 0.8 * cav_min) / (1.2 * cav_max - 0.8 * cav_min), 0.0, 1.0);
    const double magnitude =
        std::clamp((spec.amplitude_min + t * (spec.amplitude_max - spec.amplitude_min)) * draw.uniform(0.85, 1.15), spec.amplitude_min,
                   spec.amplitude_max);
    FieldBump b;
    b.amplitude = frontal[i] ? magnitude : -magnitude;
    b.centre = c.centre;
    b.sigma = {draw.uniform(spec.width_min, spec.width_max), draw.uniform(spec.width_min, spec.width_max),
               draw.uniform(spec.z_width_min, spec.z_width_max)};
    p.field.bumps.push_back(b);
  }

  // Scale the whole field down when it would fold or shift too far.
  const Extents& e = spec.extents;
  const double min_j = p.field.min_jacobian(e, s_pe);
  const double max_shift = p.field.max_abs_displacement(e) / s_pe;
  double scale = 1.0;
  if (min_j < spec.min_jacobian) scale = std::min(scale, (1.0 - spec.min_jacobian) / (1.0 - min_j));
  if (max_shift > spec.max_shift_voxels) scale = std::min(scale, spec.max_shift_voxels / max_shift);
  if (scale < 1.0) {
    for (auto& b : p.field.bumps) b.amplitude *= scale;
  }
  if (!(p.field.min_jacobian(e, s_pe) > kInvertibilityMargin)) {
    raise(ErrorKind::SpecInvalid, "field violates the invertibility margin");
  }

  p.t1 = render(spec, p.labels, false, draw);
  p.b0 = render(spec, p.labels, true, draw);
  p.vdm = DisplacementMap(p.field.sample(e, spec.voxel_size));
  p.distorted_b0 = forward_distort(p.b0, p.vdm);

  Mask3D head_support(e);
  for (int z = 0; z < e.nz; ++z) {
    for (int y = 0; y < e.ny; ++y) {
      for (int x = 0; x < e.nx; ++x) head_support(x, y, z) = head.rho(x, y, z) <= 1.0 ? 1 : 0;
    }
  }
  p.mask = dilate_mask(head_support, spec.mask_dilation);
  return p;
}

GeneratedDataset generate_dataset(int n_subjects, const PhantomSpec& spec, const std::filesystem::path& out_dir) {
  if (n_subjects < 1) raise(ErrorKind::InvalidArgument, "need at least one subject");
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) raise(ErrorKind::Io, "cannot create " + out_dir.string() + ": " + ec.message());

  GeneratedDataset out;
  out.rows.resize(static_cast<std::size_t>(n_subjects));
  out.stats.resize(static_cast<std::size_t>(n_subjects));
  parallel_for(static_cast<std::size_t>(n_subjects), [&](std::size_t i) {
    std::ostringstream id;
    id << "sub-" << std::setw(3) << std::setfill('0') << i;
    PhantomSpec s = spec;
    s.seed = derive_seed(spec.seed, i);
    const Phantom p = generate_phantom(s);
    ManifestRow row{id.str(), id.str() + "_b0.nii.gz", id.str() + "_t1.nii.gz", id.str() + "_vdm.nii.gz", id.str() + "_mask.nii.gz"};
    save_volume(p.distorted_b0, out_dir / row.b0);
    save_volume(p.t1, out_dir / row.t1);
    save_volume(p.vdm.mm(), out_dir / row.vdm);
    save_mask(p.mask, p.t1, out_dir / row.mask);
    const auto vals = p.vdm.mm().values();
    const auto [lo, hi] = std::minmax_element(vals.begin(), vals.end());
    out.stats[i] = {row.id, *lo, *hi, p.field.min_jacobian(s.extents, s.voxel_size[1])};
    out.rows[i] = std::move(row);
  });
  out.manifest = out_dir / "manifest.tsv";
  write_manifest(out.rows, out.manifest);
  // Rows are returned with paths resolved like read_manifest would.
  for (auto& r : out.rows) {
    r.b0 = out_dir / r.b0;
    r.t1 = out_dir / r.t1;
    r.vdm = out_dir / r.vdm;
    r.mask = out_dir / r.mask;
  }
  return out;
}

}  // namespace epi
