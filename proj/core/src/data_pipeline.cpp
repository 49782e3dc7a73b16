#include "epi_unwarp/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "epi_unwarp/errors.hpp"
#include "epi_unwarp/unwarp.hpp"
#include "epi_unwarp/volume_io.hpp"

namespace epi {

namespace {

void require_in_plane_pe(int pe_axis) {
  if (pe_axis != 0 && pe_axis != 1) raise(ErrorKind::InvalidArgument, "phase encoding must be an in-plane axis");
}

// Applies a pixel map to every plane of a stack. src(x, y) returns the source
// index in `from` or -1 for a zero fill; `from_partner` selects the source
// stack per output pixel.
template <class SourceFn>
SliceStack remap(const SliceStack& s, const SliceStack* partner, SourceFn&& src) {
  SliceStack out = s;
  const int w = s.width;
  const int h = s.height;
  const std::size_t plane = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t o = static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x);
      const auto [idx, use_partner] = src(x, y);
      const SliceStack& from = use_partner ? *partner : s;
      if (idx < 0) {
        for (int c = 0; c < out.input.channels; ++c) out.input.data[plane * static_cast<std::size_t>(c) + o] = 0.0;
        out.target_vdm[o] = 0.0;
        out.mask[o] = 0;
        out.distorted_b0[o] = 0.0;
        out.reference_b0[o] = 0.0;
        out.t1[o] = 0.0;
        continue;
      }
      const auto i = static_cast<std::size_t>(idx);
      for (int c = 0; c < out.input.channels; ++c) {
        out.input.data[plane * static_cast<std::size_t>(c) + o] = from.input.data[plane * static_cast<std::size_t>(c) + i];
      }
      out.target_vdm[o] = from.target_vdm[i];
      out.mask[o] = from.mask[i];
      out.distorted_b0[o] = from.distorted_b0[i];
      out.reference_b0[o] = from.reference_b0[i];
      out.t1[o] = from.t1[i];
    }
  }
  return out;
}

}  // namespace

Volume3D SliceStack::plane(std::vector<double> values) const {
  return Volume3D(plane_extents(), voxel_size, 1, std::move(values));
}

std::vector<double> canonical_plane(const Volume3D& v, int z) {
  require_in_plane_pe(v.pe_axis());
  const Extents& e = v.extents();
  std::vector<double> out(e.plane());
  if (v.pe_axis() == 1) {
    const auto first = v.values().begin() + static_cast<std::ptrdiff_t>(e.plane() * static_cast<std::size_t>(z));
    std::copy(first, first + static_cast<std::ptrdiff_t>(e.plane()), out.begin());
  } else {
    // Canonical width is ny, height nx.
    for (int x = 0; x < e.nx; ++x) {
      for (int y = 0; y < e.ny; ++y) out[static_cast<std::size_t>(x) * static_cast<std::size_t>(e.ny) + static_cast<std::size_t>(y)] = v(x, y, z);
    }
  }
  return out;
}

std::vector<std::uint8_t> canonical_plane(const Mask3D& m, int z, int pe_axis) {
  require_in_plane_pe(pe_axis);
  const Extents& e = m.extents();
  std::vector<std::uint8_t> out(e.plane());
  for (int y = 0; y < e.ny; ++y) {
    for (int x = 0; x < e.nx; ++x) {
      const std::size_t o = pe_axis == 1 ? static_cast<std::size_t>(y) * static_cast<std::size_t>(e.nx) + static_cast<std::size_t>(x)
                                         : static_cast<std::size_t>(x) * static_cast<std::size_t>(e.ny) + static_cast<std::size_t>(y);
      out[o] = m(x, y, z);
    }
  }
  return out;
}

void set_canonical_plane(Volume3D& v, int z, std::span<const double> plane) {
  require_in_plane_pe(v.pe_axis());
  const Extents& e = v.extents();
  if (plane.size() != e.plane()) raise(ErrorKind::ShapeMismatch, "plane size does not match the volume");
  for (int y = 0; y < e.ny; ++y) {
    for (int x = 0; x < e.nx; ++x) {
      const std::size_t i = v.pe_axis() == 1 ? static_cast<std::size_t>(y) * static_cast<std::size_t>(e.nx) + static_cast<std::size_t>(x)
                                             : static_cast<std::size_t>(x) * static_cast<std::size_t>(e.ny) + static_cast<std::size_t>(y);
      v(x, y, z) = plane[i];
    }
  }
}

nn::Tensor stack_input(const Volume3D& b0, const Volume3D& t1, int z) {
  const Extents& e = b0.extents();
  if (!b0.same_grid(t1)) raise(ErrorKind::GridMismatch, "b0 and T1w grids differ");
  if (z < 0 || z >= e.nz) raise(ErrorKind::InvalidArgument, "slice index out of range");
  const bool transposed = b0.pe_axis() == 0;
  const int w = transposed ? e.ny : e.nx;
  const int h = transposed ? e.nx : e.ny;
  nn::Tensor x(kStackChannels, h, w);
  const int zs[3] = {std::max(z - 1, 0), z, std::min(z + 1, e.nz - 1)};
  Volume3D t1_oriented = t1;
  t1_oriented.set_pe_axis(b0.pe_axis());
  for (int k = 0; k < 3; ++k) {
    const auto pb = canonical_plane(b0, zs[k]);
    const auto pt = canonical_plane(t1_oriented, zs[k]);
    std::copy(pb.begin(), pb.end(), x.channel(k).begin());
    std::copy(pt.begin(), pt.end(), x.channel(3 + k).begin());
  }
  return x;
}

void refresh_reference(SliceStack& s) {
  const Volume3D distorted = s.plane(s.distorted_b0);
  const DisplacementMap vdm(s.plane(s.target_vdm));
  s.reference_b0 = std::move(apply_vdm(distorted, vdm, true)).release();
}

std::vector<SliceStack> build_stacks(const Volume3D& b0, const Volume3D& t1, const DisplacementMap& vdm, const Mask3D& mask,
                                     const std::string& subject_id) {
  if (!b0.same_grid(t1) || !b0.same_grid(vdm.mm()) || b0.extents() != mask.extents()) {
    raise(ErrorKind::GridMismatch, "b0, T1w, VDM and mask must share a grid");
  }
  const int pe = vdm.pe_axis();
  require_in_plane_pe(pe);
  Volume3D b0_pe = b0;
  b0_pe.set_pe_axis(pe);
  Volume3D t1_pe = t1;
  t1_pe.set_pe_axis(pe);
  const Volume3D nb = normalize_intensity(b0_pe, mask).volume;
  const Volume3D nt = normalize_intensity(t1_pe, mask).volume;

  const Extents& e = b0.extents();
  const auto& vs = b0.voxel_size();
  std::vector<SliceStack> out;
  for (int z = 0; z < e.nz; ++z) {
    auto m = canonical_plane(mask, z, pe);
    if (std::none_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; })) continue;
    SliceStack s;
    s.input = stack_input(nb, nt, z);
    s.width = s.input.width;
    s.height = s.input.height;
    s.voxel_size = pe == 1 ? vs : std::array<double, 3>{vs[1], vs[0], vs[2]};
    s.mask = std::move(m);
    s.target_vdm = canonical_plane(vdm.mm(), z);
    s.distorted_b0.assign(s.input.channel(1).begin(), s.input.channel(1).end());
    s.t1.assign(s.input.channel(4).begin(), s.input.channel(4).end());
    refresh_reference(s);
    s.subject_id = subject_id;
    s.slice_index = z;
    out.push_back(std::move(s));
  }
  return out;
}

void AugmentConfig::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(apply_probability) || !prob(flip_probability) || !prob(mixcut_probability)) {
    raise(ErrorKind::InvalidArgument, "augmentation probabilities must lie in [0, 1]");
  }
  if (translation_max < 0) raise(ErrorKind::InvalidArgument, "translation_max must be non-negative");
  if (!(crop_min > 0.0 && crop_min <= crop_max && crop_max <= 1.0)) {
    raise(ErrorKind::InvalidArgument, "crop range must satisfy 0 < min <= max <= 1");
  }
  if (!(noise_sigma >= 0.0)) raise(ErrorKind::InvalidArgument, "noise sigma must be non-negative");
}

SliceStack translate(const SliceStack& s, int dx, int dy) {
  SliceStack out = remap(s, nullptr, [&](int x, int y) {
    const int sx = x - dx;
    const int sy = y - dy;
    if (sx < 0 || sy < 0 || sx >= s.width || sy >= s.height) return std::pair<long, bool>{-1, false};
    return std::pair<long, bool>{static_cast<long>(sy) * s.width + sx, false};
  });
  refresh_reference(out);
  return out;
}

SliceStack crop_square(const SliceStack& s, int x0, int y0, int size) {
  SliceStack out = remap(s, nullptr, [&](int x, int y) {
    if (x < x0 || y < y0 || x >= x0 + size || y >= y0 + size) return std::pair<long, bool>{-1, false};
    return std::pair<long, bool>{static_cast<long>(y) * s.width + x, false};
  });
  refresh_reference(out);
  return out;
}

SliceStack add_noise(const SliceStack& s, double sigma, std::mt19937_64& rng) {
  SliceStack out = s;
  if (sigma <= 0.0) return out;
  std::normal_distribution<double> noise(0.0, sigma);
  for (double& v : out.input.data) v += noise(rng);
  return out;
}

SliceStack flip_horizontal(const SliceStack& s) {
  return remap(s, nullptr, [&](int x, int y) {
    return std::pair<long, bool>{static_cast<long>(y) * s.width + (s.width - 1 - x), false};
  });
}

SliceStack mixcut(const SliceStack& s, const SliceStack& partner) {
  if (partner.width != s.width || partner.height != s.height || !partner.input.same_shape(s.input)) {
    raise(ErrorKind::ShapeMismatch, "mixcut partner has a different shape");
  }
  const int mid = s.width / 2;
  SliceStack out = remap(s, &partner, [&](int x, int y) {
    return std::pair<long, bool>{static_cast<long>(y) * s.width + x, x >= mid};
  });
  refresh_reference(out);
  return out;
}

SliceStack augment(const SliceStack& s, const AugmentConfig& cfg, std::mt19937_64& rng, const SliceStack* partner) {
  if (!cfg.enabled) return s;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SliceStack out = s;
  if (unit(rng) < cfg.apply_probability) {
    switch (std::uniform_int_distribution<int>(0, 2)(rng)) {
      case 0: {
        std::uniform_int_distribution<int> shift(-cfg.translation_max, cfg.translation_max);
        const int dx = shift(rng);
        const int dy = shift(rng);
        out = translate(out, dx, dy);
        break;
      }
      case 1: {
        const int side = std::min(s.width, s.height);
        const double frac = std::uniform_real_distribution<double>(cfg.crop_min, cfg.crop_max)(rng);
        const int size = std::clamp(static_cast<int>(std::lround(frac * side)), 1, side);
        const int x0 = std::uniform_int_distribution<int>(0, s.width - size)(rng);
        const int y0 = std::uniform_int_distribution<int>(0, s.height - size)(rng);
        out = crop_square(out, x0, y0, size);
        break;
      }
      default:
        out = add_noise(out, cfg.noise_sigma, rng);
        break;
    }
  }
  if (cfg.flip_enabled && unit(rng) < cfg.flip_probability) out = flip_horizontal(out);
  if (cfg.mixcut_enabled && partner != nullptr && unit(rng) < cfg.mixcut_probability) out = mixcut(out, *partner);
  return out;
}

void SplitSpec::validate() const {
  if (train < 0.0 || val < 0.0 || test < 0.0 || std::abs(train + val + test - 1.0) > 1e-9) {
    raise(ErrorKind::InvalidArgument, "split fractions must be non-negative and sum to 1");
  }
}

SubjectSplit split_subjects(const std::vector<std::string>& ids, const SplitSpec& spec) {
  spec.validate();
  const std::size_t n = ids.size();
  if (n < 3) raise(ErrorKind::TooFewSubjects, "need at least 3 subjects to split, got " + std::to_string(n));
  std::vector<std::string> order = ids;
  std::mt19937_64 rng(spec.seed);
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle.
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(order[i], order[j]);
  }
  const auto part = [n](double f) { return static_cast<std::size_t>(std::floor(static_cast<double>(n) * f + 1e-9)); };
  std::size_t n_train = std::max<std::size_t>(1, part(spec.train));
  std::size_t n_val = std::max<std::size_t>(1, part(spec.val));
  while (n_train + n_val > n - 1) {
    if (n_train > n_val) --n_train; else --n_val;
  }
  SubjectSplit s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  return s;
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorKind::Io, "cannot open manifest " + path.string());
  const std::filesystem::path base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path q(p);
    return q.is_absolute() ? q : (base / q).lexically_normal();
  };
  std::vector<ManifestRow> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 5) {
      raise(ErrorKind::InvalidArgument, path.string() + ":" + std::to_string(line_no) + ": expected 5 tab-separated fields");
    }
    rows.push_back({fields[0], resolve(fields[1]), resolve(fields[2]), resolve(fields[3]), resolve(fields[4])});
  }
  return rows;
}

void write_manifest(const std::vector<ManifestRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) raise(ErrorKind::Io, "cannot write manifest " + path.string());
  const std::filesystem::path base = path.parent_path();
  auto rel = [&](const std::filesystem::path& p) {
    if (p.is_relative()) return p.generic_string();
    const auto r = p.lexically_relative(base.empty() ? std::filesystem::current_path() : base);
    // Paths outside the manifest's directory stay absolute.
    if (r.empty() || *r.begin() == "..") return p.generic_string();
    return r.generic_string();
  };
  out << "# id\tb0\tt1\tvdm\tmask\n";
  for (const auto& r : rows) {
    out << r.id << '\t' << rel(r.b0) << '\t' << rel(r.t1) << '\t' << rel(r.vdm) << '\t' << rel(r.mask) << '\n';
  }
  if (!out) raise(ErrorKind::Io, "write failed for " + path.string());
}

SubjectVolumes load_subject(const ManifestRow& row, int pe_axis) {
  SubjectVolumes s;
  s.id = row.id;
  s.b0 = load_volume(row.b0, pe_axis);
  s.t1 = load_volume(row.t1, pe_axis);
  s.vdm = DisplacementMap(load_volume(row.vdm, pe_axis));
  s.mask = load_mask(row.mask);
  if (!s.b0.same_grid(s.t1) || !s.b0.same_grid(s.vdm.mm()) || s.b0.extents() != s.mask.extents()) {
    raise(ErrorKind::GridMismatch, "subject " + row.id + ": volumes do not share a grid");
  }
  return s;
}

}  // namespace epi
