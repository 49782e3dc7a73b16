#include "epi_unwarp/measures.hpp"

#include <algorithm>
#include <cmath>

#include "epi_unwarp/errors.hpp"

namespace epi {

namespace {

void require_shapes(GridView a, GridView b, MaskView m) {
  if (a.ext != b.ext || a.ext != m.ext) raise(ErrorKind::ShapeMismatch, "grid and mask extents differ");
  if (a.values.size() != a.ext.count() || b.values.size() != b.ext.count() || m.values.size() != m.ext.count()) {
    raise(ErrorKind::ShapeMismatch, "view size does not match its extents");
  }
}

std::size_t mask_count(MaskView m) {
  std::size_t n = 0;
  for (auto v : m.values) n += v ? 1 : 0;
  if (n == 0) raise(ErrorKind::EmptyMask, "mask has no voxels");
  return n;
}

// Central differences inside, one-sided at both ends, along a strided line.
void diff_line(const double* src, double* dst, std::size_t stride, int len) {
  if (len < 2) {
    dst[0] = 0.0;
    return;
  }
  const auto at = [&](int i) { return src[stride * static_cast<std::size_t>(i)]; };
  dst[0] = at(1) - at(0);
  dst[stride * static_cast<std::size_t>(len - 1)] = at(len - 1) - at(len - 2);
  for (int i = 1; i + 1 < len; ++i) dst[stride * static_cast<std::size_t>(i)] = 0.5 * (at(i + 1) - at(i - 1));
}

// Adjoint of diff_line, accumulated into dst.
void diff_line_adjoint(const double* g, double* dst, std::size_t stride, int len) {
  if (len < 2) return;
  const auto at = [&](int i) { return g[stride * static_cast<std::size_t>(i)]; };
  const auto acc = [&](int i, double v) { dst[stride * static_cast<std::size_t>(i)] += v; };
  acc(0, -at(0));
  acc(1, at(0));
  acc(len - 1, at(len - 1));
  acc(len - 2, -at(len - 1));
  for (int i = 1; i + 1 < len; ++i) {
    acc(i + 1, 0.5 * at(i));
    acc(i - 1, -0.5 * at(i));
  }
}

// Apply the in-plane stencil along x (axis 0) or y (axis 1) of every slice.
std::vector<double> in_plane_diff(std::span<const double> e, const Extents& ext, int axis) {
  std::vector<double> out(e.size());
  for_each_line(ext, axis, [&](std::size_t first, std::size_t stride, int len) {
    diff_line(e.data() + first, out.data() + first, stride, len);
  });
  return out;
}

void in_plane_diff_adjoint(std::span<const double> g, const Extents& ext, int axis, std::vector<double>& acc) {
  for_each_line(ext, axis, [&](std::size_t first, std::size_t stride, int len) {
    diff_line_adjoint(g.data() + first, acc.data() + first, stride, len);
  });
}

// Gaussian window filter normalised over the in-image support, so that
// each output is a weighted mean of available pixels.
class WindowFilter {
 public:
  explicit WindowFilter(const SsimConfig& cfg) : radius_(cfg.window / 2), taps_(static_cast<std::size_t>(2 * radius_ + 1)) {
    if (cfg.window < 1 || cfg.window % 2 == 0) raise(ErrorKind::InvalidArgument, "SSIM window must be odd");
    if (!(cfg.sigma > 0.0)) raise(ErrorKind::InvalidArgument, "SSIM sigma must be positive");
    for (int k = -radius_; k <= radius_; ++k) {
      taps_[static_cast<std::size_t>(k + radius_)] = std::exp(-0.5 * k * k / (cfg.sigma * cfg.sigma));
    }
  }

  // Separable filtering of every slice (x then y).
  std::vector<double> apply(std::span<const double> src, const Extents& ext) const {
    std::vector<double> tmp(src.size()), out(src.size());
    pass(src.data(), tmp.data(), ext, 0, false);
    pass(tmp.data(), out.data(), ext, 1, false);
    return out;
  }

  // Transpose of apply.
  std::vector<double> adjoint(std::span<const double> g, const Extents& ext) const {
    std::vector<double> tmp(g.size(), 0.0), out(g.size(), 0.0);
    pass(g.data(), tmp.data(), ext, 1, true);
    pass(tmp.data(), out.data(), ext, 0, true);
    return out;
  }

 private:
  void pass(const double* src, double* dst, const Extents& ext, int axis, bool transpose) const {
    for_each_line(ext, axis, [&](std::size_t first, std::size_t stride, int len) {
      for (int i = 0; i < len; ++i) {
        const int lo = std::max(-radius_, -i);
        const int hi = std::min(radius_, len - 1 - i);
        double z = 0.0;
        for (int k = lo; k <= hi; ++k) z += taps_[static_cast<std::size_t>(k + radius_)];
        const std::size_t pi = first + stride * static_cast<std::size_t>(i);
        if (!transpose) {
          double s = 0.0;
          for (int k = lo; k <= hi; ++k) s += taps_[static_cast<std::size_t>(k + radius_)] * src[first + stride * static_cast<std::size_t>(i + k)];
          dst[pi] = s / z;
        } else {
          const double gi = src[pi] / z;
          for (int k = lo; k <= hi; ++k) dst[first + stride * static_cast<std::size_t>(i + k)] += taps_[static_cast<std::size_t>(k + radius_)] * gi;
        }
      }
    });
  }

  int radius_;
  std::vector<double> taps_;
};

struct SsimMaps {
  std::vector<double> mu_a, mu_b, e_aa, e_bb, e_ab;
};

SsimMaps ssim_moments(GridView a, GridView b, const WindowFilter& f) {
  const std::size_t n = a.values.size();
  std::vector<double> aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a.values[i] * a.values[i];
    bb[i] = b.values[i] * b.values[i];
    ab[i] = a.values[i] * b.values[i];
  }
  return {f.apply(a.values, a.ext), f.apply(b.values, b.ext), f.apply(aa, a.ext), f.apply(bb, a.ext), f.apply(ab, a.ext)};
}

ValueAndGrad ssim_impl(GridView a, GridView b, MaskView m, const SsimConfig& cfg, bool want_grad) {
  require_shapes(a, b, m);
  const double count = static_cast<double>(mask_count(m));
  const WindowFilter filter(cfg);
  const SsimMaps s = ssim_moments(a, b, filter);
  const double c1 = std::pow(cfg.k1 * cfg.dynamic_range, 2);
  const double c2 = std::pow(cfg.k2 * cfg.dynamic_range, 2);
  const std::size_t n = a.values.size();

  ValueAndGrad out;
  std::vector<double> g_mu, g_bb, g_ab;
  if (want_grad) {
    g_mu.assign(n, 0.0);
    g_bb.assign(n, 0.0);
    g_ab.assign(n, 0.0);
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!m.values[i]) continue;
    const double ma = s.mu_a[i], mb = s.mu_b[i];
    const double var_a = s.e_aa[i] - ma * ma;
    const double var_b = s.e_bb[i] - mb * mb;
    const double cov = s.e_ab[i] - ma * mb;
    const double a1 = 2.0 * ma * mb + c1;
    const double a2 = 2.0 * cov + c2;
    const double b1 = ma * ma + mb * mb + c1;
    const double b2 = var_a + var_b + c2;
    const double value = a1 * a2 / (b1 * b2);
    sum += value;
    if (want_grad) {
      const double w = 1.0 / count;
      // dA1/dmb = 2ma, dA2/dmb = -2ma, dB1/dmb = 2mb, dB2/dmb = -2mb.
      const double d_mu = (2.0 * ma * a2 - 2.0 * ma * a1) / (b1 * b2) - value * (2.0 * mb / b1 - 2.0 * mb / b2);
      g_mu[i] = w * d_mu;
      g_bb[i] = w * (-value / b2);
      g_ab[i] = w * (2.0 * a1 / (b1 * b2));
    }
  }
  out.value = sum / count;
  if (want_grad) {
    const auto t_mu = filter.adjoint(g_mu, a.ext);
    const auto t_bb = filter.adjoint(g_bb, a.ext);
    const auto t_ab = filter.adjoint(g_ab, a.ext);
    out.grad.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      out.grad[i] = t_mu[i] + 2.0 * b.values[i] * t_bb[i] + a.values[i] * t_ab[i];
    }
  }
  return out;
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t arg_lo = 0;
  std::size_t arg_hi = 0;
};

Range masked_range(GridView g, MaskView m) {
  Range r;
  bool first = true;
  for (std::size_t i = 0; i < g.values.size(); ++i) {
    if (!m.values[i]) continue;
    const double v = g.values[i];
    if (first || v < r.lo) {
      r.lo = v;
      r.arg_lo = i;
    }
    if (first || v > r.hi) {
      r.hi = v;
      r.arg_hi = i;
    }
    first = false;
  }
  if (!(r.hi > r.lo)) raise(ErrorKind::DegenerateIntensity, "in-mask intensity span is zero");
  return r;
}

std::vector<double> gaussian_taps(const MiConfig& cfg) {
  if (cfg.sigma <= 0.0) return {1.0};
  const int radius = static_cast<int>(std::ceil(cfg.truncate * cfg.sigma));
  std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    const double v = std::exp(-0.5 * k * k / (cfg.sigma * cfg.sigma));
    taps[static_cast<std::size_t>(k + radius)] = v;
    sum += v;
  }
  for (double& t : taps) t /= sum;
  return taps;
}

// Zero-padded separable smoothing of a bins x bins table. The kernel is
// symmetric, so this operator is its own transpose.
std::vector<double> smooth_joint(const std::vector<double>& h, int bins, const std::vector<double>& taps) {
  if (taps.size() == 1) return h;
  const int r = static_cast<int>(taps.size() / 2);
  std::vector<double> tmp(h.size(), 0.0), out(h.size(), 0.0);
  const auto at = [bins](int i, int j) { return static_cast<std::size_t>(i * bins + j); };
  for (int i = 0; i < bins; ++i) {
    for (int j = 0; j < bins; ++j) {
      double s = 0.0;
      for (int k = -r; k <= r; ++k) {
        const int jj = j + k;
        if (jj >= 0 && jj < bins) s += taps[static_cast<std::size_t>(k + r)] * h[at(i, jj)];
      }
      tmp[at(i, j)] = s;
    }
  }
  for (int i = 0; i < bins; ++i) {
    for (int j = 0; j < bins; ++j) {
      double s = 0.0;
      for (int k = -r; k <= r; ++k) {
        const int ii = i + k;
        if (ii >= 0 && ii < bins) s += taps[static_cast<std::size_t>(k + r)] * tmp[at(ii, j)];
      }
      out[at(i, j)] = s;
    }
  }
  return out;
}

// MI of a joint table that sums to one; optionally dMI/dq (holding the
// table's total fixed is handled by the caller).
double mi_from_joint(const std::vector<double>& q, int bins, std::vector<double>* grad) {
  std::vector<double> pa(static_cast<std::size_t>(bins), 0.0), pb(static_cast<std::size_t>(bins), 0.0);
  for (int i = 0; i < bins; ++i) {
    for (int j = 0; j < bins; ++j) {
      const double v = q[static_cast<std::size_t>(i * bins + j)];
      pa[static_cast<std::size_t>(i)] += v;
      pb[static_cast<std::size_t>(j)] += v;
    }
  }
  double mi = 0.0;
  if (grad) grad->assign(q.size(), 0.0);
  for (int i = 0; i < bins; ++i) {
    for (int j = 0; j < bins; ++j) {
      const double v = q[static_cast<std::size_t>(i * bins + j)];
      if (v <= 0.0) continue;
      const double l = std::log(v / (pa[static_cast<std::size_t>(i)] * pb[static_cast<std::size_t>(j)]));
      mi += v * l;
      if (grad) (*grad)[static_cast<std::size_t>(i * bins + j)] = l - 1.0;
    }
  }
  return mi;
}

// Fraction of unit mass assigned to the lower of two neighbouring bin
// centres; t is the bin-centre coordinate.
struct SoftBin {
  int lower = 0;
  double frac = 0.0;  // weight of lower+1
  bool clamped = true;
};

SoftBin soft_bin(double t, int bins) {
  SoftBin s;
  if (t <= 0.0) {
    s.lower = 0;
    s.frac = 0.0;
    return s;
  }
  if (t >= static_cast<double>(bins - 1)) {
    s.lower = bins - 1;
    s.frac = 0.0;
    return s;
  }
  s.lower = static_cast<int>(std::floor(t));
  s.frac = t - s.lower;
  s.clamped = false;
  return s;
}

}  // namespace

void LossWeights::validate() const {
  for (double w : {vdm_l1, gradient, structural, mutual_info, weight_l1}) {
    if (!(w >= 0.0) || !std::isfinite(w)) raise(ErrorKind::InvalidArgument, "loss weights must be non-negative");
  }
}

void LossBreakdown::combine(const LossWeights& w) {
  total = w.vdm_l1 * vdm_l1 + w.gradient * grad_l2 + w.structural * dssim + w.mutual_info * neg_mi + w.weight_l1 * weight_l1;
}

double masked_l1(GridView a, GridView b, MaskView m) {
  require_shapes(a, b, m);
  const double count = static_cast<double>(mask_count(m));
  double sum = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    if (m.values[i]) sum += std::abs(a.values[i] - b.values[i]);
  }
  return sum / count;
}

std::vector<double> masked_l1_grad(GridView a, GridView b, MaskView m) {
  require_shapes(a, b, m);
  const double inv = 1.0 / static_cast<double>(mask_count(m));
  std::vector<double> g(a.values.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!m.values[i]) continue;
    const double d = a.values[i] - b.values[i];
    g[i] = d > 0.0 ? inv : (d < 0.0 ? -inv : 0.0);
  }
  return g;
}

double masked_grad_l2(GridView a, GridView b, MaskView m) {
  require_shapes(a, b, m);
  if (a.ext.nx < 2 || a.ext.ny < 2) raise(ErrorKind::ShapeMismatch, "slices must be at least 2x2");
  const double count = static_cast<double>(mask_count(m));
  std::vector<double> e(a.values.size());
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = a.values[i] - b.values[i];
  const auto dx = in_plane_diff(e, a.ext, 0);
  const auto dy = in_plane_diff(e, a.ext, 1);
  double sum = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (m.values[i]) sum += dx[i] * dx[i] + dy[i] * dy[i];
  }
  return std::sqrt(sum / count);
}

std::vector<double> masked_grad_l2_grad(GridView a, GridView b, MaskView m) {
  require_shapes(a, b, m);
  if (a.ext.nx < 2 || a.ext.ny < 2) raise(ErrorKind::ShapeMismatch, "slices must be at least 2x2");
  const double count = static_cast<double>(mask_count(m));
  std::vector<double> e(a.values.size());
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = a.values[i] - b.values[i];
  auto dx = in_plane_diff(e, a.ext, 0);
  auto dy = in_plane_diff(e, a.ext, 1);
  double sum = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (m.values[i]) {
      sum += dx[i] * dx[i] + dy[i] * dy[i];
    } else {
      dx[i] = 0.0;
      dy[i] = 0.0;
    }
  }
  std::vector<double> g(e.size(), 0.0);
  const double value = std::sqrt(sum / count);
  if (value == 0.0) return g;
  in_plane_diff_adjoint(dx, a.ext, 0, g);
  in_plane_diff_adjoint(dy, a.ext, 1, g);
  const double scale = 1.0 / (count * value);
  for (double& v : g) v *= scale;
  return g;
}

double ssim(GridView a, GridView b, MaskView m, const SsimConfig& cfg) { return ssim_impl(a, b, m, cfg, false).value; }

ValueAndGrad ssim_with_grad(GridView a, GridView b, MaskView m, const SsimConfig& cfg) {
  return ssim_impl(a, b, m, cfg, true);
}

double mutual_information(GridView a, GridView b, MaskView m, const MiConfig& cfg) {
  require_shapes(a, b, m);
  if (cfg.bins < 2) raise(ErrorKind::InvalidArgument, "MI needs at least two bins");
  const double count = static_cast<double>(mask_count(m));
  const Range ra = masked_range(a, m);
  const Range rb = masked_range(b, m);
  const int bins = cfg.bins;
  const auto bin_of = [bins](double v, const Range& r) {
    const int k = static_cast<int>(std::floor((v - r.lo) / (r.hi - r.lo) * bins));
    return std::clamp(k, 0, bins - 1);
  };
  std::vector<double> joint(static_cast<std::size_t>(bins * bins), 0.0);
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    if (!m.values[i]) continue;
    joint[static_cast<std::size_t>(bin_of(a.values[i], ra) * bins + bin_of(b.values[i], rb))] += 1.0 / count;
  }
  auto smoothed = smooth_joint(joint, bins, gaussian_taps(cfg));
  double total = 0.0;
  for (double v : smoothed) total += v;
  for (double& v : smoothed) v /= total;
  return mi_from_joint(smoothed, bins, nullptr);
}

ValueAndGrad soft_mutual_information(GridView a, GridView b, MaskView m, const MiConfig& cfg) {
  require_shapes(a, b, m);
  if (cfg.bins < 2) raise(ErrorKind::InvalidArgument, "MI needs at least two bins");
  const double count = static_cast<double>(mask_count(m));
  const Range ra = masked_range(a, m);
  const Range rb = masked_range(b, m);
  const int bins = cfg.bins;
  const double sa = bins / (ra.hi - ra.lo);
  const double sb = bins / (rb.hi - rb.lo);
  const std::size_t n = a.values.size();

  std::vector<SoftBin> bin_a(n), bin_b(n);
  std::vector<double> joint(static_cast<std::size_t>(bins * bins), 0.0);
  const auto cell = [bins](int i, int j) { return static_cast<std::size_t>(i * bins + j); };
  for (std::size_t p = 0; p < n; ++p) {
    if (!m.values[p]) continue;
    bin_a[p] = soft_bin((a.values[p] - ra.lo) * sa - 0.5, bins);
    bin_b[p] = soft_bin((b.values[p] - rb.lo) * sb - 0.5, bins);
    const SoftBin& u = bin_a[p];
    const SoftBin& v = bin_b[p];
    const double wa0 = 1.0 - u.frac, wa1 = u.frac;
    const double wb0 = 1.0 - v.frac, wb1 = v.frac;
    joint[cell(u.lower, v.lower)] += wa0 * wb0 / count;
    if (wb1 > 0.0) joint[cell(u.lower, v.lower + 1)] += wa0 * wb1 / count;
    if (wa1 > 0.0) joint[cell(u.lower + 1, v.lower)] += wa1 * wb0 / count;
    if (wa1 > 0.0 && wb1 > 0.0) joint[cell(u.lower + 1, v.lower + 1)] += wa1 * wb1 / count;
  }
  const auto taps = gaussian_taps(cfg);
  const auto smoothed = smooth_joint(joint, bins, taps);
  double total = 0.0;
  for (double v : smoothed) total += v;
  std::vector<double> q(smoothed.size());
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = smoothed[i] / total;

  ValueAndGrad out;
  std::vector<double> g_q;
  out.value = mi_from_joint(q, bins, &g_q);

  // Back through the renormalisation, the smoothing and the splatting.
  double dot = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) dot += q[i] * g_q[i];
  std::vector<double> g_s(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) g_s[i] = (g_q[i] - dot) / total;
  const auto g_h = smooth_joint(g_s, bins, taps);

  out.grad.assign(n, 0.0);
  double g_lo = 0.0, g_hi = 0.0;
  const double span = rb.hi - rb.lo;
  for (std::size_t p = 0; p < n; ++p) {
    if (!m.values[p] || bin_b[p].clamped) continue;
    const SoftBin& u = bin_a[p];
    const SoftBin& v = bin_b[p];
    const double wa0 = 1.0 - u.frac, wa1 = u.frac;
    // d joint / d t_b: -1 on the lower column, +1 on the upper one.
    double dt = wa0 * (g_h[cell(u.lower, v.lower + 1)] - g_h[cell(u.lower, v.lower)]);
    if (wa1 > 0.0) dt += wa1 * (g_h[cell(u.lower + 1, v.lower + 1)] - g_h[cell(u.lower + 1, v.lower)]);
    dt /= count;
    out.grad[p] += dt * sb;
    const double val = b.values[p];
    g_lo += dt * bins * (val - rb.hi) / (span * span);
    g_hi += dt * (-bins * (val - rb.lo) / (span * span));
  }
  out.grad[rb.arg_lo] += g_lo;
  out.grad[rb.arg_hi] += g_hi;
  return out;
}

double rmse(GridView a, GridView b, MaskView m) {
  require_shapes(a, b, m);
  const double count = static_cast<double>(mask_count(m));
  double sum = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    if (!m.values[i]) continue;
    const double d = a.values[i] - b.values[i];
    sum += d * d;
  }
  return std::sqrt(sum / count);
}

LossBreakdown total_loss(const LossInputs& in, const LossWeights& weights, double params_l1,
                         const SsimConfig& ssim_cfg, const MiConfig& mi_cfg) {
  weights.validate();
  LossBreakdown out;
  if (weights.vdm_l1 > 0.0) out.vdm_l1 = masked_l1(in.pred_vdm, in.ref_vdm, in.mask);
  if (weights.gradient > 0.0) out.grad_l2 = masked_grad_l2(in.pred_vdm, in.ref_vdm, in.mask);
  if (weights.structural > 0.0) out.dssim = 1.0 - ssim(in.b0_ref, in.b0_corrected, in.mask, ssim_cfg);
  if (weights.mutual_info > 0.0) out.neg_mi = -mutual_information(in.t1w, in.b0_corrected, in.mask, mi_cfg);
  out.weight_l1 = params_l1;
  out.combine(weights);
  return out;
}

}  // namespace epi
