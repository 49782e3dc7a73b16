#include "epi_unwarp/unwarp.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "epi_unwarp/errors.hpp"

namespace epi {

namespace {

void require_same_grid(const Volume3D& a, const DisplacementMap& d) {
  if (a.extents() != d.extents()) raise(ErrorKind::GridMismatch, "image and displacement grids differ");
  if (a.pe_axis() != d.pe_axis()) raise(ErrorKind::GridMismatch, "image and displacement PE axes differ");
}

// Gathers a strided line into a contiguous buffer.
void gather(std::span<const double> src, std::size_t first, std::size_t stride, int len, std::vector<double>& out) {
  out.resize(static_cast<std::size_t>(len));
  for (int i = 0; i < len; ++i) out[static_cast<std::size_t>(i)] = src[first + stride * static_cast<std::size_t>(i)];
}

// 1 + du/di with central differences inside and one-sided ends. len >= 2.
void line_jacobian(std::span<const double> u, std::vector<double>& jac) {
  const std::size_t n = u.size();
  jac.resize(n);
  jac[0] = 1.0 + (u[1] - u[0]);
  jac[n - 1] = 1.0 + (u[n - 1] - u[n - 2]);
  for (std::size_t i = 1; i + 1 < n; ++i) jac[i] = 1.0 + 0.5 * (u[i + 1] - u[i - 1]);
}

// Adjoint of line_jacobian's difference stencil, accumulated into gu.
void line_jacobian_adjoint(std::span<const double> gj, std::span<double> gu) {
  const std::size_t n = gj.size();
  gu[0] -= gj[0];
  gu[1] += gj[0];
  gu[n - 1] += gj[n - 1];
  gu[n - 2] -= gj[n - 1];
  for (std::size_t i = 1; i + 1 < n; ++i) {
    gu[i + 1] += 0.5 * gj[i];
    gu[i - 1] -= 0.5 * gj[i];
  }
}

}  // namespace

void AcquisitionParams::validate() const {
  if (!(readout_time > 0.0) || !std::isfinite(readout_time)) raise(ErrorKind::InvalidArgument, "readout time must be > 0");
  if (!(pe_voxel_size > 0.0) || !std::isfinite(pe_voxel_size)) raise(ErrorKind::InvalidArgument, "PE voxel size must be > 0");
  if (pe_sign != 1 && pe_sign != -1) raise(ErrorKind::InvalidArgument, "PE sign must be +1 or -1");
}

DisplacementMap fieldmap_to_vdm(const FieldMap& fm, const AcquisitionParams& acq) {
  acq.validate();
  const Volume3D& hz = fm.hz();
  const double grid_size = hz.pe_voxel_size();
  if (std::abs(grid_size - acq.pe_voxel_size) > 1e-3 * grid_size) {
    std::ostringstream msg;
    msg << "PE voxel size " << acq.pe_voxel_size << " mm disagrees with the field map grid (" << grid_size << " mm)";
    raise(ErrorKind::GridMismatch, msg.str());
  }
  const double scale = static_cast<double>(acq.pe_sign) * acq.readout_time * acq.pe_voxel_size;
  std::vector<double> out(hz.values().begin(), hz.values().end());
  for (double& v : out) v *= scale;
  return DisplacementMap(Volume3D::like(hz, std::move(out)));
}

Volume3D jacobian_along_pe(const DisplacementMap& vdm) {
  const Volume3D& d = vdm.mm();
  const int axis = d.pe_axis();
  const Extents ext = d.extents();
  if (ext[axis] < 2) raise(ErrorKind::GridTooSmall, "PE extent must be at least 2");
  const double inv_s = 1.0 / d.pe_voxel_size();
  std::vector<double> out(ext.count());
  std::vector<double> u, jac;
  for_each_line(ext, axis, [&](std::size_t first, std::size_t stride, int len) {
    gather(d.values(), first, stride, len, u);
    for (double& v : u) v *= inv_s;
    line_jacobian(u, jac);
    for (int i = 0; i < len; ++i) out[first + stride * static_cast<std::size_t>(i)] = jac[static_cast<std::size_t>(i)];
  });
  return Volume3D::like(d, std::move(out));
}

Volume3D apply_vdm(const Volume3D& img, const DisplacementMap& vdm, bool modulate) {
  require_same_grid(img, vdm);
  const int axis = img.pe_axis();
  const Extents ext = img.extents();
  if (modulate && ext[axis] < 2) raise(ErrorKind::GridTooSmall, "PE extent must be at least 2");
  const double inv_s = 1.0 / vdm.pe_voxel_size();
  std::vector<double> out(ext.count());
  std::vector<double> col, u, jac;
  for_each_line(ext, axis, [&](std::size_t first, std::size_t stride, int len) {
    gather(img.values(), first, stride, len, col);
    gather(vdm.mm().values(), first, stride, len, u);
    for (double& v : u) v *= inv_s;
    if (modulate) line_jacobian(u, jac);
    for (int i = 0; i < len; ++i) {
      const auto k = static_cast<std::size_t>(i);
      double v = sample_line_linear(col, static_cast<double>(i) + u[k]);
      if (modulate) v *= jac[k];
      out[first + stride * k] = v;
    }
  });
  return Volume3D::like(img, std::move(out));
}

std::vector<double> apply_vdm_vjp(const Volume3D& img, const DisplacementMap& vdm, bool modulate,
                                  std::span<const double> grad_out) {
  require_same_grid(img, vdm);
  const int axis = img.pe_axis();
  const Extents ext = img.extents();
  if (grad_out.size() != ext.count()) raise(ErrorKind::ShapeMismatch, "gradient size does not match the grid");
  if (modulate && ext[axis] < 2) raise(ErrorKind::GridTooSmall, "PE extent must be at least 2");
  const double inv_s = 1.0 / vdm.pe_voxel_size();
  std::vector<double> grad(ext.count(), 0.0);
  std::vector<double> col, u, jac, g, gj, gu;
  for_each_line(ext, axis, [&](std::size_t first, std::size_t stride, int len) {
    gather(img.values(), first, stride, len, col);
    gather(vdm.mm().values(), first, stride, len, u);
    gather(grad_out, first, stride, len, g);
    for (double& v : u) v *= inv_s;
    gu.assign(static_cast<std::size_t>(len), 0.0);
    if (modulate) {
      line_jacobian(u, jac);
      gj.resize(static_cast<std::size_t>(len));
    }
    for (int i = 0; i < len; ++i) {
      const auto k = static_cast<std::size_t>(i);
      const double pos = static_cast<double>(i) + u[k];
      const double slope = sample_line_slope(col, pos);
      if (modulate) {
        gu[k] += g[k] * jac[k] * slope;
        gj[k] = g[k] * sample_line_linear(col, pos);
      } else {
        gu[k] += g[k] * slope;
      }
    }
    if (modulate) line_jacobian_adjoint(gj, gu);
    for (int i = 0; i < len; ++i) {
      grad[first + stride * static_cast<std::size_t>(i)] = gu[static_cast<std::size_t>(i)] * inv_s;
    }
  });
  return grad;
}

Volume3D forward_distort(const Volume3D& img, const DisplacementMap& vdm_true) {
  require_same_grid(img, vdm_true);
  const int axis = img.pe_axis();
  const Extents ext = img.extents();
  if (ext[axis] < 2) raise(ErrorKind::GridTooSmall, "PE extent must be at least 2");
  const double inv_s = 1.0 / vdm_true.pe_voxel_size();
  std::vector<double> out(ext.count());
  std::vector<double> col, u, jac;
  for_each_line(ext, axis, [&](std::size_t first, std::size_t stride, int len) {
    gather(img.values(), first, stride, len, col);
    gather(vdm_true.mm().values(), first, stride, len, u);
    for (double& v : u) v *= inv_s;
    line_jacobian(u, jac);
    double max_abs = 0.0;
    for (int i = 0; i < len; ++i) {
      const auto k = static_cast<std::size_t>(i);
      max_abs = std::max(max_abs, std::abs(u[k]));
      const bool folds = i + 1 < len && u[k + 1] - u[k] <= -1.0;
      if (jac[k] <= 0.0 || folds) {
        std::ostringstream msg;
        msg << "displacement folds along PE (Jacobian " << jac[k] << " at line offset " << i << ")";
        raise(ErrorKind::NonInvertibleField, msg.str());
      }
    }
    if (max_abs == 0.0) {
      for (int i = 0; i < len; ++i) out[first + stride * static_cast<std::size_t>(i)] = col[static_cast<std::size_t>(i)];
      return;
    }
    // y -> y + u(y) is strictly increasing; find its preimage of each node.
    for (int i = 0; i < len; ++i) {
      const double target = static_cast<double>(i);
      double lo = target - max_abs - 1.0;
      double hi = target + max_abs + 1.0;
      for (int it = 0; it < kInversionMaxIterations && hi - lo > kInversionTolerance; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid + sample_line_linear(u, mid) < target) {
          lo = mid;
        } else {
          hi = mid;
        }
      }
      const double y = 0.5 * (lo + hi);
      out[first + stride * static_cast<std::size_t>(i)] = sample_line_linear(col, y) / sample_line_linear(jac, y);
    }
  });
  return Volume3D::like(img, std::move(out));
}

Volume3D correct_b0(const Volume3D& distorted, const DisplacementMap& vdm) {
  require_same_grid(distorted, vdm);
  if (distorted.pe_axis() == 2) raise(ErrorKind::InvalidArgument, "slice-wise correction needs an in-plane PE axis");
  Volume3D out = distorted;
  for (int z = 0; z < distorted.extents().nz; ++z) {
    out.set_slice(z, apply_vdm(distorted.slice(z), vdm.slice(z), true));
  }
  return out;
}

}  // namespace epi
