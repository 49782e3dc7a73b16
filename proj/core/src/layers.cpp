#include "epi_unwarp/layers.hpp"

#include <algorithm>

#include <Eigen/Core>

#include "epi_unwarp/errors.hpp"

namespace epi::nn {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

// dst (+)= a * b. Eigen routes vector-shaped and very small products to
// kernels whose summation order depends on buffer alignment; those run as
// plain loops here so results are reproducible from run to run.
template <class Dst, class A, class B>
void multiply(Dst&& dst, const A& a, const B& b, bool accumulate) {
  const Eigen::Index rows = a.rows(), cols = b.cols(), depth = a.cols();
  if (rows > 1 && cols > 1 && rows + cols + depth >= 20) {
    if (accumulate) {
      dst.noalias() += a * b;
    } else {
      dst.noalias() = a * b;
    }
    return;
  }
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      double s = accumulate ? dst(i, j) : 0.0;
      for (Eigen::Index k = 0; k < depth; ++k) s += a(i, k) * b(k, j);
      dst(i, j) = s;
    }
  }
}

// Unfolds the k x k neighbourhoods of output rows [y0, y1) into a
// (C*k*k) x ((y1-y0)*W) matrix.
void im2col_rows(const Tensor& x, int k, int y0, int y1, std::vector<double>& col) {
  const int pad = k / 2;
  const int h = x.height, w = x.width;
  const std::size_t n = static_cast<std::size_t>(y1 - y0) * static_cast<std::size_t>(w);
  col.assign(static_cast<std::size_t>(x.channels) * static_cast<std::size_t>(k * k) * n, 0.0);
  for (int c = 0; c < x.channels; ++c) {
    const double* src = x.data.data() + x.plane() * static_cast<std::size_t>(c);
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* dst = col.data() + (static_cast<std::size_t>(c) * static_cast<std::size_t>(k * k) + static_cast<std::size_t>(ky * k + kx)) * n;
        const int dy = ky - pad, dx = kx - pad;
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        for (int y = y0; y < y1; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const double* srow = src + static_cast<std::size_t>(sy) * static_cast<std::size_t>(w);
          double* drow = dst + static_cast<std::size_t>(y - y0) * static_cast<std::size_t>(w);
          for (int xx = x0; xx < x1; ++xx) drow[xx] = srow[xx + dx];
        }
      }
    }
  }
}

// Adjoint of im2col_rows, accumulated into gx.
void col2im_rows(const std::vector<double>& col, int k, int y0, int y1, Tensor& gx) {
  const int pad = k / 2;
  const int h = gx.height, w = gx.width;
  const std::size_t n = static_cast<std::size_t>(y1 - y0) * static_cast<std::size_t>(w);
  for (int c = 0; c < gx.channels; ++c) {
    double* dst = gx.data.data() + gx.plane() * static_cast<std::size_t>(c);
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* src = col.data() + (static_cast<std::size_t>(c) * static_cast<std::size_t>(k * k) + static_cast<std::size_t>(ky * k + kx)) * n;
        const int dy = ky - pad, dx = kx - pad;
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        for (int y = y0; y < y1; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          double* drow = dst + static_cast<std::size_t>(sy) * static_cast<std::size_t>(w);
          const double* srow = src + static_cast<std::size_t>(y - y0) * static_cast<std::size_t>(w);
          for (int xx = x0; xx < x1; ++xx) drow[xx + dx] += srow[xx];
        }
      }
    }
  }
}

// Output rows per im2col tile; keeps the unfolded block around 256 KiB.
int band_rows(Eigen::Index kdim, int width) {
  constexpr Eigen::Index kTileDoubles = 32768;
  return static_cast<int>(std::max<Eigen::Index>(1, kTileDoubles / (kdim * width)));
}

void check_conv(const Tensor& x, std::size_t weights, std::size_t biases, int out_channels, int kernel) {
  if (kernel < 1 || kernel % 2 == 0) raise(ErrorKind::InvalidArgument, "kernel size must be odd");
  const std::size_t expect = static_cast<std::size_t>(out_channels) * static_cast<std::size_t>(x.channels) * static_cast<std::size_t>(kernel * kernel);
  if (weights != expect || biases != static_cast<std::size_t>(out_channels)) {
    raise(ErrorKind::ShapeMismatch, "convolution parameters do not match channel counts");
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, std::span<const double> weight, std::span<const double> bias, int out_channels, int kernel) {
  check_conv(x, weight.size(), bias.size(), out_channels, kernel);
  Tensor y(out_channels, x.height, x.width);
  const auto hw = static_cast<Eigen::Index>(x.plane());
  const auto kdim = static_cast<Eigen::Index>(x.channels) * kernel * kernel;
  CMapR w(weight.data(), out_channels, kdim);
  MapR out(y.data.data(), out_channels, hw);
  if (kernel == 1) {
    multiply(out, w, CMapR(x.data.data(), kdim, hw), false);
  } else {
    std::vector<double> col;
    const int rows = band_rows(kdim, x.width);
    for (int y0 = 0; y0 < x.height; y0 += rows) {
      const int y1 = std::min(x.height, y0 + rows);
      const Eigen::Index first = static_cast<Eigen::Index>(y0) * x.width;
      const Eigen::Index n = static_cast<Eigen::Index>(y1 - y0) * x.width;
      im2col_rows(x, kernel, y0, y1, col);
      multiply(out.middleCols(first, n), w, CMapR(col.data(), kdim, n), false);
    }
  }
  for (int c = 0; c < out_channels; ++c) out.row(c).array() += bias[static_cast<std::size_t>(c)];
  return y;
}

Tensor conv2d_backward(const Tensor& x, std::span<const double> weight, int out_channels, int kernel, const Tensor& grad_out,
                       std::span<double> grad_weight, std::span<double> grad_bias) {
  check_conv(x, weight.size(), grad_bias.size(), out_channels, kernel);
  if (grad_out.channels != out_channels || grad_out.height != x.height || grad_out.width != x.width) {
    raise(ErrorKind::ShapeMismatch, "convolution output gradient has the wrong shape");
  }
  const auto hw = static_cast<Eigen::Index>(x.plane());
  const auto kdim = static_cast<Eigen::Index>(x.channels) * kernel * kernel;
  CMapR w(weight.data(), out_channels, kdim);
  CMapR gy(grad_out.data.data(), out_channels, hw);
  MapR gw(grad_weight.data(), out_channels, kdim);
  Eigen::Map<Eigen::VectorXd> gb(grad_bias.data(), out_channels);
  for (Eigen::Index c = 0; c < out_channels; ++c) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < hw; ++i) s += gy(c, i);
    gb(c) += s;
  }

  Tensor gx(x.channels, x.height, x.width);
  if (kernel == 1) {
    multiply(gw, gy, CMapR(x.data.data(), kdim, hw).transpose(), true);
    multiply(MapR(gx.data.data(), kdim, hw), w.transpose(), gy, false);
  } else {
    std::vector<double> col, gcol;
    const int rows = band_rows(kdim, x.width);
    for (int y0 = 0; y0 < x.height; y0 += rows) {
      const int y1 = std::min(x.height, y0 + rows);
      const Eigen::Index first = static_cast<Eigen::Index>(y0) * x.width;
      const Eigen::Index n = static_cast<Eigen::Index>(y1 - y0) * x.width;
      im2col_rows(x, kernel, y0, y1, col);
      multiply(gw, gy.middleCols(first, n), CMapR(col.data(), kdim, n).transpose(), true);
      gcol.resize(col.size());
      multiply(MapR(gcol.data(), kdim, n), w.transpose(), gy.middleCols(first, n), false);
      col2im_rows(gcol, kernel, y0, y1, gx);
    }
  }
  return gx;
}

Tensor conv_transpose2x2(const Tensor& x, std::span<const double> weight, std::span<const double> bias, int out_channels) {
  const std::size_t expect = static_cast<std::size_t>(x.channels) * static_cast<std::size_t>(out_channels) * 4;
  if (weight.size() != expect || bias.size() != static_cast<std::size_t>(out_channels)) {
    raise(ErrorKind::ShapeMismatch, "transposed convolution parameters do not match channel counts");
  }
  const auto hw = static_cast<Eigen::Index>(x.plane());
  CMapR w(weight.data(), x.channels, out_channels * 4);
  MatR z(out_channels * 4, hw);
  multiply(z, w.transpose(), CMapR(x.data.data(), x.channels, hw), false);
  Tensor y(out_channels, 2 * x.height, 2 * x.width);
  for (int co = 0; co < out_channels; ++co) {
    const double b = bias[static_cast<std::size_t>(co)];
    for (int a = 0; a < 2; ++a) {
      for (int c = 0; c < 2; ++c) {
        const double* row = z.data() + static_cast<std::size_t>(co * 4 + a * 2 + c) * static_cast<std::size_t>(hw);
        for (int i = 0; i < x.height; ++i) {
          for (int j = 0; j < x.width; ++j) {
            y.at(co, 2 * i + a, 2 * j + c) = row[static_cast<std::size_t>(i * x.width + j)] + b;
          }
        }
      }
    }
  }
  return y;
}

Tensor conv_transpose2x2_backward(const Tensor& x, std::span<const double> weight, int out_channels, const Tensor& grad_out,
                                  std::span<double> grad_weight, std::span<double> grad_bias) {
  if (grad_out.channels != out_channels || grad_out.height != 2 * x.height || grad_out.width != 2 * x.width) {
    raise(ErrorKind::ShapeMismatch, "transposed convolution output gradient has the wrong shape");
  }
  const auto hw = static_cast<Eigen::Index>(x.plane());
  MatR gz(out_channels * 4, hw);
  for (int co = 0; co < out_channels; ++co) {
    double sum = 0.0;
    for (int a = 0; a < 2; ++a) {
      for (int c = 0; c < 2; ++c) {
        double* row = gz.data() + static_cast<std::size_t>(co * 4 + a * 2 + c) * static_cast<std::size_t>(hw);
        for (int i = 0; i < x.height; ++i) {
          for (int j = 0; j < x.width; ++j) {
            const double g = grad_out.at(co, 2 * i + a, 2 * j + c);
            row[static_cast<std::size_t>(i * x.width + j)] = g;
            sum += g;
          }
        }
      }
    }
    grad_bias[static_cast<std::size_t>(co)] += sum;
  }
  CMapR xm(x.data.data(), x.channels, hw);
  CMapR w(weight.data(), x.channels, out_channels * 4);
  multiply(MapR(grad_weight.data(), x.channels, out_channels * 4), xm, gz.transpose(), true);
  Tensor gx(x.channels, x.height, x.width);
  multiply(MapR(gx.data.data(), x.channels, hw), w, gz, false);
  return gx;
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& y, const Tensor& grad_out) {
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    if (!(y.data[i] > 0.0)) g.data[i] = 0.0;
  }
  return g;
}

Tensor max_pool2x2(const Tensor& x, std::vector<std::uint32_t>& argmax) {
  if (x.height % 2 != 0 || x.width % 2 != 0) raise(ErrorKind::IndivisibleExtent, "max-pool needs even extents");
  Tensor y(x.channels, x.height / 2, x.width / 2);
  argmax.resize(y.size());
  std::size_t o = 0;
  for (int c = 0; c < x.channels; ++c) {
    for (int i = 0; i < y.height; ++i) {
      for (int j = 0; j < y.width; ++j, ++o) {
        std::uint32_t best = 0;
        double best_v = 0.0;
        for (int a = 0; a < 2; ++a) {
          for (int b = 0; b < 2; ++b) {
            const std::size_t idx = x.plane() * static_cast<std::size_t>(c) + static_cast<std::size_t>(2 * i + a) * static_cast<std::size_t>(x.width) + static_cast<std::size_t>(2 * j + b);
            const double v = x.data[idx];
            if ((a == 0 && b == 0) || v > best_v) {
              best_v = v;
              best = static_cast<std::uint32_t>(idx);
            }
          }
        }
        y.data[o] = best_v;
        argmax[o] = best;
      }
    }
  }
  return y;
}

Tensor max_pool2x2_backward(const Tensor& x_shape, std::span<const std::uint32_t> argmax, const Tensor& grad_out) {
  Tensor gx(x_shape.channels, x_shape.height, x_shape.width);
  for (std::size_t o = 0; o < grad_out.data.size(); ++o) gx.data[argmax[o]] += grad_out.data[o];
  return gx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.height != b.height || a.width != b.width) raise(ErrorKind::ShapeMismatch, "concatenated maps differ in size");
  Tensor y(a.channels + b.channels, a.height, a.width);
  std::copy(a.data.begin(), a.data.end(), y.data.begin());
  std::copy(b.data.begin(), b.data.end(), y.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
  return y;
}

void split_channels(const Tensor& g, int first_channels, Tensor& ga, Tensor& gb) {
  ga = Tensor(first_channels, g.height, g.width);
  gb = Tensor(g.channels - first_channels, g.height, g.width);
  std::copy(g.data.begin(), g.data.begin() + static_cast<std::ptrdiff_t>(ga.size()), ga.data.begin());
  std::copy(g.data.begin() + static_cast<std::ptrdiff_t>(ga.size()), g.data.end(), gb.data.begin());
}

Tensor scale_channels(const Tensor& x, std::span<const double> scale) {
  if (scale.size() != static_cast<std::size_t>(x.channels)) raise(ErrorKind::ShapeMismatch, "one scale per channel expected");
  Tensor y = x;
  for (int c = 0; c < x.channels; ++c) {
    for (double& v : y.channel(c)) v *= scale[static_cast<std::size_t>(c)];
  }
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) raise(ErrorKind::ShapeMismatch, "added maps differ in shape");
  Tensor y = a;
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += b.data[i];
  return y;
}

}  // namespace epi::nn
