#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace epi::nn {

/// Channel-major feature map (C x H x W, W fastest) for one sample.
struct Tensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill) {}

  std::size_t plane() const noexcept { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
  std::size_t size() const noexcept { return data.size(); }
  std::span<double> channel(int c) noexcept { return {data.data() + plane() * static_cast<std::size_t>(c), plane()}; }
  std::span<const double> channel(int c) const noexcept { return {data.data() + plane() * static_cast<std::size_t>(c), plane()}; }
  double& at(int c, int y, int x) noexcept { return data[plane() * static_cast<std::size_t>(c) + static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)]; }
  double at(int c, int y, int x) const noexcept { return data[plane() * static_cast<std::size_t>(c) + static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)]; }
  bool same_shape(const Tensor& o) const noexcept { return channels == o.channels && height == o.height && width == o.width; }
};

// Convolution weights are laid out [out][in][ky][kx]; transposed
// convolution weights [in][out][ky][kx].

/// Stride-1 cross-correlation with zero "same" padding; kernel is odd.
Tensor conv2d(const Tensor& x, std::span<const double> weight, std::span<const double> bias, int out_channels, int kernel);

/// Accumulates weight/bias gradients and returns d loss / d x.
Tensor conv2d_backward(const Tensor& x, std::span<const double> weight, int out_channels, int kernel, const Tensor& grad_out,
                       std::span<double> grad_weight, std::span<double> grad_bias);

/// 2x2, stride-2 transposed convolution (doubles H and W).
Tensor conv_transpose2x2(const Tensor& x, std::span<const double> weight, std::span<const double> bias, int out_channels);

Tensor conv_transpose2x2_backward(const Tensor& x, std::span<const double> weight, int out_channels, const Tensor& grad_out,
                                  std::span<double> grad_weight, std::span<double> grad_bias);

Tensor relu(const Tensor& x);
/// Gradient of relu given its *output*.
Tensor relu_backward(const Tensor& y, const Tensor& grad_out);

/// 2x2 max-pool, stride 2; records the winning flat index per output.
Tensor max_pool2x2(const Tensor& x, std::vector<std::uint32_t>& argmax);
Tensor max_pool2x2_backward(const Tensor& x_shape, std::span<const std::uint32_t> argmax, const Tensor& grad_out);

Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& g, int first_channels, Tensor& ga, Tensor& gb);

/// Multiplies each channel by its scale (0 for dropped channels,
/// 1/(1-p) for kept ones).
Tensor scale_channels(const Tensor& x, std::span<const double> scale);

Tensor add(const Tensor& a, const Tensor& b);

}  // namespace epi::nn
