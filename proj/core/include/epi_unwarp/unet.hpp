#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "epi_unwarp/layers.hpp"

namespace epi::nn {

struct UNetConfig {
  int in_channels = 6;
  int base_channels = 8;
  int levels = 4;
  int max_channels = 128;
  int out_channels = 1;
  double dropout_rate = 0.2;
  int kernel = 3;

  void validate() const;
  /// Feature maps at encoder level `level`; level == levels is the bottleneck.
  int channels_at(int level) const;
  /// H and W must be multiples of this.
  int divisor() const { return 1 << levels; }
  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

struct ParamTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;
  bool is_bias = false;
};

struct UNetParams {
  std::vector<ParamTensor> tensors;

  std::size_t count() const;
  /// Sum of |w| over weight tensors (biases excluded).
  double weight_l1() const;
  const ParamTensor& find(const std::string& name) const;
};

/// Gradient buffers aligned with UNetParams::tensors.
using Gradients = std::vector<std::vector<double>>;

Gradients zero_gradients(const UNetParams& params);
void add_weight_l1_gradient(const UNetParams& params, double scale, Gradients& grads);

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

struct BlockCache {
  Tensor input;
  Tensor act1;     // relu(conv1(x))
  std::vector<double> drop_scale;
  Tensor dropped;  // act1 with dropout applied
  Tensor output;   // relu(conv2 + skip)
};

/// Parameters of one residual block. Empty proj spans mean an identity skip
/// (in == out).
struct ResidualBlockView {
  int in = 0;
  int out = 0;
  int kernel = 3;
  std::span<const double> conv1_weight, conv1_bias;
  std::span<const double> conv2_weight, conv2_bias;
  std::span<const double> proj_weight, proj_bias;
};

struct ResidualBlockGrads {
  std::span<double> conv1_weight, conv1_bias;
  std::span<double> conv2_weight, conv2_bias;
  std::span<double> proj_weight, proj_bias;
};

/// y = relu(conv2(drop(relu(conv1(x)))) + proj(x)). `drop_scale` holds one
/// factor per channel of the inner activation; empty means no dropout.
Tensor residual_block(const Tensor& x, const ResidualBlockView& w, std::span<const double> drop_scale = {}, BlockCache* cache = nullptr);

/// Accumulates parameter gradients into `g`; returns d loss / d x.
Tensor residual_block_backward(const BlockCache& cache, const ResidualBlockView& w, const Tensor& gy, const ResidualBlockGrads& g);

/// Activations kept by forward() for backward().
struct Tape {
  std::vector<BlockCache> encoder;
  std::vector<std::vector<std::uint32_t>> pool_argmax;
  BlockCache bottleneck;
  std::vector<double> bottleneck_drop;
  std::vector<Tensor> up_input;
  std::vector<BlockCache> decoder;  // index = level
  Tensor head_input;
};

/// 2.5D residual U-Net: residual encoder blocks with max-pooling,
/// a residual bottleneck followed by dropout, transposed-convolution
/// upsampling with concatenated skips, and a 1x1 output head.
class UNet {
 public:
  explicit UNet(UNetConfig cfg);

  const UNetConfig& config() const noexcept { return cfg_; }

  /// Fan-in scaled uniform weights, zero biases and a zero output head.
  UNetParams init_params(std::uint64_t seed) const;
  UNetParams zero_params() const;
  std::size_t parameter_count() const;

  /// Checks that `params` has the layout this network expects.
  void check_params(const UNetParams& params) const;

  Tensor forward(const Tensor& x, const UNetParams& params, const ForwardOptions& opt = {}, Tape* tape = nullptr) const;

  /// Accumulates d loss / d params into `grads`; returns d loss / d input.
  Tensor backward(const Tape& tape, const Tensor& grad_out, const UNetParams& params, Gradients& grads) const;

 private:
  struct Conv {
    int weight = -1;
    int bias = -1;
    int in = 0;
    int out = 0;
    int kernel = 0;
  };
  struct Block {
    Conv conv1, conv2;
    std::optional<Conv> proj;
  };

  Conv add_conv(const std::string& name, int in, int out, int kernel, bool transposed = false);
  Block add_block(const std::string& name, int in, int out);

  ResidualBlockView block_view(const Block& b, const UNetParams& p) const;
  ResidualBlockGrads block_grads(const Block& b, Gradients& g) const;
  Tensor block_forward(const Block& b, const Tensor& x, const UNetParams& p, bool training, std::uint64_t& rng_state,
                       BlockCache* cache) const;
  Tensor block_backward(const Block& b, const BlockCache& cache, const Tensor& gy, const UNetParams& p, Gradients& g) const;

  UNetConfig cfg_;
  std::vector<ParamTensor> layout_;  // names, shapes, zero values
  std::vector<int> fan_in_;
  std::vector<Block> encoder_;
  Block bottleneck_;
  std::vector<Conv> up_;       // index = level
  std::vector<Block> decoder_;  // index = level
  Conv head_;
};

}  // namespace epi::nn
