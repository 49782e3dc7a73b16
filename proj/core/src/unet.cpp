#include "epi_unwarp/unet.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "epi_unwarp/errors.hpp"
#include "epi_unwarp/parallel.hpp"

namespace epi::nn {

namespace {

// Spatial dropout: whole channels are dropped, survivors rescaled.
std::vector<double> draw_channel_scale(int channels, double rate, std::uint64_t& state) {
  std::vector<double> scale(static_cast<std::size_t>(channels), 1.0);
  if (rate <= 0.0) return scale;
  const double keep = 1.0 / (1.0 - rate);
  for (auto& s : scale) {
    const double u = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
    s = u < rate ? 0.0 : keep;
  }
  return scale;
}

std::span<const double> view(const UNetParams& p, int idx) { return p.tensors[static_cast<std::size_t>(idx)].values; }
std::span<double> view(Gradients& g, int idx) { return g[static_cast<std::size_t>(idx)]; }

}  // namespace

void UNetConfig::validate() const {
  if (in_channels < 1 || base_channels < 1 || out_channels < 1) raise(ErrorKind::InvalidArgument, "channel counts must be positive");
  if (in_channels > 4096 || max_channels > 4096 || out_channels > 4096) {
    raise(ErrorKind::InvalidArgument, "channel counts above 4096 are not supported");
  }
  if (levels < 1 || levels > 8) raise(ErrorKind::InvalidArgument, "levels must lie in [1, 8]");
  if (max_channels < base_channels) raise(ErrorKind::InvalidArgument, "max_channels must be >= base_channels");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) raise(ErrorKind::InvalidArgument, "dropout rate must lie in [0, 1)");
  if (kernel < 1 || kernel % 2 == 0 || kernel > 15) raise(ErrorKind::InvalidArgument, "kernel must be odd and at most 15");
}

int UNetConfig::channels_at(int level) const {
  long long c = base_channels;
  for (int i = 0; i < level; ++i) c = std::min<long long>(c * 2, max_channels);
  return static_cast<int>(std::min<long long>(c, max_channels));
}

std::size_t UNetParams::count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.values.size();
  return n;
}

double UNetParams::weight_l1() const {
  double s = 0.0;
  for (const auto& t : tensors) {
    if (t.is_bias) continue;
    for (double v : t.values) s += std::abs(v);
  }
  return s;
}

const ParamTensor& UNetParams::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  raise(ErrorKind::InvalidArgument, "no parameter named " + name);
}

Gradients zero_gradients(const UNetParams& params) {
  Gradients g;
  g.reserve(params.tensors.size());
  for (const auto& t : params.tensors) g.emplace_back(t.values.size(), 0.0);
  return g;
}

void add_weight_l1_gradient(const UNetParams& params, double scale, Gradients& grads) {
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const auto& t = params.tensors[i];
    if (t.is_bias) continue;
    for (std::size_t k = 0; k < t.values.size(); ++k) {
      const double v = t.values[k];
      grads[i][k] += scale * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
    }
  }
}

UNet::Conv UNet::add_conv(const std::string& name, int in, int out, int kernel, bool transposed) {
  Conv c;
  c.in = in;
  c.out = out;
  c.kernel = kernel;
  ParamTensor w;
  w.name = name + ".weight";
  w.shape = transposed ? std::vector<int>{in, out, kernel, kernel} : std::vector<int>{out, in, kernel, kernel};
  w.values.assign(static_cast<std::size_t>(in) * static_cast<std::size_t>(out) * static_cast<std::size_t>(kernel * kernel), 0.0);
  c.weight = static_cast<int>(layout_.size());
  layout_.push_back(std::move(w));
  fan_in_.push_back(transposed ? in : in * kernel * kernel);

  ParamTensor b;
  b.name = name + ".bias";
  b.shape = {out};
  b.values.assign(static_cast<std::size_t>(out), 0.0);
  b.is_bias = true;
  c.bias = static_cast<int>(layout_.size());
  layout_.push_back(std::move(b));
  fan_in_.push_back(0);
  return c;
}

UNet::Block UNet::add_block(const std::string& name, int in, int out) {
  Block b;
  b.conv1 = add_conv(name + ".conv1", in, out, cfg_.kernel);
  b.conv2 = add_conv(name + ".conv2", out, out, cfg_.kernel);
  if (in != out) b.proj = add_conv(name + ".proj", in, out, 1);
  return b;
}

UNet::UNet(UNetConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  int in = cfg_.in_channels;
  for (int l = 0; l < cfg_.levels; ++l) {
    const int c = cfg_.channels_at(l);
    encoder_.push_back(add_block("enc" + std::to_string(l), in, c));
    in = c;
  }
  const int bott = cfg_.channels_at(cfg_.levels);
  bottleneck_ = add_block("bottleneck", in, bott);
  up_.resize(static_cast<std::size_t>(cfg_.levels));
  decoder_.resize(static_cast<std::size_t>(cfg_.levels));
  int prev = bott;
  for (int l = cfg_.levels - 1; l >= 0; --l) {
    const int c = cfg_.channels_at(l);
    up_[static_cast<std::size_t>(l)] = add_conv("up" + std::to_string(l), prev, c, 2, true);
    decoder_[static_cast<std::size_t>(l)] = add_block("dec" + std::to_string(l), 2 * c, c);
    prev = c;
  }
  head_ = add_conv("head", prev, cfg_.out_channels, 1);
}

UNetParams UNet::zero_params() const { return UNetParams{layout_}; }

std::size_t UNet::parameter_count() const { return zero_params().count(); }

UNetParams UNet::init_params(std::uint64_t seed) const {
  UNetParams p = zero_params();
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    auto& t = p.tensors[i];
    if (t.is_bias) continue;
    // A zero head makes the first prediction the zero VDM; with a random
    // head the last block's ReLUs tend to die early under dropout.
    if (t.name == "head.weight") continue;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in_[i]));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : t.values) v = dist(rng);
  }
  return p;
}

void UNet::check_params(const UNetParams& params) const {
  if (params.tensors.size() != layout_.size()) raise(ErrorKind::ShapeMismatch, "parameter tensor count does not match the network");
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    const auto& a = params.tensors[i];
    const auto& b = layout_[i];
    if (a.name != b.name || a.shape != b.shape || a.values.size() != b.values.size()) {
      raise(ErrorKind::ShapeMismatch, "parameter " + b.name + " has an unexpected layout");
    }
  }
}

Tensor residual_block(const Tensor& x, const ResidualBlockView& w, std::span<const double> drop_scale, BlockCache* cache) {
  if (x.channels != w.in) raise(ErrorKind::ShapeMismatch, "block input has the wrong channel count");
  const bool identity = w.proj_weight.empty();
  if (identity && w.in != w.out) raise(ErrorKind::ShapeMismatch, "identity skip needs equal channel counts");
  Tensor act1 = relu(conv2d(x, w.conv1_weight, w.conv1_bias, w.out, w.kernel));
  std::vector<double> scale(drop_scale.begin(), drop_scale.end());
  if (scale.empty()) scale.assign(static_cast<std::size_t>(act1.channels), 1.0);
  if (scale.size() != static_cast<std::size_t>(act1.channels)) raise(ErrorKind::ShapeMismatch, "one dropout factor per channel expected");
  Tensor dropped = drop_scale.empty() ? act1 : scale_channels(act1, scale);
  Tensor pre = conv2d(dropped, w.conv2_weight, w.conv2_bias, w.out, w.kernel);
  pre = add(pre, identity ? x : conv2d(x, w.proj_weight, w.proj_bias, w.out, 1));
  Tensor y = relu(pre);
  if (cache) {
    cache->input = x;
    cache->act1 = std::move(act1);
    cache->drop_scale = std::move(scale);
    cache->dropped = std::move(dropped);
    cache->output = y;
  }
  return y;
}

Tensor residual_block_backward(const BlockCache& c, const ResidualBlockView& w, const Tensor& gy, const ResidualBlockGrads& g) {
  const Tensor gpre = relu_backward(c.output, gy);
  const Tensor gdrop = conv2d_backward(c.dropped, w.conv2_weight, w.out, w.kernel, gpre, g.conv2_weight, g.conv2_bias);
  const Tensor gact = relu_backward(c.act1, scale_channels(gdrop, c.drop_scale));
  Tensor gx = conv2d_backward(c.input, w.conv1_weight, w.out, w.kernel, gact, g.conv1_weight, g.conv1_bias);
  if (w.proj_weight.empty()) {
    gx = add(gx, gpre);
  } else {
    gx = add(gx, conv2d_backward(c.input, w.proj_weight, w.out, 1, gpre, g.proj_weight, g.proj_bias));
  }
  return gx;
}

ResidualBlockView UNet::block_view(const Block& b, const UNetParams& p) const {
  ResidualBlockView v;
  v.in = b.conv1.in;
  v.out = b.conv1.out;
  v.kernel = b.conv1.kernel;
  v.conv1_weight = view(p, b.conv1.weight);
  v.conv1_bias = view(p, b.conv1.bias);
  v.conv2_weight = view(p, b.conv2.weight);
  v.conv2_bias = view(p, b.conv2.bias);
  if (b.proj) {
    v.proj_weight = view(p, b.proj->weight);
    v.proj_bias = view(p, b.proj->bias);
  }
  return v;
}

ResidualBlockGrads UNet::block_grads(const Block& b, Gradients& g) const {
  ResidualBlockGrads r;
  r.conv1_weight = view(g, b.conv1.weight);
  r.conv1_bias = view(g, b.conv1.bias);
  r.conv2_weight = view(g, b.conv2.weight);
  r.conv2_bias = view(g, b.conv2.bias);
  if (b.proj) {
    r.proj_weight = view(g, b.proj->weight);
    r.proj_bias = view(g, b.proj->bias);
  }
  return r;
}

Tensor UNet::block_forward(const Block& b, const Tensor& x, const UNetParams& p, bool training, std::uint64_t& rng_state,
                           BlockCache* cache) const {
  const std::vector<double> scale =
      training ? draw_channel_scale(b.conv1.out, cfg_.dropout_rate, rng_state) : std::vector<double>{};
  return residual_block(x, block_view(b, p), scale, cache);
}

Tensor UNet::block_backward(const Block& b, const BlockCache& c, const Tensor& gy, const UNetParams& p, Gradients& g) const {
  return residual_block_backward(c, block_view(b, p), gy, block_grads(b, g));
}

Tensor UNet::forward(const Tensor& x, const UNetParams& params, const ForwardOptions& opt, Tape* tape) const {
  check_params(params);
  if (x.channels != cfg_.in_channels) raise(ErrorKind::ShapeMismatch, "input has the wrong channel count");
  if (x.height % cfg_.divisor() != 0 || x.width % cfg_.divisor() != 0) {
    raise(ErrorKind::IndivisibleExtent, "input extents must be multiples of " + std::to_string(cfg_.divisor()));
  }
  const auto levels = static_cast<std::size_t>(cfg_.levels);
  std::uint64_t rng_state = opt.dropout_seed;
  if (tape) {
    tape->encoder.assign(levels, {});
    tape->pool_argmax.assign(levels, {});
    tape->up_input.assign(levels, {});
    tape->decoder.assign(levels, {});
  }

  std::vector<Tensor> skips(levels);
  Tensor h = x;
  std::vector<std::uint32_t> argmax;
  for (std::size_t l = 0; l < levels; ++l) {
    skips[l] = block_forward(encoder_[l], h, params, opt.training, rng_state, tape ? &tape->encoder[l] : nullptr);
    h = max_pool2x2(skips[l], argmax);
    if (tape) tape->pool_argmax[l] = argmax;
  }
  h = block_forward(bottleneck_, h, params, opt.training, rng_state, tape ? &tape->bottleneck : nullptr);
  std::vector<double> bscale = opt.training ? draw_channel_scale(h.channels, cfg_.dropout_rate, rng_state)
                                            : std::vector<double>(static_cast<std::size_t>(h.channels), 1.0);
  if (opt.training) h = scale_channels(h, bscale);
  if (tape) tape->bottleneck_drop = std::move(bscale);

  for (std::size_t l = levels; l-- > 0;) {
    const Conv& up = up_[l];
    if (tape) tape->up_input[l] = h;
    Tensor u = conv_transpose2x2(h, view(params, up.weight), view(params, up.bias), up.out);
    h = block_forward(decoder_[l], concat_channels(u, skips[l]), params, opt.training, rng_state,
                      tape ? &tape->decoder[l] : nullptr);
  }
  if (tape) tape->head_input = h;
  return conv2d(h, view(params, head_.weight), view(params, head_.bias), head_.out, 1);
}

Tensor UNet::backward(const Tape& tape, const Tensor& grad_out, const UNetParams& params, Gradients& grads) const {
  if (grads.size() != params.tensors.size()) raise(ErrorKind::ShapeMismatch, "gradient buffers do not match parameters");
  const auto levels = static_cast<std::size_t>(cfg_.levels);
  Tensor g = conv2d_backward(tape.head_input, view(params, head_.weight), head_.out, 1, grad_out, view(grads, head_.weight),
                             view(grads, head_.bias));
  std::vector<Tensor> skip_grads(levels);
  for (std::size_t l = 0; l < levels; ++l) {
    const Tensor gcat = block_backward(decoder_[l], tape.decoder[l], g, params, grads);
    Tensor gu;
    split_channels(gcat, up_[l].out, gu, skip_grads[l]);
    g = conv_transpose2x2_backward(tape.up_input[l], view(params, up_[l].weight), up_[l].out, gu, view(grads, up_[l].weight),
                                   view(grads, up_[l].bias));
  }
  g = scale_channels(g, tape.bottleneck_drop);
  g = block_backward(bottleneck_, tape.bottleneck, g, params, grads);
  for (std::size_t l = levels; l-- > 0;) {
    g = max_pool2x2_backward(tape.encoder[l].output, tape.pool_argmax[l], g);
    g = add(g, skip_grads[l]);
    g = block_backward(encoder_[l], tape.encoder[l], g, params, grads);
  }
  return g;
}

}  // namespace epi::nn
