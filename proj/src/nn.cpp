#include "casdgr/nn.hpp"

#include <cmath>

namespace casdgr::nn {

Index count(const ParamList& params) {
  Index total = 0;
  for (const auto& p : params) total += p.tensor.numel();
  return total;
}

void xavier_uniform(Tensor& weight, Index fan_in, Index fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : weight.mutable_data()) v = rng.uniform(-bound, bound);
}

Conv2d Conv2d::zeros(Index in_channels, Index out_channels, int kernel, int dilation) {
  Conv2d c;
  c.weight = Tensor::zeros({out_channels, in_channels, kernel, kernel}, true);
  c.bias = Tensor::zeros({out_channels}, true);
  c.opts = {1, dilation * (kernel / 2), dilation};
  return c;
}

void Conv2d::xavier(Rng& rng) {
  const Index area = static_cast<Index>(kernel()) * kernel();
  xavier_uniform(weight, in_channels() * area, out_channels() * area, rng);
}

void Conv2d::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

ConvBlock ConvBlock::create(Index in_channels, Index out_channels, int dilation, Rng& rng) {
  if (dilation < 1) throw ShapeError("ConvBlock: dilation must be >= 1");
  ConvBlock b;
  b.conv = Conv2d::zeros(in_channels, out_channels, 3, dilation);
  b.conv.xavier(rng);
  b.gamma = Tensor::full({out_channels}, 1.0, true);
  b.beta = Tensor::zeros({out_channels}, true);
  return b;
}

Tensor ConvBlock::operator()(const Tensor& x) const {
  if (x.ndim() != 4 || x.dim(1) != conv.in_channels()) {
    throw ShapeError("ConvBlock: expected " + std::to_string(conv.in_channels()) + " input channels, got " +
                     to_string(x.shape()));
  }
  return relu(nn::group_norm(conv(x), gamma, beta, group_size));
}

void ConvBlock::collect(const std::string& prefix, ParamList& out) const {
  conv.collect(prefix + ".conv", out);
  out.push_back({prefix + ".gn.gamma", gamma});
  out.push_back({prefix + ".gn.beta", beta});
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Index group_size, double eps) {
  return casdgr::group_norm(x, gamma, beta, group_size, eps);
}

Tensor downsample2(const Tensor& x) { return avg_pool2(x); }

Tensor upsample2(const Tensor& x) { return bilinear_resize(x, 2 * x.dim(2), 2 * x.dim(3)); }

RsuBlock RsuBlock::create(const RsuConfig& config, Rng& rng) {
  if (config.depth < 1) throw ShapeError("RsuBlock: depth must be >= 1");
  RsuBlock r;
  r.config = config;
  const Index mid = config.mid_channels, out = config.out_channels;
  r.input = ConvBlock::create(config.in_channels, out, 1, rng);
  for (int l = 0; l < config.depth; ++l) r.encoder.push_back(ConvBlock::create(l == 0 ? out : mid, mid, 1, rng));
  for (int l = 0; l < config.bottom_blocks; ++l) r.bottom.push_back(ConvBlock::create(mid, mid, config.bottom_dilation, rng));
  for (int l = 0; l < config.depth; ++l) r.decoder.push_back(ConvBlock::create(2 * mid, l == 0 ? out : mid, 1, rng));
  r.residual = Conv2d::zeros(config.in_channels, out, 1);
  r.residual.xavier(rng);
  return r;
}

Tensor RsuBlock::operator()(const Tensor& x) const {
  const Index need = Index{1} << config.depth;
  if (x.ndim() != 4 || x.dim(2) < need || x.dim(3) < need || x.dim(2) % need != 0 || x.dim(3) % need != 0) {
    throw ShapeError("RsuBlock: input " + to_string(x.shape()) + " too small or not divisible for depth " +
                     std::to_string(config.depth));
  }
  std::vector<Tensor> skips;
  skips.reserve(encoder.size());
  Tensor h = input(x);
  for (const auto& enc : encoder) {
    skips.push_back(enc(h));
    h = downsample2(skips.back());
  }
  for (const auto& b : bottom) h = b(h);
  for (int l = config.depth - 1; l >= 0; --l) h = decoder[l](concat_channels({upsample2(h), skips[l]}));
  return h + residual(x);
}

void RsuBlock::collect(const std::string& prefix, ParamList& out) const {
  input.collect(prefix + ".in", out);
  for (size_t l = 0; l < encoder.size(); ++l) encoder[l].collect(prefix + ".enc" + std::to_string(l), out);
  for (size_t l = 0; l < bottom.size(); ++l) bottom[l].collect(prefix + ".bottom" + std::to_string(l), out);
  for (size_t l = 0; l < decoder.size(); ++l) decoder[l].collect(prefix + ".dec" + std::to_string(l), out);
  residual.collect(prefix + ".residual", out);
}

}  // namespace casdgr::nn
