#include "casdgr/dgr.hpp"

#include <cstdlib>

namespace casdgr::dgr {

void DgrConfig::validate() const {
  if (neighbors < 1) throw std::invalid_argument("DGR neighbor count must be >= 1");
  if (layers < 1) throw std::invalid_argument("DGR layers must be >= 1");
  if (channels < 1 || projection < 1) throw std::invalid_argument("DGR channel widths must be >= 1");
}

std::vector<Offset2> base_layout(Index k) {
  if (k < 1) throw std::invalid_argument("base_layout: K must be >= 1");
  if (k == 1) return {{0, 0}};
  if (k == 5) return {{0, 0}, {-1, 0}, {1, 0}, {0, -1}, {0, 1}};
  std::vector<Offset2> out;
  out.reserve(static_cast<size_t>(k));
  for (int r = 1; static_cast<Index>(out.size()) < k; ++r) {
    for (int dy = -r; dy <= r && static_cast<Index>(out.size()) < k; ++dy) {
      for (int dx = -r; dx <= r && static_cast<Index>(out.size()) < k; ++dx) {
        // Ring 1 is the whole 3x3 window; later rings only add their border.
        if (r > 1 && std::abs(dy) != r && std::abs(dx) != r) continue;
        out.push_back({dy, dx});
      }
    }
  }
  return out;
}

DgrParams DgrParams::create(const DgrConfig& config, Rng& rng) {
  config.validate();
  DgrParams p;
  p.config = config;
  p.layout = base_layout(config.neighbors);
  p.offset = nn::Conv2d::zeros(config.channels, 2 * config.neighbors, 3);
  for (int i = 0; i < config.layers; ++i) {
    RefineWeights w;
    w.query = Tensor::zeros({config.projection, config.channels}, true);
    w.key = Tensor::zeros({config.projection, config.channels}, true);
    nn::xavier_uniform(w.query, config.channels, config.projection, rng);
    nn::xavier_uniform(w.key, config.channels, config.projection, rng);
    if (config.projection != config.channels) {
      w.restore = nn::Conv2d::zeros(config.projection, config.channels, 1);
      w.restore.xavier(rng);
    }
    p.iterations.push_back(std::move(w));
  }
  return p;
}

void DgrParams::collect(const std::string& prefix, nn::ParamList& out) const {
  offset.collect(prefix + ".offset", out);
  for (size_t i = 0; i < iterations.size(); ++i) {
    const std::string it = prefix + ".iter" + std::to_string(i);
    out.push_back({it + ".w1", iterations[i].query});
    out.push_back({it + ".w2", iterations[i].key});
    if (iterations[i].restore.weight.defined()) iterations[i].restore.collect(it + ".restore", out);
  }
}

NeighborField predict_neighbors(const DgrParams& p, const Tensor& x) {
  NeighborField f;
  f.coords = neighbor_coords(p.offset(x), p.layout);
  f.features = bilinear_gather(x, f.coords);
  return f;
}

namespace {

Tensor project_neighbors(const Tensor& w, const Tensor& features) {
  // N x K x C x H x W -> (N*K) x C x H x W so the projection acts per slot.
  const Shape& s = features.shape();
  Tensor flat = reshape(features, {s[0] * s[1], s[2], s[3], s[4]});
  Tensor projected = channel_project(w, flat);
  return reshape(projected, {s[0], s[1], w.dim(0), s[3], s[4]});
}

void check_field(const Tensor& x, const NeighborField& field) {
  const Shape& f = field.features.shape();
  if (x.ndim() != 4 || f.size() != 5 || f[0] != x.dim(0) || f[2] != x.dim(1) || f[3] != x.dim(2) || f[4] != x.dim(3)) {
    throw ShapeError("refine_step: neighbor features " + to_string(f) + " do not match input " + to_string(x.shape()));
  }
}

}  // namespace

Tensor refine_step(const Tensor& w1, const Tensor& w2, const Tensor& x, const NeighborField& field) {
  check_field(x, field);
  if (w1.shape() != w2.shape()) throw ShapeError("refine_step: W1 and W2 must have the same shape");
  return relu(attend(channel_project(w1, x), project_neighbors(w2, field.features)));
}

Tensor refine_weights(const Tensor& w1, const Tensor& w2, const Tensor& x, const NeighborField& field) {
  check_field(x, field);
  NoGradGuard guard;
  return attention_weights(channel_project(w1, x), project_neighbors(w2, field.features));
}

Tensor forward(const DgrParams& p, const Tensor& x) {
  if (x.ndim() != 4 || x.dim(1) != p.config.channels) {
    throw ShapeError("dgr::forward: expected " + std::to_string(p.config.channels) + " channels, got " +
                     to_string(x.shape()));
  }
  Tensor h = x;
  for (const auto& it : p.iterations) {
    const NeighborField field = predict_neighbors(p, h);
    h = refine_step(it.query, it.key, h, field);
    if (it.restore.weight.defined()) h = it.restore(h);
  }
  return h;
}

Index count_params(const DgrConfig& config) {
  config.validate();
  const Index offset = 9 * config.channels * 2 * config.neighbors + 2 * config.neighbors;
  Index per_iter = 2 * config.projection * config.channels;
  if (config.projection != config.channels) per_iter += config.projection * config.channels + config.channels;
  return offset + config.layers * per_iter;
}

}  // namespace casdgr::dgr
