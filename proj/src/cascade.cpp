#include "casdgr/cascade.hpp"

#include <algorithm>
#include <stdexcept>

namespace casdgr {

ModelConfig ModelConfig::full() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.resolution = 64;
  c.channels = 16;
  c.rsu_depths = {2, 2, 2, 1, 1};
  c.dgr = {5, 2, 16, 16};
  c.dgr_stages = {1, 2, 3, 4};
  return c;
}

Index ModelConfig::stage_resolution(int m) const { return resolution >> (stages - m); }

dgr::DgrConfig ModelConfig::stage_dgr() const {
  dgr::DgrConfig d = dgr;
  d.channels = channels;
  return d;
}

bool ModelConfig::has_dgr(int m) const {
  return std::find(dgr_stages.begin(), dgr_stages.end(), m) != dgr_stages.end();
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("invalid model config: " + msg); };
  if (stages < 1) fail("stages must be >= 1");
  if (channels < 1) fail("channels must be >= 1");
  if (static_cast<int>(rsu_depths.size()) != stages) fail("rsu_depths needs one entry per stage");
  if (resolution < 1 || resolution % (Index{1} << (stages - 1)) != 0) {
    fail("resolution must be divisible by 2^(stages-1)");
  }
  for (int m = 1; m <= stages; ++m) {
    const int depth = rsu_depths[m - 1];
    if (depth < 1) fail("RSU depth must be >= 1");
    if (stage_resolution(m) % (Index{1} << depth) != 0) {
      fail("stage " + std::to_string(m) + " resolution " + std::to_string(stage_resolution(m)) +
           " not divisible by 2^" + std::to_string(depth));
    }
  }
  for (int m : dgr_stages) {
    if (m < 1 || m > stages) fail("dgr stage " + std::to_string(m) + " out of range");
  }
  if (group_size < 1) fail("group_size must be >= 1");
  if (!dgr_stages.empty()) {
    stage_dgr().validate();
  }
}

nn::ParamList CascadeModel::parameters() const {
  nn::ParamList out;
  for (size_t m = 0; m < stages.size(); ++m) {
    const std::string prefix = "stage" + std::to_string(m + 1);
    stages[m].input.collect(prefix + ".input", out);
    stages[m].rsu.collect(prefix + ".rsu", out);
    if (stages[m].dgr) stages[m].dgr->collect(prefix + ".dgr", out);
    stages[m].head.collect(prefix + ".head", out);
  }
  return out;
}

namespace {

void set_group_size(nn::RsuBlock& rsu, Index g) {
  rsu.input.group_size = g;
  for (auto* blocks : {&rsu.encoder, &rsu.bottom, &rsu.decoder}) {
    for (auto& b : *blocks) b.group_size = g;
  }
}

}  // namespace

CascadeModel build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  CascadeModel model;
  model.config = config;
  Rng rng(seed);
  const Index c = config.channels;
  for (int m = 1; m <= config.stages; ++m) {
    Stage s;
    s.input = nn::ConvBlock::create(3, c, 1, rng);
    s.input.group_size = config.group_size;
    nn::RsuConfig rc;
    rc.in_channels = m == 1 ? c : 2 * c;
    rc.out_channels = c;
    rc.mid_channels = nn::RsuConfig::default_mid(c);
    rc.depth = config.rsu_depths[m - 1];
    s.rsu = nn::RsuBlock::create(rc, rng);
    set_group_size(s.rsu, config.group_size);
    if (config.has_dgr(m)) s.dgr = dgr::DgrParams::create(config.stage_dgr(), rng);
    s.head = nn::Conv2d::zeros(c, 1, 3);
    s.head.xavier(rng);
    model.stages.push_back(std::move(s));
  }
  return model;
}

StageOutput stage_forward(const CascadeModel& model, int m, const Tensor& image_m,
                          const std::optional<Tensor>& prev_refined) {
  const auto& cfg = model.config;
  if (m < 1 || m > cfg.stages) throw std::out_of_range("stage index out of range");
  const Index res = cfg.stage_resolution(m);
  if (image_m.ndim() != 4 || image_m.dim(1) != 3 || image_m.dim(2) != res || image_m.dim(3) != res) {
    throw ShapeError("stage " + std::to_string(m) + " expects N x 3 x " + std::to_string(res) + " x " +
                     std::to_string(res) + ", got " + to_string(image_m.shape()));
  }
  if ((m == 1) == prev_refined.has_value()) {
    throw std::invalid_argument("previous refined features must be given for every stage but the first");
  }
  const Stage& s = model.stages[m - 1];
  Tensor features = s.input(image_m);
  if (prev_refined) {
    if (prev_refined->shape() != features.shape()) {
      throw ShapeError("stage " + std::to_string(m) + ": previous features " + to_string(prev_refined->shape()) +
                       " do not match " + to_string(features.shape()));
    }
    features = concat_channels({features, *prev_refined});
  }
  Tensor out = s.rsu(features);
  Tensor refined = s.dgr ? dgr::forward(*s.dgr, out) : out;
  return {s.head(refined), refined};
}

std::vector<Tensor> build_pyramid(const Tensor& x, int stages) {
  std::vector<Tensor> levels(static_cast<size_t>(stages));
  levels.back() = x;
  for (int m = stages - 2; m >= 0; --m) {
    const Tensor& finer = levels[m + 1];
    levels[m] = bilinear_resize(finer, finer.dim(2) / 2, finer.dim(3) / 2);
  }
  return levels;
}

AlphaPrediction forward(const CascadeModel& model, const Tensor& image, ForwardOptions opts) {
  const auto& cfg = model.config;
  if (image.ndim() != 4 || image.dim(1) != 3 || image.dim(2) != cfg.resolution || image.dim(3) != cfg.resolution) {
    throw ShapeError("forward expects N x 3 x " + std::to_string(cfg.resolution) + " x " +
                     std::to_string(cfg.resolution) + ", got " + to_string(image.shape()));
  }
  const std::vector<Tensor> pyramid = build_pyramid(image, cfg.stages);
  AlphaPrediction pred;
  std::optional<Tensor> carried;
  for (int m = 1; m <= cfg.stages; ++m) {
    StageOutput so = stage_forward(model, m, pyramid[m - 1], carried);
    pred.per_stage.push_back(so.alpha);
    if (m < cfg.stages) {
      carried = opts.zero_interstage ? Tensor::zeros({image.dim(0), cfg.channels, 2 * so.refined.dim(2), 2 * so.refined.dim(3)})
                                     : nn::upsample2(so.refined);
    }
  }
  return pred;
}

namespace {

Index conv_count(Index in, Index out, Index k) { return in * out * k * k + out; }
Index block_count(Index in, Index out) { return conv_count(in, out, 3) + 2 * out; }

Index rsu_count(Index in, Index out, Index mid, int depth, int bottom) {
  Index n = block_count(in, out);
  for (int l = 0; l < depth; ++l) n += block_count(l == 0 ? out : mid, mid);
  n += bottom * block_count(mid, mid);
  for (int l = 0; l < depth; ++l) n += block_count(2 * mid, l == 0 ? out : mid);
  return n + conv_count(in, out, 1);
}

}  // namespace

ParamBreakdown count_params(const CascadeModel& model) {
  ParamBreakdown b;
  for (const auto& s : model.stages) {
    nn::ParamList all, dgr;
    s.input.collect("", all);
    s.rsu.collect("", all);
    s.head.collect("", all);
    if (s.dgr) s.dgr->collect("", dgr);
    const Index d = nn::count(dgr);
    b.per_stage.push_back(nn::count(all) + d);
    b.dgr_total += d;
  }
  for (Index v : b.per_stage) b.total += v;
  return b;
}

ParamBreakdown count_params(const ModelConfig& config) {
  config.validate();
  ParamBreakdown b;
  const Index c = config.channels;
  const Index mid = nn::RsuConfig::default_mid(c);
  for (int m = 1; m <= config.stages; ++m) {
    Index n = block_count(3, c) + rsu_count(m == 1 ? c : 2 * c, c, mid, config.rsu_depths[m - 1], 2) +
              conv_count(c, 1, 3);
    if (config.has_dgr(m)) {
      const Index d = dgr::count_params(config.stage_dgr());
      n += d;
      b.dgr_total += d;
    }
    b.per_stage.push_back(n);
    b.total += n;
  }
  return b;
}

}  // namespace casdgr
