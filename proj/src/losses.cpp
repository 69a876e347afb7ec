#include "casdgr/losses.hpp"

#include "casdgr/data.hpp"

namespace casdgr::loss {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

Tensor clip01(const Tensor& x) { return clamp(x, 0.0, 1.0); }

}  // namespace

double LossWeights::alpha_weight(int m) const {
  if (alpha.empty()) return 1.0;
  if (m < 1 || m > static_cast<int>(alpha.size())) throw std::out_of_range("no alpha-loss weight for stage " + std::to_string(m));
  return alpha[m - 1];
}

Tensor alpha_loss(const Tensor& pred, const Tensor& gt) {
  require_same(pred, gt, "alpha_loss");
  return mean(abs(clip01(pred) - gt));
}

Tensor comp_loss(const Tensor& alpha, const Tensor& image, const Tensor& fg, const Tensor& bg) {
  require_same(image, fg, "comp_loss");
  require_same(image, bg, "comp_loss");
  if (alpha.ndim() != 4 || alpha.dim(1) != 1 || alpha.dim(0) != image.dim(0) || alpha.dim(2) != image.dim(2) ||
      alpha.dim(3) != image.dim(3)) {
    throw ShapeError("comp_loss: alpha " + to_string(alpha.shape()) + " does not match image " + to_string(image.shape()));
  }
  Tensor a = expand_channels(clip01(alpha), image.dim(1));
  // I - aF - (1 - a)B = (I - B) - a(F - B)
  return mean(abs((image - bg) - a * (fg - bg)));
}

Tensor grad_loss(const Tensor& pred, const Tensor& gt) {
  require_same(pred, gt, "grad_loss");
  if (pred.ndim() != 4 || pred.dim(1) != 1) throw ShapeError("grad_loss: expected N x 1 x H x W");
  Tensor gp = normalize_gradient_field(forward_diff(clip01(pred)), kGradNormEps);
  Tensor gg = normalize_gradient_field(forward_diff(gt), kGradNormEps);
  // Mean over the two components times two = per-pixel L1 norm averaged over pixels.
  return scale(mean(abs(gp - gg)), 2.0);
}

Batch make_batch(const std::vector<CompositeSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("make_batch: empty batch");
  auto stack = [&](auto member) {
    const Tensor& first = samples.front().*member;
    Shape shape = first.shape();
    Eigen::VectorXd v(static_cast<Index>(samples.size()) * first.numel());
    for (size_t i = 0; i < samples.size(); ++i) {
      const Tensor& t = samples[i].*member;
      if (t.shape() != shape) throw ShapeError("make_batch: samples differ in shape");
      v.segment(static_cast<Index>(i) * first.numel(), first.numel()) = t.values();
    }
    shape.insert(shape.begin(), static_cast<Index>(samples.size()));
    return Tensor::from(shape, v);
  };
  return {stack(&CompositeSample::image), stack(&CompositeSample::fg), stack(&CompositeSample::bg),
          stack(&CompositeSample::alpha)};
}

LossReport total_loss(const AlphaPrediction& preds, const Batch& batch, const LossWeights& w) {
  const int stages = static_cast<int>(preds.per_stage.size());
  if (stages < 1) throw std::invalid_argument("total_loss: no predictions");
  if (!w.alpha.empty() && static_cast<int>(w.alpha.size()) != stages - 1) {
    throw std::invalid_argument("total_loss: expected " + std::to_string(stages - 1) + " alpha-loss weights");
  }
  const std::vector<Tensor> targets = build_pyramid(batch.alpha, stages);
  LossReport r;
  Tensor total;
  for (int m = 1; m <= stages; ++m) {
    Tensor la = alpha_loss(preds.per_stage[m - 1], targets[m - 1]);
    r.alpha.push_back(la);
    Tensor term = m < stages ? scale(la, w.alpha_weight(m)) : la;
    total = total.defined() ? total + term : term;
  }
  const Tensor& final = preds.final();
  r.comp = comp_loss(final, batch.image, batch.fg, batch.bg);
  r.grad = grad_loss(final, batch.alpha);
  r.total = total + scale(r.comp, w.comp) + scale(r.grad, w.grad);
  return r;
}

}  // namespace casdgr::loss
