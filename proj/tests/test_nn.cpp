#include "casdgr/nn.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

using namespace casdgr;
using casdgr::testing::gradient_check;
using casdgr::testing::project;
using casdgr::testing::random_tensor;

namespace {

std::vector<Tensor> tensors(const nn::ParamList& ps) {
  std::vector<Tensor> out;
  for (const auto& p : ps) out.push_back(p.tensor);
  return out;
}

void randomize(nn::ParamList& ps, Rng& rng, double lo = -0.5, double hi = 0.5) {
  for (auto& p : ps) {
    for (Index i = 0; i < p.tensor.numel(); ++i) p.tensor.mutable_data()[i] = rng.uniform(lo, hi);
  }
}

}  // namespace

TEST(Resample, DownUpShapes) {
  const Tensor x = Tensor::zeros({1, 2, 64, 64});
  const Tensor d = nn::downsample2(x);
  EXPECT_EQ(d.shape(), (Shape{1, 2, 32, 32}));
  EXPECT_EQ(nn::upsample2(d).shape(), (Shape{1, 2, 64, 64}));
  const Tensor q = nn::downsample2(Tensor::from({1, 1, 2, 2}, std::vector<double>{0, 1, 2, 3}));
  EXPECT_DOUBLE_EQ(q[0], 1.5);
}

TEST(ConvBlock, ZeroAffineGivesZero) {
  Rng rng(1);
  nn::ConvBlock b = nn::ConvBlock::create(3, 8, 1, rng);
  b.gamma.mutable_data().setZero();
  b.beta.mutable_data().setZero();
  const Tensor y = b(random_tensor({2, 3, 5, 5}, rng, -1, 1, false));
  EXPECT_EQ(y.shape(), (Shape{2, 8, 5, 5}));
  EXPECT_EQ(y.values(), Eigen::VectorXd::Zero(y.numel()));
}

TEST(ConvBlock, PreservesResolutionWithDilation) {
  Rng rng(2);
  for (int d : {1, 2, 3}) {
    const nn::ConvBlock b = nn::ConvBlock::create(2, 4, d, rng);
    EXPECT_EQ(b(Tensor::zeros({1, 2, 7, 9})).shape(), (Shape{1, 4, 7, 9}));
  }
}

TEST(ConvBlock, Gradients) {
  Rng rng(3);
  nn::ConvBlock b = nn::ConvBlock::create(2, 4, 2, rng);
  b.group_size = 2;
  nn::ParamList ps;
  b.collect("b", ps);
  randomize(ps, rng);
  Tensor x = random_tensor({2, 2, 5, 4}, rng);
  auto inputs = tensors(ps);
  inputs.push_back(x);
  EXPECT_LT(gradient_check([&] { return project(b(x)); }, inputs), 1e-4);
}

TEST(Rsu, ChannelPlanAndShapes) {
  Rng rng(4);
  nn::RsuConfig c{8, 16, nn::RsuConfig::default_mid(16), 3};
  const nn::RsuBlock r = nn::RsuBlock::create(c, rng);
  EXPECT_EQ(c.mid_channels, 8);
  EXPECT_EQ(nn::RsuConfig::default_mid(6), 4);
  EXPECT_EQ(r.encoder.size(), 3u);
  EXPECT_EQ(r.decoder.size(), 3u);
  EXPECT_EQ(r.bottom.size(), 2u);
  EXPECT_EQ(r.encoder[0].conv.in_channels(), 16);
  EXPECT_EQ(r.encoder[0].conv.out_channels(), 8);
  EXPECT_EQ(r.decoder[0].conv.in_channels(), 16);
  EXPECT_EQ(r.decoder[0].conv.out_channels(), 16);
  EXPECT_EQ(r.decoder[2].conv.out_channels(), 8);
  EXPECT_EQ(r.bottom[0].dilation(), 2);
  EXPECT_EQ(r(Tensor::zeros({1, 8, 16, 8})).shape(), (Shape{1, 16, 16, 8}));
  EXPECT_THROW(r(Tensor::zeros({1, 8, 12, 12})), ShapeError);
}

TEST(Rsu, ZeroPathLeavesResidualPlusDecoderBias) {
  // Every conv zero, residual identity: output = x + relu(beta of the last decoder block).
  Rng rng(5);
  nn::RsuBlock r = nn::RsuBlock::create({4, 4, 4, 2}, rng);
  nn::ParamList ps;
  r.collect("rsu", ps);
  for (auto& p : ps) {
    const std::string& n = p.name;
    if (n.ends_with(".gn.gamma")) {
      p.tensor.mutable_data().setOnes();
    } else if (n.ends_with(".gn.beta")) {
      for (Index i = 0; i < p.tensor.numel(); ++i) p.tensor.mutable_data()[i] = rng.uniform(-1, 1);
    } else {
      p.tensor.mutable_data().setZero();
    }
  }
  for (Index c = 0; c < 4; ++c) r.residual.weight.mutable_data()[c * 4 + c] = 1.0;
  const Tensor x = random_tensor({2, 4, 8, 8}, rng, -1, 1, false);
  const Tensor y = r(x);
  const Eigen::VectorXd& beta = r.decoder[0].beta.values();
  for (Index i = 0; i < y.numel(); ++i) {
    const Index c = (i / 64) % 4;
    EXPECT_NEAR(y[i], x[i] + std::max(beta[c], 0.0), 1e-12);
  }
}

TEST(Rsu, Gradients) {
  Rng rng(6);
  nn::RsuBlock r = nn::RsuBlock::create({2, 4, 4, 1}, rng);
  nn::ParamList ps;
  r.collect("rsu", ps);
  randomize(ps, rng);
  Tensor x = random_tensor({1, 2, 4, 4}, rng);
  auto inputs = tensors(ps);
  inputs.push_back(x);
  EXPECT_LT(gradient_check([&] { return project(r(x)); }, inputs), 1e-4);
}

TEST(Params, NamesAreUniqueAndCountsAdd) {
  Rng rng(7);
  const nn::RsuBlock r = nn::RsuBlock::create({3, 8, 4, 2}, rng);
  nn::ParamList ps;
  r.collect("rsu", ps);
  std::set<std::string> names;
  Index total = 0;
  for (const auto& p : ps) {
    EXPECT_TRUE(names.insert(p.name).second) << p.name;
    total += p.tensor.numel();
  }
  EXPECT_EQ(nn::count(ps), total);
  EXPECT_TRUE(names.count("rsu.in.conv.weight"));
  EXPECT_TRUE(names.count("rsu.residual.weight"));
}

TEST(Init, XavierBoundsAndDeterminism) {
  Rng a(9), b(9);
  Tensor w1 = Tensor::zeros({16, 8, 3, 3}, true), w2 = Tensor::zeros({16, 8, 3, 3}, true);
  nn::xavier_uniform(w1, 8 * 9, 16 * 9, a);
  nn::xavier_uniform(w2, 8 * 9, 16 * 9, b);
  EXPECT_EQ(w1.values(), w2.values());
  const double bound = std::sqrt(6.0 / (8 * 9 + 16 * 9));
  EXPECT_LE(w1.values().cwiseAbs().maxCoeff(), bound);
  EXPECT_GT(w1.values().cwiseAbs().maxCoeff(), 0.8 * bound);
}
