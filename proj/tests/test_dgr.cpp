#include "casdgr/dgr.hpp"

#include "dgr_oracle.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <numeric>

using namespace casdgr;
using casdgr::testing::gradient_check;
using casdgr::testing::project;
using casdgr::testing::random_tensor;

namespace {

std::vector<double> as_vector(const Tensor& t) { return {t.values().data(), t.values().data() + t.numel()}; }

dgr::DgrParams random_params(const dgr::DgrConfig& cfg, Rng& rng, double offset_scale) {
  dgr::DgrParams p = dgr::DgrParams::create(cfg, rng);
  nn::ParamList ps;
  p.collect("dgr", ps);
  for (auto& t : ps) {
    const bool is_offset = t.name.starts_with("dgr.offset");
    const double s = is_offset ? offset_scale : 0.6;
    for (Index i = 0; i < t.tensor.numel(); ++i) t.tensor.mutable_data()[i] = rng.uniform(-s, s);
  }
  return p;
}

}  // namespace

TEST(Layout, BaseOffsets) {
  EXPECT_EQ(dgr::base_layout(1), (std::vector<Offset2>{{0, 0}}));
  EXPECT_EQ(dgr::base_layout(5), (std::vector<Offset2>{{0, 0}, {-1, 0}, {1, 0}, {0, -1}, {0, 1}}));
  const auto nine = dgr::base_layout(9);
  std::vector<Offset2> grid;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) grid.push_back({dy, dx});
  EXPECT_EQ(nine, grid);
  const auto thirteen = dgr::base_layout(13);
  ASSERT_EQ(thirteen.size(), 13u);
  EXPECT_EQ(std::vector<Offset2>(thirteen.begin(), thirteen.begin() + 9), grid);
  EXPECT_EQ(thirteen[9], (Offset2{-2, -2}));
  EXPECT_EQ(thirteen[12], (Offset2{-2, 1}));
  EXPECT_THROW(dgr::base_layout(0), std::invalid_argument);
}

TEST(Dgr, FreshParamsSampleBaseLayout) {
  Rng rng(1);
  const dgr::DgrParams p = dgr::DgrParams::create({5, 1, 4, 4}, rng);
  const Index h = 3, w = 5;
  const Tensor x = random_tensor({1, 4, h, w}, rng, -1, 1, false);
  const auto field = dgr::predict_neighbors(p, x);
  ASSERT_EQ(field.coords.shape(), (Shape{1, 5, 2, h, w}));
  for (Index k = 0; k < 5; ++k)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) {
        const Index ni = std::clamp<Index>(i + p.layout[k][0], 0, h - 1);
        const Index nj = std::clamp<Index>(j + p.layout[k][1], 0, w - 1);
        EXPECT_EQ(field.coords[((k * 2) * h + i) * w + j], ni);
        EXPECT_EQ(field.coords[((k * 2 + 1) * h + i) * w + j], nj);
        for (Index c = 0; c < 4; ++c) {
          EXPECT_EQ(field.features[((k * 4 + c) * h + i) * w + j], x[(c * h + ni) * w + nj]);
        }
      }
}

TEST(Dgr, ZeroInputGivesZeroOutput) {
  Rng rng(2);
  for (Index proj : {4, 6}) {
    const dgr::DgrParams p = random_params({5, 2, 4, proj}, rng, 0.3);
    const Tensor y = dgr::forward(p, Tensor::zeros({2, 4, 4, 4}));
    EXPECT_EQ(y.shape(), (Shape{2, 4, 4, 4}));
    if (proj == 4) EXPECT_EQ(y.values(), Eigen::VectorXd::Zero(y.numel()));
  }
}

TEST(Dgr, MatchesDenseWindowOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 6; ++trial) {
    const Index c = 1 + static_cast<Index>(rng.below(8));
    const Index h = 1 + static_cast<Index>(rng.below(8)), w = 1 + static_cast<Index>(rng.below(8));
    const dgr::DgrParams p = dgr::DgrParams::create({9, 1, c, c}, rng);
    const Tensor x = random_tensor({1, c, h, w}, rng, -2, 2, false);
    const auto ref = casdgr::testing::window_attention(as_vector(x), c, h, w, as_vector(p.iterations[0].query),
                                                        as_vector(p.iterations[0].key), c);
    const Tensor y = dgr::forward(p, x);
    double worst = 0;
    for (Index i = 0; i < y.numel(); ++i) worst = std::max(worst, std::abs(y[i] - ref[static_cast<size_t>(i)]));
    EXPECT_LE(worst, 1e-9) << "C=" << c << " H=" << h << " W=" << w;
  }
}

TEST(Dgr, AttentionWeightsAreADistribution) {
  Rng rng(4);
  const dgr::DgrParams p = random_params({9, 1, 6, 5}, rng, 0.8);
  const Tensor x = random_tensor({2, 6, 5, 4}, rng, -2, 2, false);
  const auto field = dgr::predict_neighbors(p, x);
  const Tensor beta = dgr::refine_weights(p.iterations[0].query, p.iterations[0].key, x, field);
  ASSERT_EQ(beta.shape(), (Shape{2, 9, 5, 4}));
  EXPECT_GE(beta.values().minCoeff(), 0.0);
  for (Index n = 0; n < 2; ++n)
    for (Index q = 0; q < 20; ++q) {
      double t = 0;
      for (Index k = 0; k < 9; ++k) t += beta[(n * 9 + k) * 20 + q];
      EXPECT_NEAR(t, 1.0, 1e-9);
    }
}

TEST(Dgr, SlotPermutationInvariance) {
  Rng rng(5);
  const Index k = 5, c = 3;
  const dgr::DgrParams p = random_params({k, 2, c, 4}, rng, 0.7);
  std::vector<Index> perm(k);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  dgr::DgrParams q = dgr::DgrParams::create(p.config, rng);
  // Copy every weight, then relabel slots: new slot s is old slot perm[s].
  nn::ParamList from, to;
  p.collect("d", from);
  q.collect("d", to);
  for (size_t i = 0; i < from.size(); ++i) to[i].tensor.mutable_data() = from[i].tensor.values();
  const Index per_out = c * 9;
  for (Index s = 0; s < k; ++s) {
    q.layout[s] = p.layout[perm[s]];
    for (Index a = 0; a < 2; ++a) {
      q.offset.weight.mutable_data().segment((2 * s + a) * per_out, per_out) =
          p.offset.weight.values().segment((2 * perm[s] + a) * per_out, per_out);
      q.offset.bias.mutable_data()[2 * s + a] = p.offset.bias[2 * perm[s] + a];
    }
  }
  const Tensor x = random_tensor({1, c, 6, 5}, rng, -1, 1, false);
  const Tensor a = dgr::forward(p, x);
  const Tensor b = dgr::forward(q, x);
  // The offset conv is a GEMM whose rounding may depend on output-row position.
  EXPECT_LT((a.values() - b.values()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Dgr, AttentionSlotPermutationIsExact) {
  Rng rng(15);
  const Index k = 9, c = 4, h = 5, w = 6;
  const dgr::DgrParams p = random_params({k, 1, c, 3}, rng, 0.9);
  const Tensor x = random_tensor({2, c, h, w}, rng, -1, 1, false);
  const auto field = dgr::predict_neighbors(p, x);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Index> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    Eigen::VectorXd coords(field.coords.numel()), feats(field.features.numel());
    const Index cs = 2 * h * w, fs = c * h * w;
    for (Index n = 0; n < 2; ++n)
      for (Index s = 0; s < k; ++s) {
        coords.segment((n * k + s) * cs, cs) = field.coords.values().segment((n * k + perm[s]) * cs, cs);
        feats.segment((n * k + s) * fs, fs) = field.features.values().segment((n * k + perm[s]) * fs, fs);
      }
    const dgr::NeighborField shuffled{Tensor::from(field.coords.shape(), coords),
                                      Tensor::from(field.features.shape(), feats)};
    const Tensor a = dgr::refine_step(p.iterations[0].query, p.iterations[0].key, x, field);
    const Tensor b = dgr::refine_step(p.iterations[0].query, p.iterations[0].key, x, shuffled);
    EXPECT_EQ(a.values(), b.values());
  }
}

TEST(Dgr, RefineStepGradients) {
  Rng rng(6);
  const dgr::DgrParams p = random_params({5, 1, 3, 2}, rng, 0.8);
  Tensor x = random_tensor({1, 3, 4, 4}, rng);
  Tensor w1 = p.iterations[0].query, w2 = p.iterations[0].key;
  Tensor ow = p.offset.weight, ob = p.offset.bias;
  EXPECT_LT(gradient_check([&] { return project(dgr::refine_step(w1, w2, x, dgr::predict_neighbors(p, x))); },
                           {x, w1, w2, ow, ob}),
            1e-4);
}

TEST(Dgr, ForwardGradientsWithRestore) {
  Rng rng(7);
  const dgr::DgrParams p = random_params({5, 2, 3, 2}, rng, 0.8);
  nn::ParamList ps;
  p.collect("d", ps);
  std::vector<Tensor> inputs;
  for (const auto& t : ps) inputs.push_back(t.tensor);
  Tensor x = random_tensor({2, 3, 4, 3}, rng);
  inputs.push_back(x);
  EXPECT_LT(gradient_check([&] { return project(dgr::forward(p, x)); }, inputs), 1e-4);
}

TEST(Dgr, ParameterCount) {
  EXPECT_EQ(dgr::count_params({5, 2, 64, 64}), 22154);
  EXPECT_EQ(4 * dgr::count_params({5, 2, 64, 64}), 88616);
  // 9*64*18 + 18 offset, 32*64*2 projections, 32*64 + 64 restore.
  EXPECT_EQ(dgr::count_params({9, 1, 64, 32}), 10386 + 4096 + 2112);
  for (dgr::DgrConfig cfg : {dgr::DgrConfig{5, 2, 64, 64}, dgr::DgrConfig{9, 1, 8, 5}, dgr::DgrConfig{1, 3, 4, 4}}) {
    Rng rng(8);
    nn::ParamList ps;
    dgr::DgrParams::create(cfg, rng).collect("d", ps);
    EXPECT_EQ(nn::count(ps), dgr::count_params(cfg));
  }
}

TEST(Dgr, RejectsBadConfig) {
  EXPECT_THROW((dgr::DgrConfig{0, 1, 4, 4}.validate()), std::invalid_argument);
  EXPECT_THROW((dgr::DgrConfig{5, 0, 4, 4}.validate()), std::invalid_argument);
  Rng rng(9);
  const dgr::DgrParams p = dgr::DgrParams::create({5, 1, 4, 4}, rng);
  EXPECT_THROW(dgr::forward(p, Tensor::zeros({1, 3, 4, 4})), ShapeError);
}
