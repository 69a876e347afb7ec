#include "casdgr/data.hpp"
#include "casdgr/image_io.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace casdgr;
using casdgr::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("casdgr_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double max_abs_diff(const Tensor& a, const Tensor& b) { return (a.values() - b.values()).cwiseAbs().maxCoeff(); }

CompositeSample random_sample(Index h, Index w, Rng& rng) {
  return data::composite(random_tensor({3, h, w}, rng, 0, 1, false), random_tensor({3, h, w}, rng, 0, 1, false),
                         random_tensor({1, h, w}, rng, 0, 1, false));
}

}  // namespace

TEST(Composite, Blend) {
  Rng rng(1);
  const Tensor f = random_tensor({3, 4, 4}, rng, 0, 1, false), b = random_tensor({3, 4, 4}, rng, 0, 1, false);
  EXPECT_EQ(data::composite(f, b, Tensor::full({1, 4, 4}, 1.0)).image.values(), f.values());
  EXPECT_EQ(data::composite(f, b, Tensor::zeros({1, 4, 4})).image.values(), b.values());
  const CompositeSample s = data::composite(Tensor::from({3, 1, 1}, std::vector<double>{1.0, 0.8, 0.6}),
                                            Tensor::from({3, 1, 1}, std::vector<double>{0.0, 0.2, 0.4}),
                                            Tensor::full({1, 1, 1}, 0.5));
  for (Index c = 0; c < 3; ++c) EXPECT_NEAR(s.image[c], 0.5, 1e-15);
  EXPECT_LT(data::composite_residual(random_sample(5, 6, rng)), 1e-15);
}

TEST(Composite, RejectsBadInput) {
  const Tensor f = Tensor::zeros({3, 4, 4}), a = Tensor::zeros({1, 4, 4});
  EXPECT_THROW(data::composite(f, Tensor::zeros({3, 4, 5}), a), std::invalid_argument);
  EXPECT_THROW(data::composite(f, f, Tensor::zeros({1, 4, 5})), std::invalid_argument);
  EXPECT_THROW(data::composite(f, f, Tensor::full({1, 4, 4}, 1.2)), std::invalid_argument);
  EXPECT_THROW(data::composite(Tensor::full({3, 4, 4}, -0.1), f, a), std::invalid_argument);
}

TEST(Augment, IdentitySpecIsNoOp) {
  Rng rng(2);
  const CompositeSample s = random_sample(16, 16, rng);
  const CompositeSample out = data::augment(s, data::AugmentSpec::identity(16), rng);
  EXPECT_LT(max_abs_diff(out.image, s.image), 1e-15);
  EXPECT_LT(max_abs_diff(out.fg, s.fg), 1e-15);
  EXPECT_LT(max_abs_diff(out.bg, s.bg), 1e-15);
  EXPECT_EQ(out.alpha.values(), s.alpha.values());
}

TEST(Augment, FlipIsInvolution) {
  Rng rng(3);
  const CompositeSample s = random_sample(7, 9, rng);
  const CompositeSample once = data::flip_horizontal(s);
  EXPECT_EQ(once.alpha[0], s.alpha[8]);
  const CompositeSample twice = data::flip_horizontal(once);
  EXPECT_EQ(twice.image.values(), s.image.values());
  EXPECT_EQ(twice.alpha.values(), s.alpha.values());
}

TEST(Augment, KeepsCompositeAndLeavesAlphaGeometricOnly) {
  Rng rng(4);
  const CompositeSample s = random_sample(100, 100, rng);
  const data::AugmentSpec spec = data::AugmentSpec::for_resolution(64);
  EXPECT_EQ(spec.crop_lo, 64);
  EXPECT_EQ(spec.crop_hi, 100);
  data::AugmentSpec geometric = spec;
  geometric.jitter_lo = geometric.jitter_hi = 1.0;
  for (int i = 0; i < 100; ++i) {
    Rng a(1000 + i), b(1000 + i);
    const CompositeSample out = data::augment(s, spec, a);
    const CompositeSample ref = data::augment(s, geometric, b);
    ASSERT_EQ(out.alpha.shape(), (Shape{1, 64, 64}));
    EXPECT_LE(data::composite_residual(out), 1e-3);
    EXPECT_EQ(out.alpha.values(), ref.alpha.values());
    EXPECT_GE(out.alpha.values().minCoeff(), 0.0);
    EXPECT_LE(out.alpha.values().maxCoeff(), 1.0);
    EXPECT_GE(out.image.values().minCoeff(), 0.0);
    EXPECT_LE(out.image.values().maxCoeff(), 1.0);
  }
  EXPECT_THROW(data::augment(random_sample(50, 50, rng), spec, rng), std::invalid_argument);
}

TEST(Augment, JitterChangesColourOnly) {
  Rng rng(5);
  const CompositeSample s = random_sample(8, 8, rng);
  const CompositeSample j = data::apply_jitter(s, {1.1, 0.9, 1.2});
  EXPECT_EQ(j.alpha.values(), s.alpha.values());
  EXPECT_GT(max_abs_diff(j.fg, s.fg), 1e-3);
  EXPECT_LE(data::composite_residual(j), 1e-12);
  const CompositeSample unit = data::apply_jitter(s, {});
  EXPECT_LT(max_abs_diff(unit.fg, s.fg), 1e-15);
}

TEST(Synth, DeterministicAndSoft) {
  data::SynthSpec spec{40, 32, 8, 7};
  const auto a = data::synthesize(spec);
  const auto b = data::synthesize(spec);
  ASSERT_EQ(a.size(), 40u);
  EXPECT_EQ(data::synth_foreground_count(spec), 5);
  std::set<Index> fgs;
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].alpha.values(), b[i].alpha.values());
    EXPECT_EQ(a[i].bg.values(), b[i].bg.values());
    EXPECT_EQ(a[i].alpha.shape(), (Shape{1, 32, 32}));
    EXPECT_GE(data::soft_fraction(a[i].alpha), 0.02);
    EXPECT_EQ(a[i].alpha.values().minCoeff(), 0.0);
    EXPECT_EQ(a[i].alpha.values().maxCoeff(), 1.0);
    EXPECT_LE(data::composite_residual(data::composite(a[i].fg, a[i].bg, a[i].alpha)), 1e-15);
    fgs.insert(a[i].fg_id);
  }
  EXPECT_EQ(fgs.size(), 5u);
  spec.seed = 8;
  EXPECT_NE(data::synthesize(spec)[0].alpha.values(), a[0].alpha.values());
}

TEST(Synth, DatasetOnDiskIsReproducible) {
  const fs::path d1 = temp_dir("synth1"), d2 = temp_dir("synth2");
  const data::SynthSpec spec{16, 32, 4, 3};
  data::write_dataset(d1, data::synthesize(spec));
  data::write_dataset(d2, data::synthesize(spec));
  EXPECT_EQ(slurp(d1 / data::kManifestName), slurp(d2 / data::kManifestName));
  EXPECT_EQ(data::dataset_hash(d1), data::dataset_hash(d2));
  const fs::path d3 = temp_dir("synth3");
  data::write_dataset(d3, data::synthesize({16, 32, 4, 4}));
  EXPECT_NE(data::dataset_hash(d3), data::dataset_hash(d1));
  fs::remove_all(d3);
  const auto entries = data::read_manifest(d1);
  ASSERT_EQ(entries.size(), 16u);
  EXPECT_EQ(entries[0].fg, "fg/0000.png");
  for (const auto& e : entries) {
    EXPECT_EQ(slurp(d1 / e.alpha), slurp(d2 / e.alpha));
    EXPECT_EQ(slurp(d1 / e.bg), slurp(d2 / e.bg));
    const CompositeSample s = data::load_sample(d1, e);
    EXPECT_LE(data::composite_residual(s), 1e-15);
    EXPECT_GE(data::soft_fraction(s.alpha), 0.02);
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(Synth, EmptyCorpus) {
  const fs::path d = temp_dir("empty");
  EXPECT_TRUE(data::write_dataset(d, data::synthesize({0, 32, 8, 1})).empty());
  EXPECT_TRUE(data::read_manifest(d).empty());
  fs::remove_all(d);
}

TEST(Split, ForegroundsAreDisjoint) {
  std::vector<data::ManifestEntry> entries;
  for (int i = 0; i < 40; ++i) {
    const std::string fg = "fg/" + std::to_string(i / 8) + ".png";
    entries.push_back({std::to_string(i), fg, "bg/" + std::to_string(i) + ".png", fg});
  }
  const data::Split s = data::split_by_foreground(entries, 0.2);
  EXPECT_EQ(s.train.size(), 32u);
  EXPECT_EQ(s.heldout.size(), 8u);
  std::set<std::string> train_fg;
  for (size_t i : s.train) train_fg.insert(entries[i].fg);
  for (size_t i : s.heldout) EXPECT_FALSE(train_fg.count(entries[i].fg));
}

TEST(EpochOrder, SeededPermutation) {
  const auto a = data::epoch_order(50, 9, 0), b = data::epoch_order(50, 9, 0), c = data::epoch_order(50, 9, 1);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  // Epoch e under seed s is the same stream as epoch 0 under seed s + e.
  EXPECT_EQ(c, data::epoch_order(50, 10, 0));
  std::vector<size_t> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (size_t i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Png, RoundTrips) {
  const fs::path d = temp_dir("png");
  Rng rng(6);
  const Tensor alpha = random_tensor({1, 9, 11}, rng, 0, 1, false);
  io::save_image(alpha, d / "a8.png", 8);
  const Tensor a8 = io::load_image(d / "a8.png");
  EXPECT_EQ(a8.shape(), alpha.shape());
  EXPECT_LE(max_abs_diff(a8, alpha), 1.0 / 255);
  io::save_image(alpha, d / "a16.png", 16);
  EXPECT_LE(max_abs_diff(io::load_image(d / "a16.png"), alpha), 1.0 / 65535);
  const Tensor rgb = random_tensor({3, 5, 7}, rng, 0, 1, false);
  io::save_image(rgb, d / "rgb.png");
  const Tensor back = io::load_image(d / "rgb.png");
  EXPECT_EQ(back.shape(), (Shape{3, 5, 7}));
  EXPECT_LE(max_abs_diff(back, rgb), 1.0 / 255);
  // Re-saving quantized data is lossless.
  io::save_image(back, d / "rgb2.png");
  EXPECT_EQ(io::load_image(d / "rgb2.png").values(), back.values());
  std::ofstream(d / "junk.png") << "not a png";
  EXPECT_THROW(io::load_image(d / "junk.png"), io::IoError);
  EXPECT_THROW(io::load_image(d / "missing.png"), io::IoError);
  EXPECT_THROW(io::save_image(Tensor::zeros({2, 3, 3}), d / "bad.png"), std::exception);
  fs::remove_all(d);
}
