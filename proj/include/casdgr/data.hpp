#pragma once

#include "casdgr/random.hpp"
#include "casdgr/tensor.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace casdgr {

/// (image, foreground, background, alpha) with image = a F + (1 - a) B.
/// Colour planes are 3 x H x W, alpha is 1 x H x W, all in [0, 1].
struct CompositeSample {
  Tensor image;
  Tensor fg;
  Tensor bg;
  Tensor alpha;
};

namespace data {

/// Builds the composite. Throws std::invalid_argument on shape or range violations.
CompositeSample composite(const Tensor& fg, const Tensor& bg, const Tensor& alpha);

/// max |I - aF - (1 - a)B| over the sample.
double composite_residual(const CompositeSample& s);

struct AugmentSpec {
  Index crop_lo = 512;
  Index crop_hi = 800;
  Index target = 512;
  double flip_prob = 0.5;
  double jitter_lo = 0.8;
  double jitter_hi = 1.2;

  /// Crop range 512..800 scaled to the target resolution.
  static AugmentSpec for_resolution(Index target);
  /// Full-frame crop, no flip, unit jitter.
  static AugmentSpec identity(Index size);
};

struct Jitter {
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
};

CompositeSample crop_resize(const CompositeSample& s, Index top, Index left, Index side, Index target);
CompositeSample flip_horizontal(const CompositeSample& s);
/// Jitters F and B and re-composites; alpha is untouched.
CompositeSample apply_jitter(const CompositeSample& s, const Jitter& j);

/// Random square crop -> resize to target -> optional flip -> photometric jitter.
CompositeSample augment(const CompositeSample& s, const AugmentSpec& spec, Rng& rng);

struct SynthSpec {
  Index count = 200;
  Index size = 64;
  Index bg_per_fg = 8;
  std::uint64_t seed = 0;
};

struct SynthItem {
  Index fg_id = 0;
  Tensor fg, bg, alpha;
};

/// Procedural foregrounds (soft ellipses plus thin hair-like filaments over a
/// saturated colour field) and low-saturation textured backgrounds. Each
/// foreground is paired with `bg_per_fg` backgrounds. Deterministic in seed.
std::vector<SynthItem> synthesize(const SynthSpec& spec);

Index synth_foreground_count(const SynthSpec& spec);

/// Fraction of alpha values strictly inside (lo, hi).
double soft_fraction(const Tensor& alpha, double lo = 0.05, double hi = 0.95);

struct ManifestEntry {
  std::string id;
  std::string fg;     // paths relative to the dataset root
  std::string bg;
  std::string alpha;
};

inline constexpr const char* kManifestName = "manifest.txt";

/// Writes <root>/{fg,bg,alpha}/NNNN.png and the manifest. Foreground and
/// alpha files are shared by every sample using that foreground.
std::vector<ManifestEntry> write_dataset(const std::filesystem::path& root, const std::vector<SynthItem>& items);

void write_manifest(const std::filesystem::path& file, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& root);

/// 64-bit FNV-1a over the manifest followed by every file it references, in
/// manifest order (shared files are hashed once).
std::uint64_t dataset_hash(const std::filesystem::path& root);

/// Loads one entry and composites it.
CompositeSample load_sample(const std::filesystem::path& root, const ManifestEntry& entry);

/// Samples whose foreground falls in the last `fraction` of foregrounds are
/// held out, so train and held-out share no foreground.
struct Split {
  std::vector<size_t> train;
  std::vector<size_t> heldout;
};
Split split_by_foreground(const std::vector<ManifestEntry>& entries, double holdout_fraction);

/// Visit order for epoch e: a shuffle seeded by (seed + e).
std::vector<size_t> epoch_order(size_t n, std::uint64_t seed, std::uint64_t epoch);

/// Bilinear resize of a C x H x W sample to target x target.
CompositeSample resize_sample(const CompositeSample& s, Index target);

}  // namespace data
}  // namespace casdgr
