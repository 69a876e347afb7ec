#include "casdgr/data.hpp"

#include "casdgr/image_io.hpp"
#include "casdgr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

namespace casdgr::data {

namespace {

using Planes = Eigen::VectorXd;  // C x H x W, row-major

void check_image(const Tensor& t, Index channels, const char* what) {
  if (t.ndim() != 3 || t.dim(0) != channels) {
    throw std::invalid_argument(std::string(what) + " must be " + std::to_string(channels) + " x H x W, got " +
                                to_string(t.shape()));
  }
  if (t.numel() > 0 && (t.values().minCoeff() < 0.0 || t.values().maxCoeff() > 1.0)) {
    throw std::invalid_argument(std::string(what) + " has values outside [0, 1]");
  }
}

Planes blend(const Planes& fg, const Planes& bg, const Planes& alpha, Index hw) {
  Planes out(fg.size());
  for (Index c = 0; c < 3; ++c) {
    out.segment(c * hw, hw) = (alpha.array() * fg.segment(c * hw, hw).array() +
                               (1.0 - alpha.array()) * bg.segment(c * hw, hw).array())
                                  .matrix();
  }
  return out;
}

Tensor resize_planes(const Tensor& t, Index target) {
  Tensor batched = reshape(t, {1, t.dim(0), t.dim(1), t.dim(2)});
  Tensor r = bilinear_resize(batched, target, target);
  // Convex combinations, but rounding can step a hair outside [0, 1].
  return Tensor::from({t.dim(0), target, target}, r.values().cwiseMax(0.0).cwiseMin(1.0).eval());
}

Tensor crop_planes(const Tensor& t, Index top, Index left, Index side) {
  const Index c = t.dim(0), h = t.dim(1), w = t.dim(2);
  Eigen::VectorXd v(c * side * side);
  for (Index ch = 0; ch < c; ++ch) {
    for (Index y = 0; y < side; ++y) {
      v.segment((ch * side + y) * side, side) = t.values().segment((ch * h + top + y) * w + left, side);
    }
  }
  return Tensor::from({c, side, side}, v);
}

Tensor flip_planes(const Tensor& t) {
  const Index c = t.dim(0), h = t.dim(1), w = t.dim(2);
  Eigen::VectorXd v(t.numel());
  for (Index row = 0; row < c * h; ++row) v.segment(row * w, w) = t.values().segment(row * w, w).reverse();
  return Tensor::from(t.shape(), v);
}

// Pixelwise photometric map shared by F and B so the composite stays exact.
Tensor jitter_planes(const Tensor& t, const Jitter& j) {
  const Index hw = t.dim(1) * t.dim(2);
  Eigen::VectorXd v = t.values();
  for (Index p = 0; p < hw; ++p) {
    double rgb[3];
    for (int c = 0; c < 3; ++c) {
      double x = v[c * hw + p] * j.brightness;
      rgb[c] = (x - 0.5) * j.contrast + 0.5;
    }
    const double gray = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
    for (int c = 0; c < 3; ++c) v[c * hw + p] = std::clamp(gray + (rgb[c] - gray) * j.saturation, 0.0, 1.0);
  }
  return Tensor::from(t.shape(), v);
}

}  // namespace

CompositeSample composite(const Tensor& fg, const Tensor& bg, const Tensor& alpha) {
  check_image(fg, 3, "foreground");
  check_image(bg, 3, "background");
  check_image(alpha, 1, "alpha");
  if (fg.shape() != bg.shape() || alpha.dim(1) != fg.dim(1) || alpha.dim(2) != fg.dim(2)) {
    throw std::invalid_argument("composite: foreground, background and alpha extents differ");
  }
  const Index hw = fg.dim(1) * fg.dim(2);
  return {Tensor::from(fg.shape(), blend(fg.values(), bg.values(), alpha.values(), hw)), fg, bg, alpha};
}

double composite_residual(const CompositeSample& s) {
  const Index hw = s.alpha.numel();
  return (s.image.values() - blend(s.fg.values(), s.bg.values(), s.alpha.values(), hw)).cwiseAbs().maxCoeff();
}

AugmentSpec AugmentSpec::for_resolution(Index target) {
  AugmentSpec s;
  s.target = target;
  s.crop_lo = target;
  s.crop_hi = (target * 800 + 256) / 512;
  return s;
}

AugmentSpec AugmentSpec::identity(Index size) {
  AugmentSpec s;
  s.crop_lo = s.crop_hi = s.target = size;
  s.flip_prob = 0.0;
  s.jitter_lo = s.jitter_hi = 1.0;
  return s;
}

CompositeSample crop_resize(const CompositeSample& s, Index top, Index left, Index side, Index target) {
  const Index h = s.alpha.dim(1), w = s.alpha.dim(2);
  if (top < 0 || left < 0 || side < 1 || top + side > h || left + side > w) {
    throw std::invalid_argument("crop window outside the source image");
  }
  auto f = [&](const Tensor& t) {
    Tensor c = (top == 0 && left == 0 && side == h && side == w) ? t : crop_planes(t, top, left, side);
    return side == target ? c : resize_planes(c, target);
  };
  Tensor fg = f(s.fg), bg = f(s.bg), alpha = f(s.alpha);
  return composite(fg, bg, alpha);
}

CompositeSample flip_horizontal(const CompositeSample& s) {
  return {flip_planes(s.image), flip_planes(s.fg), flip_planes(s.bg), flip_planes(s.alpha)};
}

CompositeSample apply_jitter(const CompositeSample& s, const Jitter& j) {
  if (j.brightness == 1.0 && j.contrast == 1.0 && j.saturation == 1.0) return s;
  return composite(jitter_planes(s.fg, j), jitter_planes(s.bg, j), s.alpha);
}

CompositeSample augment(const CompositeSample& s, const AugmentSpec& spec, Rng& rng) {
  const Index h = s.alpha.dim(1), w = s.alpha.dim(2);
  const Index limit = std::min(h, w);
  if (limit < spec.crop_lo) {
    throw std::invalid_argument("source " + std::to_string(h) + "x" + std::to_string(w) + " smaller than crop minimum " +
                                std::to_string(spec.crop_lo));
  }
  const Index hi = std::min(spec.crop_hi, limit);
  const Index side = spec.crop_lo + static_cast<Index>(rng.below(static_cast<std::uint64_t>(hi - spec.crop_lo + 1)));
  const Index top = static_cast<Index>(rng.below(static_cast<std::uint64_t>(h - side + 1)));
  const Index left = static_cast<Index>(rng.below(static_cast<std::uint64_t>(w - side + 1)));
  const bool flip = rng.bernoulli(spec.flip_prob);
  Jitter j;
  j.brightness = rng.uniform(spec.jitter_lo, spec.jitter_hi);
  j.contrast = rng.uniform(spec.jitter_lo, spec.jitter_hi);
  j.saturation = rng.uniform(spec.jitter_lo, spec.jitter_hi);

  CompositeSample out = crop_resize(s, top, left, side, spec.target);
  if (flip) out = flip_horizontal(out);
  return apply_jitter(out, j);
}

CompositeSample resize_sample(const CompositeSample& s, Index target) {
  return crop_resize(s, 0, 0, std::min(s.alpha.dim(1), s.alpha.dim(2)), target);
}

// ---------------------------------------------------------------------------
// Procedural corpus

namespace {

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h = (h - std::floor(h)) * 6.0;
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  const double table[6][3] = {{v, t, p}, {q, v, p}, {p, v, t}, {p, q, v}, {t, p, v}, {v, p, q}};
  for (int c = 0; c < 3; ++c) rgb[c] = table[sector][c];
}

struct Wave {
  double fy, fx, phase, amp;
};

std::vector<Wave> random_waves(Rng& rng, int n, double max_freq, double amp) {
  std::vector<Wave> w;
  for (int i = 0; i < n; ++i) {
    w.push_back({rng.uniform(-max_freq, max_freq), rng.uniform(-max_freq, max_freq),
                 rng.uniform(0, 2 * std::numbers::pi), amp * rng.uniform(0.3, 1.0)});
  }
  return w;
}

double eval_waves(const std::vector<Wave>& ws, double y, double x) {
  double s = 0;
  for (const auto& w : ws) s += w.amp * std::sin(w.fy * y + w.fx * x + w.phase);
  return s;
}

Tensor make_foreground(Index n, Rng& rng) {
  const double hue = rng.uniform();
  const double sat = rng.uniform(0.75, 1.0);
  const double val = rng.uniform(0.55, 0.9);
  const auto shade = random_waves(rng, 2, 6.0 / static_cast<double>(n), 0.12);
  const double hue_drift = rng.uniform(-0.08, 0.08);
  const Index hw = n * n;
  Eigen::VectorXd v(3 * hw);
  for (Index y = 0; y < n; ++y) {
    for (Index x = 0; x < n; ++x) {
      double rgb[3];
      const double t = static_cast<double>(y + x) / static_cast<double>(2 * n);
      hsv_to_rgb(hue + hue_drift * t, sat, std::clamp(val + eval_waves(shade, y, x), 0.0, 1.0), rgb);
      for (int c = 0; c < 3; ++c) v[c * hw + y * n + x] = rgb[c];
    }
  }
  return Tensor::from({3, n, n}, v);
}

Tensor make_background(Index n, Rng& rng) {
  const double hue = rng.uniform();
  const double sat = rng.uniform(0.0, 0.2);
  const double base = rng.uniform(0.25, 0.75);
  const auto waves = random_waves(rng, 4, 10.0 / static_cast<double>(n), 0.15);
  const double gy = rng.uniform(-0.2, 0.2), gx = rng.uniform(-0.2, 0.2);
  const Index hw = n * n;
  Eigen::VectorXd v(3 * hw);
  for (Index y = 0; y < n; ++y) {
    for (Index x = 0; x < n; ++x) {
      const double u = static_cast<double>(y) / n - 0.5, w = static_cast<double>(x) / n - 0.5;
      const double value = base + gy * u + gx * w + eval_waves(waves, y, x) + 0.03 * rng.normal();
      double rgb[3];
      hsv_to_rgb(hue, sat, std::clamp(value, 0.0, 1.0), rgb);
      for (int c = 0; c < 3; ++c) v[c * hw + y * n + x] = std::clamp(rgb[c], 0.0, 1.0);
    }
  }
  return Tensor::from({3, n, n}, v);
}

double segment_distance(double py, double px, double ay, double ax, double by, double bx) {
  const double dy = by - ay, dx = bx - ax;
  const double len2 = dy * dy + dx * dx;
  double t = len2 > 0 ? ((py - ay) * dy + (px - ax) * dx) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ey = ay + t * dy - py, ex = ax + t * dx - px;
  return std::sqrt(ey * ey + ex * ex);
}

Tensor make_alpha(Index n, Rng& rng) {
  const double size = static_cast<double>(n);
  Eigen::VectorXd a = Eigen::VectorXd::Zero(n * n);

  struct Ellipse {
    double cy, cx, ry, rx, angle, band;
  };
  std::vector<Ellipse> blobs;
  const int n_blobs = 1 + static_cast<int>(rng.below(2));
  for (int i = 0; i < n_blobs; ++i) {
    blobs.push_back({rng.uniform(0.3, 0.7) * size, rng.uniform(0.3, 0.7) * size, rng.uniform(0.12, 0.3) * size,
                     rng.uniform(0.12, 0.3) * size, rng.uniform(0, std::numbers::pi), rng.uniform(2.0, 4.0)});
  }
  for (const auto& e : blobs) {
    const double ca = std::cos(e.angle), sa = std::sin(e.angle);
    for (Index y = 0; y < n; ++y) {
      for (Index x = 0; x < n; ++x) {
        const double dy = y - e.cy, dx = x - e.cx;
        const double u = (ca * dy + sa * dx) / e.ry, v = (-sa * dy + ca * dx) / e.rx;
        const double signed_px = (std::sqrt(u * u + v * v) - 1.0) * std::min(e.ry, e.rx);
        const double val = std::clamp(0.5 - signed_px / e.band, 0.0, 1.0);
        a[y * n + x] = std::max(a[y * n + x], val);
      }
    }
  }

  // Filaments: quadratic Bezier strands leaving the first blob, 1-3 px wide.
  const int n_strands = 3 + static_cast<int>(rng.below(6));
  const Ellipse& root = blobs.front();
  for (int s = 0; s < n_strands; ++s) {
    const double theta = rng.uniform(0, 2 * std::numbers::pi);
    const double r0 = 0.8 * std::min(root.ry, root.rx);
    const double len = rng.uniform(0.2, 0.45) * size;
    const double p0y = root.cy + r0 * std::sin(theta), p0x = root.cx + r0 * std::cos(theta);
    const double bend = rng.uniform(-0.6, 0.6);
    const double p2y = p0y + len * std::sin(theta + bend), p2x = p0x + len * std::cos(theta + bend);
    const double p1y = 0.5 * (p0y + p2y) + rng.uniform(-0.2, 0.2) * len;
    const double p1x = 0.5 * (p0x + p2x) + rng.uniform(-0.2, 0.2) * len;
    const double half_width = 0.5 * rng.uniform(1.0, 3.0);
    const double opacity = rng.uniform(0.6, 1.0);
    constexpr int kPieces = 24;
    std::vector<std::array<double, 2>> pts;
    for (int i = 0; i <= kPieces; ++i) {
      const double t = static_cast<double>(i) / kPieces;
      pts.push_back({(1 - t) * (1 - t) * p0y + 2 * (1 - t) * t * p1y + t * t * p2y,
                     (1 - t) * (1 - t) * p0x + 2 * (1 - t) * t * p1x + t * t * p2x});
    }
    for (Index y = 0; y < n; ++y) {
      for (Index x = 0; x < n; ++x) {
        double d = std::numeric_limits<double>::infinity();
        for (int i = 0; i < kPieces; ++i) {
          d = std::min(d, segment_distance(y, x, pts[i][0], pts[i][1], pts[i + 1][0], pts[i + 1][1]));
        }
        // One pixel of linear falloff outside the strand core.
        const double val = opacity * std::clamp(half_width + 0.5 - d, 0.0, 1.0);
        a[y * n + x] = std::max(a[y * n + x], val);
      }
    }
  }
  return Tensor::from({1, n, n}, a);
}

}  // namespace

Index synth_foreground_count(const SynthSpec& spec) {
  if (spec.count <= 0) return 0;
  const Index per = std::max<Index>(spec.bg_per_fg, 1);
  return (spec.count + per - 1) / per;
}

std::vector<SynthItem> synthesize(const SynthSpec& spec) {
  if (spec.size < 8) throw std::invalid_argument("synthesize: image size must be >= 8");
  const Index per = std::max<Index>(spec.bg_per_fg, 1);
  std::vector<SynthItem> items;
  Tensor fg, alpha;
  for (Index i = 0; i < spec.count; ++i) {
    const Index fg_id = i / per;
    if (i % per == 0) {
      Rng rng = Rng::derive(spec.seed, static_cast<std::uint64_t>(fg_id), 0);
      fg = make_foreground(spec.size, rng);
      alpha = make_alpha(spec.size, rng);
    }
    Rng bg_rng = Rng::derive(spec.seed, static_cast<std::uint64_t>(i), 1);
    items.push_back({fg_id, fg, make_background(spec.size, bg_rng), alpha});
  }
  return items;
}

double soft_fraction(const Tensor& alpha, double lo, double hi) {
  if (alpha.numel() == 0) return 0.0;
  const auto& v = alpha.values();
  const Index n = ((v.array() > lo) && (v.array() < hi)).count();
  return static_cast<double>(n) / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// On-disk layout

namespace {

std::string padded(Index i, int width) {
  std::ostringstream os;
  os << std::setw(width) << std::setfill('0') << i;
  return os.str();
}

int id_width(Index count) {
  int w = 4;
  for (Index lim = 10000; count > lim; lim *= 10) ++w;
  return w;
}

}  // namespace

std::vector<ManifestEntry> write_dataset(const std::filesystem::path& root, const std::vector<SynthItem>& items) {
  namespace fs = std::filesystem;
  for (const char* d : {"fg", "bg", "alpha"}) fs::create_directories(root / d);
  Index max_fg = 0;
  for (const auto& it : items) max_fg = std::max(max_fg, it.fg_id + 1);
  const int width = id_width(std::max<Index>(static_cast<Index>(items.size()), max_fg));

  std::vector<ManifestEntry> entries;
  Index last_fg = -1;
  for (size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    const std::string fg_name = padded(it.fg_id, width) + ".png";
    const std::string id = padded(static_cast<Index>(i), width);
    if (it.fg_id != last_fg) {
      io::save_image(it.fg, root / "fg" / fg_name);
      io::save_image(it.alpha, root / "alpha" / fg_name);
      last_fg = it.fg_id;
    }
    io::save_image(it.bg, root / "bg" / (id + ".png"));
    entries.push_back({id, "fg/" + fg_name, "bg/" + id + ".png", "alpha/" + fg_name});
  }
  write_manifest(root / kManifestName, entries);
  return entries;
}

void write_manifest(const std::filesystem::path& file, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw io::IoError("cannot write " + file.string());
  out << "# id\tfg\tbg\talpha\n";
  for (const auto& e : entries) out << e.id << '\t' << e.fg << '\t' << e.bg << '\t' << e.alpha << '\n';
  if (!out) throw io::IoError("failed writing " + file.string());
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& root) {
  const auto file = root / kManifestName;
  std::ifstream in(file);
  if (!in) throw io::IoError("cannot open manifest " + file.string());
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ManifestEntry e;
    if (!std::getline(ls, e.id, '\t') || !std::getline(ls, e.fg, '\t') || !std::getline(ls, e.bg, '\t') ||
        !std::getline(ls, e.alpha)) {
      throw io::IoError(file.string() + ":" + std::to_string(lineno) + ": expected 4 tab-separated fields");
    }
    out.push_back(std::move(e));
  }
  return out;
}

CompositeSample load_sample(const std::filesystem::path& root, const ManifestEntry& e) {
  Tensor fg = io::load_image(root / e.fg);
  Tensor bg = io::load_image(root / e.bg);
  Tensor alpha = io::load_image(root / e.alpha);
  if (fg.dim(0) != 3 || bg.dim(0) != 3 || alpha.dim(0) != 1) {
    throw io::IoError("sample " + e.id + ": expected RGB foreground/background and grayscale alpha");
  }
  return composite(fg, bg, alpha);
}

Split split_by_foreground(const std::vector<ManifestEntry>& entries, double holdout_fraction) {
  std::vector<std::string> fgs;
  for (const auto& e : entries) {
    if (std::find(fgs.begin(), fgs.end(), e.fg) == fgs.end()) fgs.push_back(e.fg);
  }
  std::sort(fgs.begin(), fgs.end());
  const auto held = static_cast<size_t>(std::llround(holdout_fraction * static_cast<double>(fgs.size())));
  const size_t first_held = fgs.size() - std::min(held, fgs.size());
  Split s;
  for (size_t i = 0; i < entries.size(); ++i) {
    const auto pos = static_cast<size_t>(std::find(fgs.begin(), fgs.end(), entries[i].fg) - fgs.begin());
    (pos >= first_held ? s.heldout : s.train).push_back(i);
  }
  return s;
}

std::vector<size_t> epoch_order(size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  Rng rng(seed + epoch);
  rng.shuffle(order);
  return order;
}

std::uint64_t dataset_hash(const std::filesystem::path& root) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto feed = [&](const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw io::IoError("cannot read " + file.string());
    for (std::istreambuf_iterator<char> it(in), end; it != end; ++it) {
      h ^= static_cast<unsigned char>(*it);
      h *= 0x100000001b3ull;
    }
  };
  feed(root / kManifestName);
  std::set<std::string> seen;
  for (const auto& e : read_manifest(root)) {
    for (const std::string* f : {&e.fg, &e.bg, &e.alpha}) {
      if (seen.insert(*f).second) feed(root / *f);
    }
  }
  return h;
}

}  // namespace casdgr::data
