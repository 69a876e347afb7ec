#include "casdgr/ops.hpp"

#include <algorithm>
#include <numeric>
#include <cmath>

namespace casdgr {

namespace {

using detail::Node;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void require_rank(const Tensor& x, int rank, const char* op) {
  if (x.ndim() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(x.shape()));
  }
}

// Accumulate into an input's grad only when that input participates in the graph.
Eigen::VectorXd* grad_of(Node& self, size_t i) {
  auto& in = *self.inputs[i];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

template <typename F, typename D>
Tensor unary(const char* op, const Tensor& x, F f, D dfdx) {
  Eigen::VectorXd y = x.values().unaryExpr(f);
  return detail::make_result(op, x.shape(), std::move(y), {x}, [dfdx](Node& self) {
    const auto& xv = self.inputs[0]->value;
    self.inputs[0]->grad_buffer().array() += self.grad.array() * xv.unaryExpr(dfdx).array();
  });
}

// Half-pixel-center source taps for one resized axis.
struct LinearTaps {
  std::vector<Index> lo, hi;
  std::vector<double> frac;
};

LinearTaps linear_taps(Index in, Index out) {
  LinearTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    Index lo = std::min<Index>(static_cast<Index>(std::floor(src)), in - 1);
    t.lo[o] = lo;
    t.hi[o] = std::min<Index>(lo + 1, in - 1);
    t.frac[o] = src - static_cast<double>(lo);
  }
  return t;
}

struct BilinearCorner {
  Index y0, y1, x0, x1;
  double fy, fx;
  bool clamped_y, clamped_x;
};

BilinearCorner corner_at(double y, double x, Index h, Index w) {
  BilinearCorner c{};
  c.clamped_y = y < 0 || y > static_cast<double>(h - 1);
  c.clamped_x = x < 0 || x > static_cast<double>(w - 1);
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  c.y0 = std::min<Index>(static_cast<Index>(std::floor(y)), h - 1);
  c.x0 = std::min<Index>(static_cast<Index>(std::floor(x)), w - 1);
  c.y1 = std::min<Index>(c.y0 + 1, h - 1);
  c.x1 = std::min<Index>(c.x0 + 1, w - 1);
  c.fy = y - static_cast<double>(c.y0);
  c.fx = x - static_cast<double>(c.x0);
  return c;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return detail::make_result("add", a.shape(), a.values() + b.values(), {a, b}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) *g += self.grad;
    if (auto* g = grad_of(self, 1)) *g += self.grad;
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  return detail::make_result("sub", a.shape(), a.values() - b.values(), {a, b}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) *g += self.grad;
    if (auto* g = grad_of(self, 1)) *g -= self.grad;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Eigen::VectorXd y = a.values().cwiseProduct(b.values());
  return detail::make_result("mul", a.shape(), std::move(y), {a, b}, [](Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (auto* g = grad_of(self, 0)) *g += self.grad.cwiseProduct(bv);
    if (auto* g = grad_of(self, 1)) *g += self.grad.cwiseProduct(av);
  });
}

Tensor scale(const Tensor& x, double s) {
  return detail::make_result("scale", x.shape(), x.values() * s, {x},
                             [s](Node& self) { self.inputs[0]->grad_buffer() += s * self.grad; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return detail::make_result("add_scalar", x.shape(), x.values().array() + s, {x},
                             [](Node& self) { self.inputs[0]->grad_buffer() += self.grad; });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](double v) { return v > 0 ? v : 0.0; }, [](double v) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double v) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 - s);
      });
}

Tensor abs(const Tensor& x) {
  return unary("abs", x, [](double v) { return std::abs(v); },
               [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary("clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
               [lo, hi](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
  Eigen::VectorXd y(1);
  y[0] = x.values().sum();
  return detail::make_result("sum", {}, std::move(y), {x},
                             [](Node& self) { self.inputs[0]->grad_buffer().array() += self.grad[0]; });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  const double inv = 1.0 / static_cast<double>(x.numel());
  Eigen::VectorXd y(1);
  y[0] = x.values().sum() * inv;
  return detail::make_result("mean", {}, std::move(y), {x},
                             [inv](Node& self) { self.inputs[0]->grad_buffer().array() += self.grad[0] * inv; });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  return detail::make_result("reshape", std::move(shape), x.values(), {x},
                             [](Node& self) { self.inputs[0]->grad_buffer() += self.grad; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Eigen::VectorXd y(m * n);
  MatMap(y.data(), m, n).noalias() = ConstMatMap(a.values().data(), m, k) * ConstMatMap(b.values().data(), k, n);
  return detail::make_result("matmul", {m, n}, std::move(y), {a, b}, [m, k, n](Node& self) {
    ConstMatMap g(self.grad.data(), m, n);
    ConstMatMap av(self.inputs[0]->value.data(), m, k);
    ConstMatMap bv(self.inputs[1]->value.data(), k, n);
    if (auto* ga = grad_of(self, 0)) MatMap(ga->data(), m, k).noalias() += g * bv.transpose();
    if (auto* gb = grad_of(self, 1)) MatMap(gb->data(), k, n).noalias() += av.transpose() * g;
  });
}

Index conv_output_extent(Index in, int kernel, Conv2dOptions opts) {
  const Index span = in + 2 * opts.padding - static_cast<Index>(opts.dilation) * (kernel - 1) - 1;
  if (span < 0) return 0;
  return span / opts.stride + 1;
}

namespace {

struct ConvGeometry {
  Index n, c, h, w, o, k, ho, wo;
  Conv2dOptions opts;
  Index patch() const { return c * k * k; }
  Index out_plane() const { return ho * wo; }
};

void im2col(const double* x, const ConvGeometry& g, RowMatrix& col) {
  col.resize(g.patch(), g.out_plane());
  const int s = g.opts.stride, p = g.opts.padding, d = g.opts.dilation;
  for (Index c = 0; c < g.c; ++c) {
    const double* plane = x + c * g.h * g.w;
    for (Index ki = 0; ki < g.k; ++ki) {
      for (Index kj = 0; kj < g.k; ++kj) {
        double* row = col.data() + ((c * g.k + ki) * g.k + kj) * g.out_plane();
        for (Index oy = 0; oy < g.ho; ++oy) {
          const Index iy = oy * s - p + ki * d;
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = plane + iy * g.w;
          for (Index ox = 0; ox < g.wo; ++ox) {
            const Index ix = ox * s - p + kj * d;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const RowMatrix& col, const ConvGeometry& g, double* dx) {
  const int s = g.opts.stride, p = g.opts.padding, d = g.opts.dilation;
  for (Index c = 0; c < g.c; ++c) {
    double* plane = dx + c * g.h * g.w;
    for (Index ki = 0; ki < g.k; ++ki) {
      for (Index kj = 0; kj < g.k; ++kj) {
        const double* row = col.data() + ((c * g.k + ki) * g.k + kj) * g.out_plane();
        for (Index oy = 0; oy < g.ho; ++oy) {
          const Index iy = oy * s - p + ki * d;
          if (iy < 0 || iy >= g.h) continue;
          double* dst = plane + iy * g.w;
          const double* src = row + oy * g.wo;
          for (Index ox = 0; ox < g.wo; ++ox) {
            const Index ix = ox * s - p + kj * d;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) {
  return g.k == 1 && g.opts.stride == 1 && g.opts.padding == 0;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opts) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  if (opts.stride < 1 || opts.dilation < 1 || opts.padding < 0) throw ShapeError("conv2d: invalid stride/padding/dilation");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), 0, 0, opts};
  if (weight.dim(1) != g.c) {
    throw ShapeError("conv2d: input has " + std::to_string(g.c) + " channels, weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (weight.dim(2) != weight.dim(3) || g.k % 2 == 0) throw ShapeError("conv2d: kernel must be square and odd");
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{g.o}) throw ShapeError("conv2d: bias must have shape [O]");
  g.ho = conv_output_extent(g.h, static_cast<int>(g.k), opts);
  g.wo = conv_output_extent(g.w, static_cast<int>(g.k), opts);
  if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d: non-positive output extent for input " + to_string(x.shape()));

  Eigen::VectorXd y(g.n * g.o * g.out_plane());
  ConstMatMap wm(weight.values().data(), g.o, g.patch());
  RowMatrix col;
  for (Index n = 0; n < g.n; ++n) {
    const double* xn = x.values().data() + n * g.c * g.h * g.w;
    MatMap yn(y.data() + n * g.o * g.out_plane(), g.o, g.out_plane());
    if (is_pointwise(g)) {
      yn.noalias() = wm * ConstMatMap(xn, g.c, g.out_plane());
    } else {
      im2col(xn, g, col);
      yn.noalias() = wm * col;
    }
    if (has_bias) yn.colwise() += bias.values();
  }

  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return detail::make_result(
      "conv2d", {g.n, g.o, g.ho, g.wo}, std::move(y), std::move(inputs), [g, has_bias](Node& self) {
        const auto& xv = self.inputs[0]->value;
        ConstMatMap wm(self.inputs[1]->value.data(), g.o, g.patch());
        auto* gx = grad_of(self, 0);
        auto* gw = grad_of(self, 1);
        auto* gb = has_bias ? grad_of(self, 2) : nullptr;
        RowMatrix col, dcol;
        for (Index n = 0; n < g.n; ++n) {
          ConstMatMap gn(self.grad.data() + n * g.o * g.out_plane(), g.o, g.out_plane());
          const double* xn = xv.data() + n * g.c * g.h * g.w;
          if (gb) *gb += gn.rowwise().sum();
          if (is_pointwise(g)) {
            if (gw) MatMap(gw->data(), g.o, g.patch()).noalias() += gn * ConstMatMap(xn, g.c, g.out_plane()).transpose();
            if (gx) MatMap(gx->data() + n * g.c * g.h * g.w, g.c, g.out_plane()).noalias() += wm.transpose() * gn;
            continue;
          }
          if (gw) {
            im2col(xn, g, col);
            MatMap(gw->data(), g.o, g.patch()).noalias() += gn * col.transpose();
          }
          if (gx) {
            dcol.noalias() = wm.transpose() * gn;
            col2im_add(dcol, g, gx->data() + n * g.c * g.h * g.w);
          }
        }
      });
}

Tensor softmax(const Tensor& x, int axis) {
  const int rank = x.ndim();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("softmax: axis out of range for " + to_string(x.shape()));
  Index outer = 1, inner = 1;
  const Index len = x.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < rank; ++i) inner *= x.dim(i);

  Eigen::VectorXd y(x.numel());
  const double* xv = x.values().data();
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (Index l = 0; l < len; ++l) mx = std::max(mx, xv[base + l * inner]);
      double total = 0;
      for (Index l = 0; l < len; ++l) total += (y[base + l * inner] = std::exp(xv[base + l * inner] - mx));
      for (Index l = 0; l < len; ++l) y[base + l * inner] /= total;
    }
  }
  return detail::make_result("softmax", x.shape(), std::move(y), {x}, [outer, inner, len](Node& self) {
    // The output value is needed; it lives on the node itself.
    const auto& yv = self.value;
    auto& gx = self.inputs[0]->grad_buffer();
    for (Index o = 0; o < outer; ++o) {
      for (Index in = 0; in < inner; ++in) {
        const Index base = o * len * inner + in;
        double dot = 0;
        for (Index l = 0; l < len; ++l) dot += yv[base + l * inner] * self.grad[base + l * inner];
        for (Index l = 0; l < len; ++l) {
          const Index i = base + l * inner;
          gx[i] += yv[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

Tensor bilinear_resize(const Tensor& x, Index out_h, Index out_w) {
  require_rank(x, 4, "bilinear_resize");
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output extent must be >= 1");
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h == out_h && w == out_w) return reshape(x, x.shape());

  const LinearTaps ty = linear_taps(h, out_h), tx = linear_taps(w, out_w);
  Eigen::VectorXd y(planes * out_h * out_w);
  const double* xv = x.values().data();
  for (Index p = 0; p < planes; ++p) {
    const double* src = xv + p * h * w;
    double* dst = y.data() + p * out_h * out_w;
    for (Index oy = 0; oy < out_h; ++oy) {
      const double fy = ty.frac[oy];
      const double* r0 = src + ty.lo[oy] * w;
      const double* r1 = src + ty.hi[oy] * w;
      for (Index ox = 0; ox < out_w; ++ox) {
        const double fx = tx.frac[ox];
        const Index x0 = tx.lo[ox], x1 = tx.hi[ox];
        dst[oy * out_w + ox] =
            (1 - fy) * ((1 - fx) * r0[x0] + fx * r0[x1]) + fy * ((1 - fx) * r1[x0] + fx * r1[x1]);
      }
    }
  }
  return detail::make_result(
      "bilinear_resize", {x.dim(0), x.dim(1), out_h, out_w}, std::move(y), {x},
      [ty, tx, planes, h, w, out_h, out_w](Node& self) {
        auto& gx = self.inputs[0]->grad_buffer();
        for (Index p = 0; p < planes; ++p) {
          double* dst = gx.data() + p * h * w;
          const double* g = self.grad.data() + p * out_h * out_w;
          for (Index oy = 0; oy < out_h; ++oy) {
            const double fy = ty.frac[oy];
            double* r0 = dst + ty.lo[oy] * w;
            double* r1 = dst + ty.hi[oy] * w;
            for (Index ox = 0; ox < out_w; ++ox) {
              const double fx = tx.frac[ox], go = g[oy * out_w + ox];
              const Index x0 = tx.lo[ox], x1 = tx.hi[ox];
              r0[x0] += go * (1 - fy) * (1 - fx);
              r0[x1] += go * (1 - fy) * fx;
              r1[x0] += go * fy * (1 - fx);
              r1[x1] += go * fy * fx;
            }
          }
        }
      });
}

Tensor avg_pool2(const Tensor& x) {
  require_rank(x, 4, "avg_pool2");
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("avg_pool2: odd spatial extent in " + to_string(x.shape()));
  const Index oh = h / 2, ow = w / 2;
  Eigen::VectorXd y(planes * oh * ow);
  const double* xv = x.values().data();
  for (Index p = 0; p < planes; ++p) {
    const double* src = xv + p * h * w;
    for (Index i = 0; i < oh; ++i) {
      for (Index j = 0; j < ow; ++j) {
        const double* a = src + 2 * i * w + 2 * j;
        y[(p * oh + i) * ow + j] = 0.25 * (a[0] + a[1] + a[w] + a[w + 1]);
      }
    }
  }
  return detail::make_result("avg_pool2", {x.dim(0), x.dim(1), oh, ow}, std::move(y), {x},
                             [planes, h, w, oh, ow](Node& self) {
                               auto& gx = self.inputs[0]->grad_buffer();
                               for (Index p = 0; p < planes; ++p) {
                                 double* dst = gx.data() + p * h * w;
                                 for (Index i = 0; i < oh; ++i) {
                                   for (Index j = 0; j < ow; ++j) {
                                     const double g = 0.25 * self.grad[(p * oh + i) * ow + j];
                                     double* a = dst + 2 * i * w + 2 * j;
                                     a[0] += g;
                                     a[1] += g;
                                     a[w] += g;
                                     a[w + 1] += g;
                                   }
                                 }
                               }
                             });
}

Tensor concat_channels(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  Shape out = xs.front().shape();
  if (out.size() < 2) throw ShapeError("concat_channels: rank must be >= 2");
  Index total_c = 0;
  std::vector<Index> channels;
  for (const auto& t : xs) {
    Shape s = t.shape();
    if (s.size() != out.size()) throw ShapeError("concat_channels: rank mismatch");
    channels.push_back(s[1]);
    total_c += s[1];
    s[1] = out[1];
    if (s != out) throw ShapeError("concat_channels: extent mismatch " + to_string(t.shape()));
  }
  const Index n = out[0];
  Index inner = 1;
  for (size_t i = 2; i < out.size(); ++i) inner *= out[i];
  out[1] = total_c;

  Eigen::VectorXd y(numel(out));
  for (Index b = 0; b < n; ++b) {
    Index offset = b * total_c * inner;
    for (size_t t = 0; t < xs.size(); ++t) {
      const Index len = channels[t] * inner;
      y.segment(offset, len) = xs[t].values().segment(b * len, len);
      offset += len;
    }
  }
  return detail::make_result("concat_channels", out, std::move(y), xs, [channels, n, inner, total_c](Node& self) {
    for (Index b = 0; b < n; ++b) {
      Index offset = b * total_c * inner;
      for (size_t t = 0; t < channels.size(); ++t) {
        const Index len = channels[t] * inner;
        if (auto* g = grad_of(self, t)) g->segment(b * len, len) += self.grad.segment(offset, len);
        offset += len;
      }
    }
  });
}

Tensor expand_channels(const Tensor& x, Index c) {
  if (x.ndim() < 2 || x.dim(1) != 1) throw ShapeError("expand_channels: expected N x 1 x ..., got " + to_string(x.shape()));
  Shape out = x.shape();
  out[1] = c;
  const Index n = out[0];
  const Index inner = x.numel() / n;
  Eigen::VectorXd y(numel(out));
  for (Index b = 0; b < n; ++b) {
    for (Index k = 0; k < c; ++k) y.segment((b * c + k) * inner, inner) = x.values().segment(b * inner, inner);
  }
  return detail::make_result("expand_channels", out, std::move(y), {x}, [n, c, inner](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (Index b = 0; b < n; ++b) {
      for (Index k = 0; k < c; ++k) g.segment(b * inner, inner) += self.grad.segment((b * c + k) * inner, inner);
    }
  });
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Index group_size, double eps) {
  if (x.ndim() < 2) throw ShapeError("group_norm: rank must be >= 2");
  const Index n = x.dim(0), c = x.dim(1);
  const Index spatial = x.numel() / std::max<Index>(n * c, 1);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) throw ShapeError("group_norm: gamma/beta must have shape [C]");
  if (group_size < 1) throw ShapeError("group_norm: group_size must be >= 1");
  const Index gsize = std::min(group_size, c);
  if (c % gsize != 0) {
    throw ShapeError("group_norm: " + std::to_string(c) + " channels not divisible by group size " +
                     std::to_string(gsize));
  }
  const Index groups = c / gsize;
  const Index count = gsize * spatial;

  Eigen::VectorXd xhat(x.numel()), y(x.numel());
  Eigen::VectorXd inv_std(n * groups);
  for (Index b = 0; b < n; ++b) {
    for (Index gi = 0; gi < groups; ++gi) {
      const Index off = (b * c + gi * gsize) * spatial;
      auto seg = x.values().segment(off, count);
      const double mu = seg.mean();
      const double var = (seg.array() - mu).square().mean();
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[b * groups + gi] = is;
      xhat.segment(off, count) = (seg.array() - mu) * is;
    }
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (b * c + ch) * spatial;
      y.segment(off, spatial) = (xhat.segment(off, spatial).array() * gamma[ch] + beta[ch]).matrix();
    }
  }
  return detail::make_result(
      "group_norm", x.shape(), std::move(y), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std, n, c, spatial, gsize, groups, count](Node& self) {
        const auto& gv = self.inputs[1]->value;
        auto* gx = grad_of(self, 0);
        auto* ggamma = grad_of(self, 1);
        auto* gbeta = grad_of(self, 2);
        Eigen::VectorXd dxhat(count);
        for (Index b = 0; b < n; ++b) {
          for (Index ch = 0; ch < c; ++ch) {
            const Index off = (b * c + ch) * spatial;
            auto gseg = self.grad.segment(off, spatial);
            if (ggamma) (*ggamma)[ch] += gseg.dot(xhat.segment(off, spatial));
            if (gbeta) (*gbeta)[ch] += gseg.sum();
          }
          if (!gx) continue;
          for (Index gi = 0; gi < groups; ++gi) {
            const Index off = (b * c + gi * gsize) * spatial;
            for (Index k = 0; k < gsize; ++k) {
              dxhat.segment(k * spatial, spatial) = self.grad.segment(off + k * spatial, spatial) * gv[gi * gsize + k];
            }
            auto xh = xhat.segment(off, count);
            const double m1 = dxhat.mean();
            const double m2 = dxhat.dot(xh) / static_cast<double>(count);
            gx->segment(off, count).array() +=
                inv_std[b * groups + gi] * (dxhat.array() - m1 - xh.array() * m2);
          }
        }
      });
}

Tensor channel_project(const Tensor& w, const Tensor& x) {
  require_rank(w, 2, "channel_project weight");
  if (x.ndim() < 2) throw ShapeError("channel_project: rank must be >= 2");
  const Index o = w.dim(0), c = w.dim(1), b = x.dim(0);
  if (x.dim(1) != c) {
    throw ShapeError("channel_project: weight " + to_string(w.shape()) + " vs input " + to_string(x.shape()));
  }
  const Index s = x.numel() / std::max<Index>(b * c, 1);
  Shape out = x.shape();
  out[1] = o;
  Eigen::VectorXd y(b * o * s);
  ConstMatMap wm(w.values().data(), o, c);
  for (Index i = 0; i < b; ++i) {
    MatMap(y.data() + i * o * s, o, s).noalias() = wm * ConstMatMap(x.values().data() + i * c * s, c, s);
  }
  return detail::make_result("channel_project", std::move(out), std::move(y), {w, x}, [o, c, b, s](Node& self) {
    ConstMatMap wm(self.inputs[0]->value.data(), o, c);
    auto* gw = grad_of(self, 0);
    auto* gx = grad_of(self, 1);
    for (Index i = 0; i < b; ++i) {
      ConstMatMap gi(self.grad.data() + i * o * s, o, s);
      if (gw) MatMap(gw->data(), o, c).noalias() += gi * ConstMatMap(self.inputs[1]->value.data() + i * c * s, c, s).transpose();
      if (gx) MatMap(gx->data() + i * c * s, c, s).noalias() += wm.transpose() * gi;
    }
  });
}

Tensor neighbor_coords(const Tensor& offsets, const std::vector<Offset2>& layout) {
  require_rank(offsets, 4, "neighbor_coords");
  const Index k = static_cast<Index>(layout.size());
  const Index n = offsets.dim(0), h = offsets.dim(2), w = offsets.dim(3);
  if (k < 1 || offsets.dim(1) != 2 * k) {
    throw ShapeError("neighbor_coords: expected " + std::to_string(2 * k) + " offset channels, got " +
                     to_string(offsets.shape()));
  }
  const Index hw = h * w;
  Eigen::VectorXd y(n * k * 2 * hw);
  std::vector<unsigned char> inside(static_cast<size_t>(y.size()));
  const double* ov = offsets.values().data();
  for (Index b = 0; b < n; ++b) {
    for (Index s = 0; s < k; ++s) {
      for (int axis = 0; axis < 2; ++axis) {
        const double hi = static_cast<double>((axis == 0 ? h : w) - 1);
        const Index base = ((b * k + s) * 2 + axis) * hw;
        const double* src = ov + (b * 2 * k + 2 * s + axis) * hw;
        for (Index i = 0; i < h; ++i) {
          for (Index j = 0; j < w; ++j) {
            const double v = static_cast<double>(axis == 0 ? i : j) + layout[s][axis] + src[i * w + j];
            y[base + i * w + j] = std::clamp(v, 0.0, hi);
            inside[base + i * w + j] = (v >= 0.0 && v <= hi) ? 1 : 0;
          }
        }
      }
    }
  }
  return detail::make_result("neighbor_coords", {n, k, 2, h, w}, std::move(y), {offsets},
                             [inside = std::move(inside), n, k, hw](Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               // Output layout (b, s, axis, p) maps onto input channel 2s + axis.
                               for (Index b = 0; b < n; ++b) {
                                 for (Index c = 0; c < 2 * k; ++c) {
                                   const Index base = (b * 2 * k + c) * hw;
                                   for (Index p = 0; p < hw; ++p) {
                                     if (inside[base + p]) g[base + p] += self.grad[base + p];
                                   }
                                 }
                               }
                             });
}

Tensor bilinear_gather(const Tensor& x, const Tensor& coords) {
  require_rank(x, 4, "bilinear_gather");
  require_rank(coords, 5, "bilinear_gather coords");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), k = coords.dim(1);
  if (coords.dim(0) != n || coords.dim(2) != 2 || coords.dim(3) != h || coords.dim(4) != w) {
    throw ShapeError("bilinear_gather: coords " + to_string(coords.shape()) + " do not match features " +
                     to_string(x.shape()));
  }
  const Index hw = h * w;
  Eigen::VectorXd y(n * k * c * hw);
  const double* xv = x.values().data();
  const double* cv = coords.values().data();
  for (Index b = 0; b < n; ++b) {
    for (Index s = 0; s < k; ++s) {
      const double* cy = cv + ((b * k + s) * 2) * hw;
      const double* cx = cy + hw;
      for (Index p = 0; p < hw; ++p) {
        const BilinearCorner q = corner_at(cy[p], cx[p], h, w);
        const double w00 = (1 - q.fy) * (1 - q.fx), w01 = (1 - q.fy) * q.fx;
        const double w10 = q.fy * (1 - q.fx), w11 = q.fy * q.fx;
        for (Index ch = 0; ch < c; ++ch) {
          const double* plane = xv + (b * c + ch) * hw;
          y[((b * k + s) * c + ch) * hw + p] = w00 * plane[q.y0 * w + q.x0] + w01 * plane[q.y0 * w + q.x1] +
                                               w10 * plane[q.y1 * w + q.x0] + w11 * plane[q.y1 * w + q.x1];
        }
      }
    }
  }
  return detail::make_result("bilinear_gather", {n, k, c, h, w}, std::move(y), {x, coords},
                             [n, c, h, w, k, hw](Node& self) {
                               const double* xv = self.inputs[0]->value.data();
                               const double* cv = self.inputs[1]->value.data();
                               auto* gx = grad_of(self, 0);
                               auto* gc = grad_of(self, 1);
                               for (Index b = 0; b < n; ++b) {
                                 for (Index s = 0; s < k; ++s) {
                                   const Index cbase = ((b * k + s) * 2) * hw;
                                   for (Index p = 0; p < hw; ++p) {
                                     const BilinearCorner q = corner_at(cv[cbase + p], cv[cbase + hw + p], h, w);
                                     const double w00 = (1 - q.fy) * (1 - q.fx), w01 = (1 - q.fy) * q.fx;
                                     const double w10 = q.fy * (1 - q.fx), w11 = q.fy * q.fx;
                                     double dy = 0, dx = 0;
                                     for (Index ch = 0; ch < c; ++ch) {
                                       const double g = self.grad[((b * k + s) * c + ch) * hw + p];
                                       if (g == 0) continue;
                                       const Index pbase = (b * c + ch) * hw;
                                       const double v00 = xv[pbase + q.y0 * w + q.x0], v01 = xv[pbase + q.y0 * w + q.x1];
                                       const double v10 = xv[pbase + q.y1 * w + q.x0], v11 = xv[pbase + q.y1 * w + q.x1];
                                       if (gx) {
                                         (*gx)[pbase + q.y0 * w + q.x0] += g * w00;
                                         (*gx)[pbase + q.y0 * w + q.x1] += g * w01;
                                         (*gx)[pbase + q.y1 * w + q.x0] += g * w10;
                                         (*gx)[pbase + q.y1 * w + q.x1] += g * w11;
                                       }
                                       dy += g * ((1 - q.fx) * (v10 - v00) + q.fx * (v11 - v01));
                                       dx += g * ((1 - q.fy) * (v01 - v00) + q.fy * (v11 - v10));
                                     }
                                     if (gc) {
                                       if (!q.clamped_y && q.y1 != q.y0) (*gc)[cbase + p] += dy;
                                       if (!q.clamped_x && q.x1 != q.x0) (*gc)[cbase + hw + p] += dx;
                                     }
                                   }
                                 }
                               }
                             });
}

namespace {

struct AttentionShape {
  Index n, c, h, w, k;
  Index hw() const { return h * w; }
};

AttentionShape check_attention(const Tensor& query, const Tensor& keys) {
  require_rank(query, 4, "attend query");
  require_rank(keys, 5, "attend keys");
  AttentionShape s{query.dim(0), query.dim(1), query.dim(2), query.dim(3), keys.dim(1)};
  if (keys.dim(0) != s.n || keys.dim(2) != s.c || keys.dim(3) != s.h || keys.dim(4) != s.w) {
    throw ShapeError("attend: keys " + to_string(keys.shape()) + " do not match query " + to_string(query.shape()));
  }
  return s;
}

// Slots sorted by (score desc, key lexicographic). Reductions over slots run
// in this order, so relabelling the slots cannot change a single bit.
void canonical_order(const double* keys, const AttentionShape& s, Index b, Index p, const std::vector<double>& score,
                     std::vector<Index>& order) {
  const Index hw = s.hw();
  order.resize(static_cast<size_t>(s.k));
  std::iota(order.begin(), order.end(), Index{0});
  std::sort(order.begin(), order.end(), [&](Index i, Index j) {
    if (score[i] != score[j]) return score[i] > score[j];
    for (Index ch = 0; ch < s.c; ++ch) {
      const double a = keys[((b * s.k + i) * s.c + ch) * hw + p];
      const double c = keys[((b * s.k + j) * s.c + ch) * hw + p];
      if (a != c) return a < c;
    }
    return false;
  });
}

// beta: N x K x H x W. `orders`, when given, receives the canonical slot order per (b, p).
Eigen::VectorXd softmax_scores(const double* q, const double* keys, const AttentionShape& s,
                               std::vector<Index>* orders = nullptr) {
  const Index hw = s.hw();
  Eigen::VectorXd beta(s.n * s.k * hw);
  std::vector<double> score(static_cast<size_t>(s.k));
  std::vector<Index> order;
  if (orders) orders->resize(static_cast<size_t>(s.n * hw * s.k));
  for (Index b = 0; b < s.n; ++b) {
    for (Index p = 0; p < hw; ++p) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < s.k; ++j) {
        double dot = 0;
        for (Index ch = 0; ch < s.c; ++ch) dot += q[(b * s.c + ch) * hw + p] * keys[((b * s.k + j) * s.c + ch) * hw + p];
        score[j] = dot;
        mx = std::max(mx, dot);
      }
      canonical_order(keys, s, b, p, score, order);
      double total = 0;
      for (Index j = 0; j < s.k; ++j) score[j] = std::exp(score[j] - mx);
      for (Index j : order) total += score[j];
      for (Index j = 0; j < s.k; ++j) beta[(b * s.k + j) * hw + p] = score[j] / total;
      if (orders) std::copy(order.begin(), order.end(), orders->begin() + (b * hw + p) * s.k);
    }
  }
  return beta;
}

}  // namespace

Tensor attention_weights(const Tensor& query, const Tensor& keys) {
  const AttentionShape s = check_attention(query, keys);
  return Tensor::from({s.n, s.k, s.h, s.w}, softmax_scores(query.values().data(), keys.values().data(), s));
}

Tensor attend(const Tensor& query, const Tensor& keys) {
  const AttentionShape s = check_attention(query, keys);
  const Index hw = s.hw();
  const double* kv = keys.values().data();
  std::vector<Index> orders;
  Eigen::VectorXd beta = softmax_scores(query.values().data(), kv, s, &orders);
  Eigen::VectorXd y = Eigen::VectorXd::Zero(s.n * s.c * hw);
  for (Index b = 0; b < s.n; ++b) {
    for (Index p = 0; p < hw; ++p) {
      const Index* order = orders.data() + (b * hw + p) * s.k;
      for (Index ch = 0; ch < s.c; ++ch) {
        double acc = 0;
        for (Index t = 0; t < s.k; ++t) {
          const Index j = order[t];
          acc += beta[(b * s.k + j) * hw + p] * kv[((b * s.k + j) * s.c + ch) * hw + p];
        }
        y[(b * s.c + ch) * hw + p] = acc;
      }
    }
  }
  return detail::make_result("attend", query.shape(), std::move(y), {query, keys}, [s, beta = std::move(beta)](Node& self) {
    const Index hw = s.hw();
    const double* qv = self.inputs[0]->value.data();
    const double* kv = self.inputs[1]->value.data();
    auto* gq = grad_of(self, 0);
    auto* gk = grad_of(self, 1);
    std::vector<double> dbeta(static_cast<size_t>(s.k)), dscore(static_cast<size_t>(s.k));
    for (Index b = 0; b < s.n; ++b) {
      for (Index p = 0; p < hw; ++p) {
        double weighted = 0;
        for (Index j = 0; j < s.k; ++j) {
          double d = 0;
          for (Index ch = 0; ch < s.c; ++ch) d += self.grad[(b * s.c + ch) * hw + p] * kv[((b * s.k + j) * s.c + ch) * hw + p];
          dbeta[j] = d;
          weighted += beta[(b * s.k + j) * hw + p] * d;
        }
        for (Index j = 0; j < s.k; ++j) dscore[j] = beta[(b * s.k + j) * hw + p] * (dbeta[j] - weighted);
        for (Index j = 0; j < s.k; ++j) {
          const double bj = beta[(b * s.k + j) * hw + p];
          for (Index ch = 0; ch < s.c; ++ch) {
            const Index qi = (b * s.c + ch) * hw + p;
            const Index ki = ((b * s.k + j) * s.c + ch) * hw + p;
            if (gq) (*gq)[qi] += dscore[j] * kv[ki];
            if (gk) (*gk)[ki] += bj * self.grad[qi] + dscore[j] * qv[qi];
          }
        }
      }
    }
  });
}

Tensor forward_diff(const Tensor& x) {
  require_rank(x, 4, "forward_diff");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index hw = h * w;
  Eigen::VectorXd y = Eigen::VectorXd::Zero(n * 2 * c * hw);
  const double* xv = x.values().data();
  for (Index plane = 0; plane < n * c; ++plane) {
    const double* src = xv + plane * hw;
    double* dy = y.data() + (2 * plane) * hw;
    double* dx = dy + hw;
    for (Index i = 0; i < h; ++i) {
      for (Index j = 0; j < w; ++j) {
        if (i + 1 < h) dy[i * w + j] = src[(i + 1) * w + j] - src[i * w + j];
        if (j + 1 < w) dx[i * w + j] = src[i * w + j + 1] - src[i * w + j];
      }
    }
  }
  return detail::make_result("forward_diff", {n, 2 * c, h, w}, std::move(y), {x}, [n, c, h, w, hw](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (Index plane = 0; plane < n * c; ++plane) {
      double* dst = g.data() + plane * hw;
      const double* gy = self.grad.data() + (2 * plane) * hw;
      const double* gxp = gy + hw;
      for (Index i = 0; i < h; ++i) {
        for (Index j = 0; j < w; ++j) {
          if (i + 1 < h) {
            dst[(i + 1) * w + j] += gy[i * w + j];
            dst[i * w + j] -= gy[i * w + j];
          }
          if (j + 1 < w) {
            dst[i * w + j + 1] += gxp[i * w + j];
            dst[i * w + j] -= gxp[i * w + j];
          }
        }
      }
    }
  });
}

Tensor normalize_gradient_field(const Tensor& g, double eps) {
  require_rank(g, 4, "normalize_gradient_field");
  if (g.dim(1) != 2) throw ShapeError("normalize_gradient_field: expected 2 channels, got " + to_string(g.shape()));
  const Index n = g.dim(0), hw = g.dim(2) * g.dim(3);
  Eigen::VectorXd y(g.numel());
  std::vector<Index> argmax(static_cast<size_t>(n));
  std::vector<double> peak(static_cast<size_t>(n)), divisor(static_cast<size_t>(n));
  const double* gv = g.values().data();
  for (Index b = 0; b < n; ++b) {
    const double* fy = gv + b * 2 * hw;
    const double* fx = fy + hw;
    double best = -1;
    Index at = 0;
    for (Index p = 0; p < hw; ++p) {
      const double mag = std::sqrt(fy[p] * fy[p] + fx[p] * fx[p]);
      if (mag > best) {
        best = mag;
        at = p;
      }
    }
    argmax[b] = at;
    peak[b] = best;
    divisor[b] = std::max(best, eps);
    y.segment(b * 2 * hw, 2 * hw) = g.values().segment(b * 2 * hw, 2 * hw) / divisor[b];
  }
  return detail::make_result(
      "normalize_gradient_field", g.shape(), std::move(y), {g},
      [n, hw, eps, argmax = std::move(argmax), peak = std::move(peak), divisor = std::move(divisor)](Node& self) {
        auto& gg = self.inputs[0]->grad_buffer();
        const auto& gv = self.inputs[0]->value;
        for (Index b = 0; b < n; ++b) {
          const Index off = b * 2 * hw;
          const double m = divisor[b];
          gg.segment(off, 2 * hw) += self.grad.segment(off, 2 * hw) / m;
          if (peak[b] <= eps) continue;
          // d(g / m)/dm = -g / m^2, and m depends on the peak-magnitude pixel.
          const double s = self.grad.segment(off, 2 * hw).dot(gv.segment(off, 2 * hw)) / (m * m);
          const Index p = argmax[b];
          gg[off + p] -= s * gv[off + p] / peak[b];
          gg[off + hw + p] -= s * gv[off + hw + p] / peak[b];
        }
      });
}

}  // namespace casdgr
