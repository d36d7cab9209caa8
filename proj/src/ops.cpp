#include "tfsdiff/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace tfsdiff {

using detail::make_result;
using detail::Node;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// Gradient buffer of parent `i`, or nullptr when it does not take gradients.
double* parent_grad(Node& self, std::size_t i) {
  auto& p = self.parents[i];
  if (!p || !p->requires_grad) return nullptr;
  p->ensure_grad();
  return p->grad.data();
}

const std::vector<double>& parent_value(Node& self, std::size_t i) {
  return self.parents[i]->value;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), ErrorCode::kShape,
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  require(x.rank() == rank, ErrorCode::kShape,
          std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
              shape_str(x.shape()));
}

template <typename F, typename DF>
Tensor unary(const Tensor& x, F f, DF df) {
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return make_result(x.shape(), std::move(out), {x}, [df](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    const auto& xv = parent_value(self, 0);
    for (std::size_t i = 0; i < xv.size(); ++i) g[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto av = a.data(), bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (double* g = parent_grad(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto av = a.data(), bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto av = a.data(), bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& x = parent_value(self, 0);
    const auto& y = parent_value(self, 1);
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  auto av = a.data(), bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& y = parent_value(self, 1);
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / y[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] -= self.grad[i] * self.value[i] / y[i];
      }
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary(
      x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Tensor square(const Tensor& x) {
  return unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor scale_per_sample(const Tensor& x, std::span<const double> factors) {
  require(x.rank() >= 1 && x.dim(0) == factors.size(), ErrorCode::kShape,
          "scale_per_sample: " + std::to_string(factors.size()) + " factors for shape " +
              shape_str(x.shape()));
  std::vector<double> f(factors.begin(), factors.end());
  const std::size_t inner = x.numel() / f.size();
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t n = 0; n < f.size(); ++n) {
    for (std::size_t i = 0; i < inner; ++i) out[n * inner + i] = in[n * inner + i] * f[n];
  }
  return make_result(x.shape(), std::move(out), {x}, [f, inner](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t n = 0; n < f.size(); ++n) {
      for (std::size_t i = 0; i < inner; ++i) g[n * inner + i] += self.grad[n * inner + i] * f[n];
    }
  });
}

Tensor activation(const Tensor& x, Activation kind) {
  switch (kind) {
    case Activation::kRelu:
      // Subgradient at exactly 0 is 0.
      return unary(
          x, [](double v) { return v > 0 ? v : 0.0; },
          [](double v, double) { return v > 0 ? 1.0 : 0.0; });
    case Activation::kSigmoid:
      return unary(
          x, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
    case Activation::kSwish:
      return unary(
          x, [](double v) { return v * sigmoid_scalar(v); },
          [](double v, double) {
            const double s = sigmoid_scalar(v);
            return s * (1.0 + v * (1.0 - s));
          });
  }
  fail(ErrorCode::kInvalidArgument, "activation: unknown kind");
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  require(lo <= hi, ErrorCode::kInvalidArgument, "clamp: lo > hi");
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
  auto in = x.data();
  const double total = std::accumulate(in.begin(), in.end(), 0.0);
  return make_result({1}, {total}, {x}, [](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    const std::size_t n = self.parents[0]->value.size();
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_numel(shape) == x.numel(), ErrorCode::kShape,
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto in = x.data();
  return make_result(std::move(shape), {in.begin(), in.end()}, {x}, [](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), ErrorCode::kInvalidArgument, "concat: no inputs");
  const Shape& first = parts.front().shape();
  require(axis < first.size(), ErrorCode::kShape, "concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    Shape s = p.shape();
    require(s.size() == first.size(), ErrorCode::kShape, "concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      require(d == axis || s[d] == first[d], ErrorCode::kShape,
              "concat: shape mismatch " + shape_str(s) + " vs " + shape_str(first));
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) widths.push_back(p.dim(axis) * inner);
  const std::size_t row = out_shape[axis] * inner;

  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto in = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(in.begin() + o * widths[k], widths[k], out.begin() + o * row + offset);
    }
    offset += widths[k];
  }
  return make_result(std::move(out_shape), std::move(out), parts,
                     [widths, outer, row](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                         if (double* g = parent_grad(self, k)) {
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t i = 0; i < widths[k]; ++i) {
                               g[o * widths[k] + i] += self.grad[o * row + off + i];
                             }
                           }
                         }
                         off += widths[k];
                       }
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  require(axis < s.size(), ErrorCode::kShape, "slice: axis out of range");
  require(begin < end && end <= s[axis], ErrorCode::kShape,
          "slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
              ") invalid for shape " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t row = s[axis] * inner;
  const std::size_t width = (end - begin) * inner;
  const std::size_t off = begin * inner;
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  auto in = x.data();
  std::vector<double> out(outer * width);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(in.begin() + o * row + off, width, out.begin() + o * width);
  }
  return make_result(std::move(out_shape), std::move(out), {x},
                     [outer, row, width, off](Node& self) {
                       double* g = parent_grad(self, 0);
                       if (!g) return;
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t i = 0; i < width; ++i) {
                           g[o * row + off + i] += self.grad[o * width + i];
                         }
                       }
                     });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  Tensor a3 = reshape(a, {1, a.dim(0), a.dim(1)});
  Tensor b3 = reshape(b, {1, b.dim(0), b.dim(1)});
  return reshape(bmm(a3, b3), {a.dim(0), b.dim(1)});
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  require(b.dim(0) == B && b.dim(1) == K, ErrorCode::kShape,
          "bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(B * M * N);
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < B; ++i) {
    MutMap(out.data() + i * M * N, M, N).noalias() =
        ConstMap(av.data() + i * M * K, M, K) * ConstMap(bv.data() + i * K * N, K, N);
  }
  return make_result({B, M, N}, std::move(out), {a, b}, [B, M, K, N](Node& self) {
    const auto& av = parent_value(self, 0);
    const auto& bv = parent_value(self, 1);
    double* ga = parent_grad(self, 0);
    double* gb = parent_grad(self, 1);
    for (std::size_t i = 0; i < B; ++i) {
      ConstMap g(self.grad.data() + i * M * N, M, N);
      if (ga) MutMap(ga + i * M * K, M, K).noalias() += g * ConstMap(bv.data() + i * K * N, K, N).transpose();
      if (gb) MutMap(gb + i * K * N, K, N).noalias() += ConstMap(av.data() + i * M * K, M, K).transpose() * g;
    }
  });
}

Tensor transpose_last2(const Tensor& x) {
  require_rank(x, 3, "transpose_last2");
  const std::size_t B = x.dim(0), M = x.dim(1), N = x.dim(2);
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t j = 0; j < N; ++j) out[b * M * N + j * M + i] = in[b * M * N + i * N + j];
    }
  }
  return make_result({B, N, M}, std::move(out), {x}, [B, M, N](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t j = 0; j < N; ++j) g[b * M * N + i * N + j] += self.grad[b * M * N + j * M + i];
      }
    }
  });
}

Tensor softmax_last(const Tensor& x) {
  require(x.rank() >= 1, ErrorCode::kShape, "softmax_last: scalar input");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.numel() / cols;
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = in.data() + r * cols;
    double* dst = out.data() + r * cols;
    const double peak = *std::max_element(src, src + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += dst[c] = std::exp(src[c] - peak);
    for (std::size_t c = 0; c < cols; ++c) dst[c] /= total;
  }
  return make_result(x.shape(), std::move(out), {x}, [rows, cols](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * cols;
      const double* dy = self.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += dy[c] * y[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (dy[c] - dot);
    }
  });
}

namespace {

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t k, stride, pad;
  std::size_t out_h, out_w;

  std::size_t col_rows() const { return channels * k * k; }
  std::size_t col_cols() const { return out_h * out_w; }
  bool is_pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

void im2col(const double* img, const ConvGeometry& g, double* col) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* dst = col + ((c * g.k + ky) * g.k + kx) * g.col_cols();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill_n(dst + oy * g.out_w, g.out_w, 0.0);
            continue;
          }
          const double* row = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            dst[oy * g.out_w + ox] =
                (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) ? 0.0 : row[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeometry& g, double* img) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* src = col + ((c * g.k + ky) * g.k + kx) * g.col_cols();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          double* row = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) row[ix] += src[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t stride, std::size_t padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t O = kernel.dim(0), k = kernel.dim(2);
  require(kernel.dim(1) == C, ErrorCode::kShape,
          "conv2d: input has " + std::to_string(C) + " channels but kernel " +
              shape_str(kernel.shape()) + " expects " + std::to_string(kernel.dim(1)));
  require(kernel.dim(3) == k, ErrorCode::kShape, "conv2d: kernel must be square");
  require(stride >= 1, ErrorCode::kInvalidArgument, "conv2d: stride must be >= 1");
  require(H + 2 * padding >= k && W + 2 * padding >= k, ErrorCode::kShape,
          "conv2d: padded input " + shape_str(input.shape()) + " smaller than kernel " +
              std::to_string(k));
  if (bias.defined()) {
    require(bias.rank() == 1 && bias.dim(0) == O, ErrorCode::kShape,
            "conv2d: bias shape " + shape_str(bias.shape()) + " does not match " +
                std::to_string(O) + " output channels");
  }
  const ConvGeometry g{C, H, W, k, stride, padding,
                       (H + 2 * padding - k) / stride + 1, (W + 2 * padding - k) / stride + 1};
  const std::size_t rows = g.col_rows(), cols = g.col_cols();
  const std::size_t in_plane = C * H * W, out_plane = O * cols;

  auto x = input.data();
  auto w = kernel.data();
  std::vector<double> out(N * out_plane);
  std::vector<double> col(g.is_pointwise() ? 0 : rows * cols);
  ConstMap wmat(w.data(), O, rows);
  for (std::size_t n = 0; n < N; ++n) {
    const double* src = x.data() + n * in_plane;
    if (!g.is_pointwise()) {
      im2col(src, g, col.data());
      src = col.data();
    }
    MutMap y(out.data() + n * out_plane, O, cols);
    y.noalias() = wmat * ConstMap(src, rows, cols);
    if (bias.defined()) {
      auto b = bias.data();
      for (std::size_t o = 0; o < O; ++o) y.row(o).array() += b[o];
    }
  }

  const bool has_bias = bias.defined();
  return make_result({N, O, g.out_h, g.out_w}, std::move(out), {input, kernel, bias},
                     [g, N, O, rows, cols, in_plane, out_plane, has_bias](Node& self) {
                       const auto& xv = parent_value(self, 0);
                       const auto& wv = parent_value(self, 1);
                       double* gx = parent_grad(self, 0);
                       double* gw = parent_grad(self, 1);
                       double* gb = has_bias ? parent_grad(self, 2) : nullptr;
                       std::vector<double> col(g.is_pointwise() ? 0 : rows * cols);
                       std::vector<double> dcol(gx && !g.is_pointwise() ? rows * cols : 0);
                       ConstMap wmat(wv.data(), O, rows);
                       for (std::size_t n = 0; n < N; ++n) {
                         ConstMap dy(self.grad.data() + n * out_plane, O, cols);
                         if (gw) {
                           const double* src = xv.data() + n * in_plane;
                           if (!g.is_pointwise()) {
                             im2col(src, g, col.data());
                             src = col.data();
                           }
                           MutMap(gw, O, rows).noalias() += dy * ConstMap(src, rows, cols).transpose();
                         }
                         if (gb) {
                           for (std::size_t o = 0; o < O; ++o) gb[o] += dy.row(o).sum();
                         }
                         if (gx) {
                           if (g.is_pointwise()) {
                             MutMap(gx + n * in_plane, rows, cols).noalias() += wmat.transpose() * dy;
                           } else {
                             MutMap(dcol.data(), rows, cols).noalias() = wmat.transpose() * dy;
                             col2im_add(dcol.data(), g, gx + n * in_plane);
                           }
                         }
                       }
                     });
}

Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "dense input");
  require_rank(weight, 2, "dense weight");
  const std::size_t N = input.dim(0), F = input.dim(1), O = weight.dim(0);
  require(weight.dim(1) == F, ErrorCode::kShape,
          "dense: input features " + std::to_string(F) + " do not match weight " +
              shape_str(weight.shape()));
  require(bias.defined() && bias.rank() == 1 && bias.dim(0) == O, ErrorCode::kShape,
          "dense: bias must have shape [" + std::to_string(O) + "]");
  std::vector<double> out(N * O);
  auto x = input.data(), w = weight.data(), b = bias.data();
  MutMap y(out.data(), N, O);
  y.noalias() = ConstMap(x.data(), N, F) * ConstMap(w.data(), O, F).transpose();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t o = 0; o < O; ++o) y(n, o) += b[o];
  }
  return make_result({N, O}, std::move(out), {input, weight, bias}, [N, F, O](Node& self) {
    ConstMap dy(self.grad.data(), N, O);
    if (double* gx = parent_grad(self, 0)) {
      MutMap(gx, N, F).noalias() += dy * ConstMap(parent_value(self, 1).data(), O, F);
    }
    if (double* gw = parent_grad(self, 1)) {
      MutMap(gw, O, F).noalias() += dy.transpose() * ConstMap(parent_value(self, 0).data(), N, F);
    }
    if (double* gb = parent_grad(self, 2)) {
      for (std::size_t o = 0; o < O; ++o) gb[o] += dy.col(o).sum();
    }
  });
}

Tensor global_avg_pool(const Tensor& input) {
  require_rank(input, 4, "global_avg_pool");
  const std::size_t N = input.dim(0), C = input.dim(1);
  const std::size_t plane = input.dim(2) * input.dim(3);
  auto x = input.data();
  std::vector<double> out(N * C);
  for (std::size_t i = 0; i < N * C; ++i) {
    out[i] = std::accumulate(x.begin() + i * plane, x.begin() + (i + 1) * plane, 0.0) /
             static_cast<double>(plane);
  }
  return make_result({N, C}, std::move(out), {input}, [plane](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      for (std::size_t p = 0; p < plane; ++p) g[i * plane + p] += self.grad[i] * inv;
    }
  });
}

namespace {
void require_channel_operand(const Tensor& x, const Tensor& v, const char* op) {
  require_rank(x, 4, op);
  require(v.rank() == 2 && v.dim(0) == x.dim(0) && v.dim(1) == x.dim(1), ErrorCode::kShape,
          std::string(op) + ": operand " + shape_str(v.shape()) + " does not match " +
              shape_str(x.shape()));
}
}  // namespace

Tensor add_channelwise(const Tensor& x, const Tensor& v) {
  require_channel_operand(x, v, "add_channelwise");
  const std::size_t planes = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  auto xv = x.data(), vv = v.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < planes; ++i) {
    for (std::size_t p = 0; p < plane; ++p) out[i * plane + p] = xv[i * plane + p] + vv[i];
  }
  return make_result(x.shape(), std::move(out), {x, v}, [planes, plane](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < planes; ++i) {
        double acc = 0.0;
        for (std::size_t p = 0; p < plane; ++p) acc += self.grad[i * plane + p];
        g[i] += acc;
      }
    }
  });
}

Tensor mul_channelwise(const Tensor& x, const Tensor& w) {
  require_channel_operand(x, w, "mul_channelwise");
  const std::size_t planes = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  auto xv = x.data(), wv = w.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < planes; ++i) {
    for (std::size_t p = 0; p < plane; ++p) out[i * plane + p] = xv[i * plane + p] * wv[i];
  }
  return make_result(x.shape(), std::move(out), {x, w}, [planes, plane](Node& self) {
    const auto& xv = parent_value(self, 0);
    const auto& wv = parent_value(self, 1);
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < planes; ++i) {
        for (std::size_t p = 0; p < plane; ++p) g[i * plane + p] += self.grad[i * plane + p] * wv[i];
      }
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < planes; ++i) {
        double acc = 0.0;
        for (std::size_t p = 0; p < plane; ++p) acc += self.grad[i * plane + p] * xv[i * plane + p];
        g[i] += acc;
      }
    }
  });
}

Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma,
                  const Tensor& beta, double eps) {
  require_rank(x, 4, "group_norm");
  const std::size_t N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  require(groups >= 1 && C % groups == 0, ErrorCode::kShape,
          "group_norm: " + std::to_string(C) + " channels not divisible into " +
              std::to_string(groups) + " groups");
  require(gamma.shape() == Shape{C} && beta.shape() == Shape{C}, ErrorCode::kShape,
          "group_norm: affine parameters must have shape [" + std::to_string(C) + "]");
  const std::size_t per_group = C / groups;
  const std::size_t count = per_group * plane;
  auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  std::vector<double> out(xv.size());
  std::vector<double> means(N * groups), rstds(N * groups);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t base = (n * C + gi * per_group) * plane;
      double m = 0.0;
      for (std::size_t i = 0; i < count; ++i) m += xv[base + i];
      m /= static_cast<double>(count);
      double var = 0.0;
      for (std::size_t i = 0; i < count; ++i) var += (xv[base + i] - m) * (xv[base + i] - m);
      var /= static_cast<double>(count);
      const double rstd = 1.0 / std::sqrt(var + eps);
      means[n * groups + gi] = m;
      rstds[n * groups + gi] = rstd;
      for (std::size_t c = 0; c < per_group; ++c) {
        const std::size_t ch = gi * per_group + c;
        for (std::size_t p = 0; p < plane; ++p) {
          const std::size_t i = base + c * plane + p;
          out[i] = (xv[i] - m) * rstd * gv[ch] + bv[ch];
        }
      }
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [N, C, plane, groups, per_group, count, means, rstds](Node& self) {
        const auto& xv = parent_value(self, 0);
        const auto& gv = parent_value(self, 1);
        double* gx = parent_grad(self, 0);
        double* gg = parent_grad(self, 1);
        double* gb = parent_grad(self, 2);
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t base = (n * C + gi * per_group) * plane;
            const double m = means[n * groups + gi];
            const double rstd = rstds[n * groups + gi];
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (std::size_t c = 0; c < per_group; ++c) {
              const std::size_t ch = gi * per_group + c;
              for (std::size_t p = 0; p < plane; ++p) {
                const std::size_t i = base + c * plane + p;
                const double xhat = (xv[i] - m) * rstd;
                const double dy = self.grad[i];
                if (gg) gg[ch] += dy * xhat;
                if (gb) gb[ch] += dy;
                const double dxhat = dy * gv[ch];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
              }
            }
            if (!gx) continue;
            const double mean_dxhat = sum_dxhat / static_cast<double>(count);
            const double mean_dxhat_xhat = sum_dxhat_xhat / static_cast<double>(count);
            for (std::size_t c = 0; c < per_group; ++c) {
              const std::size_t ch = gi * per_group + c;
              for (std::size_t p = 0; p < plane; ++p) {
                const std::size_t i = base + c * plane + p;
                const double xhat = (xv[i] - m) * rstd;
                const double dxhat = self.grad[i] * gv[ch];
                gx[i] += rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
              }
            }
          }
        }
      });
}

Tensor upsample_nearest2x(const Tensor& x) {
  require_rank(x, 4, "upsample_nearest2x");
  const std::size_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  auto in = x.data();
  std::vector<double> out(planes * 4 * H * W);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < 2 * H; ++y) {
      for (std::size_t xx = 0; xx < 2 * W; ++xx) {
        out[(p * 2 * H + y) * 2 * W + xx] = in[(p * H + y / 2) * W + xx / 2];
      }
    }
  }
  return make_result({x.dim(0), x.dim(1), 2 * H, 2 * W}, std::move(out), {x},
                     [planes, H, W](Node& self) {
                       double* g = parent_grad(self, 0);
                       if (!g) return;
                       for (std::size_t p = 0; p < planes; ++p) {
                         for (std::size_t y = 0; y < 2 * H; ++y) {
                           for (std::size_t xx = 0; xx < 2 * W; ++xx) {
                             g[(p * H + y / 2) * W + xx / 2] += self.grad[(p * 2 * H + y) * 2 * W + xx];
                           }
                         }
                       }
                     });
}

namespace {
Tensor pointwise_projection(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const std::size_t C = x.dim(1);
  require(weight.shape() == Shape{C, C}, ErrorCode::kShape,
          "self_attention: projection must be [" + std::to_string(C) + "," + std::to_string(C) +
              "], got " + shape_str(weight.shape()));
  return conv2d(x, reshape(weight, {C, C, 1, 1}), bias, 1, 0);
}
}  // namespace

Tensor self_attention(const Tensor& input, const AttentionParams& params) {
  require_rank(input, 4, "self_attention");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t tokens = H * W;
  Tensor q = reshape(pointwise_projection(input, params.q_weight, params.q_bias), {N, C, tokens});
  Tensor k = reshape(pointwise_projection(input, params.k_weight, params.k_bias), {N, C, tokens});
  Tensor v = reshape(pointwise_projection(input, params.v_weight, params.v_bias), {N, C, tokens});
  // scores[n, i, j] = <q_i, k_j> / sqrt(C); softmax over keys j.
  Tensor scores = scale(bmm(transpose_last2(q), k), 1.0 / std::sqrt(static_cast<double>(C)));
  Tensor weights = softmax_last(scores);
  Tensor attended = reshape(bmm(v, transpose_last2(weights)), {N, C, H, W});
  return add(input, pointwise_projection(attended, params.out_weight, params.out_bias));
}

Tensor kaiming_init(const Shape& shape, std::size_t fan_in, Rng& rng, bool requires_grad) {
  require(fan_in >= 1, ErrorCode::kInvalidArgument, "kaiming_init: fan_in must be >= 1");
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = stddev * rng.normal();
  return Tensor::from_data(shape, std::move(values), requires_grad);
}

}  // namespace tfsdiff
