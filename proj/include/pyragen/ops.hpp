#pragma once

// Convolution and resampling ops with hand-written adjoints. Convolutions go
// through im2col + a dense GEMM; the column buffer is rebuilt in the backward
// pass instead of being stored.

#include <memory>

#include <Eigen/Core>

#include "pyragen/autograd.hpp"

namespace pyragen {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int dilation = 1;

  int pad() const { return dilation * (kernel - 1) / 2; }
  int out_extent(int in) const { return (in + 2 * pad() - dilation * (kernel - 1) - 1) / stride + 1; }
};

namespace detail {

// Output columns [lo, hi) whose input column ox*stride - pad + offset is in range.
inline std::pair<int, int> valid_span(int out, int in, int stride, int offset) {
  int lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  int hi = in - 1 - offset < 0 ? 0 : (in - 1 - offset) / stride + 1;
  lo = std::min(lo, out);
  hi = std::clamp(hi, lo, out);
  return {lo, hi};
}

// Uninitialized scratch for column buffers that are fully overwritten.
template <class T>
struct AlignedDelete {
  void operator()(T* p) const { AlignedAllocator<T>().deallocate(p, 0); }
};
template <class T>
using Scratch = std::unique_ptr<T[], AlignedDelete<T>>;
template <class T>
Scratch<T> scratch(std::size_t n) {
  return Scratch<T>(AlignedAllocator<T>().allocate(std::max<std::size_t>(n, 1)));
}

// cols is [C*k*k, Ho*Wo], row index (c*k + ky)*k + kx.
template <class T>
void im2col(const T* src, int channels, int height, int width, const ConvGeometry& g, T* cols) {
  const int k = g.kernel, pad = g.pad(), st = g.stride;
  const int ho = g.out_extent(height), wo = g.out_extent(width);
  for (int c = 0; c < channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + (std::size_t(c * k + ky) * k + kx) * std::size_t(ho) * wo;
        const T* plane = src + std::size_t(c) * height * width;
        const int offset = kx * g.dilation - pad;
        const auto [lo, hi] = valid_span(wo, width, st, offset);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * st - pad + ky * g.dilation;
          T* out = row + std::size_t(oy) * wo;
          if (iy < 0 || iy >= height) {
            std::fill_n(out, wo, T(0));
            continue;
          }
          const T* line = plane + std::size_t(iy) * width;
          std::fill_n(out, lo, T(0));
          if (st == 1)
            std::copy(line + lo + offset, line + hi + offset, out + lo);
          else
            for (int ox = lo; ox < hi; ++ox) out[ox] = line[ox * st + offset];
          std::fill(out + hi, out + wo, T(0));
        }
      }
}

// Adjoint of im2col: accumulates into dst.
template <class T>
void col2im(const T* cols, int channels, int height, int width, const ConvGeometry& g, T* dst) {
  const int k = g.kernel, pad = g.pad(), st = g.stride;
  const int ho = g.out_extent(height), wo = g.out_extent(width);
  for (int c = 0; c < channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + (std::size_t(c * k + ky) * k + kx) * std::size_t(ho) * wo;
        T* plane = dst + std::size_t(c) * height * width;
        const int offset = kx * g.dilation - pad;
        const auto [lo, hi] = valid_span(wo, width, st, offset);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * st - pad + ky * g.dilation;
          if (iy < 0 || iy >= height) continue;
          const T* in = row + std::size_t(oy) * wo;
          T* line = plane + std::size_t(iy) * width + (lo * st + offset);
          const T* src = in + lo;
          if (st == 1)
            for (int i = 0; i < hi - lo; ++i) line[i] += src[i];
          else
            for (int i = 0; i < hi - lo; ++i) line[i * st] += src[i];
        }
      }
}

inline void check_conv_input(const Shape& x, const Shape& w, const ConvGeometry& g, const std::string& name) {
  if (g.kernel % 2 != 1 || g.stride < 1 || g.dilation < 1)
    throw ConfigError(name + ": kernel must be odd, stride and dilation >= 1");
  if (w.c * g.kernel * g.kernel != int(w.sample()) || w.h != g.kernel || w.w != g.kernel)
    throw ShapeError(name + ": weight shape " + w.str() + " does not match kernel " + std::to_string(g.kernel));
  if (x.c != w.c)
    throw ShapeError(name + ": expected " + std::to_string(w.c) + " input channels, got " + std::to_string(x.c));
}

}  // namespace detail

// Plain convolution. weight [O,C,k,k], bias [1,O,1,1].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvGeometry g,
              const std::string& name = "conv2d") {
  detail::check_conv_input(x.shape(), weight.shape(), g, name);
  const Shape xs = x.shape();
  const int out_c = weight.shape().n;
  const int ho = g.out_extent(xs.h), wo = g.out_extent(xs.w);
  const int depth = xs.c * g.kernel * g.kernel;
  const int positions = ho * wo;
  Tensor<T> out(Shape{xs.n, out_c, ho, wo});
  auto cols = detail::scratch<T>(std::size_t(depth) * positions);
  ConstMatrixMap<T> W(weight.value().data(), out_c, depth);
  for (int n = 0; n < xs.n; ++n) {
    detail::im2col(x.value().sample(n), xs.c, xs.h, xs.w, g, cols.get());
    MatrixMap<T> Y(out.sample(n), out_c, positions);
    Y.noalias() = W * ConstMatrixMap<T>(cols.get(), depth, positions);
    for (int o = 0; o < out_c; ++o) Y.row(o).array() += bias.value()[std::size_t(o)];
  }
  return make_result<T>(std::move(out), {x, weight, bias}, [g, depth, positions, out_c](Node<T>& self) {
    const Tensor<T>& xv = self.parents[0]->value;
    const Shape xs = xv.shape();
    ConstMatrixMap<T> W(self.parents[1]->value.data(), out_c, depth);
    Tensor<T>* gx = detail::grad_of(self, 0);
    Tensor<T>* gw = detail::grad_of(self, 1);
    Tensor<T>* gb = detail::grad_of(self, 2);
    auto cols = detail::scratch<T>(std::size_t(depth) * positions);
    auto dcols = detail::scratch<T>(gx ? std::size_t(depth) * positions : 0);
    for (int n = 0; n < xs.n; ++n) {
      ConstMatrixMap<T> dY(self.grad.sample(n), out_c, positions);
      if (gb)
        for (int o = 0; o < out_c; ++o) (*gb)[std::size_t(o)] += dY.row(o).sum();
      if (gw) {
        detail::im2col(xv.sample(n), xs.c, xs.h, xs.w, g, cols.get());
        MatrixMap<T>(gw->data(), out_c, depth).noalias() +=
            dY * ConstMatrixMap<T>(cols.get(), depth, positions).transpose();
      }
      if (gx) {
        MatrixMap<T>(dcols.get(), depth, positions).noalias() = W.transpose() * dY;
        detail::col2im(dcols.get(), xs.c, xs.h, xs.w, g, gx->sample(n));
      }
    }
  });
}

// act(conv_f(x)) * sigmoid(conv_g(x)) with one shared column buffer.
template <class T>
Var<T> gated_conv2d(const Var<T>& x, const Var<T>& wf, const Var<T>& bf, const Var<T>& wg, const Var<T>& bg,
                    ConvGeometry g, Activation act, const std::string& name = "gated_conv") {
  detail::check_conv_input(x.shape(), wf.shape(), g, name);
  require_same_shape(wf.shape(), wg.shape(), name + " feature/gate weights");
  const Shape xs = x.shape();
  const int out_c = wf.shape().n;
  const int ho = g.out_extent(xs.h), wo = g.out_extent(xs.w);
  const int depth = xs.c * g.kernel * g.kernel;
  const int positions = ho * wo;
  const Shape os{xs.n, out_c, ho, wo};
  Tensor<T> out(os), feat(os), gate(os);
  auto cols = detail::scratch<T>(std::size_t(depth) * positions);
  ConstMatrixMap<T> Wf(wf.value().data(), out_c, depth);
  ConstMatrixMap<T> Wg(wg.value().data(), out_c, depth);
  for (int n = 0; n < xs.n; ++n) {
    detail::im2col(x.value().sample(n), xs.c, xs.h, xs.w, g, cols.get());
    ConstMatrixMap<T> C(cols.get(), depth, positions);
    MatrixMap<T> F(feat.sample(n), out_c, positions);
    MatrixMap<T> G(gate.sample(n), out_c, positions);
    F.noalias() = Wf * C;
    G.noalias() = Wg * C;
    for (int o = 0; o < out_c; ++o) {
      F.row(o).array() += bf.value()[std::size_t(o)];
      G.row(o).array() += bg.value()[std::size_t(o)];
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    feat[i] = activate(act, feat[i]);
    gate[i] = activate(Activation::sigmoid, gate[i]);
    out[i] = feat[i] * gate[i];
  }
  return make_result<T>(
      std::move(out), {x, wf, bf, wg, bg},
      [g, act, depth, positions, out_c, feat = std::move(feat), gate = std::move(gate)](Node<T>& self) {
        const Tensor<T>& xv = self.parents[0]->value;
        const Shape xs = xv.shape();
        Tensor<T>* gx = detail::grad_of(self, 0);
        Tensor<T>* gwf = detail::grad_of(self, 1);
        Tensor<T>* gbf = detail::grad_of(self, 2);
        Tensor<T>* gwg = detail::grad_of(self, 3);
        Tensor<T>* gbg = detail::grad_of(self, 4);
        // pre-activation gradients of both branches
        Tensor<T> dzf(feat.shape()), dzg(gate.shape());
        for (std::size_t i = 0; i < dzf.size(); ++i) {
          const T dy = self.grad[i];
          dzf[i] = dy * gate[i] * activate_grad_from_output(act, feat[i]);
          dzg[i] = dy * feat[i] * gate[i] * (T(1) - gate[i]);
        }
        ConstMatrixMap<T> Wf(self.parents[1]->value.data(), out_c, depth);
        ConstMatrixMap<T> Wg(self.parents[3]->value.data(), out_c, depth);
        auto cols = detail::scratch<T>(std::size_t(depth) * positions);
        auto dcols = detail::scratch<T>(gx ? std::size_t(depth) * positions : 0);
        for (int n = 0; n < xs.n; ++n) {
          ConstMatrixMap<T> dF(dzf.sample(n), out_c, positions);
          ConstMatrixMap<T> dG(dzg.sample(n), out_c, positions);
          if (gbf)
            for (int o = 0; o < out_c; ++o) (*gbf)[std::size_t(o)] += dF.row(o).sum();
          if (gbg)
            for (int o = 0; o < out_c; ++o) (*gbg)[std::size_t(o)] += dG.row(o).sum();
          if (gwf || gwg) {
            detail::im2col(xv.sample(n), xs.c, xs.h, xs.w, g, cols.get());
            ConstMatrixMap<T> C(cols.get(), depth, positions);
            if (gwf) MatrixMap<T>(gwf->data(), out_c, depth).noalias() += dF * C.transpose();
            if (gwg) MatrixMap<T>(gwg->data(), out_c, depth).noalias() += dG * C.transpose();
          }
          if (gx) {
            MatrixMap<T> dC(dcols.get(), depth, positions);
            dC.noalias() = Wf.transpose() * dF;
            dC.noalias() += Wg.transpose() * dG;
            detail::col2im(dcols.get(), xs.c, xs.h, xs.w, g, gx->sample(n));
          }
        }
      });
}

// ---- resampling ----------------------------------------------------------

template <class T>
Var<T> upsample_nearest(const Var<T>& x, int factor) {
  if (factor < 1) throw ArgumentError("upsample_nearest: factor must be >= 1");
  const Shape s = x.shape();
  const Shape os{s.n, s.c, s.h * factor, s.w * factor};
  Tensor<T> out(os);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* src = x.value().plane(n, c);
      T* dst = out.plane(n, c);
      for (int y = 0; y < os.h; ++y)
        for (int xx = 0; xx < os.w; ++xx) dst[y * os.w + xx] = src[(y / factor) * s.w + xx / factor];
    }
  return make_result<T>(std::move(out), {x}, [factor](Node<T>& self) {
    Tensor<T>* gx = detail::grad_of(self, 0);
    if (!gx) return;
    const Shape s = gx->shape();
    const Shape os = self.value.shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* src = self.grad.plane(n, c);
        T* dst = gx->plane(n, c);
        for (int y = 0; y < os.h; ++y)
          for (int xx = 0; xx < os.w; ++xx) dst[(y / factor) * s.w + xx / factor] += src[y * os.w + xx];
      }
  });
}

namespace detail {

struct LinearTap {
  int i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

// Half-pixel centers (corner alignment off), border-clamped.
inline std::vector<LinearTap> bilinear_taps(int in, int out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  const double ratio = double(in) / double(out);
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    int i0 = int(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[std::size_t(o)] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace detail

template <class T>
Var<T> upsample_bilinear(const Var<T>& x, int factor) {
  if (!is_power_of_two(factor)) throw ArgumentError("upsample: factor must be a power of 2, got " + std::to_string(factor));
  const Shape s = x.shape();
  const Shape os{s.n, s.c, s.h * factor, s.w * factor};
  const auto ty = detail::bilinear_taps(s.h, os.h);
  const auto tx = detail::bilinear_taps(s.w, os.w);
  Tensor<T> out(os);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* src = x.value().plane(n, c);
      T* dst = out.plane(n, c);
      for (int y = 0; y < os.h; ++y) {
        const auto& a = ty[std::size_t(y)];
        for (int xx = 0; xx < os.w; ++xx) {
          const auto& b = tx[std::size_t(xx)];
          const T top = T(1 - b.w1) * src[a.i0 * s.w + b.i0] + T(b.w1) * src[a.i0 * s.w + b.i1];
          const T bot = T(1 - b.w1) * src[a.i1 * s.w + b.i0] + T(b.w1) * src[a.i1 * s.w + b.i1];
          dst[y * os.w + xx] = T(1 - a.w1) * top + T(a.w1) * bot;
        }
      }
    }
  return make_result<T>(std::move(out), {x}, [ty, tx](Node<T>& self) {
    Tensor<T>* gx = detail::grad_of(self, 0);
    if (!gx) return;
    const Shape s = gx->shape();
    const Shape os = self.value.shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* src = self.grad.plane(n, c);
        T* dst = gx->plane(n, c);
        for (int y = 0; y < os.h; ++y) {
          const auto& a = ty[std::size_t(y)];
          for (int xx = 0; xx < os.w; ++xx) {
            const auto& b = tx[std::size_t(xx)];
            const T d = src[y * os.w + xx];
            dst[a.i0 * s.w + b.i0] += T((1 - a.w1) * (1 - b.w1)) * d;
            dst[a.i0 * s.w + b.i1] += T((1 - a.w1) * b.w1) * d;
            dst[a.i1 * s.w + b.i0] += T(a.w1 * (1 - b.w1)) * d;
            dst[a.i1 * s.w + b.i1] += T(a.w1 * b.w1) * d;
          }
        }
      }
  });
}

template <class T>
Var<T> downsample_area(const Var<T>& x, int factor) {
  if (!is_power_of_two(factor)) throw ArgumentError("downsample: factor must be a power of 2, got " + std::to_string(factor));
  const Shape s = x.shape();
  if (s.h % factor || s.w % factor)
    throw ConfigError("downsample: size " + s.str() + " not divisible by " + std::to_string(factor));
  const Shape os{s.n, s.c, s.h / factor, s.w / factor};
  const T inv = T(1) / T(factor * factor);
  Tensor<T> out(os);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* src = x.value().plane(n, c);
      T* dst = out.plane(n, c);
      for (int y = 0; y < os.h; ++y)
        for (int xx = 0; xx < os.w; ++xx) {
          T acc = 0;
          for (int dy = 0; dy < factor; ++dy)
            for (int dx = 0; dx < factor; ++dx) acc += src[(y * factor + dy) * s.w + xx * factor + dx];
          dst[y * os.w + xx] = acc * inv;
        }
    }
  return make_result<T>(std::move(out), {x}, [factor, inv](Node<T>& self) {
    Tensor<T>* gx = detail::grad_of(self, 0);
    if (!gx) return;
    const Shape s = gx->shape();
    const Shape os = self.value.shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* src = self.grad.plane(n, c);
        T* dst = gx->plane(n, c);
        for (int y = 0; y < s.h; ++y)
          for (int xx = 0; xx < s.w; ++xx) dst[y * s.w + xx] += src[(y / factor) * os.w + xx / factor] * inv;
      }
  });
}

// Binary max-pooling of a [N,1,H,W] mask: a block is a hole if any pixel is.
template <class T>
Tensor<T> pool_mask_max(const Tensor<T>& mask, int factor) {
  const Shape s = mask.shape();
  if (s.h % factor || s.w % factor)
    throw ConfigError("mask pooling: size " + s.str() + " not divisible by " + std::to_string(factor));
  Tensor<T> out(Shape{s.n, s.c, s.h / factor, s.w / factor});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x)
          if (mask.at(n, c, y, x) != T(0)) out.at(n, c, y / factor, x / factor) = T(1);
  return out;
}

}  // namespace pyragen
