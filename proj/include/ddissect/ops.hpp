#pragma once

// Differentiable tensor ops. Every op validates shapes and finiteness on
// entry, computes the forward value, and (when a tape is supplied and some
// input requires grad) records a backward closure that accumulates into the
// inputs' gradient buffers.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <vector>

#include "ddissect/tensor.hpp"

namespace ddissect::ops {

namespace detail {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapRM = Eigen::Map<RowMat<S>>;
template <class S>
using CMapRM = Eigen::Map<const RowMat<S>>;

template <class S>
bool tracked(TapeT<S>* tape, std::initializer_list<const TensorT<S>*> inputs) {
  if (!tape) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Unpacks one image of x (pad/stride applied) into a rows x cols patch matrix,
// rows = C*kh*kw, cols = oh*ow, row-major.
template <class S>
void im2col(const TensorT<S>& x, int n, int kh, int kw, int stride, int pad, int oh, int ow,
            S* col) {
  const Shape& s = x.shape();
  const S* base = x.data().data() + static_cast<long long>(n) * s.c * s.h * s.w;
  long long r = 0;
  for (int c = 0; c < s.c; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx, ++r) {
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          S* dst = col + (r * oh + oy) * ow;
          if (iy < 0 || iy >= s.h) {
            std::fill(dst, dst + ow, S(0));
            continue;
          }
          const S* src = base + (static_cast<long long>(c) * s.h + iy) * s.w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < s.w) ? src[ix] : S(0);
          }
        }
      }
    }
  }
}

// Scatter-add of a patch-matrix gradient back onto one image gradient.
template <class S>
void col2im_add(const S* col, int C, int H, int W, int kh, int kw, int stride, int pad, int oh,
                int ow, S* dx) {
  long long r = 0;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx, ++r) {
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          const S* srow = col + (r * oh + oy) * ow;
          S* drow = dx + (static_cast<long long>(c) * H + iy) * W;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

template <class S, class Fwd, class Deriv>
TensorT<S> map_unary(const char* name, const TensorT<S>& x, TapeT<S>* tape, Fwd fwd, Deriv deriv) {
  check_finite(x, name);
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = fwd(xv[i]);
  if (tracked(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record(name, out, [x = x, out = out, deriv]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto xv2 = x.data();
      auto ov2 = out.data();
      auto dx = x.grad_buffer();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * deriv(xv2[i], ov2[i]);
    });
  }
  return out;
}

}  // namespace detail

// --- convolution -----------------------------------------------------------

// weight: (K, C, kh, kw); bias: (1, K, 1, 1). Output spatial dims follow
// floor((H + 2*pad - k) / stride) + 1.
template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& weight, const TensorT<S>& bias,
                  int stride, int padding, TapeT<S>* tape = nullptr) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  expect(stride >= 1, "conv2d: stride must be >= 1");
  expect(padding >= 0, "conv2d: padding must be >= 0");
  expect(xs.c == ws.c,
         msg("conv2d: input channels ", xs.c, " != kernel channels ", ws.c));
  expect(bias.shape() == Shape{1, ws.n, 1, 1},
         msg("conv2d: bias shape ", bias.shape().str(), " != (1,", ws.n, ",1,1)"));
  expect(xs.h + 2 * padding >= ws.h && xs.w + 2 * padding >= ws.w,
         msg("conv2d: kernel ", ws.h, "x", ws.w, " does not fit padded input ",
             xs.h + 2 * padding, "x", xs.w + 2 * padding));
  check_finite(x, "conv2d input");
  check_finite(weight, "conv2d weight");
  check_finite(bias, "conv2d bias");

  const int K = ws.n, kh = ws.h, kw = ws.w;
  const int oh = (xs.h + 2 * padding - kh) / stride + 1;
  const int ow = (xs.w + 2 * padding - kw) / stride + 1;
  const long long rows = static_cast<long long>(xs.c) * kh * kw;
  const long long cols = static_cast<long long>(oh) * ow;
  // 1x1/stride-1 convs skip im2col entirely: the image plane already is the
  // patch matrix.
  const bool pointwise = (kh == 1 && kw == 1 && stride == 1 && padding == 0);

  TensorT<S> out = TensorT<S>::zeros({xs.n, K, oh, ow});
  {
    std::vector<S> colbuf(pointwise ? 0 : static_cast<std::size_t>(rows * cols));
    detail::CMapRM<S> wm(weight.data().data(), K, rows);
    for (int n = 0; n < xs.n; ++n) {
      const S* col = nullptr;
      if (pointwise) {
        col = x.data().data() + static_cast<long long>(n) * rows * cols;
      } else {
        detail::im2col(x, n, kh, kw, stride, padding, oh, ow, colbuf.data());
        col = colbuf.data();
      }
      detail::CMapRM<S> cm(col, rows, cols);
      detail::MapRM<S> ym(out.data().data() + static_cast<long long>(n) * K * cols, K, cols);
      ym.noalias() = wm * cm;
      for (int k = 0; k < K; ++k) ym.row(k).array() += bias.data()[k];
    }
  }

  if (detail::tracked(tape, {&x, &weight, &bias})) {
    out.set_requires_grad(true);
    tape->record("conv2d", out, [x = x, weight = weight, bias = bias, out = out, stride, padding, K,
                            kh, kw, oh, ow, rows, cols, pointwise]() mutable {
      if (!out.has_grad()) return;
      const Shape& xs2 = x.shape();
      const bool need_dx = x.requires_grad();
      const bool need_dw = weight.requires_grad();
      const bool need_db = bias.requires_grad();
      std::vector<S> colbuf((need_dw && !pointwise) ? static_cast<std::size_t>(rows * cols) : 0);
      std::vector<S> dcolbuf((need_dx && !pointwise) ? static_cast<std::size_t>(rows * cols) : 0);
      detail::CMapRM<S> wm(weight.data().data(), K, rows);
      for (int n = 0; n < xs2.n; ++n) {
        detail::CMapRM<S> gy(out.grad().data() + static_cast<long long>(n) * K * cols, K, cols);
        if (need_dw) {
          const S* col = pointwise ? x.data().data() + static_cast<long long>(n) * rows * cols
                                   : colbuf.data();
          if (!pointwise) detail::im2col(x, n, kh, kw, stride, padding, oh, ow, colbuf.data());
          detail::CMapRM<S> cm(col, rows, cols);
          detail::MapRM<S> dwm(weight.grad_buffer().data(), K, rows);
          dwm.noalias() += gy * cm.transpose();
        }
        if (need_db) {
          // scalar loop: Eigen's redux groups lanes by runtime pointer
          // alignment, which breaks bit-reproducibility across allocations
          auto db = bias.grad_buffer();
          const S* gp = out.grad().data() + static_cast<long long>(n) * K * cols;
          for (int k = 0; k < K; ++k) {
            double acc = 0.0;
            for (long long c = 0; c < cols; ++c)
              acc += static_cast<double>(gp[k * cols + c]);
            db[k] += static_cast<S>(acc);
          }
        }
        if (need_dx) {
          S* dximg = x.grad_buffer().data() + static_cast<long long>(n) * xs2.c * xs2.h * xs2.w;
          if (pointwise) {
            detail::MapRM<S> dxm(dximg, rows, cols);
            dxm.noalias() += wm.transpose() * gy;
          } else {
            detail::MapRM<S> dcm(dcolbuf.data(), rows, cols);
            dcm.noalias() = wm.transpose() * gy;
            detail::col2im_add(dcolbuf.data(), xs2.c, xs2.h, xs2.w, kh, kw, stride, padding, oh,
                               ow, dximg);
          }
        }
      }
    });
  }
  return out;
}

// --- activations -----------------------------------------------------------

template <class S>
TensorT<S> relu(const TensorT<S>& x, TapeT<S>* tape = nullptr) {
  return detail::map_unary(
      "relu", x, tape, [](S v) { return v > S(0) ? v : S(0); },
      [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

// ELU(x) = x for x >= 0, exp(x) - 1 otherwise.
template <class S>
TensorT<S> elu(const TensorT<S>& x, TapeT<S>* tape = nullptr) {
  return detail::map_unary(
      "elu", x, tape,
      [](S v) { return v >= S(0) ? v : S(std::expm1(static_cast<double>(v))); },
      [](S v, S o) { return v >= S(0) ? S(1) : o + S(1); });
}

// --- elementwise -----------------------------------------------------------

template <class S>
TensorT<S> absval(const TensorT<S>& x, TapeT<S>* tape = nullptr) {
  return detail::map_unary(
      "abs", x, tape, [](S v) { return v < S(0) ? -v : v; },
      [](S v, S) { return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0)); });
}

template <class S>
TensorT<S> expval(const TensorT<S>& x, TapeT<S>* tape = nullptr) {
  return detail::map_unary(
      "exp", x, tape, [](S v) { return S(std::exp(static_cast<double>(v))); },
      [](S, S o) { return o; });
}

template <class S>
TensorT<S> clamp(const TensorT<S>& x, S lo, S hi, TapeT<S>* tape = nullptr) {
  expect(lo <= hi, "clamp: lo > hi");
  return detail::map_unary(
      "clamp", x, tape, [lo, hi](S v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](S v, S) { return (v >= lo && v <= hi) ? S(1) : S(0); });
}

// a*x + b with constant coefficients.
template <class S>
TensorT<S> affine(const TensorT<S>& x, S a, S b, TapeT<S>* tape = nullptr) {
  return detail::map_unary(
      "affine", x, tape, [a, b](S v) { return a * v + b; }, [a](S, S) { return a; });
}

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b, TapeT<S>* tape = nullptr) {
  expect(a.shape() == b.shape(), msg("add: shape ", a.shape().str(), " != ", b.shape().str()));
  check_finite(a, "add");
  check_finite(b, "add");
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (detail::tracked(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record("add", out, [a = a, b = b, out = out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto da = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b, TapeT<S>* tape = nullptr) {
  expect(a.shape() == b.shape(), msg("sub: shape ", a.shape().str(), " != ", b.shape().str()));
  check_finite(a, "sub");
  check_finite(b, "sub");
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (detail::tracked(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record("sub", out, [a = a, b = b, out = out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto da = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b, TapeT<S>* tape = nullptr) {
  expect(a.shape() == b.shape(), msg("mul: shape ", a.shape().str(), " != ", b.shape().str()));
  check_finite(a, "mul");
  check_finite(b, "mul");
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (detail::tracked(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record("mul", out, [a = a, b = b, out = out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto av2 = a.data(), bv2 = b.data();
      if (a.requires_grad()) {
        auto da = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv2[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av2[i];
      }
    });
  }
  return out;
}

// --- resampling ------------------------------------------------------------

namespace detail {

struct LerpAxis {
  std::vector<int> i0, i1;
  std::vector<double> f;
};

inline LerpAxis lerp_axis(int in, int out) {
  LerpAxis a;
  a.i0.resize(out);
  a.i1.resize(out);
  a.f.resize(out);
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * (static_cast<double>(in) / out) - 0.5;
    src = std::min(std::max(src, 0.0), static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(src));
    a.i0[o] = lo;
    a.i1[o] = std::min(lo + 1, in - 1);
    a.f[o] = src - lo;
  }
  return a;
}

// Half-down rounding of the half-pixel source coordinate.
inline std::vector<int> nearest_axis(int in, int out) {
  std::vector<int> idx(out);
  for (int o = 0; o < out; ++o) {
    const double src = (o + 0.5) * (static_cast<double>(in) / out) - 0.5;
    int i = static_cast<int>(std::ceil(src - 0.5));
    idx[o] = std::min(std::max(i, 0), in - 1);
  }
  return idx;
}

}  // namespace detail

// Half-pixel coordinate mapping, exact identity when sizes match (the input
// handle itself is returned, so gradients flow through untouched).
template <class S>
TensorT<S> resize_bilinear(const TensorT<S>& x, int out_h, int out_w, TapeT<S>* tape = nullptr) {
  expect(out_h >= 1 && out_w >= 1, "resize_bilinear: output dims must be >= 1");
  const Shape& s = x.shape();
  if (out_h == s.h && out_w == s.w) return x;
  check_finite(x, "resize_bilinear");

  const auto ay = detail::lerp_axis(s.h, out_h);
  const auto ax = detail::lerp_axis(s.w, out_w);
  TensorT<S> out = TensorT<S>::zeros({s.n, s.c, out_h, out_w});
  const S* src = x.data().data();
  S* dst = out.data().data();
  const long long in_plane = static_cast<long long>(s.h) * s.w;
  const long long out_plane = static_cast<long long>(out_h) * out_w;
  for (long long p = 0; p < static_cast<long long>(s.n) * s.c; ++p) {
    const S* sp = src + p * in_plane;
    S* dp = dst + p * out_plane;
    for (int oy = 0; oy < out_h; ++oy) {
      const S* r0 = sp + static_cast<long long>(ay.i0[oy]) * s.w;
      const S* r1 = sp + static_cast<long long>(ay.i1[oy]) * s.w;
      const double fy = ay.f[oy];
      for (int ox = 0; ox < out_w; ++ox) {
        const double fx = ax.f[ox];
        const double top = (1.0 - fx) * r0[ax.i0[ox]] + fx * r0[ax.i1[ox]];
        const double bot = (1.0 - fx) * r1[ax.i0[ox]] + fx * r1[ax.i1[ox]];
        dp[oy * static_cast<long long>(out_w) + ox] = static_cast<S>((1.0 - fy) * top + fy * bot);
      }
    }
  }

  if (detail::tracked(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record("resize_bilinear", out, [x = x, out = out, ay, ax, out_h, out_w]() mutable {
      if (!out.has_grad()) return;
      const Shape& s2 = x.shape();
      auto g = out.grad();
      auto dx = x.grad_buffer();
      const long long in_plane2 = static_cast<long long>(s2.h) * s2.w;
      const long long out_plane2 = static_cast<long long>(out_h) * out_w;
      for (long long p = 0; p < static_cast<long long>(s2.n) * s2.c; ++p) {
        S* dp = dx.data() + p * in_plane2;
        const S* gp = g.data() + p * out_plane2;
        for (int oy = 0; oy < out_h; ++oy) {
          const double fy = ay.f[oy];
          S* r0 = dp + static_cast<long long>(ay.i0[oy]) * s2.w;
          S* r1 = dp + static_cast<long long>(ay.i1[oy]) * s2.w;
          for (int ox = 0; ox < out_w; ++ox) {
            const double fx = ax.f[ox];
            const double gv = gp[oy * static_cast<long long>(out_w) + ox];
            r0[ax.i0[ox]] += static_cast<S>((1.0 - fy) * (1.0 - fx) * gv);
            r0[ax.i1[ox]] += static_cast<S>((1.0 - fy) * fx * gv);
            r1[ax.i0[ox]] += static_cast<S>(fy * (1.0 - fx) * gv);
            r1[ax.i1[ox]] += static_cast<S>(fy * fx * gv);
          }
        }
      }
    });
  }
  return out;
}

// Non-differentiable; intended for ground-truth maps only.
template <class S>
TensorT<S> resize_nearest(const TensorT<S>& x, int out_h, int out_w) {
  expect(out_h >= 1 && out_w >= 1, "resize_nearest: output dims must be >= 1");
  const Shape& s = x.shape();
  if (out_h == s.h && out_w == s.w) return x;
  check_finite(x, "resize_nearest");
  const auto iy = detail::nearest_axis(s.h, out_h);
  const auto ix = detail::nearest_axis(s.w, out_w);
  TensorT<S> out = TensorT<S>::zeros({s.n, s.c, out_h, out_w});
  const long long in_plane = static_cast<long long>(s.h) * s.w;
  const long long out_plane = static_cast<long long>(out_h) * out_w;
  for (long long p = 0; p < static_cast<long long>(s.n) * s.c; ++p) {
    const S* sp = x.data().data() + p * in_plane;
    S* dp = out.data().data() + p * out_plane;
    for (int oy = 0; oy < out_h; ++oy)
      for (int ox = 0; ox < out_w; ++ox)
        dp[oy * static_cast<long long>(out_w) + ox] = sp[static_cast<long long>(iy[oy]) * s.w + ix[ox]];
  }
  return out;
}

// --- reductions --------------------------------------------------------------

enum class Reduce { sum, mean };

// Masked sum/mean over all elements, accumulated in float64. The mask, when
// given, must be binary and match the input shape; an all-zero mask is an
// error ("empty-mask reduction").
template <class S>
TensorT<S> reduce(const TensorT<S>& x, Reduce kind, const TensorT<S>& mask = {},
                  TapeT<S>* tape = nullptr) {
  check_finite(x, "reduce");
  const bool masked = mask.defined();
  if (masked) {
    expect(mask.shape() == x.shape(),
           msg("reduce: mask shape ", mask.shape().str(), " != input shape ", x.shape().str()));
  }
  double acc = 0.0;
  long long count = 0;
  auto xv = x.data();
  if (masked) {
    auto mv = mask.data();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const S m = mv[i];
      expect(m == S(0) || m == S(1), "reduce: mask must be binary");
      if (m == S(1)) {
        acc += static_cast<double>(xv[i]);
        ++count;
      }
    }
    expect(count > 0, "empty-mask reduction");
  } else {
    for (std::size_t i = 0; i < xv.size(); ++i) acc += static_cast<double>(xv[i]);
    count = static_cast<long long>(xv.size());
  }
  const double value = (kind == Reduce::mean) ? acc / static_cast<double>(count) : acc;
  TensorT<S> out = TensorT<S>::from_data({1, 1, 1, 1}, {static_cast<S>(value)});

  if (detail::tracked(tape, {&x})) {
    out.set_requires_grad(true);
    const double factor = (kind == Reduce::mean) ? 1.0 / static_cast<double>(count) : 1.0;
    tape->record("reduce", out, [x = x, out = out, mask = mask, masked, factor]() mutable {
      if (!out.has_grad()) return;
      const double g = static_cast<double>(out.grad()[0]) * factor;
      auto dx = x.grad_buffer();
      if (masked) {
        auto mv = mask.data();
        for (std::size_t i = 0; i < dx.size(); ++i)
          if (mv[i] == S(1)) dx[i] += static_cast<S>(g);
      } else {
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += static_cast<S>(g);
      }
    });
  }
  return out;
}

template <class S>
TensorT<S> reduce_sum(const TensorT<S>& x, const TensorT<S>& mask = {}, TapeT<S>* tape = nullptr) {
  return reduce(x, Reduce::sum, mask, tape);
}

template <class S>
TensorT<S> reduce_mean(const TensorT<S>& x, const TensorT<S>& mask = {}, TapeT<S>* tape = nullptr) {
  return reduce(x, Reduce::mean, mask, tape);
}

}  // namespace ddissect::ops
