#pragma once

// Forward and vector-Jacobian kernels for the primitive operators. These are
// pure functions templated on the scalar type; the tape in autodiff.hpp wraps
// the double instantiations.

#include "dvd/tensor.hpp"

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace dvd {

/// Out-of-range policy for bilinear sampling.
enum class Padding { Border, Zeros, Reflect };

Padding padding_from_string(const std::string& name);
std::string to_string(Padding p);

namespace kernels {

inline Index conv_out_extent(Index in, Index k, Index stride, Index pad) {
  return (in + 2 * pad - k) / stride + 1;
}

template <typename S>
void check_conv_args(const BasicTensor<S>& in, const BasicTensor<S>& w, Index stride, Index pad) {
  require_rank3(in, "conv2d input");
  if (w.rank() != 4) throw ValidationError("conv2d weight: expected [C_out,C_in,k,k], got " + shape_string(w.shape()));
  if (w.dim(1) != in.dim(0)) {
    throw ValidationError("conv2d: C_in mismatch (input channels " + std::to_string(in.dim(0)) +
                          ", weight C_in " + std::to_string(w.dim(1)) + ")");
  }
  if (w.dim(2) != w.dim(3)) throw ValidationError("conv2d: kernel must be square, got " + shape_string(w.shape()));
  if (w.dim(2) % 2 == 0) throw ValidationError("conv2d: kernel size k must be odd, got " + std::to_string(w.dim(2)));
  if (stride < 1) throw ValidationError("conv2d: stride must be >= 1");
  if (pad < 0) throw ValidationError("conv2d: padding must be >= 0");
  const Index k = w.dim(2);
  if (in.dim(1) + 2 * pad < k) throw ValidationError("conv2d: H too small for kernel (H=" + std::to_string(in.dim(1)) + ")");
  if (in.dim(2) + 2 * pad < k) throw ValidationError("conv2d: W too small for kernel (W=" + std::to_string(in.dim(2)) + ")");
}

/// Unfolds zero-padded k×k patches into a [C*k*k, Ho*Wo] row-major matrix.
template <typename S>
typename BasicTensor<S>::RowMatrix im2col(const BasicTensor<S>& in, Index k, Index stride, Index pad) {
  const Index C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const Index Ho = conv_out_extent(H, k, stride, pad), Wo = conv_out_extent(W, k, stride, pad);
  typename BasicTensor<S>::RowMatrix cols(C * k * k, Ho * Wo);
  for (Index c = 0; c < C; ++c) {
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        S* row = cols.row((c * k + ky) * k + kx).data();
        for (Index oy = 0; oy < Ho; ++oy) {
          const Index iy = oy * stride - pad + ky;
          for (Index ox = 0; ox < Wo; ++ox) {
            const Index ix = ox * stride - pad + kx;
            row[oy * Wo + ox] = (iy >= 0 && iy < H && ix >= 0 && ix < W) ? in(c, iy, ix) : S(0);
          }
        }
      }
    }
  }
  return cols;
}

/// Adjoint of im2col: accumulates columns back into a [C,H,W] gradient.
template <typename S>
void col2im(const typename BasicTensor<S>::RowMatrix& cols, Index k, Index stride, Index pad,
            BasicTensor<S>& grad_in) {
  const Index C = grad_in.dim(0), H = grad_in.dim(1), W = grad_in.dim(2);
  const Index Ho = conv_out_extent(H, k, stride, pad), Wo = conv_out_extent(W, k, stride, pad);
  for (Index c = 0; c < C; ++c) {
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        const S* row = cols.row((c * k + ky) * k + kx).data();
        for (Index oy = 0; oy < Ho; ++oy) {
          const Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (Index ox = 0; ox < Wo; ++ox) {
            const Index ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= W) continue;
            grad_in(c, iy, ix) += row[oy * Wo + ox];
          }
        }
      }
    }
  }
}

/// Cross-correlation. input [C_in,H,W], weight [C_out,C_in,k,k] → [C_out,H',W'].
template <typename S>
BasicTensor<S> conv2d(const BasicTensor<S>& in, const BasicTensor<S>& w, Index stride, Index pad) {
  check_conv_args(in, w, stride, pad);
  const Index k = w.dim(2), Co = w.dim(0);
  const Index Ho = conv_out_extent(in.dim(1), k, stride, pad), Wo = conv_out_extent(in.dim(2), k, stride, pad);
  const auto cols = im2col(in, k, stride, pad);
  BasicTensor<S> out({Co, Ho, Wo});
  out.matrix(Co).noalias() = w.matrix(Co) * cols;
  return out;
}

/// VJP of conv2d; either output pointer may be null.
template <typename S>
void conv2d_backward(const BasicTensor<S>& in, const BasicTensor<S>& w, const BasicTensor<S>& grad_out,
                     Index stride, Index pad, BasicTensor<S>* grad_in, BasicTensor<S>* grad_w) {
  const Index k = w.dim(2), Co = w.dim(0);
  const auto g = grad_out.matrix(Co);
  if (grad_w) {
    const auto cols = im2col(in, k, stride, pad);
    grad_w->matrix(Co).noalias() += g * cols.transpose();
  }
  if (grad_in) {
    typename BasicTensor<S>::RowMatrix gcols = w.matrix(Co).transpose() * g;
    col2im<S>(gcols, k, stride, pad, *grad_in);
  }
}

/// Max pooling; `argmax` receives the flat input index feeding each output.
/// Ties resolve to the first element in row-major window order.
template <typename S>
BasicTensor<S> maxpool2d(const BasicTensor<S>& in, Index k, Index stride, std::vector<Index>* argmax = nullptr) {
  require_rank3(in, "maxpool2d input");
  if (k < 1 || stride < 1) throw ValidationError("maxpool2d: k and stride must be >= 1");
  const Index C = in.dim(0), H = in.dim(1), W = in.dim(2);
  if (H < k || W < k) {
    throw ValidationError("maxpool2d: window " + std::to_string(k) + " larger than input " + shape_string(in.shape()));
  }
  const Index Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
  BasicTensor<S> out({C, Ho, Wo});
  if (argmax) argmax->assign(static_cast<std::size_t>(out.size()), 0);
  for (Index c = 0; c < C; ++c) {
    for (Index oy = 0; oy < Ho; ++oy) {
      for (Index ox = 0; ox < Wo; ++ox) {
        Index best = (c * H + oy * stride) * W + ox * stride;
        S best_v = in[best];
        for (Index ky = 0; ky < k; ++ky) {
          for (Index kx = 0; kx < k; ++kx) {
            const Index idx = (c * H + oy * stride + ky) * W + ox * stride + kx;
            if (in[idx] > best_v) {
              best_v = in[idx];
              best = idx;
            }
          }
        }
        const Index o = (c * Ho + oy) * Wo + ox;
        out[o] = best_v;
        if (argmax) (*argmax)[static_cast<std::size_t>(o)] = best;
      }
    }
  }
  return out;
}

/// One axis of a bilinear lookup: value = w0·v[i0] + w1·v[i1] (a tap with
/// valid=false reads zero); d value / d coord = dcoord · (v[i1] − v[i0]).
template <typename S>
struct AxisTaps {
  Index i0, i1;
  S w0, w1;
  bool valid0, valid1;
  S dcoord;
};

template <typename S>
AxisTaps<S> axis_taps(S x, Index n, Padding padding) {
  AxisTaps<S> t{};
  if (padding == Padding::Zeros) {
    const S fl = std::floor(x);
    t.i0 = static_cast<Index>(fl);
    t.i1 = t.i0 + 1;
    t.w1 = x - fl;
    t.w0 = S(1) - t.w1;
    t.valid0 = t.i0 >= 0 && t.i0 < n;
    t.valid1 = t.i1 >= 0 && t.i1 < n;
    t.dcoord = S(1);
    if (!t.valid0) t.i0 = 0;
    if (!t.valid1) t.i1 = 0;
    return t;
  }
  S sign = S(1);
  if (padding == Padding::Reflect) {
    if (n == 1) {
      x = S(0);
      sign = S(0);
    } else {
      const S period = S(2 * (n - 1));
      if (x < 0) {
        x = -x;
        sign = -sign;
      }
      x = std::fmod(x, period);
      if (x > S(n - 1)) {
        x = period - x;
        sign = -sign;
      }
    }
  }
  if (x < S(0)) {
    x = S(0);
    sign = S(0);
  } else if (x > S(n - 1)) {
    x = S(n - 1);
    sign = S(0);
  }
  Index i0 = static_cast<Index>(std::floor(x));
  if (i0 > n - 2) i0 = std::max<Index>(n - 2, 0);
  t.i0 = i0;
  t.i1 = std::min(i0 + 1, n - 1);
  t.w1 = x - S(i0);
  t.w0 = S(1) - t.w1;
  t.valid0 = t.valid1 = true;
  t.dcoord = sign;
  return t;
}

template <typename S>
void check_sample_args(const BasicTensor<S>& in, const BasicTensor<S>& coords) {
  require_rank3(in, "bilinear_sample input");
  if (coords.rank() != 3 || coords.dim(0) != 2) {
    throw ValidationError("bilinear_sample coords: expected [2,H',W'], got " + shape_string(coords.shape()));
  }
  if (!coords.all_finite()) throw ValidationError("bilinear_sample: coords contain non-finite values");
}

/// Samples `in` [C,H,W] at continuous pixel coordinates `coords` [2,H',W']
/// (channel 0 = x, channel 1 = y).
template <typename S>
BasicTensor<S> bilinear_sample(const BasicTensor<S>& in, const BasicTensor<S>& coords,
                               Padding padding = Padding::Border) {
  check_sample_args(in, coords);
  const Index C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const Index Ho = coords.dim(1), Wo = coords.dim(2), P = Ho * Wo;
  BasicTensor<S> out({C, Ho, Wo});
  const S* cx = coords.raw();
  const S* cy = coords.raw() + P;
  for (Index p = 0; p < P; ++p) {
    const auto tx = axis_taps<S>(cx[p], W, padding);
    const auto ty = axis_taps<S>(cy[p], H, padding);
    const bool v00 = ty.valid0 && tx.valid0, v01 = ty.valid0 && tx.valid1;
    const bool v10 = ty.valid1 && tx.valid0, v11 = ty.valid1 && tx.valid1;
    for (Index c = 0; c < C; ++c) {
      const S* plane = in.raw() + c * H * W;
      const S a = v00 ? plane[ty.i0 * W + tx.i0] : S(0);
      const S b = v01 ? plane[ty.i0 * W + tx.i1] : S(0);
      const S d = v10 ? plane[ty.i1 * W + tx.i0] : S(0);
      const S e = v11 ? plane[ty.i1 * W + tx.i1] : S(0);
      out[c * P + p] = ty.w0 * (tx.w0 * a + tx.w1 * b) + ty.w1 * (tx.w0 * d + tx.w1 * e);
    }
  }
  return out;
}

/// VJP of bilinear_sample w.r.t. input and coordinates; either may be null.
template <typename S>
void bilinear_sample_backward(const BasicTensor<S>& in, const BasicTensor<S>& coords, const BasicTensor<S>& grad_out,
                              Padding padding, BasicTensor<S>* grad_in, BasicTensor<S>* grad_coords) {
  const Index C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const Index P = coords.dim(1) * coords.dim(2);
  const S* cx = coords.raw();
  const S* cy = coords.raw() + P;
  for (Index p = 0; p < P; ++p) {
    const auto tx = axis_taps<S>(cx[p], W, padding);
    const auto ty = axis_taps<S>(cy[p], H, padding);
    const bool v00 = ty.valid0 && tx.valid0, v01 = ty.valid0 && tx.valid1;
    const bool v10 = ty.valid1 && tx.valid0, v11 = ty.valid1 && tx.valid1;
    S gx = 0, gy = 0;
    for (Index c = 0; c < C; ++c) {
      const S g = grad_out[c * P + p];
      if (g == S(0)) continue;
      const Index base = c * H * W;
      if (grad_in) {
        S* gplane = grad_in->raw() + base;
        if (v00) gplane[ty.i0 * W + tx.i0] += g * ty.w0 * tx.w0;
        if (v01) gplane[ty.i0 * W + tx.i1] += g * ty.w0 * tx.w1;
        if (v10) gplane[ty.i1 * W + tx.i0] += g * ty.w1 * tx.w0;
        if (v11) gplane[ty.i1 * W + tx.i1] += g * ty.w1 * tx.w1;
      }
      if (grad_coords) {
        const S* plane = in.raw() + base;
        const S a = v00 ? plane[ty.i0 * W + tx.i0] : S(0);
        const S b = v01 ? plane[ty.i0 * W + tx.i1] : S(0);
        const S d = v10 ? plane[ty.i1 * W + tx.i0] : S(0);
        const S e = v11 ? plane[ty.i1 * W + tx.i1] : S(0);
        gx += g * (ty.w0 * (b - a) + ty.w1 * (e - d));
        gy += g * (tx.w0 * (d - a) + tx.w1 * (e - b));
      }
    }
    if (grad_coords) {
      (*grad_coords)[p] += gx * tx.dcoord;
      (*grad_coords)[P + p] += gy * ty.dcoord;
    }
  }
}

struct AxisSplit {
  Index outer, n, inner;
};

inline AxisSplit split_axis(const Shape& shape, Index axis) {
  if (axis < 0) axis += static_cast<Index>(shape.size());
  if (axis < 0 || axis >= static_cast<Index>(shape.size())) {
    throw ValidationError("softmax: axis out of range for shape " + shape_string(shape));
  }
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (Index i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) s.inner *= shape[static_cast<std::size_t>(i)];
  return s;
}

/// Numerically stable softmax along `axis` (negative counts from the end).
template <typename S>
BasicTensor<S> softmax(const BasicTensor<S>& in, Index axis) {
  const auto s = split_axis(in.shape(), axis);
  BasicTensor<S> out(in.shape());
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      const Index base = o * s.n * s.inner + i;
      S m = -std::numeric_limits<S>::infinity();
      for (Index j = 0; j < s.n; ++j) m = std::max(m, in[base + j * s.inner]);
      S total = 0;
      for (Index j = 0; j < s.n; ++j) {
        const S e = std::exp(in[base + j * s.inner] - m);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (Index j = 0; j < s.n; ++j) out[base + j * s.inner] /= total;
    }
  }
  return out;
}

template <typename S>
void softmax_backward(const BasicTensor<S>& out, const BasicTensor<S>& grad_out, Index axis, BasicTensor<S>& grad_in) {
  const auto s = split_axis(out.shape(), axis);
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      const Index base = o * s.n * s.inner + i;
      S dot = 0;
      for (Index j = 0; j < s.n; ++j) dot += out[base + j * s.inner] * grad_out[base + j * s.inner];
      for (Index j = 0; j < s.n; ++j) {
        const Index idx = base + j * s.inner;
        grad_in[idx] += out[idx] * (grad_out[idx] - dot);
      }
    }
  }
}

/// Cosine similarity with each norm floored at `eps`; clamped to [−1, 1].
template <typename S>
S cosine_similarity(std::span<const S> a, std::span<const S> b, S eps = S(1e-8)) {
  if (a.size() != b.size() || a.empty()) {
    throw ValidationError("cosine_similarity: vectors must be non-empty and equal length");
  }
  S dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const S c = dot / (std::max(std::sqrt(na), eps) * std::max(std::sqrt(nb), eps));
  return std::clamp(c, S(-1), S(1));
}

template <typename S>
S cosine_distance(std::span<const S> a, std::span<const S> b, S eps = S(1e-8)) {
  return S(1) - cosine_similarity(a, b, eps);
}

}  // namespace kernels
}  // namespace dvd
