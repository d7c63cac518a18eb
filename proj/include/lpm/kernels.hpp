#pragma once

// Forward/backward numeric kernels on plain tensors. The differentiable ops in
// ops.hpp are thin wrappers that record these on a tape.

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "lpm/tensor.hpp"

namespace lpm::kernels {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
void require_finite(const Tensor<T>& t, const char* op, const char* what) {
  if (!t.all_finite()) {
    throw Error(std::string(op) + ": non-finite value in " + what + " " + to_string(t.shape()));
  }
}

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

struct ConvGeometry {
  int cin, h, w, cout, kh, kw, stride, pad, out_h, out_w;

  int patch() const { return cin * kh * kw; }
  int out_pixels() const { return out_h * out_w; }
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                           int pad) {
  if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1) {
    throw Error("conv2d: expected x [Cin,H,W], w [Cout,Cin,kh,kw], b [Cout]; got " +
                to_string(x.shape()) + ", " + to_string(w.shape()) + ", " + to_string(b.shape()));
  }
  if (stride <= 0 || pad < 0) {
    throw Error("conv2d: stride must be positive and pad nonnegative (stride=" +
                std::to_string(stride) + ", pad=" + std::to_string(pad) + ")");
  }
  if (w.dim(1) != x.dim(0) || b.dim(0) != w.dim(0)) {
    throw Error("conv2d: shape mismatch between input " + to_string(x.shape()) + " and kernel " +
                to_string(w.shape()) + " / bias " + to_string(b.shape()));
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), w.dim(0), w.dim(2), w.dim(3), stride, pad, 0, 0};
  if (g.kh > g.h + 2 * pad || g.kw > g.w + 2 * pad) {
    throw Error("conv2d: kernel " + to_string(w.shape()) + " larger than padded input " +
                to_string(x.shape()));
  }
  g.out_h = conv_out_extent(g.h, g.kh, stride, pad);
  g.out_w = conv_out_extent(g.w, g.kw, stride, pad);
  return g;
}

/// Direct six-nested-loop convolution with zero padding.
template <typename T>
Tensor<T> conv2d_reference(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                           int pad) {
  const ConvGeometry g = conv_geometry(x, w, b, stride, pad);
  Tensor<T> out({g.cout, g.out_h, g.out_w});
  for (int o = 0; o < g.cout; ++o) {
    for (int i = 0; i < g.out_h; ++i) {
      for (int j = 0; j < g.out_w; ++j) {
        T acc = b[o];
        for (int c = 0; c < g.cin; ++c) {
          for (int u = 0; u < g.kh; ++u) {
            for (int v = 0; v < g.kw; ++v) {
              const int y = i * stride + u - pad;
              const int xx = j * stride + v - pad;
              if (y < 0 || y >= g.h || xx < 0 || xx >= g.w) continue;
              acc += x(c, y, xx) * w[((static_cast<std::size_t>(o) * g.cin + c) * g.kh + u) * g.kw + v];
            }
          }
        }
        out(o, i, j) = acc;
      }
    }
  }
  return out;
}

/// Gathers every receptive field into a [Cin*kh*kw, outH*outW] matrix.
template <typename T>
Buffer<T> im2col(const Tensor<T>& x, const ConvGeometry& g) {
  Buffer<T> cols(static_cast<std::size_t>(g.patch()) * g.out_pixels());
  T* dst = cols.data();
  for (int c = 0; c < g.cin; ++c) {
    for (int u = 0; u < g.kh; ++u) {
      for (int v = 0; v < g.kw; ++v) {
        for (int i = 0; i < g.out_h; ++i) {
          const int y = i * g.stride + u - g.pad;
          if (y < 0 || y >= g.h) {
            std::fill(dst, dst + g.out_w, T(0));
            dst += g.out_w;
            continue;
          }
          const T* row = x.data() + (static_cast<std::size_t>(c) * g.h + y) * g.w;
          for (int j = 0; j < g.out_w; ++j) {
            const int xx = j * g.stride + v - g.pad;
            *dst++ = (xx < 0 || xx >= g.w) ? T(0) : row[xx];
          }
        }
      }
    }
  }
  return cols;
}

/// Scatter-adds a patch matrix back onto an input-shaped gradient.
template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, Tensor<T>& dx) {
  const T* src = cols;
  for (int c = 0; c < g.cin; ++c) {
    for (int u = 0; u < g.kh; ++u) {
      for (int v = 0; v < g.kw; ++v) {
        for (int i = 0; i < g.out_h; ++i) {
          const int y = i * g.stride + u - g.pad;
          if (y < 0 || y >= g.h) {
            src += g.out_w;
            continue;
          }
          T* row = dx.data() + (static_cast<std::size_t>(c) * g.h + y) * g.w;
          for (int j = 0; j < g.out_w; ++j) {
            const int xx = j * g.stride + v - g.pad;
            if (xx >= 0 && xx < g.w) row[xx] += *src;
            ++src;
          }
        }
      }
    }
  }
}

/// Patch-gather + GEMM convolution. Returns the output; `cols_out` (if given)
/// receives the patch matrix for reuse in the backward pass.
template <typename T>
Tensor<T> conv2d_gemm(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad,
                      Buffer<T>* cols_out = nullptr) {
  const ConvGeometry g = conv_geometry(x, w, b, stride, pad);
  Buffer<T> cols = im2col(x, g);
  Tensor<T> out({g.cout, g.out_h, g.out_w});
  Eigen::Map<const RowMatrix<T>> wm(w.data(), g.cout, g.patch());
  Eigen::Map<const RowMatrix<T>> cm(cols.data(), g.patch(), g.out_pixels());
  Eigen::Map<RowMatrix<T>> om(out.data(), g.cout, g.out_pixels());
  om.noalias() = wm * cm;
  for (int o = 0; o < g.cout; ++o) om.row(o).array() += b[o];
  if (cols_out != nullptr) *cols_out = std::move(cols);
  return out;
}

/// Backward of conv2d_gemm: accumulates into dx (if non-null), dw, db.
template <typename T>
void conv2d_gemm_backward(const Tensor<T>& dout, const Tensor<T>& w, const Buffer<T>& cols,
                          const ConvGeometry& g, Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* db) {
  Eigen::Map<const RowMatrix<T>> gm(dout.data(), g.cout, g.out_pixels());
  if (dw != nullptr) {
    Eigen::Map<const RowMatrix<T>> cm(cols.data(), g.patch(), g.out_pixels());
    Eigen::Map<RowMatrix<T>> dwm(dw->data(), g.cout, g.patch());
    dwm.noalias() += gm * cm.transpose();
  }
  if (db != nullptr) {
    for (int o = 0; o < g.cout; ++o) (*db)[o] += gm.row(o).sum();
  }
  if (dx != nullptr) {
    Eigen::Map<const RowMatrix<T>> wm(w.data(), g.cout, g.patch());
    RowMatrix<T> dcols = wm.transpose() * gm;
    col2im_add(dcols.data(), g, *dx);
  }
}

/// Windowed max; `argmax` (if given) receives the flat input index of each winner.
/// Ties resolve to the first index in row-major window order.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int k, int stride, std::vector<std::uint32_t>* argmax = nullptr) {
  if (k <= 0 || stride <= 0) {
    throw Error("max_pool2d: kernel and stride must be positive (k=" + std::to_string(k) +
                ", stride=" + std::to_string(stride) + ")");
  }
  if (x.rank() != 3) throw Error("max_pool2d: expected [C,H,W], got " + to_string(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (k > h || k > w) {
    throw Error("max_pool2d: window " + std::to_string(k) + " exceeds input " + to_string(x.shape()));
  }
  const int oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  Tensor<T> out({c, oh, ow});
  if (argmax != nullptr) argmax->resize(out.size());
  std::size_t o = 0;
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j, ++o) {
        std::size_t best = (static_cast<std::size_t>(ch) * h + i * stride) * w + j * stride;
        T best_v = x[best];
        for (int u = 0; u < k; ++u) {
          for (int v = 0; v < k; ++v) {
            const std::size_t idx = (static_cast<std::size_t>(ch) * h + i * stride + u) * w + j * stride + v;
            if (x[idx] > best_v) {
              best_v = x[idx];
              best = idx;
            }
          }
        }
        out[o] = best_v;
        if (argmax != nullptr) (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return out;
}

/// One axis of a half-pixel-centred bilinear resize.
struct LinearTap {
  int lo, hi;
  double frac;
};

inline std::vector<LinearTap> bilinear_taps(int in, int out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int d = 0; d < out; ++d) {
    double src = (d + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const int hi = std::min(lo + 1, in - 1);
    taps[static_cast<std::size_t>(d)] = {lo, hi, src - lo};
  }
  return taps;
}

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) {
    throw Error("upsample_bilinear: output extent must be positive (" + std::to_string(out_h) + "x" +
                std::to_string(out_w) + ")");
  }
  if (x.rank() != 3) throw Error("upsample_bilinear: expected [C,H,W], got " + to_string(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == out_h && w == out_w) return x;
  const auto ty = bilinear_taps(h, out_h);
  const auto tx = bilinear_taps(w, out_w);
  Tensor<T> out({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < out_h; ++i) {
      const auto& a = ty[static_cast<std::size_t>(i)];
      for (int j = 0; j < out_w; ++j) {
        const auto& b = tx[static_cast<std::size_t>(j)];
        const T top = x(ch, a.lo, b.lo) * T(1 - b.frac) + x(ch, a.lo, b.hi) * T(b.frac);
        const T bot = x(ch, a.hi, b.lo) * T(1 - b.frac) + x(ch, a.hi, b.hi) * T(b.frac);
        out(ch, i, j) = top * T(1 - a.frac) + bot * T(a.frac);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> upsample_bilinear_backward(const Tensor<T>& dout, int in_h, int in_w) {
  const int c = dout.dim(0), out_h = dout.dim(1), out_w = dout.dim(2);
  if (in_h == out_h && in_w == out_w) return dout;
  const auto ty = bilinear_taps(in_h, out_h);
  const auto tx = bilinear_taps(in_w, out_w);
  Tensor<T> dx({c, in_h, in_w});
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < out_h; ++i) {
      const auto& a = ty[static_cast<std::size_t>(i)];
      for (int j = 0; j < out_w; ++j) {
        const auto& b = tx[static_cast<std::size_t>(j)];
        const T g = dout(ch, i, j);
        dx(ch, a.lo, b.lo) += g * T((1 - a.frac) * (1 - b.frac));
        dx(ch, a.lo, b.hi) += g * T((1 - a.frac) * b.frac);
        dx(ch, a.hi, b.lo) += g * T(a.frac * (1 - b.frac));
        dx(ch, a.hi, b.hi) += g * T(a.frac * b.frac);
      }
    }
  }
  return dx;
}

template <typename T>
T sigmoid(T v) {
  return T(1) / (T(1) + std::exp(-v));
}

}  // namespace lpm::kernels
