#pragma once

// Brute-force re-statements of library operations, kept independent of the
// library code paths they check.

#include <cmath>
#include <utility>
#include <vector>

#include "lpm/conv_lstm.hpp"
#include "lpm/heatmap.hpp"

namespace lpm::testing {

// Independent scalar convolution used as the oracle for both library paths.
template <typename T>
Tensor<T> naive_conv(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  Tensor<T> out({cout, oh, ow});
  for (int o = 0; o < cout; ++o)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        T acc = b[o];
        for (int c = 0; c < cin; ++c)
          for (int u = 0; u < kh; ++u)
            for (int v = 0; v < kw; ++v) {
              const int y = i * stride + u - pad, xx = j * stride + v - pad;
              if (y >= 0 && y < h && xx >= 0 && xx < wd)
                acc += x(c, y, xx) * w[((static_cast<std::size_t>(o) * cin + c) * kh + u) * kw + v];
            }
        out(o, i, j) = acc;
      }
  return out;
}

/// Max over each k x k window with the given stride.
template <typename T>
Tensor<T> naive_pool(const Tensor<T>& x, int k, int stride) {
  const int c = x.dim(0), oh = (x.dim(1) - k) / stride + 1, ow = (x.dim(2) - k) / stride + 1;
  Tensor<T> out({c, oh, ow});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        T best = x(ch, i * stride, j * stride);
        for (int u = 0; u < k; ++u)
          for (int v = 0; v < k; ++v) best = std::max(best, x(ch, i * stride + u, j * stride + v));
        out(ch, i, j) = best;
      }
  return out;
}

// Scalar re-statement of the cell, written directly from the six update lines.
struct ScalarCell {
  int cx, m, h, w;
  std::vector<double> wx[4], wh[4], b[4];

  double conv_at(const std::vector<double>& k, int cin, const std::vector<double>& in, int o, int y, int x) const {
    double acc = 0;
    for (int c = 0; c < cin; ++c)
      for (int u = 0; u < 3; ++u)
        for (int v = 0; v < 3; ++v) {
          const int yy = y + u - 1, xx = x + v - 1;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          acc += k[((o * cin + c) * 3 + u) * 3 + v] * in[(c * h + yy) * w + xx];
        }
    return acc;
  }

  // Returns {C, h}; `first` drops both the recurrent terms and the forget product.
  std::pair<std::vector<double>, std::vector<double>> step(const std::vector<double>& x, const std::vector<double>& c_prev,
                                                         const std::vector<double>& h_prev, bool first) const {
    std::vector<double> c_new(m * h * w), h_new(m * h * w);
    for (int o = 0; o < m; ++o)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          double pre[4];
          for (int k = 0; k < 4; ++k) {
            pre[k] = conv_at(wx[k], cx, x, o, y, xx) + b[k][o];
            if (!first) pre[k] += conv_at(wh[k], m, h_prev, o, y, xx);
          }
          const double g = std::tanh(pre[0]);
          const double i = 1 / (1 + std::exp(-pre[1]));
          const double f = 1 / (1 + std::exp(-pre[2]));
          const double og = 1 / (1 + std::exp(-pre[3]));
          const int idx = (o * h + y) * w + xx;
          const double c = first ? i * g : f * c_prev[idx] + i * g;
          c_new[idx] = c;
          h_new[idx] = og * std::tanh(c);
        }
    return {c_new, h_new};
  }
};

template <typename T>
ScalarCell scalar_from(const ConvLstmParams<T>& p, int h, int w) {
  ScalarCell s{p.input_channels(), p.memory_channels(), h, w, {}, {}, {}};
  for (int k = 0; k < 4; ++k) {
    s.wx[k].assign(p.wx[k].storage().begin(), p.wx[k].storage().end());
    s.wh[k].assign(p.wh[k].storage().begin(), p.wh[k].storage().end());
    s.b[k].assign(p.bias[k].storage().begin(), p.bias[k].storage().end());
  }
  return s;
}

template <typename T>
std::vector<double> as_double(const Tensor<T>& t) {
  return {t.storage().begin(), t.storage().end()};
}

/// Per-joint percentages (NaN when never visible) by a direct loop over frames.
inline std::vector<double> brute_pck(const std::vector<std::vector<Point>>& preds, const std::vector<JointSet>& gts,
                                     double alpha) {
  const std::size_t p = gts.at(0).joints.size();
  std::vector<double> out;
  for (std::size_t j = 0; j < p; ++j) {
    int ok = 0, n = 0;
    for (std::size_t f = 0; f < gts.size(); ++f) {
      if (!gts[f].visible[j]) continue;
      ++n;
      const double dx = preds[f][j].x - gts[f].joints[j].x, dy = preds[f][j].y - gts[f].joints[j].y;
      const double side = gts[f].bbox.w > gts[f].bbox.h ? gts[f].bbox.w : gts[f].bbox.h;
      if (dx * dx + dy * dy <= alpha * side * alpha * side) ++ok;
    }
    out.push_back(n == 0 ? std::nan("") : 100.0 * ok / n);
  }
  return out;
}

}  // namespace lpm::testing
