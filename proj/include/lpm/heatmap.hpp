#pragma once

// Coordinate <-> heatmap conversion.
//
// Image coordinates are in input pixels. Heatmap cell (u, v) covers the image
// block [u*f, (u+1)*f) x [v*f, (v+1)*f) for downsample factor f, so its centre
// sits at ((u + 0.5) f, (v + 0.5) f). Encoding places the Gaussian peak at
// x/f - 0.5 in cell units and decoding maps the argmax cell back to its centre.

#include <algorithm>
#include <cmath>
#include <vector>

#include "lpm/tensor.hpp"

namespace lpm {

struct Point {
  double x = 0;
  double y = 0;

  friend bool operator==(const Point&, const Point&) = default;
};

struct BBox {
  double x = 0, y = 0, w = 0, h = 0;

  friend bool operator==(const BBox&, const BBox&) = default;
};

struct JointSet {
  std::vector<Point> joints;
  std::vector<bool> visible;
  BBox bbox;

  int size() const { return static_cast<int>(joints.size()); }
  int visible_count() const { return static_cast<int>(std::count(visible.begin(), visible.end(), true)); }

  friend bool operator==(const JointSet&, const JointSet&) = default;
};

struct Detection {
  double x = 0;
  double y = 0;
  double confidence = 0;
};

/// Per-joint Gaussian targets plus the background channel max(0, 1 - max_p joint_p).
/// Invisible joints get an all-zero channel.
template <typename T = float>
Tensor<T> encode_labels(const JointSet& joints, int heatmap_size, int downsample, double label_sigma) {
  if (label_sigma <= 0) throw Error("encode_labels: label sigma must be positive");
  if (heatmap_size <= 0 || downsample <= 0) throw Error("encode_labels: heatmap size and factor must be positive");
  const int p = joints.size();
  if (static_cast<int>(joints.visible.size()) != p) throw Error("encode_labels: visibility flags do not match joints");
  const int n = heatmap_size;
  Tensor<T> out({p + 1, n, n});
  const double inv = 1.0 / (2 * label_sigma * label_sigma);
  for (int j = 0; j < p; ++j) {
    if (!joints.visible[static_cast<std::size_t>(j)]) continue;
    const double cx = joints.joints[static_cast<std::size_t>(j)].x / downsample - 0.5;
    const double cy = joints.joints[static_cast<std::size_t>(j)].y / downsample - 0.5;
    for (int v = 0; v < n; ++v) {
      for (int u = 0; u < n; ++u) {
        const double d2 = (u - cx) * (u - cx) + (v - cy) * (v - cy);
        out(j, v, u) = static_cast<T>(std::exp(-d2 * inv));
      }
    }
  }
  for (int v = 0; v < n; ++v) {
    for (int u = 0; u < n; ++u) {
      T m = 0;
      for (int j = 0; j < p; ++j) m = std::max(m, out(j, v, u));
      out(p, v, u) = std::max(T(0), T(1) - m);
    }
  }
  return out;
}

/// Argmax decoding of every joint channel (all but the last). Ties go to the
/// first cell in row-major order.
template <typename T>
std::vector<Detection> decode_beliefs(const Tensor<T>& beliefs, int downsample) {
  if (beliefs.rank() != 3 || beliefs.dim(0) < 1) {
    throw Error("decode_beliefs: expected [P+1,H,W], got " + to_string(beliefs.shape()));
  }
  const int p = beliefs.dim(0) - 1, h = beliefs.dim(1), w = beliefs.dim(2);
  std::vector<Detection> out;
  out.reserve(static_cast<std::size_t>(p));
  for (int j = 0; j < p; ++j) {
    int best_u = 0, best_v = 0;
    T best = beliefs(j, 0, 0);
    for (int v = 0; v < h; ++v) {
      for (int u = 0; u < w; ++u) {
        if (beliefs(j, v, u) > best) {
          best = beliefs(j, v, u);
          best_u = u;
          best_v = v;
        }
      }
    }
    out.push_back({(best_u + 0.5) * downsample, (best_v + 0.5) * downsample, static_cast<double>(best)});
  }
  return out;
}

/// Unit-height Gaussian centred at ((H-1)/2, (W-1)/2), shape [1, H, W].
template <typename T = float>
Tensor<T> make_center_map(int height, int width, double sigma) {
  if (sigma <= 0) throw Error("make_center_map: sigma must be positive");
  Tensor<T> out({1, height, width});
  const double cy = (height - 1) / 2.0, cx = (width - 1) / 2.0;
  const double inv = 1.0 / (2 * sigma * sigma);
  for (int v = 0; v < height; ++v) {
    for (int u = 0; u < width; ++u) {
      out(0, v, u) = static_cast<T>(std::exp(-((u - cx) * (u - cx) + (v - cy) * (v - cy)) * inv));
    }
  }
  return out;
}

template <typename T = float>
Tensor<T> make_center_map(int size, double sigma) {
  return make_center_map<T>(size, size, sigma);
}

}  // namespace lpm
