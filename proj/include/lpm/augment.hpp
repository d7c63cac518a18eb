#pragma once

// One random similarity transform per sequence, applied identically to every
// frame: scale, then rotate, then optional horizontal flip, then a square crop
// centred on the mean of the visible joints.
//
// Forward map for a source point p with crop centre c and crop size S:
//   q = s * R(angle) * (p - c) + (S/2, S/2);   flip: q.x = S - q.x

#include <cmath>
#include <cstdint>
#include <vector>

#include "json.hpp"
#include "lpm/rng.hpp"
#include "lpm/synth.hpp"

namespace lpm {

struct AugmentRanges {
  std::array<double, 2> scale{0.8, 1.4};
  std::array<double, 2> rotate_deg{-40, 40};
  double flip_prob = 0.5;
  int crop_size = 64;

  void validate() const {
    if (scale[0] <= 0 || scale[1] < scale[0]) throw Error("augment: scale range must satisfy 0 < lo <= hi");
    if (rotate_deg[1] < rotate_deg[0]) throw Error("augment: rotation range inverted");
    if (flip_prob < 0 || flip_prob > 1) throw Error("augment: flip probability must lie in [0, 1]");
    if (crop_size <= 0) throw Error("augment: crop size must be positive");
  }

  friend void to_json(nlohmann::json& j, const AugmentRanges& a) {
    j = {{"scale", a.scale}, {"rotateDeg", a.rotate_deg}, {"flipProb", a.flip_prob}, {"cropSize", a.crop_size}};
  }
  friend void from_json(const nlohmann::json& j, AugmentRanges& a) {
    AugmentRanges d;
    a.scale = j.value("scale", d.scale);
    a.rotate_deg = j.value("rotateDeg", d.rotate_deg);
    a.flip_prob = j.value("flipProb", d.flip_prob);
    a.crop_size = j.value("cropSize", d.crop_size);
  }
};

struct AugmentParams {
  double scale = 1;
  double angle_deg = 0;
  bool flip = false;
  Point center;
  int crop_size = 64;

  friend bool operator==(const AugmentParams&, const AugmentParams&) = default;

  Point forward(const Point& p) const {
    const double a = angle_deg * M_PI / 180, cs = std::cos(a), sn = std::sin(a);
    const double dx = p.x - center.x, dy = p.y - center.y;
    Point q{scale * (cs * dx - sn * dy) + crop_size / 2.0, scale * (sn * dx + cs * dy) + crop_size / 2.0};
    if (flip) q.x = crop_size - q.x;
    return q;
  }

  Point inverse(Point q) const {
    if (flip) q.x = crop_size - q.x;
    const double a = angle_deg * M_PI / 180, cs = std::cos(a), sn = std::sin(a);
    const double dx = (q.x - crop_size / 2.0) / scale, dy = (q.y - crop_size / 2.0) / scale;
    return {cs * dx + sn * dy + center.x, -sn * dx + cs * dy + center.y};
  }
};

/// Mean of all visible joints over all frames; image centre when none are visible.
inline Point visible_joint_mean(const PoseSequence& seq) {
  double sx = 0, sy = 0;
  int n = 0;
  for (const auto& js : seq.joints)
    for (int j = 0; j < js.size(); ++j)
      if (js.visible[j]) {
        sx += js.joints[j].x;
        sy += js.joints[j].y;
        ++n;
      }
  if (n == 0) {
    const auto& f = seq.frames.at(0);
    return {f.dim(2) / 2.0, f.dim(1) / 2.0};
  }
  return {sx / n, sy / n};
}

inline constexpr std::uint64_t kAugmentStream = 0xa06;

inline AugmentParams sample_augment(const PoseSequence& seq, std::uint64_t seed, const AugmentRanges& r) {
  r.validate();
  Rng rng(derive_seed(seed, {kAugmentStream}));
  AugmentParams p;
  p.scale = rng.uniform(r.scale[0], r.scale[1]);
  p.angle_deg = rng.uniform(r.rotate_deg[0], r.rotate_deg[1]);
  p.flip = rng.bernoulli(r.flip_prob);
  p.center = visible_joint_mean(seq);
  p.crop_size = r.crop_size;
  return p;
}

/// Bilinear resampling with zero fill outside the source.
inline Tensor<float> warp_image(const Tensor<float>& src, const AugmentParams& p) {
  const int c = src.dim(0), h = src.dim(1), w = src.dim(2), n = p.crop_size;
  Tensor<float> out({c, n, n});
  auto at = [&](int ch, int y, int x) -> float { return (x < 0 || y < 0 || x >= w || y >= h) ? 0.0f : src(ch, y, x); };
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const Point s = p.inverse({x + 0.5, y + 0.5});
      const double fx = s.x - 0.5, fy = s.y - 0.5;
      const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
      const float ax = static_cast<float>(fx - x0), ay = static_cast<float>(fy - y0);
      for (int ch = 0; ch < c; ++ch) {
        const float top = at(ch, y0, x0) * (1 - ax) + at(ch, y0, x0 + 1) * ax;
        const float bot = at(ch, y0 + 1, x0) * (1 - ax) + at(ch, y0 + 1, x0 + 1) * ax;
        out(ch, y, x) = top * (1 - ay) + bot * ay;
      }
    }
  return out;
}

/// Applies `p` to every frame. Under a flip, output joint j is source joint
/// flip_perm[j]. Joints mapped outside the crop become invisible.
inline PoseSequence apply_augment(const PoseSequence& seq, const AugmentParams& p, const std::vector<int>& flip_perm) {
  if (p.scale <= 0) throw Error("augment: scale must be positive, got " + std::to_string(p.scale));
  PoseSequence out;
  out.id = seq.id;
  out.seed = seq.seed;
  const int n = p.crop_size;
  for (int t = 0; t < seq.length(); ++t) {
    const auto& src = seq.joints[t];
    if (p.flip && static_cast<int>(flip_perm.size()) != src.size()) {
      throw Error("augment: flip table has " + std::to_string(flip_perm.size()) + " entries for " +
                  std::to_string(src.size()) + " joints");
    }
    JointSet js;
    std::vector<bool> occ;
    for (int j = 0; j < src.size(); ++j) {
      const int from = p.flip ? flip_perm[j] : j;
      const Point q = p.forward(src.joints[from]);
      js.joints.push_back(q);
      js.visible.push_back(src.visible[from] && q.x >= 0 && q.y >= 0 && q.x < n && q.y < n);
      occ.push_back(t < static_cast<int>(seq.occluded.size()) && seq.occluded[t][from]);
    }
    js.bbox = padded_bbox(js.joints);
    out.frames.push_back(warp_image(seq.frames[t], p));
    out.joints.push_back(std::move(js));
    out.occluded.push_back(std::move(occ));
  }
  return out;
}

inline PoseSequence augment_sequence(const PoseSequence& seq, std::uint64_t seed, const AugmentRanges& r,
                                     const Skeleton& skeleton) {
  return apply_augment(seq, sample_augment(seq, seed, r), skeleton.flip_permutation());
}

}  // namespace lpm
