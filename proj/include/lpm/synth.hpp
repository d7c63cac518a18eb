#pragma once

// Synthetic stick-figure videos and the JSON-lines manifest format.
//
// Image coordinates are continuous: pixel (x, y) covers [x, x+1) x [y, y+1)
// and its centre is (x + 0.5, y + 0.5).
//
// Random streams use SplitMix64 (see rng.hpp): every draw is a function of
// (seed, counter), so a sequence is reproducible bit for bit across platforms.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lpm/heatmap.hpp"
#include "lpm/image_io.hpp"
#include "lpm/kernels.hpp"
#include "lpm/rng.hpp"

namespace lpm {

using Color = std::array<float, 3>;

struct Skeleton {
  std::vector<std::string> names;
  std::vector<std::pair<int, int>> limbs;       // (proximal, distal)
  std::vector<std::pair<int, int>> flip_pairs;  // swapped on horizontal flip
  std::vector<Color> colors;                    // unique per joint
  std::vector<Point> rest_pose;                 // offsets from the root, in body heights
  int root = 0;

  int size() const { return static_cast<int>(names.size()); }

  /// Permutation p with p[j] = joint that j becomes after a horizontal flip.
  std::vector<int> flip_permutation() const {
    std::vector<int> perm(names.size());
    for (std::size_t j = 0; j < perm.size(); ++j) perm[j] = static_cast<int>(j);
    for (auto [a, b] : flip_pairs) std::swap(perm[a], perm[b]);
    return perm;
  }
};

/// Seven joints: head, lhand, rhand, lfoot, rfoot, hip, chest.
inline Skeleton tiny_skeleton() {
  Skeleton s;
  s.names = {"head", "lhand", "rhand", "lfoot", "rfoot", "hip", "chest"};
  s.limbs = {{6, 0}, {6, 1}, {6, 2}, {6, 5}, {5, 3}, {5, 4}};
  s.flip_pairs = {{1, 2}, {3, 4}};
  s.colors = {Color{1, 1, 1}, Color{1, 0, 0}, Color{0, 1, 0}, Color{0, 0, 1},
              Color{1, 1, 0}, Color{1, 0, 1}, Color{0, 1, 1}};
  s.rest_pose = {{0, -0.55}, {0.32, -0.15}, {-0.32, -0.15}, {0.18, 0.42}, {-0.18, 0.42}, {0, 0}, {0, -0.3}};
  s.root = 5;
  return s;
}

enum class Background { kFlat, kNoise };

struct SynthConfig {
  int image_size = 64;
  Skeleton skeleton = tiny_skeleton();
  std::array<double, 2> velocity{0.5, 2.0};       // root speed, pixels/frame
  std::array<double, 2> body_height{0.4, 0.55};   // fraction of image size
  double articulation = 0.12;                     // max joint wobble, body heights
  double occlusion = 0.3;                         // per-sequence probability
  std::array<int, 2> occlusion_frames{1, 3};
  double occluder_half = 5;                       // half side of the occluding square, pixels
  bool motion_blur = false;
  Background background = Background::kFlat;
  double background_level = 0.0;
  double noise_amplitude = 0.25;
  double joint_radius = 2.5;
  double limb_width = 1.5;
  Color limb_color{0.5f, 0.5f, 0.5f};
  Color occluder_color{0.35f, 0.25f, 0.15f};

  double margin() const { return 2 + joint_radius; }

  void validate() const {
    auto fail = [](const std::string& m) { throw Error("synth config: " + m); };
    const auto& s = skeleton;
    if (image_size <= 0) fail("image size must be positive");
    if (s.size() == 0 || s.colors.size() != s.names.size() || s.rest_pose.size() != s.names.size()) {
      fail("skeleton names, colors and rest pose must have equal length");
    }
    for (auto [a, b] : s.limbs) {
      if (a < 0 || b < 0 || a >= s.size() || b >= s.size()) fail("limb references unknown joint");
    }
    for (auto [a, b] : s.flip_pairs) {
      if (a < 0 || b < 0 || a >= s.size() || b >= s.size() || a == b) fail("invalid flip pair");
    }
    if (velocity[0] < 0 || velocity[1] < velocity[0]) fail("velocity range must satisfy 0 <= lo <= hi");
    if (body_height[0] <= 0 || body_height[1] < body_height[0]) fail("body height range must satisfy 0 < lo <= hi");
    if (articulation < 0) fail("articulation must be nonnegative");
    if (occlusion < 0 || occlusion > 1) fail("occlusion probability must lie in [0, 1]");
    if (occlusion_frames[0] < 1 || occlusion_frames[1] < occlusion_frames[0]) fail("occlusion duration range invalid");
    if (joint_radius <= 0 || limb_width <= 0 || occluder_half <= 0) fail("stroke sizes must be positive");
  }

  friend bool operator==(const SynthConfig& a, const SynthConfig& b) {
    return nlohmann::json(a) == nlohmann::json(b);
  }

  friend void to_json(nlohmann::json& j, const SynthConfig& c) {
    j = nlohmann::json{{"imageSize", c.image_size},
                       {"joints", c.skeleton.names},
                       {"velocity", c.velocity},
                       {"bodyHeight", c.body_height},
                       {"articulation", c.articulation},
                       {"occlusion", c.occlusion},
                       {"occlusionFrames", c.occlusion_frames},
                       {"occluderHalf", c.occluder_half},
                       {"motionBlur", c.motion_blur},
                       {"background", c.background == Background::kFlat ? "flat" : "noise"},
                       {"backgroundLevel", c.background_level},
                       {"noiseAmplitude", c.noise_amplitude},
                       {"jointRadius", c.joint_radius},
                       {"limbWidth", c.limb_width}};
  }

  friend void from_json(const nlohmann::json& j, SynthConfig& c) {
    SynthConfig d;
    c.image_size = j.value("imageSize", d.image_size);
    c.velocity = j.value("velocity", d.velocity);
    c.body_height = j.value("bodyHeight", d.body_height);
    c.articulation = j.value("articulation", d.articulation);
    c.occlusion = j.value("occlusion", d.occlusion);
    c.occlusion_frames = j.value("occlusionFrames", d.occlusion_frames);
    c.occluder_half = j.value("occluderHalf", d.occluder_half);
    c.motion_blur = j.value("motionBlur", d.motion_blur);
    const auto bg = j.value("background", std::string("flat"));
    if (bg != "flat" && bg != "noise") throw Error("synth config: background must be 'flat' or 'noise', got '" + bg + "'");
    c.background = bg == "flat" ? Background::kFlat : Background::kNoise;
    c.background_level = j.value("backgroundLevel", d.background_level);
    c.noise_amplitude = j.value("noiseAmplitude", d.noise_amplitude);
    c.joint_radius = j.value("jointRadius", d.joint_radius);
    c.limb_width = j.value("limbWidth", d.limb_width);
    if (j.contains("joints") && j.at("joints").get<std::vector<std::string>>() != d.skeleton.names) {
      throw Error("synth config: only the built-in 7-joint skeleton can be generated");
    }
  }
};

struct Occluder {
  int first_frame = 0;
  int last_frame = -1;  // inclusive
  int limb = -1;
  std::vector<BBox> boxes;  // one per frame in [first_frame, last_frame]

  bool active(int t) const { return t >= first_frame && t <= last_frame; }
};

struct PoseSequence {
  std::string id;
  std::uint64_t seed = 0;
  std::vector<Tensor<float>> frames;
  std::vector<JointSet> joints;
  std::vector<std::vector<bool>> occluded;
  std::optional<Occluder> occluder;

  int length() const { return static_cast<int>(frames.size()); }
};

/// Tight box over all joints, each side extended by 5% of the extent.
inline BBox padded_bbox(const std::vector<Point>& pts) {
  double x0 = pts[0].x, x1 = pts[0].x, y0 = pts[0].y, y1 = pts[0].y;
  for (const auto& p : pts) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  const double pw = 0.05 * (x1 - x0), ph = 0.05 * (y1 - y0);
  return {x0 - pw, y0 - ph, (x1 - x0) + 2 * pw, (y1 - y0) + 2 * ph};
}

inline bool inside_box(const Point& p, const BBox& b) {
  return p.x >= b.x && p.x <= b.x + b.w && p.y >= b.y && p.y <= b.y + b.h;
}

namespace detail {

inline void blend(Tensor<float>& img, int x, int y, const Color& c, double coverage) {
  if (coverage <= 0) return;
  const float a = static_cast<float>(std::min(1.0, coverage));
  for (int ch = 0; ch < 3; ++ch) img(ch, y, x) = img(ch, y, x) * (1 - a) + c[ch] * a;
}

inline double segment_distance(double px, double py, const Point& a, const Point& b) {
  const double dx = b.x - a.x, dy = b.y - a.y, len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - a.x) * dx + (py - a.y) * dy) / len2 : 0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (a.x + t * dx), py - (a.y + t * dy));
}

// Coverage-weighted stroke: full inside radius r, linear ramp over one pixel.
inline void draw_segment(Tensor<float>& img, const Point& a, const Point& b, double width, const Color& c) {
  const int n = img.dim(1);
  const double r = width / 2;
  const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - r - 1)));
  const int x1 = std::min(n - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + r + 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - r - 1)));
  const int y1 = std::min(n - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + r + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) blend(img, x, y, c, r + 0.5 - segment_distance(x + 0.5, y + 0.5, a, b));
}

inline void fill_box(Tensor<float>& img, const BBox& b, const Color& c) {
  const int n = img.dim(1);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      if (inside_box({x + 0.5, y + 0.5}, b)) blend(img, x, y, c, 1.0);
}

}  // namespace detail

inline Tensor<float> flat_background(const SynthConfig& cfg) {
  return Tensor<float>({3, cfg.image_size, cfg.image_size}, static_cast<float>(cfg.background_level));
}

/// Limbs as anti-aliased segments, then one disc per joint in the joint's colour.
inline Tensor<float> render_pose(const JointSet& pose, const SynthConfig& cfg, Tensor<float> background) {
  const auto& sk = cfg.skeleton;
  if (pose.size() != sk.size()) {
    throw Error("render_pose: pose has " + std::to_string(pose.size()) + " joints, skeleton " + std::to_string(sk.size()));
  }
  if (background.shape() != Shape{3, cfg.image_size, cfg.image_size}) {
    throw Error("render_pose: background " + to_string(background.shape()) + " does not match image size");
  }
  Tensor<float> img = std::move(background);
  for (auto [a, b] : sk.limbs) detail::draw_segment(img, pose.joints[a], pose.joints[b], cfg.limb_width, cfg.limb_color);
  for (int j = 0; j < sk.size(); ++j) {
    detail::draw_segment(img, pose.joints[j], pose.joints[j], 2 * cfg.joint_radius, sk.colors[j]);
  }
  return img;
}

inline Tensor<float> render_pose(const JointSet& pose, const SynthConfig& cfg) {
  return render_pose(pose, cfg, flat_background(cfg));
}

inline constexpr std::uint64_t kSynthStream = 0x5e9;

inline PoseSequence generate_sequence(std::uint64_t seed, const SynthConfig& cfg, int length) {
  cfg.validate();
  if (length < 1) throw Error("generate_sequence: length must be at least 1");
  const auto& sk = cfg.skeleton;
  const int p = sk.size(), n = cfg.image_size;
  Rng rng(derive_seed(seed, {kSynthStream}));

  const double height = rng.uniform(cfg.body_height[0], cfg.body_height[1]) * n;
  const double wobble = cfg.articulation * height;
  double lo_x = 0, hi_x = 0, lo_y = 0, hi_y = 0;
  for (const auto& o : sk.rest_pose) {
    lo_x = std::min(lo_x, o.x * height);
    hi_x = std::max(hi_x, o.x * height);
    lo_y = std::min(lo_y, o.y * height);
    hi_y = std::max(hi_y, o.y * height);
  }
  const double m = cfg.margin();
  const std::array<double, 2> root_x{m - lo_x + wobble, n - m - hi_x - wobble};
  const std::array<double, 2> root_y{m - lo_y + wobble, n - m - hi_y - wobble};
  if (root_x[0] > root_x[1] || root_y[0] > root_y[1]) {
    throw Error("generate_sequence: figure (height " + std::to_string(height) + " px) does not fit a " +
                std::to_string(n) + " px frame with margin " + std::to_string(m));
  }

  Point root{rng.uniform(root_x[0], root_x[1]), rng.uniform(root_y[0], root_y[1])};
  const double speed = rng.uniform(cfg.velocity[0], cfg.velocity[1]);
  const double heading = rng.uniform(0, 2 * M_PI);
  Point vel{speed * std::cos(heading), speed * std::sin(heading)};
  const double step = 0.5 * cfg.velocity[1];
  std::vector<Point> wob(static_cast<std::size_t>(p));
  for (int j = 0; j < p; ++j) {
    if (j == sk.root) continue;
    wob[j] = {rng.uniform(-wobble, wobble), rng.uniform(-wobble, wobble)};
  }
  Tensor<float> background = flat_background(cfg);
  if (cfg.background == Background::kNoise) {
    for (auto& v : background.storage()) {
      v = static_cast<float>(cfg.background_level + rng.uniform(0, cfg.noise_amplitude));
    }
  }

  std::vector<std::vector<Point>> track;
  for (int t = 0; t < length; ++t) {
    std::vector<Point> pts(static_cast<std::size_t>(p));
    for (int j = 0; j < p; ++j) {
      pts[j] = {root.x + sk.rest_pose[j].x * height + wob[j].x, root.y + sk.rest_pose[j].y * height + wob[j].y};
    }
    track.push_back(std::move(pts));
    auto advance = [](double& pos, double& v, const std::array<double, 2>& range) {
      pos += v;
      if (pos < range[0]) {
        pos = 2 * range[0] - pos;
        v = -v;
      } else if (pos > range[1]) {
        pos = 2 * range[1] - pos;
        v = -v;
      }
      pos = std::clamp(pos, range[0], range[1]);
    };
    advance(root.x, vel.x, root_x);
    advance(root.y, vel.y, root_y);
    for (int j = 0; j < p; ++j) {
      if (j == sk.root) continue;
      wob[j].x = std::clamp(wob[j].x + step * rng.uniform(-1, 1), -wobble, wobble);
      wob[j].y = std::clamp(wob[j].y + step * rng.uniform(-1, 1), -wobble, wobble);
    }
  }

  PoseSequence seq;
  seq.seed = seed;
  seq.id = "synth-" + std::to_string(seed);
  seq.occluded.assign(static_cast<std::size_t>(length), std::vector<bool>(static_cast<std::size_t>(p), false));
  if (rng.bernoulli(cfg.occlusion) && !sk.limbs.empty()) {
    Occluder occ;
    occ.limb = rng.uniform_int(0, static_cast<int>(sk.limbs.size()) - 1);
    const int dur = rng.uniform_int(cfg.occlusion_frames[0], std::min(cfg.occlusion_frames[1], length));
    occ.first_frame = rng.uniform_int(0, length - dur);
    occ.last_frame = occ.first_frame + dur - 1;
    const int distal = sk.limbs[occ.limb].second;
    for (int t = occ.first_frame; t <= occ.last_frame; ++t) {
      const Point c = track[t][distal];
      occ.boxes.push_back({c.x - cfg.occluder_half, c.y - cfg.occluder_half, 2 * cfg.occluder_half, 2 * cfg.occluder_half});
      for (int j = 0; j < p; ++j) seq.occluded[t][j] = inside_box(track[t][j], occ.boxes.back());
    }
    seq.occluder = std::move(occ);
  }

  for (int t = 0; t < length; ++t) {
    JointSet js;
    js.joints = track[t];
    for (int j = 0; j < p; ++j) {
      const auto& q = track[t][j];
      js.visible.push_back(!seq.occluded[t][j] && q.x >= 0 && q.y >= 0 && q.x < n && q.y < n);
    }
    js.bbox = padded_bbox(track[t]);
    Tensor<float> frame;
    if (cfg.motion_blur && t > 0) {
      frame = Tensor<float>({3, n, n});
      for (int k = 1; k <= 3; ++k) {
        const double a = k / 3.0;
        JointSet mid = js;
        for (int j = 0; j < p; ++j) {
          mid.joints[j] = {track[t - 1][j].x + a * (track[t][j].x - track[t - 1][j].x),
                           track[t - 1][j].y + a * (track[t][j].y - track[t - 1][j].y)};
        }
        auto sub = render_pose(mid, cfg, background);
        for (std::size_t i = 0; i < frame.size(); ++i) frame[i] += sub[i] / 3.0f;
      }
    } else {
      frame = render_pose(js, cfg, background);
    }
    if (seq.occluder && seq.occluder->active(t)) {
      detail::fill_box(frame, seq.occluder->boxes[t - seq.occluder->first_frame], cfg.occluder_color);
    }
    seq.frames.push_back(std::move(frame));
    seq.joints.push_back(std::move(js));
  }
  return seq;
}

/// Sequence i of a dataset uses seed derive_seed(seed, {i}).
inline std::vector<PoseSequence> generate_dataset(std::uint64_t seed, int count, const SynthConfig& cfg, int length) {
  std::vector<PoseSequence> out;
  out.reserve(static_cast<std::size_t>(std::max(0, count)));
  for (int i = 0; i < count; ++i) {
    out.push_back(generate_sequence(derive_seed(seed, {static_cast<std::uint64_t>(i)}), cfg, length));
    out.back().id = "seq" + std::to_string(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest: one JSON object per line
//   {"id", "frames": [path...], "joints": [[[x,y]...]...], "visible": [[bool...]...], "bbox": [[x,y,w,h]...]}
// Frame paths are relative to the manifest's directory.

inline nlohmann::json manifest_record(const PoseSequence& seq, const std::vector<std::string>& frame_paths) {
  nlohmann::json rec{{"id", seq.id}, {"frames", frame_paths}};
  rec["joints"] = nlohmann::json::array();
  rec["visible"] = nlohmann::json::array();
  rec["bbox"] = nlohmann::json::array();
  for (const auto& js : seq.joints) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& q : js.joints) pts.push_back({q.x, q.y});
    rec["joints"].push_back(pts);
    rec["visible"].push_back(js.visible);
    rec["bbox"].push_back({js.bbox.x, js.bbox.y, js.bbox.w, js.bbox.h});
  }
  return rec;
}

/// Writes <dir>/manifest.jsonl and <dir>/frames/<id>/<t>.png.
inline std::filesystem::path export_manifest(const std::vector<PoseSequence>& seqs, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto manifest = dir / "manifest.jsonl";
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw Error("export_manifest: cannot open '" + manifest.string() + "'");
  for (const auto& seq : seqs) {
    std::vector<std::string> paths;
    for (int t = 0; t < seq.length(); ++t) {
      const std::string rel = "frames/" + seq.id + "/" + std::to_string(t) + ".png";
      write_png(dir / rel, seq.frames[t]);
      paths.push_back(rel);
    }
    out << manifest_record(seq, paths).dump() << '\n';
  }
  if (!out) throw Error("export_manifest: write failed for '" + manifest.string() + "'");
  return manifest;
}

/// Scales the longer side to `size`, centres the result and pads with zeros.
inline std::pair<Tensor<float>, std::array<double, 3>> letterbox(const Tensor<float>& img, int size) {
  const int h = img.dim(1), w = img.dim(2);
  const double s = static_cast<double>(size) / std::max(h, w);
  const int nh = std::max(1, static_cast<int>(std::lround(h * s)));
  const int nw = std::max(1, static_cast<int>(std::lround(w * s)));
  auto resized = kernels::upsample_bilinear(img, nh, nw);
  const int oy = (size - nh) / 2, ox = (size - nw) / 2;
  Tensor<float> out({3, size, size});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < nh; ++y)
      for (int x = 0; x < nw; ++x) out(c, y + oy, x + ox) = resized(c, y, x);
  return {std::move(out), {static_cast<double>(nw) / w, static_cast<double>(ox), static_cast<double>(oy)}};
}

/// Streams sequences from a manifest; errors name the 1-based line number.
class ManifestReader {
 public:
  ManifestReader(std::filesystem::path manifest, int image_size, int joints)
      : path_(std::move(manifest)), in_(path_), image_size_(image_size), joints_(joints) {
    if (!in_) throw Error("manifest '" + path_.string() + "': cannot open");
  }

  std::optional<PoseSequence> next() {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        return parse(nlohmann::json::parse(line));
      } catch (const nlohmann::json::exception& e) {
        fail(std::string("malformed record: ") + e.what());
      }
    }
    return std::nullopt;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw Error("manifest '" + path_.string() + "' line " + std::to_string(line_no_) + ": " + msg);
  }

  PoseSequence parse(const nlohmann::json& rec) {
    PoseSequence seq;
    seq.id = rec.at("id").get<std::string>();
    const auto& frames = rec.at("frames");
    const auto& joints = rec.at("joints");
    const auto& visible = rec.at("visible");
    const auto& bbox = rec.at("bbox");
    const std::size_t t = frames.size();
    if (joints.size() != t || visible.size() != t || bbox.size() != t) {
      fail("frames, joints, visible and bbox lengths differ");
    }
    for (std::size_t i = 0; i < t; ++i) {
      if (static_cast<int>(joints[i].size()) != joints_ || static_cast<int>(visible[i].size()) != joints_) {
        fail("frame " + std::to_string(i) + " has " + std::to_string(joints[i].size()) + " joints, config expects " +
             std::to_string(joints_));
      }
      const auto file = path_.parent_path() / frames[i].get<std::string>();
      if (!std::filesystem::exists(file)) fail("missing frame file '" + file.string() + "'");
      auto [img, xf] = letterbox(read_png(file), image_size_);
      const auto tr = [&](double v, double off) { return v * xf[0] + off; };
      JointSet js;
      for (int j = 0; j < joints_; ++j) {
        js.joints.push_back({tr(joints[i][j].at(0).get<double>(), xf[1]), tr(joints[i][j].at(1).get<double>(), xf[2])});
        js.visible.push_back(visible[i][j].get<bool>());
      }
      const auto& b = bbox[i];
      if (b.size() != 4) fail("bbox of frame " + std::to_string(i) + " must have 4 numbers");
      js.bbox = {tr(b[0].get<double>(), xf[1]), tr(b[1].get<double>(), xf[2]), b[2].get<double>() * xf[0],
                 b[3].get<double>() * xf[0]};
      seq.occluded.emplace_back(static_cast<std::size_t>(joints_), false);
      for (int j = 0; j < joints_; ++j) seq.occluded.back()[j] = !js.visible[j];
      seq.frames.push_back(std::move(img));
      seq.joints.push_back(std::move(js));
    }
    return seq;
  }

  std::filesystem::path path_;
  std::ifstream in_;
  int image_size_;
  int joints_;
  int line_no_ = 0;
};

inline std::vector<PoseSequence> load_manifest(const std::filesystem::path& manifest, int image_size, int joints) {
  ManifestReader reader(manifest, image_size, joints);
  std::vector<PoseSequence> out;
  while (auto s = reader.next()) out.push_back(std::move(*s));
  return out;
}

}  // namespace lpm
