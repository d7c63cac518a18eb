#pragma once

// PCK@alpha with visibility masking and multi-scale test-time averaging.

#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lpm/kernels.hpp"
#include "lpm/model.hpp"
#include "lpm/synth.hpp"

namespace lpm {

struct PckResult {
  double alpha = 0.2;
  std::vector<double> per_joint;  // percent; NaN when a joint type is never visible
  std::vector<int> correct, total;
  double mean = 0;  // unweighted over joint types that have visible instances
};

/// A joint is correct iff its distance to ground truth is <= alpha * max(bbox w, h).
inline PckResult pck(const std::vector<std::vector<Point>>& preds, const std::vector<JointSet>& gts, double alpha) {
  if (preds.size() != gts.size()) {
    throw Error("pck: " + std::to_string(preds.size()) + " predictions for " + std::to_string(gts.size()) +
                " ground-truth frames");
  }
  if (!(alpha > 0)) throw Error("pck: alpha must be positive");
  if (gts.empty()) throw Error("pck: no frames");
  const int p = gts[0].size();
  PckResult r;
  r.alpha = alpha;
  r.correct.assign(static_cast<std::size_t>(p), 0);
  r.total.assign(static_cast<std::size_t>(p), 0);
  for (std::size_t f = 0; f < gts.size(); ++f) {
    const auto& gt = gts[f];
    if (gt.size() != p || static_cast<int>(preds[f].size()) != p) {
      throw Error("pck: frame " + std::to_string(f) + " has inconsistent joint count");
    }
    const double thr = alpha * std::max(gt.bbox.w, gt.bbox.h);
    for (int j = 0; j < p; ++j) {
      if (!gt.visible[static_cast<std::size_t>(j)]) continue;
      const auto& a = preds[f][static_cast<std::size_t>(j)];
      const auto& b = gt.joints[static_cast<std::size_t>(j)];
      ++r.total[static_cast<std::size_t>(j)];
      if (std::hypot(a.x - b.x, a.y - b.y) <= thr) ++r.correct[static_cast<std::size_t>(j)];
    }
  }
  double sum = 0;
  int counted = 0;
  for (int j = 0; j < p; ++j) {
    const auto n = r.total[static_cast<std::size_t>(j)];
    if (n == 0) {
      r.per_joint.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    r.per_joint.push_back(100.0 * r.correct[static_cast<std::size_t>(j)] / n);
    sum += r.per_joint.back();
    ++counted;
  }
  if (counted == 0) throw Error("pck: no visible joints in the whole set");
  r.mean = sum / counted;
  return r;
}

/// Resizes each frame so both extents become round(s * extent / f) * f, runs the
/// model, resizes the beliefs back to the reference heatmap size and averages.
inline std::vector<Tensor<float>> infer_multiscale(const ModelParams<float>& params,
                                                   const std::vector<Tensor<float>>& frames,
                                                   const std::vector<double>& scales) {
  if (scales.empty()) throw Error("infer_multiscale: no scales given");
  if (frames.empty()) throw Error("infer_multiscale: no frames given");
  const int f = params.config.downsample;
  const int h = frames[0].dim(1), w = frames[0].dim(2);
  const int rh = h / f, rw = w / f;
  std::vector<Tensor<float>> acc;
  for (double s : scales) {
    if (!(s > 0)) throw Error("infer_multiscale: scale must be positive, got " + std::to_string(s));
    const int sh = std::max(1, static_cast<int>(std::lround(s * h / f))) * f;
    const int sw = std::max(1, static_cast<int>(std::lround(s * w / f))) * f;
    std::vector<Tensor<float>> scaled;
    for (const auto& x : frames) scaled.push_back(sh == h && sw == w ? x : kernels::upsample_bilinear(x, sh, sw));
    auto beliefs = infer_beliefs(params, scaled);
    for (std::size_t t = 0; t < beliefs.size(); ++t) {
      auto b = beliefs[t].dim(1) == rh && beliefs[t].dim(2) == rw ? std::move(beliefs[t])
                                                                   : kernels::upsample_bilinear(beliefs[t], rh, rw);
      if (acc.size() <= t) {
        acc.push_back(std::move(b));
      } else {
        for (std::size_t i = 0; i < b.size(); ++i) acc[t][i] += b[i];
      }
    }
  }
  if (scales.size() > 1) {
    const float inv = 1.0f / static_cast<float>(scales.size());
    for (auto& b : acc)
      for (auto& v : b.storage()) v *= inv;
  }
  return acc;
}

/// Decoded joints for a whole sequence, run in consecutive windows of the
/// model's sequence length (the last window may be shorter).
inline std::vector<std::vector<Point>> predict_sequence(const ModelParams<float>& params, const PoseSequence& seq,
                                                        const std::vector<double>& scales = {1.0}) {
  const int win = params.config.variant == Variant::kCpmBaseline ? 1 : params.config.seq_len;
  std::vector<std::vector<Point>> out;
  for (int start = 0; start < seq.length(); start += win) {
    const int end = std::min(seq.length(), start + win);
    std::vector<Tensor<float>> frames(seq.frames.begin() + start, seq.frames.begin() + end);
    for (const auto& b : infer_multiscale(params, frames, scales)) {
      std::vector<Point> pts;
      for (const auto& d : decode_beliefs(b, params.config.downsample)) pts.push_back({d.x, d.y});
      out.push_back(std::move(pts));
    }
  }
  return out;
}

struct EvalReport {
  std::vector<std::string> joint_names;
  PckResult pck;
  int num_sequences = 0;

  nlohmann::json to_json() const {
    nlohmann::json per = nlohmann::json::object();
    for (std::size_t j = 0; j < joint_names.size(); ++j) {
      const double v = pck.per_joint[j];
      per[joint_names[j]] = std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v);
    }
    return {{"alpha", pck.alpha}, {"perJoint", per}, {"mean", pck.mean}, {"numSequences", num_sequences}};
  }

  std::string table() const {
    std::ostringstream os;
    char buf[32];
    for (const auto& n : joint_names) {
      std::snprintf(buf, sizeof buf, "%8s", n.c_str());
      os << buf;
    }
    os << "    Mean\n";
    for (double v : pck.per_joint) {
      if (std::isnan(v)) {
        std::snprintf(buf, sizeof buf, "%8s", "-");
      } else {
        std::snprintf(buf, sizeof buf, "%8.2f", v);
      }
      os << buf;
    }
    std::snprintf(buf, sizeof buf, "%8.2f", pck.mean);
    os << buf << '\n';
    return os.str();
  }
};

inline EvalReport evaluate(const ModelParams<float>& params, const std::vector<PoseSequence>& data, double alpha,
                           const std::vector<double>& scales = {1.0},
                           std::vector<std::string> joint_names = tiny_skeleton().names) {
  if (data.empty()) throw Error("evaluate: empty dataset");
  const int p = data[0].joints.at(0).size();
  if (p != params.config.joints) {
    throw Error("evaluate: checkpoint has P=" + std::to_string(params.config.joints) + " but dataset has P=" +
                std::to_string(p));
  }
  if (static_cast<int>(joint_names.size()) != p) {
    joint_names.clear();
    for (int j = 0; j < p; ++j) joint_names.push_back("j" + std::to_string(j));
  }
  std::vector<std::vector<Point>> preds;
  std::vector<JointSet> gts;
  for (const auto& seq : data) {
    auto pr = predict_sequence(params, seq, scales);
    preds.insert(preds.end(), pr.begin(), pr.end());
    gts.insert(gts.end(), seq.joints.begin(), seq.joints.end());
  }
  return {std::move(joint_names), pck(preds, gts, alpha), static_cast<int>(data.size())};
}

/// Seven scales spanning [0.8, 1.4].
inline std::vector<double> default_test_scales() { return {0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4}; }

}  // namespace lpm
