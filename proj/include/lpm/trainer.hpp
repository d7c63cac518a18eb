#pragma once

// Multi-stage squared-error training with SGD + momentum.
//
// Every random choice in an iteration (sample order, window start, augmentation,
// dropout masks) is drawn from streams keyed by (seed, iteration, slot), so an
// interrupted run resumed from its checkpoint reproduces the uninterrupted one.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lpm/augment.hpp"
#include "lpm/checkpoint.hpp"
#include "lpm/model.hpp"
#include "lpm/synth.hpp"

namespace lpm {

struct TrainConfig {
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double grad_clip = 100;  // global L2 norm
  int batch_size = 4;
  double lr_drop_factor = 0.333;
  int lr_drop_every = 2000;
  int total_iterations = 3000;
  int log_every = 10;
  int checkpoint_every = 500;
  std::uint64_t seed = 1;
  bool augment = true;
  AugmentRanges augmentation{{0.8, 1.4}, {-40, 40}, 0.0, 64};

  void validate() const {
    auto fail = [](const std::string& m) { throw Error("train config: " + m); };
    if (learning_rate < 0) fail("learningRate must be nonnegative");
    if (momentum < 0 || momentum >= 1) fail("momentum must lie in [0, 1)");
    if (weight_decay < 0) fail("weightDecay must be nonnegative");
    if (grad_clip <= 0) fail("gradClip must be positive");
    if (batch_size < 1) fail("batchSize must be at least 1");
    if (lr_drop_factor <= 0 || lr_drop_factor >= 1) fail("lrDropFactor must lie in (0, 1)");
    if (lr_drop_every < 1) fail("lrDropEvery must be positive");
    if (total_iterations < 0) fail("totalIterations must be nonnegative");
    if (log_every < 1 || checkpoint_every < 1) fail("logEvery and checkpointEvery must be positive");
    augmentation.validate();
  }

  double lr_at(int iteration) const {
    return learning_rate * std::pow(lr_drop_factor, iteration / lr_drop_every);
  }

  friend void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"learningRate", c.learning_rate}, {"momentum", c.momentum},         {"weightDecay", c.weight_decay},
         {"gradClip", c.grad_clip},         {"batchSize", c.batch_size},      {"lrDropFactor", c.lr_drop_factor},
         {"lrDropEvery", c.lr_drop_every},  {"totalIterations", c.total_iterations},
         {"logEvery", c.log_every},         {"checkpointEvery", c.checkpoint_every},
         {"seed", c.seed},                  {"augment", c.augment},           {"augmentation", c.augmentation}};
  }

  friend void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.learning_rate = j.value("learningRate", d.learning_rate);
    c.momentum = j.value("momentum", d.momentum);
    c.weight_decay = j.value("weightDecay", d.weight_decay);
    c.grad_clip = j.value("gradClip", d.grad_clip);
    c.batch_size = j.value("batchSize", d.batch_size);
    c.lr_drop_factor = j.value("lrDropFactor", d.lr_drop_factor);
    c.lr_drop_every = j.value("lrDropEvery", d.lr_drop_every);
    c.total_iterations = j.value("totalIterations", d.total_iterations);
    c.log_every = j.value("logEvery", d.log_every);
    c.checkpoint_every = j.value("checkpointEvery", d.checkpoint_every);
    c.seed = j.value("seed", d.seed);
    c.augment = j.value("augment", d.augment);
    c.augmentation = j.value("augmentation", d.augmentation);
  }
};

// ---------------------------------------------------------------------------
// Loss

/// Sum over stages and channels of squared differences; no averaging.
template <typename T>
Var<T> compute_loss(Tape<T>& tape, const std::vector<Var<T>>& beliefs, const std::vector<Tensor<T>>& targets) {
  if (beliefs.size() != targets.size()) {
    throw Error("compute_loss: " + std::to_string(beliefs.size()) + " belief stacks vs " +
                std::to_string(targets.size()) + " targets");
  }
  if (beliefs.empty()) throw Error("compute_loss: empty sequence");
  Var<T> total;
  for (std::size_t t = 0; t < beliefs.size(); ++t) {
    auto term = ops::sum_sq_diff(tape, beliefs[t], tape.constant(targets[t]));
    total = total ? ops::add(tape, total, term) : term;
  }
  return total;
}

template <typename T>
T compute_loss(const std::vector<Tensor<T>>& beliefs, const std::vector<Tensor<T>>& targets) {
  Tape<T> tape(false);
  std::vector<Var<T>> b;
  for (const auto& x : beliefs) b.push_back(tape.constant(x));
  return compute_loss(tape, b, targets)->value.item();
}

// ---------------------------------------------------------------------------
// Optimiser

struct SgdState {
  ModelParams<float> velocity;
  int iteration = 0;  // number of completed steps
};

inline SgdState make_sgd_state(const ModelParams<float>& params) { return {params.zeros_like(), 0}; }

inline double global_norm(const ModelParams<float>& g) {
  double s = 0;
  g.visit([&](const std::string&, const Tensor<float>& t) {
    for (float v : t.values()) s += static_cast<double>(v) * v;
  });
  return std::sqrt(s);
}

/// Rescales `g` so its global L2 norm is at most `max_norm`; returns the pre-clip norm.
inline double clip_grad_norm(ModelParams<float>& g, double max_norm) {
  const double norm = global_norm(g);
  if (norm > max_norm) {
    const float s = static_cast<float>(max_norm / norm);
    g.visit([&](const std::string&, Tensor<float>& t) { t *= s; });
  }
  return norm;
}

struct TrainSample {
  std::vector<Tensor<float>> frames;
  std::vector<Tensor<float>> targets;
  std::uint64_t dropout_seed = 0;
};

struct StepResult {
  double loss = 0;
  double grad_norm = 0;  // before clipping
  double lr = 0;
};

/// Mean-over-batch loss, backward, clip, then v <- m v - lr (g + wd theta), theta <- theta + v.
inline StepResult train_step(const std::vector<TrainSample>& batch, ModelParams<float>& params, SgdState& opt,
                             const TrainConfig& cfg) {
  if (batch.empty()) throw Error("train_step: empty batch");
  if (params.config.variant == Variant::kCpmBaseline) {
    throw Error("train_step: the CPM_BASELINE variant is an inference-only cost baseline");
  }
  auto grads = params.zeros_like();
  double loss = 0;
  const float inv_b = 1.0f / static_cast<float>(batch.size());
  for (const auto& sample : batch) {
    Tape<float> tape;
    auto bound = bind_model(tape, params, &grads);
    PoseMachine<float> pm(tape, bound, {true, sample.dropout_seed});
    std::vector<Var<float>> frames;
    for (const auto& f : sample.frames) frames.push_back(tape.constant(f));
    auto l = compute_loss(tape, pm.beliefs(frames), sample.targets);
    loss += l->value.item() / static_cast<double>(batch.size());
    tape.backward(ops::scale(tape, l, inv_b));
  }
  if (!std::isfinite(loss)) {
    throw Error("train_step: non-finite loss at iteration " + std::to_string(opt.iteration) + " (divergence)");
  }
  StepResult r;
  r.loss = loss;
  r.lr = cfg.lr_at(opt.iteration);
  r.grad_norm = clip_grad_norm(grads, cfg.grad_clip);

  std::vector<Tensor<float>*> g_list, v_list;
  grads.visit([&](const std::string&, Tensor<float>& t) { g_list.push_back(&t); });
  opt.velocity.visit([&](const std::string&, Tensor<float>& t) { v_list.push_back(&t); });
  const float m = static_cast<float>(cfg.momentum), lr = static_cast<float>(r.lr),
              wd = static_cast<float>(cfg.weight_decay);
  std::size_t k = 0;
  params.visit([&](const std::string&, Tensor<float>& theta) {
    auto& g = g_list[k]->storage();
    auto& v = v_list[k]->storage();
    auto& p = theta.storage();
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = m * v[i] - lr * (g[i] + wd * p[i]);
      p[i] += v[i];
    }
    ++k;
  });
  ++opt.iteration;
  return r;
}

// ---------------------------------------------------------------------------
// Data

inline constexpr std::uint64_t kOrderStream = 0x0d;
inline constexpr std::uint64_t kSampleStream = 0x5a;

/// Deterministic epoch permutation of [0, n).
inline std::vector<int> epoch_order(std::uint64_t seed, std::uint64_t epoch, int n) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, {kOrderStream, epoch}));
  for (int i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);
  return order;
}

/// Heatmap targets for every frame of a sequence.
inline std::vector<Tensor<float>> encode_targets(const PoseSequence& seq, const ModelConfig& mc) {
  std::vector<Tensor<float>> out;
  const int hm = seq.frames.at(0).dim(1) / mc.downsample;
  for (const auto& js : seq.joints) out.push_back(encode_labels<float>(js, hm, mc.downsample, mc.label_sigma));
  return out;
}

/// Window of config.seq_len frames, augmented, with targets; keyed by (seed, iteration, slot).
inline TrainSample make_sample(const std::vector<PoseSequence>& data, const ModelConfig& mc, const TrainConfig& cfg,
                               int iteration, int slot) {
  const int n = static_cast<int>(data.size());
  const auto global = static_cast<std::uint64_t>(iteration) * cfg.batch_size + static_cast<std::uint64_t>(slot);
  const auto order = epoch_order(cfg.seed, global / n, n);
  const auto& seq = data[order[global % n]];
  const int t = mc.seq_len;
  if (seq.length() < t) {
    throw Error("training sequence '" + seq.id + "' has " + std::to_string(seq.length()) + " frames, T = " +
                std::to_string(t));
  }
  const auto key = derive_seed(cfg.seed, {kSampleStream, static_cast<std::uint64_t>(iteration),
                                          static_cast<std::uint64_t>(slot)});
  Rng rng(key);
  const int start = rng.uniform_int(0, seq.length() - t);
  PoseSequence window;
  window.id = seq.id;
  for (int k = start; k < start + t; ++k) {
    window.frames.push_back(seq.frames[k]);
    window.joints.push_back(seq.joints[k]);
    window.occluded.push_back(seq.occluded.empty() ? std::vector<bool>(seq.joints[k].visible.size()) : seq.occluded[k]);
  }
  if (cfg.augment) window = augment_sequence(window, derive_seed(key, {1}), cfg.augmentation, tiny_skeleton());
  if (window.frames[0].dim(1) != mc.input_size || window.frames[0].dim(2) != mc.input_size) {
    throw Error("training frames " + to_string(window.frames[0].shape()) + " do not match model input size " +
                std::to_string(mc.input_size));
  }
  return {window.frames, encode_targets(window, mc), derive_seed(key, {2})};
}

// ---------------------------------------------------------------------------
// Loop, checkpoints and resume

struct TrainPaths {
  std::filesystem::path dir;
  std::filesystem::path model() const { return dir / "model.lpm"; }
  std::filesystem::path opt_state() const { return dir / "optstate.lpm"; }
  std::filesystem::path metrics() const { return dir / "metrics.jsonl"; }
};

inline void save_opt_state(const std::filesystem::path& path, const SgdState& s) {
  write_file(path, encode_container(model_container(s.velocity, {{"kind", "optState"}, {"iteration", s.iteration}})));
}

inline SgdState load_opt_state(const std::filesystem::path& path) {
  const auto c = decode_container(read_file(path), path.string());
  if (c.meta.value("kind", std::string()) != "optState") throw Error("'" + path.string() + "' is not an optState file");
  return {params_from_container(c, path.string()), c.meta.at("iteration").get<int>()};
}

struct TrainState {
  ModelParams<float> params;
  SgdState opt;
};

using ProgressFn = std::function<void(int iteration, const StepResult&)>;

/// Drops metrics lines past `iteration` so a resumed log stays monotone.
inline void truncate_metrics(const std::filesystem::path& path, int iteration) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> keep;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    if (nlohmann::json::parse(line).at("iteration").get<int>() <= iteration) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

/// Trains from `init` (or resumes from `dir` when `resume` and a checkpoint exists).
inline TrainState train_loop(const std::vector<PoseSequence>& data, const ModelParams<float>& init,
                             const TrainConfig& cfg, const std::filesystem::path& dir, bool resume = false,
                             const ProgressFn& progress = {}) {
  cfg.validate();
  if (data.empty()) throw Error("train_loop: dataset is empty");
  const TrainPaths paths{dir};
  std::filesystem::create_directories(dir);
  TrainState st{init, make_sgd_state(init)};
  if (resume && std::filesystem::exists(paths.model()) && std::filesystem::exists(paths.opt_state())) {
    st.params = load_checkpoint(paths.model());
    if (!(st.params.config == init.config)) throw Error("train_loop: checkpoint config differs from requested model");
    st.opt = load_opt_state(paths.opt_state());
    truncate_metrics(paths.metrics(), st.opt.iteration);
  } else {
    std::ofstream(paths.metrics(), std::ios::trunc);
  }
  std::ofstream metrics(paths.metrics(), std::ios::app);
  if (!metrics) throw Error("train_loop: cannot open '" + paths.metrics().string() + "'");
  auto save = [&] {
    save_checkpoint(paths.model(), st.params, {{"iteration", st.opt.iteration}, {"train", cfg}});
    save_opt_state(paths.opt_state(), st.opt);
  };
  while (st.opt.iteration < cfg.total_iterations) {
    const int it = st.opt.iteration;
    std::vector<TrainSample> batch;
    for (int s = 0; s < cfg.batch_size; ++s) batch.push_back(make_sample(data, st.params.config, cfg, it, s));
    const auto r = train_step(batch, st.params, st.opt, cfg);
    if (it % cfg.log_every == 0 || st.opt.iteration == cfg.total_iterations) {
      metrics << nlohmann::json{{"iteration", it}, {"loss", r.loss}, {"lr", r.lr}}.dump() << '\n';
      metrics.flush();
    }
    if (progress) progress(it, r);
    if (st.opt.iteration % cfg.checkpoint_every == 0) save();
  }
  save();
  return st;
}

}  // namespace lpm
