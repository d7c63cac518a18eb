#pragma once

// LSTM pose machine and its two comparison variants.
//
//   stage 1:  b1 = G(L1(F(X1) ++ F0(X1) ++ center))
//   stage t:  bt = G(Lt(F(Xt) ++ b_{t-1} ++ center))
//
// F0 is the deeper initial encoder (used once), F the shared per-frame encoder,
// L the convolutional LSTM and G the shared generator. Channel order inside
// every concatenation is (features, beliefs, center) and is part of the
// checkpoint contract.
//
// The recurrent variant without memory replaces G(L(.)) by a generator G' that
// reads the concatenation directly; the multi-stage per-frame baseline runs
// that same stage S times on one frame.

#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "lpm/conv_lstm.hpp"
#include "lpm/heatmap.hpp"
#include "lpm/ops.hpp"
#include "lpm/rng.hpp"

namespace lpm {

enum class Variant { kLstmPm, kRpm, kCpmBaseline };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kLstmPm: return "LSTM_PM";
    case Variant::kRpm: return "RPM";
    case Variant::kCpmBaseline: return "CPM_BASELINE";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "LSTM_PM") return Variant::kLstmPm;
  if (s == "RPM") return Variant::kRpm;
  if (s == "CPM_BASELINE") return Variant::kCpmBaseline;
  throw Error("unknown model variant '" + s + "' (expected LSTM_PM, RPM or CPM_BASELINE)");
}

struct ModelConfig {
  int input_size = 64;
  int input_channels = 3;
  int joints = 7;
  int downsample = 4;                     // one stride-2 pool per factor of two
  std::vector<int> encoder_channels{16, 16};  // trunk widths before each pool
  int feature_channels = 32;
  int head_channels = 32;                 // hidden width of the belief heads
  int memory_channels = 48;
  int lstm_kernel = 3;
  int seq_len = 5;
  int cpm_stages = 6;
  Variant variant = Variant::kLstmPm;
  double center_sigma = 0;  // 0: heatmap size / 4
  double label_sigma = 1.5;
  double dropout = 0.5;

  int heatmap_size() const { return input_size / downsample; }
  int belief_channels() const { return joints + 1; }
  int stage_input_channels() const { return feature_channels + belief_channels() + 1; }
  double center_sigma_for(int heatmap) const { return center_sigma > 0 ? center_sigma : heatmap / 4.0; }

  int pool_count() const {
    int n = 0;
    for (int f = downsample; f > 1; f /= 2) ++n;
    return n;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw Error("model config: " + m); };
    if (input_size <= 0 || input_channels <= 0 || joints <= 0) fail("sizes must be positive");
    if (downsample <= 0 || (downsample & (downsample - 1)) != 0) fail("downsample must be a power of two");
    if (input_size % downsample != 0) {
      fail("input size " + std::to_string(input_size) + " not divisible by downsample " + std::to_string(downsample));
    }
    if (static_cast<int>(encoder_channels.size()) != pool_count()) {
      fail("encoder_channels needs one width per pooling step (" + std::to_string(pool_count()) + ")");
    }
    if (feature_channels <= 0 || head_channels <= 0 || memory_channels <= 0) fail("channel counts must be positive");
    if (lstm_kernel <= 0 || lstm_kernel % 2 == 0) fail("lstm kernel must be odd");
    if (seq_len < 1) fail("seq_len must be at least 1");
    if (cpm_stages < 1) fail("cpm_stages must be at least 1");
    if (label_sigma <= 0 || center_sigma < 0) fail("sigmas must be positive");
    if (dropout < 0 || dropout >= 1) fail("dropout must lie in [0, 1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"inputSize", c.input_size},
                     {"inputChannels", c.input_channels},
                     {"joints", c.joints},
                     {"downsampleFactor", c.downsample},
                     {"encoderChannels", c.encoder_channels},
                     {"featureChannels", c.feature_channels},
                     {"headChannels", c.head_channels},
                     {"memoryChannels", c.memory_channels},
                     {"lstmKernel", c.lstm_kernel},
                     {"T", c.seq_len},
                     {"cpmStages", c.cpm_stages},
                     {"variant", variant_name(c.variant)},
                     {"centerSigma", c.center_sigma},
                     {"labelSigma", c.label_sigma},
                     {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.input_size = j.value("inputSize", d.input_size);
  c.input_channels = j.value("inputChannels", d.input_channels);
  c.joints = j.value("joints", d.joints);
  c.downsample = j.value("downsampleFactor", d.downsample);
  c.encoder_channels = j.value("encoderChannels", d.encoder_channels);
  c.feature_channels = j.value("featureChannels", d.feature_channels);
  c.head_channels = j.value("headChannels", d.head_channels);
  c.memory_channels = j.value("memoryChannels", d.memory_channels);
  c.lstm_kernel = j.value("lstmKernel", d.lstm_kernel);
  c.seq_len = j.value("T", d.seq_len);
  c.cpm_stages = j.value("cpmStages", d.cpm_stages);
  c.variant = parse_variant(j.value("variant", std::string(variant_name(d.variant))));
  c.center_sigma = j.value("centerSigma", d.center_sigma);
  c.label_sigma = j.value("labelSigma", d.label_sigma);
  c.dropout = j.value("dropout", d.dropout);
}

// ---------------------------------------------------------------------------
// ConvNet segments

enum class LayerKind { kConv, kRelu, kMaxPool, kDropout };

struct LayerSpec {
  LayerKind kind = LayerKind::kConv;
  int in = 0, out = 0, kernel = 0, stride = 1, pad = 0;

  static LayerSpec conv(int in, int out, int k) { return {LayerKind::kConv, in, out, k, 1, k / 2}; }
  static LayerSpec relu() { return {LayerKind::kRelu}; }
  static LayerSpec pool() { return {LayerKind::kMaxPool, 0, 0, 2, 2, 0}; }
  static LayerSpec dropout() { return {LayerKind::kDropout}; }
};

/// conv3x3 + ReLU (+ pool) blocks ending in `feature_channels` maps at heatmap resolution.
inline std::vector<LayerSpec> encoder_layout(const ModelConfig& c) {
  std::vector<LayerSpec> l;
  int in = c.input_channels;
  for (int width : c.encoder_channels) {
    l.push_back(LayerSpec::conv(in, width, 3));
    l.push_back(LayerSpec::relu());
    l.push_back(LayerSpec::pool());
    in = width;
  }
  l.push_back(LayerSpec::conv(in, c.feature_channels, 3));
  l.push_back(LayerSpec::relu());
  return l;
}

/// Encoder-shaped trunk plus a preliminary belief head with dropout.
inline std::vector<LayerSpec> initial_encoder_layout(const ModelConfig& c) {
  auto l = encoder_layout(c);
  l.push_back(LayerSpec::conv(c.feature_channels, c.head_channels, 3));
  l.push_back(LayerSpec::relu());
  l.push_back(LayerSpec::dropout());
  l.push_back(LayerSpec::conv(c.head_channels, c.belief_channels(), 1));
  return l;
}

/// Belief generator; no activation on the output layer.
inline std::vector<LayerSpec> generator_layout(const ModelConfig& c, int in) {
  return {LayerSpec::conv(in, c.head_channels, 3), LayerSpec::relu(),
          LayerSpec::conv(c.head_channels, c.belief_channels(), 1)};
}

inline int generator_input_channels(const ModelConfig& c) {
  return c.variant == Variant::kLstmPm ? c.memory_channels : c.stage_input_channels();
}

template <typename T = float>
struct ConvNet {
  std::vector<LayerSpec> layers;
  std::vector<Tensor<T>> weights;  // one per conv layer, in order
  std::vector<Tensor<T>> biases;

  static ConvNet zeros(std::vector<LayerSpec> layers) {
    ConvNet n;
    n.layers = std::move(layers);
    for (const auto& l : n.layers) {
      if (l.kind != LayerKind::kConv) continue;
      n.weights.emplace_back(Shape{l.out, l.in, l.kernel, l.kernel});
      n.biases.emplace_back(Shape{l.out});
    }
    return n;
  }

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < self.weights.size(); ++i) {
      f(prefix + ".conv" + std::to_string(i) + ".weight", self.weights[i]);
      f(prefix + ".conv" + std::to_string(i) + ".bias", self.biases[i]);
    }
  }
};

template <typename T = float>
struct ModelParams {
  ModelConfig config;
  ConvNet<T> initial_encoder;  // F0
  ConvNet<T> encoder;          // F
  ConvLstmParams<T> lstm;      // empty unless the variant has memory
  ConvNet<T> generator;        // G, or G' for the memoryless variants

  bool has_lstm() const { return config.variant == Variant::kLstmPm; }

  static ModelParams zeros(const ModelConfig& c) {
    c.validate();
    ModelParams p;
    p.config = c;
    p.initial_encoder = ConvNet<T>::zeros(initial_encoder_layout(c));
    p.encoder = ConvNet<T>::zeros(encoder_layout(c));
    if (c.variant == Variant::kLstmPm) {
      p.lstm = ConvLstmParams<T>::zeros(c.stage_input_channels(), c.memory_channels, c.lstm_kernel);
    }
    p.generator = ConvNet<T>::zeros(generator_layout(c, generator_input_channels(c)));
    return p;
  }

  ModelParams zeros_like() const { return zeros(config); }

  /// Visits every learnable tensor in canonical (checkpoint) order.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, std::forward<F>(f));
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, std::forward<F>(f));
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out = ModelParams<U>::zeros(config);
    std::vector<const Tensor<T>*> src;
    visit([&](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
    std::size_t k = 0;
    out.visit([&](const std::string&, Tensor<U>& t) { t = src[k++]->template cast<U>(); });
    return out;
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F&& f) {
    ConvNet<T>::visit(self.initial_encoder, "F0", f);
    ConvNet<T>::visit(self.encoder, "F", f);
    if (self.has_lstm()) ConvLstmParams<T>::visit(self.lstm, "lstm.", f);
    ConvNet<T>::visit(self.generator, self.has_lstm() ? "G" : "G'", f);
  }
};

/// Fan-in uniform kernels (bound sqrt(1/fan_in)), zero biases; LSTM per init_conv_lstm.
template <typename T = float>
ModelParams<T> init_model(const ModelConfig& c, std::uint64_t seed) {
  ModelParams<T> p = ModelParams<T>::zeros(c);
  Rng rng(derive_seed(seed, {0x1417}));
  auto init_net = [&](ConvNet<T>& net) {
    for (auto& w : net.weights) {
      const double s = std::sqrt(1.0 / (w.dim(1) * w.dim(2) * w.dim(3)));
      for (auto& v : w.storage()) v = static_cast<T>(rng.uniform(-s, s));
    }
  };
  init_net(p.initial_encoder);
  init_net(p.encoder);
  if (p.has_lstm()) p.lstm = init_conv_lstm<T>(c.stage_input_channels(), c.memory_channels, rng, c.lstm_kernel);
  init_net(p.generator);
  return p;
}

// ---------------------------------------------------------------------------
// Forward passes

template <typename T>
struct BoundConvNet {
  const std::vector<LayerSpec>* layers = nullptr;
  std::vector<Var<T>> weights, biases;
};

template <typename T>
BoundConvNet<T> bind_convnet(Tape<T>& tape, const ConvNet<T>& net, ConvNet<T>* grads) {
  BoundConvNet<T> b;
  b.layers = &net.layers;
  for (std::size_t i = 0; i < net.weights.size(); ++i) {
    b.weights.push_back(tape.parameter(net.weights[i], grads ? &grads->weights[i] : nullptr));
    b.biases.push_back(tape.parameter(net.biases[i], grads ? &grads->biases[i] : nullptr));
  }
  return b;
}

/// Parameters as tape leaves. One binding serves every stage of a sequence, so
/// gradients from all stages accumulate into the same sinks.
template <typename T>
struct BoundModel {
  const ModelConfig* config = nullptr;
  BoundConvNet<T> initial_encoder, encoder, generator;
  LstmVars<T> lstm;
};

template <typename T>
BoundModel<T> bind_model(Tape<T>& tape, const ModelParams<T>& p, std::type_identity_t<ModelParams<T>>* grads) {
  BoundModel<T> b;
  b.config = &p.config;
  b.initial_encoder = bind_convnet(tape, p.initial_encoder, grads ? &grads->initial_encoder : nullptr);
  b.encoder = bind_convnet(tape, p.encoder, grads ? &grads->encoder : nullptr);
  if (p.has_lstm()) b.lstm = bind_lstm(tape, p.lstm, grads ? &grads->lstm : nullptr);
  b.generator = bind_convnet(tape, p.generator, grads ? &grads->generator : nullptr);
  return b;
}

/// Per-call forward settings. Dropout masks are a pure function of
/// (dropout_seed, stage, layer), so a pass is reproducible.
struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

template <typename T>
class PoseMachine {
 public:
  PoseMachine(Tape<T>& tape, const BoundModel<T>& model, ForwardOptions opts = {})
      : tape_(tape), model_(model), opts_(opts) {}

  const ModelConfig& config() const { return *model_.config; }

  struct Stage {
    Var<T> beliefs;
    LstmTrace<T> memory;  // empty for memoryless variants
    Var<T> preliminary;   // F0 output on the first stage
  };

  Stage first_stage(const Var<T>& frame) {
    require_memory("first_stage");
    check_frame(frame);
    Stage s;
    s.preliminary = run(model_.initial_encoder, frame, 1);
    auto in = ops::concat_channels(tape_, {run(model_.encoder, frame, 1), s.preliminary, center_for(frame)});
    s.memory = lstm_first_step(tape_, in, model_.lstm);
    s.beliefs = run(model_.generator, s.memory.state.h, 1);
    return s;
  }

  Stage next_stage(const Var<T>& frame, const Var<T>& prev_beliefs, const LstmStateVars<T>& prev_state, int t) {
    require_memory("next_stage");
    check_frame(frame);
    Stage s;
    auto in = ops::concat_channels(tape_, {run(model_.encoder, frame, t), prev_beliefs, center_for(frame)});
    s.memory = lstm_step(tape_, in, prev_state, model_.lstm);
    s.beliefs = run(model_.generator, s.memory.state.h, t);
    return s;
  }

  std::vector<Stage> sequence(const std::vector<Var<T>>& frames) {
    if (frames.empty()) throw Error("forward_sequence: empty frame sequence");
    std::vector<Stage> out;
    out.push_back(first_stage(frames[0]));
    for (std::size_t t = 1; t < frames.size(); ++t) {
      if (frames[t]->shape() != frames[0]->shape()) {
        throw Error("forward_sequence: frame " + std::to_string(t) + " shape " + to_string(frames[t]->shape()) +
                    " differs from " + to_string(frames[0]->shape()));
      }
      out.push_back(next_stage(frames[t], out.back().beliefs, out.back().memory.state, static_cast<int>(t) + 1));
    }
    return out;
  }

  /// Memoryless recurrence: b1 = G'(F(X1) ++ F0(X1) ++ c), bt = G'(F(Xt) ++ b_{t-1} ++ c).
  Var<T> rpm_first_stage(const Var<T>& frame) {
    require_memoryless("rpm");
    check_frame(frame);
    auto prelim = run(model_.initial_encoder, frame, 1);
    return run(model_.generator,
               ops::concat_channels(tape_, {run(model_.encoder, frame, 1), prelim, center_for(frame)}), 1);
  }

  Var<T> rpm_next_stage(const Var<T>& frame, const Var<T>& prev_beliefs, int t) {
    require_memoryless("rpm");
    check_frame(frame);
    return run(model_.generator,
               ops::concat_channels(tape_, {run(model_.encoder, frame, t), prev_beliefs, center_for(frame)}), t);
  }

  std::vector<Var<T>> rpm_sequence(const std::vector<Var<T>>& frames) {
    if (frames.empty()) throw Error("forward_rpm_sequence: empty frame sequence");
    std::vector<Var<T>> out{rpm_first_stage(frames[0])};
    for (std::size_t t = 1; t < frames.size(); ++t) {
      if (frames[t]->shape() != frames[0]->shape()) throw Error("forward_rpm_sequence: frame shapes differ");
      out.push_back(rpm_next_stage(frames[t], out.back(), static_cast<int>(t) + 1));
    }
    return out;
  }

  /// Multi-stage single-frame refinement: the memoryless stage applied S times to
  /// one frame, re-encoding the frame at every stage.
  Var<T> cpm_baseline(const Var<T>& frame, int stages) {
    if (stages < 1) throw Error("forward_cpm_baseline: stage count must be at least 1");
    auto b = rpm_first_stage(frame);
    for (int s = 2; s <= stages; ++s) b = rpm_next_stage(frame, b, s);
    return b;
  }

  /// Belief maps for every frame under the configured variant.
  std::vector<Var<T>> beliefs(const std::vector<Var<T>>& frames) {
    switch (config().variant) {
      case Variant::kLstmPm: {
        std::vector<Var<T>> out;
        for (auto& s : sequence(frames)) out.push_back(s.beliefs);
        return out;
      }
      case Variant::kRpm:
        return rpm_sequence(frames);
      case Variant::kCpmBaseline: {
        std::vector<Var<T>> out;
        for (const auto& f : frames) out.push_back(cpm_baseline(f, config().cpm_stages));
        return out;
      }
    }
    return {};
  }

  Var<T> center_for(const Var<T>& frame) {
    const int h = frame->value.dim(1) / config().downsample;
    const int w = frame->value.dim(2) / config().downsample;
    if (!center_ || center_->value.dim(1) != h || center_->value.dim(2) != w) {
      center_ = tape_.constant(make_center_map<T>(h, w, config().center_sigma_for(h)));
    }
    return center_;
  }

 private:
  void require_memory(const char* op) const {
    if (config().variant != Variant::kLstmPm) {
      throw Error(std::string(op) + ": requires the LSTM_PM variant, model is " + variant_name(config().variant));
    }
  }

  void require_memoryless(const char* op) const {
    if (config().variant == Variant::kLstmPm) {
      throw Error(std::string(op) + ": requires a memoryless variant (RPM or CPM_BASELINE), model is LSTM_PM");
    }
  }

  void check_frame(const Var<T>& frame) const {
    const auto& s = frame->shape();
    const int f = config().downsample;
    if (s.size() != 3 || s[0] != config().input_channels || s[1] % f != 0 || s[2] % f != 0 || s[1] < f || s[2] < f) {
      throw Error("frame " + to_string(s) + " incompatible with model expecting " +
                  std::to_string(config().input_channels) + " channels and extents divisible by " +
                  std::to_string(f));
    }
  }

  Var<T> run(const BoundConvNet<T>& net, Var<T> x, int stage) {
    std::size_t conv = 0;
    int layer = 0;
    for (const auto& l : *net.layers) {
      switch (l.kind) {
        case LayerKind::kConv:
          x = ops::conv2d(tape_, x, net.weights[conv], net.biases[conv], l.stride, l.pad);
          ++conv;
          break;
        case LayerKind::kRelu:
          x = ops::relu(tape_, x);
          break;
        case LayerKind::kMaxPool:
          x = ops::max_pool2d(tape_, x, l.kernel, l.stride);
          break;
        case LayerKind::kDropout:
          if (opts_.training && config().dropout > 0) x = dropout(x, stage, layer);
          break;
      }
      ++layer;
    }
    return x;
  }

  Var<T> dropout(const Var<T>& x, int stage, int layer) {
    Rng rng(derive_seed(opts_.dropout_seed, {static_cast<std::uint64_t>(stage), static_cast<std::uint64_t>(layer)}));
    std::vector<std::uint8_t> keep(x->value.size());
    for (auto& k : keep) k = rng.uniform() >= config().dropout ? 1 : 0;
    return ops::dropout(tape_, x, keep, static_cast<T>(config().dropout));
  }

  Tape<T>& tape_;
  const BoundModel<T>& model_;
  ForwardOptions opts_;
  Var<T> center_;
};

/// Evaluation-mode beliefs for a frame sequence under the configured variant.
template <typename T>
std::vector<Tensor<T>> infer_beliefs(const ModelParams<T>& params, const std::vector<Tensor<T>>& frames) {
  Tape<T> tape(false);
  auto bound = bind_model(tape, params, nullptr);
  PoseMachine<T> pm(tape, bound);
  std::vector<Var<T>> fv;
  for (const auto& f : frames) fv.push_back(tape.constant(f));
  std::vector<Tensor<T>> out;
  for (auto& b : pm.beliefs(fv)) out.push_back(b->value);
  return out;
}

}  // namespace lpm
