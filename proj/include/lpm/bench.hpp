#pragma once

// Inference timing, an analytic multiply-accumulate model, and memory-cell
// phase capture/export.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lpm/image_io.hpp"
#include "lpm/kernels.hpp"
#include "lpm/model.hpp"

namespace lpm {

struct BenchMode {
  enum class Kind { kRecurrent, kMultistage } kind = Kind::kRecurrent;
  int stages = 1;  // multistage only

  static BenchMode recurrent() { return {}; }
  static BenchMode multistage(int s) { return {Kind::kMultistage, s}; }

  std::string name() const { return kind == Kind::kRecurrent ? "recurrent" : "multistage-" + std::to_string(stages); }

  static BenchMode parse(const std::string& s) {
    if (s == "recurrent") return recurrent();
    const std::string prefix = "multistage-";
    if (s.rfind(prefix, 0) == 0) {
      try {
        std::size_t used = 0;
        const int n = std::stoi(s.substr(prefix.size()), &used);
        if (used == s.size() - prefix.size() && n >= 1) return multistage(n);
      } catch (const std::exception&) {
      }
    }
    throw Error("bench: unknown mode '" + s + "' (expected recurrent or multistage-S)");
  }
};

namespace detail {

/// MACs of a layer stack applied to an h x w input; updates h, w to the output extent.
inline std::uint64_t layout_macs(const std::vector<LayerSpec>& layers, int& h, int& w) {
  std::uint64_t total = 0;
  for (const auto& l : layers) {
    if (l.kind == LayerKind::kConv) {
      h = (h + 2 * l.pad - l.kernel) / l.stride + 1;
      w = (w + 2 * l.pad - l.kernel) / l.stride + 1;
      total += static_cast<std::uint64_t>(l.out) * l.in * l.kernel * l.kernel * h * w;
    } else if (l.kind == LayerKind::kMaxPool) {
      h = (h - l.kernel) / l.stride + 1;
      w = (w - l.kernel) / l.stride + 1;
    }
  }
  return total;
}

inline std::uint64_t layout_macs(const std::vector<LayerSpec>& layers, int size) {
  int h = size, w = size;
  return layout_macs(layers, h, w);
}

}  // namespace detail

/// Per-component MACs for one frame at the configured input size.
struct MacBreakdown {
  std::uint64_t initial_encoder = 0;  // F0
  std::uint64_t encoder = 0;          // F
  std::uint64_t lstm_first = 0;       // input-to-gate convolutions only
  std::uint64_t lstm = 0;             // input-to-gate plus hidden-to-gate convolutions
  std::uint64_t generator = 0;        // G on the memory output
  std::uint64_t stage_generator = 0;  // G' on the concatenated stage input
};

inline MacBreakdown mac_breakdown(const ModelConfig& c) {
  c.validate();
  MacBreakdown m;
  const int s = c.input_size, hs = c.heatmap_size();
  const auto k2 = static_cast<std::uint64_t>(c.lstm_kernel) * c.lstm_kernel;
  const auto area = static_cast<std::uint64_t>(hs) * hs;
  const auto mem = static_cast<std::uint64_t>(c.memory_channels);
  m.initial_encoder = detail::layout_macs(initial_encoder_layout(c), s);
  m.encoder = detail::layout_macs(encoder_layout(c), s);
  m.lstm_first = 4 * mem * static_cast<std::uint64_t>(c.stage_input_channels()) * k2 * area;
  m.lstm = m.lstm_first + 4 * mem * mem * k2 * area;
  m.generator = detail::layout_macs(generator_layout(c, c.memory_channels), hs);
  m.stage_generator = detail::layout_macs(generator_layout(c, c.stage_input_channels()), hs);
  return m;
}

/// Per-frame MACs of what executes. Recurrent: F0 + first stage + (n-1) later
/// stages over an n-frame clip, divided by n. Multistage-S: F0 + S (F + G').
inline std::uint64_t count_macs(const ModelConfig& c, const BenchMode& mode, int n_frames = 100) {
  const auto m = mac_breakdown(c);
  if (mode.kind == BenchMode::Kind::kRecurrent) {
    if (n_frames < 1) throw Error("count_macs: frame count must be positive");
    const auto n = static_cast<std::uint64_t>(n_frames);
    const auto total = m.initial_encoder + m.encoder + m.lstm_first + m.generator +
                       (n - 1) * (m.encoder + m.lstm + m.generator);
    return (total + n / 2) / n;
  }
  if (mode.stages < 1) throw Error("count_macs: stage count must be at least 1");
  return m.initial_encoder + static_cast<std::uint64_t>(mode.stages) * (m.encoder + m.stage_generator);
}

struct BenchResult {
  BenchMode mode;
  int n_frames = 0;
  double per_frame_ms = 0;  // median over repetitions
  double total_ms = 0;      // median
  std::uint64_t mac_count = 0;
  std::vector<double> samples_ms;
};

/// Median wall-clock time after warm-up. Recurrent mode needs LSTM_PM params and
/// runs one clip of n frames; multistage mode needs memoryless params and runs
/// S stages on every frame.
inline BenchResult bench_inference(const ModelParams<float>& params, int n_frames, const BenchMode& mode,
                                   int warmups = 3, int reps = 5, std::uint64_t seed = 0) {
  const auto& c = params.config;
  if (warmups < 3 || reps < 5) throw Error("bench: at least 3 warm-up runs and 5 repetitions are required");
  if (n_frames < 1) throw Error("bench: frame count must be positive");
  const bool recurrent = mode.kind == BenchMode::Kind::kRecurrent;
  if (recurrent && n_frames < 2) throw Error("bench: recurrent mode needs at least 2 frames");
  if (recurrent && c.variant != Variant::kLstmPm) {
    throw Error(std::string("bench: recurrent mode needs an LSTM_PM model, got ") + variant_name(c.variant));
  }
  if (!recurrent && c.variant == Variant::kLstmPm) throw Error("bench: multistage mode needs a memoryless model");
  if (!recurrent && mode.stages < 1) throw Error("bench: stage count must be at least 1");

  Rng rng(derive_seed(seed, {0xbe7c}));
  std::vector<Tensor<float>> frames;
  for (int i = 0; i < n_frames; ++i) {
    Tensor<float> f({c.input_channels, c.input_size, c.input_size});
    for (auto& v : f.storage()) v = static_cast<float>(rng.uniform());
    frames.push_back(std::move(f));
  }

  float sink = 0;
  auto run_once = [&] {
    Tape<float> tape(false);
    auto bound = bind_model(tape, params, nullptr);
    PoseMachine<float> pm(tape, bound);
    if (recurrent) {
      std::vector<Var<float>> fv;
      for (const auto& f : frames) fv.push_back(tape.constant(f));
      for (const auto& s : pm.sequence(fv)) sink += s.beliefs->value[0];
    } else {
      for (const auto& f : frames) sink += pm.cpm_baseline(tape.constant(f), mode.stages)->value[0];
    }
  };
  for (int i = 0; i < warmups; ++i) run_once();
  BenchResult r;
  r.mode = mode;
  r.n_frames = n_frames;
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run_once();
    const auto t1 = std::chrono::steady_clock::now();
    r.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  auto sorted = r.samples_ms;
  std::sort(sorted.begin(), sorted.end());
  const auto mid = sorted.size() / 2;
  r.total_ms = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  r.per_frame_ms = r.total_ms / n_frames;
  r.mac_count = count_macs(c, mode, n_frames);
  if (sink != sink) throw Error("bench: non-finite output");
  return r;
}

inline nlohmann::json bench_json(const BenchResult& r, std::optional<double> ratio_vs_baseline = std::nullopt) {
  nlohmann::json j{{"mode", r.mode.name()},
                   {"S", r.mode.kind == BenchMode::Kind::kRecurrent ? nlohmann::json(nullptr)
                                                                     : nlohmann::json(r.mode.stages)},
                   {"nFrames", r.n_frames},
                   {"perFrameMs", r.per_frame_ms},
                   {"macCount", r.mac_count}};
  j["ratioVsBaseline"] = ratio_vs_baseline ? nlohmann::json(*ratio_vs_baseline) : nlohmann::json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------
// Memory phases

struct MemoryPhases {
  int stage = 1;
  std::optional<Tensor<float>> c_prev;     // C_{t-1}; absent at stage 1
  std::optional<Tensor<float>> forgotten;  // f . C_{t-1}; absent at stage 1
  Tensor<float> selected;                  // i . g
  Tensor<float> c_new;
  Tensor<float> h;
  Tensor<float> beliefs;
};

inline std::vector<MemoryPhases> capture_memory_phases(const std::vector<Tensor<float>>& frames,
                                                       const ModelParams<float>& params) {
  if (params.config.variant != Variant::kLstmPm) {
    throw Error(std::string("capture_memory_phases: model variant ") + variant_name(params.config.variant) +
                " has no memory cell");
  }
  Tape<float> tape(false);
  auto bound = bind_model(tape, params, nullptr);
  PoseMachine<float> pm(tape, bound);
  std::vector<Var<float>> fv;
  for (const auto& f : frames) fv.push_back(tape.constant(f));
  const auto stages = pm.sequence(fv);
  std::vector<MemoryPhases> out;
  for (std::size_t t = 0; t < stages.size(); ++t) {
    const auto& s = stages[t];
    MemoryPhases m;
    m.stage = static_cast<int>(t) + 1;
    if (t > 0) {
      m.c_prev = stages[t - 1].memory.state.c->value;
      m.forgotten = s.memory.forget_term->value;
    }
    m.selected = s.memory.input_term->value;
    m.c_new = s.memory.state.c->value;
    m.h = s.memory.state.h->value;
    m.beliefs = s.beliefs->value;
    out.push_back(std::move(m));
  }
  return out;
}

/// Channel min-max normalised to [0, 1]; a constant channel maps to 0.5.
inline Tensor<float> normalize_channel(const Tensor<float>& maps, int channel) {
  if (maps.rank() != 3 || channel < 0 || channel >= maps.dim(0)) {
    throw Error("export_memory_images: channel " + std::to_string(channel) + " out of range for " +
                to_string(maps.shape()));
  }
  const int h = maps.dim(1), w = maps.dim(2);
  Tensor<float> out({1, h, w});
  float lo = maps(channel, 0, 0), hi = lo;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      lo = std::min(lo, maps(channel, y, x));
      hi = std::max(hi, maps(channel, y, x));
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out(0, y, x) = hi > lo ? (maps(channel, y, x) - lo) / (hi - lo) : 0.5f;
  return out;
}

struct ExportOptions {
  bool blend = false;  // 0.5 alpha over the input frame
};

/// Writes {stage}_{phase}_{channel}.png for every phase present at every stage.
/// Returns the written paths.
inline std::vector<std::filesystem::path> export_memory_images(const std::vector<MemoryPhases>& phases,
                                                               const std::vector<int>& channels,
                                                               const std::filesystem::path& out_dir,
                                                               const std::vector<Tensor<float>>& frames,
                                                               ExportOptions opts = {}) {
  if (frames.size() < phases.size()) throw Error("export_memory_images: fewer frames than captured stages");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error("export_memory_images: cannot create " + out_dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  for (std::size_t t = 0; t < phases.size(); ++t) {
    const auto& ph = phases[t];
    const auto& frame = frames[t];
    const int fh = frame.dim(1), fw = frame.dim(2);
    std::vector<std::pair<const char*, const Tensor<float>*>> named;
    if (ph.c_prev) named.emplace_back("cprev", &*ph.c_prev);
    if (ph.forgotten) named.emplace_back("forget", &*ph.forgotten);
    named.emplace_back("input", &ph.selected);
    named.emplace_back("cnew", &ph.c_new);
    named.emplace_back("h", &ph.h);
    for (const auto& [name, maps] : named) {
      for (int ch : channels) {
        auto up = kernels::upsample_bilinear(normalize_channel(*maps, ch), fh, fw);
        for (auto& v : up.storage()) v = std::clamp(v, 0.0f, 1.0f);
        Tensor<float> img = up;
        if (opts.blend) {
          img = Tensor<float>({3, fh, fw});
          const int fc = frame.dim(0);
          for (int c = 0; c < 3; ++c)
            for (int y = 0; y < fh; ++y)
              for (int x = 0; x < fw; ++x) img(c, y, x) = 0.5f * up(0, y, x) + 0.5f * frame(c % fc, y, x);
        }
        auto path = out_dir / (std::to_string(ph.stage) + "_" + name + "_" + std::to_string(ch) + ".png");
        write_png(path, img);
        written.push_back(std::move(path));
      }
    }
  }
  return written;
}

}  // namespace lpm
