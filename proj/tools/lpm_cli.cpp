#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lpm/bench.hpp"
#include "lpm/checkpoint.hpp"
#include "lpm/config.hpp"
#include "lpm/evaluator.hpp"
#include "lpm/image_io.hpp"
#include "lpm/trainer.hpp"

namespace fs = std::filesystem;
using namespace lpm;

namespace {

struct Common {
  std::string config_file;
  std::string profile;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required) {
  cmd->add_option("--config", c.config_file, "JSON config file");
  cmd->add_option("--profile", c.profile, "tiny or paper");
  cmd->add_option("--seed", c.seed, "root seed");
  auto* o = cmd->add_option("--out", c.out, "output directory");
  if (out_required) o->required();
  cmd->allow_extras();
}

/// Turns leftover "--a.b=v" / "--a.b v" tokens into overrides; anything else is an unknown flag.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extra) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extra.size(); ++i) {
    const auto& tok = extra[i];
    if (tok.rfind("--", 0) != 0 || tok.find('.') == std::string::npos) throw Error("unknown argument '" + tok + "'");
    const auto eq = tok.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(tok.substr(2, eq - 2), tok.substr(eq + 1));
    } else if (i + 1 < extra.size()) {
      out.emplace_back(tok.substr(2), extra[++i]);
    } else {
      throw Error("override '" + tok + "' has no value");
    }
    if (out.back().first.find('.') == std::string::npos) throw Error("unknown argument '" + tok + "'");
  }
  return out;
}

RunConfig resolve(const Common& c, const CLI::App* cmd) {
  auto overrides = parse_overrides(cmd->remaining());
  if (c.seed) overrides.insert(overrides.begin(), {"seed", std::to_string(*c.seed)});
  return resolve_config(c.profile, c.config_file, overrides);
}

void announce(const RunConfig& c) {
  std::cout << "config: " << nlohmann::json(c).dump() << '\n' << "seed: " << c.seed << std::endl;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

std::vector<PoseSequence> dataset(const RunConfig& c, const std::string& manifest, Split split) {
  if (!manifest.empty()) return load_manifest(manifest, c.model.input_size, c.model.joints);
  return synthetic_split(c, split);
}

/// Loads a checkpoint; its model section replaces the resolved one.
ModelParams<float> load_model(RunConfig& c, const std::string& path) {
  if (path.empty()) throw Error("--checkpoint is required");
  auto p = load_checkpoint(path);
  if (p.config.input_size != c.synth.image_size) {
    throw Error("checkpoint input size " + std::to_string(p.config.input_size) + " differs from config synth.imageSize " +
                std::to_string(c.synth.image_size));
  }
  c.model = p.config;
  return p;
}

// ---------------------------------------------------------------------------

void cmd_synth(const Common& com, const CLI::App* cmd, const std::string& split_name, std::optional<int> count) {
  auto c = resolve(com, cmd);
  const Split split = split_name == "test" ? Split::kTest : Split::kTrain;
  if (count) (split == Split::kTrain ? c.data.train_sequences : c.data.test_sequences) = *count;
  announce(c);
  auto seqs = synthetic_split(c, split);
  const fs::path out = com.out;
  export_manifest(seqs, out);
  write_json(out / "config.json", c);
  std::cout << "wrote " << seqs.size() << " sequences to " << (out / "manifest.jsonl").string() << std::endl;
}

void cmd_train(const Common& com, const CLI::App* cmd, const std::string& manifest, bool resume) {
  auto c = resolve(com, cmd);
  announce(c);
  auto data = dataset(c, manifest, Split::kTrain);
  const fs::path out = com.out;
  fs::create_directories(out);
  write_json(out / "config.json", c);
  auto init = init_model<float>(c.model, derive_seed(c.seed, {0x1417}));
  auto st = train_loop(data, init, c.train, out, resume, [&](int it, const StepResult& r) {
    if (it % c.train.log_every == 0) std::cout << "iteration " << it << " loss " << r.loss << " lr " << r.lr << '\n';
  });
  std::cout << "checkpoint " << TrainPaths{out}.model().string() << " after " << st.opt.iteration << " iterations"
            << std::endl;
}

void cmd_eval(const Common& com, const CLI::App* cmd, const std::string& ckpt, const std::string& manifest) {
  auto c = resolve(com, cmd);
  auto params = load_model(c, ckpt);
  announce(c);
  auto data = dataset(c, manifest, Split::kTest);
  const auto names = c.synth.skeleton.size() == c.model.joints ? c.synth.skeleton.names : std::vector<std::string>{};
  auto rep = evaluate(params, data, c.eval.alpha, c.eval.scales, names);
  std::cout << rep.table();
  const auto j = rep.to_json();
  std::cout << j.dump() << std::endl;
  if (!com.out.empty()) write_json(fs::path(com.out) / "report.json", j);
}

void draw_marker(Tensor<float>& img, double x, double y, const Color& col) {
  const int cx = static_cast<int>(std::floor(x)), cy = static_cast<int>(std::floor(y));
  for (int d = -2; d <= 2; ++d) {
    for (auto [px, py] : {std::pair{cx + d, cy}, std::pair{cx, cy + d}}) {
      if (px < 0 || py < 0 || px >= img.dim(2) || py >= img.dim(1)) continue;
      for (int ch = 0; ch < 3; ++ch) img(ch, py, px) = col[static_cast<std::size_t>(ch)];
    }
  }
}

void cmd_infer(const Common& com, const CLI::App* cmd, const std::string& ckpt, const std::string& input,
               bool overlay) {
  auto c = resolve(com, cmd);
  auto params = load_model(c, ckpt);
  announce(c);
  struct Clip {
    std::string id;
    std::vector<Tensor<float>> frames;
    std::vector<std::array<double, 3>> back;  // letterbox scale, x offset, y offset
  };
  std::vector<Clip> clips;
  const fs::path in = input;
  if (fs::is_directory(in)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(in))
      if (e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw Error("no PNG frames in '" + in.string() + "'");
    Clip clip{in.filename().string(), {}, {}};
    for (const auto& f : files) {
      auto [img, xf] = letterbox(read_png(f), c.model.input_size);
      clip.frames.push_back(std::move(img));
      clip.back.push_back(xf);
    }
    clips.push_back(std::move(clip));
  } else {
    for (auto& s : load_manifest(in, c.model.input_size, c.model.joints)) {
      clips.push_back({s.id, s.frames, std::vector<std::array<double, 3>>(s.frames.size(), {1.0, 0.0, 0.0})});
    }
  }
  const fs::path out = com.out;
  fs::create_directories(out);
  std::ofstream lines(out / "predictions.jsonl", std::ios::trunc);
  if (!lines) throw Error("cannot write '" + (out / "predictions.jsonl").string() + "'");
  const auto colors = c.synth.skeleton.colors;
  for (const auto& clip : clips) {
    const int win = c.model.variant == Variant::kCpmBaseline ? 1 : c.model.seq_len;
    for (int start = 0; start < static_cast<int>(clip.frames.size()); start += win) {
      const int end = std::min(static_cast<int>(clip.frames.size()), start + win);
      std::vector<Tensor<float>> frames(clip.frames.begin() + start, clip.frames.begin() + end);
      auto beliefs = infer_multiscale(params, frames, c.eval.scales);
      for (int t = start; t < end; ++t) {
        const auto det = decode_beliefs(beliefs[static_cast<std::size_t>(t - start)], c.model.downsample);
        const auto& xf = clip.back[static_cast<std::size_t>(t)];
        nlohmann::json joints = nlohmann::json::array();
        for (const auto& d : det) joints.push_back({(d.x - xf[1]) / xf[0], (d.y - xf[2]) / xf[0], d.confidence});
        lines << nlohmann::json{{"sequence", clip.id}, {"frame", t}, {"joints", joints}}.dump() << '\n';
        if (overlay) {
          auto img = clip.frames[static_cast<std::size_t>(t)];
          for (std::size_t j = 0; j < det.size(); ++j)
            draw_marker(img, det[j].x, det[j].y, j < colors.size() ? colors[j] : Color{1, 1, 1});
          write_png(out / "overlays" / (clip.id + "_" + std::to_string(t) + ".png"), img);
        }
      }
    }
  }
  std::cout << "wrote " << (out / "predictions.jsonl").string() << std::endl;
}

void cmd_bench(const Common& com, const CLI::App* cmd, const std::string& ckpt) {
  auto c = resolve(com, cmd);
  ModelParams<float> rec;
  if (ckpt.empty()) {
    c.model.variant = Variant::kLstmPm;
    rec = init_model<float>(c.model, derive_seed(c.seed, {0x1417}));
  } else {
    rec = load_model(c, ckpt);
  }
  if (rec.config.variant != Variant::kLstmPm) throw Error("bench needs an LSTM_PM checkpoint");
  announce(c);
  auto base_cfg = rec.config;
  base_cfg.variant = Variant::kCpmBaseline;
  base_cfg.cpm_stages = c.bench.stages;
  const auto base = init_model<float>(base_cfg, derive_seed(c.seed, {0x1417}));
  const auto r = bench_inference(rec, c.bench.frames, BenchMode::recurrent(), c.bench.warmups, c.bench.repetitions);
  const auto b = bench_inference(base, c.bench.frames, BenchMode::multistage(c.bench.stages), c.bench.warmups,
                                 c.bench.repetitions);
  const double ratio = b.per_frame_ms / r.per_frame_ms;
  const double mac_ratio = static_cast<double>(b.mac_count) / static_cast<double>(r.mac_count);
  nlohmann::json j{{"recurrent", bench_json(r, ratio)},
                   {"multistage", bench_json(b, 1.0)},
                   {"ratioVsBaseline", ratio},
                   {"macRatio", mac_ratio},
                   {"weightSharing", "all recurrent stages and all multistage stages reuse one parameter set"}};
  std::cout << j.dump(2) << std::endl;
  if (!com.out.empty()) write_json(fs::path(com.out) / "bench.json", j);
}

void cmd_viz(const Common& com, const CLI::App* cmd, const std::string& ckpt, const std::string& manifest, int index,
             const std::vector<int>& channels, bool blend) {
  auto c = resolve(com, cmd);
  auto params = load_model(c, ckpt);
  announce(c);
  auto data = dataset(c, manifest, Split::kTest);
  if (index < 0 || index >= static_cast<int>(data.size())) {
    throw Error("sequence index " + std::to_string(index) + " out of range [0, " + std::to_string(data.size()) + ")");
  }
  const auto& seq = data[static_cast<std::size_t>(index)];
  auto phases = capture_memory_phases(seq.frames, params);
  auto files = export_memory_images(phases, channels, com.out, seq.frames, {blend});
  std::cout << "wrote " << files.size() << " images to " << com.out << std::endl;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LSTM pose machine toolkit"};
  app.require_subcommand(1);

  Common synth_c, train_c, eval_c, infer_c, bench_c, viz_c;
  std::string split = "train", data_manifest, ckpt, input;
  std::optional<int> count;
  bool resume = false, overlay = false, blend = false;
  int seq_index = 0;
  std::vector<int> channels{0, 1, 2, 3};

  auto* synth = app.add_subcommand("synth", "write a seeded synthetic dataset");
  add_common(synth, synth_c, true);
  synth->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
  synth->add_option("--count", count, "number of sequences");

  auto* train = app.add_subcommand("train", "train a model");
  add_common(train, train_c, true);
  train->add_option("--data", data_manifest, "manifest.jsonl (default: seeded synthetic train split)");
  train->add_flag("--resume", resume, "continue from the checkpoint in --out");

  auto* eval = app.add_subcommand("eval", "PCK report for a checkpoint");
  add_common(eval, eval_c, false);
  eval->add_option("--checkpoint", ckpt)->required();
  eval->add_option("--data", data_manifest, "manifest.jsonl (default: seeded synthetic test split)");

  auto* infer = app.add_subcommand("infer", "decode joints for a manifest or a directory of frames");
  add_common(infer, infer_c, true);
  infer->add_option("--checkpoint", ckpt)->required();
  infer->add_option("--input", input, "manifest.jsonl or directory of PNG frames")->required();
  infer->add_flag("--overlay", overlay, "also write overlay images");

  auto* bench = app.add_subcommand("bench", "recurrent vs multistage inference speed");
  add_common(bench, bench_c, false);
  bench->add_option("--checkpoint", ckpt, "LSTM_PM checkpoint (default: freshly initialised)");

  auto* viz = app.add_subcommand("viz", "export memory-cell phase images for one sequence");
  add_common(viz, viz_c, true);
  viz->add_option("--checkpoint", ckpt)->required();
  viz->add_option("--data", data_manifest, "manifest.jsonl (default: seeded synthetic test split)");
  viz->add_option("--sequence", seq_index, "sequence index");
  viz->add_option("--channels", channels, "memory channels to export")->delimiter(',');
  viz->add_flag("--blend", blend, "blend over the input frame");

  std::string command = "lpm";
  try {
    app.parse(argc, argv);
    for (auto* sub : app.get_subcommands()) command = sub->get_name();
    if (synth->parsed()) cmd_synth(synth_c, synth, split, count);
    if (train->parsed()) cmd_train(train_c, train, data_manifest, resume);
    if (eval->parsed()) cmd_eval(eval_c, eval, ckpt, data_manifest);
    if (infer->parsed()) cmd_infer(infer_c, infer, ckpt, input, overlay);
    if (bench->parsed()) cmd_bench(bench_c, bench, ckpt);
    if (viz->parsed()) cmd_viz(viz_c, viz, ckpt, data_manifest, seq_index, channels, blend);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    for (auto* sub : app.get_subcommands()) command = sub->get_name();
    std::cerr << "error: " << command << ": usage: " << one_line(e.what()) << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << command << ": " << one_line(e.what()) << std::endl;
    return 1;
  }
  return 0;
}
