#pragma once

// Run configuration: named profiles, JSON files and dotted-path overrides.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lpm/model.hpp"
#include "lpm/synth.hpp"
#include "lpm/trainer.hpp"

namespace lpm {

struct DataConfig {
  int train_sequences = 200;
  int test_sequences = 50;
  int sequence_length = 5;

  friend void to_json(nlohmann::json& j, const DataConfig& c) {
    j = {{"trainSequences", c.train_sequences},
         {"testSequences", c.test_sequences},
         {"sequenceLength", c.sequence_length}};
  }
  friend void from_json(const nlohmann::json& j, DataConfig& c) {
    DataConfig d;
    c.train_sequences = j.value("trainSequences", d.train_sequences);
    c.test_sequences = j.value("testSequences", d.test_sequences);
    c.sequence_length = j.value("sequenceLength", d.sequence_length);
  }
};

struct EvalConfig {
  double alpha = 0.2;
  std::vector<double> scales{1.0};

  friend void to_json(nlohmann::json& j, const EvalConfig& c) { j = {{"alpha", c.alpha}, {"scales", c.scales}}; }
  friend void from_json(const nlohmann::json& j, EvalConfig& c) {
    EvalConfig d;
    c.alpha = j.value("alpha", d.alpha);
    c.scales = j.value("scales", d.scales);
  }
};

struct BenchConfig {
  int frames = 100;
  int stages = 6;
  int warmups = 3;
  int repetitions = 5;

  friend void to_json(nlohmann::json& j, const BenchConfig& c) {
    j = {{"frames", c.frames}, {"stages", c.stages}, {"warmups", c.warmups}, {"repetitions", c.repetitions}};
  }
  friend void from_json(const nlohmann::json& j, BenchConfig& c) {
    BenchConfig d;
    c.frames = j.value("frames", d.frames);
    c.stages = j.value("stages", d.stages);
    c.warmups = j.value("warmups", d.warmups);
    c.repetitions = j.value("repetitions", d.repetitions);
  }
};

struct RunConfig {
  std::string profile = "tiny";
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  SynthConfig synth;
  DataConfig data;
  EvalConfig eval;
  BenchConfig bench;

  void validate() const {
    model.validate();
    train.validate();
    synth.validate();
    if (data.train_sequences < 0 || data.test_sequences < 0) throw Error("data config: counts must be nonnegative");
    if (data.sequence_length < 1) throw Error("data config: sequenceLength must be at least 1");
    if (!(eval.alpha > 0)) throw Error("eval config: alpha must be positive");
    if (eval.scales.empty()) throw Error("eval config: scales must be non-empty");
    if (synth.image_size != model.input_size) {
      throw Error("config: synth.imageSize " + std::to_string(synth.image_size) + " differs from model.inputSize " +
                  std::to_string(model.input_size));
    }
  }

  /// Commands that generate synthetic data need the skeleton to match the model.
  void require_synthetic() const {
    if (synth.skeleton.size() != model.joints) {
      throw Error("config: synthetic skeleton has P=" + std::to_string(synth.skeleton.size()) + " but model has P=" +
                  std::to_string(model.joints));
    }
  }

  friend void to_json(nlohmann::json& j, const RunConfig& c) {
    j = {{"profile", c.profile}, {"seed", c.seed}, {"model", c.model}, {"train", c.train},
         {"synth", c.synth},     {"data", c.data}, {"eval", c.eval},   {"bench", c.bench}};
  }
};

/// Profile defaults as JSON. "tiny" is the desk-scale default; "paper" mirrors the
/// full-size layout and is not exercised by the tests.
inline nlohmann::json profile_json(const std::string& name) {
  RunConfig c;
  c.profile = name;
  if (name == "tiny") {
    c.train.augmentation.flip_prob = 0;
  } else if (name == "paper") {
    c.model.input_size = 368;
    c.model.joints = 13;
    c.model.downsample = 8;
    c.model.encoder_channels = {64, 128, 256};
    c.model.feature_channels = 32;
    c.model.head_channels = 128;
    c.model.memory_channels = 48;
    c.model.seq_len = 5;
    c.train.learning_rate = 8e-5;
    c.train.lr_drop_every = 40000;
    c.train.augmentation.crop_size = 368;
    c.synth.image_size = 368;
    c.eval.scales = {0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4};
  } else {
    throw Error("config: unknown profile '" + name + "' (expected tiny or paper)");
  }
  nlohmann::json j = c;
  j["train"].erase("seed");
  return j;
}

namespace detail {

inline void check_known(const nlohmann::json& patch, const nlohmann::json& ref, const std::string& where) {
  if (!patch.is_object()) return;
  for (const auto& [k, v] : patch.items()) {
    const std::string path = where.empty() ? k : where + "." + k;
    if (!ref.is_object() || !ref.contains(k)) {
      if (path == "train.seed") continue;
      throw Error("config: unknown key '" + path + "'");
    }
    if (v.is_object()) check_known(v, ref.at(k), path);
  }
}

inline nlohmann::json parse_scalar(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    return text;
  }
}

}  // namespace detail

/// Sets a dotted path (e.g. "train.learningRate") to a value parsed as JSON,
/// falling back to a string.
inline void apply_override(nlohmann::json& cfg, const std::string& dotted, const std::string& value) {
  if (dotted.empty()) throw Error("config: empty override path");
  nlohmann::json* node = &cfg;
  std::size_t start = 0;
  std::string prefix;
  while (true) {
    const auto dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    prefix += (prefix.empty() ? "" : ".") + key;
    if (!node->is_object() || (!node->contains(key) && prefix != "train.seed")) {
      throw Error("config: unknown key '" + prefix + "'");
    }
    if (dot == std::string::npos) {
      (*node)[key] = detail::parse_scalar(value);
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline RunConfig run_config_from_json(nlohmann::json j) {
  if (!j.contains("train") || !j["train"].contains("seed")) j["train"]["seed"] = j.at("seed");
  RunConfig c;
  try {
    c.profile = j.at("profile").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.model = j.at("model").get<ModelConfig>();
    c.train = j.at("train").get<TrainConfig>();
    c.synth = j.at("synth").get<SynthConfig>();
    c.data = j.at("data").get<DataConfig>();
    c.eval = j.at("eval").get<EvalConfig>();
    c.bench = j.at("bench").get<BenchConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Profile defaults, then the config file (if any), then overrides in order.
inline RunConfig resolve_config(const std::string& profile, const std::filesystem::path& file,
                                const std::vector<std::pair<std::string, std::string>>& overrides) {
  std::string name = profile;
  nlohmann::json patch = nlohmann::json::object();
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw Error("config: cannot read '" + file.string() + "'");
    try {
      patch = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw Error("config: '" + file.string() + "' is not valid JSON: " + e.what());
    }
    if (!patch.is_object()) throw Error("config: '" + file.string() + "' must hold a JSON object");
    if (profile.empty() && patch.contains("profile")) name = patch["profile"].get<std::string>();
  }
  auto j = profile_json(name.empty() ? "tiny" : name);
  detail::check_known(patch, j, "");
  j.merge_patch(patch);
  j["profile"] = name.empty() ? "tiny" : name;
  for (const auto& [k, v] : overrides) apply_override(j, k, v);
  return run_config_from_json(std::move(j));
}

enum class Split { kTrain, kTest };

inline std::uint64_t split_seed(std::uint64_t seed, Split split) {
  return split == Split::kTrain ? seed : derive_seed(seed, {0x7e57});
}

/// The seeded synthetic train or test set described by `c`.
inline std::vector<PoseSequence> synthetic_split(const RunConfig& c, Split split) {
  c.require_synthetic();
  const int n = split == Split::kTrain ? c.data.train_sequences : c.data.test_sequences;
  return generate_dataset(split_seed(c.seed, split), n, c.synth, c.data.sequence_length);
}

}  // namespace lpm
