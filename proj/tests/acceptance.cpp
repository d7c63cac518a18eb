// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--criterion N] [--prepare] [--cache DIR] [--cli PATH]
//
// Trained models are cached under --cache and reused when their configuration
// matches. Exit status is the number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "lpm/bench.hpp"
#include "lpm/checkpoint.hpp"
#include "lpm/config.hpp"
#include "lpm/evaluator.hpp"
#include "lpm/trainer.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using namespace lpm;
using testing::random_tensor;

namespace {

// Realised trained mean PCK@0.2 of the T=5 LSTM model on the held-out set,
// measured once; the regression floor is 90% of it.
constexpr double kRealisedTrainedPck = 100.0;
constexpr double kUntrainedCeiling = 30.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Context {
  fs::path cache;
  std::string cli;
  RunConfig cfg = resolve_config("tiny", "", {{"seed", "20240601"}});
  std::map<std::string, ModelParams<float>> models;
  std::vector<PoseSequence> train_set, test_set, occluded_set;

  const std::vector<PoseSequence>& train() {
    if (train_set.empty()) train_set = synthetic_split(cfg, Split::kTrain);
    return train_set;
  }
  const std::vector<PoseSequence>& test() {
    if (test_set.empty()) test_set = synthetic_split(cfg, Split::kTest);
    return test_set;
  }
  const std::vector<PoseSequence>& occluded() {
    if (occluded_set.empty()) {
      auto c = cfg;
      c.synth.occlusion = 1.0;
      occluded_set = generate_dataset(derive_seed(cfg.seed, {0x0cc1}), c.data.test_sequences, c.synth,
                                      c.data.sequence_length);
    }
    return occluded_set;
  }

  ModelConfig model_config(Variant v, int seq_len) const {
    auto m = cfg.model;
    m.variant = v;
    m.seq_len = seq_len;
    return m;
  }

  ModelParams<float> init(const ModelConfig& m) const { return init_model<float>(m, derive_seed(cfg.seed, {0x1417})); }

  /// Trains (or reloads) one model on the shared training set.
  std::map<std::string, double> train_seconds;

  const ModelParams<float>& trained(const std::string& name, Variant v, int seq_len) {
    if (auto it = models.find(name); it != models.end()) return it->second;
    const auto m = model_config(v, seq_len);
    const nlohmann::json key{{"model", m}, {"train", cfg.train}, {"synth", cfg.synth}, {"data", cfg.data},
                             {"seed", cfg.seed}};
    const auto dir = cache / name;
    const auto key_file = dir / "key.json";
    bool reuse = false;
    if (fs::exists(key_file)) {
      std::ifstream in(key_file);
      reuse = nlohmann::json::parse(in) == key;
    }
    if (!reuse) fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(key_file) << key.dump(2);
    const auto t0 = std::chrono::steady_clock::now();
    auto st = train_loop(train(), init(m), cfg.train, dir, true, [&](int it, const StepResult& r) {
      if (it % 500 == 0) std::cerr << "  [" << name << "] iteration " << it << " loss " << r.loss << std::endl;
    });
    const auto secs_file = dir / "train_seconds.txt";
    double total = 0;
    if (std::ifstream in(secs_file); in) in >> total;
    total += seconds_since(t0);
    std::ofstream(secs_file) << total;
    train_seconds[name] = total;
    std::cerr << "  [" << name << "] ready after " << st.opt.iteration << " iterations (" << total << " s in total)"
              << std::endl;
    return models.emplace(name, std::move(st.params)).first->second;
  }
};

// ---------------------------------------------------------------------------

using Fn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

double worst_grad_error(const std::string& name, int instances,
                        const std::function<std::vector<Tensor<double>>(Rng&)>& make, const Fn& op) {
  Rng rng(derive_seed(7, {std::hash<std::string>{}(name)}));
  double worst = 0;
  for (int k = 0; k < instances; ++k) {
    auto inputs = make(rng);
    const auto target_seed = rng.next_u64();
    Fn f = [&](Tape<double>& t, const std::vector<Var<double>>& v) {
      auto y = op(t, v);
      Rng tr(target_seed);
      return ops::sum_sq_diff(t, y, t.constant(random_tensor<double>(tr, y->shape())));
    };
    worst = std::max(worst, testing::grad_check(inputs, f).max_rel_error);
  }
  return worst;
}

Outcome criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  constexpr int kN = 20;
  auto one = [](Shape s, double lo = -1, double hi = 1) {
    return [s, lo, hi](Rng& r) { return std::vector<Tensor<double>>{random_tensor<double>(r, s, lo, hi)}; };
  };
  auto two = [](Rng& r) {
    return std::vector<Tensor<double>>{random_tensor<double>(r, {2, 3, 3}), random_tensor<double>(r, {2, 3, 3})};
  };
  std::vector<std::pair<std::string, double>> errs;
  errs.emplace_back("conv2d", worst_grad_error(
                                  "conv2d", kN,
                                  [](Rng& r) {
                                    const int cin = r.uniform_int(1, 3), cout = r.uniform_int(1, 3),
                                              k = r.uniform_int(1, 3);
                                    return std::vector<Tensor<double>>{random_tensor<double>(r, {cin, 5, 4}),
                                                                       random_tensor<double>(r, {cout, cin, k, k}),
                                                                       random_tensor<double>(r, {cout})};
                                  },
                                  [](Tape<double>& t, const std::vector<Var<double>>& v) {
                                    return ops::conv2d(t, v[0], v[1], v[2], 1 + v[1]->value.dim(0) % 2, 1);
                                  }));
  errs.emplace_back("max_pool2d", worst_grad_error("max_pool2d", kN, one({2, 5, 6}),
                                                   [](Tape<double>& t, const std::vector<Var<double>>& v) {
                                                     return ops::max_pool2d(t, v[0], 2, 2);
                                                   }));
  errs.emplace_back("relu", worst_grad_error("relu", kN, one({7}, -3, 3), [](Tape<double>& t, const auto& v) {
                      return ops::relu(t, v[0]);
                    }));
  errs.emplace_back("sigmoid", worst_grad_error("sigmoid", kN, one({7}, -3, 3), [](Tape<double>& t, const auto& v) {
                      return ops::sigmoid(t, v[0]);
                    }));
  errs.emplace_back("tanh", worst_grad_error("tanh", kN, one({7}, -3, 3), [](Tape<double>& t, const auto& v) {
                      return ops::tanh(t, v[0]);
                    }));
  errs.emplace_back("add", worst_grad_error("add", kN, two, [](Tape<double>& t, const auto& v) {
                      return ops::add(t, v[0], v[1]);
                    }));
  errs.emplace_back("mul", worst_grad_error("mul", kN, two, [](Tape<double>& t, const auto& v) {
                      return ops::mul(t, v[0], v[1]);
                    }));
  errs.emplace_back("scale", worst_grad_error("scale", kN, one({5}), [](Tape<double>& t, const auto& v) {
                      return ops::scale(t, v[0], -1.7);
                    }));
  errs.emplace_back("concat_slice", worst_grad_error(
                                        "concat_slice", kN,
                                        [](Rng& r) {
                                          return std::vector<Tensor<double>>{random_tensor<double>(r, {1, 2, 3}),
                                                                             random_tensor<double>(r, {2, 2, 3})};
                                        },
                                        [](Tape<double>& t, const auto& v) {
                                          return ops::slice_leading(t, ops::concat_channels(t, {v[0], v[1]}), 1, 2);
                                        }));
  errs.emplace_back("upsample_bilinear",
                    worst_grad_error("upsample_bilinear", kN, one({1, 2, 3}), [](Tape<double>& t, const auto& v) {
                      return ops::upsample_bilinear(t, v[0], 5, 4);
                    }));
  errs.emplace_back("sum_sq_diff", worst_grad_error("sum_sq_diff", kN, two, [](Tape<double>& t, const auto& v) {
                      return ops::sum_sq_diff(t, v[0], v[1]);
                    }));
  const std::vector<std::uint8_t> keep{1, 0, 1, 1, 0};
  errs.emplace_back("dropout", worst_grad_error("dropout", kN, one({5}), [&](Tape<double>& t, const auto& v) {
                      return ops::dropout(t, v[0], keep, 0.5);
                    }));
  errs.emplace_back("lstm_step", worst_grad_error(
                                     "lstm_step", kN,
                                     [](Rng& r) {
                                       return std::vector<Tensor<double>>{
                                           random_tensor<double>(r, {2, 3, 3}), random_tensor<double>(r, {2, 3, 3}),
                                           random_tensor<double>(r, {2, 3, 3}), random_tensor<double>(r, {8, 2, 3, 3}),
                                           random_tensor<double>(r, {8, 2, 3, 3}), random_tensor<double>(r, {8})};
                                     },
                                     [](Tape<double>& t, const auto& v) {
                                       LstmVars<double> p{v[3], v[4], v[5], t.constant(Tensor<double>({8})), 2, 2};
                                       return lstm_step(t, v[0], {v[1], v[2]}, p).state.h;
                                     }));
  double worst = 0;
  std::string worst_op;
  for (const auto& [n, e] : errs) {
    if (e >= worst) {
      worst = e;
      worst_op = n;
    }
  }

  // Forward oracles.
  Rng rng(11);
  double conv_err = 0, pool_err = 0, lstm_err = 0;
  for (int k = 0; k < 30; ++k) {
    const int cin = rng.uniform_int(1, 6), cout = rng.uniform_int(1, 6), kk = rng.uniform_int(1, 4);
    const int h = rng.uniform_int(kk + 2, 14), w = rng.uniform_int(kk + 2, 14), s = rng.uniform_int(1, 2),
              pad = rng.uniform_int(0, 1);
    auto x = random_tensor<double>(rng, {cin, h, w});
    auto wt = random_tensor<double>(rng, {cout, cin, kk, kk});
    auto b = random_tensor<double>(rng, {cout});
    Tape<double> tape(false);
    conv_err = std::max(conv_err, max_abs_diff(ops::conv2d(tape, tape.constant(x), tape.constant(wt),
                                                           tape.constant(b), s, pad)->value,
                                               testing::naive_conv(x, wt, b, s, pad)));
    pool_err = std::max(pool_err, max_abs_diff(kernels::max_pool2d(x, 2, 2), testing::naive_pool(x, 2, 2)));
    auto p = ConvLstmParams<double>::zeros(cin, 3);
    for (int g = 0; g < 4; ++g) {
      p.wx[g] = random_tensor<double>(rng, p.wx[g].shape());
      p.wh[g] = random_tensor<double>(rng, p.wh[g].shape());
      p.bias[g] = random_tensor<double>(rng, p.bias[g].shape());
    }
    LstmState<double> prev{random_tensor<double>(rng, {3, h, w}), random_tensor<double>(rng, {3, h, w})};
    auto got = lstm_step(x, prev, p);
    auto [c, hh] = testing::scalar_from(p, h, w).step(testing::as_double(x), testing::as_double(prev.c),
                                                      testing::as_double(prev.h), false);
    for (std::size_t i = 0; i < c.size(); ++i) {
      lstm_err = std::max({lstm_err, std::abs(got.c[i] - c[i]), std::abs(got.h[i] - hh[i])});
    }
  }
  const double secs = seconds_since(t0);
  const bool pass = worst < 1e-4 && conv_err <= 1e-6 && pool_err <= 1e-6 && lstm_err <= 1e-6 && secs < 120;
  return {pass, fmt("%zu ops x %d instances, worst relative grad error %.2e (%s) < 1e-4; forward max error conv "
                    "%.1e pool %.1e lstm %.1e <= 1e-6; %.1f s < 120 s",
                    errs.size(), kN, worst, worst_op.c_str(), conv_err, pool_err, lstm_err, secs)};
}

Outcome criterion2() {
  Rng rng(21);
  double oracle_err = 0, retention = 0, first_err = 0;
  bool bounds = true;
  for (int k = 0; k < 20; ++k) {
    const int cx = rng.uniform_int(1, 4), m = rng.uniform_int(1, 4), h = rng.uniform_int(2, 6), w = rng.uniform_int(2, 6);
    auto p = ConvLstmParams<double>::zeros(cx, m);
    for (int g = 0; g < 4; ++g) {
      p.wx[g] = random_tensor<double>(rng, p.wx[g].shape(), -2, 2);
      p.wh[g] = random_tensor<double>(rng, p.wh[g].shape(), -2, 2);
      p.bias[g] = random_tensor<double>(rng, p.bias[g].shape(), -2, 2);
    }
    auto x = random_tensor<double>(rng, {cx, h, w}, -3, 3);
    LstmState<double> prev{random_tensor<double>(rng, {m, h, w}, -3, 3), random_tensor<double>(rng, {m, h, w})};
    Tape<double> tape(false);
    auto vars = bind_lstm(tape, p, nullptr);
    auto tr = lstm_step(tape, tape.constant(x), {tape.constant(prev.c), tape.constant(prev.h)}, vars);
    auto [c, hh] = testing::scalar_from(p, h, w).step(testing::as_double(x), testing::as_double(prev.c),
                                                      testing::as_double(prev.h), false);
    for (std::size_t i = 0; i < c.size(); ++i) {
      oracle_err = std::max({oracle_err, std::abs(tr.state.c->value[i] - c[i]), std::abs(tr.state.h->value[i] - hh[i])});
      const double g = tr.g->value[i], ig = tr.i->value[i], f = tr.f->value[i], o = tr.o->value[i];
      bounds = bounds && g >= -1 && g <= 1 && ig >= 0 && ig <= 1 && f >= 0 && f <= 1 && o >= 0 && o <= 1 &&
               std::abs(tr.state.h->value[i]) <= 1;
    }
    auto first = lstm_first_step(tape, tape.constant(x), vars);
    auto ig = ops::mul(tape, first.i, first.g)->value;
    first_err = std::max(first_err, max_abs_diff(first.state.c->value, ig));

    // Saturated retention: forget gate at 1, input gate at 0.
    auto sat = ConvLstmParams<float>::zeros(cx, m);
    for (int g = 0; g < 4; ++g) {
      sat.wx[g] = p.wx[g].cast<float>();
      sat.wh[g] = p.wh[g].cast<float>();
      sat.bias[g] = p.bias[g].cast<float>();
    }
    sat.gate_bias(Gate::kF).fill(200.0f);
    sat.gate_bias(Gate::kI).fill(-200.0f);
    LstmState<float> st{prev.c.cast<float>(), prev.h.cast<float>()};
    for (int t = 0; t < 5; ++t) {
      auto next = lstm_step(random_tensor<float>(rng, {cx, h, w}, -3, 3), st, sat);
      retention = std::max(retention, static_cast<double>(max_abs_diff(next.c, st.c)));
      st = next;
    }
  }
  const bool pass = oracle_err < 1e-9 && bounds && retention < 1e-6 && first_err == 0;
  return {pass, fmt("scalar oracle max error %.1e; gate bounds %s; saturated retention ||C_t - C_t-1||inf = %.1e < "
                    "1e-6; C1 - i1*g1 = %.1e",
                    oracle_err, bounds ? "hold" : "violated", retention, first_err)};
}

Outcome criterion3(Context& ctx) {
  auto t2 = ctx.model_config(Variant::kLstmPm, 2), t8 = ctx.model_config(Variant::kLstmPm, 8);
  const auto a = encode_payload(named_tensors(init_model<float>(t2, 5)));
  const auto b = encode_payload(named_tensors(init_model<float>(t8, 5)));
  auto p = init_model<float>(ctx.cfg.model, 6);
  const auto& seq = ctx.test().at(0);
  const auto before = infer_beliefs(p, seq.frames);
  p.encoder.weights[0][0] += 0.5f;
  const auto after = infer_beliefs(p, seq.frames);
  int changed = 0;
  for (std::size_t t = 0; t < before.size(); ++t) changed += max_abs_diff(before[t], after[t]) > 0;
  const bool pass = a == b && changed == static_cast<int>(before.size());
  return {pass, fmt("payload T=2 vs T=8: %zu vs %zu bytes, %s; perturbing F changed %d/%zu stages", a.size(), b.size(),
                    a == b ? "identical" : "different", changed, before.size())};
}

Outcome criterion4(Context& ctx) {
  const auto t0 = std::chrono::steady_clock::now();
  auto seq = generate_dataset(derive_seed(ctx.cfg.seed, {0x0f17}), 1, ctx.cfg.synth, ctx.cfg.data.sequence_length);
  auto tc = ctx.cfg.train;
  tc.augment = false;
  auto params = ctx.init(ctx.cfg.model);
  auto opt = make_sgd_state(params);
  double first = 0, last = 0;
  for (int it = 0; it < 300; ++it) {
    std::vector<TrainSample> batch;
    for (int s = 0; s < tc.batch_size; ++s) batch.push_back(make_sample(seq, params.config, tc, it, s));
    const auto r = train_step(batch, params, opt, tc);
    if (it == 0) first = r.loss;
    last = r.loss;
  }
  const auto rep = evaluate(params, seq, 0.2);
  const double secs = seconds_since(t0);
  const bool pass = last < 0.05 * first && rep.pck.mean == 100.0 && secs <= 300;
  return {pass, fmt("loss %.1f -> %.2f (%.2f%% of initial, < 5%%); PCK@0.2 %.1f%% (= 100%%); %.0f s <= 300 s", first,
                    last, 100 * last / first, rep.pck.mean, secs)};
}

Outcome criterion5(Context& ctx) {
  const auto& model = ctx.trained("lstm_t5", Variant::kLstmPm, 5);
  const double secs = ctx.train_seconds.at("lstm_t5");
  const auto untrained = evaluate(ctx.init(ctx.cfg.model), ctx.test(), 0.2).pck.mean;
  const auto trained = evaluate(model, ctx.test(), 0.2).pck.mean;
  const double floor = 0.9 * kRealisedTrainedPck;
  const bool pass = trained >= untrained + 50 && untrained < kUntrainedCeiling && trained >= floor && secs <= 3600;
  return {pass, fmt("trained %.2f vs untrained %.2f (gain %.2f >= 50; untrained < %.0f); pinned floor %.2f; training "
                    "%.0f s <= 3600 s",
                    trained, untrained, trained - untrained, kUntrainedCeiling, floor, secs)};
}

Outcome criterion6(Context& ctx) {
  const auto& lstm = ctx.trained("lstm_t5", Variant::kLstmPm, 5);
  const auto& rpm = ctx.trained("rpm_t5", Variant::kRpm, 5);
  const double a = evaluate(lstm, ctx.occluded(), 0.2).pck.mean;
  const double b = evaluate(rpm, ctx.occluded(), 0.2).pck.mean;
  const double a5 = evaluate(lstm, ctx.occluded(), 0.05).pck.mean;
  const double b5 = evaluate(rpm, ctx.occluded(), 0.05).pck.mean;
  return {a >= b, fmt("occlusion 1.0 test set: LSTM_PM %.2f vs RPM %.2f (>=); at alpha 0.05, not gated: %.2f vs %.2f", a,
                      b, a5, b5)};
}

Outcome criterion7(Context& ctx) {
  const auto& t5 = ctx.trained("lstm_t5", Variant::kLstmPm, 5);
  const auto& t1 = ctx.trained("lstm_t1", Variant::kLstmPm, 1);
  const double a = evaluate(t5, ctx.test(), 0.2).pck.mean;
  const double b = evaluate(t1, ctx.test(), 0.2).pck.mean;
  const double a5 = evaluate(t5, ctx.test(), 0.05).pck.mean;
  const double b5 = evaluate(t1, ctx.test(), 0.05).pck.mean;
  return {a >= b, fmt("T=5 %.2f vs T=1 %.2f (>=); at alpha 0.05, not gated: %.2f vs %.2f", a, b, a5, b5)};
}

Outcome criterion8(Context& ctx) {
  const auto rec = ctx.init(ctx.model_config(Variant::kLstmPm, 5));
  auto base_cfg = ctx.model_config(Variant::kCpmBaseline, 5);
  base_cfg.cpm_stages = 6;
  const auto base = ctx.init(base_cfg);
  const auto r = bench_inference(rec, 100, BenchMode::recurrent(), 3, 7);
  const auto b = bench_inference(base, 100, BenchMode::multistage(6), 3, 7);
  const double speedup = b.per_frame_ms / r.per_frame_ms;
  const double mac_ratio = static_cast<double>(b.mac_count) / static_cast<double>(r.mac_count);
  const double rel = speedup / mac_ratio - 1;
  const bool pass = r.per_frame_ms <= 0.67 * b.per_frame_ms && std::abs(rel) <= 0.25;
  return {pass, fmt("per-frame recurrent %.2f ms vs multistage-6 %.2f ms: speedup %.2fx (>= 1.5); MAC ratio %.2fx "
                    "(%.1fM vs %.1fM), measured/MAC %+.0f%% (limit +-25%%)",
                    r.per_frame_ms, b.per_frame_ms, speedup, mac_ratio, b.mac_count / 1e6, r.mac_count / 1e6,
                    100 * rel)};
}

// Fraction of occluded joints whose most active memory channel at stage t-1
// keeps above-median 3x3 mass at the joint in f*C_prev of stage t.
std::pair<int, int> retention_story(const ModelParams<float>& model, const std::vector<PoseSequence>& seqs) {
  const int f = model.config.downsample;
  auto window_mass = [](const Tensor<float>& t, int k, int u, int v) {
    double m = 0;
    for (int y = std::max(0, v - 1); y <= std::min(t.dim(1) - 1, v + 1); ++y) {
      for (int x = std::max(0, u - 1); x <= std::min(t.dim(2) - 1, u + 1); ++x) m += std::abs(t(k, y, x));
    }
    return m;
  };
  int holds = 0, total = 0;
  for (const auto& seq : seqs) {
    const auto phases = capture_memory_phases(seq.frames, model);
    for (std::size_t t = 1; t < phases.size(); ++t) {
      const auto& before = phases[t - 1].c_new;
      const auto& kept = *phases[t].forgotten;
      for (int j = 0; j < seq.joints[t - 1].size(); ++j) {
        if (!seq.occluded[t - 1][static_cast<std::size_t>(j)]) continue;
        const auto& p = seq.joints[t - 1].joints[static_cast<std::size_t>(j)];
        const int u = std::clamp(static_cast<int>(p.x / f), 0, before.dim(2) - 1);
        const int v = std::clamp(static_cast<int>(p.y / f), 0, before.dim(1) - 1);
        int best = 0;
        for (int k = 1; k < before.dim(0); ++k) {
          if (window_mass(before, k, u, v) > window_mass(before, best, u, v)) best = k;
        }
        std::vector<double> all;
        for (int y = 0; y < kept.dim(1); ++y) {
          for (int x = 0; x < kept.dim(2); ++x) all.push_back(window_mass(kept, best, x, y));
        }
        std::nth_element(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(all.size() / 2), all.end());
        holds += window_mass(kept, best, u, v) > all[all.size() / 2];
        ++total;
      }
    }
  }
  return {holds, total};
}

Outcome criterion9(Context& ctx) {
  const auto& model = ctx.trained("lstm_t5", Variant::kLstmPm, 5);
  const auto& seq = ctx.occluded().at(0);
  const auto phases = capture_memory_phases(seq.frames, model);
  bool exact = phases.at(0).c_new == phases[0].selected;
  for (std::size_t t = 1; t < phases.size(); ++t) {
    for (std::size_t i = 0; i < phases[t].c_new.size(); ++i) {
      exact = exact && phases[t].c_new[i] == (*phases[t].forgotten)[i] + phases[t].selected[i];
    }
  }
  const auto dir = fs::temp_directory_path() / "lpm_acceptance_viz";
  fs::remove_all(dir);
  const auto files = export_memory_images(phases, {0, 23, 47}, dir, seq.frames, {true});
  int valid = 0;
  for (const auto& f : files) {
    const auto img = read_png(f);
    valid += img.dim(1) == seq.frames[0].dim(1) && img.dim(2) == seq.frames[0].dim(2);
  }
  fs::remove_all(dir);
  const int m = phases[0].c_new.dim(0);
  const auto [held, occluded] = retention_story(model, ctx.occluded());
  const bool pass = exact && valid == static_cast<int>(files.size()) && !files.empty() && m == 48 &&
                    ModelConfig{}.memory_channels == 48;
  return {pass, fmt("C_new = f*C_prev + i*g %s at %zu stages; %d/%zu PNGs decode at %dx%d; M = %d; "
                    "retention at occluded joints (recorded): %d/%d above median",
                    exact ? "exact" : "violated", phases.size(), valid, files.size(), seq.frames[0].dim(1),
                    seq.frames[0].dim(2), m, held, occluded)};
}

Outcome criterion10() {
  Rng rng(101);
  auto random_case = [&](int frames, double vis) {
    std::vector<JointSet> gts;
    std::vector<std::vector<Point>> preds;
    for (int f = 0; f < frames; ++f) {
      JointSet js;
      std::vector<Point> pr;
      for (int j = 0; j < 7; ++j) {
        js.joints.push_back({rng.uniform(0, 64), rng.uniform(0, 64)});
        js.visible.push_back(rng.bernoulli(vis));
        pr.push_back({js.joints.back().x + 6 * rng.normal(), js.joints.back().y + 6 * rng.normal()});
      }
      js.visible[0] = true;
      js.bbox = {rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(5, 40), rng.uniform(5, 40)};
      gts.push_back(js);
      preds.push_back(pr);
    }
    return std::pair{preds, gts};
  };
  int oracle_ok = 0, scale_ok = 0, mono_ok = 0;
  for (int c = 0; c < 100; ++c) {
    auto [preds, gts] = random_case(3, 0.7);
    const auto r = pck(preds, gts, 0.2);
    const auto o = testing::brute_pck(preds, gts, 0.2);
    bool same = true;
    for (std::size_t j = 0; j < o.size(); ++j) {
      same = same && (std::isnan(o[j]) ? std::isnan(r.per_joint[j]) : o[j] == r.per_joint[j]);
    }
    oracle_ok += same;
  }
  for (int c = 0; c < 100; ++c) {
    auto [preds, gts] = random_case(3, 0.8);
    const double s = std::ldexp(1.0, rng.uniform_int(-3, 4));
    auto sp = preds;
    auto sg = gts;
    for (auto& g : sg) {
      for (auto& q : g.joints) q = {q.x * s, q.y * s};
      g.bbox = {g.bbox.x * s, g.bbox.y * s, g.bbox.w * s, g.bbox.h * s};
    }
    for (auto& pr : sp)
      for (auto& q : pr) q = {q.x * s, q.y * s};
    scale_ok += pck(preds, gts, 0.2).correct == pck(sp, sg, 0.2).correct;
    bool mono = true;
    auto prev = pck(preds, gts, 0.02);
    for (double a = 0.04; a <= 1.0; a += 0.02) {
      auto cur = pck(preds, gts, a);
      for (std::size_t j = 0; j < cur.per_joint.size(); ++j) {
        if (!std::isnan(cur.per_joint[j])) mono = mono && prev.per_joint[j] <= cur.per_joint[j];
      }
      prev = cur;
    }
    mono_ok += mono;
  }
  return {oracle_ok == 100 && scale_ok == 100 && mono_ok == 100,
          fmt("brute-force oracle %d/100; scale equivariance %d/100; alpha monotonicity %d/100", oracle_ok, scale_ok,
              mono_ok)};
}

bool same_tree(const fs::path& a, const fs::path& b, int& files) {
  std::vector<fs::path> ra, rb;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) ra.push_back(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) rb.push_back(fs::relative(e.path(), b));
  std::sort(ra.begin(), ra.end());
  std::sort(rb.begin(), rb.end());
  if (ra != rb) return false;
  files = static_cast<int>(ra.size());
  for (const auto& r : ra)
    if (read_file(a / r) != read_file(b / r)) return false;
  return true;
}

Outcome criterion11(Context& ctx) {
  if (ctx.cli.empty() || !fs::exists(ctx.cli)) return {false, "command-line tool not found (pass --cli)"};
  const auto root = fs::temp_directory_path() / "lpm_acceptance_det";
  fs::remove_all(root);
  fs::create_directories(root);
  auto run = [&](const std::string& args) {
    const std::string cmd = "\"" + ctx.cli + "\" " + args + " > /dev/null 2>&1";
    return std::system(cmd.c_str()) == 0;
  };
  const std::string small = " --seed 5 --data.trainSequences=4 --data.testSequences=3 --train.batchSize=2 "
                            "--train.totalIterations=6 --train.checkpointEvery=3 --train.logEvery=1";
  bool ok = true;
  int synth_files = 0, train_files = 0, eval_files = 0;
  for (const char* r : {"1", "2"}) {
    const auto d = root / r;
    ok = ok && run("synth --out \"" + (d / "synth").string() + "\"" + small);
    ok = ok && run("train --out \"" + (d / "train").string() + "\" --data \"" + (d / "synth" / "manifest.jsonl").string() +
                   "\"" + small);
    ok = ok && run("eval --checkpoint \"" + (d / "train" / "model.lpm").string() + "\" --out \"" +
                   (d / "eval").string() + "\"" + small);
  }
  if (!ok) return {false, "a command failed"};
  const bool s = same_tree(root / "1" / "synth", root / "2" / "synth", synth_files);
  const bool t = same_tree(root / "1" / "train", root / "2" / "train", train_files);
  const bool e = same_tree(root / "1" / "eval", root / "2" / "eval", eval_files);
  fs::remove_all(root);
  return {s && t && e, fmt("synth %s (%d files), train %s (%d files), eval %s (%d files)", s ? "bit-identical" : "differs",
                           synth_files, t ? "bit-identical" : "differs", train_files, e ? "bit-identical" : "differs",
                           eval_files)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  int only = 0;
  bool prepare = false;
  std::string cache = (fs::temp_directory_path() / "lpm_acceptance_cache").string();
  Context ctx;
  app.add_option("--criterion", only, "run a single criterion (1-11)")->check(CLI::Range(1, 11));
  app.add_flag("--prepare", prepare, "train and cache the models, then exit");
  app.add_option("--cache", cache, "trained-model cache directory");
  app.add_option("--cli", ctx.cli, "path to the command-line tool");
  CLI11_PARSE(app, argc, argv);
  ctx.cache = cache;

  if (prepare) {
    try {
      ctx.trained("lstm_t5", Variant::kLstmPm, 5);
      ctx.trained("rpm_t5", Variant::kRpm, 5);
      ctx.trained("lstm_t1", Variant::kLstmPm, 1);
    } catch (const std::exception& e) {
      std::cout << "prepare FAIL: " << e.what() << std::endl;
      return 1;
    }
    return 0;
  }

  const std::vector<std::pair<int, std::function<Outcome()>>> all{
      {1, [] { return criterion1(); }},
      {2, [] { return criterion2(); }},
      {3, [&] { return criterion3(ctx); }},
      {4, [&] { return criterion4(ctx); }},
      {5, [&] { return criterion5(ctx); }},
      {6, [&] { return criterion6(ctx); }},
      {7, [&] { return criterion7(ctx); }},
      {8, [&] { return criterion8(ctx); }},
      {9, [&] { return criterion9(ctx); }},
      {10, [] { return criterion10(); }},
      {11, [&] { return criterion11(ctx); }},
  };
  int failed = 0;
  for (const auto& [n, fn] : all) {
    if (only != 0 && n != only) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << "criterion " << n << ": " << (o.pass ? "PASS" : "FAIL") << " | " << o.detail << std::endl;
  }
  return failed;
}
