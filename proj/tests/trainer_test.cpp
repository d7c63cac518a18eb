#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "lpm/trainer.hpp"
#include "test_support.hpp"

namespace lpm {
namespace {

namespace fs = std::filesystem;
using testing::random_tensor;

ModelConfig small_model() {
  ModelConfig c;
  c.input_size = 16;
  c.joints = 7;
  c.encoder_channels = {4, 4};
  c.feature_channels = 6;
  c.head_channels = 6;
  c.memory_channels = 5;
  c.seq_len = 3;
  return c;
}

SynthConfig small_synth() {
  SynthConfig s;
  s.image_size = 16;
  s.body_height = {0.4, 0.45};
  s.articulation = 0.05;
  s.joint_radius = 1;
  s.velocity = {0, 0.5};
  return s;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("lpm_train_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<TrainSample> batch_of(const std::vector<PoseSequence>& data, const ModelConfig& mc, const TrainConfig& tc) {
  std::vector<TrainSample> b;
  for (int s = 0; s < tc.batch_size; ++s) b.push_back(make_sample(data, mc, tc, 0, s));
  return b;
}

TEST(Loss, Examples) {
  EXPECT_EQ(compute_loss<double>({Tensor<double>({1, 1, 1}, 3.0)}, {Tensor<double>({1, 1, 1}, 1.0)}), 4.0);
  Rng rng(1);
  std::vector<Tensor<double>> b, g;
  double oracle = 0;
  for (int t = 0; t < 3; ++t) {
    b.push_back(random_tensor<double>(rng, {4, 3, 3}));
    g.push_back(random_tensor<double>(rng, {4, 3, 3}));
    for (std::size_t i = 0; i < b[t].size(); ++i) oracle += (b[t][i] - g[t][i]) * (b[t][i] - g[t][i]);
  }
  EXPECT_NEAR(compute_loss(b, g), oracle, 1e-12);
  EXPECT_EQ(compute_loss(b, b), 0.0);
  EXPECT_GE(compute_loss(b, g), 0.0);
  EXPECT_THROW(compute_loss(b, std::vector<Tensor<double>>(g.begin(), g.begin() + 2)), Error);
}

TEST(Loss, GradientIsTwiceResidual) {
  Rng rng(2);
  std::vector<Tensor<double>> b, g;
  for (int t = 0; t < 2; ++t) {
    b.push_back(random_tensor<double>(rng, {3, 4, 4}));
    g.push_back(random_tensor<double>(rng, {3, 4, 4}));
  }
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& x : b) vars.push_back(tape.variable(x));
  tape.backward(compute_loss(tape, vars, g));
  for (int t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < b[t].size(); ++i) EXPECT_NEAR(vars[t]->grad[i], 2 * (b[t][i] - g[t][i]), 1e-12);
}

TEST(TrainStep, ZeroLearningRateLeavesParametersUntouched) {
  const auto mc = small_model();
  auto data = generate_dataset(1, 2, small_synth(), 3);
  TrainConfig tc;
  tc.learning_rate = 0;
  tc.batch_size = 2;
  tc.augmentation.crop_size = 16;
  auto params = init_model<float>(mc, 3);
  const auto before = encode_payload(named_tensors(params));
  auto opt = make_sgd_state(params);
  for (int i = 0; i < 3; ++i) train_step(batch_of(data, mc, tc), params, opt, tc);
  EXPECT_EQ(encode_payload(named_tensors(params)), before);
}

TEST(TrainStep, ClippingBoundsGlobalNorm) {
  auto g = init_model<float>(small_model(), 4);
  const double norm = global_norm(g);
  ASSERT_GT(norm, 1.0);
  EXPECT_EQ(clip_grad_norm(g, norm / 3), norm);
  EXPECT_NEAR(global_norm(g), norm / 3, 1e-5 * norm / 3);
  auto h = init_model<float>(small_model(), 4);
  const auto before = encode_payload(named_tensors(h));
  clip_grad_norm(h, 2 * norm);
  EXPECT_EQ(encode_payload(named_tensors(h)), before);
}

TEST(TrainStep, UpdateFollowsMomentumRule) {
  const auto mc = small_model();
  auto data = generate_dataset(2, 1, small_synth(), 3);
  TrainConfig tc;
  tc.batch_size = 1;
  tc.augment = false;
  tc.grad_clip = 1e9;
  tc.learning_rate = 1e-3;
  auto params = init_model<float>(mc, 5);
  auto batch = batch_of(data, mc, tc);
  // Expected update from an independent gradient evaluation.
  auto grads = params.zeros_like();
  {
    Tape<float> tape;
    auto bound = bind_model(tape, params, &grads);
    PoseMachine<float> pm(tape, bound, {true, batch[0].dropout_seed});
    std::vector<Var<float>> fv;
    for (const auto& f : batch[0].frames) fv.push_back(tape.constant(f));
    tape.backward(compute_loss(tape, pm.beliefs(fv), batch[0].targets));
  }
  auto expected = params;
  auto opt = make_sgd_state(params);
  opt.velocity.visit([](const std::string&, Tensor<float>& v) { v.fill(0.01f); });
  {
    std::vector<const Tensor<float>*> gl;
    grads.visit([&](const std::string&, const Tensor<float>& t) { gl.push_back(&t); });
    std::size_t k = 0;
    expected.visit([&](const std::string&, Tensor<float>& th) {
      for (std::size_t i = 0; i < th.size(); ++i) {
        const float v = 0.9f * 0.01f - 1e-3f * ((*gl[k])[i] + 5e-4f * th[i]);
        th[i] += v;
      }
      ++k;
    });
  }
  train_step(batch, params, opt, tc);
  std::vector<const Tensor<float>*> el;
  expected.visit([&](const std::string&, const Tensor<float>& t) { el.push_back(&t); });
  std::size_t k = 0;
  params.visit([&](const std::string& name, const Tensor<float>& t) {
    EXPECT_LT(max_abs_diff(t, *el[k]), 1e-6f) << name;
    ++k;
  });
  EXPECT_EQ(opt.iteration, 1);
}

TEST(TrainStep, NonFiniteLossAbortsWithIteration) {
  const auto mc = small_model();
  auto data = generate_dataset(3, 1, small_synth(), 3);
  TrainConfig tc;
  tc.batch_size = 1;
  tc.augment = false;
  auto params = init_model<float>(mc, 6);
  params.generator.biases.back().fill(3e38f);
  auto opt = make_sgd_state(params);
  opt.iteration = 17;
  try {
    train_step(batch_of(data, mc, tc), params, opt, tc);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 17"), std::string::npos) << e.what();
  }
}

TEST(Schedule, StepDecay) {
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.lr_drop_every = 2000;
  EXPECT_DOUBLE_EQ(tc.lr_at(0), 1e-3);
  EXPECT_DOUBLE_EQ(tc.lr_at(1999), 1e-3);
  EXPECT_DOUBLE_EQ(tc.lr_at(2000), 1e-3 * 0.333);
  EXPECT_DOUBLE_EQ(tc.lr_at(2 * 2000), 1e-3 * 0.333 * 0.333);
}

TEST(Data, SamplesAreKeyedAndEpochsArePermutations) {
  const auto mc = small_model();
  auto data = generate_dataset(4, 5, small_synth(), 4);
  TrainConfig tc;
  tc.augmentation.crop_size = 16;
  auto a = make_sample(data, mc, tc, 7, 1), b = make_sample(data, mc, tc, 7, 1);
  EXPECT_EQ(a.frames, b.frames);
  EXPECT_EQ(a.targets, b.targets);
  EXPECT_EQ(a.dropout_seed, b.dropout_seed);
  EXPECT_NE(make_sample(data, mc, tc, 7, 2).dropout_seed, a.dropout_seed);
  auto order = epoch_order(1, 3, 50);
  std::sort(order.begin(), order.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(order[i], i);
  auto short_data = generate_dataset(4, 1, small_synth(), 2);
  EXPECT_THROW(make_sample(short_data, mc, tc, 0, 0), Error);
}

TEST(TrainLoop, ResumeIsBitIdenticalAndMetricsMonotone) {
  const auto mc = small_model();
  auto data = generate_dataset(5, 6, small_synth(), 4);
  TrainConfig tc;
  tc.batch_size = 2;
  tc.total_iterations = 12;
  tc.log_every = 1;
  tc.checkpoint_every = 5;
  tc.augmentation.crop_size = 16;
  tc.augmentation.flip_prob = 0.5;
  tc.lr_drop_every = 4;
  const auto init = init_model<float>(mc, 7);

  const auto full_dir = scratch("full"), split_dir = scratch("split");
  auto full = train_loop(data, init, tc, full_dir);

  auto first = tc;
  first.total_iterations = 5;
  train_loop(data, init, first, split_dir);
  auto resumed = train_loop(data, init, tc, split_dir, true);

  EXPECT_EQ(encode_payload(named_tensors(resumed.params)), encode_payload(named_tensors(full.params)));
  EXPECT_EQ(encode_payload(named_tensors(resumed.opt.velocity)), encode_payload(named_tensors(full.opt.velocity)));
  EXPECT_EQ(read_file(TrainPaths{full_dir}.model()), read_file(TrainPaths{split_dir}.model()));

  for (const auto& dir : {full_dir, split_dir}) {
    std::ifstream in(TrainPaths{dir}.metrics());
    int last = -1, lines = 0;
    for (std::string line; std::getline(in, line); ++lines) {
      auto j = nlohmann::json::parse(line);
      EXPECT_GT(j.at("iteration").get<int>(), last);
      last = j.at("iteration").get<int>();
      EXPECT_DOUBLE_EQ(j.at("lr").get<double>(), tc.lr_at(last));
      EXPECT_TRUE(j.contains("loss"));
    }
    EXPECT_EQ(lines, 12);
  }
  EXPECT_EQ(read_file(TrainPaths{full_dir}.metrics()), read_file(TrainPaths{split_dir}.metrics()));
  fs::remove_all(full_dir);
  fs::remove_all(split_dir);
}

TEST(TrainLoop, Errors) {
  const auto mc = small_model();
  TrainConfig tc;
  EXPECT_THROW(train_loop({}, init_model<float>(mc, 1), tc, scratch("err")), Error);
  tc.lr_drop_factor = 1.5;
  auto data = generate_dataset(5, 1, small_synth(), 4);
  EXPECT_THROW(train_loop(data, init_model<float>(mc, 1), tc, scratch("err")), Error);
  auto cpm = mc;
  cpm.variant = Variant::kCpmBaseline;
  TrainConfig ok;
  ok.augment = false;
  auto p = init_model<float>(cpm, 1);
  auto opt = make_sgd_state(p);
  EXPECT_THROW(train_step({make_sample(data, cpm, ok, 0, 0)}, p, opt, ok), Error);
  EXPECT_THROW(load_opt_state("/nonexistent/opt.lpm"), Error);
  fs::remove_all(scratch("err"));
}

}  // namespace
}  // namespace lpm
