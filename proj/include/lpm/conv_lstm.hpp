#pragma once

// Convolutional vanilla LSTM cell:
//
//   g_t = tanh(Wxg * x_t + Whg * h_{t-1} + eps_g)
//   i_t = sigm(Wxi * x_t + Whi * h_{t-1} + eps_i)
//   f_t = sigm(Wxf * x_t + Whf * h_{t-1} + eps_f)
//   o_t = sigm(Wxo * x_t + Who * h_{t-1} + eps_o)
//   C_t = f_t . C_{t-1} + i_t . g_t
//   h_t = o_t . tanh(C_t)
//
// '*' is a 3x3, stride-1, pad-1 convolution and '.' the elementwise product.
// The first step has no previous memory, so C_1 = i_1 . g_1 with h_0 = 0.

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <type_traits>

#include "lpm/ops.hpp"
#include "lpm/rng.hpp"

namespace lpm {

enum class Gate { kG = 0, kI = 1, kF = 2, kO = 3 };
inline constexpr std::array<const char*, 4> kGateNames{"g", "i", "f", "o"};

template <typename T = float>
struct ConvLstmParams {
  std::array<Tensor<T>, 4> wx;    // [M, Cx, 3, 3] in g, i, f, o order
  std::array<Tensor<T>, 4> wh;    // [M, M, 3, 3]
  std::array<Tensor<T>, 4> bias;  // [M]

  static ConvLstmParams zeros(int input_channels, int memory_channels, int kernel = 3) {
    ConvLstmParams p;
    for (int k = 0; k < 4; ++k) {
      p.wx[k] = Tensor<T>({memory_channels, input_channels, kernel, kernel});
      p.wh[k] = Tensor<T>({memory_channels, memory_channels, kernel, kernel});
      p.bias[k] = Tensor<T>({memory_channels});
    }
    return p;
  }

  int input_channels() const { return wx[0].dim(1); }
  int memory_channels() const { return wx[0].dim(0); }
  int kernel() const { return wx[0].dim(2); }

  Tensor<T>& x_kernel(Gate g) { return wx[static_cast<int>(g)]; }
  Tensor<T>& h_kernel(Gate g) { return wh[static_cast<int>(g)]; }
  Tensor<T>& gate_bias(Gate g) { return bias[static_cast<int>(g)]; }

  /// Visits tensors in checkpoint order: Wx{g,i,f,o}, Wh{g,i,f,o}, eps{g,i,f,o}.
  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    for (int k = 0; k < 4; ++k) f(prefix + "Wx" + kGateNames[k], self.wx[k]);
    for (int k = 0; k < 4; ++k) f(prefix + "Wh" + kGateNames[k], self.wh[k]);
    for (int k = 0; k < 4; ++k) f(prefix + "eps_" + kGateNames[k], self.bias[k]);
  }
};

/// Fan-in uniform kernels; forget-gate bias 1, other biases 0.
template <typename T>
ConvLstmParams<T> init_conv_lstm(int input_channels, int memory_channels, Rng& rng, int kernel = 3) {
  auto p = ConvLstmParams<T>::zeros(input_channels, memory_channels, kernel);
  const double sx = std::sqrt(1.0 / (input_channels * kernel * kernel));
  const double sh = std::sqrt(1.0 / (memory_channels * kernel * kernel));
  for (int k = 0; k < 4; ++k) {
    for (auto& v : p.wx[k].storage()) v = static_cast<T>(rng.uniform(-sx, sx));
    for (auto& v : p.wh[k].storage()) v = static_cast<T>(rng.uniform(-sh, sh));
  }
  p.gate_bias(Gate::kF).fill(T(1));
  return p;
}

template <typename T = float>
struct LstmState {
  Tensor<T> c;  // memory cell [M, H, W]
  Tensor<T> h;  // hidden state [M, H, W]

  static LstmState zeros(int memory_channels, int height, int width) {
    return {Tensor<T>({memory_channels, height, width}), Tensor<T>({memory_channels, height, width})};
  }
};

/// Cell parameters as tape variables, stacked so each step runs two convolutions.
template <typename T>
struct LstmVars {
  Var<T> wx;      // [4M, Cx, k, k]
  Var<T> wh;      // [4M, M, k, k]
  Var<T> bias;    // [4M]
  Var<T> h_bias;  // zeros [4M]; the recurrent convolution carries no bias of its own
  int memory_channels = 0;
  int input_channels = 0;
};

template <typename T>
LstmVars<T> bind_lstm(Tape<T>& tape, const ConvLstmParams<T>& p, std::type_identity_t<ConvLstmParams<T>>* grads) {
  std::vector<Var<T>> wx, wh, b;
  for (int k = 0; k < 4; ++k) {
    wx.push_back(tape.parameter(p.wx[k], grads ? &grads->wx[k] : nullptr));
    wh.push_back(tape.parameter(p.wh[k], grads ? &grads->wh[k] : nullptr));
    b.push_back(tape.parameter(p.bias[k], grads ? &grads->bias[k] : nullptr));
  }
  LstmVars<T> v;
  v.wx = ops::concat_leading(tape, wx, "stack_kernels");
  v.wh = ops::concat_leading(tape, wh, "stack_kernels");
  v.bias = ops::concat_leading(tape, b, "stack_kernels");
  v.h_bias = tape.constant(Tensor<T>({4 * p.memory_channels()}));
  v.memory_channels = p.memory_channels();
  v.input_channels = p.input_channels();
  return v;
}

template <typename T>
struct LstmStateVars {
  Var<T> c;
  Var<T> h;
};

/// Every intermediate of one cell update, for instrumentation.
template <typename T>
struct LstmTrace {
  Var<T> g, i, f, o;
  Var<T> forget_term;  // f . C_{t-1}; empty on the first step
  Var<T> input_term;   // i . g
  LstmStateVars<T> state;
};

namespace detail {

template <typename T>
void check_lstm_input(const Var<T>& x, const LstmVars<T>& p) {
  if (x->value.rank() != 3 || x->value.dim(0) != p.input_channels) {
    throw Error("lstm: input " + to_string(x->shape()) + " does not match gate kernels expecting " +
                std::to_string(p.input_channels) + " channels");
  }
}

template <typename T>
LstmTrace<T> gates_from(Tape<T>& tape, const Var<T>& pre, int m) {
  LstmTrace<T> tr;
  tr.g = ops::tanh(tape, ops::slice_leading(tape, pre, 0 * m, m));
  tr.i = ops::sigmoid(tape, ops::slice_leading(tape, pre, 1 * m, m));
  tr.f = ops::sigmoid(tape, ops::slice_leading(tape, pre, 2 * m, m));
  tr.o = ops::sigmoid(tape, ops::slice_leading(tape, pre, 3 * m, m));
  return tr;
}

}  // namespace detail

template <typename T>
LstmTrace<T> lstm_step(Tape<T>& tape, const Var<T>& x, const LstmStateVars<T>& prev, const LstmVars<T>& p) {
  detail::check_lstm_input(x, p);
  const int m = p.memory_channels;
  if (prev.c->value.rank() != 3 || prev.c->value.dim(0) != m || prev.c->shape() != prev.h->shape() ||
      prev.c->value.dim(1) != x->value.dim(1) || prev.c->value.dim(2) != x->value.dim(2)) {
    throw Error("lstm: previous state " + to_string(prev.c->shape()) + "/" + to_string(prev.h->shape()) +
                " inconsistent with input " + to_string(x->shape()) + " and " + std::to_string(m) +
                " memory channels");
  }
  kernels::require_finite(prev.c->value, "lstm_step", "previous memory");
  const int k = p.wx->value.dim(2);
  auto pre = ops::add(tape, ops::conv2d(tape, x, p.wx, p.bias, 1, k / 2),
                      ops::conv2d(tape, prev.h, p.wh, p.h_bias, 1, k / 2));
  auto tr = detail::gates_from(tape, pre, m);
  tr.forget_term = ops::mul(tape, tr.f, prev.c);
  tr.input_term = ops::mul(tape, tr.i, tr.g);
  tr.state.c = ops::add(tape, tr.forget_term, tr.input_term);
  tr.state.h = ops::mul(tape, tr.o, ops::tanh(tape, tr.state.c));
  return tr;
}

template <typename T>
LstmTrace<T> lstm_first_step(Tape<T>& tape, const Var<T>& x, const LstmVars<T>& p) {
  detail::check_lstm_input(x, p);
  const int k = p.wx->value.dim(2);
  auto pre = ops::conv2d(tape, x, p.wx, p.bias, 1, k / 2);
  auto tr = detail::gates_from(tape, pre, p.memory_channels);
  tr.input_term = ops::mul(tape, tr.i, tr.g);
  tr.state.c = tr.input_term;
  tr.state.h = ops::mul(tape, tr.o, ops::tanh(tape, tr.state.c));
  return tr;
}

/// Tensor-level convenience forms (no gradient tracking).
template <typename T>
LstmState<T> lstm_step(const Tensor<T>& x, const LstmState<T>& prev, const ConvLstmParams<T>& p) {
  Tape<T> tape(false);
  auto vars = bind_lstm(tape, p, nullptr);
  auto tr = lstm_step(tape, tape.constant(x), {tape.constant(prev.c), tape.constant(prev.h)}, vars);
  return {tr.state.c->value, tr.state.h->value};
}

template <typename T>
LstmState<T> lstm_first_step(const Tensor<T>& x, const ConvLstmParams<T>& p) {
  Tape<T> tape(false);
  auto vars = bind_lstm(tape, p, nullptr);
  auto tr = lstm_first_step(tape, tape.constant(x), vars);
  return {tr.state.c->value, tr.state.h->value};
}

}  // namespace lpm
