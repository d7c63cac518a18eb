#pragma once

// Differentiable operators. Every op evaluates eagerly and records its
// derivative rule on the tape when any input requires a gradient.

#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "lpm/autodiff.hpp"
#include "lpm/kernels.hpp"

namespace lpm::ops {

template <typename T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  kernels::require_finite(x->value, "conv2d", "input");
  kernels::require_finite(w->value, "conv2d", "kernel");
  kernels::require_finite(b->value, "conv2d", "bias");
  const kernels::ConvGeometry g = kernels::conv_geometry(x->value, w->value, b->value, stride, pad);
  const bool keep = tape.recording() && (x->requires_grad || w->requires_grad || b->requires_grad);
  auto cols = std::make_shared<Buffer<T>>();
  Tensor<T> out = kernels::conv2d_gemm(x->value, w->value, b->value, stride, pad, keep ? cols.get() : nullptr);
  return tape.record("conv2d", std::move(out), {x, w, b}, [g, cols](Node<T>& self) {
    auto& in = self.inputs;
    Tensor<T> dx, dw, db;
    if (in[0]->requires_grad) dx = Tensor<T>::zeros_like(in[0]->value);
    if (in[1]->requires_grad) dw = Tensor<T>::zeros_like(in[1]->value);
    if (in[2]->requires_grad) db = Tensor<T>::zeros_like(in[2]->value);
    kernels::conv2d_gemm_backward(self.grad, in[1]->value, *cols, g, dx.empty() ? nullptr : &dx,
                                  dw.empty() ? nullptr : &dw, db.empty() ? nullptr : &db);
    if (!dx.empty()) in[0]->accumulate(std::move(dx));
    if (!dw.empty()) in[1]->accumulate(std::move(dw));
    if (!db.empty()) in[2]->accumulate(std::move(db));
  });
}

template <typename T>
Var<T> max_pool2d(Tape<T>& tape, const Var<T>& x, int k, int stride) {
  auto argmax = std::make_shared<std::vector<std::uint32_t>>();
  Tensor<T> out = kernels::max_pool2d(x->value, k, stride, argmax.get());
  return tape.record("max_pool2d", std::move(out), {x}, [argmax](Node<T>& self) {
    Tensor<T> dx = Tensor<T>::zeros_like(self.inputs[0]->value);
    for (std::size_t o = 0; o < self.grad.size(); ++o) dx[(*argmax)[o]] += self.grad[o];
    self.inputs[0]->accumulate(std::move(dx));
  });
}

template <typename T>
Var<T> relu(Tape<T>& tape, const Var<T>& x) {
  kernels::require_finite(x->value, "relu", "input");
  Tensor<T> out = x->value;
  for (auto& v : out.storage()) v = v > T(0) ? v : T(0);
  return tape.record("relu", std::move(out), {x}, [](Node<T>& self) {
    Tensor<T> dx = self.grad;
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (!(self.value[i] > T(0))) dx[i] = T(0);
    }
    self.inputs[0]->accumulate(std::move(dx));
  });
}

template <typename T>
Var<T> sigmoid(Tape<T>& tape, const Var<T>& x) {
  kernels::require_finite(x->value, "sigmoid", "input");
  Tensor<T> out = x->value;
  for (auto& v : out.storage()) v = kernels::sigmoid(v);
  return tape.record("sigmoid", std::move(out), {x}, [](Node<T>& self) {
    Tensor<T> dx = self.grad;
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const T s = self.value[i];
      dx[i] *= s * (T(1) - s);
    }
    self.inputs[0]->accumulate(std::move(dx));
  });
}

template <typename T>
Var<T> tanh(Tape<T>& tape, const Var<T>& x) {
  kernels::require_finite(x->value, "tanh", "input");
  Tensor<T> out = x->value;
  for (auto& v : out.storage()) v = std::tanh(v);
  return tape.record("tanh", std::move(out), {x}, [](Node<T>& self) {
    Tensor<T> dx = self.grad;
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const T t = self.value[i];
      dx[i] *= T(1) - t * t;
    }
    self.inputs[0]->accumulate(std::move(dx));
  });
}

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& x, const Var<T>& y) {
  Tensor<T>::require_same_shape(x->value, y->value, "add");
  Tensor<T> out = x->value;
  out += y->value;
  return tape.record("add", std::move(out), {x, y}, [](Node<T>& self) {
    self.inputs[0]->accumulate(self.grad);
    self.inputs[1]->accumulate(self.grad);
  });
}

template <typename T>
Var<T> mul(Tape<T>& tape, const Var<T>& x, const Var<T>& y) {
  Tensor<T>::require_same_shape(x->value, y->value, "mul");
  Tensor<T> out = x->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y->value[i];
  return tape.record("mul", std::move(out), {x, y}, [](Node<T>& self) {
    auto& a = self.inputs[0];
    auto& b = self.inputs[1];
    if (a->requires_grad) {
      Tensor<T> da = self.grad;
      for (std::size_t i = 0; i < da.size(); ++i) da[i] *= b->value[i];
      a->accumulate(std::move(da));
    }
    if (b->requires_grad) {
      Tensor<T> db = self.grad;
      for (std::size_t i = 0; i < db.size(); ++i) db[i] *= a->value[i];
      b->accumulate(std::move(db));
    }
  });
}

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, T s) {
  Tensor<T> out = x->value;
  out *= s;
  return tape.record("scale", std::move(out), {x}, [s](Node<T>& self) {
    Tensor<T> dx = self.grad;
    dx *= s;
    self.inputs[0]->accumulate(std::move(dx));
  });
}

/// Stacks tensors along their leading extent; all trailing extents must agree.
/// For [C,H,W] feature maps this is channel concatenation in argument order.
template <typename T>
Var<T> concat_leading(Tape<T>& tape, const std::vector<Var<T>>& parts, const char* op = "concat") {
  if (parts.empty()) throw Error(std::string(op) + ": empty part list");
  const Shape& first = parts.front()->shape();
  if (first.empty()) throw Error(std::string(op) + ": cannot concatenate scalars");
  Shape out_shape = first;
  out_shape[0] = 0;
  for (const auto& p : parts) {
    const Shape& s = p->shape();
    if (s.size() != first.size() || !std::equal(s.begin() + 1, s.end(), first.begin() + 1)) {
      throw Error(std::string(op) + ": trailing extents differ between " + to_string(first) + " and " +
                  to_string(s));
    }
    out_shape[0] += s[0];
  }
  Buffer<T> data;
  data.reserve(shape_size(out_shape));
  for (const auto& p : parts) data.insert(data.end(), p->value.storage().begin(), p->value.storage().end());
  return tape.record(op, Tensor<T>(out_shape, std::move(data)), parts, [](Node<T>& self) {
    std::size_t offset = 0;
    for (auto& in : self.inputs) {
      const std::size_t n = in->value.size();
      if (in->requires_grad) {
        Tensor<T> g(in->shape(), Buffer<T>(self.grad.storage().begin() + static_cast<std::ptrdiff_t>(offset),
                                                self.grad.storage().begin() + static_cast<std::ptrdiff_t>(offset + n)));
        in->accumulate(std::move(g));
      }
      offset += n;
    }
  });
}

template <typename T>
Var<T> concat_channels(Tape<T>& tape, const std::vector<Var<T>>& parts) {
  for (const auto& p : parts) {
    if (p->value.rank() != 3) throw Error("concat_channels: expected [C,H,W] parts, got " + to_string(p->shape()));
  }
  return concat_leading(tape, parts, "concat_channels");
}

/// Leading-extent slice [begin, begin + count).
template <typename T>
Var<T> slice_leading(Tape<T>& tape, const Var<T>& x, int begin, int count) {
  const Shape& s = x->shape();
  if (s.empty() || begin < 0 || count <= 0 || begin + count > s[0]) {
    throw Error("slice: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                ") outside " + to_string(s));
  }
  const std::size_t inner = x->value.size() / static_cast<std::size_t>(s[0]);
  Shape out_shape = s;
  out_shape[0] = count;
  const auto first = x->value.storage().begin() + static_cast<std::ptrdiff_t>(inner * begin);
  Tensor<T> out(out_shape, std::vector<T>(first, first + static_cast<std::ptrdiff_t>(inner * count)));
  return tape.record("slice", std::move(out), {x}, [begin, inner](Node<T>& self) {
    Tensor<T> dx = Tensor<T>::zeros_like(self.inputs[0]->value);
    std::copy(self.grad.storage().begin(), self.grad.storage().end(),
              dx.storage().begin() + static_cast<std::ptrdiff_t>(inner * begin));
    self.inputs[0]->accumulate(std::move(dx));
  });
}

template <typename T>
Var<T> upsample_bilinear(Tape<T>& tape, const Var<T>& x, int out_h, int out_w) {
  Tensor<T> out = kernels::upsample_bilinear(x->value, out_h, out_w);
  return tape.record("upsample_bilinear", std::move(out), {x}, [](Node<T>& self) {
    const auto& in = self.inputs[0]->value;
    self.inputs[0]->accumulate(kernels::upsample_bilinear_backward(self.grad, in.dim(1), in.dim(2)));
  });
}

/// Sum of squared differences, as a rank-0 tensor.
template <typename T>
Var<T> sum_sq_diff(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  Tensor<T>::require_same_shape(a->value, b->value, "sum_sq_diff");
  T acc = 0;
  for (std::size_t i = 0; i < a->value.size(); ++i) {
    const T d = a->value[i] - b->value[i];
    acc += d * d;
  }
  return tape.record("sum_sq_diff", Tensor<T>::scalar(acc), {a, b}, [](Node<T>& self) {
    const T g = self.grad[0];
    auto& x = self.inputs[0];
    auto& y = self.inputs[1];
    Tensor<T> d = x->value;
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = T(2) * g * (d[i] - y->value[i]);
    if (y->requires_grad) {
      Tensor<T> neg = d;
      neg *= T(-1);
      y->accumulate(std::move(neg));
    }
    x->accumulate(std::move(d));
  });
}

/// Inverted dropout with a caller-supplied keep mask (1 = keep).
template <typename T>
Var<T> dropout(Tape<T>& tape, const Var<T>& x, const std::vector<std::uint8_t>& keep, T rate) {
  if (keep.size() != x->value.size()) throw Error("dropout: mask size does not match input");
  const T s = T(1) / (T(1) - rate);
  auto mask = std::make_shared<std::vector<std::uint8_t>>(keep);
  Tensor<T> out = x->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*mask)[i] ? out[i] * s : T(0);
  return tape.record("dropout", std::move(out), {x}, [mask, s](Node<T>& self) {
    Tensor<T> dx = self.grad;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = (*mask)[i] ? dx[i] * s : T(0);
    self.inputs[0]->accumulate(std::move(dx));
  });
}

}  // namespace lpm::ops
