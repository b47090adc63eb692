#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rflow/autodiff.hpp"
#include "rflow/rng.hpp"
#include "rflow/tensor.hpp"

namespace rflow {

enum class Activation : std::uint32_t { tanh = 0, relu = 1 };

inline const char* to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

/// Fully connected network. Hidden layers use `activation`; the output layer
/// is linear. Parameters are stored flat as W0, b0, W1, b1, ... with Wi of
/// shape [widths[i+1], widths[i]].
struct MlpParams {
  std::vector<std::size_t> widths;
  Activation activation = Activation::tanh;
  std::uint64_t seed = 0;
  std::vector<Tensor> tensors;

  std::size_t num_layers() const noexcept { return widths.empty() ? 0 : widths.size() - 1; }
  std::size_t input_width() const { return widths.front(); }
  std::size_t output_width() const { return widths.back(); }

  const Tensor& weight(std::size_t layer) const { return tensors[2 * layer]; }
  const Tensor& bias(std::size_t layer) const { return tensors[2 * layer + 1]; }
  Tensor& weight(std::size_t layer) { return tensors[2 * layer]; }
  Tensor& bias(std::size_t layer) { return tensors[2 * layer + 1]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Tensor& t : tensors) n += t.size();
    return n;
  }

  /// Zero-filled parameters with the right shapes.
  static MlpParams zeros(std::vector<std::size_t> widths, Activation activation = Activation::tanh) {
    if (widths.size() < 2) throw ShapeError("mlp needs at least an input and an output width");
    MlpParams p;
    p.widths = std::move(widths);
    p.activation = activation;
    for (std::size_t l = 0; l + 1 < p.widths.size(); ++l) {
      p.tensors.emplace_back(Shape{p.widths[l + 1], p.widths[l]});
      p.tensors.emplace_back(Shape{p.widths[l + 1]});
    }
    return p;
  }

  /// Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases.
  static MlpParams init(std::vector<std::size_t> widths, Activation activation, std::uint64_t seed) {
    MlpParams p = zeros(std::move(widths), activation);
    p.seed = seed;
    for (std::size_t l = 0; l < p.num_layers(); ++l) {
      CounterRng rng(seed, l);
      const double limit = std::sqrt(6.0 / static_cast<double>(p.widths[l] + p.widths[l + 1]));
      for (double& w : p.weight(l).storage()) w = (2.0 * rng.uniform() - 1.0) * limit;
    }
    return p;
  }

  friend bool operator==(const MlpParams&, const MlpParams&) = default;
};

inline double activate(Activation a, double x) {
  return a == Activation::tanh ? std::tanh(x) : (x > 0.0 ? x : 0.0);
}

/// Plain evaluation without recording a tape. Accepts [in] or [n, in].
inline Tensor forward_mlp(const MlpParams& params, const Tensor& input) {
  if (input.last_dim() != params.input_width()) {
    throw ShapeError("forward_mlp: input width " + std::to_string(input.last_dim()) +
                     " does not match first layer width " + std::to_string(params.input_width()));
  }
  const std::size_t n = input.rows();
  std::vector<double> cur(input.storage());
  std::vector<double> next;
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    const std::size_t in = params.widths[l], out = params.widths[l + 1];
    const Tensor& w = params.weight(l);
    const Tensor& b = params.bias(l);
    const bool hidden = l + 1 < params.num_layers();
    next.assign(n * out, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double* xr = cur.data() + i * in;
      for (std::size_t o = 0; o < out; ++o) {
        const double* wr = w.data().data() + o * in;
        double acc = b[o];
        for (std::size_t k = 0; k < in; ++k) acc += xr[k] * wr[k];
        next[i * out + o] = hidden ? activate(params.activation, acc) : acc;
      }
    }
    cur.swap(next);
  }
  Shape shape = input.shape();
  shape.back() = params.output_width();
  return Tensor(std::move(shape), std::move(cur));
}

/// Registers every parameter tensor as a tape leaf.
inline std::vector<Var> tape_parameters(Tape& tape, const MlpParams& params) {
  std::vector<Var> vars;
  vars.reserve(params.tensors.size());
  for (const Tensor& t : params.tensors) vars.push_back(tape.leaf(t));
  return vars;
}

/// Recorded evaluation. `dropout` applies after every hidden activation and
/// needs `rng` when positive.
inline Var forward_mlp(Tape& tape, const MlpParams& params, std::span<const Var> param_vars, Var input,
                       double dropout_p = 0.0, CounterRng* rng = nullptr) {
  if (tape.value(input).last_dim() != params.input_width()) {
    throw ShapeError("forward_mlp: input width does not match first layer width");
  }
  if (dropout_p > 0.0 && rng == nullptr) throw ContractError("forward_mlp: dropout needs an rng");
  Var h = input;
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    h = affine(tape, h, param_vars[2 * l], param_vars[2 * l + 1]);
    if (l + 1 < params.num_layers()) {
      h = params.activation == Activation::tanh ? tanh(tape, h) : relu(tape, h);
      if (dropout_p > 0.0) h = dropout(tape, h, dropout_p, *rng);
    }
  }
  return h;
}

}  // namespace rflow
