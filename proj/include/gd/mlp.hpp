// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "gd/rng.hpp"
#include "gd/tensor.hpp"

namespace gd {

enum class Activation { None, Relu, Softplus, Sigmoid };

double apply_activation(Activation act, double x);
double activation_derivative(Activation act, double x);  // evaluated at pre-activation x

struct MlpLayer {
  Tensor weight;  // (out, in), row-major
  Tensor bias;    // (out)
  Activation act = Activation::None;
};

/// Fully connected network, double precision throughout so finite-difference
/// oracles hold at 1e-4.
struct Mlp {
  std::vector<MlpLayer> layers;

  int input_dim() const;
  int output_dim() const;
  void validate() const;

  /// FNV-1a 64-bit over all parameter bytes; used to assert frozen blocks.
  std::uint64_t checksum() const;
};

/// widths = {in, hidden..., out}; hidden layers get `hidden`, last layer `out_act`.
/// Xavier-uniform init.
Mlp make_mlp(const std::vector<int>& widths, Activation hidden, Activation out_act, Rng& rng);

/// Per-layer inputs and pre-activations captured by the forward pass; the
/// backward pass replays them.
struct MlpTrace {
  std::vector<std::vector<double>> inputs;  // inputs[l] feeds layer l
  std::vector<std::vector<double>> pre;     // pre[l] = W x + b of layer l
};

std::vector<double> mlp_forward(const Mlp& mlp, const std::vector<double>& x,
                                MlpTrace* trace = nullptr);

struct MlpGrads {
  std::vector<Tensor> dweight;
  std::vector<Tensor> dbias;

  void init_like(const Mlp& mlp);
  void scale(double s);
};

/// Returns dL/dx given dL/dy; accumulates parameter gradients into `grads`
/// when non-null (grads must be init_like'd first).
std::vector<double> mlp_backward(const Mlp& mlp, const MlpTrace& trace,
                                 const std::vector<double>& dout, MlpGrads* grads = nullptr);

}  // namespace gd
