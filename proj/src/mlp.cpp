// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#include "gd/mlp.hpp"

#include <cmath>
#include <cstring>

#include "gd/errors.hpp"

namespace gd {

namespace {

double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace

double apply_activation(Activation act, double x) {
  switch (act) {
    case Activation::None: return x;
    case Activation::Relu: return x > 0.0 ? x : 0.0;
    case Activation::Softplus: return softplus(x);
    case Activation::Sigmoid: return sigmoid(x);
  }
  return x;
}

double activation_derivative(Activation act, double x) {
  switch (act) {
    case Activation::None: return 1.0;
    case Activation::Relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::Softplus: return sigmoid(x);
    case Activation::Sigmoid: {
      double s = sigmoid(x);
      return s * (1.0 - s);
    }
  }
  return 1.0;
}

int Mlp::input_dim() const {
  return layers.empty() ? 0 : static_cast<int>(layers.front().weight.dims[1]);
}

int Mlp::output_dim() const {
  return layers.empty() ? 0 : static_cast<int>(layers.back().weight.dims[0]);
}

void Mlp::validate() const {
  if (layers.empty()) throw ConfigError("mlp needs at least one layer");
  int in = input_dim();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    if (layer.weight.dims.size() != 2)
      throw ConfigError("mlp layer weight must be rank 2");
    if (static_cast<int>(layer.weight.dims[1]) != in)
      throw ConfigError("mlp layer " + std::to_string(l) + " input dim mismatch");
    if (layer.bias.dims.size() != 1 || layer.bias.dims[0] != layer.weight.dims[0])
      throw ConfigError("mlp layer " + std::to_string(l) + " bias shape mismatch");
    for (double w : layer.weight.data)
      if (!std::isfinite(w)) throw NumericError("mlp weight is not finite");
    for (double b : layer.bias.data)
      if (!std::isfinite(b)) throw NumericError("mlp bias is not finite");
    in = static_cast<int>(layer.weight.dims[0]);
  }
}

std::uint64_t Mlp::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const std::vector<double>& v) {
    for (double d : v) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &d, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
      }
    }
  };
  for (const auto& layer : layers) {
    mix(layer.weight.data);
    mix(layer.bias.data);
  }
  return h;
}

Mlp make_mlp(const std::vector<int>& widths, Activation hidden, Activation out_act, Rng& rng) {
  if (widths.size() < 2) throw ConfigError("mlp widths need at least input and output");
  Mlp mlp;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    int in = widths[l], out = widths[l + 1];
    if (in < 1 || out < 1) throw ConfigError("mlp widths must be positive");
    MlpLayer layer;
    layer.weight.dims = {static_cast<std::uint32_t>(out), static_cast<std::uint32_t>(in)};
    layer.weight.data.resize(static_cast<std::size_t>(out) * in);
    double bound = std::sqrt(6.0 / (in + out));
    for (auto& w : layer.weight.data) w = rng.uniform(-bound, bound);
    layer.bias.dims = {static_cast<std::uint32_t>(out)};
    layer.bias.data.assign(out, 0.0);
    layer.act = (l + 2 == widths.size()) ? out_act : hidden;
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

std::vector<double> mlp_forward(const Mlp& mlp, const std::vector<double>& x, MlpTrace* trace) {
  if (static_cast<int>(x.size()) != mlp.input_dim())
    throw ConfigError("mlp forward: input size mismatch");
  if (trace) {
    trace->inputs.clear();
    trace->pre.clear();
  }
  std::vector<double> cur = x;
  for (const auto& layer : mlp.layers) {
    int out = static_cast<int>(layer.weight.dims[0]);
    int in = static_cast<int>(layer.weight.dims[1]);
    std::vector<double> pre(out);
    for (int o = 0; o < out; ++o) {
      double acc = layer.bias.data[o];
      const double* wrow = layer.weight.data.data() + static_cast<std::size_t>(o) * in;
      for (int i = 0; i < in; ++i) acc += wrow[i] * cur[i];
      pre[o] = acc;
    }
    if (trace) {
      trace->inputs.push_back(std::move(cur));
      trace->pre.push_back(pre);
    }
    cur.resize(out);
    for (int o = 0; o < out; ++o) cur[o] = apply_activation(layer.act, pre[o]);
  }
  return cur;
}

void MlpGrads::init_like(const Mlp& mlp) {
  dweight.clear();
  dbias.clear();
  for (const auto& layer : mlp.layers) {
    Tensor w;
    w.dims = layer.weight.dims;
    w.data.assign(layer.weight.data.size(), 0.0);
    dweight.push_back(std::move(w));
    Tensor b;
    b.dims = layer.bias.dims;
    b.data.assign(layer.bias.data.size(), 0.0);
    dbias.push_back(std::move(b));
  }
}

void MlpGrads::scale(double s) {
  for (auto& t : dweight)
    for (auto& v : t.data) v *= s;
  for (auto& t : dbias)
    for (auto& v : t.data) v *= s;
}

std::vector<double> mlp_backward(const Mlp& mlp, const MlpTrace& trace,
                                 const std::vector<double>& dout, MlpGrads* grads) {
  if (trace.inputs.size() != mlp.layers.size() || trace.pre.size() != mlp.layers.size())
    throw ConfigError("mlp backward: trace does not match network");
  if (grads && grads->dweight.size() != mlp.layers.size())
    throw ConfigError("mlp backward: grads not initialized for this network");

  std::vector<double> delta = dout;
  for (int l = static_cast<int>(mlp.layers.size()) - 1; l >= 0; --l) {
    const auto& layer = mlp.layers[l];
    int out = static_cast<int>(layer.weight.dims[0]);
    int in = static_cast<int>(layer.weight.dims[1]);
    if (static_cast<int>(delta.size()) != out)
      throw ConfigError("mlp backward: gradient size mismatch");

    // d pre = d post * act'(pre)
    std::vector<double> dpre(out);
    for (int o = 0; o < out; ++o)
      dpre[o] = delta[o] * activation_derivative(layer.act, trace.pre[l][o]);

    if (grads) {
      for (int o = 0; o < out; ++o) {
        grads->dbias[l].data[o] += dpre[o];
        double* gw = grads->dweight[l].data.data() + static_cast<std::size_t>(o) * in;
        for (int i = 0; i < in; ++i) gw[i] += dpre[o] * trace.inputs[l][i];
      }
    }

    std::vector<double> dprev(in, 0.0);
    for (int o = 0; o < out; ++o) {
      const double* wrow = layer.weight.data.data() + static_cast<std::size_t>(o) * in;
      for (int i = 0; i < in; ++i) dprev[i] += dpre[o] * wrow[i];
    }
    delta = std::move(dprev);
  }
  return delta;
}

}  // namespace gd
