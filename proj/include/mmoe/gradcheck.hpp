#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmoe/nn.hpp"
#include "mmoe/rng.hpp"

namespace mmoe {

// Finite-difference verification of the analytic backward pass. Always runs
// the kernel in double precision; the comparison is central differences with
// a scalar loss L = sum(w_r * output_r) built from random coefficients.

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t params_checked = 0;
  std::string worst_location;
};

namespace detail {

inline double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1.0});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace detail

// Central-difference gradient of L(params) for every parameter of `net`,
// compared against one analytic backward call.
template <class T = double>
inline GradCheckResult gradcheck_network(NetworkT<T>& net, const TensorT<T>& input, double eps) {
  // Random but fixed projection weights make the loss sensitive to every
  // output component.
  const auto out_shape = infer_shapes(net.layers, net.input_shape).back();
  std::size_t out_n = input.dim(0);
  for (int e : out_shape) out_n *= static_cast<std::size_t>(e);
  Rng proj_rng(0x5eedf00dULL);
  std::vector<T> proj(out_n);
  for (T& v : proj) v = static_cast<T>(proj_rng.uniform(-1.0, 1.0));

  auto loss_of = [&](const TensorT<T>& out) {
    double acc = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) {
      acc += static_cast<double>(proj[i]) * static_cast<double>(out.data[i]);
    }
    return acc;
  };

  Trace<T> trace = forward(net, input);
  TensorT<T> loss_grad(trace.back().shape);
  for (std::size_t i = 0; i < loss_grad.numel(); ++i) loss_grad.data[i] = proj[i];
  GradientsT<T> grads = backward(net, trace, loss_grad);

  GradCheckResult result;
  for (int l = 0; l < net.num_layers(); ++l) {
    if (!net.weights[l]) continue;
    for (int which = 0; which < 2; ++which) {
      TensorT<T>& param = which == 0 ? *net.weights[l] : *net.biases[l];
      const TensorT<T>& analytic = which == 0 ? grads.weight_grads[l] : grads.bias_grads[l];
      for (std::size_t i = 0; i < param.numel(); ++i) {
        const T saved = param.data[i];
        param.data[i] = saved + static_cast<T>(eps);
        const double lp = loss_of(forward(net, input).back());
        param.data[i] = saved - static_cast<T>(eps);
        const double lm = loss_of(forward(net, input).back());
        param.data[i] = saved;
        const double numeric = (lp - lm) / (2.0 * eps);
        const double err = detail::rel_error(static_cast<double>(analytic.data[i]), numeric);
        if (err > result.max_rel_error) {
          result.max_rel_error = err;
          result.worst_location = "layer " + std::to_string(l) + (which == 0 ? " W[" : " b[") +
                                  std::to_string(i) + "]";
        }
        ++result.params_checked;
      }
    }
  }
  return result;
}

// A small random architecture (<= 3 parameterized layers, <= ~200 params)
// with matching random input. Inputs are scaled away from ReLU kinks and
// max-pool ties are broken by continuous noise, so the central difference
// stays valid at eps = 1e-5.
inline std::pair<NetworkT<double>, TensorT<double>> random_small_net(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "gradcheck-net"));
  std::vector<LayerSpec> layers;
  std::vector<int> in_shape;
  const int variant = static_cast<int>(rng.below(4));
  switch (variant) {
    case 0: {  // conv -> relu -> pool -> flatten -> fc
      in_shape = {2, 6, 6};
      layers.push_back(LayerSpec::conv2d(2, 3, 3, 1, 1));
      layers.push_back(LayerSpec::relu());
      layers.push_back(LayerSpec::maxpool(2, 2));
      layers.push_back(LayerSpec::flatten());
      layers.push_back(LayerSpec::fully_connected(3 * 3 * 3, 4));
      break;
    }
    case 1: {  // conv stride 2 -> flatten -> fc
      in_shape = {1, 7, 7};
      layers.push_back(LayerSpec::conv2d(1, 4, 3, 2, 0));
      layers.push_back(LayerSpec::relu());
      layers.push_back(LayerSpec::flatten());
      layers.push_back(LayerSpec::fully_connected(4 * 3 * 3, 3));
      break;
    }
    case 2: {  // two convs
      in_shape = {1, 6, 6};
      layers.push_back(LayerSpec::conv2d(1, 3, 3, 1, 1));
      layers.push_back(LayerSpec::relu());
      layers.push_back(LayerSpec::conv2d(3, 2, 3, 1, 0));
      layers.push_back(LayerSpec::flatten());
      break;
    }
    default: {  // fc -> relu -> fc
      in_shape = {9};
      layers.push_back(LayerSpec::fully_connected(9, 8));
      layers.push_back(LayerSpec::relu());
      layers.push_back(LayerSpec::fully_connected(8, 5));
      break;
    }
  }
  NetworkT<double> net = make_network<double>(std::move(layers), in_shape);
  init_he_uniform(net, derive_seed(seed, "gradcheck-params"));
  // Nonzero biases exercise the bias gradients away from the ReLU kink.
  Rng brng(derive_seed(seed, "gradcheck-bias"));
  for (int l = 0; l < net.num_layers(); ++l) {
    if (net.biases[l]) {
      for (double& b : net.biases[l]->data) b = brng.uniform(-0.1, 0.1);
    }
  }

  std::vector<int> batched = {2};
  batched.insert(batched.end(), in_shape.begin(), in_shape.end());
  TensorT<double> input(batched);
  Rng irng(derive_seed(seed, "gradcheck-input"));
  for (double& v : input.data) v = irng.uniform(-1.0, 1.0);
  return {std::move(net), std::move(input)};
}

// Runs the finite-difference suite over `n_nets` random small networks.
inline GradCheckResult gradcheck_suite(int n_nets = 20, double eps = 1e-5,
                                       std::uint64_t seed = 20240501ull) {
  GradCheckResult worst;
  for (int i = 0; i < n_nets; ++i) {
    auto [net, input] = random_small_net(derive_seed(seed, "net", static_cast<std::uint64_t>(i)));
    GradCheckResult r = gradcheck_network(net, input, eps);
    worst.params_checked += r.params_checked;
    if (r.max_rel_error > worst.max_rel_error) {
      worst.max_rel_error = r.max_rel_error;
      worst.worst_location = "net " + std::to_string(i) + ", " + r.worst_location;
    }
  }
  return worst;
}

}  // namespace mmoe
