#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmoe/rng.hpp"
#include "mmoe/tensor.hpp"

namespace mmoe {

// ---------------------------------------------------------------------------
// Layer descriptions
// ---------------------------------------------------------------------------

struct LayerSpec {
  enum class Kind { Conv2D, ReLU, MaxPool, FullyConnected, Flatten };

  Kind kind = Kind::ReLU;
  // Conv2D
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;
  int pad = 0;
  // MaxPool
  int pool = 0;
  int pool_stride = 0;
  // FullyConnected
  int in_features = 0;
  int out_features = 0;

  static LayerSpec conv2d(int in_ch, int out_ch, int kernel, int stride = 1, int pad = 0) {
    LayerSpec s;
    s.kind = Kind::Conv2D;
    s.in_channels = in_ch;
    s.out_channels = out_ch;
    s.kernel = kernel;
    s.stride = stride;
    s.pad = pad;
    return s;
  }
  static LayerSpec relu() {
    LayerSpec s;
    s.kind = Kind::ReLU;
    return s;
  }
  static LayerSpec maxpool(int k, int stride = 0) {
    LayerSpec s;
    s.kind = Kind::MaxPool;
    s.pool = k;
    s.pool_stride = stride > 0 ? stride : k;
    return s;
  }
  static LayerSpec fully_connected(int in_f, int out_f) {
    LayerSpec s;
    s.kind = Kind::FullyConnected;
    s.in_features = in_f;
    s.out_features = out_f;
    return s;
  }
  static LayerSpec flatten() {
    LayerSpec s;
    s.kind = Kind::Flatten;
    return s;
  }

  bool has_params() const { return kind == Kind::Conv2D || kind == Kind::FullyConnected; }

  const char* name() const {
    switch (kind) {
      case Kind::Conv2D: return "Conv2D";
      case Kind::ReLU: return "ReLU";
      case Kind::MaxPool: return "MaxPool";
      case Kind::FullyConnected: return "FullyConnected";
      case Kind::Flatten: return "Flatten";
    }
    return "?";
  }
};

// Output shape (without the batch dimension) of one layer. `layer_index` is
// only used to make error messages actionable.
inline std::vector<int> layer_output_shape(const LayerSpec& l, const std::vector<int>& in,
                                           int layer_index) {
  auto fail = [&](const std::string& what) -> std::vector<int> {
    throw ShapeError("layer " + std::to_string(layer_index) + " (" + l.name() + "): " + what +
                     ", input shape " + shape_to_string(in));
  };
  switch (l.kind) {
    case LayerSpec::Kind::Conv2D: {
      if (in.size() != 3) return fail("expected (C,H,W) input");
      if (in[0] != l.in_channels) {
        return fail("expected " + std::to_string(l.in_channels) + " input channels, got " +
                    std::to_string(in[0]));
      }
      if (l.stride < 1 || l.pad < 0 || l.kernel < 1) return fail("invalid conv hyperparameters");
      const int oh = (in[1] + 2 * l.pad - l.kernel) / l.stride + 1;
      const int ow = (in[2] + 2 * l.pad - l.kernel) / l.stride + 1;
      if (in[1] + 2 * l.pad < l.kernel || in[2] + 2 * l.pad < l.kernel || oh < 1 || ow < 1) {
        return fail("kernel larger than padded input");
      }
      return {l.out_channels, oh, ow};
    }
    case LayerSpec::Kind::ReLU:
      return in;
    case LayerSpec::Kind::MaxPool: {
      if (in.size() != 3) return fail("expected (C,H,W) input");
      if (l.pool < 1 || l.pool_stride < 1) return fail("invalid pool hyperparameters");
      const int oh = (in[1] - l.pool) / l.pool_stride + 1;
      const int ow = (in[2] - l.pool) / l.pool_stride + 1;
      if (in[1] < l.pool || in[2] < l.pool || oh < 1 || ow < 1) {
        return fail("pool window larger than input");
      }
      return {in[0], oh, ow};
    }
    case LayerSpec::Kind::FullyConnected: {
      if (in.size() != 1) return fail("expected flat (F) input; add a Flatten layer");
      if (in[0] != l.in_features) {
        return fail("expected " + std::to_string(l.in_features) + " input features, got " +
                    std::to_string(in[0]));
      }
      return {l.out_features};
    }
    case LayerSpec::Kind::Flatten: {
      if (in.empty()) return fail("expected non-empty input shape");
      int f = 1;
      for (int e : in) f *= e;
      return {f};
    }
  }
  return fail("unknown layer kind");
}

// Shapes after each layer, starting with the input shape. Throws on any
// inconsistency, naming the offending layer.
inline std::vector<std::vector<int>> infer_shapes(const std::vector<LayerSpec>& layers,
                                                  const std::vector<int>& input_shape) {
  std::vector<std::vector<int>> shapes;
  shapes.reserve(layers.size() + 1);
  shapes.push_back(input_shape);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    shapes.push_back(layer_output_shape(layers[i], shapes.back(), static_cast<int>(i)));
  }
  return shapes;
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

// Parameters are held through shared_ptr so a frozen prefix can be physically
// shared between networks (experts reference the mediator's tensors).
template <class T>
struct NetworkT {
  std::vector<LayerSpec> layers;
  std::vector<std::shared_ptr<TensorT<T>>> weights;  // null for parameterless layers
  std::vector<std::shared_ptr<TensorT<T>>> biases;
  std::vector<std::uint8_t> frozen;  // frozen layers are skipped by the optimizer
  std::vector<int> input_shape;      // (C,H,W) or (F)

  int num_layers() const { return static_cast<int>(layers.size()); }

  // Deep copy; breaks any parameter sharing.
  NetworkT clone() const {
    NetworkT out;
    out.layers = layers;
    out.frozen = frozen;
    out.input_shape = input_shape;
    out.weights.resize(weights.size());
    out.biases.resize(biases.size());
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i]) out.weights[i] = std::make_shared<TensorT<T>>(*weights[i]);
      if (biases[i]) out.biases[i] = std::make_shared<TensorT<T>>(*biases[i]);
    }
    return out;
  }
};

template <class T>
NetworkT<T> make_network(std::vector<LayerSpec> layers, std::vector<int> input_shape) {
  NetworkT<T> net;
  net.layers = std::move(layers);
  net.input_shape = std::move(input_shape);
  infer_shapes(net.layers, net.input_shape);  // validate the chain up front
  net.weights.resize(net.layers.size());
  net.biases.resize(net.layers.size());
  net.frozen.assign(net.layers.size(), 0);
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& l = net.layers[i];
    if (l.kind == LayerSpec::Kind::Conv2D) {
      net.weights[i] = std::make_shared<TensorT<T>>(
          std::vector<int>{l.out_channels, l.in_channels, l.kernel, l.kernel});
      net.biases[i] = std::make_shared<TensorT<T>>(std::vector<int>{l.out_channels});
    } else if (l.kind == LayerSpec::Kind::FullyConnected) {
      net.weights[i] =
          std::make_shared<TensorT<T>>(std::vector<int>{l.out_features, l.in_features});
      net.biases[i] = std::make_shared<TensorT<T>>(std::vector<int>{l.out_features});
    }
  }
  return net;
}

// He-style uniform init, scaled by fan-in. Biases start at zero. Each layer
// draws from its own derived stream so layer count changes do not reshuffle
// unrelated layers.
template <class T>
void init_he_uniform(NetworkT<T>& net, std::uint64_t seed) {
  for (int i = 0; i < net.num_layers(); ++i) {
    if (!net.weights[i]) continue;
    const LayerSpec& l = net.layers[i];
    const int fan_in = l.kind == LayerSpec::Kind::Conv2D ? l.in_channels * l.kernel * l.kernel
                                                         : l.in_features;
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    Rng rng(derive_seed(seed, "layer", static_cast<std::uint64_t>(i)));
    for (T& w : net.weights[i]->data) w = static_cast<T>(rng.uniform(-limit, limit));
    std::fill(net.biases[i]->data.begin(), net.biases[i]->data.end(), T(0));
  }
}

// He-style init for a single row range of a fully connected weight matrix,
// used when extending an output layer.
template <class T>
void init_he_uniform_rows(TensorT<T>& w, int row_begin, int row_end, std::uint64_t seed) {
  const int in_f = w.dim(1);
  const double limit = std::sqrt(6.0 / static_cast<double>(in_f));
  Rng rng(seed);
  for (int r = row_begin; r < row_end; ++r) {
    for (int c = 0; c < in_f; ++c) {
      w.data[static_cast<std::size_t>(r) * in_f + c] = static_cast<T>(rng.uniform(-limit, limit));
    }
  }
}

template <class T>
std::size_t layer_param_count(const NetworkT<T>& net, int layer) {
  std::size_t n = 0;
  if (net.weights[layer]) n += net.weights[layer]->numel();
  if (net.biases[layer]) n += net.biases[layer]->numel();
  return n;
}

// Parameters in layers [begin, end).
template <class T>
std::size_t param_count_range(const NetworkT<T>& net, int begin, int end) {
  std::size_t n = 0;
  for (int i = begin; i < end; ++i) n += layer_param_count(net, i);
  return n;
}

template <class T>
std::size_t param_count(const NetworkT<T>& net) {
  return param_count_range(net, 0, net.num_layers());
}

// FNV-1a over all parameter bytes, in layer order. Used by tests and the
// training invariants to detect any parameter mutation.
template <class T>
std::uint64_t param_checksum(const NetworkT<T>& net) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ull;
    }
  };
  for (int i = 0; i < net.num_layers(); ++i) {
    if (net.weights[i]) mix(net.weights[i]->data.data(), net.weights[i]->numel() * sizeof(T));
    if (net.biases[i]) mix(net.biases[i]->data.data(), net.biases[i]->numel() * sizeof(T));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

// Convolution uses the cross-correlation convention (no kernel flip).
// Output spatial dims: floor((H + 2*pad - kH)/stride) + 1.
template <class T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weights, const TensorT<T>& bias,
                  int stride, int pad) {
  if (input.rank() != 4) throw ShapeError("conv2d: input must be (N,C,H,W)");
  if (weights.rank() != 4) throw ShapeError("conv2d: weights must be (OC,IC,KH,KW)");
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: stride must be >= 1 and pad >= 0");
  const int batch = input.dim(0), ic = input.dim(1), ih = input.dim(2), iw = input.dim(3);
  const int oc = weights.dim(0), kh = weights.dim(2), kw = weights.dim(3);
  if (weights.dim(1) != ic) {
    throw ShapeError("conv2d: weight input channels " + std::to_string(weights.dim(1)) +
                     " do not match input channels " + std::to_string(ic));
  }
  if (bias.numel() != static_cast<std::size_t>(oc)) {
    throw ShapeError("conv2d: bias length does not match output channels");
  }
  const int oh = (ih + 2 * pad - kh) / stride + 1;
  const int ow = (iw + 2 * pad - kw) / stride + 1;
  if (ih + 2 * pad < kh || iw + 2 * pad < kw) throw ShapeError("conv2d: kernel larger than input");

  TensorT<T> out({batch, oc, oh, ow});
  for (int n = 0; n < batch; ++n) {
    for (int o = 0; o < oc; ++o) {
      T* out_plane = out.ptr() + (static_cast<std::size_t>(n) * oc + o) * oh * ow;
      const T b = bias.data[o];
      for (int i = 0; i < oh * ow; ++i) out_plane[i] = b;
      for (int c = 0; c < ic; ++c) {
        const T* in_plane = input.ptr() + (static_cast<std::size_t>(n) * ic + c) * ih * iw;
        const T* w_base = weights.ptr() + (static_cast<std::size_t>(o) * ic + c) * kh * kw;
        for (int ky = 0; ky < kh; ++ky) {
          for (int kx = 0; kx < kw; ++kx) {
            const T w = w_base[ky * kw + kx];
            if (w == T(0)) continue;
            for (int y = 0; y < oh; ++y) {
              const int sy = y * stride - pad + ky;
              if (sy < 0 || sy >= ih) continue;
              const T* in_row = in_plane + static_cast<std::size_t>(sy) * iw;
              T* out_row = out_plane + static_cast<std::size_t>(y) * ow;
              if (stride == 1) {
                const int x0 = std::max(0, pad - kx);
                const int x1 = std::min(ow, iw - kx + pad);
                for (int x = x0; x < x1; ++x) out_row[x] += w * in_row[x - pad + kx];
              } else {
                for (int x = 0; x < ow; ++x) {
                  const int sx = x * stride - pad + kx;
                  if (sx >= 0 && sx < iw) out_row[x] += w * in_row[sx];
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

template <class T>
struct Conv2dGrads {
  TensorT<T> d_input, d_weights, d_bias;
};

template <class T>
Conv2dGrads<T> conv2d_backward(const TensorT<T>& input, const TensorT<T>& weights,
                               const TensorT<T>& d_out, int stride, int pad) {
  const int batch = input.dim(0), ic = input.dim(1), ih = input.dim(2), iw = input.dim(3);
  const int oc = weights.dim(0), kh = weights.dim(2), kw = weights.dim(3);
  const int oh = d_out.dim(2), ow = d_out.dim(3);

  Conv2dGrads<T> g;
  g.d_input = TensorT<T>(input.shape);
  g.d_weights = TensorT<T>(weights.shape);
  g.d_bias = TensorT<T>(std::vector<int>{oc});

  for (int n = 0; n < batch; ++n) {
    for (int o = 0; o < oc; ++o) {
      const T* go_plane = d_out.ptr() + (static_cast<std::size_t>(n) * oc + o) * oh * ow;
      T bias_acc = T(0);
      for (int i = 0; i < oh * ow; ++i) bias_acc += go_plane[i];
      g.d_bias.data[o] += bias_acc;
      for (int c = 0; c < ic; ++c) {
        const T* in_plane = input.ptr() + (static_cast<std::size_t>(n) * ic + c) * ih * iw;
        T* gin_plane = g.d_input.ptr() + (static_cast<std::size_t>(n) * ic + c) * ih * iw;
        const T* w_base = weights.ptr() + (static_cast<std::size_t>(o) * ic + c) * kh * kw;
        T* gw_base = g.d_weights.ptr() + (static_cast<std::size_t>(o) * ic + c) * kh * kw;
        for (int ky = 0; ky < kh; ++ky) {
          for (int kx = 0; kx < kw; ++kx) {
            const T w = w_base[ky * kw + kx];
            T w_acc = T(0);
            for (int y = 0; y < oh; ++y) {
              const int sy = y * stride - pad + ky;
              if (sy < 0 || sy >= ih) continue;
              const T* in_row = in_plane + static_cast<std::size_t>(sy) * iw;
              T* gin_row = gin_plane + static_cast<std::size_t>(sy) * iw;
              const T* go_row = go_plane + static_cast<std::size_t>(y) * ow;
              if (stride == 1) {
                const int x0 = std::max(0, pad - kx);
                const int x1 = std::min(ow, iw - kx + pad);
                for (int x = x0; x < x1; ++x) {
                  w_acc += go_row[x] * in_row[x - pad + kx];
                  gin_row[x - pad + kx] += w * go_row[x];
                }
              } else {
                for (int x = 0; x < ow; ++x) {
                  const int sx = x * stride - pad + kx;
                  if (sx >= 0 && sx < iw) {
                    w_acc += go_row[x] * in_row[sx];
                    gin_row[sx] += w * go_row[x];
                  }
                }
              }
            }
            gw_base[ky * kw + kx] += w_acc;
          }
        }
      }
    }
  }
  return g;
}

template <class T>
TensorT<T> maxpool2d(const TensorT<T>& input, int k, int stride) {
  const int batch = input.dim(0), ch = input.dim(1), ih = input.dim(2), iw = input.dim(3);
  const int oh = (ih - k) / stride + 1;
  const int ow = (iw - k) / stride + 1;
  TensorT<T> out({batch, ch, oh, ow});
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < ch; ++c) {
      const T* in_plane = input.ptr() + (static_cast<std::size_t>(n) * ch + c) * ih * iw;
      T* out_plane = out.ptr() + (static_cast<std::size_t>(n) * ch + c) * oh * ow;
      for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
          T best = std::numeric_limits<T>::lowest();
          for (int ky = 0; ky < k; ++ky) {
            const T* row = in_plane + static_cast<std::size_t>(y * stride + ky) * iw + x * stride;
            for (int kx = 0; kx < k; ++kx) best = std::max(best, row[kx]);
          }
          out_plane[y * ow + x] = best;
        }
      }
    }
  }
  return out;
}

// Gradient is routed to the first maximum in scan order, which keeps the
// backward pass deterministic under ties.
template <class T>
TensorT<T> maxpool2d_backward(const TensorT<T>& input, const TensorT<T>& d_out, int k,
                              int stride) {
  const int batch = input.dim(0), ch = input.dim(1), ih = input.dim(2), iw = input.dim(3);
  const int oh = d_out.dim(2), ow = d_out.dim(3);
  TensorT<T> d_in(input.shape);
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < ch; ++c) {
      const T* in_plane = input.ptr() + (static_cast<std::size_t>(n) * ch + c) * ih * iw;
      T* gin_plane = d_in.ptr() + (static_cast<std::size_t>(n) * ch + c) * ih * iw;
      const T* go_plane = d_out.ptr() + (static_cast<std::size_t>(n) * ch + c) * oh * ow;
      for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
          T best = std::numeric_limits<T>::lowest();
          int best_idx = -1;
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const int idx = (y * stride + ky) * iw + x * stride + kx;
              if (in_plane[idx] > best) {
                best = in_plane[idx];
                best_idx = idx;
              }
            }
          }
          gin_plane[best_idx] += go_plane[y * ow + x];
        }
      }
    }
  }
  return d_in;
}

template <class T>
TensorT<T> relu(const TensorT<T>& input) {
  TensorT<T> out = input;
  for (T& v : out.data) v = v > T(0) ? v : T(0);
  return out;
}

template <class T>
TensorT<T> relu_backward(const TensorT<T>& input, const TensorT<T>& d_out) {
  TensorT<T> d_in(input.shape);
  for (std::size_t i = 0; i < input.numel(); ++i) {
    d_in.data[i] = input.data[i] > T(0) ? d_out.data[i] : T(0);
  }
  return d_in;
}

// y = x W^T + b with W stored (out,in) row-major.
template <class T>
TensorT<T> fully_connected(const TensorT<T>& input, const TensorT<T>& w, const TensorT<T>& b) {
  const int batch = input.dim(0), in_f = input.dim(1);
  const int out_f = w.dim(0);
  if (w.dim(1) != in_f) {
    throw ShapeError("fully_connected: weight columns " + std::to_string(w.dim(1)) +
                     " do not match input features " + std::to_string(in_f));
  }
  TensorT<T> out({batch, out_f});
  for (int n = 0; n < batch; ++n) {
    const T* x = input.ptr() + static_cast<std::size_t>(n) * in_f;
    T* y = out.ptr() + static_cast<std::size_t>(n) * out_f;
    for (int o = 0; o < out_f; ++o) {
      const T* wr = w.ptr() + static_cast<std::size_t>(o) * in_f;
      T acc = b.data[o];
      for (int i = 0; i < in_f; ++i) acc += x[i] * wr[i];
      y[o] = acc;
    }
  }
  return out;
}

template <class T>
struct FcGrads {
  TensorT<T> d_input, d_weights, d_bias;
};

template <class T>
FcGrads<T> fully_connected_backward(const TensorT<T>& input, const TensorT<T>& w,
                                    const TensorT<T>& d_out) {
  const int batch = input.dim(0), in_f = input.dim(1), out_f = w.dim(0);
  FcGrads<T> g;
  g.d_input = TensorT<T>(input.shape);
  g.d_weights = TensorT<T>(w.shape);
  g.d_bias = TensorT<T>(std::vector<int>{out_f});
  for (int n = 0; n < batch; ++n) {
    const T* x = input.ptr() + static_cast<std::size_t>(n) * in_f;
    const T* gy = d_out.ptr() + static_cast<std::size_t>(n) * out_f;
    T* gx = g.d_input.ptr() + static_cast<std::size_t>(n) * in_f;
    for (int o = 0; o < out_f; ++o) {
      const T go = gy[o];
      g.d_bias.data[o] += go;
      const T* wr = w.ptr() + static_cast<std::size_t>(o) * in_f;
      T* gwr = g.d_weights.ptr() + static_cast<std::size_t>(o) * in_f;
      for (int i = 0; i < in_f; ++i) {
        gx[i] += go * wr[i];
        gwr[i] += go * x[i];
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Network forward / backward
// ---------------------------------------------------------------------------

template <class T>
using Trace = std::vector<TensorT<T>>;

template <class T>
TensorT<T> apply_layer(const NetworkT<T>& net, int layer, const TensorT<T>& in) {
  const LayerSpec& l = net.layers[layer];
  switch (l.kind) {
    case LayerSpec::Kind::Conv2D:
      return conv2d(in, *net.weights[layer], *net.biases[layer], l.stride, l.pad);
    case LayerSpec::Kind::ReLU:
      return relu(in);
    case LayerSpec::Kind::MaxPool:
      return maxpool2d(in, l.pool, l.pool_stride);
    case LayerSpec::Kind::FullyConnected:
      return fully_connected(in, *net.weights[layer], *net.biases[layer]);
    case LayerSpec::Kind::Flatten: {
      int f = 1;
      for (int i = 1; i < in.rank(); ++i) f *= in.dim(i);
      return reshape(in, {in.dim(0), f});
    }
  }
  throw ShapeError("unknown layer kind");
}

// Runs layers [begin, end); trace[0] is the segment input, one entry per layer
// after that.
template <class T>
Trace<T> forward_range(const NetworkT<T>& net, const TensorT<T>& input, int begin, int end) {
  Trace<T> trace;
  trace.reserve(static_cast<std::size_t>(end - begin) + 1);
  trace.push_back(input);
  for (int i = begin; i < end; ++i) trace.push_back(apply_layer(net, i, trace.back()));
  return trace;
}

template <class T>
void check_input_shape(const NetworkT<T>& net, const TensorT<T>& input) {
  const std::vector<int>& want = net.input_shape;
  bool ok = input.rank() == static_cast<int>(want.size()) + 1;
  for (std::size_t i = 0; ok && i < want.size(); ++i) {
    ok = input.dim(static_cast<int>(i) + 1) == want[i];
  }
  if (!ok) {
    throw ShapeError("network input shape " + shape_to_string(input.shape) +
                     " does not match expected (batch," +
                     shape_to_string(net.input_shape).substr(1));
  }
}

// Full forward pass; trace has layer count + 1 entries, with the input first.
template <class T>
Trace<T> forward(const NetworkT<T>& net, const TensorT<T>& input) {
  check_input_shape(net, input);
  return forward_range(net, input, 0, net.num_layers());
}

template <class T>
struct GradientsT {
  std::vector<TensorT<T>> weight_grads;  // empty tensor for parameterless layers
  std::vector<TensorT<T>> bias_grads;
  TensorT<T> input_grad;
};

// Backward through the whole network. Frozen layers still receive gradients;
// freezing is applied at the update step.
template <class T>
GradientsT<T> backward(const NetworkT<T>& net, const Trace<T>& trace, const TensorT<T>& loss_grad) {
  const int n_layers = net.num_layers();
  if (static_cast<int>(trace.size()) != n_layers + 1) {
    throw ShapeError("backward: trace length " + std::to_string(trace.size()) +
                     " does not match layer count " + std::to_string(n_layers) + " + 1");
  }
  if (!trace.back().same_shape(loss_grad)) {
    throw ShapeError("backward: loss gradient shape " + shape_to_string(loss_grad.shape) +
                     " does not match network output " + shape_to_string(trace.back().shape));
  }

  GradientsT<T> grads;
  grads.weight_grads.resize(n_layers);
  grads.bias_grads.resize(n_layers);

  TensorT<T> g = loss_grad;
  for (int i = n_layers - 1; i >= 0; --i) {
    const LayerSpec& l = net.layers[i];
    const TensorT<T>& in = trace[i];
    switch (l.kind) {
      case LayerSpec::Kind::Conv2D: {
        Conv2dGrads<T> cg = conv2d_backward(in, *net.weights[i], g, l.stride, l.pad);
        grads.weight_grads[i] = std::move(cg.d_weights);
        grads.bias_grads[i] = std::move(cg.d_bias);
        g = std::move(cg.d_input);
        break;
      }
      case LayerSpec::Kind::ReLU:
        g = relu_backward(in, g);
        break;
      case LayerSpec::Kind::MaxPool:
        g = maxpool2d_backward(in, g, l.pool, l.pool_stride);
        break;
      case LayerSpec::Kind::FullyConnected: {
        FcGrads<T> fg = fully_connected_backward(in, *net.weights[i], g);
        grads.weight_grads[i] = std::move(fg.d_weights);
        grads.bias_grads[i] = std::move(fg.d_bias);
        g = std::move(fg.d_input);
        break;
      }
      case LayerSpec::Kind::Flatten:
        g = reshape(g, in.shape);
        break;
    }
  }
  grads.input_grad = std::move(g);
  return grads;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Momentum SGD with L2 decay folded into the gradient:
//   v = momentum * v + (g + weight_decay * w);  w -= lr * v
// Frozen layers are skipped entirely, so their parameters stay bit-identical.
template <class T>
class SgdT {
 public:
  SgdT(double lr, double momentum, double weight_decay)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    if (lr <= 0.0) throw Error("sgd: learning rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw Error("sgd: momentum must be in [0,1)");
  }

  void step(NetworkT<T>& net, const GradientsT<T>& grads) {
    ensure_state(net);
    for (int i = 0; i < net.num_layers(); ++i) {
      if (!net.weights[i] || net.frozen[i]) continue;
      update(*net.weights[i], grads.weight_grads[i], vel_w_[i]);
      update(*net.biases[i], grads.bias_grads[i], vel_b_[i]);
    }
  }

 private:
  void ensure_state(const NetworkT<T>& net) {
    if (!vel_w_.empty()) return;
    vel_w_.resize(net.weights.size());
    vel_b_.resize(net.biases.size());
    for (std::size_t i = 0; i < net.weights.size(); ++i) {
      if (net.weights[i]) {
        vel_w_[i] = TensorT<T>(net.weights[i]->shape);
        vel_b_[i] = TensorT<T>(net.biases[i]->shape);
      }
    }
  }

  void update(TensorT<T>& param, const TensorT<T>& grad, TensorT<T>& vel) {
    if (!param.same_shape(grad)) throw ShapeError("sgd: gradient shape mismatch");
    const T lr = static_cast<T>(lr_);
    const T mu = static_cast<T>(momentum_);
    const T wd = static_cast<T>(weight_decay_);
    for (std::size_t i = 0; i < param.numel(); ++i) {
      const T g = grad.data[i] + wd * param.data[i];
      vel.data[i] = mu * vel.data[i] + g;
      param.data[i] -= lr * vel.data[i];
    }
  }

  double lr_, momentum_, weight_decay_;
  std::vector<TensorT<T>> vel_w_, vel_b_;
};

// One plain update without persistent momentum state.
template <class T>
void sgd_step(NetworkT<T>& net, const GradientsT<T>& grads, double lr, double momentum,
              double weight_decay) {
  SgdT<T> opt(lr, momentum, weight_decay);
  opt.step(net, grads);
}

// ---------------------------------------------------------------------------
// Softmax / cross-entropy
// ---------------------------------------------------------------------------

// Max-subtracted softmax in double precision; the fusion currency of the
// ensemble. Every component lands in (0,1) and the sum is 1 up to rounding.
inline std::vector<double> softmax(std::span<const double> logits) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : logits) m = std::max(m, v);
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

// Loss and gradient for one logit vector: grad = softmax(logits) - onehot.
template <class T>
std::pair<double, std::vector<T>> softmax_cross_entropy(std::span<const T> logits, int label) {
  if (label < 0 || label >= static_cast<int>(logits.size())) {
    throw Error("softmax_cross_entropy: label " + std::to_string(label) + " out of range [0," +
                std::to_string(logits.size()) + ")");
  }
  double m = -std::numeric_limits<double>::infinity();
  for (T v : logits) m = std::max(m, static_cast<double>(v));
  double sum = 0.0;
  std::vector<double> e(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    e[i] = std::exp(static_cast<double>(logits[i]) - m);
    sum += e[i];
  }
  const double loss = std::log(sum) - (static_cast<double>(logits[label]) - m);
  std::vector<T> grad(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    double p = e[i] / sum;
    grad[i] = static_cast<T>(p - (static_cast<int>(i) == label ? 1.0 : 0.0));
  }
  return {loss, std::move(grad)};
}

// Mean loss over a batch of logits (B,K); gradient carries the 1/B factor.
template <class T>
double softmax_cross_entropy_batch(const TensorT<T>& logits, std::span<const int> labels,
                                   TensorT<T>* grad_out) {
  const int batch = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(labels.size()) != batch) {
    throw ShapeError("softmax_cross_entropy_batch: label count mismatch");
  }
  if (grad_out) *grad_out = TensorT<T>(logits.shape);
  double total = 0.0;
  const double inv_b = 1.0 / batch;
  for (int n = 0; n < batch; ++n) {
    std::span<const T> row(logits.ptr() + static_cast<std::size_t>(n) * k,
                           static_cast<std::size_t>(k));
    auto [loss, grad] = softmax_cross_entropy(row, labels[n]);
    total += loss;
    if (grad_out) {
      T* g = grad_out->ptr() + static_cast<std::size_t>(n) * k;
      for (int i = 0; i < k; ++i) g[i] = static_cast<T>(grad[i] * inv_b);
    }
  }
  return total * inv_b;
}

using Network = NetworkT<real>;
using Gradients = GradientsT<real>;
using Sgd = SgdT<real>;

}  // namespace mmoe
