#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mmoe/gradcheck.hpp"
#include "mmoe/nn.hpp"
#include "mmoe/rng.hpp"

using namespace mmoe;

namespace {

// Reference convolution used as an independent oracle: materializes the
// zero-padded input, then gathers with four plain loops.
TensorT<double> naive_conv2d(const TensorT<double>& in, const TensorT<double>& w,
                             const TensorT<double>& b, int stride, int pad) {
  const int n = in.dim(0), ic = in.dim(1), h = in.dim(2), wd = in.dim(3);
  const int oc = w.dim(0), k = w.dim(2);
  TensorT<double> padded({n, ic, h + 2 * pad, wd + 2 * pad});
  for (int ni = 0; ni < n; ++ni)
    for (int c = 0; c < ic; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < wd; ++x)
          padded.at4(ni, c, y + pad, x + pad) = in.at4(ni, c, y, x);
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (wd + 2 * pad - k) / stride + 1;
  TensorT<double> out({n, oc, oh, ow});
  for (int ni = 0; ni < n; ++ni)
    for (int o = 0; o < oc; ++o)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          double acc = b.data[o];
          for (int c = 0; c < ic; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx)
                acc += padded.at4(ni, c, y * stride + ky, x * stride + kx) * w.at4(o, c, ky, kx);
          out.at4(ni, o, y, x) = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("conv2d identity kernel reproduces the input") {
  TensorT<double> in({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  TensorT<double> w({1, 1, 1, 1}, {1.0});
  TensorT<double> b({1}, {0.0});
  const auto out = conv2d(in, w, b, 1, 0);
  CHECK(out.shape == std::vector<int>{1, 1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) CHECK(out.data[i] == doctest::Approx(in.data[i]));
}

TEST_CASE("conv2d all-ones 3x3 sums to 9") {
  TensorT<double> in({1, 1, 3, 3}, std::vector<double>(9, 1.0));
  TensorT<double> w({1, 1, 3, 3}, std::vector<double>(9, 1.0));
  TensorT<double> b({1}, {0.0});
  const auto out = conv2d(in, w, b, 1, 0);
  CHECK(out.shape == std::vector<int>{1, 1, 1, 1});
  CHECK(out.data[0] == doctest::Approx(9.0));
}

TEST_CASE("conv2d zero input yields the bias everywhere") {
  TensorT<double> in({2, 2, 4, 4});
  TensorT<double> w({3, 2, 3, 3});
  Rng rng(7);
  for (auto& v : w.data) v = rng.uniform(-1, 1);
  TensorT<double> b({3}, {0.5, -1.25, 2.0});
  const auto out = conv2d(in, w, b, 1, 1);
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 3; ++o)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) CHECK(out.at4(n, o, y, x) == doctest::Approx(b.data[o]));
}

TEST_CASE("conv2d matches the padded-gather oracle on random cases") {
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const int stride = 1 + static_cast<int>(rng.below(2));
    const int pad = static_cast<int>(rng.below(3));
    const int k = 1 + static_cast<int>(rng.below(3));
    const int h = k + static_cast<int>(rng.below(5));
    TensorT<double> in({2, 2, h, h});
    TensorT<double> w({3, 2, k, k});
    TensorT<double> b({3});
    for (auto& v : in.data) v = rng.uniform(-1, 1);
    for (auto& v : w.data) v = rng.uniform(-1, 1);
    for (auto& v : b.data) v = rng.uniform(-1, 1);
    const auto got = conv2d(in, w, b, stride, pad);
    const auto want = naive_conv2d(in, w, b, stride, pad);
    REQUIRE(got.shape == want.shape);
    for (std::size_t i = 0; i < got.numel(); ++i) {
      CHECK(got.data[i] == doctest::Approx(want.data[i]).epsilon(1e-12));
    }
    CHECK(got.all_finite());
  }
}

TEST_CASE("conv2d rejects mismatched channel counts") {
  TensorT<double> in({1, 2, 4, 4});
  TensorT<double> w({1, 3, 3, 3});
  TensorT<double> b({1});
  CHECK_THROWS_AS(conv2d(in, w, b, 1, 0), ShapeError);
}

TEST_CASE("empty network forward is the identity trace") {
  auto net = make_network<double>({}, {1, 2, 2});
  TensorT<double> in({3, 1, 2, 2});
  Rng rng(3);
  for (auto& v : in.data) v = rng.uniform(-1, 1);
  const auto trace = forward(net, in);
  REQUIRE(trace.size() == 1);
  CHECK(trace[0].data == in.data);
}

TEST_CASE("flatten emits row-major order") {
  auto net = make_network<double>({LayerSpec::flatten()}, {2, 2, 2});
  TensorT<double> in({1, 2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  const auto trace = forward(net, in);
  REQUIRE(trace.size() == 2);
  CHECK(trace[1].shape == std::vector<int>{1, 8});
  for (int i = 0; i < 8; ++i) CHECK(trace[1].data[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("relu clamps negatives") {
  TensorT<double> in({1, 2}, {-1.0, 2.0});
  const auto out = relu(in);
  CHECK(out.data[0] == 0.0);
  CHECK(out.data[1] == 2.0);
}

TEST_CASE("maxpool picks window maxima") {
  TensorT<double> in({1, 1, 2, 4}, {1, 5, 2, 0, 3, -1, 7, 7});
  const auto out = maxpool2d(in, 2, 2);
  CHECK(out.shape == std::vector<int>{1, 1, 1, 2});
  CHECK(out.data[0] == 5.0);
  CHECK(out.data[1] == 7.0);
}

TEST_CASE("zero loss gradient propagates to zero parameter gradients") {
  auto [net, input] = random_small_net(11);
  const auto trace = forward(net, input);
  TensorT<double> zero(trace.back().shape);
  const auto grads = backward(net, trace, zero);
  for (int l = 0; l < net.num_layers(); ++l) {
    if (!net.weights[l]) continue;
    for (double g : grads.weight_grads[l].data) CHECK(g == 0.0);
    for (double g : grads.bias_grads[l].data) CHECK(g == 0.0);
  }
  for (double g : grads.input_grad.data) CHECK(g == 0.0);
}

TEST_CASE("single FC layer analytic gradient: dL/db0 = 1, dL/dW0j = xj") {
  auto net = make_network<double>({LayerSpec::fully_connected(4, 2)}, {4});
  init_he_uniform(net, 5);
  TensorT<double> x({1, 4}, {0.3, -1.2, 0.8, 2.0});
  const auto trace = forward(net, x);
  TensorT<double> loss_grad({1, 2}, {1.0, 0.0});  // loss = y0
  const auto grads = backward(net, trace, loss_grad);
  CHECK(grads.bias_grads[0].data[0] == doctest::Approx(1.0));
  CHECK(grads.bias_grads[0].data[1] == doctest::Approx(0.0));
  for (int j = 0; j < 4; ++j) {
    CHECK(grads.weight_grads[0].at2(0, j) == doctest::Approx(x.data[static_cast<std::size_t>(j)]));
    CHECK(grads.weight_grads[0].at2(1, j) == doctest::Approx(0.0));
  }
}

TEST_CASE("analytic gradients match central finite differences") {
  const auto result = gradcheck_suite(8, 1e-5, 99);
  CAPTURE(result.worst_location);
  CHECK(result.max_rel_error < 1e-4);
  CHECK(result.params_checked > 200);
}

TEST_CASE("backward rejects a mismatched trace") {
  auto [net, input] = random_small_net(13);
  auto trace = forward(net, input);
  TensorT<double> loss_grad(trace.back().shape);
  trace.pop_back();
  CHECK_THROWS_AS(backward(net, trace, loss_grad), ShapeError);
}

TEST_CASE("softmax cross entropy on symmetric logits") {
  const std::vector<double> logits = {0.0, 0.0};
  auto [loss, grad] = softmax_cross_entropy(std::span<const double>(logits), 0);
  CHECK(loss == doctest::Approx(std::log(2.0)));
  CHECK(grad[0] == doctest::Approx(-0.5));
  CHECK(grad[1] == doctest::Approx(0.5));
}

TEST_CASE("softmax cross entropy is stable for huge logits") {
  const std::vector<double> logits = {1000.0, 0.0};
  auto [loss, grad] = softmax_cross_entropy(std::span<const double>(logits), 0);
  CHECK(std::isfinite(loss));
  CHECK(loss == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(std::isfinite(grad[0]));
}

TEST_CASE("softmax cross entropy direct evaluation") {
  const std::vector<double> logits = {1.0, 2.0, 3.0};
  auto [loss, grad] = softmax_cross_entropy(std::span<const double>(logits), 2);
  CHECK(loss == doctest::Approx(std::log(1.0 + std::exp(-1.0) + std::exp(-2.0))));
  CHECK(loss == doctest::Approx(0.40761).epsilon(1e-4));
}

TEST_CASE("softmax cross entropy rejects out-of-range labels") {
  const std::vector<double> logits = {1.0, 2.0};
  CHECK_THROWS_AS(softmax_cross_entropy(std::span<const double>(logits), 2), Error);
  CHECK_THROWS_AS(softmax_cross_entropy(std::span<const double>(logits), -1), Error);
}

TEST_CASE("softmax sums to one and stays inside (0,1)") {
  // Gaps beyond ~36 nats saturate double precision; confidence and class
  // logits at this scale stay far inside that.
  Rng rng(123);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(9);
    std::vector<double> logits(n);
    for (double& v : logits) v = rng.uniform(-15, 15);
    const auto p = softmax(logits);
    double sum = 0.0;
    for (double v : p) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
}

TEST_CASE("sgd: zero gradients and zero decay leave parameters unchanged") {
  auto [net, input] = random_small_net(17);
  const std::uint64_t before = param_checksum(net);
  GradientsT<double> grads;
  grads.weight_grads.resize(net.num_layers());
  grads.bias_grads.resize(net.num_layers());
  for (int l = 0; l < net.num_layers(); ++l) {
    if (net.weights[l]) {
      grads.weight_grads[l] = TensorT<double>(net.weights[l]->shape);
      grads.bias_grads[l] = TensorT<double>(net.biases[l]->shape);
    }
  }
  sgd_step(net, grads, 0.1, 0.0, 0.0);
  CHECK(param_checksum(net) == before);
}

TEST_CASE("sgd hand computation: w=1, grad=2, lr=0.1 -> 0.8") {
  auto net = make_network<double>({LayerSpec::fully_connected(1, 1)}, {1});
  net.weights[0]->data[0] = 1.0;
  net.biases[0]->data[0] = 0.0;
  GradientsT<double> grads;
  grads.weight_grads.push_back(TensorT<double>({1, 1}, {2.0}));
  grads.bias_grads.push_back(TensorT<double>({1}, {0.0}));
  sgd_step(net, grads, 0.1, 0.0, 0.0);
  CHECK(net.weights[0]->data[0] == doctest::Approx(0.8));
}

TEST_CASE("frozen layers are bit-identical after updates with nonzero gradients") {
  auto net = make_network<double>(
      {LayerSpec::fully_connected(3, 3), LayerSpec::relu(), LayerSpec::fully_connected(3, 2)},
      {3});
  init_he_uniform(net, 21);
  net.frozen[0] = 1;
  const std::vector<double> w0 = net.weights[0]->data;
  const std::vector<double> b0 = net.biases[0]->data;
  GradientsT<double> grads;
  grads.weight_grads.resize(3);
  grads.bias_grads.resize(3);
  grads.weight_grads[0] = TensorT<double>({3, 3}, std::vector<double>(9, 5.0));
  grads.bias_grads[0] = TensorT<double>({3}, std::vector<double>(3, 5.0));
  grads.weight_grads[2] = TensorT<double>({2, 3}, std::vector<double>(6, 1.0));
  grads.bias_grads[2] = TensorT<double>({2}, std::vector<double>(2, 1.0));
  SgdT<double> opt(0.5, 0.9, 0.01);
  opt.step(net, grads);
  opt.step(net, grads);
  CHECK(net.weights[0]->data == w0);
  CHECK(net.biases[0]->data == b0);
  CHECK(net.weights[2]->data[0] != doctest::Approx(0.0));
}

TEST_CASE("sgd validates hyperparameters") {
  CHECK_THROWS_AS(SgdT<double>(0.0, 0.0, 0.0), Error);
  CHECK_THROWS_AS(SgdT<double>(0.1, 1.0, 0.0), Error);
  CHECK_THROWS_AS(SgdT<double>(0.1, -0.1, 0.0), Error);
}

TEST_CASE("identical seeds give bit-identical parameters after identical steps") {
  auto run = [] {
    auto [net, input] = random_small_net(31);
    const auto out_shape = forward(net, input).back().shape;
    SgdT<double> opt(0.05, 0.9, 1e-4);
    for (int step = 0; step < 3; ++step) {
      const auto trace = forward(net, input);
      TensorT<double> g(out_shape, std::vector<double>(TensorT<double>(out_shape).numel(), 0.1));
      opt.step(net, backward(net, trace, g));
    }
    return param_checksum(net);
  };
  CHECK(run() == run());
}

TEST_CASE("forward rejects inputs that do not match the network") {
  auto net = make_network<double>({LayerSpec::conv2d(1, 2, 3, 1, 1)}, {1, 8, 8});
  TensorT<double> wrong({1, 1, 6, 6});
  CHECK_THROWS_AS(forward(net, wrong), ShapeError);
  TensorT<double> unbatched({1, 8, 8});
  CHECK_THROWS_AS(forward(net, unbatched), ShapeError);
}

TEST_CASE("shape errors identify the offending layer") {
  std::vector<LayerSpec> bad = {LayerSpec::conv2d(1, 4, 3, 1, 1), LayerSpec::relu(),
                                LayerSpec::conv2d(8, 4, 3, 1, 1)};
  try {
    make_network<double>(bad, {1, 8, 8});
    FAIL("expected a ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("layer 2") != std::string::npos);
    CHECK(msg.find("8") != std::string::npos);
  }
}

TEST_CASE("kernel ops keep finite inputs finite") {
  Rng rng(77);
  for (int trial = 0; trial < 5; ++trial) {
    auto [net, input] = random_small_net(1000 + static_cast<std::uint64_t>(trial));
    for (auto& v : input.data) v = rng.uniform(-3, 3);
    const auto trace = forward(net, input);
    for (const auto& t : trace) CHECK(t.all_finite());
    TensorT<double> g(trace.back().shape);
    for (auto& v : g.data) v = rng.uniform(-1, 1);
    const auto grads = backward(net, trace, g);
    CHECK(grads.input_grad.all_finite());
  }
}
