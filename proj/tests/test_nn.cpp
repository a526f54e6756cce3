#include "dvd/nn.hpp"

#include <cstdio>
#include <filesystem>

#include "doctest.h"

using namespace dvd;
using namespace dvd::nn;

namespace {

Network tiny_conv_net(std::size_t T = 4, std::size_t H = 8, std::size_t W = 8) {
  Network net;
  net.input_shape = {2, T, H, W};
  net.add<Conv3d>(2, 3, std::array<std::size_t, 3>{3, 3, 3}, std::array<std::size_t, 3>{1, 2, 2});
  net.add<BatchNorm3d>(3);
  net.add<Relu>();
  net.add<GlobalAvgPool>();
  net.add<FullyConnected>(3, 2);
  return net;
}

Tensor random_input(const std::vector<std::size_t>& shape, Rng& rng) {
  Tensor t(shape);
  for (auto& x : t.v) x = rng.uniform(-1.0, 1.0);
  return t;
}

// loss = 0.5 * sum(out^2); returns analytic grads via backward
double half_sq_loss(const Network& net, const Tensor& in, GradMap* grads, Mode mode = Mode::train) {
  NetworkCache cache;
  Tensor out = net.forward(in, mode, grads ? &cache : nullptr);
  double loss = 0.0;
  for (double y : out.v) loss += 0.5 * y * y;
  if (grads) {
    Tensor go = out;  // d(0.5*y^2)/dy = y
    net.backward(cache, go, *grads);
  }
  return loss;
}

}  // namespace

TEST_CASE("fully_connected identity passes input through") {
  Network net;
  net.input_shape = {3};
  auto& fc = net.add<FullyConnected>(3, 3);
  for (std::size_t i = 0; i < 3; ++i) fc.params()[0].second->v[i * 3 + i] = 1.0;
  Tensor x({2, 3}, {1.0, -2.0, 3.0, 0.5, 0.0, -0.25});
  Tensor y = net.forward(x, Mode::eval);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.v[i] == doctest::Approx(x.v[i]));
}

TEST_CASE("relu zeroes negative input") {
  Network net;
  net.input_shape = {4};
  net.add<Relu>();
  Tensor x({1, 4}, {-1.0, -0.5, -3.0, -1e-9});
  Tensor y = net.forward(x, Mode::eval);
  for (double v : y.v) CHECK(v == 0.0);
}

TEST_CASE("batchnorm train mode normalizes batch moments") {
  Network net;
  net.input_shape = {2, 2, 4, 4};
  net.add<BatchNorm3d>(2);
  Rng rng(7);
  Tensor x = random_input({6, 2, 2, 4, 4}, rng);
  Tensor y = net.forward(x, Mode::train);
  const std::size_t spatial = 2 * 4 * 4;
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0.0, v = 0.0;
    std::size_t cnt = 0;
    for (std::size_t b = 0; b < 6; ++b)
      for (std::size_t i = 0; i < spatial; ++i) {
        m += y.v[(b * 2 + c) * spatial + i];
        ++cnt;
      }
    m /= cnt;
    for (std::size_t b = 0; b < 6; ++b)
      for (std::size_t i = 0; i < spatial; ++i) {
        const double d = y.v[(b * 2 + c) * spatial + i] - m;
        v += d * d;
      }
    v /= cnt;
    CHECK(std::fabs(m) < 1e-6);
    CHECK(std::fabs(v - 1.0) < 1e-3);  // eps shifts variance slightly below 1
  }
}

TEST_CASE("batchnorm eval output invariant to batch composition") {
  Network net;
  net.input_shape = {2, 2, 4, 4};
  net.add<BatchNorm3d>(2);
  Rng rng(11);
  // drive the running stats with a few train batches
  for (int i = 0; i < 5; ++i) net.forward(random_input({4, 2, 2, 4, 4}, rng), Mode::train);
  Tensor a = random_input({1, 2, 2, 4, 4}, rng);
  Tensor b = random_input({1, 2, 2, 4, 4}, rng);
  Tensor ya_alone = net.forward(a, Mode::eval);
  Tensor batch({2, 2, 2, 4, 4});
  std::copy(a.v.begin(), a.v.end(), batch.v.begin());
  std::copy(b.v.begin(), b.v.end(), batch.v.begin() + a.size());
  Tensor y_both = net.forward(batch, Mode::eval);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(ya_alone.v[i] == y_both.v[i]);
}

TEST_CASE("forward determinism") {
  Network net = tiny_conv_net();
  Rng rng(3);
  net.init_params(rng);
  Tensor x = random_input({2, 2, 4, 8, 8}, rng);
  Tensor y1 = net.forward(x, Mode::eval);
  Tensor y2 = net.forward(x, Mode::eval);
  CHECK(y1.v == y2.v);
}

TEST_CASE("shape error names the offending layer") {
  Network net = tiny_conv_net();
  Rng rng(3);
  net.init_params(rng);
  Tensor bad({1, 2, 4, 8});
  CHECK_THROWS_AS(net.forward(bad, Mode::eval), ShapeError);
  Network net2;
  net2.input_shape = {4};
  net2.add<FullyConnected>(4, 2);
  net2.add<FullyConnected>(3, 2);  // inconsistent
  Rng rng2(1);
  net2.init_params(rng2);
  Tensor x({1, 4});
  try {
    net2.forward(x, Mode::eval);
    FAIL("expected shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
}

TEST_CASE("analytic gradient of half-squared loss through identity net is x") {
  Network net;
  net.input_shape = {3};
  auto& fc = net.add<FullyConnected>(3, 3);
  for (std::size_t i = 0; i < 3; ++i) fc.params()[0].second->v[i * 3 + i] = 1.0;
  Tensor x({1, 3}, {0.3, -1.2, 2.0});
  NetworkCache cache;
  Tensor out = net.forward(x, Mode::eval, &cache);
  GradMap grads;
  Tensor gin = net.backward(cache, out, grads);
  for (std::size_t i = 0; i < 3; ++i) CHECK(gin.v[i] == doctest::Approx(x.v[i]));
}

TEST_CASE("gradient check: conv3d + batchnorm + relu + pool + fc") {
  Network net = tiny_conv_net();
  Rng rng(42);
  net.init_params(rng);
  Tensor x = random_input({2, 2, 4, 8, 8}, rng);
  GradMap grads;
  half_sq_loss(net, x, &grads);
  auto rep = grad_check(
      net, [&] { return half_sq_loss(net, x, nullptr); }, grads);
  CHECK(rep.params_checked > 100);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("gradient check: sigmoid and softmax heads") {
  for (int variant = 0; variant < 2; ++variant) {
    Network net;
    net.input_shape = {5};
    net.add<FullyConnected>(5, 4);
    net.add<Relu>();
    net.add<FullyConnected>(4, 3);
    if (variant == 0)
      net.add<Sigmoid>();
    else
      net.add<Softmax>();
    Rng rng(100 + variant);
    net.init_params(rng);
    Tensor x = random_input({3, 5}, rng);
    GradMap grads;
    half_sq_loss(net, x, &grads);
    auto rep = grad_check(
        net, [&] { return half_sq_loss(net, x, nullptr); }, grads);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("corrupted backward is caught by the gradient check") {
  Network net = tiny_conv_net();
  Rng rng(5);
  net.init_params(rng);
  Tensor x = random_input({2, 2, 4, 8, 8}, rng);
  GradMap grads;
  half_sq_loss(net, x, &grads);
  // deliberately corrupt one gradient tensor
  grads.begin()->second.v[0] += 1.0;
  auto rep = grad_check(
      net, [&] { return half_sq_loss(net, x, nullptr); }, grads);
  CHECK(rep.max_rel_err > 1e-2);
}

TEST_CASE("frozen layers receive no parameter gradients") {
  Network net = tiny_conv_net();
  Rng rng(9);
  net.init_params(rng);
  net.layer(0).frozen = true;
  net.layer(1).frozen = true;
  Tensor x = random_input({1, 2, 4, 8, 8}, rng);
  GradMap grads;
  half_sq_loss(net, x, &grads);
  for (auto& [name, g] : grads) {
    CHECK(name.rfind("layer0.", 0) != 0);
    CHECK(name.rfind("layer1.", 0) != 0);
  }
  CHECK(grads.count("layer4.weight") == 1);
  // and the finite-difference report skips them too
  auto rep = grad_check(
      net, [&] { return half_sq_loss(net, x, nullptr); }, grads);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("bce_pair_loss values") {
  CHECK(bce_pair_loss(0.5, 0.5) == doctest::Approx(2.0 * std::log(2.0)));
  CHECK(bce_pair_loss(1.0 - 1e-7, 1e-7) == doctest::Approx(2e-7).epsilon(0.01));
  CHECK(bce_pair_loss(0.8, 0.3) == doctest::Approx(0.57982).epsilon(1e-4));
}

TEST_CASE("bce_pair_loss monotonicity") {
  Rng rng(21);
  for (int i = 0; i < 200; ++i) {
    const double p = rng.uniform(0.05, 0.9);
    const double q = rng.uniform(0.05, 0.9);
    const double d = rng.uniform(0.001, 0.09);
    CHECK(bce_pair_loss(p + d, q) < bce_pair_loss(p, q));
    CHECK(bce_pair_loss(p, q + d) > bce_pair_loss(p, q));
  }
}

TEST_CASE("sgd momentum update rule") {
  SUBCASE("plain sgd when momentum and wd are zero") {
    Tensor p({2}, {1.0, 2.0});
    GradMap g;
    g.emplace("p", Tensor({2}, {0.5, -1.0}));
    SgdMomentum opt{0.1, 0.0, 0.0, {}};
    opt.step({{"p", &p}}, g);
    CHECK(p.v[0] == doctest::Approx(1.0 - 0.1 * 0.5));
    CHECK(p.v[1] == doctest::Approx(2.0 + 0.1 * 1.0));
  }
  SUBCASE("velocity accumulates: g then 1.9g") {
    Tensor p({1}, {0.0});
    GradMap g;
    g.emplace("p", Tensor({1}, {1.0}));
    SgdMomentum opt{0.01, 0.9, 0.0, {}};
    opt.step({{"p", &p}}, g);
    CHECK(opt.velocity.at("p").v[0] == doctest::Approx(1.0));
    opt.step({{"p", &p}}, g);
    CHECK(opt.velocity.at("p").v[0] == doctest::Approx(1.9));
  }
  SUBCASE("weight decay shrinks params at zero gradient") {
    Tensor p({1}, {10.0});
    GradMap g;
    g.emplace("p", Tensor({1}, {0.0}));
    SgdMomentum opt{0.01, 0.0, 1e-5, {}};
    opt.step({{"p", &p}}, g);
    CHECK(p.v[0] == doctest::Approx(10.0 - 0.01 * 1e-5 * 10.0));
  }
  SUBCASE("non-finite gradient aborts the step") {
    Tensor p({1}, {1.0});
    GradMap g;
    g.emplace("p", Tensor({1}, {std::nan("")}));
    SgdMomentum opt;
    CHECK_THROWS_AS(opt.step({{"p", &p}}, g), NumericError);
    CHECK(p.v[0] == 1.0);
  }
}

TEST_CASE("checkpoint round-trip and compatibility") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "dvd_ckpt_test.bin").string();
  Network net = tiny_conv_net();
  Rng rng(77);
  net.init_params(rng);
  SgdMomentum opt;
  Tensor x = random_input({2, 2, 4, 8, 8}, rng);
  GradMap grads;
  half_sq_loss(net, x, &grads);
  opt.step(net.named_params(true), grads);

  save_checkpoint(path, net, &opt);
  const std::string bytes1 = read_file(path);

  Network net2 = tiny_conv_net();
  SgdMomentum opt2;
  load_checkpoint(path, net2, &opt2);
  save_checkpoint(path, net2, &opt2);
  const std::string bytes2 = read_file(path);
  CHECK(bytes1 == bytes2);
  CHECK(opt2.velocity.size() == opt.velocity.size());

  // different architecture -> compatibility error
  Network other;
  other.input_shape = {4};
  other.add<FullyConnected>(4, 2);
  CHECK_THROWS_AS(load_checkpoint(path, other), CompatError);

  fs::remove(path);
}
