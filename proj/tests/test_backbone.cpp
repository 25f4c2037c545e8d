// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/backbone.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace maskdiff;
using test::uniform_tensor;

namespace {

template <typename Scalar>
struct Inputs {
  Var<Scalar> image;
  Var<Scalar> x_t;
};

template <typename Scalar>
Inputs<Scalar> random_inputs(Index n, Index h, Index w, std::uint64_t seed) {
  return {Var<Scalar>(uniform_tensor<Scalar>({n, 3, h, w}, seed, 0, 1)),
          Var<Scalar>(uniform_tensor<Scalar>({n, 1, h, w}, seed + 1, -1.5, 1.5))};
}

BackboneConfig tiny_config() {
  BackboneConfig c;
  c.channels = {8, 16, 16, 16};
  c.heads = {1, 2, 2, 2};
  c.time_sinusoid_dim = 8;
  return c;
}

}  // namespace

TEST_CASE("pyramid shapes") {
  Rng rng(1);
  const PyramidBackbone<float> bb(BackboneConfig{}, rng);
  for (auto [h, w] : {std::pair<Index, Index>{64, 64}, {64, 96}, {128, 64}, {96, 160}, {256, 256}}) {
    const auto in = random_inputs<float>(2, h, w, 3);
    const auto fp = bb(in.image, in.x_t, {5, 900});
    for (std::size_t s = 0; s < 4; ++s) {
      const Index stride = Index{4} << s;
      CHECK(fp[s].shape() == Shape{2, BackboneConfig{}.channels[s], h / stride, w / stride});
      CHECK(fp[s].value().all_finite());
    }
  }
}

TEST_CASE("input validation") {
  Rng rng(1);
  const PyramidBackbone<float> bb(tiny_config(), rng);
  const auto ok = random_inputs<float>(1, 64, 64, 3);
  const auto odd = random_inputs<float>(1, 48, 64, 3);
  CHECK_THROWS_AS(bb(odd.image, odd.x_t, {1}), ShapeError);
  CHECK_THROWS(bb(ok.image, ok.x_t, {1, 2}));
  Var<float> nan_image(ok.image.value());
  nan_image.mutable_value()[17] = std::nanf("");
  CHECK_THROWS(bb(nan_image, ok.x_t, {1}));
  CHECK_THROWS_AS(bb(ok.x_t, ok.x_t, {1}), ShapeError);
  // A mask at another resolution is resized to the image.
  const Var<float> small(uniform_tensor<float>({1, 1, 32, 32}, 4));
  CHECK(bb(ok.image, small, {1})[0].shape() == Shape{1, 8, 16, 16});
}

TEST_CASE("constant input gives spatially constant interior features") {
  // Padding perturbs the first and last row/column of every stage; all other
  // positions see identical receptive fields and attention is shared.
  Rng rng(2);
  const PyramidBackbone<double> bb(BackboneConfig{}, rng);
  const Var<double> image(Tensor<double>({1, 3, 256, 256}));
  const Var<double> x_t(Tensor<double>({1, 1, 256, 256}));
  const auto fp = bb(image, x_t, {500});
  for (std::size_t s = 0; s < 4; ++s) {
    const Tensor<double>& f = fp[s].value();
    const Index c = f.dim(1), h = f.dim(2), w = f.dim(3);
    double worst = 0, spread = 0;
    for (Index ch = 0; ch < c; ++ch) {
      const double ref = f(0, ch, 1, 1);
      for (Index r = 1; r + 1 < h; ++r)
        for (Index q = 1; q + 1 < w; ++q) worst = std::max(worst, std::abs(f(0, ch, r, q) - ref));
      spread = std::max(spread, std::abs(f(0, ch, 0, 0) - ref));
    }
    INFO("stage " << s);
    CHECK(worst < 1e-9);
    // The border really is different, so the check above is not vacuous.
    CHECK(spread > 1e-6);
  }
}

TEST_CASE("every stage depends on t") {
  Rng rng(3);
  const PyramidBackbone<float> bb(BackboneConfig{}, rng);
  const auto in = random_inputs<float>(1, 64, 64, 5);
  const auto a = bb(in.image, in.x_t, {1});
  const auto b = bb(in.image, in.x_t, {1000});
  const auto again = bb(in.image, in.x_t, {1});
  for (std::size_t s = 0; s < 4; ++s) {
    CHECK(max_abs_diff(a[s].value(), b[s].value()) > 0);
    CHECK(a[s].value().vec() == again[s].value().vec());
  }
}

TEST_CASE("without the time token outputs are bit-identical across t") {
  BackboneConfig cfg;
  cfg.time_token = false;
  Rng rng(3);
  const PyramidBackbone<float> bb(cfg, rng);
  const auto in = random_inputs<float>(2, 64, 64, 5);
  const auto a = bb(in.image, in.x_t, {1, 1});
  for (std::vector<int> t : {std::vector<int>{1000, 7}, std::vector<int>{250, 999}}) {
    const auto b = bb(in.image, in.x_t, t);
    for (std::size_t s = 0; s < 4; ++s) CHECK(a[s].value().vec() == b[s].value().vec());
  }
}

TEST_CASE("batch items are processed independently") {
  Rng rng(4);
  const PyramidBackbone<double> bb(tiny_config(), rng);
  const auto in = random_inputs<double>(2, 64, 64, 6);
  const auto both = bb(in.image, in.x_t, {10, 600});
  const auto second = bb(Var<double>(in.image.value().sample(1)), Var<double>(in.x_t.value().sample(1)), {600});
  for (std::size_t s = 0; s < 4; ++s) {
    CHECK((both[s].value().sample(1).vec() - second[s].value().vec()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("gradients reach every parameter and match finite differences") {
  Rng rng(5);
  PyramidBackbone<double> bb(tiny_config(), rng);
  const auto in = random_inputs<double>(1, 64, 64, 7);
  std::array<Tensor<double>, 4> weights;
  for (std::size_t s = 0; s < 4; ++s) {
    const Index stride = Index{4} << s;
    weights[s] = uniform_tensor<double>({1, tiny_config().channels[s], 64 / stride, 64 / stride}, 50 + s);
  }
  auto loss = [&] {
    const auto fp = bb(in.image, in.x_t, {321});
    Var<double> total;
    for (std::size_t s = 0; s < 4; ++s) {
      const Var<double> term = sum(fp[s] * Var<double>(weights[s]));
      total = total.defined() ? total + term : term;
    }
    return total;
  };

  std::vector<std::pair<std::string, Var<double>>> params;
  bb.for_each_parameter("", [&](const std::string& name, Var<double>& p) { params.emplace_back(name, p); });
  for (auto& [name, p] : params) p.zero_grad();
  backward(loss());
  int unreached = 0;
  for (auto& [name, p] : params) {
    if (!p.has_grad() || p.grad().vec().cwiseAbs().maxCoeff() == 0) {
      ++unreached;
      MESSAGE("no gradient for " << name);
    }
  }
  CHECK(unreached == 0);

  // Key biases have an exactly zero gradient (softmax ignores a shift shared
  // by all keys), so their central differences are pure round-off of order
  // 1e-9. The 1e-5 floor treats agreement below 1e-8 as exact.
  int checked = 0, failed = 0;
  std::uint64_t seed = 900;
  for (auto& [name, p] : params) {
    const auto r = test::check_gradient(p, test::sample_indices(p.size(), 2, seed++), loss, 1e-3, 1e-6, 1e-5);
    checked += r.checked;
    failed += r.failed;
    if (r.failed) MESSAGE(name << " max relative error " << r.max_rel);
  }
  INFO(failed << " of " << checked << " sampled parameters outside tolerance");
  CHECK(failed <= checked / 100);
}
