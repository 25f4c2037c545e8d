// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/nn.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace maskdiff;
using test::check_gradient;
using test::uniform_tensor;

namespace {

using V = Var<double>;

// Reduces an op output to a scalar with fixed random weights so every output
// element contributes a distinct amount.
V probe(const V& y, std::uint64_t seed = 99) { return sum(y * V(uniform_tensor<double>(y.shape(), seed))); }

V leaf(Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
  return V(uniform_tensor<double>(std::move(s), seed, lo, hi), true);
}

void expect_grad(V& p, const std::function<V()>& f, double tol = 1e-6) {
  std::vector<Index> all(static_cast<std::size_t>(p.size()));
  for (Index i = 0; i < p.size(); ++i) all[static_cast<std::size_t>(i)] = i;
  const auto r = check_gradient(p, all, f, tol);
  INFO("max relative error " << r.max_rel);
  CHECK(r.failed == 0);
}

double naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, const Conv2dOptions& o,
                  Index n, Index co, Index oh, Index ow) {
  double acc = b.empty() ? 0.0 : b[co];
  for (Index ci = 0; ci < x.dim(1); ++ci) {
    for (Index i = 0; i < w.dim(2); ++i) {
      for (Index j = 0; j < w.dim(3); ++j) {
        const Index ih = oh * o.stride - o.pad_h + i * o.dilation_h;
        const Index iw = ow * o.stride - o.pad_w + j * o.dilation_w;
        if (ih < 0 || iw < 0 || ih >= x.dim(2) || iw >= x.dim(3)) continue;
        acc += x(n, ci, ih, iw) * w.data()[((co * w.dim(1) + ci) * w.dim(2) + i) * w.dim(3) + j];
      }
    }
  }
  return acc;
}

}  // namespace

TEST_CASE("elementwise ops and reductions") {
  V a = leaf({2, 3}, 1), b = leaf({2, 3}, 2);
  CHECK((a + b).value()[4] == doctest::Approx(a.value()[4] + b.value()[4]));
  CHECK(mean(a).value()[0] == doctest::Approx(a.value().vec().mean()));
  CHECK_THROWS_AS(add(a, leaf({3, 2}, 3)), ShapeError);
  expect_grad(a, [&] { return probe(a * b + scale(a, 0.5) - add_scalar(b, 2.0)); });
  expect_grad(a, [&] { return probe(silu(a)); });
  expect_grad(a, [&] { return probe(gelu(a)); });
  expect_grad(a, [&] { return probe(sigmoid(a)); });
  expect_grad(a, [&] { return mean(a * a); });
}

TEST_CASE("conv2d matches direct summation") {
  for (const Conv2dOptions& o : {Conv2dOptions{1, 1, 1, 1, 1}, Conv2dOptions{2, 1, 1, 1, 1},
                                 Conv2dOptions{1, 3, 3, 3, 3}, Conv2dOptions{1, 0, 1, 1, 1}}) {
    V x = leaf({2, 3, 9, 8}, 5), w = leaf({4, 3, 3, 3}, 6), b = leaf({4}, 7);
    if (o.pad_h == 0) w = leaf({4, 3, 1, 3}, 6);
    const V y = conv2d(x, w, b, o);
    for (Index n = 0; n < y.dim(0); ++n)
      for (Index c = 0; c < y.dim(1); ++c)
        for (Index h = 0; h < y.dim(2); ++h)
          for (Index ww = 0; ww < y.dim(3); ++ww)
            CHECK(y.value()(n, c, h, ww) ==
                  doctest::Approx(naive_conv(x.value(), w.value(), b.value(), o, n, c, h, ww)).epsilon(1e-12));
  }
}

TEST_CASE("conv2d gradients") {
  V x = leaf({2, 2, 7, 6}, 8), w = leaf({3, 2, 3, 3}, 9), b = leaf({3}, 10);
  const Conv2dOptions o{2, 2, 2, 2, 2};
  expect_grad(x, [&] { return probe(conv2d(x, w, b, o)); });
  expect_grad(w, [&] { return probe(conv2d(x, w, b, o)); });
  expect_grad(b, [&] { return probe(conv2d(x, w, b, o)); });
  CHECK_THROWS_AS(conv2d(leaf({1, 3, 5, 5}, 1), w, b, Conv2dOptions{}), ShapeError);
}

TEST_CASE("normalisation layers") {
  V x = leaf({2, 4, 3, 5}, 11);
  const V y = group_norm(x, 2);
  for (Index n = 0; n < 2; ++n) {
    for (Index g = 0; g < 2; ++g) {
      const auto seg = y.value().vec().segment((n * 4 + g * 2) * 15, 30);
      CHECK(seg.mean() == doctest::Approx(0).epsilon(1e-12));
      CHECK((seg.array() - seg.mean()).square().mean() == doctest::Approx(1).epsilon(1e-4));
    }
  }
  CHECK_THROWS_AS(group_norm(x, 3), ShapeError);
  expect_grad(x, [&] { return probe(group_norm(x, 2)); }, 1e-5);
  V g = leaf({4}, 12), b = leaf({4}, 13);
  expect_grad(x, [&] { return probe(channel_affine(x, g, b)); });
  expect_grad(g, [&] { return probe(channel_affine(x, g, b)); });
  V s = leaf({2, 4}, 14), sh = leaf({2, 4}, 15);
  expect_grad(x, [&] { return probe(modulate(x, s, sh)); });
  expect_grad(s, [&] { return probe(modulate(x, s, sh)); });
  expect_grad(sh, [&] { return probe(modulate(x, s, sh)); });
  V t = leaf({2, 3, 6}, 16), lg = leaf({6}, 17), lb = leaf({6}, 18);
  expect_grad(t, [&] { return probe(layer_norm(t, lg, lb)); }, 1e-5);
  expect_grad(lg, [&] { return probe(layer_norm(t, lg, lb)); });
}

TEST_CASE("linear and attention gradients") {
  V x = leaf({2, 5, 4}, 19), w = leaf({3, 4}, 20), b = leaf({3}, 21);
  expect_grad(x, [&] { return probe(linear(x, w, b)); });
  expect_grad(w, [&] { return probe(linear(x, w, b)); });
  V q = leaf({2, 3, 4}, 22), k = leaf({2, 5, 4}, 23), v = leaf({2, 5, 4}, 24);
  expect_grad(q, [&] { return probe(attention(q, k, v, 2)); }, 1e-5);
  expect_grad(k, [&] { return probe(attention(q, k, v, 2)); }, 1e-5);
  expect_grad(v, [&] { return probe(attention(q, k, v, 2)); }, 1e-5);
  // Single key: attention returns that value row for every query.
  V k1 = leaf({1, 1, 4}, 25), v1 = leaf({1, 1, 4}, 26);
  const V out = attention(leaf({1, 3, 4}, 27), k1, v1, 1);
  for (Index i = 0; i < 3; ++i) CHECK(out.value()[i * 4 + 2] == doctest::Approx(v1.value()[2]));
}

TEST_CASE("layout ops") {
  V x = leaf({2, 3, 4, 5}, 28);
  const V tokens = map_to_tokens(x);
  CHECK(tokens.shape() == Shape{2, 20, 3});
  CHECK(tokens.value()[(1 * 20 + 7) * 3 + 2] == x.value()(1, 2, 1, 2));
  CHECK(tokens_to_map(tokens, 4, 5).value().vec() == x.value().vec());
  expect_grad(x, [&] { return probe(map_to_tokens(x)); });
  V y = leaf({2, 2, 4, 5}, 29);
  const V c = concat<double>({x, y}, 1);
  CHECK(c.shape() == Shape{2, 5, 4, 5});
  CHECK(slice(c, 1, 3, 2).value().vec() == y.value().vec());
  expect_grad(y, [&] { return probe(concat<double>({x, y}, 1)); });
  expect_grad(x, [&] { return probe(slice(x, 2, 1, 2)); });
  expect_grad(x, [&] { return probe(reshape(x, Shape{6, 20})); });
}

TEST_CASE("bilinear resize") {
  // Constant maps stay constant; exact 2x upsampling of a ramp interpolates.
  V x(Tensor<double>({1, 1, 3, 3}, 2.5));
  CHECK((resize_bilinear(x, 6, 7).value().array() == 2.5).all());
  V ramp(Tensor<double>({1, 1, 1, 4}));
  for (Index i = 0; i < 4; ++i) ramp.mutable_value()[i] = static_cast<double>(i);
  const auto up = resize_bilinear(ramp, 1, 8).value();
  CHECK(up[0] == 0.0);
  CHECK(up[1] == doctest::Approx(0.25));
  CHECK(up[2] == doctest::Approx(0.75));
  CHECK(up[7] == 3.0);
  V z = leaf({2, 2, 3, 5}, 30);
  expect_grad(z, [&] { return probe(resize_bilinear(z, 6, 4)); });
}

TEST_CASE("tape bookkeeping") {
  V a = leaf({3}, 31);
  V frozen(uniform_tensor<double>({3}, 32));
  backward(sum(a * frozen));
  CHECK(a.has_grad());
  CHECK_FALSE(frozen.has_grad());
  // Gradients accumulate across backward calls until cleared.
  const Tensor<double> first = a.grad();
  backward(sum(a * frozen));
  CHECK(a.grad()[1] == doctest::Approx(2 * first[1]));
  a.zero_grad();
  {
    NoGradGuard guard;
    CHECK_FALSE(NoGradGuard::grad_enabled());
    const V y = a * frozen;
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(NoGradGuard::grad_enabled());
  // A variable used twice receives both contributions.
  backward(sum(a * a));
  for (Index i = 0; i < 3; ++i) CHECK(a.grad()[i] == doctest::Approx(2 * a.value()[i]));
}

TEST_CASE("sinusoidal time embedding") {
  const auto e0 = sinusoidal_embedding<double>(0, 8);
  for (Index i = 0; i < 8; ++i) CHECK(e0[i] == (i % 2 == 0 ? 0.0 : 1.0));
  CHECK(sinusoidal_embedding<double>(5, 16).vec() == sinusoidal_embedding<double>(5, 16).vec());
  CHECK((sinusoidal_embedding<double>(3, 64).vec() - sinusoidal_embedding<double>(7, 64).vec()).norm() >= 1e-3);
  CHECK_THROWS(sinusoidal_embedding<double>(1, 7));
  CHECK_THROWS(sinusoidal_embedding<double>(-1, 8));
  Rng rng(1);
  TimeEmbedding<double> te(16, 12, rng);
  const V out = te({0, 3, 999});
  CHECK(out.shape() == Shape{3, 12});
  CHECK(te({3}).value().vec().isApprox(out.value().sample(1).vec(), 1e-12));
}
