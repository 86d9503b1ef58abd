#include <catch2/catch_amalgamated.hpp>

#include "ccvc/layers.hpp"
#include "ccvc/rng.hpp"
#include "testutil.hpp"

using ccvc::BatchNorm2d;
using ccvc::Conv2d;
using ccvc::Rng;
using ccvc::Tensor;
using testutil::from_vec;
using testutil::gradcheck;
using testutil::to_vec;

namespace {

void randomize(Tensor<double>& t, Rng& rng, double scale = 1.0) {
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.gaussian() * scale;
}

// Naive direct convolution, the reference for the im2col/GEMM path.
Tensor<double> conv_reference(const Conv2d<double>& conv, const Tensor<double>& x) {
  const int oh = conv.out_dim(x.h());
  const int ow = conv.out_dim(x.w());
  Tensor<double> y(x.n(), conv.out_ch, oh, ow);
  for (int n = 0; n < x.n(); ++n)
    for (int oc = 0; oc < conv.out_ch; ++oc)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = conv.has_bias() ? conv.bias[oc] : 0.0;
          for (int ic = 0; ic < conv.in_ch; ++ic)
            for (int ky = 0; ky < conv.ksize; ++ky)
              for (int kx = 0; kx < conv.ksize; ++kx) {
                const int sy = oy * conv.stride - conv.pad + ky;
                const int sx = ox * conv.stride - conv.pad + kx;
                if (sy < 0 || sy >= x.h() || sx < 0 || sx >= x.w()) continue;
                acc += conv.weight.at(oc, ic, ky, kx) * x.at(n, ic, sy, sx);
              }
          y.at(n, oc, oy, ox) = acc;
        }
  return y;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("conv forward matches the direct reference") {
  Rng rng(11);
  for (const auto& [k, s, p] : std::vector<std::tuple<int, int, int>>{
           {3, 1, 1}, {3, 2, 1}, {1, 1, 0}}) {
    Conv2d<double> conv(3, 5, k, s, p, /*with_bias=*/true);
    conv.init_he(rng);
    for (std::size_t i = 0; i < conv.bias.size(); ++i) conv.bias[i] = rng.gaussian();
    Tensor<double> x(2, 3, 7, 6);
    randomize(x, rng);
    const auto y = conv.forward(x, nullptr);
    const auto ref = conv_reference(conv, x);
    REQUIRE(y.same_shape(ref));
    for (std::size_t i = 0; i < y.size(); ++i) {
      REQUIRE(y[i] == Catch::Approx(ref[i]).margin(1e-12));
    }
  }
}

TEST_CASE("conv backward matches finite differences") {
  Rng rng(12);
  Conv2d<double> conv(2, 3, 3, 2, 1, /*with_bias=*/true);
  conv.init_he(rng);
  Tensor<double> x(2, 2, 6, 5);
  randomize(x, rng);
  // Scalar objective: projection of the output onto a fixed random tensor.
  Tensor<double> r(2, 3, conv.out_dim(6), conv.out_dim(5));
  randomize(r, rng);

  Conv2d<double>::Cache cache;
  conv.forward(x, &cache);
  Tensor<double> dw(conv.out_ch, conv.in_ch, 3, 3);
  Tensor<double> db(1, conv.out_ch, 1, 1);
  const auto dx = conv.backward(cache, r, dw, &db);

  SECTION("input gradient") {
    auto f = [&](const std::vector<double>& v) {
      Tensor<double> xt = x;
      from_vec(v, xt);
      return dot(conv.forward(xt, nullptr), r);
    };
    REQUIRE(gradcheck(f, to_vec(x), to_vec(dx)) < 1e-6);
  }
  SECTION("weight gradient") {
    auto f = [&](const std::vector<double>& v) {
      Conv2d<double> ct = conv;
      from_vec(v, ct.weight);
      return dot(ct.forward(x, nullptr), r);
    };
    REQUIRE(gradcheck(f, to_vec(conv.weight), to_vec(dw)) < 1e-6);
  }
  SECTION("bias gradient") {
    auto f = [&](const std::vector<double>& v) {
      Conv2d<double> ct = conv;
      from_vec(v, ct.bias);
      return dot(ct.forward(x, nullptr), r);
    };
    REQUIRE(gradcheck(f, to_vec(conv.bias), to_vec(db)) < 1e-6);
  }
}

TEST_CASE("batchnorm train-mode forward normalizes and backward matches FD") {
  Rng rng(13);
  BatchNorm2d<double> bn(3);
  for (int c = 0; c < 3; ++c) {
    bn.gamma[c] = 0.5 + rng.uniform();
    bn.beta[c] = rng.gaussian();
  }
  Tensor<double> x(2, 3, 4, 4);
  randomize(x, rng, 2.0);
  Tensor<double> r(2, 3, 4, 4);
  randomize(r, rng);

  BatchNorm2d<double>::Cache cache;
  auto bn_fwd = bn;  // running-stat updates must not affect the check
  const auto y = bn_fwd.forward(x, true, &cache);

  const std::size_t plane = 16;
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (int n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < plane; ++i) mean += cache.xhat.image(n)[c * plane + i];
    mean /= 32.0;
    for (int n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = cache.xhat.image(n)[c * plane + i] - mean;
        var += d * d;
      }
    var /= 32.0;
    REQUIRE(std::abs(mean) < 1e-10);
    REQUIRE(var == Catch::Approx(1.0).epsilon(1e-3));  // eps shrinks it slightly
  }

  Tensor<double> dgamma(1, 3, 1, 1), dbeta(1, 3, 1, 1);
  const auto dx = bn.backward(cache, r, dgamma, dbeta);

  SECTION("input gradient") {
    auto f = [&](const std::vector<double>& v) {
      Tensor<double> xt = x;
      from_vec(v, xt);
      auto bt = bn;
      return dot(bt.forward(xt, true, nullptr), r);
    };
    REQUIRE(gradcheck(f, to_vec(x), to_vec(dx)) < 1e-6);
  }
  SECTION("gamma and beta gradients") {
    auto fg = [&](const std::vector<double>& v) {
      auto bt = bn;
      from_vec(v, bt.gamma);
      return dot(bt.forward(x, true, nullptr), r);
    };
    REQUIRE(gradcheck(fg, to_vec(bn.gamma), to_vec(dgamma)) < 1e-6);
    auto fb = [&](const std::vector<double>& v) {
      auto bt = bn;
      from_vec(v, bt.beta);
      return dot(bt.forward(x, true, nullptr), r);
    };
    REQUIRE(gradcheck(fb, to_vec(bn.beta), to_vec(dbeta)) < 1e-6);
  }
}

TEST_CASE("batchnorm eval mode uses running stats and is repeatable") {
  Rng rng(14);
  BatchNorm2d<double> bn(2);
  bn.running_mean[0] = 0.3;
  bn.running_var[0] = 2.0;
  Tensor<double> x(1, 2, 3, 3);
  randomize(x, rng);
  const auto y1 = bn.forward(x, false, nullptr);
  const auto y2 = bn.forward(x, false, nullptr);
  for (std::size_t i = 0; i < y1.size(); ++i) REQUIRE(y1[i] == y2[i]);
  REQUIRE(y1[0] == Catch::Approx((x[0] - 0.3) / std::sqrt(2.0 + 1e-5)));
}

TEST_CASE("relu backward masks by output sign") {
  Tensor<double> x(1, 1, 1, 4);
  x[0] = -1.0; x[1] = 2.0; x[2] = 0.0; x[3] = 0.5;
  const auto y = ccvc::relu(x);
  Tensor<double> dy(1, 1, 1, 4, 1.0);
  const auto dx = ccvc::relu_backward(y, dy);
  REQUIRE(dx[0] == 0.0);
  REQUIRE(dx[1] == 1.0);
  REQUIRE(dx[2] == 0.0);
  REQUIRE(dx[3] == 1.0);
}

TEST_CASE("bilinear resize is linear and its backward is the exact adjoint") {
  Rng rng(15);
  Tensor<double> x(1, 2, 4, 4);
  randomize(x, rng);

  SECTION("commutes with scalar multiplication") {
    auto up = ccvc::resize_bilinear(x, 9, 7);
    Tensor<double> x2 = x;
    for (std::size_t i = 0; i < x2.size(); ++i) x2[i] *= 3.5;
    auto up2 = ccvc::resize_bilinear(x2, 9, 7);
    for (std::size_t i = 0; i < up.size(); ++i) {
      REQUIRE(up2[i] == Catch::Approx(3.5 * up[i]).margin(1e-12));
    }
  }

  SECTION("adjoint identity <Ax, y> == <x, A^T y>") {
    Tensor<double> ydir(1, 2, 9, 7);
    randomize(ydir, rng);
    const auto ax = ccvc::resize_bilinear(x, 9, 7);
    const auto aty = ccvc::resize_bilinear_backward(ydir, 4, 4);
    REQUIRE(dot(ax, ydir) == Catch::Approx(dot(x, aty)).epsilon(1e-12));
  }

  SECTION("identity when sizes match") {
    const auto same = ccvc::resize_bilinear(x, 4, 4);
    for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(same[i] == Catch::Approx(x[i]));
  }
}

TEST_CASE("channel dropout zeroes planes and rescales survivors") {
  Rng rng(16);
  Tensor<double> x(4, 8, 3, 3, 1.0);
  std::vector<std::uint8_t> keep;
  const auto y = ccvc::channel_dropout(x, 0.5, rng, keep);
  int kept = 0;
  for (int n = 0; n < 4; ++n)
    for (int c = 0; c < 8; ++c) {
      const double v = y.at(n, c, 0, 0);
      if (keep[n * 8 + c]) {
        ++kept;
        REQUIRE(v == 2.0);
      } else {
        for (int i = 0; i < 9; ++i) REQUIRE(y.image(n)[c * 9 + i] == 0.0);
      }
    }
  REQUIRE(kept >= 1);

  // Backward routes gradient only through kept planes, with the same scale.
  Tensor<double> dy(4, 8, 3, 3, 1.0);
  const auto dx = ccvc::channel_dropout_backward(dy, 0.5, keep);
  for (int n = 0; n < 4; ++n)
    for (int c = 0; c < 8; ++c) {
      REQUIRE(dx.at(n, c, 1, 1) == (keep[n * 8 + c] ? 2.0 : 0.0));
    }
}

TEST_CASE("softmax sums to one and matches the naive formula") {
  Rng rng(17);
  Tensor<double> z(2, 3, 2, 2);
  randomize(z, rng, 3.0);
  const auto p = ccvc::softmax_channels(z);
  for (int n = 0; n < 2; ++n)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) {
        double sum = 0.0, naive = 0.0;
        for (int c = 0; c < 3; ++c) naive += std::exp(z.at(n, c, y, x));
        for (int c = 0; c < 3; ++c) {
          sum += p.at(n, c, y, x);
          REQUIRE(p.at(n, c, y, x) ==
                  Catch::Approx(std::exp(z.at(n, c, y, x)) / naive).epsilon(1e-12));
        }
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-9));
      }
}
