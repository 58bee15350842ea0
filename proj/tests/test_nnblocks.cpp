#include <catch_amalgamated.hpp>

#include <Eigen/SVD>

#include "pyragen/nnblocks.hpp"

using namespace pyragen;
using Catch::Approx;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(s);
  for (auto& v : t.span()) v = uniform(rng, lo, hi);
  return t;
}

// Fixed random projection to a scalar so every output entry gets a distinct weight.
Var<double> project(const Var<double>& out, const Tensor<double>& r) { return mean(mul(out, Var<double>(r))); }

// Direct 2-D convolution used as the reference for the im2col path.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, ConvGeometry g) {
  const int oh = g.out_extent(x.h()), ow = g.out_extent(x.w()), pad = g.pad();
  Tensor<double> out(Shape{x.n(), w.n(), oh, ow});
  for (int n = 0; n < x.n(); ++n)
    for (int o = 0; o < w.n(); ++o)
      for (int y = 0; y < oh; ++y)
        for (int xo = 0; xo < ow; ++xo) {
          double acc = b.at(0, o, 0, 0);
          for (int c = 0; c < x.c(); ++c)
            for (int ky = 0; ky < g.kernel; ++ky)
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int iy = y * g.stride - pad + ky * g.dilation;
                const int ix = xo * g.stride - pad + kx * g.dilation;
                if (iy < 0 || iy >= x.h() || ix < 0 || ix >= x.w()) continue;
                acc += w.at(o, c, ky, kx) * x.at(n, c, iy, ix);
              }
          out.at(n, o, y, xo) = acc;
        }
  return out;
}

Tensor<double> mask_from(int h, int w, const std::vector<std::pair<int, int>>& known) {
  Tensor<double> m(Shape{1, 1, h, w}, 1.0);
  for (auto [y, x] : known) m.at(0, 0, y, x) = 0.0;
  return m;
}

}  // namespace

TEST_CASE("conv2d matches direct convolution") {
  Rng rng(1);
  for (auto g : {ConvGeometry{3, 1, 1}, ConvGeometry{5, 2, 1}, ConvGeometry{3, 1, 2}, ConvGeometry{3, 1, 4},
                 ConvGeometry{1, 1, 1}}) {
    const auto x = random_tensor({2, 3, 9, 8}, rng);
    const auto w = random_tensor({4, 3, g.kernel, g.kernel}, rng);
    const auto b = random_tensor({1, 4, 1, 1}, rng);
    const auto got = conv2d(Var<double>(x), Var<double>(w), Var<double>(b), g, "c").value();
    const auto want = naive_conv(x, w, b, g);
    REQUIRE(got.shape() == want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == Approx(want[i]).margin(1e-12));
  }
}

TEST_CASE("stride-1 convolution keeps the spatial size") {
  Rng rng(2);
  for (int dil : {1, 2, 4, 8, 12, 16}) {
    const auto x = random_tensor({1, 2, 16, 16}, rng);
    const auto y = conv2d(Var<double>(x), Var<double>(random_tensor({3, 2, 3, 3}, rng)),
                          Var<double>(Tensor<double>({1, 3, 1, 1})), ConvGeometry{3, 1, dil}, "c");
    CHECK(y.shape() == Shape{1, 3, 16, 16});
  }
  const auto down = conv2d(Var<double>(Tensor<double>({1, 2, 16, 16})), Var<double>(Tensor<double>({3, 2, 3, 3})),
                           Var<double>(Tensor<double>({1, 3, 1, 1})), ConvGeometry{3, 2, 1}, "c");
  CHECK(down.shape() == Shape{1, 3, 8, 8});
}

TEST_CASE("convolution rejects mismatched channels") {
  CHECK_THROWS_AS(conv2d(Var<double>(Tensor<double>({1, 2, 8, 8})), Var<double>(Tensor<double>({3, 4, 3, 3})),
                         Var<double>(Tensor<double>({1, 3, 1, 1})), ConvGeometry{3, 1, 1}, "c"),
                  ShapeError);
}

TEST_CASE("gated convolution examples") {
  Rng rng(3);
  GatedConv<double> g("g", ConvSpec{3, 4, 3, 1, 2, Activation::elu}, rng);
  const auto x = random_tensor({1, 3, 8, 8}, rng);

  SECTION("zero gate parameters halve the feature branch") {
    g.gate_weight().mutable_value().fill(0);
    g.gate_bias().mutable_value().fill(0);
    const auto feature = activation(conv2d(Var<double>(x), g.feature_weight(), g.feature_bias(), g.spec().geometry(), "f"),
                                    Activation::elu);
    const auto out = g(Var<double>(x));
    for (std::size_t i = 0; i < out.value().size(); ++i) CHECK(out.value()[i] == Approx(0.5 * feature.value()[i]));
  }
  SECTION("zero input with zero biases gives zero") {
    const auto out = g(Var<double>(Tensor<double>({1, 3, 8, 8})));
    for (double v : out.value().span()) CHECK(v == 0.0);
  }
  SECTION("parameter count covers both branches") {
    CHECK(g.parameter_count() == 2 * (4 * (3 * 9 + 1)));
    ParamList<double> params;
    g.collect(params);
    REQUIRE(params.size() == 4);
    CHECK(params[0].name == "g.fw");
    CHECK(params[3].name == "g.gb");
  }
}

TEST_CASE("invalid block configurations") {
  Rng rng(4);
  CHECK_THROWS_AS(GatedConv<double>("g", ConvSpec{3, 4, 4, 1, 1, Activation::elu}, rng), ConfigError);
  CHECK_THROWS_AS(GatedConv<double>("g", ConvSpec{3, 4, 3, 1, 0, Activation::elu}, rng), ConfigError);
  AttentionSpec bad;
  bad.patch_size = 2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("gradient checks") {
  Rng rng(5);

  SECTION("linear convolution") {
    Var<double> x(random_tensor({2, 3, 7, 7}, rng));
    Var<double> w(random_tensor({4, 3, 3, 3}, rng));
    Var<double> b(random_tensor({1, 4, 1, 1}, rng));
    const auto r = random_tensor({2, 4, 4, 4}, rng);
    const auto rep = grad_check("conv", {x, w, b}, [&] { return project(conv2d(x, w, b, {3, 2, 1}, "c"), r); }, 60, 9, 1e-7);
    CHECK(rep.passed());
  }
  SECTION("gated convolution") {
    GatedConv<double> g("g", ConvSpec{3, 4, 3, 1, 2, Activation::elu}, rng);
    g.feature_bias().mutable_value() = random_tensor({1, 4, 1, 1}, rng, -0.3, 0.3);
    g.gate_bias().mutable_value() = random_tensor({1, 4, 1, 1}, rng, -0.3, 0.3);
    Var<double> x(random_tensor({2, 3, 8, 8}, rng));
    const auto r = random_tensor({2, 4, 8, 8}, rng);
    const auto rep = grad_check("gated", {x, g.feature_weight(), g.feature_bias(), g.gate_weight(), g.gate_bias()},
                                [&] { return project(g(x), r); }, 80, 10, 1e-4);
    INFO("max relative error " << rep.max_rel_error);
    CHECK(rep.passed());
  }
  SECTION("spectral-normalized convolution") {
    SpectralNormConv<double> sn("d", ConvSpec{3, 4, 5, 2, 1, Activation::leaky}, rng);
    Var<double> x(random_tensor({1, 3, 8, 8}, rng));
    const auto r = random_tensor({1, 4, 4, 4}, rng);
    const auto rep = grad_check("sn", {x, sn.weight(), sn.bias()}, [&] { return project(sn(x, false), r); }, 80, 11, 1e-4);
    INFO("max relative error " << rep.max_rel_error);
    CHECK(rep.passed());
  }
  SECTION("contextual attention with separate inputs") {
    Var<double> fg(random_tensor({2, 3, 6, 6}, rng));
    Var<double> bg(random_tensor({2, 3, 6, 6}, rng));
    Tensor<double> mask(Shape{2, 1, 6, 6});
    for (int y = 1; y < 4; ++y)
      for (int x = 2; x < 5; ++x) mask.at(0, 0, y, x) = mask.at(1, 0, y + 1, x - 1) = 1;
    const auto r = random_tensor({2, 3, 6, 6}, rng);
    for (bool fuse : {false, true}) {
      AttentionSpec spec;
      spec.fuse_propagation = fuse;
      const auto rep =
          grad_check("attention", {fg, bg}, [&] { return project(contextual_attention(fg, bg, mask, spec), r); }, 120,
                     12, 1e-3);
      INFO("fuse " << fuse << " max relative error " << rep.max_rel_error);
      CHECK(rep.passed());
    }
  }
  SECTION("contextual attention on shared features with stride 2") {
    Var<double> f(random_tensor({1, 2, 8, 8}, rng));
    Tensor<double> mask(Shape{1, 1, 8, 8});
    for (int y = 2; y < 6; ++y)
      for (int x = 2; x < 6; ++x) mask.at(0, 0, y, x) = 1;
    const auto r = random_tensor({1, 2, 8, 8}, rng);
    AttentionSpec spec;
    spec.stride = 2;
    const auto rep =
        grad_check("attention", {f}, [&] { return project(contextual_attention(f, f, mask, spec), r); }, 100, 13, 1e-3);
    INFO("max relative error " << rep.max_rel_error);
    CHECK(rep.passed());
  }
  SECTION("resampling and plumbing ops") {
    Var<double> x(random_tensor({1, 2, 4, 4}, rng));
    Var<double> y(random_tensor({1, 2, 4, 4}, rng));
    Tensor<double> m = mask_from(4, 4, {{0, 0}, {1, 2}, {3, 3}});
    const auto r8 = random_tensor({1, 2, 8, 8}, rng);
    const auto r2 = random_tensor({1, 2, 2, 2}, rng);
    const auto r4 = random_tensor({1, 4, 4, 4}, rng);
    CHECK(grad_check("bilinear", {x}, [&] { return project(upsample_bilinear(x, 2), r8); }, 30, 1, 1e-7).passed());
    CHECK(grad_check("nearest", {x}, [&] { return project(upsample_nearest(x, 2), r8); }, 30, 2, 1e-7).passed());
    CHECK(grad_check("area", {x}, [&] { return project(downsample_area(x, 2), r2); }, 30, 3, 1e-7).passed());
    CHECK(grad_check("concat", {x, y}, [&] { return project(concat_channels<double>({x, y}), r4); }, 30, 4, 1e-7).passed());
    CHECK(grad_check("compose", {x, y}, [&] { return project(compose(x, y, m), random_tensor({1, 2, 4, 4}, rng)); }, 1, 5, 1)
              .probes == 1);
    const auto r = random_tensor({1, 2, 4, 4}, rng);
    CHECK(grad_check("compose", {x, y}, [&] { return project(compose(x, y, m), r); }, 30, 6, 1e-7).passed());
  }
}

TEST_CASE("attention weight examples") {
  AttentionSpec spec;
  spec.fuse_propagation = false;

  SECTION("a single known patch receives all the weight") {
    Rng rng(6);
    Var<double> f(random_tensor({1, 2, 5, 5}, rng));
    const auto mask = mask_from(5, 5, {{2, 2}});
    std::vector<RowMatrix<double>> weights;
    contextual_attention(f, f, mask, spec, &weights);
    REQUIRE(weights.size() == 1);
    const auto& a = weights[0];
    REQUIRE(a.rows() == 25);
    REQUIRE(a.cols() == 25);
    for (int p = 0; p < 25; ++p) {
      CHECK(a(p, 12) == Approx(1.0));
      CHECK(a.row(p).sum() == Approx(1.0));
    }
  }
  SECTION("two identical known patches split the weight evenly") {
    Var<double> f(Tensor<double>({1, 3, 7, 7}, 0.4));
    const auto mask = mask_from(7, 7, {{2, 2}, {4, 4}});
    std::vector<RowMatrix<double>> weights;
    contextual_attention(f, f, mask, spec, &weights);
    const auto& a = weights[0];
    const int p = 3 * 7 + 3;
    CHECK(a(p, 2 * 7 + 2) == Approx(0.5));
    CHECK(a(p, 4 * 7 + 4) == Approx(0.5));
  }
  SECTION("rows are distributions over known patches") {
    Rng rng(7);
    for (bool fuse : {false, true})
      for (int stride : {1, 2}) {
        AttentionSpec s;
        s.fuse_propagation = fuse;
        s.stride = stride;
        Var<float> f(random_tensor({2, 4, 8, 8}, rng).cast<float>());
        Tensor<float> mask(Shape{2, 1, 8, 8});
        for (auto& v : mask.span()) v = uniform01(rng) < 0.5 ? 1.f : 0.f;
        mask.at(0, 0, 0, 0) = mask.at(1, 0, 0, 0) = 0.f;
        std::vector<RowMatrix<float>> weights;
        contextual_attention(f, f, mask, s, &weights);
        for (int n = 0; n < 2; ++n) {
          const auto valid = background_validity(mask, n, stride);
          for (Eigen::Index p = 0; p < weights[n].rows(); ++p) {
            CHECK(weights[n].row(p).sum() == Approx(1.0f).margin(1e-5));
            for (Eigen::Index m = 0; m < weights[n].cols(); ++m) {
              CHECK(weights[n](p, m) >= 0.f);
              if (!valid[std::size_t(m)]) CHECK(weights[n](p, m) == 0.f);
            }
          }
        }
      }
  }
  SECTION("constant features reproduce themselves") {
    Var<double> f(Tensor<double>({1, 2, 6, 6}, -0.7));
    const auto mask = mask_from(6, 6, {{0, 0}, {1, 1}, {2, 2}});
    const auto out = contextual_attention(f, f, mask, AttentionSpec{});
    // zero padding makes border patches differ, but every patch is a copy of
    // constant values or zeros, so outputs stay within [-0.7, 0]
    for (double v : out.value().span()) {
      CHECK(v <= 1e-12);
      CHECK(v >= -0.7 - 1e-12);
    }
  }
}

TEST_CASE("attention without known background") {
  Rng rng(8);
  Var<double> f(random_tensor({2, 2, 4, 4}, rng), true);
  Tensor<double> mask(Shape{2, 1, 4, 4}, 1.0);
  mask.at(1, 0, 1, 1) = 0;
  CHECK_THROWS_AS(contextual_attention(f, f, mask, AttentionSpec{}), DegenerateInputError);

  const auto out = contextual_attention<double>(f, f, mask, AttentionSpec{}, nullptr, true);
  for (int i = 0; i < 2 * 16; ++i) CHECK(out.value().sample(0)[i] == 0.0);
  backward(mean(out));
  for (int i = 0; i < 2 * 16; ++i) CHECK(f.grad().sample(0)[i] == 0.0);
  CHECK_FALSE(has_known_background(mask, 0, 1));
  CHECK(has_known_background(mask, 1, 1));
}

TEST_CASE("spectral normalization") {
  Rng rng(9);

  SECTION("matches the largest singular value") {
    const auto w = random_tensor({16, 1, 4, 4}, rng);
    auto state = init_power_iteration<double>(16, 16, rng);
    const double sigma = power_iterate(w, state, 50);
    Eigen::Map<const Eigen::Matrix<double, 16, 16, Eigen::RowMajor>> W(w.data());
    const double truth = Eigen::JacobiSVD<Eigen::MatrixXd>(W).singularValues()(0);
    CHECK(std::abs(sigma - truth) / truth < 1e-3);
  }
  SECTION("unit spectral norm weights are unchanged") {
    Tensor<double> w(Shape{4, 1, 2, 2});
    for (int i = 0; i < 4; ++i) w[std::size_t(i) * 4 + std::size_t(i)] = (i % 2) ? -1.0 : 1.0;
    w[1] = 0.3;  // still sigma 1 after rescaling below
    Eigen::Map<Eigen::Matrix<double, 4, 4, Eigen::RowMajor>> W(w.data());
    W /= Eigen::JacobiSVD<Eigen::MatrixXd>(Eigen::MatrixXd(W)).singularValues()(0);
    auto state = init_power_iteration<double>(4, 4, rng);
    const auto out = spectral_normalize(Var<double>(w), state, 30).value();
    for (std::size_t i = 0; i < w.size(); ++i) CHECK(out[i] == Approx(w[i]).margin(1e-3));
  }
  SECTION("output is invariant to weight scale") {
    const auto w = random_tensor({6, 2, 3, 3}, rng);
    Tensor<double> w5 = w;
    for (auto& v : w5.span()) v *= 5;
    auto s1 = init_power_iteration<double>(6, 18, rng);
    auto s2 = s1;
    const auto a = spectral_normalize(Var<double>(w), s1, 40).value();
    const auto b = spectral_normalize(Var<double>(w5), s2, 40).value();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == Approx(b[i]).margin(1e-9));
  }
  SECTION("layer estimate converges during use") {
    SpectralNormConv<double> sn("d", ConvSpec{8, 8, 3, 1, 1, Activation::none}, rng);
    CHECK(sn.sigma_estimate() > 0);
    const Var<double> x(random_tensor({1, 8, 4, 4}, rng));
    for (int i = 0; i < 60; ++i) sn(x, true);
    const auto& w = sn.weight().value();
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W(w.data(), 8, 72);
    const double truth = Eigen::JacobiSVD<Eigen::MatrixXd>(Eigen::MatrixXd(W)).singularValues()(0);
    CHECK(sn.sigma_estimate() == Approx(truth).epsilon(1e-3));
    const double before = sn.sigma_estimate();
    sn(x, false);
    CHECK(sn.sigma_estimate() == before);
  }
}
