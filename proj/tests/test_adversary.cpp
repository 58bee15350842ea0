#include <catch_amalgamated.hpp>

#include <Eigen/SVD>

#include "pyragen/adversary.hpp"

using namespace pyragen;

namespace {

Var<float> random_image(int n, int size, Rng& rng) {
  Tensor<float> t({n, 3, size, size});
  for (auto& v : t.span()) v = float(uniform(rng, -1, 1));
  return Var<float>(t);
}

}  // namespace

TEST_CASE("adversary depth by top resolution") {
  CHECK(adversary_depth_for(64) == 4);
  CHECK(adversary_depth_for(128) == 5);
  CHECK(adversary_depth_for(512) == 7);
  CHECK(adversary_depth_for(4) == 1);
}

TEST_CASE("score grid shapes") {
  Rng rng(1);
  LevelAdversary<float> six("D", 4, 6, 1);
  const auto s = six(random_image(1, 64, rng), Tensor<float>({1, 1, 64, 64}));
  CHECK(s.shape() == Shape{1, 1, 1, 1});
  CHECK(six.score_shape({1, 3, 64, 64}) == Shape{1, 1, 1, 1});

  // same depth at every level of a {16, 32, 64} pyramid keeps grids in 1x1..4x4
  const int depth = adversary_depth_for(64);
  for (int size : {16, 32, 64}) {
    LevelAdversary<float> d("D", 4, depth, 2);
    const auto grid = d(random_image(2, size, rng), Tensor<float>({2, 1, size, size}));
    CHECK(grid.shape().n == 2);
    CHECK(grid.shape().h >= 1);
    CHECK(grid.shape().h <= 4);
    CHECK(grid.shape() == d.score_shape({2, 3, size, size}));
  }

  LevelAdversary<float> d1("D1", 4, depth, 3), d2("D2", 4, depth, 4);
  const auto x = random_image(1, 32, rng);
  const Tensor<float> m({1, 1, 32, 32});
  CHECK(d1(x, m).shape() == d2(x, m).shape());
}

TEST_CASE("adversary input validation") {
  Rng rng(2);
  LevelAdversary<float> d("D", 4, 3, 1);
  CHECK_THROWS_AS(d(random_image(1, 32, rng), Tensor<float>({1, 1, 16, 16})), ShapeError);
  CHECK_THROWS_AS(d(Var<float>(Tensor<float>({1, 4, 32, 32})), Tensor<float>({1, 1, 32, 32})), ShapeError);
  CHECK_THROWS_AS(d(random_image(1, 4, rng), Tensor<float>({1, 1, 4, 4})), ShapeError);
  CHECK_THROWS_AS(LevelAdversary<float>("D", 4, 0, 1), ConfigError);
}

TEST_CASE("frozen estimate makes scores deterministic") {
  Rng rng(3);
  LevelAdversary<float> d("D", 4, 3, 5);
  const auto x = random_image(2, 32, rng);
  const Tensor<float> m({2, 1, 32, 32});
  const auto a = d(x, m).value();
  CHECK(d(x, m).value() == a);
  d(x, m, true);
  d(x, m, true);
  CHECK_FALSE(d(x, m).value() == a);
}

TEST_CASE("adversaries share no parameters") {
  LevelAdversary<float> d0("D0", 4, 3, 1), d1("D1", 4, 3, 2);
  ParamList<float> p0, p1;
  d0.collect(p0);
  d1.collect(p1);
  REQUIRE(p0.size() == p1.size());
  for (std::size_t i = 0; i < p0.size(); ++i) {
    CHECK(p0[i].var.node() != p1[i].var.node());
    CHECK(p0[i].var.shape() == p1[i].var.shape());
  }
  CHECK(p0.front().name == "D0.conv0.w");
  CHECK(p0.back().name == "D0.score.b");
}

TEST_CASE("normalized weights have unit spectral norm after warm-up") {
  Rng rng(4);
  LevelAdversary<double> d("D", 4, 3, 9);
  Tensor<double> x({1, 3, 16, 16});
  for (auto& v : x.span()) v = uniform(rng, -1, 1);
  const Tensor<double> m({1, 1, 16, 16});
  for (int i = 0; i < 30; ++i) d(Var<double>(x), m, true);
  for (auto* layer : d.layers()) {
    const auto& w = layer->weight().value();
    const int rows = w.n(), cols = int(w.shape().sample());
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W(w.data(), rows, cols);
    const double sigma = Eigen::JacobiSVD<Eigen::MatrixXd>(Eigen::MatrixXd(W)).singularValues()(0);
    const double normalized = sigma / layer->sigma_estimate();
    CHECK(std::abs(normalized - 1.0) < 1e-2);
  }
}

TEST_CASE("adversary gradient check") {
  Rng rng(5);
  LevelAdversary<double> d("D", 3, 2, 4);
  Tensor<double> x({1, 3, 8, 8});
  for (auto& v : x.span()) v = uniform(rng, -1, 1);
  Tensor<double> m({1, 1, 8, 8});
  m.at(0, 0, 3, 3) = 1;
  Var<double> image(x);
  ParamList<double> params;
  d.collect(params);
  std::vector<Var<double>> vars{image};
  for (auto& p : params) vars.push_back(p.var);
  const auto rep = grad_check("adversary", vars, [&] { return mean(d(image, m)); }, 60, 6, 1e-4);
  INFO("max relative error " << rep.max_rel_error);
  CHECK(rep.passed());
}
