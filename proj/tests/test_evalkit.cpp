#include <catch_amalgamated.hpp>

#include "pyragen/evalkit.hpp"

using namespace pyragen;
using Catch::Approx;

namespace {

RasterImage random_image(int size, Rng& rng) {
  RasterImage im(3, size, size);
  for (auto& v : im.values) v = float(uniform(rng, -1, 1));
  return im;
}

// Direct per-window SSIM: 2-D Gaussian weights, two-pass moments.
double naive_ssim(const RasterImage& a, const RasterImage& b) {
  const int k = 11;
  const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  std::vector<double> w(k * k);
  double wsum = 0;
  for (int dy = 0; dy < k; ++dy)
    for (int dx = 0; dx < k; ++dx)
      wsum += w[std::size_t(dy * k + dx)] = std::exp(-((dy - 5) * (dy - 5) + (dx - 5) * (dx - 5)) / (2 * sigma * sigma));
  for (auto& v : w) v /= wsum;
  double total = 0;
  for (int c = 0; c < 3; ++c) {
    double acc = 0;
    int windows = 0;
    for (int y0 = 0; y0 + k <= a.height; ++y0)
      for (int x0 = 0; x0 + k <= a.width; ++x0) {
        double mx = 0, my = 0;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx) {
            const double wt = w[std::size_t(dy * k + dx)];
            mx += wt * (a.at(c, y0 + dy, x0 + dx) * 0.5 + 0.5);
            my += wt * (b.at(c, y0 + dy, x0 + dx) * 0.5 + 0.5);
          }
        double vx = 0, vy = 0, cov = 0;
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx) {
            const double wt = w[std::size_t(dy * k + dx)];
            const double ex = a.at(c, y0 + dy, x0 + dx) * 0.5 + 0.5 - mx;
            const double ey = b.at(c, y0 + dy, x0 + dx) * 0.5 + 0.5 - my;
            vx += wt * ex * ex;
            vy += wt * ey * ey;
            cov += wt * ex * ey;
          }
        acc += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++windows;
      }
    total += acc / windows;
  }
  return total / 3;
}

InpaintModel tiny_model(int width = 4) {
  TrainConfig c;
  c.levels = 3;
  c.top_resolution = 16;
  c.base_width = width;
  c.adversary_width = 4;
  c.steps = 10;
  c.seed = 3;
  Trainer t(c);
  return model_of(t);
}

}  // namespace

TEST_CASE("l1 metric") {
  Rng rng(1);
  const auto a = random_image(16, rng), b = random_image(16, rng);
  CHECK(l1_metric(a, a) == 0.0);
  RasterImage shifted = a;
  for (auto& v : shifted.values) v = std::clamp(v, -1.f, 0.8f);
  RasterImage low(3, 4, 4, 0.f), high(3, 4, 4, 0.2f);
  CHECK(l1_metric(low, high) == Approx(0.1).margin(1e-7));
  double brute = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) brute += std::abs((a.values[i] + 1) / 2.0 - (b.values[i] + 1) / 2.0);
  CHECK(l1_metric(a, b) == Approx(brute / double(a.values.size())).margin(1e-7));
  CHECK_THROWS_AS(l1_metric(a, random_image(8, rng)), ShapeError);
}

TEST_CASE("psnr") {
  RasterImage a(3, 4, 4, 0.f), b(3, 4, 4, 0.2f);  // unit-scale gap 0.1 -> MSE 0.01
  CHECK(psnr(a, b) == Approx(20.0).margin(1e-6));
  RasterImage black(3, 4, 4, -1.f), white(3, 4, 4, 1.f);
  CHECK(psnr(black, white) == Approx(0.0).margin(1e-12));
  CHECK(psnr(a, a) == kPsnrCap);
  CHECK(psnr_from_mse(0.0) == kPsnrCap);
}

TEST_CASE("ssim basics") {
  Rng rng(2);
  const auto x = random_image(32, rng), y = random_image(32, rng);
  CHECK(ssim(x, x) == Approx(1.0).margin(1e-12));
  CHECK(std::abs(ssim(x, y) - ssim(y, x)) < 1e-9);
  CHECK(ssim(x, y) <= 1.0);
  CHECK_THROWS_AS(ssim(random_image(10, rng), random_image(10, rng)), ArgumentError);
  CHECK_THROWS_AS(ssim(x, random_image(16, rng)), ShapeError);
}

TEST_CASE("ssim agrees with a naive per-window implementation") {
  Rng rng(3);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int size = std::array{16, 32, 64}[std::size_t(trial % 3)];
    const auto x = random_image(size, rng);
    RasterImage y = x;
    const double noise = uniform(rng, 0.0, 1.0);
    for (auto& v : y.values) v = float(std::clamp(v + noise * uniform(rng, -1, 1), -1.0, 1.0));
    worst = std::max(worst, std::abs(ssim(x, y) - naive_ssim(x, y)));
  }
  INFO("worst deviation " << worst);
  CHECK(worst < 1e-6);
}

TEST_CASE("hole-only l1") {
  RasterImage a(3, 2, 2, 0.f), b(3, 2, 2, 0.f);
  HoleMask m(2, 2);
  CHECK(hole_l1_metric(a, b, m) == 0.0);
  m.at(1, 1) = 1;
  b.at(0, 1, 1) = 0.6f;
  CHECK(hole_l1_metric(a, b, m) == Approx(0.1));
}

TEST_CASE("ratio specs") {
  CHECK(parse_ratios(".15:.55:.10") == default_hole_ratios());
  CHECK(parse_ratios("0.25:0.25:0.1") == std::vector<double>{0.25});
  CHECK_THROWS_AS(parse_ratios("0.1:0.5"), ArgumentError);
  CHECK_THROWS_AS(parse_ratios("0.5:0.1:0.1"), ArgumentError);
  CHECK_THROWS_AS(parse_ratios("0:0.5:0.1"), ArgumentError);
  CHECK_THROWS_AS(parse_ratios("a:b:c"), ArgumentError);
}

TEST_CASE("inpainting keeps the known region") {
  const auto model = tiny_model();
  const auto image = synthetic_texture(16, 4);
  CHECK(inpaint(model, image, HoleMask(16, 16)) == image);
  const HoleMask full(16, 16, 1);
  const auto all = inpaint(model, image, full);
  CHECK_FALSE(all == image);
  const HoleMask center = gen_center_mask(16, 0.25);
  const auto out = inpaint(model, image, center);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        if (!center.at(y, x)) CHECK(out.at(c, y, x) == image.at(c, y, x));
  CHECK_THROWS_AS(inpaint(model, image, HoleMask(8, 8)), ConfigError);
  CHECK_THROWS_AS(inpaint(model, synthetic_texture(20, 1), HoleMask(20, 20)), ConfigError);

  // running at half resolution and upsampling keeps the full size
  const auto big = synthetic_texture(32, 4);
  const auto half = inpaint_all(model, {big}, {gen_center_mask(32, 0.25)}, 2);
  CHECK(half[0].height == 32);
}

TEST_CASE("hole sweep") {
  const auto model = tiny_model();
  const auto data = synthetic_corpus(3, 16, 9);
  const auto rows = hole_sweep(model, data, default_hole_ratios());
  REQUIRE(rows.size() == 5);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(*rows[i].hole_ratio == default_hole_ratios()[i]);
    CHECK(rows[i].resolution == 16);
    CHECK(rows[i].l1 >= 0);
    CHECK(rows[i].ssim <= 1);
    CHECK(rows[i].psnr >= 0);
  }
  CHECK(hole_sweep(model, data, {0.25}) == hole_sweep(model, data, {0.25}));
  CHECK_THROWS_AS(hole_sweep(model, synthetic_corpus(2, 32, 1), {0.25}), ConfigError);
  CHECK_THROWS_AS(hole_sweep(model, data, {1.2}), ArgumentError);
  CHECK(evaluate(model, data, "center", 0.25).mask_mode == "center");
  CHECK_FALSE(evaluate(model, data, "freeform", 0, 1).hole_ratio.has_value());
  CHECK_THROWS_AS(evaluate(model, data, "ring", 0.25), ArgumentError);
}

TEST_CASE("resolution sweep") {
  const auto model = tiny_model();
  auto source = [](int size) { return synthetic_corpus(2, size, 5); };
  const auto rows = resolution_sweep(model, source, {16, 32, 64});
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].resolution == 16);
  CHECK(rows[2].resolution == 64);
  CHECK(*rows[1].hole_ratio == 0.25);
  CHECK(resolution_sweep(model, source, {32}) == resolution_sweep(model, source, {32}));
  CHECK_THROWS_AS(resolution_sweep(model, source, {24}), ConfigError);
}

TEST_CASE("ablation variants") {
  TrainConfig base;
  base.top_resolution = 64;
  CHECK(plan_variant("layers_3", base).config.fields() == base.fields());
  const auto low = plan_variant("layers_2_low", base);
  CHECK(low.config.levels == 2);
  CHECK(low.config.top_resolution == 32);
  CHECK(low.native_factor == 2);
  CHECK(low.config.weights.lambdas == std::vector<double>{10, 1});
  const auto high = plan_variant("layers_2_high", base);
  CHECK(high.config.resolutions() == std::vector<int>{32, 64});
  CHECK(plan_variant("std_dilation", base).config.dilation == "standard");
  CHECK(plan_variant("fusion_feature_coarse", base).config.fusion == FusionMode::feature_coarse);
  CHECK_THROWS_AS(plan_variant("layers_4", base), ArgumentError);

  CHECK(find_variant("layers_3").reference->ssim == 0.840);
  CHECK(find_variant("layers_3").reference->psnr == 26.74);
  CHECK(find_variant("layers_3").reference->l1 == 0.034);
  CHECK(find_variant("std_dilation").reference->ssim == 0.829);
  CHECK(find_variant("std_dilation").reference->psnr == 26.38);
  CHECK_FALSE(find_variant("fusion_feature_refine").reference.has_value());
}

TEST_CASE("ablation run at toy scale") {
  TrainConfig base;
  base.top_resolution = 32;
  base.base_width = 4;
  base.adversary_width = 4;
  base.batch_size = 1;
  base.steps = 2;
  const auto train = synthetic_corpus(4, 32, 1), eval = synthetic_corpus(2, 32, 2);
  std::vector<AblationResult> results;
  for (const char* v : {"layers_3", "layers_2_low", "layers_2_high"}) results.push_back(run_ablation(v, base, train, eval));
  for (const auto& r : results) {
    CHECK(r.row.resolution == 32);
    CHECK(r.row.mask_mode == "center_sweep");
  }
  CHECK(run_ablation("layers_2_low", base, train, eval).row == results[1].row);
  const std::string table = ablation_table(results);
  CHECK(table.find("layers_2_low") != std::string::npos);
  CHECK(table.find("0.809") != std::string::npos);
}

TEST_CASE("reports") {
  MetricRow r{"m", "center", 0.25, 64, 0.1, 20, 0.9, 0.3};
  MetricRow f{"m", "freeform", std::nullopt, 64, 0.1, 20, 0.9, 0.3};
  const auto csv = metric_csv({r, f});
  CHECK(csv == "variant,mask_mode,hole_ratio,resolution,l1,psnr,ssim,hole_l1\n"
               "m,center,0.25,64,0.1,20,0.9,0.3\n"
               "m,freeform,n/a,64,0.1,20,0.9,0.3\n");
  const auto j = summary_json({r});
  CHECK(j["rows"][0]["ssim"] == 0.9);

  const auto images = synthetic_corpus(3, 16, 1).images;
  std::vector<HoleMask> masks(3, gen_center_mask(16, 0.25));
  const auto sheet = contact_sheet(images, masks, images, 2);
  CHECK(sheet.width == 48);
  CHECK(sheet.height == 32);
}
