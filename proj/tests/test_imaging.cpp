#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "pyragen/imaging.hpp"

using namespace pyragen;
using Catch::Approx;

namespace {

std::filesystem::path temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / "pyragen_test_imaging";
  std::filesystem::create_directories(dir);
  return dir;
}

RasterImage ramp(int size) {
  RasterImage im(1, size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) im.at(0, y, x) = float(-1.0 + 2.0 * x / (size - 1));
  return im;
}

}  // namespace

TEST_CASE("byte range maps linearly onto [-1, 1]") {
  CHECK(byte_to_unit(255) == 1.0f);
  CHECK(byte_to_unit(0) == -1.0f);
  CHECK(unit_to_byte(1.0f) == 255);
  CHECK(unit_to_byte(-1.0f) == 0);
}

TEST_CASE("load_image resizes the shorter side and center-crops") {
  const auto path = temp_dir() / "wide.png";
  // 600x400 with a horizontally symmetric pattern
  cv::Mat m(400, 600, CV_8UC3);
  for (int y = 0; y < 400; ++y)
    for (int x = 0; x < 600; ++x) {
      const auto v = std::uint8_t(std::min(255.0, std::abs(x - 299.5) * 0.8));
      m.at<cv::Vec3b>(y, x) = cv::Vec3b(v, std::uint8_t(y % 256), 255);
    }
  REQUIRE(cv::imwrite(path.string(), m));

  const RasterImage im = load_image(path, 128);
  CHECK(im.channels == 3);
  CHECK(im.height == 128);
  CHECK(im.width == 128);
  // BGR on disk, RGB in memory: red channel is the constant 255
  CHECK(im.at(0, 64, 64) == 1.0f);
  // center crop keeps the symmetric pattern symmetric
  for (int x = 0; x < 64; ++x) CHECK(im.at(2, 40, x) == Approx(im.at(2, 40, 127 - x)).margin(2.0 / 255));
  for (float v : im.values) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("load_image errors") {
  const auto bogus = temp_dir() / "not_an_image.png";
  {
    std::ofstream f(bogus);
    f << "definitely not a png";
  }
  CHECK_THROWS_AS(load_image(bogus, 64), IoError);
  CHECK_THROWS_AS(load_image(temp_dir() / "missing.png", 64), IoError);
  CHECK_THROWS_AS(load_image(bogus, 100, 8), ConfigError);
}

TEST_CASE("image and mask PNG round trip") {
  const auto dir = temp_dir();
  RasterImage im(3, 8, 8);
  for (std::size_t i = 0; i < im.values.size(); ++i) im.values[i] = byte_to_unit(int(i * 7 % 256));
  save_image(dir / "rt.png", im);
  CHECK(load_image(dir / "rt.png", 8) == im);

  const HoleMask m = gen_center_mask(16, 0.25);
  save_mask(dir / "m.png", m);
  CHECK(load_mask(dir / "m.png") == m);
  cv::Mat raw = cv::imread((dir / "m.png").string(), cv::IMREAD_UNCHANGED);
  CHECK(raw.channels() == 1);
  CHECK(int(raw.at<std::uint8_t>(8, 8)) == 255);
  CHECK(int(raw.at<std::uint8_t>(0, 0)) == 0);
}

TEST_CASE("gen_center_mask examples") {
  const HoleMask quarter = gen_center_mask(128, 0.25);
  CHECK(mask_hole_ratio(quarter) == 0.25);
  CHECK(quarter.at(32, 32) == 1);
  CHECK(quarter.at(95, 95) == 1);
  CHECK(quarter.at(31, 32) == 0);
  CHECK(quarter.at(96, 96) == 0);

  // round(sqrt(0.55) * 64) = 47, offset (64 - 47) / 2 = 8
  const HoleMask m = gen_center_mask(64, 0.55);
  CHECK(mask_hole_ratio(m) == Approx(47.0 * 47.0 / (64.0 * 64.0)));
  CHECK(m.at(8, 8) == 1);
  CHECK(m.at(54, 54) == 1);
  CHECK(m.at(7, 8) == 0);
  CHECK(m.at(55, 55) == 0);

  for (int s : {32, 64, 128, 512}) CHECK(mask_hole_ratio(gen_center_mask(s, 0.9999)) >= 0.97);

  CHECK_THROWS_AS(gen_center_mask(64, 0.0), ArgumentError);
  CHECK_THROWS_AS(gen_center_mask(64, 1.0), ArgumentError);
  CHECK_THROWS_AS(gen_center_mask(64, -0.2), ArgumentError);
}

TEST_CASE("gen_center_mask ratio error is bounded by 2/size") {
  for (int size = 32; size <= 512; size += 8)
    for (int r = 15; r <= 55; ++r) {
      const double ratio = r / 100.0;
      INFO("size " << size << " ratio " << ratio);
      CHECK(std::abs(mask_hole_ratio(gen_center_mask(size, ratio)) - ratio) <= 2.0 / size);
    }
}

TEST_CASE("mask_hole_ratio examples") {
  CHECK(mask_hole_ratio(HoleMask(16, 16, 1)) == 1.0);
  CHECK(mask_hole_ratio(HoleMask(16, 16, 0)) == 0.0);
  HoleMask m(128, 128);
  for (int y = 10; y < 74; ++y)
    for (int x = 40; x < 104; ++x) m.at(y, x) = 1;
  CHECK(mask_hole_ratio(m) == 0.25);
}

TEST_CASE("gen_freeform_mask") {
  SECTION("zero strokes give an empty mask") {
    BrushConfig none;
    none.min_strokes = none.max_strokes = 0;
    CHECK(mask_hole_ratio(gen_freeform_mask(64, none, 7)) == 0.0);
  }
  SECTION("deterministic per seed") {
    const BrushConfig cfg;
    CHECK(gen_freeform_mask(128, cfg, 42) == gen_freeform_mask(128, cfg, 42));
    CHECK_FALSE(gen_freeform_mask(128, cfg, 42) == gen_freeform_mask(128, cfg, 43));
  }
  SECTION("strictly binary") {
    const auto m = gen_freeform_mask(96, BrushConfig{}, 3);
    for (auto v : m.values) CHECK((v == 0 || v == 1));
  }
  SECTION("default brush at 128 pixels over 1000 seeds") {
    // measured band: min 0.0022, median 0.108, max 0.336; 202 seeds fall under 0.05
    int inside = 0;
    double total = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      const double r = mask_hole_ratio(gen_freeform_mask(128, BrushConfig{}, seed));
      CHECK(r > 0.0);
      CHECK(r <= 0.50);
      inside += r >= 0.05;
      total += r;
    }
    CHECK(inside >= 750);
    CHECK(total / 1000 >= 0.05);
  }
  SECTION("invalid config") {
    BrushConfig bad;
    bad.min_vertices = 5;
    bad.max_vertices = 2;
    CHECK_THROWS_AS(gen_freeform_mask(64, bad, 1), ArgumentError);
  }
}

TEST_CASE("downsample and upsample") {
  RasterImage constant(3, 32, 32, 0.37f);
  for (int f : {2, 4, 8}) {
    for (float v : downsample(constant, f).values) CHECK(v == Approx(0.37f));
    for (float v : upsample(constant, f).values) CHECK(v == Approx(0.37f));
  }

  RasterImage block(1, 2, 2);
  block.values = {-1.f, -1.f, 1.f, 1.f};
  CHECK(downsample(block, 2).values[0] == 0.0f);

  // a 64-pixel ramp has slope 2/63; border clamping costs at most half a
  // coarse pixel of it: 1/63
  const RasterImage r = ramp(64);
  const RasterImage back = upsample(downsample(r, 2), 2);
  float worst = 0;
  for (std::size_t i = 0; i < r.values.size(); ++i) worst = std::max(worst, std::abs(back.values[i] - r.values[i]));
  CHECK(worst < 0.05f);
  CHECK(worst == Approx(1.0 / 63).margin(1e-6));

  CHECK_THROWS_AS(downsample(constant, 3), ArgumentError);
  CHECK_THROWS_AS(upsample(constant, 3), ArgumentError);
}

TEST_CASE("build_pyramid resolutions") {
  const auto check_sizes = [](int top, int levels, std::vector<int> expected) {
    const RasterImage im(3, top, top);
    const auto p = build_pyramid(im, HoleMask(top, top), levels);
    REQUIRE(p.levels.size() == expected.size());
    for (std::size_t n = 0; n < expected.size(); ++n) {
      CHECK(p.levels[n].image.height == expected[n]);
      CHECK(p.levels[n].mask.width == expected[n]);
    }
  };
  check_sizes(512, 3, {128, 256, 512});
  check_sizes(128, 3, {32, 64, 128});
  CHECK_THROWS_AS(build_pyramid(RasterImage(3, 100, 100), HoleMask(100, 100), 4), ConfigError);
  CHECK_THROWS_AS(build_pyramid(RasterImage(3, 64, 64), HoleMask(32, 32), 2), ShapeError);
}

TEST_CASE("build_pyramid keeps an aligned center hole centered") {
  const auto p = build_pyramid(RasterImage(3, 128, 128), gen_center_mask(128, 0.25), 2);
  const HoleMask& low = p.levels[0].mask;
  CHECK(low.height == 64);
  CHECK(mask_hole_ratio(low) == 0.25);
  CHECK(mask_hole_ratio(p.levels[1].mask) == 0.25);
  CHECK(low.at(16, 16) == 1);
  CHECK(low.at(47, 47) == 1);
  CHECK(low.at(15, 16) == 0);
  CHECK(low.at(48, 47) == 0);
}

TEST_CASE("mask pooling never turns a hole pixel into a known one") {
  HoleMask m(8, 8);
  m.at(3, 5) = 1;
  const HoleMask d = downsample_mask(m, 4);
  CHECK(d.at(0, 1) == 1);
  CHECK(mask_hole_ratio(d) == 0.25);
}

TEST_CASE("pyramid invariants over random configs") {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const int levels = uniform_int(rng, 2, 4);
    const int base = 4 * uniform_int(rng, 1, 8);
    const int top = base << (levels - 1);
    RasterImage im(3, top, top);
    for (auto& v : im.values) v = float(uniform(rng, -1, 1));
    HoleMask mask = mask_union(gen_center_mask(top, uniform(rng, 0.05, 0.6)),
                               gen_freeform_mask(top, BrushConfig{}, rng()));
    const auto p = build_pyramid(im, mask, levels);
    for (int n = 0; n < levels; ++n) {
      const auto& lv = p.levels[std::size_t(n)];
      CHECK(lv.image.height == base << n);
      CHECK(lv.mask.height == base << n);
      for (auto v : lv.mask.values) CHECK((v == 0 || v == 1));
      for (float v : lv.image.values) {
        CHECK(v >= -1.f);
        CHECK(v <= 1.f);
      }
      // coarser holes cover at least the finer ones
      if (n > 0) CHECK(mask_hole_ratio(p.levels[std::size_t(n - 1)].mask) >= mask_hole_ratio(lv.mask));
    }
    // same inputs, same pyramid
    const auto again = build_pyramid(im, mask, levels);
    for (int n = 0; n < levels; ++n) CHECK(again.levels[std::size_t(n)].image == p.levels[std::size_t(n)].image);
  }
}

TEST_CASE("compose selects per pixel") {
  RasterImage gen(3, 8, 8, 0.5f), orig(3, 8, 8, -0.25f);
  HoleMask checker(8, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) checker.at(y, x) = (x + y) % 2;
  const RasterImage out = compose(gen, orig, checker);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const float m = checker.at(y, x);
        CHECK(out.at(c, y, x) == m * gen.at(c, y, x) + (1 - m) * orig.at(c, y, x));
      }
  CHECK(compose(gen, orig, HoleMask(8, 8, 0)) == orig);
  CHECK(compose(gen, orig, HoleMask(8, 8, 1)) == gen);
  CHECK_THROWS_AS(compose(gen, RasterImage(3, 4, 4), checker), ShapeError);
}
