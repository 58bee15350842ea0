#pragma once

// Image and hole-mask representation, PNG I/O, mask generators and the
// multi-resolution pyramid that feeds every sub-generator.

#include <filesystem>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pyragen/ops.hpp"

namespace pyragen {

// Planar CHW image with values in [-1, 1].
struct RasterImage {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<float> values;

  RasterImage() = default;
  RasterImage(int c, int h, int w, float fill = 0.f)
      : channels(c), height(h), width(w), values(std::size_t(c) * h * w, fill) {}

  float& at(int c, int y, int x) { return values[(std::size_t(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return values[(std::size_t(c) * height + y) * width + x]; }
  bool operator==(const RasterImage&) const = default;
};

// 1 marks a corrupted pixel, 0 a known one.
struct HoleMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;

  HoleMask() = default;
  HoleMask(int h, int w, std::uint8_t fill = 0) : height(h), width(w), values(std::size_t(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return values[std::size_t(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return values[std::size_t(y) * width + x]; }
  bool operator==(const HoleMask&) const = default;
};

struct PyramidLevel {
  RasterImage image;
  HoleMask mask;
};

// Coarsest level first; each level doubles the previous one.
struct PyramidSample {
  std::vector<PyramidLevel> levels;
  static constexpr int scale_factor = 2;

  const PyramidLevel& top() const { return levels.back(); }
};

struct BrushConfig {
  int min_strokes = 1;
  int max_strokes = 4;
  int min_vertices = 4;
  int max_vertices = 12;
  double angle_spread = 40.0 * 3.14159265358979323846 / 180.0;
  // as fractions of the mask size
  double min_segment = 1.0 / 16;
  double max_segment = 1.0 / 4;
  double min_width = 1.0 / 32;
  double max_width = 1.0 / 8;

  void validate() const {
    if (min_strokes < 0 || max_strokes < min_strokes) throw ArgumentError("brush: invalid stroke range");
    if (min_vertices < 1 || max_vertices < min_vertices) throw ArgumentError("brush: invalid vertex range");
    if (angle_spread < 0) throw ArgumentError("brush: negative angle spread");
    if (!(min_segment > 0) || max_segment < min_segment) throw ArgumentError("brush: invalid segment range");
    if (!(min_width > 0) || max_width < min_width) throw ArgumentError("brush: invalid width range");
  }
};

// ---- conversions ---------------------------------------------------------

template <class T>
Tensor<T> to_tensor(const std::vector<const RasterImage*>& images) {
  if (images.empty()) throw ArgumentError("to_tensor: empty batch");
  const auto& f = *images.front();
  Tensor<T> out(Shape{int(images.size()), f.channels, f.height, f.width});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& im = *images[n];
    if (im.channels != f.channels || im.height != f.height || im.width != f.width)
      throw ShapeError("to_tensor: images in a batch must share a shape");
    std::transform(im.values.begin(), im.values.end(), out.sample(int(n)), [](float v) { return T(v); });
  }
  return out;
}

template <class T>
Tensor<T> to_tensor(const RasterImage& image) {
  return to_tensor<T>(std::vector<const RasterImage*>{&image});
}

template <class T>
Tensor<T> mask_tensor(const std::vector<const HoleMask*>& masks) {
  if (masks.empty()) throw ArgumentError("mask_tensor: empty batch");
  const auto& f = *masks.front();
  Tensor<T> out(Shape{int(masks.size()), 1, f.height, f.width});
  for (std::size_t n = 0; n < masks.size(); ++n) {
    const auto& m = *masks[n];
    if (m.height != f.height || m.width != f.width) throw ShapeError("mask_tensor: masks in a batch must share a shape");
    std::transform(m.values.begin(), m.values.end(), out.sample(int(n)), [](std::uint8_t v) { return T(v); });
  }
  return out;
}

template <class T>
Tensor<T> mask_tensor(const HoleMask& mask) {
  return mask_tensor<T>(std::vector<const HoleMask*>{&mask});
}

template <class T>
RasterImage from_tensor(const Tensor<T>& t, int sample = 0) {
  RasterImage out(t.c(), t.h(), t.w());
  std::transform(t.sample(sample), t.sample(sample) + t.shape().sample(), out.values.begin(),
                 [](T v) { return float(v); });
  return out;
}

// ---- I/O -----------------------------------------------------------------

inline float byte_to_unit(int v) { return float(v) / 127.5f - 1.f; }
inline std::uint8_t unit_to_byte(float v) {
  return std::uint8_t(std::lround(std::clamp((double(v) + 1.0) * 127.5, 0.0, 255.0)));
}

inline RasterImage from_mat(const cv::Mat& rgb) {
  RasterImage out(rgb.channels(), rgb.rows, rgb.cols);
  for (int y = 0; y < rgb.rows; ++y) {
    const auto* row = rgb.ptr<std::uint8_t>(y);
    for (int x = 0; x < rgb.cols; ++x)
      for (int c = 0; c < out.channels; ++c) out.at(c, y, x) = byte_to_unit(row[x * out.channels + c]);
  }
  return out;
}

inline cv::Mat to_mat(const RasterImage& image) {
  cv::Mat out(image.height, image.width, CV_8UC(image.channels));
  for (int y = 0; y < image.height; ++y) {
    auto* row = out.ptr<std::uint8_t>(y);
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < image.channels; ++c) row[x * image.channels + c] = unit_to_byte(image.at(c, y, x));
  }
  return out;
}

// Resize so the shorter side equals target_size, then take the exact center
// crop. divisor is the pyramid factor 2^(levels-1) the size must respect.
inline RasterImage load_image(const std::filesystem::path& path, int target_size, int divisor = 1) {
  if (target_size <= 0 || divisor <= 0 || target_size % divisor != 0)
    throw ConfigError("load_image: target size " + std::to_string(target_size) + " is not divisible by " +
                      std::to_string(divisor));
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot decode image: " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  const int shorter = std::min(rgb.rows, rgb.cols);
  if (shorter != target_size) {
    const double s = double(target_size) / shorter;
    const int nw = std::max(target_size, int(std::lround(rgb.cols * s)));
    const int nh = std::max(target_size, int(std::lround(rgb.rows * s)));
    cv::Mat resized;
    cv::resize(rgb, resized, cv::Size(nw, nh), 0, 0, s < 1 ? cv::INTER_AREA : cv::INTER_LINEAR);
    rgb = resized;
  }
  const int x0 = (rgb.cols - target_size) / 2, y0 = (rgb.rows - target_size) / 2;
  return from_mat(rgb(cv::Rect(x0, y0, target_size, target_size)).clone());
}

inline void save_image(const std::filesystem::path& path, const RasterImage& image) {
  cv::Mat m = to_mat(image);
  if (image.channels == 3) cv::cvtColor(m, m, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), m)) throw IoError("cannot write image: " + path.string());
}

inline HoleMask load_mask(const std::filesystem::path& path) {
  cv::Mat g = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (g.empty()) throw IoError("cannot decode mask: " + path.string());
  HoleMask out(g.rows, g.cols);
  for (int y = 0; y < g.rows; ++y)
    for (int x = 0; x < g.cols; ++x) out.at(y, x) = g.at<std::uint8_t>(y, x) > 127 ? 1 : 0;
  return out;
}

inline void save_mask(const std::filesystem::path& path, const HoleMask& mask) {
  cv::Mat g(mask.height, mask.width, CV_8UC1);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) g.at<std::uint8_t>(y, x) = mask.at(y, x) ? 255 : 0;
  if (!cv::imwrite(path.string(), g)) throw IoError("cannot write mask: " + path.string());
}

// ---- masks ---------------------------------------------------------------

inline double mask_hole_ratio(const HoleMask& mask) {
  if (mask.values.empty()) return 0.0;
  std::size_t holes = 0;
  for (auto v : mask.values) holes += v != 0;
  return double(holes) / double(mask.values.size());
}

inline HoleMask mask_union(const HoleMask& a, const HoleMask& b) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("mask_union: size mismatch");
  HoleMask out = a;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = (a.values[i] | b.values[i]) ? 1 : 0;
  return out;
}

inline constexpr double kMaxCenterRatio = 0.99;

// Centered square of side round(sqrt(ratio) * size).
inline HoleMask gen_center_mask(int size, double area_ratio) {
  if (!(area_ratio > 0.0 && area_ratio < 1.0))
    throw ArgumentError("gen_center_mask: area ratio must lie in (0, 1), got " + std::to_string(area_ratio));
  if (size <= 0) throw ArgumentError("gen_center_mask: size must be positive");
  const double ratio = std::min(area_ratio, kMaxCenterRatio);
  const int side = std::clamp(int(std::lround(std::sqrt(ratio) * size)), 0, size);
  const int offset = (size - side) / 2;
  HoleMask out(size, size);
  for (int y = offset; y < offset + side; ++y)
    for (int x = offset; x < offset + side; ++x) out.at(y, x) = 1;
  return out;
}

namespace detail {

// Fills every pixel whose center lies within radius of segment ab.
inline void stamp_segment(HoleMask& m, double ax, double ay, double bx, double by, double radius) {
  const int x0 = std::max(0, int(std::floor(std::min(ax, bx) - radius)));
  const int x1 = std::min(m.width - 1, int(std::ceil(std::max(ax, bx) + radius)));
  const int y0 = std::max(0, int(std::floor(std::min(ay, by) - radius)));
  const int y1 = std::min(m.height - 1, int(std::ceil(std::max(ay, by) + radius)));
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  const double r2 = radius * radius;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double ex = ax + t * dx - px, ey = ay + t * dy - py;
      if (ex * ex + ey * ey <= r2) m.at(y, x) = 1;
    }
}

}  // namespace detail

// Union of thick polylines from bounded-turn random walks with round tips.
inline HoleMask gen_freeform_mask(int size, const BrushConfig& config, std::uint64_t seed) {
  config.validate();
  if (size <= 0) throw ArgumentError("gen_freeform_mask: size must be positive");
  constexpr double two_pi = 2.0 * 3.14159265358979323846;
  Rng rng(seed);
  HoleMask out(size, size);
  const int strokes = uniform_int(rng, config.min_strokes, config.max_strokes);
  for (int s = 0; s < strokes; ++s) {
    const int vertices = uniform_int(rng, config.min_vertices, config.max_vertices);
    const double width = std::max(1.0, uniform(rng, config.min_width * size, config.max_width * size));
    double x = uniform(rng, 0, size), y = uniform(rng, 0, size);
    double heading = uniform(rng, 0, two_pi);
    detail::stamp_segment(out, x, y, x, y, width / 2);
    for (int v = 1; v < vertices; ++v) {
      heading += uniform(rng, -config.angle_spread, config.angle_spread);
      const double len = uniform(rng, config.min_segment * size, config.max_segment * size);
      const double nx = std::clamp(x + len * std::cos(heading), 0.0, double(size));
      const double ny = std::clamp(y + len * std::sin(heading), 0.0, double(size));
      detail::stamp_segment(out, x, y, nx, ny, width / 2);
      x = nx;
      y = ny;
    }
  }
  return out;
}

// ---- resampling ----------------------------------------------------------

inline RasterImage downsample(const RasterImage& image, int factor) {
  NoGradGuard guard;
  return from_tensor(downsample_area(Var<float>(to_tensor<float>(image)), factor).value());
}

inline RasterImage upsample(const RasterImage& image, int factor) {
  NoGradGuard guard;
  Var<float> up = upsample_bilinear(Var<float>(to_tensor<float>(image)), factor);
  auto out = from_tensor(up.value());
  for (auto& v : out.values) v = std::clamp(v, -1.f, 1.f);
  return out;
}

inline HoleMask downsample_mask(const HoleMask& mask, int factor) {
  if (!is_power_of_two(factor)) throw ArgumentError("downsample_mask: factor must be a power of 2");
  if (mask.height % factor || mask.width % factor) throw ConfigError("downsample_mask: size not divisible");
  HoleMask out(mask.height / factor, mask.width / factor);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(y, x)) out.at(y / factor, x / factor) = 1;
  return out;
}

// Level n has size top / 2^(levels-1-n). Images are area-averaged; masks are
// max-pooled so that a partially corrupted block stays corrupted.
inline PyramidSample build_pyramid(const RasterImage& image, const HoleMask& mask, int levels) {
  if (levels < 1) throw ConfigError("build_pyramid: need at least one level");
  if (image.height != mask.height || image.width != mask.width)
    throw ShapeError("build_pyramid: image and mask sizes differ");
  const int factor = 1 << (levels - 1);
  if (image.height % factor || image.width % factor)
    throw ConfigError("build_pyramid: size " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                      " not divisible by " + std::to_string(factor));
  PyramidSample out;
  out.levels.resize(std::size_t(levels));
  out.levels.back() = {image, mask};
  for (int n = levels - 2; n >= 0; --n) {
    const auto& up = out.levels[std::size_t(n + 1)];
    out.levels[std::size_t(n)] = {downsample(up.image, 2), downsample_mask(up.mask, 2)};
  }
  return out;
}

// Holes zeroed (value 0 in [-1,1] space), returned separately from the mask.
inline RasterImage zero_holes(const RasterImage& image, const HoleMask& mask) {
  RasterImage out = image;
  for (int c = 0; c < image.channels; ++c)
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x)
        if (mask.at(y, x)) out.at(c, y, x) = 0.f;
  return out;
}

inline RasterImage compose(const RasterImage& generated, const RasterImage& original, const HoleMask& mask) {
  if (generated.channels != original.channels || generated.height != original.height ||
      generated.width != original.width || mask.height != original.height || mask.width != original.width)
    throw ShapeError("compose: size mismatch");
  RasterImage out = original;
  for (int c = 0; c < out.channels; ++c)
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x)
        if (mask.at(y, x)) out.at(c, y, x) = generated.at(c, y, x);
  return out;
}

// Side-by-side strip of equally sized images (contact sheets).
inline RasterImage hconcat(const std::vector<RasterImage>& parts) {
  if (parts.empty()) throw ArgumentError("hconcat: nothing to join");
  const int h = parts[0].height, c = parts[0].channels;
  int w = 0;
  for (const auto& p : parts) {
    if (p.height != h || p.channels != c) throw ShapeError("hconcat: mismatched parts");
    w += p.width;
  }
  RasterImage out(c, h, w);
  int x0 = 0;
  for (const auto& p : parts) {
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < p.width; ++x) out.at(ch, y, x0 + x) = p.at(ch, y, x);
    x0 += p.width;
  }
  return out;
}

inline RasterImage vconcat(const std::vector<RasterImage>& rows) {
  if (rows.empty()) throw ArgumentError("vconcat: nothing to join");
  const int w = rows[0].width, c = rows[0].channels;
  int h = 0;
  for (const auto& r : rows) {
    if (r.width != w || r.channels != c) throw ShapeError("vconcat: mismatched rows");
    h += r.height;
  }
  RasterImage out(c, h, w);
  std::size_t offset = 0;
  for (int ch = 0; ch < c; ++ch)
    for (const auto& r : rows) {
      const auto count = std::size_t(r.height) * w;
      std::copy_n(r.values.begin() + std::ptrdiff_t(std::size_t(ch) * count), count,
                  out.values.begin() + std::ptrdiff_t(offset));
      offset += count;
    }
  return out;
}

inline RasterImage mask_image(const HoleMask& mask, int channels = 3) {
  RasterImage out(channels, mask.height, mask.width);
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < mask.height; ++y)
      for (int x = 0; x < mask.width; ++x) out.at(c, y, x) = mask.at(y, x) ? 1.f : -1.f;
  return out;
}

}  // namespace pyragen
