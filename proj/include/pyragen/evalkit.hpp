#pragma once

// Image-quality metrics, inpainting over image sets, the hole-ratio and
// resolution sweeps, and the variant ablation harness.

#include <limits>
#include <optional>

#include "pyragen/trainer.hpp"

namespace pyragen {

// ---- metrics -------------------------------------------------------------

inline constexpr double kPsnrCap = 100.0;

namespace detail {
inline void require_same_size(const RasterImage& a, const RasterImage& b, const std::string& what) {
  if (a.channels != b.channels || a.height != b.height || a.width != b.width)
    throw ShapeError(what + ": image sizes differ");
}
inline double unit(float v) { return 0.5 * double(v) + 0.5; }
}  // namespace detail

// Mean absolute error on the [0, 1] scale.
inline double l1_metric(const RasterImage& a, const RasterImage& b) {
  detail::require_same_size(a, b, "l1_metric");
  if (a.values.empty()) return 0.0;
  double acc = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) acc += std::abs(detail::unit(a.values[i]) - detail::unit(b.values[i]));
  return acc / double(a.values.size());
}

// [0, 1]-scale L1 restricted to hole pixels; 0 without holes.
inline double hole_l1_metric(const RasterImage& a, const RasterImage& b, const HoleMask& mask) {
  detail::require_same_size(a, b, "hole_l1_metric");
  if (mask.height != a.height || mask.width != a.width) throw ShapeError("hole_l1_metric: mask size differs");
  double acc = 0;
  std::size_t count = 0;
  const std::size_t plane = mask.values.size();
  for (int c = 0; c < a.channels; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      if (mask.values[i]) {
        const std::size_t k = std::size_t(c) * plane + i;
        acc += std::abs(detail::unit(a.values[k]) - detail::unit(b.values[k]));
        ++count;
      }
  return count ? acc / double(count) : 0.0;
}

inline double psnr_from_mse(double mse) { return mse > 0 ? std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse)) : kPsnrCap; }

inline double psnr(const RasterImage& a, const RasterImage& b) {
  detail::require_same_size(a, b, "psnr");
  double acc = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = detail::unit(a.values[i]) - detail::unit(b.values[i]);
    acc += d * d;
  }
  return psnr_from_mse(a.values.empty() ? 0.0 : acc / double(a.values.size()));
}

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double range = 1.0;
};

inline std::vector<double> gaussian_taps(int window, double sigma) {
  std::vector<double> g(static_cast<std::size_t>(window));
  const double c = (window - 1) / 2.0;
  double sum = 0;
  for (int i = 0; i < window; ++i) sum += g[std::size_t(i)] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
  for (auto& v : g) v /= sum;
  return g;
}

// Mean SSIM over all valid window positions, averaged over channels.
inline double ssim(const RasterImage& a, const RasterImage& b, const SsimParams& p = {}) {
  detail::require_same_size(a, b, "ssim");
  if (a.height < p.window || a.width < p.window)
    throw ArgumentError("ssim: image " + std::to_string(a.width) + "x" + std::to_string(a.height) +
                        " is smaller than the " + std::to_string(p.window) + "x" + std::to_string(p.window) + " window");
  const auto g = gaussian_taps(p.window, p.sigma);
  const double c1 = (p.k1 * p.range) * (p.k1 * p.range), c2 = (p.k2 * p.range) * (p.k2 * p.range);
  const int H = a.height, W = a.width, k = p.window, ho = H - k + 1, wo = W - k + 1;

  // separable valid filtering of a plane: rows first, then columns
  auto filter = [&](const std::vector<double>& src) {
    std::vector<double> rows(std::size_t(H) * wo), out(std::size_t(ho) * wo);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < wo; ++x) {
        double s = 0;
        for (int i = 0; i < k; ++i) s += g[std::size_t(i)] * src[std::size_t(y) * W + x + i];
        rows[std::size_t(y) * wo + x] = s;
      }
    for (int y = 0; y < ho; ++y)
      for (int x = 0; x < wo; ++x) {
        double s = 0;
        for (int i = 0; i < k; ++i) s += g[std::size_t(i)] * rows[std::size_t(y + i) * wo + x];
        out[std::size_t(y) * wo + x] = s;
      }
    return out;
  };

  double total = 0;
  const std::size_t plane = std::size_t(H) * W;
  for (int c = 0; c < a.channels; ++c) {
    std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      x[i] = detail::unit(a.values[std::size_t(c) * plane + i]);
      y[i] = detail::unit(b.values[std::size_t(c) * plane + i]);
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter(x), my = filter(y), sxx = filter(xx), syy = filter(yy), sxy = filter(xy);
    double acc = 0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
      acc += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += acc / double(mx.size());
  }
  return total / a.channels;
}

// ---- models and inpainting -----------------------------------------------

struct InpaintModel {
  TrainConfig config;
  PyramidGenerator<float> generator;

  int top_resolution() const { return config.top_resolution; }
  int levels() const { return config.levels; }
};

inline InpaintModel load_model(const std::filesystem::path& checkpoint) {
  return {Trainer::checkpoint_config(checkpoint), Trainer::load_generator(checkpoint)};
}

inline InpaintModel model_of(const Trainer& t) { return {t.config(), t.generator()}; }

// Smallest accepted input size for a model: every level a multiple of 4.
inline int size_granularity(int levels) { return (1 << (levels - 1)) * SubGenerator<float>::kDownsampling; }

// Composed (paste-back) results at the input resolution. The pyramid is
// built at the input size; with native_factor > 1 the model runs on a
// downsampled copy and its output is upsampled back before compositing.
inline std::vector<RasterImage> inpaint_all(const InpaintModel& model, const std::vector<RasterImage>& images,
                                            const std::vector<HoleMask>& masks, int native_factor = 1,
                                            int chunk = 8) {
  if (images.size() != masks.size()) throw ArgumentError("inpaint: image and mask counts differ");
  std::vector<RasterImage> out;
  for (std::size_t start = 0; start < images.size(); start += std::size_t(chunk)) {
    const std::size_t end = std::min(images.size(), start + std::size_t(chunk));
    std::vector<PyramidSample> samples;
    for (std::size_t i = start; i < end; ++i) {
      const auto& im = images[i];
      const auto& m = masks[i];
      if (m.height != im.height || m.width != im.width)
        throw ConfigError("inpaint: mask " + std::to_string(m.width) + "x" + std::to_string(m.height) +
                          " does not match image " + std::to_string(im.width) + "x" + std::to_string(im.height));
      if (im.height % (native_factor * size_granularity(model.levels())) ||
          im.width % (native_factor * size_granularity(model.levels())))
        throw ConfigError("inpaint: size " + std::to_string(im.width) + "x" + std::to_string(im.height) +
                          " is not divisible by " + std::to_string(native_factor * size_granularity(model.levels())));
      samples.push_back(native_factor == 1
                            ? build_pyramid(im, m, model.levels())
                            : build_pyramid(downsample(im, native_factor), downsample_mask(m, native_factor),
                                            model.levels()));
    }
    for (const auto& s : samples)
      if (s.top().image.height != samples.front().top().image.height ||
          s.top().image.width != samples.front().top().image.width)
        throw ConfigError("inpaint: images in one call must share a size");
    const auto batch = make_pyramid_batch<float>(samples);
    std::vector<LevelOutput<float>> result;
    {
      NoGradGuard guard;
      result = model.generator.forward(batch);
    }
    for (std::size_t i = start; i < end; ++i) {
      RasterImage generated = from_tensor(result.back().refined.value(), int(i - start));
      if (native_factor > 1) generated = upsample(generated, native_factor);
      out.push_back(compose(generated, images[i], masks[i]));
    }
  }
  return out;
}

inline RasterImage inpaint(const InpaintModel& model, const RasterImage& image, const HoleMask& mask) {
  return inpaint_all(model, {image}, {mask}).front();
}

// ---- metric rows ---------------------------------------------------------

struct MetricRow {
  std::string variant;
  std::string mask_mode;  // center | freeform | center_sweep
  std::optional<double> hole_ratio;
  int resolution = 0;
  double l1 = 0;
  double psnr = 0;
  double ssim = 0;
  double hole_l1 = 0;  // diagnostics only

  bool operator==(const MetricRow&) const = default;
};

// Full-frame metrics of composed outputs, averaged over images.
inline MetricRow score(const std::string& variant, const std::string& mask_mode, std::optional<double> ratio,
                       const std::vector<RasterImage>& outputs, const std::vector<RasterImage>& truths,
                       const std::vector<HoleMask>& masks) {
  if (outputs.empty() || outputs.size() != truths.size() || truths.size() != masks.size())
    throw ArgumentError("score: mismatched or empty inputs");
  MetricRow row{variant, mask_mode, ratio, truths.front().height};
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    row.l1 += l1_metric(outputs[i], truths[i]);
    row.psnr += psnr(outputs[i], truths[i]);
    row.ssim += ssim(outputs[i], truths[i]);
    row.hole_l1 += hole_l1_metric(outputs[i], truths[i], masks[i]);
  }
  const double n = double(outputs.size());
  row.l1 /= n;
  row.psnr /= n;
  row.ssim /= n;
  row.hole_l1 /= n;
  return row;
}

inline void require_model_resolution(const InpaintModel& model, const ImageSet& data) {
  if (data.empty()) throw ConfigError("evaluation dataset is empty");
  for (const auto& im : data.images)
    if (im.height != model.top_resolution() || im.width != model.top_resolution())
      throw ConfigError("evaluation image " + std::to_string(im.width) + "x" + std::to_string(im.height) +
                        " does not match the model resolution " + std::to_string(model.top_resolution()));
}

inline std::vector<HoleMask> center_masks(const ImageSet& data, double ratio) {
  std::vector<HoleMask> out;
  for (const auto& im : data.images) out.push_back(gen_center_mask(im.height, ratio));
  return out;
}

// Free-form masks for evaluation, seeded per image index.
inline std::vector<HoleMask> freeform_masks(const ImageSet& data, std::uint64_t seed) {
  std::vector<HoleMask> out;
  for (std::size_t i = 0; i < data.size(); ++i)
    out.push_back(gen_freeform_mask(data.images[i].height, BrushConfig{}, derive_seed(seed, i)));
  return out;
}

inline MetricRow evaluate(const InpaintModel& model, const ImageSet& data, const std::string& mask_mode,
                          double ratio, std::uint64_t mask_seed = 0, const std::string& variant = "model") {
  require_model_resolution(model, data);
  std::vector<HoleMask> masks;
  std::optional<double> r;
  if (mask_mode == "center") {
    if (!(ratio > 0 && ratio < 1)) throw ArgumentError("hole ratio must lie in (0, 1)");
    masks = center_masks(data, ratio);
    r = ratio;
  } else if (mask_mode == "freeform") {
    masks = freeform_masks(data, mask_seed);
  } else {
    throw ArgumentError("unknown mask mode: " + mask_mode);
  }
  return score(variant, mask_mode, r, inpaint_all(model, data.images, masks), data.images, masks);
}

inline std::vector<double> default_hole_ratios() { return {0.15, 0.25, 0.35, 0.45, 0.55}; }

// "a:b:step", inclusive of b up to rounding.
inline std::vector<double> parse_ratios(const std::string& spec) {
  const auto first = spec.find(':'), second = spec.find(':', first == std::string::npos ? first : first + 1);
  if (first == std::string::npos || second == std::string::npos)
    throw ArgumentError("ratios must look like a:b:step, got '" + spec + "'");
  auto num = [&](const std::string& s) {
    try {
      return parse_number("ratios", s);
    } catch (const ConfigError&) {
      throw ArgumentError("ratios: not a number: '" + s + "'");
    }
  };
  const double a = num(spec.substr(0, first)), b = num(spec.substr(first + 1, second - first - 1)),
               step = num(spec.substr(second + 1));
  if (!(step > 0) || b < a) throw ArgumentError("ratios: need a <= b and step > 0");
  std::vector<double> out;
  const int count = int(std::floor((b - a) / step + 1e-9)) + 1;
  for (int i = 0; i < count; ++i) out.push_back(std::round((a + i * step) * 1e9) / 1e9);
  for (double r : out)
    if (!(r > 0 && r < 1)) throw ArgumentError("ratios must lie in (0, 1)");
  return out;
}

inline std::vector<MetricRow> hole_sweep(const InpaintModel& model, const ImageSet& data,
                                         const std::vector<double>& ratios, const std::string& variant = "model") {
  for (double r : ratios)
    if (!(r > 0 && r < 1)) throw ArgumentError("hole_sweep: ratios must lie in (0, 1)");
  std::vector<MetricRow> rows;
  for (double r : ratios) rows.push_back(evaluate(model, data, "center", r, 0, variant));
  return rows;
}

inline constexpr double kResolutionSweepRatio = 0.25;

// source(size) supplies the evaluation images at each size.
inline std::vector<MetricRow> resolution_sweep(const InpaintModel& model, const std::function<ImageSet(int)>& source,
                                               const std::vector<int>& sizes, const std::string& variant = "model") {
  const int g = size_granularity(model.levels());
  for (int s : sizes)
    if (s <= 0 || s % g) throw ConfigError("resolution_sweep: size " + std::to_string(s) + " is not a multiple of " +
                                           std::to_string(g));
  std::vector<MetricRow> rows;
  for (int s : sizes) {
    const ImageSet data = source(s);
    if (data.empty()) throw ConfigError("resolution_sweep: no images at size " + std::to_string(s));
    const auto masks = center_masks(data, kResolutionSweepRatio);
    rows.push_back(score(variant, "center", kResolutionSweepRatio, inpaint_all(model, data.images, masks), data.images,
                         masks));
  }
  return rows;
}

// ---- ablation ------------------------------------------------------------

struct ReportedResult {
  double ssim, psnr, l1;
};

struct AblationVariant {
  std::string name;
  std::optional<ReportedResult> reference;  // published full-scale numbers, annotation only
};

inline const std::vector<AblationVariant>& ablation_variants() {
  static const std::vector<AblationVariant> variants{
      {"layers_3", ReportedResult{0.840, 26.74, 0.034}},
      {"layers_2_low", ReportedResult{0.809, 24.07, 0.042}},
      {"layers_2_high", ReportedResult{0.827, 26.03, 0.035}},
      {"std_dilation", ReportedResult{0.829, 26.38, 0.035}},
      {"fusion_image_refine_both", ReportedResult{0.840, 26.74, 0.034}},
      {"fusion_image_refine_att_only", ReportedResult{0.825, 25.94, 0.036}},
      {"fusion_image_refine_nonatt_only", ReportedResult{0.833, 25.96, 0.036}},
      {"fusion_feature_coarse", ReportedResult{0.786, 23.16, 0.044}},
      {"fusion_feature_refine", std::nullopt},  // reported as not converging
  };
  return variants;
}

inline const AblationVariant& find_variant(const std::string& name) {
  for (const auto& v : ablation_variants())
    if (v.name == name) return v;
  throw ArgumentError("unknown ablation variant: " + name);
}

// The training config of a variant and the factor between evaluation size and
// its own top resolution.
struct VariantPlan {
  TrainConfig config;
  int native_factor = 1;
};

inline VariantPlan plan_variant(const std::string& name, const TrainConfig& base) {
  find_variant(name);
  if (base.levels != 3) throw ConfigError("ablation variants are defined relative to a 3-level base config");
  VariantPlan plan{base, 1};
  auto two_levels = [&](int top) {
    plan.config.levels = 2;
    plan.config.top_resolution = top;
    const double alpha = base.weights.alpha;
    plan.config.weights = LossWeights::defaults(2);
    plan.config.weights.alpha = alpha;
  };
  if (name == "layers_2_low") {
    two_levels(base.top_resolution / 2);
    plan.native_factor = 2;
  } else if (name == "layers_2_high") {
    two_levels(base.top_resolution);
  } else if (name == "std_dilation") {
    plan.config.dilation = "standard";
  } else if (name.rfind("fusion_", 0) == 0) {
    plan.config.fusion = parse_fusion(name.substr(7));
  }
  plan.config.validate();
  return plan;
}

inline ImageSet rescale(const ImageSet& data, int factor) {
  if (factor == 1) return data;
  ImageSet out;
  for (const auto& im : data.images) out.images.push_back(downsample(im, factor));
  return out;
}

inline constexpr std::uint64_t kAblationMaskSeed = 0x5eed;

// Evaluation over the hole-sweep ratios with center masks, averaged.
inline MetricRow evaluate_variant(const InpaintModel& model, const ImageSet& data, int native_factor,
                                  const std::string& variant) {
  std::vector<RasterImage> outputs, truths;
  std::vector<HoleMask> masks;
  for (double r : default_hole_ratios()) {
    const auto m = center_masks(data, r);
    const auto o = inpaint_all(model, data.images, m, native_factor);
    outputs.insert(outputs.end(), o.begin(), o.end());
    truths.insert(truths.end(), data.images.begin(), data.images.end());
    masks.insert(masks.end(), m.begin(), m.end());
  }
  return score(variant, "center_sweep", std::nullopt, outputs, truths, masks);
}

struct AblationResult {
  MetricRow row;
  std::optional<ReportedResult> reference;
  LossReport last_losses;
  std::optional<InpaintModel> model;
};

// Trains one variant from the shared base config and seed for base.steps
// steps on `train` (at the base top resolution), then scores it on `eval`.
inline AblationResult run_ablation(const std::string& variant, const TrainConfig& base, const ImageSet& train,
                                   const ImageSet& eval,
                                   const std::function<void(long long, const LossReport&)>& on_step = {}) {
  const auto& v = find_variant(variant);
  const VariantPlan plan = plan_variant(variant, base);
  const ImageSet data = rescale(train, plan.native_factor);
  Trainer trainer(plan.config);
  AblationResult result;
  for (int s = 0; s < plan.config.steps; ++s) {
    result.last_losses = trainer.train_step(data);
    if (on_step) on_step(s, result.last_losses);
  }
  for (const auto& im : eval.images)
    if (im.height != base.top_resolution || im.width != base.top_resolution)
      throw ConfigError("ablation evaluation images must match the base top resolution");
  result.model = model_of(trainer);
  result.row = evaluate_variant(*result.model, eval, plan.native_factor, variant);
  result.reference = v.reference;
  return result;
}

// ---- reports -------------------------------------------------------------

inline std::string metric_csv(const std::vector<MetricRow>& rows) {
  std::string out = "variant,mask_mode,hole_ratio,resolution,l1,psnr,ssim,hole_l1\n";
  for (const auto& r : rows)
    out += r.variant + "," + r.mask_mode + "," + (r.hole_ratio ? format_number(*r.hole_ratio) : "n/a") + "," +
           std::to_string(r.resolution) + "," + format_number(r.l1) + "," + format_number(r.psnr) + "," +
           format_number(r.ssim) + "," + format_number(r.hole_l1) + "\n";
  return out;
}

inline nlohmann::json to_json(const MetricRow& r) {
  nlohmann::json j = {{"variant", r.variant},   {"mask_mode", r.mask_mode}, {"resolution", r.resolution},
                      {"l1", r.l1},             {"psnr", r.psnr},           {"ssim", r.ssim},
                      {"hole_l1", r.hole_l1}};
  j["hole_ratio"] = r.hole_ratio ? nlohmann::json(*r.hole_ratio) : nlohmann::json("n/a");
  return j;
}

inline nlohmann::json summary_json(const std::vector<MetricRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) out.push_back(to_json(r));
  return {{"rows", out}};
}

// Table with desk-scale results beside the published numbers.
inline std::string ablation_table(const std::vector<AblationResult>& results) {
  std::ostringstream os;
  os << "variant                          SSIM     PSNR     L1      | reported SSIM PSNR  L1\n";
  for (const auto& r : results) {
    char line[256];
    std::snprintf(line, sizeof line, "%-32s %.4f  %7.3f  %.4f  |", r.row.variant.c_str(), r.row.ssim, r.row.psnr,
                  r.row.l1);
    os << line;
    if (r.reference) {
      std::snprintf(line, sizeof line, " %.3f      %5.2f  %.3f", r.reference->ssim, r.reference->psnr,
                    r.reference->l1);
      os << line;
    } else {
      os << " (no converged result)";
    }
    os << "\n";
  }
  return os.str();
}

// One row per sample: input | masked | output.
inline RasterImage contact_sheet(const std::vector<RasterImage>& inputs, const std::vector<HoleMask>& masks,
                                 const std::vector<RasterImage>& outputs, std::size_t max_rows = 8) {
  if (inputs.empty() || inputs.size() != masks.size() || masks.size() != outputs.size())
    throw ArgumentError("contact_sheet: mismatched or empty inputs");
  std::vector<RasterImage> rows;
  for (std::size_t i = 0; i < std::min(max_rows, inputs.size()); ++i)
    rows.push_back(hconcat({inputs[i], zero_holes(inputs[i], masks[i]), outputs[i]}));
  return vconcat(rows);
}

}  // namespace pyragen
