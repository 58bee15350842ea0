#pragma once

// Sub-generator (coarse stage + two-branch refine stage) and the bottom-up
// pyramid that hands each level's output to the next one up.

#include <map>
#include <optional>

#include "pyragen/imaging.hpp"
#include "pyragen/nnblocks.hpp"

namespace pyragen {

// Dilation rates per pyramid level, coarsest first.
struct DilationPlan {
  std::vector<std::vector<int>> rates;

  // Bottom level gets the wide plan, every other level the narrow one.
  static DilationPlan adaptive(int levels) {
    DilationPlan p;
    for (int n = 0; n < levels; ++n) p.rates.push_back(n == 0 ? std::vector<int>{2, 4, 8, 12} : std::vector<int>{2, 4, 8});
    return p;
  }

  static DilationPlan standard(int levels) {
    return DilationPlan{std::vector<std::vector<int>>(std::size_t(levels), std::vector<int>{2, 4, 8, 16})};
  }

  void validate(int levels) const {
    if (int(rates.size()) != levels)
      throw ConfigError("dilation plan has " + std::to_string(rates.size()) + " levels, expected " +
                        std::to_string(levels));
    for (const auto& r : rates) {
      if (r.empty()) throw ConfigError("dilation plan: empty rate list");
      for (std::size_t i = 0; i < r.size(); ++i) {
        if (r[i] < 1) throw ConfigError("dilation plan: rates must be >= 1");
        if (i > 0 && r[i] <= r[i - 1]) throw ConfigError("dilation plan: rates must be ascending");
      }
    }
  }

  bool operator==(const DilationPlan&) const = default;
};

enum class FusionMode { image_refine_both, image_refine_att_only, image_refine_nonatt_only, feature_coarse, feature_refine };

inline const std::map<std::string, FusionMode>& fusion_names() {
  static const std::map<std::string, FusionMode> names{
      {"image_refine_both", FusionMode::image_refine_both},
      {"image_refine_att_only", FusionMode::image_refine_att_only},
      {"image_refine_nonatt_only", FusionMode::image_refine_nonatt_only},
      {"feature_coarse", FusionMode::feature_coarse},
      {"feature_refine", FusionMode::feature_refine},
  };
  return names;
}

inline std::string to_string(FusionMode m) {
  for (const auto& [k, v] : fusion_names())
    if (v == m) return k;
  return "?";
}

inline FusionMode parse_fusion(const std::string& s) {
  auto it = fusion_names().find(s);
  if (it == fusion_names().end()) throw ConfigError("unknown fusion mode: " + s);
  return it->second;
}

inline bool is_image_fusion(FusionMode m) {
  return m == FusionMode::image_refine_both || m == FusionMode::image_refine_att_only ||
         m == FusionMode::image_refine_nonatt_only;
}

struct GeneratorOptions {
  int base_width = 32;
  AttentionSpec attention;
  FusionMode fusion = FusionMode::image_refine_both;
  DilationPlan dilation = DilationPlan::adaptive(3);
  // Feed the paste-back composition upward instead of the raw refined image.
  bool feed_composed = false;
};

template <class T>
struct LevelOutput {
  Var<T> coarse;
  Var<T> refined;
  Var<T> fused_input;
  Var<T> coarse_features;
  Var<T> refine_features;
};

// Per-level batch tensors, coarsest first: images [N,3,H,W], masks [N,1,H,W].
template <class T>
struct PyramidBatch {
  std::vector<Tensor<T>> images;
  std::vector<Tensor<T>> masks;

  int levels() const { return int(images.size()); }
};

template <class T>
PyramidBatch<T> make_pyramid_batch(const std::vector<PyramidSample>& samples) {
  if (samples.empty()) throw ArgumentError("make_pyramid_batch: empty batch");
  const std::size_t levels = samples[0].levels.size();
  PyramidBatch<T> out;
  for (std::size_t l = 0; l < levels; ++l) {
    std::vector<const RasterImage*> ims;
    std::vector<const HoleMask*> ms;
    for (const auto& s : samples) {
      if (s.levels.size() != levels) throw ConfigError("make_pyramid_batch: samples disagree on level count");
      ims.push_back(&s.levels[l].image);
      ms.push_back(&s.levels[l].mask);
    }
    out.images.push_back(to_tensor<T>(ims));
    out.masks.push_back(mask_tensor<T>(ms));
  }
  return out;
}

// [N,4,H,W]: image with holes set to 0, then the mask channel.
template <class T>
Tensor<T> masked_input(const Tensor<T>& image, const Tensor<T>& mask) {
  const Shape s = image.shape();
  if (mask.n() != s.n || mask.c() != 1 || mask.h() != s.h || mask.w() != s.w)
    throw ShapeError("masked_input: mask " + mask.shape().str() + " does not match image " + s.str());
  Tensor<T> out(Shape{s.n, s.c + 1, s.h, s.w});
  for (int n = 0; n < s.n; ++n) {
    const T* m = mask.plane(n, 0);
    for (int c = 0; c < s.c; ++c) {
      const T* src = image.plane(n, c);
      T* dst = out.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) dst[i] = m[i] != T(0) ? T(0) : src[i];
    }
    std::copy_n(m, s.plane(), out.plane(n, s.c));
  }
  return out;
}

template <class T>
class SubGenerator {
 public:
  static constexpr int kImageChannels = 3;
  static constexpr int kInputChannels = 4;
  static constexpr int kDownsampling = 4;

  struct StageOutput {
    Var<T> image;
    Var<T> features;  // bottleneck features at 1/4 resolution
  };

  SubGenerator() = default;
  SubGenerator(const std::string& name, int base_width, std::vector<int> rates, AttentionSpec attention, Rng& rng)
      : name_(name), width_(base_width), rates_(std::move(rates)), attention_(attention) {
    if (base_width < 2) throw ConfigError("sub-generator base width must be >= 2");
    attention_.validate();
    const int w = base_width, w2 = 2 * base_width, wh = std::max(1, base_width / 2);
    auto gated = [&](const std::string& id, int in, int out, int k, int stride = 1, int rate = 1) {
      return GatedConv<T>(name + "." + id, ConvSpec{in, out, k, stride, rate, Activation::elu}, rng);
    };
    // coarse stage
    coarse_.push_back(gated("coarse.conv1", kInputChannels, w, 5));
    coarse_.push_back(gated("coarse.down1", w, w2, 3, 2));
    coarse_.push_back(gated("coarse.down2", w2, w2, 3, 2));
    coarse_.push_back(gated("coarse.conv2", w2, w2, 3));
    for (std::size_t i = 0; i < rates_.size(); ++i)
      coarse_.push_back(gated("coarse.dilated" + std::to_string(i), w2, w2, 3, 1, rates_[i]));
    coarse_.push_back(gated("coarse.conv3", w2, w2, 3));
    coarse_decoder_.push_back(gated("coarse.up1", w2, w, 3));
    coarse_decoder_.push_back(gated("coarse.up2", w, wh, 3));
    coarse_head_ = Conv<T>(name + ".coarse.out", ConvSpec{wh, kImageChannels, 3, 1, 1, Activation::tanh}, rng);

    // refine stage, non-attention branch
    plain_.push_back(gated("refine.plain.conv1", kInputChannels, w, 5));
    plain_.push_back(gated("refine.plain.down1", w, w2, 3, 2));
    plain_.push_back(gated("refine.plain.down2", w2, w2, 3, 2));
    plain_.push_back(gated("refine.plain.conv2", w2, w2, 3));
    for (std::size_t i = 0; i < rates_.size(); ++i)
      plain_.push_back(gated("refine.plain.dilated" + std::to_string(i), w2, w2, 3, 1, rates_[i]));
    // refine stage, attention branch
    attn_pre_.push_back(gated("refine.attn.conv1", kInputChannels, w, 5));
    attn_pre_.push_back(gated("refine.attn.down1", w, w2, 3, 2));
    attn_pre_.push_back(gated("refine.attn.down2", w2, w2, 3, 2));
    attn_pre_.push_back(gated("refine.attn.conv2", w2, w2, 3));
    attn_post_.push_back(gated("refine.attn.conv3", w2, w2, 3));
    attn_post_.push_back(gated("refine.attn.conv4", w2, w2, 3));
    // merged decoder
    merge_.push_back(gated("refine.merge1", 2 * w2, w2, 3));
    merge_.push_back(gated("refine.merge2", w2, w2, 3));
    refine_decoder_.push_back(gated("refine.up1", w2, w, 3));
    refine_decoder_.push_back(gated("refine.up2", w, wh, 3));
    refine_head_ = Conv<T>(name + ".refine.out", ConvSpec{wh, kImageChannels, 3, 1, 1, Activation::tanh}, rng);
  }

  void check_input(const Shape& s) const {
    if (s.c != kInputChannels)
      throw ShapeError(name_ + ": expected image+mask input with 4 channels, got " + std::to_string(s.c));
    if (s.h % kDownsampling || s.w % kDownsampling || s.h < kDownsampling)
      throw ShapeError(name_ + ": spatial size " + s.str() + " must be a positive multiple of 4");
  }

  // x: [N,4,H,W] masked image + mask. lower_features (feature-level coarse
  // fusion) are added at the bottleneck after 2x bilinear upsampling.
  StageOutput coarse(const Var<T>& x, const Var<T>* lower_features = nullptr) const {
    check_input(x.shape());
    Var<T> h = x;
    for (const auto& layer : coarse_) h = layer(h);
    if (lower_features) h = add(h, upsample_bilinear(*lower_features, 2));
    Var<T> features = h;
    h = coarse_decoder_[0](upsample_nearest(h, 2));
    h = coarse_decoder_[1](upsample_nearest(h, 2));
    return {coarse_head_(h), features};
  }

  // The two branches may receive different images (fusion variants). Each
  // branch sees its image pasted into the known region plus the mask.
  StageOutput refine(const Var<T>& attention_image, const Var<T>& plain_image, const Tensor<T>& image,
                     const Tensor<T>& mask, const Var<T>* lower_features = nullptr) const {
    const Var<T> known(image);
    const Var<T> mask_var(mask);
    auto branch_input = [&](const Var<T>& img) { return concat_channels<T>({compose(img, known, mask), mask_var}); };

    const Var<T> plain_in = branch_input(plain_image);
    check_input(plain_in.shape());
    Var<T> a = attention_image.node() == plain_image.node() ? plain_in : branch_input(attention_image);
    Var<T> p = plain_in;
    for (const auto& layer : plain_) p = layer(p);
    for (const auto& layer : attn_pre_) a = layer(a);
    const Tensor<T> feature_mask = pool_mask_max(mask, kDownsampling);
    a = contextual_attention<T>(a, a, feature_mask, attention_, nullptr, /*zero_if_degenerate=*/true);
    for (const auto& layer : attn_post_) a = layer(a);

    Var<T> h = concat_channels<T>({p, a});
    for (const auto& layer : merge_) h = layer(h);
    if (lower_features) h = add(h, upsample_bilinear(*lower_features, 2));
    Var<T> features = h;
    h = refine_decoder_[0](upsample_nearest(h, 2));
    h = refine_decoder_[1](upsample_nearest(h, 2));
    return {refine_head_(h), features};
  }

  // Standalone run: coarse, then refine on the coarse result.
  Var<T> operator()(const Tensor<T>& image, const Tensor<T>& mask) const {
    Var<T> c = coarse(Var<T>(masked_input(image, mask))).image;
    return refine(c, c, image, mask).image;
  }

  void collect(ParamList<T>& out) const {
    for (const auto* group : {&coarse_, &coarse_decoder_, &plain_, &attn_pre_, &attn_post_, &merge_, &refine_decoder_})
      for (const auto& layer : *group) layer.collect(out);
    coarse_head_.collect(out);
    refine_head_.collect(out);
  }

  std::size_t parameter_count() const {
    ParamList<T> params;
    collect(params);
    std::size_t total = 0;
    for (const auto& p : params) total += p.var.value().size();
    return total;
  }

  const std::string& name() const { return name_; }
  const std::vector<int>& dilation_rates() const { return rates_; }
  int base_width() const { return width_; }

 private:
  std::string name_;
  int width_ = 0;
  std::vector<int> rates_;
  AttentionSpec attention_;
  std::vector<GatedConv<T>> coarse_, coarse_decoder_, plain_, attn_pre_, attn_post_, merge_, refine_decoder_;
  Conv<T> coarse_head_, refine_head_;
};

// clamp(coarse + upsample(lower)), the image-level handoff between levels.
template <class T>
Var<T> fuse(const Var<T>& coarse, const Var<T>& lower_output, FusionMode mode) {
  if (!is_image_fusion(mode)) throw ConfigError("fuse: " + to_string(mode) + " fuses features, not images");
  const Shape c = coarse.shape(), l = lower_output.shape();
  if (l.n != c.n || l.c != c.c || l.h * 2 != c.h || l.w * 2 != c.w)
    throw ConfigError("fuse: lower output " + l.str() + " is not half the resolution of " + c.str());
  return clamp(add(coarse, upsample_bilinear(lower_output, 2)), T(-1), T(1));
}

template <class T>
class PyramidGenerator {
 public:
  PyramidGenerator() = default;
  PyramidGenerator(int levels, GeneratorOptions options, std::uint64_t seed) : options_(std::move(options)) {
    if (levels < 2) throw ConfigError("pyramid generator needs at least 2 levels");
    options_.dilation.validate(levels);
    Rng rng(seed);
    for (int n = 0; n < levels; ++n)
      levels_.emplace_back("G" + std::to_string(n), options_.base_width, options_.dilation.rates[std::size_t(n)],
                           options_.attention, rng);
  }

  int levels() const { return int(levels_.size()); }
  FusionMode fusion() const { return options_.fusion; }
  const GeneratorOptions& options() const { return options_; }
  SubGenerator<T>& level(int n) { return levels_.at(std::size_t(n)); }
  const SubGenerator<T>& level(int n) const { return levels_.at(std::size_t(n)); }

  std::vector<LevelOutput<T>> forward(const PyramidBatch<T>& batch) const {
    if (batch.levels() != levels())
      throw ConfigError("pyramid_forward: sample has " + std::to_string(batch.levels()) + " levels, generator has " +
                        std::to_string(levels()));
    for (int n = 1; n < levels(); ++n) {
      const Shape a = batch.images[std::size_t(n - 1)].shape(), b = batch.images[std::size_t(n)].shape();
      if (a.h * 2 != b.h || a.w * 2 != b.w) throw ConfigError("pyramid_forward: levels are not a factor-2 chain");
    }
    std::vector<LevelOutput<T>> out;
    for (int n = 0; n < levels(); ++n) out.push_back(forward_level(n, batch, n > 0 ? &out.back() : nullptr));
    return out;
  }

  // One level given the level below (nullptr at level 0).
  LevelOutput<T> forward_level(int n, const PyramidBatch<T>& batch, const LevelOutput<T>* lower) const {
    if (n < 0 || n >= levels() || n >= batch.levels()) throw ConfigError("forward_level: no level " + std::to_string(n));
    if ((n > 0) != (lower != nullptr)) throw ConfigError("forward_level: levels above 0 need the lower output");
    const FusionMode mode = options_.fusion;
    const auto& image = batch.images[std::size_t(n)];
    const auto& mask = batch.masks[std::size_t(n)];
    const auto& g = levels_[std::size_t(n)];

    const Var<T> x(masked_input(image, mask));
    auto coarse = g.coarse(x, lower && mode == FusionMode::feature_coarse ? &lower->coarse_features : nullptr);

    Var<T> fused = coarse.image, att_in = coarse.image, plain_in = coarse.image;
    if (lower && is_image_fusion(mode)) {
      Var<T> handoff = lower->refined;
      if (options_.feed_composed)
        handoff = pyragen::compose(lower->refined, Var<T>(batch.images[std::size_t(n - 1)]),
                                   batch.masks[std::size_t(n - 1)]);
      fused = fuse(coarse.image, handoff, mode);
      if (mode != FusionMode::image_refine_nonatt_only) att_in = fused;
      if (mode != FusionMode::image_refine_att_only) plain_in = fused;
    }
    auto refined = g.refine(att_in, plain_in, image, mask,
                            lower && mode == FusionMode::feature_refine ? &lower->refine_features : nullptr);
    return {coarse.image, refined.image, fused, coarse.features, refined.features};
  }

  void collect(ParamList<T>& out) const {
    for (const auto& g : levels_) g.collect(out);
  }

  ParamList<T> level_parameters(int n) const {
    ParamList<T> out;
    levels_.at(std::size_t(n)).collect(out);
    return out;
  }

 private:
  GeneratorOptions options_;
  std::vector<SubGenerator<T>> levels_;
};

template <class T>
std::vector<std::size_t> count_params(const PyramidGenerator<T>& gen) {
  std::vector<std::size_t> out;
  for (int n = 0; n < gen.levels(); ++n) out.push_back(gen.level(n).parameter_count());
  return out;
}

}  // namespace pyragen
