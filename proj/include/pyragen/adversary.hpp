#pragma once

// Per-level patch discriminator: a stack of stride-2 spectral-normalized
// convolutions over image + mask, ending in a score map without activation.

#include "pyragen/nnblocks.hpp"

namespace pyragen {

// Depth that maps the top level to a 4x4 score grid; with the same depth at
// every level, grids stay within 1x1..4x4 for pyramids spanning two halvings.
inline int adversary_depth_for(int top_resolution) {
  int depth = 0;
  for (int s = top_resolution; s > 4; s /= 2) ++depth;
  return std::max(depth, 1);
}

template <class T>
class LevelAdversary {
 public:
  static constexpr int kInputChannels = 4;

  LevelAdversary() = default;
  LevelAdversary(const std::string& name, int base_width, int depth, std::uint64_t seed) : name_(name) {
    if (depth < 1) throw ConfigError(name + ": adversary depth must be >= 1");
    if (base_width < 1) throw ConfigError(name + ": adversary width must be >= 1");
    Rng rng(seed);
    int in = kInputChannels;
    for (int i = 0; i < depth; ++i) {
      const int out = base_width * std::min(1 << i, 4);
      blocks_.emplace_back(name + ".conv" + std::to_string(i), ConvSpec{in, out, 5, 2, 1, Activation::leaky}, rng);
      in = out;
    }
    head_ = SpectralNormConv<T>(name + ".score", ConvSpec{in, 1, 3, 1, 1, Activation::none}, rng);
  }

  int depth() const { return int(blocks_.size()); }

  Shape score_shape(const Shape& input) const {
    int h = input.h, w = input.w;
    for (const auto& b : blocks_) {
      h = b.spec().geometry().out_extent(h);
      w = b.spec().geometry().out_extent(w);
    }
    return {input.n, 1, h, w};
  }

  // image [N,3,H,W], mask [N,1,H,W] -> scores [N,1,H',W'].
  Var<T> operator()(const Var<T>& image, const Tensor<T>& mask, bool update_estimate = false) {
    const Shape s = image.shape();
    if (s.c != kInputChannels - 1 || mask.n() != s.n || mask.c() != 1 || mask.h() != s.h || mask.w() != s.w)
      throw ShapeError(name_ + ": expected RGB image with matching mask, got " + s.str() + " and " + mask.shape().str());
    if ((s.h >> depth()) < 1 || (s.w >> depth()) < 1)
      throw ShapeError(name_ + ": input " + s.str() + " too small for " + std::to_string(depth()) + " stride-2 blocks");
    Var<T> h = concat_channels<T>({image, Var<T>(mask)});
    for (auto& b : blocks_) h = b(h, update_estimate);
    return head_(h, update_estimate);
  }

  void collect(ParamList<T>& out) const {
    for (const auto& b : blocks_) b.collect(out);
    head_.collect(out);
  }

  void collect_state(std::vector<std::pair<std::string, Tensor<T>*>>& out) {
    for (auto& b : blocks_) b.collect_state(out);
    head_.collect_state(out);
  }

  std::vector<SpectralNormConv<T>*> layers() {
    std::vector<SpectralNormConv<T>*> out;
    for (auto& b : blocks_) out.push_back(&b);
    out.push_back(&head_);
    return out;
  }

  const std::string& name() const { return name_; }

 private:
  std::string name_;
  std::vector<SpectralNormConv<T>> blocks_;
  SpectralNormConv<T> head_;
};

}  // namespace pyragen
