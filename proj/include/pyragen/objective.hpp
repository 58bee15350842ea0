#pragma once

// Reconstruction and hinge adversarial losses, per-level composition and the
// weighted pyramid total. Each loss exists on plain numbers (reporting and
// tests) and on Vars (training).

#include <numeric>

#include "pyragen/autograd.hpp"

namespace pyragen {

struct LossWeights {
  double alpha = 1.0;
  std::vector<double> lambdas{10.0, 1.0, 1.0};

  void validate(int levels) const {
    if (alpha < 0) throw ConfigError("loss weights: alpha must be >= 0");
    if (int(lambdas.size()) != levels)
      throw ConfigError("loss weights: " + std::to_string(lambdas.size()) + " lambdas for " + std::to_string(levels) +
                        " levels");
    for (double l : lambdas)
      if (l < 0) throw ConfigError("loss weights: lambdas must be >= 0");
  }

  // 10 on the bottom level, 1 elsewhere.
  static LossWeights defaults(int levels) {
    LossWeights w;
    w.lambdas.assign(std::size_t(levels), 1.0);
    w.lambdas[0] = 10.0;
    return w;
  }
};

struct LevelLoss {
  double recon = 0;
  double gen_adv = 0;
  double disc = 0;
};

struct LossReport {
  std::vector<LevelLoss> levels;
  double total_generator = 0;
  std::vector<double> disc_totals;

  // total_generator recomputed from the parts
  double recompute_total(const LossWeights& w) const {
    double t = 0;
    for (std::size_t n = 0; n < levels.size(); ++n)
      t += w.lambdas[n] * (levels[n].gen_adv + w.alpha * levels[n].recon);
    return t;
  }
};

// ---- scalar forms --------------------------------------------------------

inline double recon_loss(std::span<const float> generated, std::span<const float> truth) {
  if (generated.size() != truth.size()) throw ShapeError("recon_loss: size mismatch");
  if (truth.empty()) return 0.0;
  double acc = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) acc += std::abs(double(generated[i]) - double(truth[i]));
  return acc / double(truth.size());
}

inline double gen_hinge(std::span<const double> fake_scores) {
  if (fake_scores.empty()) return 0.0;
  return -std::accumulate(fake_scores.begin(), fake_scores.end(), 0.0) / double(fake_scores.size());
}

inline double disc_hinge(std::span<const double> real_scores, std::span<const double> fake_scores) {
  auto mean_relu = [](std::span<const double> s, double sign) {
    if (s.empty()) return 0.0;
    double acc = 0;
    for (double v : s) acc += std::max(0.0, 1.0 + sign * v);
    return acc / double(s.size());
  };
  return mean_relu(real_scores, -1.0) + mean_relu(fake_scores, +1.0);
}

inline double layer_loss(double recon, double gen_adv, double alpha) {
  if (alpha < 0) throw ArgumentError("layer_loss: alpha must be >= 0");
  return gen_adv + alpha * recon;
}

inline double pyramid_loss(std::span<const double> layer_losses, const LossWeights& weights) {
  if (layer_losses.size() != weights.lambdas.size())
    throw ArgumentError("pyramid_loss: " + std::to_string(layer_losses.size()) + " losses for " +
                        std::to_string(weights.lambdas.size()) + " weights");
  double t = 0;
  for (std::size_t n = 0; n < layer_losses.size(); ++n) t += weights.lambdas[n] * layer_losses[n];
  return t;
}

// ---- differentiable forms ------------------------------------------------

template <class T>
Var<T> recon_loss(const Var<T>& generated, const Tensor<T>& truth) {
  return mean_abs_diff(generated, truth);
}

template <class T>
Var<T> gen_hinge(const Var<T>& fake_scores) {
  return scale(mean(fake_scores), T(-1));
}

template <class T>
Var<T> disc_hinge(const Var<T>& real_scores, const Var<T>& fake_scores) {
  Var<T> real_term = mean(activation(affine(real_scores, T(-1), T(1)), Activation::relu));
  Var<T> fake_term = mean(activation(affine(fake_scores, T(1), T(1)), Activation::relu));
  return add(real_term, fake_term);
}

template <class T>
Var<T> layer_loss(const Var<T>& recon, const Var<T>& gen_adv, double alpha) {
  if (alpha < 0) throw ArgumentError("layer_loss: alpha must be >= 0");
  return weighted_sum<T>({gen_adv, recon}, {T(1), T(alpha)});
}

template <class T>
Var<T> pyramid_loss(const std::vector<Var<T>>& layer_losses, const LossWeights& weights) {
  if (layer_losses.size() != weights.lambdas.size())
    throw ArgumentError("pyramid_loss: " + std::to_string(layer_losses.size()) + " losses for " +
                        std::to_string(weights.lambdas.size()) + " weights");
  std::vector<T> w;
  for (double l : weights.lambdas) w.push_back(T(l));
  return weighted_sum(layer_losses, w);
}

}  // namespace pyragen
