#pragma once

// Differentiable building blocks shared by the generator and the
// discriminators: gated convolution, spectral-normalized convolution,
// contextual attention, and a finite-difference gradient checker.

#include <functional>
#include <limits>

#include "pyragen/ops.hpp"

namespace pyragen {

struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int dilation_rate = 1;
  Activation activation = Activation::elu;

  ConvGeometry geometry() const { return {kernel, stride, dilation_rate}; }

  void validate(const std::string& name) const {
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError(name + ": kernel must be odd, got " + std::to_string(kernel));
    if (dilation_rate < 1) throw ConfigError(name + ": dilation rate must be >= 1");
    if (stride < 1) throw ConfigError(name + ": stride must be >= 1");
    if (in_channels < 1 || out_channels < 1) throw ConfigError(name + ": channel counts must be positive");
  }

  // weights plus bias
  std::size_t parameter_count() const {
    return std::size_t(out_channels) * (std::size_t(in_channels) * kernel * kernel + 1);
  }
};

struct AttentionSpec {
  int patch_size = 3;
  int stride = 1;
  double softmax_scale = 10.0;
  bool fuse_propagation = true;

  void validate() const {
    if (patch_size < 1 || patch_size % 2 == 0) throw ConfigError("attention: patch_size must be odd");
    if (stride < 1) throw ConfigError("attention: stride must be >= 1");
    if (!(softmax_scale > 0)) throw ConfigError("attention: softmax_scale must be positive");
  }
};

template <class T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

template <class T>
Var<T> glorot_weight(int out_c, int in_c, int kernel, Rng& rng) {
  const double fan_in = double(in_c) * kernel * kernel;
  const double fan_out = double(out_c) * kernel * kernel;
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor<T> w(Shape{out_c, in_c, kernel, kernel});
  for (auto& v : w.span()) v = T(uniform(rng, -limit, limit));
  return Var<T>(std::move(w), true);
}

template <class T>
Var<T> zero_bias(int out_c) {
  return Var<T>(Tensor<T>(Shape{1, out_c, 1, 1}), true);
}

template <class T>
class Conv {
 public:
  Conv() = default;
  Conv(std::string name, ConvSpec spec, Rng& rng)
      : name_(std::move(name)),
        spec_(spec),
        weight_(glorot_weight<T>(spec.out_channels, spec.in_channels, spec.kernel, rng)),
        bias_(zero_bias<T>(spec.out_channels)) {
    spec_.validate(name_);
  }

  Var<T> operator()(const Var<T>& x) const {
    return activation(conv2d(x, weight_, bias_, spec_.geometry(), name_), spec_.activation);
  }

  void collect(ParamList<T>& out) const {
    out.push_back({name_ + ".w", weight_});
    out.push_back({name_ + ".b", bias_});
  }

  const ConvSpec& spec() const { return spec_; }
  Var<T>& weight() { return weight_; }
  Var<T>& bias() { return bias_; }

 private:
  std::string name_;
  ConvSpec spec_;
  Var<T> weight_, bias_;
};

// Feature branch and gate branch carry independent parameter sets.
template <class T>
class GatedConv {
 public:
  GatedConv() = default;
  GatedConv(std::string name, ConvSpec spec, Rng& rng)
      : name_(std::move(name)),
        spec_(spec),
        feature_w_(glorot_weight<T>(spec.out_channels, spec.in_channels, spec.kernel, rng)),
        feature_b_(zero_bias<T>(spec.out_channels)),
        gate_w_(glorot_weight<T>(spec.out_channels, spec.in_channels, spec.kernel, rng)),
        gate_b_(zero_bias<T>(spec.out_channels)) {
    spec_.validate(name_);
  }

  Var<T> operator()(const Var<T>& x) const {
    return gated_conv2d(x, feature_w_, feature_b_, gate_w_, gate_b_, spec_.geometry(), spec_.activation, name_);
  }

  void collect(ParamList<T>& out) const {
    out.push_back({name_ + ".fw", feature_w_});
    out.push_back({name_ + ".fb", feature_b_});
    out.push_back({name_ + ".gw", gate_w_});
    out.push_back({name_ + ".gb", gate_b_});
  }

  const ConvSpec& spec() const { return spec_; }
  std::size_t parameter_count() const { return 2 * spec_.parameter_count(); }
  Var<T>& feature_weight() { return feature_w_; }
  Var<T>& feature_bias() { return feature_b_; }
  Var<T>& gate_weight() { return gate_w_; }
  Var<T>& gate_bias() { return gate_b_; }

 private:
  std::string name_;
  ConvSpec spec_;
  Var<T> feature_w_, feature_b_, gate_w_, gate_b_;
};

// ---- spectral normalization ---------------------------------------------

// Power-iteration state for one weight matrix viewed as [O, C*k*k].
template <class T>
struct PowerIterationState {
  Tensor<T> u;  // [O]
  Tensor<T> v;  // [C*k*k]
};

namespace detail {
template <class T>
void normalize_vector(Eigen::Ref<Eigen::Matrix<T, Eigen::Dynamic, 1>> x) {
  const T n = x.norm();
  x /= std::max(n, T(1e-12));
}
}  // namespace detail

template <class T>
PowerIterationState<T> init_power_iteration(int rows, int cols, Rng& rng) {
  PowerIterationState<T> s{Tensor<T>(Shape{1, 1, 1, rows}), Tensor<T>(Shape{1, 1, 1, cols})};
  for (auto& x : s.u.span()) x = T(normal(rng));
  for (auto& x : s.v.span()) x = T(normal(rng));
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  Eigen::Map<Vec> u(s.u.data(), rows), v(s.v.data(), cols);
  detail::normalize_vector<T>(u);
  detail::normalize_vector<T>(v);
  return s;
}

// Runs `iterations` power steps on state and returns sigma = u^T W v.
template <class T>
T power_iterate(const Tensor<T>& weight, PowerIterationState<T>& state, int iterations) {
  const int rows = weight.n();
  const int cols = int(weight.shape().sample());
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  ConstMatrixMap<T> W(weight.data(), rows, cols);
  Eigen::Map<Vec> u(state.u.data(), rows), v(state.v.data(), cols);
  for (int i = 0; i < iterations; ++i) {
    v = W.transpose() * u;
    detail::normalize_vector<T>(v);
    u = W * v;
    detail::normalize_vector<T>(u);
  }
  return u.dot(W * v);
}

// W / sigma(W) with u, v held constant in the adjoint:
// dW = G / sigma - <G, W> / sigma^2 * u v^T.
template <class T>
Var<T> spectral_normalize(const Var<T>& weight, PowerIterationState<T>& state, int iterations) {
  const T sigma = power_iterate(weight.value(), state, iterations);
  if (!(sigma > T(0)) || !std::isfinite(double(sigma)))
    throw NumericalError("spectral_normalize: non-positive spectral estimate");
  Tensor<T> out = weight.value();
  for (auto& x : out.span()) x /= sigma;
  return make_result<T>(std::move(out), {weight}, [sigma, u = state.u, v = state.v](Node<T>& self) {
    Tensor<T>* gw = detail::grad_of(self, 0);
    if (!gw) return;
    const Tensor<T>& w = self.parents[0]->value;
    double inner = 0;
    for (std::size_t i = 0; i < w.size(); ++i) inner += double(self.grad[i]) * double(w[i]);
    const T coef = T(inner / (double(sigma) * double(sigma)));
    const int rows = int(u.size()), cols = int(v.size());
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const std::size_t i = std::size_t(r) * cols + c;
        (*gw)[i] += self.grad[i] / sigma - coef * u[std::size_t(r)] * v[std::size_t(c)];
      }
  });
}

template <class T>
class SpectralNormConv {
 public:
  SpectralNormConv() = default;
  SpectralNormConv(std::string name, ConvSpec spec, Rng& rng)
      : name_(std::move(name)),
        spec_(spec),
        weight_(glorot_weight<T>(spec.out_channels, spec.in_channels, spec.kernel, rng)),
        bias_(zero_bias<T>(spec.out_channels)),
        state_(init_power_iteration<T>(spec.out_channels, spec.in_channels * spec.kernel * spec.kernel, rng)) {
    spec_.validate(name_);
    // one warm-up step makes u^T W v = |W v| > 0 before any training update
    power_iterate(weight_.value(), state_, 1);
  }

  // update_estimate advances the power iteration by one step (training);
  // otherwise the stored estimate is reused as is.
  Var<T> operator()(const Var<T>& x, bool update_estimate) {
    Var<T> w = spectral_normalize(weight_, state_, update_estimate ? 1 : 0);
    return activation(conv2d(x, w, bias_, spec_.geometry(), name_), spec_.activation);
  }

  // Current spectral estimate without advancing the state.
  T sigma_estimate() const {
    PowerIterationState<T> copy = state_;
    return power_iterate(weight_.value(), copy, 0);
  }

  void collect(ParamList<T>& out) const {
    out.push_back({name_ + ".w", weight_});
    out.push_back({name_ + ".b", bias_});
  }
  void collect_state(std::vector<std::pair<std::string, Tensor<T>*>>& out) {
    out.push_back({name_ + ".u", &state_.u});
    out.push_back({name_ + ".v", &state_.v});
  }

  const ConvSpec& spec() const { return spec_; }
  Var<T>& weight() { return weight_; }
  Var<T>& bias() { return bias_; }
  PowerIterationState<T>& state() { return state_; }

 private:
  std::string name_;
  ConvSpec spec_;
  Var<T> weight_, bias_;
  PowerIterationState<T> state_;
};

// ---- contextual attention ------------------------------------------------

namespace detail {

// Column normalization x / max(|x|, eps), returning the norms used.
template <class T>
std::vector<T> normalize_columns(const RowMatrix<T>& x, RowMatrix<T>& out, T eps) {
  out = x;
  std::vector<T> norms(std::size_t(x.cols()));
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const T n = std::max(x.col(j).norm(), eps);
    norms[std::size_t(j)] = n;
    out.col(j) /= n;
  }
  return norms;
}

template <class T>
void normalize_columns_backward(const RowMatrix<T>& q, const std::vector<T>& norms, T eps, const RowMatrix<T>& dq,
                                RowMatrix<T>& dx) {
  dx.resize(q.rows(), q.cols());
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    const T n = norms[std::size_t(j)];
    if (n > eps)
      dx.col(j) = (dq.col(j) - q.col(j) * q.col(j).dot(dq.col(j))) / n;
    else
      dx.col(j) = dq.col(j) / n;
  }
}

// Sum of scores along matching diagonal shifts in both spatial axes:
// out[p, m] = sum_d in[p + d, m + d] over d in {-1,0,1}^2, skipping out-of-grid terms.
template <class T>
void propagate_scores(const RowMatrix<T>& in, RowMatrix<T>& out, int fh, int fw, int bh, int bw, bool adjoint) {
  out.setZero(in.rows(), in.cols());
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      const int sy = adjoint ? -dy : dy, sx = adjoint ? -dx : dx;
      for (int py = 0; py < fh; ++py) {
        const int qy = py + sy;
        if (qy < 0 || qy >= fh) continue;
        for (int px = 0; px < fw; ++px) {
          const int qx = px + sx;
          if (qx < 0 || qx >= fw) continue;
          const Eigen::Index p = py * fw + px, q = qy * fw + qx;
          for (int my = 0; my < bh; ++my) {
            const int ny = my + sy;
            if (ny < 0 || ny >= bh) continue;
            const int mx0 = std::max(0, -sx), mx1 = std::min(bw, bw - sx);
            for (int mx = mx0; mx < mx1; ++mx) out(p, my * bw + mx) += in(q, ny * bw + mx + sx);
          }
        }
      }
    }
}

}  // namespace detail

// Background patch validity on the stride grid: a patch is usable when its
// center pixel is known (mask == 0).
template <class T>
std::vector<char> background_validity(const Tensor<T>& mask, int sample, int stride) {
  const int h = mask.h(), w = mask.w();
  const int gh = (h - 1) / stride + 1, gw = (w - 1) / stride + 1;
  std::vector<char> valid(std::size_t(gh) * gw, 0);
  const T* m = mask.plane(sample, 0);
  for (int y = 0; y < gh; ++y)
    for (int x = 0; x < gw; ++x) valid[std::size_t(y) * gw + x] = m[(y * stride) * w + x * stride] == T(0);
  return valid;
}

template <class T>
bool has_known_background(const Tensor<T>& mask, int sample, int stride) {
  const auto v = background_validity(mask, sample, stride);
  return std::any_of(v.begin(), v.end(), [](char c) { return c != 0; });
}

// Scores every foreground location against every known background patch by
// cosine similarity, softmaxes over the background, and rebuilds the
// foreground by pasting the weighted raw patches back with overlap averaging.
// mask is [N,1,H,W] at feature resolution. When weights_out is given it
// receives one [P x M] attention matrix per sample (P foreground pixels, M
// background grid positions; invalid columns are zero).
//
// A sample without any known background patch raises DegenerateInputError,
// unless zero_if_degenerate is set, in which case that sample's output is
// zero and receives no gradient.
template <class T>
Var<T> contextual_attention(const Var<T>& foreground, const Var<T>& background, const Tensor<T>& mask,
                            const AttentionSpec& spec, std::vector<RowMatrix<T>>* weights_out = nullptr,
                            bool zero_if_degenerate = false) {
  spec.validate();
  require_same_shape(foreground.shape(), background.shape(), "contextual_attention foreground/background");
  const Shape s = foreground.shape();
  if (mask.n() != s.n || mask.c() != 1 || mask.h() != s.h || mask.w() != s.w)
    throw ShapeError("contextual_attention: mask " + mask.shape().str() + " does not match features " + s.str());

  const ConvGeometry fg_geo{spec.patch_size, 1, 1};
  const ConvGeometry bg_geo{spec.patch_size, spec.stride, 1};
  const int depth = s.c * spec.patch_size * spec.patch_size;
  const int positions = s.h * s.w;
  const int bh = bg_geo.out_extent(s.h), bw = bg_geo.out_extent(s.w);
  const int patches = bh * bw;
  const T eps = T(1e-4);
  const T scale = T(spec.softmax_scale);

  // overlap count of the stride-1 paste-back
  std::vector<T> overlap(std::size_t(positions), T(0));
  {
    std::vector<T> ones(std::size_t(spec.patch_size) * spec.patch_size * positions, T(1));
    detail::col2im(ones.data(), 1, s.h, s.w, fg_geo, overlap.data());
  }

  struct Saved {
    RowMatrix<T> q, k, raw_bg, attn;
    std::vector<T> fnorm, bnorm;
    std::vector<char> valid;
  };
  const bool record = grad_enabled() && (foreground.requires_grad() || background.requires_grad());
  std::vector<Saved> saved(record ? std::size_t(s.n) : 0);
  if (weights_out) weights_out->assign(std::size_t(s.n), RowMatrix<T>());

  Tensor<T> out(s);
  RowMatrix<T> xf(depth, positions), xb(depth, patches), q, k, scores, fused;
  for (int n = 0; n < s.n; ++n) {
    auto valid = background_validity(mask, n, spec.stride);
    if (std::none_of(valid.begin(), valid.end(), [](char c) { return c != 0; })) {
      if (!zero_if_degenerate)
        throw DegenerateInputError("contextual_attention: no known background patch in sample " + std::to_string(n));
      if (weights_out) (*weights_out)[std::size_t(n)] = RowMatrix<T>::Zero(positions, patches);
      continue;  // output stays zero, saved entry stays empty
    }

    detail::im2col(foreground.value().sample(n), s.c, s.h, s.w, fg_geo, xf.data());
    detail::im2col(background.value().sample(n), s.c, s.h, s.w, bg_geo, xb.data());
    auto fnorm = detail::normalize_columns(xf, q, eps);
    auto bnorm = detail::normalize_columns(xb, k, eps);
    scores.noalias() = q.transpose() * k;
    if (spec.fuse_propagation) {
      detail::propagate_scores(scores, fused, s.h, s.w, bh, bw, false);
      scores.swap(fused);
    }
    RowMatrix<T> attn = RowMatrix<T>::Zero(positions, patches);
    for (int p = 0; p < positions; ++p) {
      T peak = -std::numeric_limits<T>::infinity();
      for (int m = 0; m < patches; ++m)
        if (valid[std::size_t(m)]) peak = std::max(peak, scale * scores(p, m));
      T total = 0;
      for (int m = 0; m < patches; ++m)
        if (valid[std::size_t(m)]) total += attn(p, m) = std::exp(scale * scores(p, m) - peak);
      attn.row(p) /= total;
    }
    RowMatrix<T> recon = xb * attn.transpose();  // [depth, positions]
    T* dst = out.sample(n);
    detail::col2im(recon.data(), s.c, s.h, s.w, fg_geo, dst);
    for (int c = 0; c < s.c; ++c)
      for (int i = 0; i < positions; ++i) dst[std::size_t(c) * positions + i] /= overlap[std::size_t(i)];

    if (weights_out) (*weights_out)[std::size_t(n)] = attn;
    if (record) saved[std::size_t(n)] = Saved{q, k, xb, std::move(attn), std::move(fnorm), std::move(bnorm), std::move(valid)};
  }

  return make_result<T>(
      std::move(out), {foreground, background},
      [saved = std::move(saved), overlap = std::move(overlap), fg_geo, bg_geo, depth, positions, patches, bh, bw,
       eps, scale, fuse = spec.fuse_propagation](Node<T>& self) {
        const Shape s = self.value.shape();
        Tensor<T>* gf = detail::grad_of(self, 0);
        Tensor<T>* gb = detail::grad_of(self, 1);
        RowMatrix<T> dr(depth, positions), dxb, da, ds, tmp, dq, dk, dxf, dxb_norm;
        std::vector<T> dout(std::size_t(s.c) * positions);
        for (int n = 0; n < s.n; ++n) {
          const Saved& sv = saved[std::size_t(n)];
          if (sv.valid.empty()) continue;
          const T* g = self.grad.sample(n);
          for (int c = 0; c < s.c; ++c)
            for (int i = 0; i < positions; ++i)
              dout[std::size_t(c) * positions + i] = g[std::size_t(c) * positions + i] / overlap[std::size_t(i)];
          detail::im2col(dout.data(), s.c, s.h, s.w, fg_geo, dr.data());
          dxb.noalias() = dr * sv.attn;                   // [depth, patches]
          da.noalias() = dr.transpose() * sv.raw_bg;      // [positions, patches]
          ds.setZero(positions, patches);
          for (int p = 0; p < positions; ++p) {
            T dot = 0;
            for (int m = 0; m < patches; ++m) dot += sv.attn(p, m) * da(p, m);
            for (int m = 0; m < patches; ++m)
              if (sv.valid[std::size_t(m)]) ds(p, m) = scale * sv.attn(p, m) * (da(p, m) - dot);
          }
          if (fuse) {
            detail::propagate_scores(ds, tmp, s.h, s.w, bh, bw, true);
            ds.swap(tmp);
          }
          if (gf) {
            dq.noalias() = sv.k * ds.transpose();  // [depth, positions]
            detail::normalize_columns_backward(sv.q, sv.fnorm, eps, dq, dxf);
            detail::col2im(dxf.data(), s.c, s.h, s.w, fg_geo, gf->sample(n));
          }
          if (gb) {
            dk.noalias() = sv.q * ds;  // [depth, patches]
            detail::normalize_columns_backward(sv.k, sv.bnorm, eps, dk, dxb_norm);
            dxb += dxb_norm;
            detail::col2im(dxb.data(), s.c, s.h, s.w, bg_geo, gb->sample(n));
          }
        }
      });
}

// ---- gradient checking ---------------------------------------------------

struct GradCheckReport {
  std::string block;
  int probes = 0;
  double max_rel_error = 0;
  double tolerance = 0;
  bool passed() const { return max_rel_error < tolerance; }
};

// Compares the analytic gradient of loss() with central differences at
// probe_count randomly chosen entries of the given leaf tensors.
inline GradCheckReport grad_check(const std::string& block, std::vector<Var<double>> inputs,
                                  const std::function<Var<double>()>& loss, int probe_count, std::uint64_t seed,
                                  double tolerance, double step = 1e-5) {
  for (auto& v : inputs) {
    v.set_requires_grad(true);
    v.zero_grad();
  }
  backward(loss());
  std::vector<Tensor<double>> analytic;
  for (auto& v : inputs) analytic.push_back(v.grad());

  Rng rng(seed);
  GradCheckReport report{block, probe_count, 0.0, tolerance};
  NoGradGuard no_grad;
  for (int i = 0; i < probe_count; ++i) {
    const int which = uniform_int(rng, 0, int(inputs.size()) - 1);
    auto& value = inputs[std::size_t(which)].mutable_value();
    const auto idx = std::size_t(uniform_int(rng, 0, int(value.size()) - 1));
    const double saved = value[idx];
    value[idx] = saved + step;
    const double plus = loss().value().item();
    value[idx] = saved - step;
    const double minus = loss().value().item();
    value[idx] = saved;
    const double numeric = (plus - minus) / (2 * step);
    const double a = analytic[std::size_t(which)][idx];
    const double denom = std::max(std::abs(a), std::abs(numeric));
    const double err = denom < 1e-10 ? 0.0 : std::abs(a - numeric) / denom;
    report.max_rel_error = std::max(report.max_rel_error, err);
  }
  return report;
}

}  // namespace pyragen
