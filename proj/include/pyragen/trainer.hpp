#pragma once

// Datasets, batch sampling, the joint bottom-up training step, the Adam
// optimizer, the single-image overfit harness and checkpoints.

#include <charconv>
#include <fstream>
#include <functional>

#include <json.hpp>

#include "pyragen/adversary.hpp"
#include "pyragen/generator.hpp"
#include "pyragen/objective.hpp"

namespace pyragen {

// ---- configuration -------------------------------------------------------

enum class TrainingScheme { joint, layer_by_layer };

struct OptimizerConfig {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_number(const std::string& key, const std::string& s) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v))
    throw ConfigError("config key '" + key + "': not a number: '" + s + "'");
  return v;
}

inline long long parse_integer(const std::string& key, const std::string& s) {
  long long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ConfigError("config key '" + key + "': not an integer: '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + s + "'");
}

inline std::vector<double> parse_number_list(const std::string& key, const std::string& s) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    std::size_t end = s.find(',', start);
    if (end == std::string::npos) end = s.size();
    std::string item = s.substr(start, end - start);
    item.erase(0, item.find_first_not_of(' '));
    item.erase(item.find_last_not_of(' ') + 1);
    out.push_back(parse_number(key, item));
    start = end + 1;
  }
  return out;
}

inline std::string format_number_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_number(v[i]);
  return out;
}

struct TrainConfig {
  int levels = 3;
  int top_resolution = 128;
  int batch_size = 2;
  int steps = 1000;
  int d_steps_per_g_step = 1;  // 0 freezes the discriminators
  OptimizerConfig optimizer;
  std::uint64_t seed = 1;
  LossWeights weights = LossWeights::defaults(3);
  FusionMode fusion = FusionMode::image_refine_both;
  std::string dilation = "adaptive";  // adaptive | standard
  TrainingScheme scheme = TrainingScheme::joint;
  int base_width = 32;
  int adversary_width = 32;
  bool feed_composed = false;
  bool coarse_recon = false;  // extra L1 on the coarse output
  // training masks: center square with ratio drawn from this range, union a
  // free-form mask when enabled
  double center_ratio_min = 0.10;
  double center_ratio_max = 0.55;
  bool freeform = true;
  bool flip = true;

  std::vector<int> resolutions() const {
    std::vector<int> out;
    for (int n = 0; n < levels; ++n) out.push_back(top_resolution >> (levels - 1 - n));
    return out;
  }

  DilationPlan dilation_plan() const {
    if (dilation == "adaptive") return DilationPlan::adaptive(levels);
    if (dilation == "standard") return DilationPlan::standard(levels);
    throw ConfigError("unknown dilation plan: " + dilation);
  }

  GeneratorOptions generator_options() const {
    GeneratorOptions o;
    o.base_width = base_width;
    o.fusion = fusion;
    o.dilation = dilation_plan();
    o.feed_composed = feed_composed;
    return o;
  }

  void validate() const {
    if (levels < 2) throw ConfigError("levels must be >= 2");
    if (top_resolution <= 0 || top_resolution % (1 << (levels - 1)) != 0 ||
        (top_resolution >> (levels - 1)) % SubGenerator<float>::kDownsampling != 0)
      throw ConfigError("top_resolution " + std::to_string(top_resolution) + " must be divisible by 2^(levels-1) * 4");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (d_steps_per_g_step < 0) throw ConfigError("d_steps_per_g_step must be >= 0");
    if (!(optimizer.lr > 0) || optimizer.beta1 < 0 || optimizer.beta1 >= 1 || optimizer.beta2 < 0 ||
        optimizer.beta2 >= 1 || !(optimizer.eps > 0))
      throw ConfigError("invalid optimizer hyperparameters");
    weights.validate(levels);
    dilation_plan().validate(levels);
    if (base_width < 2 || adversary_width < 1) throw ConfigError("network widths too small");
    if (!(center_ratio_min > 0) || center_ratio_max < center_ratio_min || center_ratio_max > kMaxCenterRatio)
      throw ConfigError("center ratio range must lie in (0, 0.99]");
    if (scheme == TrainingScheme::layer_by_layer && steps < levels)
      throw ConfigError("layer_by_layer needs at least one step per level");
  }

  // Flat key/value view shared by the config file and the checkpoint hash.
  std::vector<std::pair<std::string, std::string>> fields() const {
    return {
        {"levels", std::to_string(levels)},
        {"top_resolution", std::to_string(top_resolution)},
        {"batch_size", std::to_string(batch_size)},
        {"steps", std::to_string(steps)},
        {"d_steps_per_g_step", std::to_string(d_steps_per_g_step)},
        {"lr", format_number(optimizer.lr)},
        {"beta1", format_number(optimizer.beta1)},
        {"beta2", format_number(optimizer.beta2)},
        {"eps", format_number(optimizer.eps)},
        {"seed", std::to_string(seed)},
        {"alpha", format_number(weights.alpha)},
        {"lambdas", format_number_list(weights.lambdas)},
        {"fusion", to_string(fusion)},
        {"dilation", dilation},
        {"training_scheme", scheme == TrainingScheme::joint ? "joint" : "layer_by_layer"},
        {"base_width", std::to_string(base_width)},
        {"adversary_width", std::to_string(adversary_width)},
        {"feed_composed", feed_composed ? "true" : "false"},
        {"coarse_recon", coarse_recon ? "true" : "false"},
        {"center_ratio_min", format_number(center_ratio_min)},
        {"center_ratio_max", format_number(center_ratio_max)},
        {"freeform", freeform ? "true" : "false"},
        {"flip", flip ? "true" : "false"},
    };
  }

  void set_field(const std::string& key, const std::string& value) {
    auto as_int = [&] {
      const long long v = parse_integer(key, value);
      if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
        throw ConfigError("config key '" + key + "': out of range");
      return int(v);
    };
    if (key == "levels") levels = as_int();
    else if (key == "top_resolution") top_resolution = as_int();
    else if (key == "batch_size") batch_size = as_int();
    else if (key == "steps") steps = as_int();
    else if (key == "d_steps_per_g_step") d_steps_per_g_step = as_int();
    else if (key == "lr") optimizer.lr = parse_number(key, value);
    else if (key == "beta1") optimizer.beta1 = parse_number(key, value);
    else if (key == "beta2") optimizer.beta2 = parse_number(key, value);
    else if (key == "eps") optimizer.eps = parse_number(key, value);
    else if (key == "seed") {
      const long long v = parse_integer(key, value);
      if (v < 0) throw ConfigError("config key 'seed': must be >= 0");
      seed = std::uint64_t(v);
    } else if (key == "alpha") weights.alpha = parse_number(key, value);
    else if (key == "lambdas") weights.lambdas = parse_number_list(key, value);
    else if (key == "fusion") fusion = parse_fusion(value);
    else if (key == "dilation") {
      if (value != "adaptive" && value != "standard") throw ConfigError("unknown dilation plan: " + value);
      dilation = value;
    } else if (key == "training_scheme") {
      if (value == "joint") scheme = TrainingScheme::joint;
      else if (value == "layer_by_layer") scheme = TrainingScheme::layer_by_layer;
      else throw ConfigError("unknown training scheme: " + value);
    } else if (key == "base_width") base_width = as_int();
    else if (key == "adversary_width") adversary_width = as_int();
    else if (key == "feed_composed") feed_composed = parse_bool(key, value);
    else if (key == "coarse_recon") coarse_recon = parse_bool(key, value);
    else if (key == "center_ratio_min") center_ratio_min = parse_number(key, value);
    else if (key == "center_ratio_max") center_ratio_max = parse_number(key, value);
    else if (key == "freeform") freeform = parse_bool(key, value);
    else if (key == "flip") flip = parse_bool(key, value);
    else throw ConfigError("unknown config key: " + key);
  }

  static bool is_key(const std::string& key) {
    for (const auto& [k, v] : TrainConfig{}.fields())
      if (k == key) return true;
    return false;
  }

  // Everything that shapes the model and its updates; steps may change on resume.
  std::uint64_t hash() const {
    std::string text;
    for (const auto& [k, v] : fields())
      if (k != "steps") text += k + "=" + v + "\n";
    return fnv1a(text);
  }
};

// Independent, reproducible seed streams derived from the run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// ---- datasets ------------------------------------------------------------

struct ImageSet {
  std::vector<RasterImage> images;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }
};

inline bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  for (auto& c : ext) c = char(std::tolower(static_cast<unsigned char>(c)));
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

// Every image file in the directory (sorted by name), resized and center-cropped.
inline ImageSet load_image_folder(const std::filesystem::path& dir, int size, int divisor = 1) {
  if (!std::filesystem::is_directory(dir)) throw ConfigError("dataset directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  ImageSet set;
  for (const auto& f : files) set.images.push_back(load_image(f, size, divisor));
  if (set.empty()) throw ConfigError("dataset directory has no images: " + dir.string());
  return set;
}

// Procedural texture: a color gradient plus two oriented color gratings and a
// soft stripe or checker pattern. Fully determined by (size, seed).
inline RasterImage synthetic_texture(int size, std::uint64_t seed) {
  if (size < 1) throw ArgumentError("synthetic_texture: size must be positive");
  Rng rng(seed);
  const double pi = 3.14159265358979323846;
  struct Grating {
    double fx, fy, phase, color[3];
  };
  auto color = [&](double* c, double amp) {
    for (int k = 0; k < 3; ++k) c[k] = uniform(rng, -amp, amp);
  };
  double base[3], grad_x[3], grad_y[3];
  color(base, 0.5);
  color(grad_x, 0.4);
  color(grad_y, 0.4);
  std::vector<Grating> gratings(2);
  for (auto& g : gratings) {
    const double freq = uniform(rng, 1.5, 6.0), angle = uniform(rng, 0, pi);
    g.fx = freq * std::cos(angle);
    g.fy = freq * std::sin(angle);
    g.phase = uniform(rng, 0, 2 * pi);
    color(g.color, 0.35);
  }
  const bool checker = uniform01(rng) < 0.5;
  const double cells = double(uniform_int(rng, 2, 6));
  double pattern[3];
  color(pattern, 0.25);

  RasterImage out(3, size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double u = double(x) / size, v = double(y) / size;
      double value[3];
      for (int c = 0; c < 3; ++c) value[c] = base[c] + grad_x[c] * (u - 0.5) + grad_y[c] * (v - 0.5);
      for (const auto& g : gratings) {
        const double s = std::sin(2 * pi * (g.fx * u + g.fy * v) + g.phase);
        for (int c = 0; c < 3; ++c) value[c] += g.color[c] * s;
      }
      const double a = std::tanh(4 * std::sin(pi * cells * u));
      const double p = checker ? a * std::tanh(4 * std::sin(pi * cells * v)) : a;
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = float(std::clamp(value[c] + pattern[c] * p, -1.0, 1.0));
    }
  return out;
}

inline ImageSet synthetic_corpus(int count, int size, std::uint64_t seed) {
  if (count < 1) throw ConfigError("synthetic corpus needs at least one image");
  ImageSet set;
  for (int i = 0; i < count; ++i) set.images.push_back(synthetic_texture(size, derive_seed(seed, std::uint64_t(i))));
  return set;
}

inline RasterImage flip_horizontal(const RasterImage& image) {
  RasterImage out = image;
  for (int c = 0; c < image.channels; ++c)
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x) out.at(c, y, x) = image.at(c, y, image.width - 1 - x);
  return out;
}

inline RasterImage crop(const RasterImage& image, int y0, int x0, int size) {
  RasterImage out(image.channels, size, size);
  for (int c = 0; c < image.channels; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) out.at(c, y, x) = image.at(c, y0 + y, x0 + x);
  return out;
}

// One center mask united with one free-form mask per sample, then the pyramid.
inline std::vector<PyramidSample> make_batch(const ImageSet& dataset, const TrainConfig& config, Rng& rng) {
  if (dataset.empty()) throw ConfigError("make_batch: empty dataset");
  const int top = config.top_resolution;
  BrushConfig brush;
  std::vector<PyramidSample> out;
  for (int b = 0; b < config.batch_size; ++b) {
    const auto& src = dataset.images[std::size_t(uniform_int(rng, 0, int(dataset.size()) - 1))];
    if (src.height < top || src.width < top)
      throw ConfigError("make_batch: image " + std::to_string(src.width) + "x" + std::to_string(src.height) +
                        " smaller than top resolution " + std::to_string(top));
    RasterImage image = src;
    if (src.height > top || src.width > top)
      image = crop(src, uniform_int(rng, 0, src.height - top), uniform_int(rng, 0, src.width - top), top);
    if (config.flip && uniform01(rng) < 0.5) image = flip_horizontal(image);
    HoleMask mask = gen_center_mask(top, uniform(rng, config.center_ratio_min, config.center_ratio_max));
    if (config.freeform) mask = mask_union(mask, gen_freeform_mask(top, brush, rng()));
    out.push_back(build_pyramid(image, mask, config.levels));
  }
  return out;
}

// ---- optimizer -----------------------------------------------------------

template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(ParamList<T> params, OptimizerConfig config) : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
      m_.emplace_back(p.var.shape());
      v_.emplace_back(p.var.shape());
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  void step() {
    ++steps_;
    const double c1 = 1 - std::pow(config_.beta1, double(steps_));
    const double c2 = 1 - std::pow(config_.beta2, double(steps_));
    const T b1 = T(config_.beta1), b2 = T(config_.beta2);
    const T step_size = T(config_.lr / c1), root_c2 = T(std::sqrt(c2)), eps = T(config_.eps);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Var<T>& var = params_[i].var;
      const Tensor<T>& g = var.grad();
      Tensor<T>& w = var.mutable_value();
      T* m = m_[i].data();
      T* v = v_[i].data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = b1 * m[k] + (T(1) - b1) * g[k];
        v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
        w[k] -= step_size * m[k] / (std::sqrt(v[k]) / root_c2 + eps);
      }
    }
  }

  long long steps() const { return steps_; }
  const ParamList<T>& params() const { return params_; }

  // moments as named tensors for checkpoints
  void collect_state(std::vector<std::pair<std::string, Tensor<T>*>>& out) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.push_back({params_[i].name + ".m", &m_[i]});
      out.push_back({params_[i].name + ".v", &v_[i]});
    }
  }
  void set_steps(long long s) { steps_ = s; }

 private:
  ParamList<T> params_;
  OptimizerConfig config_;
  std::vector<Tensor<T>> m_, v_;
  long long steps_ = 0;
};

// ---- tensor blobs --------------------------------------------------------

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>*>>;

inline void write_blob(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  auto put = [&](auto v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
  out.write("PYRG", 4);
  put(std::uint32_t(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put(std::uint32_t(name.size()));
    out.write(name.data(), std::streamsize(name.size()));
    const Shape s = t->shape();
    for (int d : {s.n, s.c, s.h, s.w}) put(std::int32_t(d));
    out.write(reinterpret_cast<const char*>(t->data()), std::streamsize(t->size() * sizeof(float)));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

// Fills the given tensors by name; names and shapes must match exactly.
inline void read_blob(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  auto get = [&](auto& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw IoError("truncated blob: " + path.string());
  };
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "PYRG") throw IoError("not a tensor blob: " + path.string());
  std::uint32_t count = 0;
  get(count);
  if (count != tensors.size())
    throw ConfigError(path.string() + ": holds " + std::to_string(count) + " tensors, model expects " +
                      std::to_string(tensors.size()));
  for (const auto& [name, t] : tensors) {
    std::uint32_t len = 0;
    get(len);
    std::string stored(len, '\0');
    in.read(stored.data(), len);
    std::int32_t d[4];
    for (auto& x : d) get(x);
    const Shape s{d[0], d[1], d[2], d[3]};
    if (stored != name || !(s == t->shape()))
      throw ConfigError(path.string() + ": found " + stored + " " + s.str() + ", expected " + name + " " +
                        t->shape().str());
    in.read(reinterpret_cast<char*>(t->data()), std::streamsize(t->size() * sizeof(float)));
    if (!in) throw IoError("truncated blob: " + path.string());
  }
}

// ---- trainer -------------------------------------------------------------

inline bool all_finite(const LossReport& r) {
  if (!std::isfinite(r.total_generator)) return false;
  for (const auto& l : r.levels)
    if (!std::isfinite(l.recon) || !std::isfinite(l.gen_adv) || !std::isfinite(l.disc)) return false;
  return true;
}

inline std::string describe(const LossReport& r) {
  std::ostringstream os;
  os << "total_generator=" << r.total_generator;
  for (std::size_t n = 0; n < r.levels.size(); ++n)
    os << " | L" << n << " recon=" << r.levels[n].recon << " gen_adv=" << r.levels[n].gen_adv
       << " disc=" << r.levels[n].disc;
  return os.str();
}

inline nlohmann::json to_json(const LossReport& r, long long step) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& l : r.levels) levels.push_back({{"recon", l.recon}, {"gen_adv", l.gen_adv}, {"disc", l.disc}});
  return {{"step", step}, {"total_generator", r.total_generator}, {"levels", levels}};
}

// Top-level hole-region mean absolute error on the [-1, 1] scale; 0 without holes.
inline double hole_l1(const Tensor<float>& generated, const Tensor<float>& truth, const Tensor<float>& mask) {
  require_same_shape(generated.shape(), truth.shape(), "hole_l1");
  const Shape s = truth.shape();
  double acc = 0;
  std::size_t count = 0;
  for (int n = 0; n < s.n; ++n) {
    const float* m = mask.plane(n, 0);
    for (int c = 0; c < s.c; ++c) {
      const float* a = generated.plane(n, c);
      const float* b = truth.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i)
        if (m[i] != 0.f) {
          acc += std::abs(double(a[i]) - double(b[i]));
          ++count;
        }
    }
  }
  return count ? acc / double(count) : 0.0;
}

class Trainer {
 public:
  static constexpr std::uint64_t kGeneratorStream = 1, kDataStream = 2, kAdversaryStream = 100;

  explicit Trainer(TrainConfig config) : config_(std::move(config)) {
    config_.validate();
    generator_ = PyramidGenerator<float>(config_.levels, config_.generator_options(),
                                         derive_seed(config_.seed, kGeneratorStream));
    const int depth = adversary_depth_for(config_.top_resolution);
    for (int n = 0; n < config_.levels; ++n) {
      adversaries_.emplace_back("D" + std::to_string(n), config_.adversary_width, depth,
                                derive_seed(config_.seed, kAdversaryStream + std::uint64_t(n)));
      g_opt_.emplace_back(generator_.level_parameters(n), config_.optimizer);
      ParamList<float> dp;
      adversaries_.back().collect(dp);
      d_opt_.emplace_back(std::move(dp), config_.optimizer);
    }
    data_rng_.seed(derive_seed(config_.seed, kDataStream));
    running_.assign(std::size_t(config_.levels), 0.0);
  }

  const TrainConfig& config() const { return config_; }
  long long step() const { return step_; }
  PyramidGenerator<float>& generator() { return generator_; }
  const PyramidGenerator<float>& generator() const { return generator_; }
  std::vector<LevelAdversary<float>>& adversaries() { return adversaries_; }
  Rng& data_rng() { return data_rng_; }
  // exponential moving average of each level's L_n
  const std::vector<double>& running_losses() const { return running_; }

  // Highest level trained at this step; lower levels are fixed in layer_by_layer.
  int active_level() const {
    if (config_.scheme == TrainingScheme::joint) return config_.levels - 1;
    return int(std::min<long long>(config_.levels - 1, step_ * config_.levels / config_.steps));
  }

  PyramidBatch<float> sample_batch(const ImageSet& data) {
    return make_pyramid_batch<float>(make_batch(data, config_, data_rng_));
  }

  LossReport train_step(const ImageSet& data) { return train_step(sample_batch(data)); }

  LossReport train_step(const PyramidBatch<float>& batch) {
    const int L = config_.levels;
    if (batch.levels() != L)
      throw ConfigError("train_step: batch has " + std::to_string(batch.levels()) + " levels, model " +
                        std::to_string(L));
    const int top = active_level();
    const int first = config_.scheme == TrainingScheme::joint ? 0 : top;

    std::vector<LevelOutput<float>> out;
    for (int n = 0; n <= top; ++n) {
      if (n < first) {
        NoGradGuard guard;
        out.push_back(generator_.forward_level(n, batch, n ? &out.back() : nullptr));
      } else {
        out.push_back(generator_.forward_level(n, batch, n ? &out.back() : nullptr));
      }
    }

    LossReport report;
    report.levels.resize(std::size_t(L));
    report.disc_totals.assign(std::size_t(L), 0.0);
    // hinge relus hide NaN fakes from the discriminator loss, so check outputs first
    for (int n = first; n <= top; ++n)
      report.levels[std::size_t(n)].recon =
          recon_loss(out[std::size_t(n)].refined.value().span(), batch.images[std::size_t(n)].span());
    if (!all_finite(report))
      throw NumericalError("non-finite generator output at step " + std::to_string(step_) + ": " + describe(report));

    // (1) each discriminator on its own level, fakes detached
    for (int n = first; n <= top; ++n) {
      auto& d = adversaries_[std::size_t(n)];
      const auto& real = batch.images[std::size_t(n)];
      const auto& mask = batch.masks[std::size_t(n)];
      Tensor<float> fake;
      {
        NoGradGuard guard;
        fake = compose(out[std::size_t(n)].refined.detach(), Var<float>(real), mask).value();
      }
      if (config_.d_steps_per_g_step == 0) {
        NoGradGuard guard;
        report.levels[std::size_t(n)].disc = disc_hinge(d(Var<float>(real), mask), d(Var<float>(fake), mask)).value().item();
      }
      for (int s = 0; s < config_.d_steps_per_g_step; ++s) {
        auto& opt = d_opt_[std::size_t(n)];
        opt.zero_grad();
        const Var<float> loss = disc_hinge(d(Var<float>(real), mask, true), d(Var<float>(fake), mask));
        const double value = loss.value().item();
        if (s == 0) report.levels[std::size_t(n)].disc = value;
        if (!std::isfinite(value))
          throw NumericalError("non-finite discriminator loss at step " + std::to_string(step_) + ", level " +
                               std::to_string(n) + ": " + describe(report));
        backward(loss);
        opt.step();
      }
      report.disc_totals[std::size_t(n)] = report.levels[std::size_t(n)].disc;
    }

    // (2) one generator update on the weighted pyramid loss, discriminators fixed
    std::vector<Var<float>> layer_losses;
    for (auto& d : adversaries_) set_requires_grad(d, false);
    for (int n = 0; n < L; ++n) {
      if (n < first || n > top) {
        layer_losses.emplace_back(Tensor<float>(Shape{}, 0.f));
        continue;
      }
      const auto& o = out[std::size_t(n)];
      const auto& real = batch.images[std::size_t(n)];
      const auto& mask = batch.masks[std::size_t(n)];
      const Var<float> composed = compose(o.refined, Var<float>(real), mask);
      const Var<float> adv = gen_hinge(adversaries_[std::size_t(n)](composed, mask));
      Var<float> recon = recon_loss(o.refined, real);
      if (config_.coarse_recon) recon = add(recon, recon_loss(o.coarse, real));
      report.levels[std::size_t(n)].recon = recon.value().item();
      report.levels[std::size_t(n)].gen_adv = adv.value().item();
      layer_losses.push_back(layer_loss(recon, adv, config_.weights.alpha));
    }
    for (auto& d : adversaries_) set_requires_grad(d, true);
    const Var<float> total = pyramid_loss(layer_losses, config_.weights);
    report.total_generator = total.value().item();
    if (!all_finite(report))
      throw NumericalError("non-finite loss at step " + std::to_string(step_) + ": " + describe(report));

    for (int n = first; n <= top; ++n) g_opt_[std::size_t(n)].zero_grad();
    backward(total);
    for (int n = first; n <= top; ++n) g_opt_[std::size_t(n)].step();

    for (int n = 0; n < L; ++n) {
      const double l = report.levels[std::size_t(n)].gen_adv + config_.weights.alpha * report.levels[std::size_t(n)].recon;
      running_[std::size_t(n)] = step_ == 0 ? l : 0.99 * running_[std::size_t(n)] + 0.01 * l;
    }
    ++step_;
    return report;
  }

  // No-grad forward of the whole pyramid.
  std::vector<LevelOutput<float>> infer(const PyramidBatch<float>& batch) const {
    NoGradGuard guard;
    return generator_.forward(batch);
  }

  // Top level, one row per sample: masked input | coarse | refined | composed | truth.
  RasterImage preview(const PyramidBatch<float>& batch) const {
    const auto out = infer(batch);
    const auto& image = batch.images.back();
    const auto& mask = batch.masks.back();
    std::vector<RasterImage> rows;
    for (int i = 0; i < image.n(); ++i) {
      const RasterImage truth = from_tensor(image, i);
      const HoleMask m = to_hole_mask(mask, i);
      const RasterImage refined = from_tensor(out.back().refined.value(), i);
      rows.push_back(hconcat({zero_holes(truth, m), from_tensor(out.back().coarse.value(), i), refined,
                              pyragen::compose(refined, truth, m), truth}));
    }
    return vconcat(rows);
  }

  // ---- checkpoints ----

  void save(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::path tmp = dir;
    tmp += ".tmp";
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    for (int n = 0; n < config_.levels; ++n) {
      write_blob(tmp / ("G" + std::to_string(n) + ".bin"), generator_tensors(n));
      write_blob(tmp / ("D" + std::to_string(n) + ".bin"), adversary_tensors(n));
    }
    write_blob(tmp / "optimizer.bin", optimizer_tensors());

    std::ostringstream rng_state;
    rng_state << data_rng_;
    nlohmann::json config = nlohmann::json::object();
    for (const auto& [k, v] : config_.fields()) config[k] = v;
    nlohmann::json opt_steps = nlohmann::json::array();
    for (int n = 0; n < config_.levels; ++n)
      opt_steps.push_back({g_opt_[std::size_t(n)].steps(), d_opt_[std::size_t(n)].steps()});
    const nlohmann::json manifest = {
        {"format", 1},
        {"config_hash", hex64(config_.hash())},
        {"config", config},
        {"levels", config_.levels},
        {"step", step_},
        {"seed", config_.seed},
        {"rng_state", rng_state.str()},
        {"optimizer_steps", opt_steps},
        {"running_losses", running_},
    };
    std::ofstream(tmp / "manifest.json") << manifest.dump(2) << "\n";

    fs::path old = dir;
    old += ".old";
    fs::remove_all(old);
    if (fs::exists(dir)) fs::rename(dir, old);
    fs::rename(tmp, dir);
    fs::remove_all(old);
  }

  static nlohmann::json read_manifest(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw IoError("no checkpoint manifest in " + dir.string());
    try {
      return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("corrupt checkpoint manifest in " + dir.string() + ": " + e.what());
    }
  }

  // The configuration stored with a checkpoint.
  static TrainConfig checkpoint_config(const std::filesystem::path& dir) {
    const auto manifest = read_manifest(dir);
    TrainConfig c;
    for (const auto& [k, v] : manifest.at("config").items()) c.set_field(k, v.get<std::string>());
    return c;
  }

  // Resume with the given config; a different hash is refused unless allowed.
  static Trainer load(const std::filesystem::path& dir, const TrainConfig& config, bool allow_mismatch = false) {
    const auto manifest = read_manifest(dir);
    const int levels = manifest.at("levels").get<int>();
    if (levels != config.levels)
      throw ConfigError("checkpoint has " + std::to_string(levels) + " levels, config asks for " +
                        std::to_string(config.levels));
    const std::string stored = manifest.at("config_hash").get<std::string>();
    if (stored != hex64(config.hash()) && !allow_mismatch)
      throw ConfigError("checkpoint config hash " + stored + " differs from " + hex64(config.hash()) +
                        "; pass the override to resume anyway");
    Trainer t(config);
    for (int n = 0; n < levels; ++n) {
      read_blob(dir / ("G" + std::to_string(n) + ".bin"), t.generator_tensors(n));
      read_blob(dir / ("D" + std::to_string(n) + ".bin"), t.adversary_tensors(n));
    }
    read_blob(dir / "optimizer.bin", t.optimizer_tensors());
    const auto& opt_steps = manifest.at("optimizer_steps");
    for (int n = 0; n < levels; ++n) {
      t.g_opt_[std::size_t(n)].set_steps(opt_steps.at(std::size_t(n)).at(0).get<long long>());
      t.d_opt_[std::size_t(n)].set_steps(opt_steps.at(std::size_t(n)).at(1).get<long long>());
    }
    t.step_ = manifest.at("step").get<long long>();
    std::istringstream rng_state(manifest.at("rng_state").get<std::string>());
    rng_state >> t.data_rng_;
    if (!rng_state) throw IoError("corrupt rng state in " + dir.string());
    t.running_ = manifest.at("running_losses").get<std::vector<double>>();
    return t;
  }

  // Generator weights only, for inference.
  static PyramidGenerator<float> load_generator(const std::filesystem::path& dir) {
    Trainer t(checkpoint_config(dir));
    for (int n = 0; n < t.config_.levels; ++n) read_blob(dir / ("G" + std::to_string(n) + ".bin"), t.generator_tensors(n));
    return t.generator_;
  }

 private:
  static HoleMask to_hole_mask(const Tensor<float>& mask, int sample) {
    HoleMask m(mask.h(), mask.w());
    const float* p = mask.plane(sample, 0);
    for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] = p[i] != 0.f ? 1 : 0;
    return m;
  }

  static void set_requires_grad(const LevelAdversary<float>& d, bool on) {
    ParamList<float> params;
    d.collect(params);
    for (auto& p : params) p.var.set_requires_grad(on);
  }

  NamedTensors generator_tensors(int n) {
    NamedTensors out;
    for (auto& p : generator_.level_parameters(n)) out.push_back({p.name, &p.var.mutable_value()});
    return out;
  }

  NamedTensors adversary_tensors(int n) {
    NamedTensors out;
    ParamList<float> params;
    adversaries_[std::size_t(n)].collect(params);
    for (auto& p : params) out.push_back({p.name, &p.var.mutable_value()});
    adversaries_[std::size_t(n)].collect_state(out);
    return out;
  }

  NamedTensors optimizer_tensors() {
    NamedTensors out;
    for (auto& o : g_opt_) o.collect_state(out);
    for (auto& o : d_opt_) o.collect_state(out);
    return out;
  }

  TrainConfig config_;
  PyramidGenerator<float> generator_;
  std::vector<LevelAdversary<float>> adversaries_;
  std::vector<Adam<float>> g_opt_, d_opt_;
  Rng data_rng_;
  long long step_ = 0;
  std::vector<double> running_;
};

// ---- overfit harness -----------------------------------------------------

struct OverfitResult {
  double final_hole_l1 = 0;      // [-1, 1] scale
  std::vector<double> curve;     // top-level recon loss per step
};

// Trains on one fixed image and mask (no flips, no mask resampling).
inline OverfitResult overfit_single(const RasterImage& image, const HoleMask& mask, const TrainConfig& config,
                                    const std::function<void(long long, const LossReport&)>& on_step = {}) {
  Trainer trainer(config);
  if (image.height != config.top_resolution || image.width != config.top_resolution)
    throw ConfigError("overfit_single: image must match top_resolution");
  const auto batch = make_pyramid_batch<float>(
      std::vector<PyramidSample>(std::size_t(config.batch_size), build_pyramid(image, mask, config.levels)));
  OverfitResult result;
  for (int s = 0; s < config.steps; ++s) {
    const auto report = trainer.train_step(batch);
    result.curve.push_back(report.levels.back().recon);
    if (on_step) on_step(s, report);
  }
  const auto out = trainer.infer(batch);
  const Tensor<float> composed =
      compose(out.back().refined, Var<float>(batch.images.back()), batch.masks.back()).value();
  result.final_hole_l1 = hole_l1(composed, batch.images.back(), batch.masks.back());
  return result;
}

// Moving average of width `window`; entry i averages curve[i .. i+window).
inline std::vector<double> moving_average(const std::vector<double>& curve, std::size_t window) {
  std::vector<double> out;
  if (window == 0 || curve.size() < window) return out;
  double acc = 0;
  for (std::size_t i = 0; i < window; ++i) acc += curve[i];
  out.push_back(acc / double(window));
  for (std::size_t i = window; i < curve.size(); ++i) {
    acc += curve[i] - curve[i - window];
    out.push_back(acc / double(window));
  }
  return out;
}

// True if, over the last `span` entries, no value exceeds the running minimum
// of the earlier ones by more than `tolerance` (relative).
inline bool non_increasing_within(const std::vector<double>& values, std::size_t span, double tolerance) {
  if (values.size() < span || span == 0) return false;
  double best = values[values.size() - span];
  for (std::size_t i = values.size() - span + 1; i < values.size(); ++i) {
    if (values[i] > best * (1 + tolerance)) return false;
    best = std::min(best, values[i]);
  }
  return true;
}

}  // namespace pyragen
