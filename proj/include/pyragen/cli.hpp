#pragma once

// Run configuration (sectioned key = value files) and the command-line
// subcommands that drive training, inpainting, evaluation and sweeps.

#include <chrono>
#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>
#include <boost/property_tree/ini_parser.hpp>

#include "pyragen/evalkit.hpp"

namespace pyragen {

// ---- run configuration ---------------------------------------------------

struct DataConfig {
  std::string train_dir;        // image folder; empty selects the synthetic corpus
  int synthetic_count = 2000;
  std::uint64_t synthetic_seed = 1;
  std::string eval_dir;         // empty selects a synthetic evaluation set
  int eval_count = 100;
  std::uint64_t eval_seed = 2;
};

struct OutputConfig {
  std::string dir;  // empty falls back to $PYRAGEN_OUT
  std::string label = "pyragen";
  int sample_every = 0;      // 0 disables sample grids
  int checkpoint_every = 0;  // 0 saves only at the end
};

struct RunConfig {
  TrainConfig train;
  DataConfig data;
  OutputConfig output;

  bool operator==(const RunConfig& o) const { return to_ini() == o.to_ini(); }

  // section -> ordered (key, value)
  std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> sections() const {
    static const std::vector<std::pair<std::string, std::vector<std::string>>> layout{
        {"model", {"levels", "top_resolution", "base_width", "adversary_width", "fusion", "dilation", "feed_composed"}},
        {"training", {"steps", "batch_size", "d_steps_per_g_step", "training_scheme", "seed"}},
        {"optimizer", {"lr", "beta1", "beta2", "eps"}},
        {"loss", {"alpha", "lambdas", "coarse_recon"}},
        {"sampling", {"center_ratio_min", "center_ratio_max", "freeform", "flip"}},
    };
    const auto fields = train.fields();
    auto value_of = [&](const std::string& key) {
      for (const auto& [k, v] : fields)
        if (k == key) return v;
      throw std::logic_error("config layout names unknown key " + key);
    };
    std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> out;
    for (const auto& [section, keys] : layout) {
      out.push_back({section, {}});
      for (const auto& k : keys) out.back().second.push_back({k, value_of(k)});
    }
    out.push_back({"data",
                   {{"train_dir", data.train_dir},
                    {"synthetic_count", std::to_string(data.synthetic_count)},
                    {"synthetic_seed", std::to_string(data.synthetic_seed)},
                    {"eval_dir", data.eval_dir},
                    {"eval_count", std::to_string(data.eval_count)},
                    {"eval_seed", std::to_string(data.eval_seed)}}});
    out.push_back({"output",
                   {{"dir", output.dir},
                    {"label", output.label},
                    {"sample_every", std::to_string(output.sample_every)},
                    {"checkpoint_every", std::to_string(output.checkpoint_every)}}});
    return out;
  }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    bool known = false;
    for (const auto& [s, kv] : sections())
      for (const auto& [k, v] : kv) known = known || (s == section && k == key);
    if (!known) throw ConfigError("unknown config key: [" + section + "] " + key);
    auto as_int = [&] { return int(parse_integer(key, value)); };
    auto as_seed = [&] {
      const long long v = parse_integer(key, value);
      if (v < 0) throw ConfigError("config key '" + key + "': must be >= 0");
      return std::uint64_t(v);
    };
    if (section == "data") {
      if (key == "train_dir") data.train_dir = value;
      else if (key == "synthetic_count") data.synthetic_count = as_int();
      else if (key == "synthetic_seed") data.synthetic_seed = as_seed();
      else if (key == "eval_dir") data.eval_dir = value;
      else if (key == "eval_count") data.eval_count = as_int();
      else if (key == "eval_seed") data.eval_seed = as_seed();
    } else if (section == "output") {
      if (key == "dir") output.dir = value;
      else if (key == "label") output.label = value;
      else if (key == "sample_every") output.sample_every = as_int();
      else if (key == "checkpoint_every") output.checkpoint_every = as_int();
    } else {
      train.set_field(key, value);
    }
  }

  void validate() const {
    train.validate();
    if (data.train_dir.empty() && data.synthetic_count < 1)
      throw ConfigError("[data] needs train_dir or a positive synthetic_count");
    if (data.eval_count < 1) throw ConfigError("[data] eval_count must be >= 1");
    if (output.sample_every < 0 || output.checkpoint_every < 0)
      throw ConfigError("[output] cadences must be >= 0");
  }

  std::string to_ini() const {
    std::string out;
    for (const auto& [section, kv] : sections()) {
      out += "[" + section + "]\n";
      for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
      out += "\n";
    }
    return out;
  }

  static RunConfig parse(std::istream& in, const std::string& origin = "config") {
    boost::property_tree::ptree tree;
    try {
      boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(origin + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    RunConfig c;
    for (const auto& [section, body] : tree) {
      if (body.empty()) throw ConfigError("unknown config key: " + section + " (keys must sit in a section)");
      for (const auto& [key, value] : body) c.set(section, key, value.data());
    }
    c.validate();
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file: " + path.string());
    return parse(in, path.string());
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write config file: " + path.string());
    out << to_ini();
  }
};

// ---- helpers -------------------------------------------------------------

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;

// --out, then the config's output dir, then $PYRAGEN_OUT.
inline std::filesystem::path resolve_out(const std::string& flag, const std::string& configured = "") {
  if (!flag.empty()) return flag;
  if (!configured.empty()) return configured;
  if (const char* env = std::getenv("PYRAGEN_OUT"); env && *env) return env;
  throw ArgumentError("no output directory: pass --out or set PYRAGEN_OUT");
}

// Image at its stored size.
inline RasterImage load_image_native(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot decode image: " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return from_mat(rgb);
}

inline ImageSet training_set(const RunConfig& c) {
  if (!c.data.train_dir.empty())
    return load_image_folder(c.data.train_dir, c.train.top_resolution, 1 << (c.train.levels - 1));
  return synthetic_corpus(c.data.synthetic_count, c.train.top_resolution, c.data.synthetic_seed);
}

inline ImageSet evaluation_set(const std::string& dir, int count, std::uint64_t seed, int size, int divisor) {
  if (!dir.empty()) return load_image_folder(dir, size, divisor);
  return synthetic_corpus(count, size, seed);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

inline std::string zero_pad(long long v, int width) {
  std::string s = std::to_string(v);
  return std::string(std::size_t(std::max(0, width - int(s.size()))), '0') + s;
}

// ---- commands ------------------------------------------------------------

struct TrainOptions {
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string resume;
  bool allow_config_mismatch = false;
  bool quiet = false;
};

// Trains to the configured step count. Layout of the output directory:
// checkpoint/, train_log.jsonl, timing.jsonl, samples/, config.ini.
inline void cmd_train(RunConfig config, const TrainOptions& opt) {
  namespace fs = std::filesystem;
  if (opt.seed) config.train.seed = *opt.seed;
  config.validate();
  const fs::path out = resolve_out(opt.out, config.output.dir);
  const ImageSet data = training_set(config);
  fs::create_directories(out);
  config.save(out / "config.ini");

  Trainer trainer = opt.resume.empty() ? Trainer(config.train)
                                       : Trainer::load(opt.resume, config.train, opt.allow_config_mismatch);
  const bool append = !opt.resume.empty();
  std::ofstream log(out / "train_log.jsonl", append ? std::ios::app : std::ios::trunc);
  std::ofstream timing(out / "timing.jsonl", append ? std::ios::app : std::ios::trunc);
  if (!log || !timing) throw IoError("cannot open training logs in " + out.string());
  if (config.output.sample_every > 0) fs::create_directories(out / "samples");

  // fixed preview batch, drawn from its own stream so training batches are unaffected
  Rng preview_rng(derive_seed(config.train.seed, 3));
  const auto preview = make_pyramid_batch<float>(make_batch(data, config.train, preview_rng));

  const auto start = std::chrono::steady_clock::now();
  while (trainer.step() < config.train.steps) {
    const long long step = trainer.step();
    const auto report = trainer.train_step(data);
    log << to_json(report, step).dump() << "\n";
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    timing << nlohmann::json{{"step", step}, {"wall_time_s", wall}}.dump() << "\n";
    const long long done = trainer.step();
    if (config.output.sample_every > 0 && done % config.output.sample_every == 0)
      save_image(out / "samples" / ("step_" + zero_pad(done, 7) + ".png"), trainer.preview(preview));
    if (config.output.checkpoint_every > 0 && done % config.output.checkpoint_every == 0 && done < config.train.steps)
      trainer.save(out / "checkpoint");
    if (!opt.quiet && (done % 50 == 0 || done == config.train.steps))
      std::cerr << "step " << done << "/" << config.train.steps << "  " << describe(report) << "\n";
  }
  log.flush();
  trainer.save(out / "checkpoint");
}

inline void cmd_inpaint(const std::string& checkpoint, const std::string& image_path, const std::string& mask_path,
                        const std::string& out_path) {
  const InpaintModel model = load_model(checkpoint);
  const RasterImage image = load_image_native(image_path);
  const HoleMask mask = load_mask(mask_path);
  if (mask.height != image.height || mask.width != image.width)
    throw ArgumentError("image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                        " and mask " + std::to_string(mask.width) + "x" + std::to_string(mask.height) +
                        " differ in size");
  const int g = size_granularity(model.levels());
  if (image.height % g || image.width % g)
    throw ArgumentError("image size must be a multiple of " + std::to_string(g));
  const std::filesystem::path out(out_path);
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  save_image(out, inpaint(model, image, mask));
}

inline void write_rows(const std::filesystem::path& out, const std::string& stem, const std::vector<MetricRow>& rows) {
  std::filesystem::create_directories(out);
  write_text(out / (stem + ".csv"), metric_csv(rows));
  write_text(out / (stem + ".json"), summary_json(rows).dump(2) + "\n");
}

struct EvalData {
  std::string dir;
  int count = 100;
  std::uint64_t seed = 2;
};

inline MetricRow cmd_eval(const std::string& checkpoint, const EvalData& d, const std::string& mask_mode, double ratio,
                          const std::string& out) {
  const InpaintModel model = load_model(checkpoint);
  const ImageSet data = evaluation_set(d.dir, d.count, d.seed, model.top_resolution(), size_granularity(model.levels()));
  const MetricRow row = evaluate(model, data, mask_mode, ratio, d.seed);
  write_rows(out, "eval", {row});
  const auto masks = mask_mode == "center" ? center_masks(data, ratio) : freeform_masks(data, d.seed);
  save_image(std::filesystem::path(out) / "eval_sheet.png",
             contact_sheet(data.images, masks, inpaint_all(model, data.images, masks)));
  return row;
}

inline std::vector<MetricRow> cmd_sweep_hole(const std::string& checkpoint, const EvalData& d,
                                             const std::vector<double>& ratios, const std::string& out) {
  const InpaintModel model = load_model(checkpoint);
  const ImageSet data = evaluation_set(d.dir, d.count, d.seed, model.top_resolution(), size_granularity(model.levels()));
  const auto rows = hole_sweep(model, data, ratios);
  write_rows(out, "sweep_hole", rows);
  std::vector<RasterImage> sheet_rows;
  for (double r : ratios) {
    const ImageSet one{{data.images.front()}};
    const auto masks = center_masks(one, r);
    sheet_rows.push_back(contact_sheet(one.images, masks, inpaint_all(model, one.images, masks)));
  }
  save_image(std::filesystem::path(out) / "sweep_hole_sheet.png", vconcat(sheet_rows));
  return rows;
}

inline std::vector<int> parse_sizes(const std::string& spec) {
  std::vector<int> out;
  try {
    for (double v : parse_number_list("sizes", spec)) {
      if (v != std::floor(v) || v < 1) throw ConfigError("");
      out.push_back(int(v));
    }
  } catch (const ConfigError&) {
    throw ArgumentError("sizes must be a comma-separated list of positive integers, got '" + spec + "'");
  }
  return out;
}

inline std::vector<MetricRow> cmd_sweep_res(const std::string& checkpoint, const EvalData& d,
                                            const std::vector<int>& sizes, const std::string& out) {
  const InpaintModel model = load_model(checkpoint);
  const int g = size_granularity(model.levels());
  const auto rows = resolution_sweep(
      model, [&](int size) { return evaluation_set(d.dir, d.count, d.seed, size, g); }, sizes);
  write_rows(out, "sweep_res", rows);
  return rows;
}

inline std::vector<AblationResult> cmd_ablate(const RunConfig& config, const std::vector<std::string>& variants,
                                              const std::string& out_flag, bool quiet = false) {
  config.validate();
  const std::filesystem::path out = resolve_out(out_flag, config.output.dir);
  for (const auto& v : variants) find_variant(v);
  const ImageSet train = training_set(config);
  const ImageSet eval = evaluation_set(config.data.eval_dir, config.data.eval_count, config.data.eval_seed,
                                       config.train.top_resolution, size_granularity(config.train.levels));
  std::vector<AblationResult> results;
  std::vector<MetricRow> rows;
  nlohmann::json refs = nlohmann::json::object();
  for (const auto& v : variants) {
    if (!quiet) std::cerr << "ablation variant " << v << "\n";
    results.push_back(run_ablation(v, config.train, train, eval, [&](long long s, const LossReport& r) {
      if (!quiet && (s + 1) % 100 == 0) std::cerr << "  " << v << " step " << s + 1 << "  " << describe(r) << "\n";
    }));
    rows.push_back(results.back().row);
    const auto& ref = results.back().reference;
    refs[v] = ref ? nlohmann::json{{"ssim", ref->ssim}, {"psnr", ref->psnr}, {"l1", ref->l1}} : nlohmann::json(nullptr);
  }
  std::filesystem::create_directories(out);
  write_text(out / "ablation.csv", metric_csv(rows));
  nlohmann::json summary = summary_json(rows);
  summary["reported"] = refs;
  write_text(out / "ablation.json", summary.dump(2) + "\n");
  write_text(out / "ablation.txt", ablation_table(results));
  return results;
}

// Finite-difference checks of the differentiable blocks on small double probes.
inline std::vector<GradCheckReport> gradcheck_suite(std::uint64_t seed) {
  Rng rng(seed);
  auto random = [&](Shape s) {
    Tensor<double> t(s);
    for (auto& v : t.span()) v = uniform(rng, -1, 1);
    return t;
  };
  std::vector<GradCheckReport> out;

  {
    GatedConv<double> layer("gated", ConvSpec{3, 4, 3, 1, 2, Activation::elu}, rng);
    Var<double> x(random({1, 3, 8, 8}), true);
    ParamList<double> params;
    layer.collect(params);
    std::vector<Var<double>> vars{x};
    for (auto& p : params) vars.push_back(p.var);
    out.push_back(grad_check("gated_conv", vars, [&] { return mean(layer(x)); }, 60, seed + 1, 1e-4));
  }
  {
    Var<double> fg(random({1, 4, 8, 8}), true);
    Tensor<double> mask({1, 1, 8, 8});
    for (int y = 2; y < 6; ++y)
      for (int x = 2; x < 6; ++x) mask.at(0, 0, y, x) = 1;
    const Tensor<double> probe = random({1, 4, 8, 8});
    AttentionSpec spec;
    out.push_back(grad_check(
        "contextual_attention", {fg},
        [&] { return mean(mul(contextual_attention<double>(fg, fg, mask, spec), Var<double>(probe))); }, 60, seed + 2,
        1e-3));
  }
  {
    SpectralNormConv<double> layer("sn", ConvSpec{3, 4, 3, 2, 1, Activation::leaky}, rng);
    Var<double> x(random({1, 3, 8, 8}), true);
    ParamList<double> params;
    layer.collect(params);
    std::vector<Var<double>> vars{x};
    for (auto& p : params) vars.push_back(p.var);
    out.push_back(grad_check("spectral_norm_conv", vars, [&] { return mean(layer(x, false)); }, 60, seed + 3, 1e-4));
  }
  {
    // probes kept away from the hinge and L1 kinks
    auto away = [&](Shape s) {
      Tensor<double> t(s);
      for (auto& v : t.span()) {
        do v = uniform(rng, -3, 3);
        while (std::abs(std::abs(v) - 1) < 0.05 || std::abs(v) < 0.05);
      }
      return t;
    };
    Var<double> real(away({1, 1, 4, 4}), true), fake(away({1, 1, 4, 4}), true);
    out.push_back(grad_check("disc_hinge", {real, fake}, [&] { return disc_hinge(real, fake); }, 32, seed + 4, 1e-6));
    out.push_back(grad_check("gen_hinge", {fake}, [&] { return gen_hinge(fake); }, 16, seed + 5, 1e-6));
    Var<double> gen(away({1, 3, 4, 4}), true);
    const Tensor<double> zero({1, 3, 4, 4});
    out.push_back(grad_check("recon", {gen}, [&] { return recon_loss(gen, zero); }, 32, seed + 6, 1e-6));
    Var<double> r(random({}), true), g(random({}), true), l1(random({}), true), l2(random({}), true);
    out.push_back(grad_check("layer_loss", {r, g}, [&] { return layer_loss(r, g, 1.3); }, 8, seed + 7, 1e-6));
    out.push_back(grad_check(
        "pyramid_loss", {r, l1, l2}, [&] { return pyramid_loss<double>({r, l1, l2}, LossWeights::defaults(3)); }, 8,
        seed + 8, 1e-6));
  }
  return out;
}

inline bool cmd_gradcheck(std::uint64_t seed, const std::string& out) {
  const auto reports = gradcheck_suite(seed);
  nlohmann::json j = nlohmann::json::array();
  bool ok = true;
  for (const auto& r : reports) {
    j.push_back({{"block", r.block}, {"max_rel_error", r.max_rel_error}, {"tolerance", r.tolerance},
                 {"passed", r.passed()}});
    ok = ok && r.passed();
    std::cout << r.block << "  max relative error " << r.max_rel_error << "  (tolerance " << r.tolerance << ")  "
              << (r.passed() ? "ok" : "FAILED") << "\n";
  }
  std::filesystem::create_directories(out);
  write_text(std::filesystem::path(out) / "gradcheck.json", j.dump(2) + "\n");
  return ok;
}

inline void cmd_make_corpus(const std::string& out, int count, int size, std::uint64_t seed) {
  if (count < 1 || size < 1) throw ArgumentError("make-corpus: count and size must be positive");
  std::filesystem::create_directories(out);
  for (int i = 0; i < count; ++i)
    save_image(std::filesystem::path(out) / ("texture_" + zero_pad(i, 5) + ".png"),
               synthetic_texture(size, derive_seed(seed, std::uint64_t(i))));
}

// ---- entry point ---------------------------------------------------------

inline int run_cli(int argc, const char* const* argv) {
  flush_denormals();
  CLI::App app{"Pyramid-generator image inpainting"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, out, ratios = ".15:.55:.10", sizes = "64,128,256", mask_mode = "center";
  std::string image, mask, resume, data_dir;
  std::vector<std::string> variants;
  std::uint64_t seed = 0;
  double ratio = 0.25;
  int count = 100, size = 64;
  bool allow_mismatch = false, quiet = false;

  auto* train = app.add_subcommand("train", "train a pyramid generator");
  train->add_option("--config", config_path, "run configuration file")->required();
  train->add_option("--out", out, "output directory");
  auto* train_seed = train->add_option("--seed", seed, "override the configured seed");
  train->add_option("--resume", resume, "checkpoint directory to continue from");
  train->add_flag("--allow-config-mismatch", allow_mismatch, "resume even if the config hash differs");
  train->add_flag("--quiet", quiet, "no progress output");

  auto* inp = app.add_subcommand("inpaint", "fill the holes of one image");
  inp->add_option("--checkpoint", checkpoint)->required();
  inp->add_option("--image", image)->required();
  inp->add_option("--mask", mask, "PNG, nonzero marks a hole")->required();
  inp->add_option("--out", out, "output PNG")->required();

  auto add_eval_data = [&](CLI::App* cmd) {
    cmd->add_option("--checkpoint", checkpoint)->required();
    cmd->add_option("--data", data_dir, "evaluation image folder (default: synthetic textures)");
    cmd->add_option("--count", count, "synthetic evaluation images");
    cmd->add_option("--seed", seed, "synthetic evaluation seed and free-form mask seed");
    cmd->add_option("--out", out, "output directory");
  };
  auto* eval = app.add_subcommand("eval", "metrics for one mask setting");
  add_eval_data(eval);
  eval->add_option("--mask-mode", mask_mode)->check(CLI::IsMember({"center", "freeform"}));
  eval->add_option("--ratio", ratio, "center hole ratio");
  auto* sweep_hole = app.add_subcommand("sweep-hole", "metrics across center hole ratios");
  add_eval_data(sweep_hole);
  sweep_hole->add_option("--ratios", ratios, "a:b:step");
  auto* sweep_res = app.add_subcommand("sweep-res", "metrics across image sizes");
  add_eval_data(sweep_res);
  sweep_res->add_option("--sizes", sizes, "comma-separated sizes");

  auto* ablate = app.add_subcommand("ablate", "train and compare ablation variants");
  ablate->add_option("--config", config_path)->required();
  ablate->add_option("--variant", variants, "variant name (repeatable, or 'all')")->required();
  ablate->add_option("--out", out, "output directory");
  auto* ablate_seed = ablate->add_option("--seed", seed, "override the configured seed");
  ablate->add_flag("--quiet", quiet, "no progress output");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference checks of the differentiable blocks");
  grad->add_option("--seed", seed);
  grad->add_option("--out", out, "output directory");

  auto* corpus = app.add_subcommand("make-corpus", "write a synthetic texture corpus");
  corpus->add_option("--out", out, "output directory");
  corpus->add_option("--count", count);
  corpus->add_option("--size", size);
  corpus->add_option("--seed", seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train) {
      TrainOptions opt{out, std::nullopt, resume, allow_mismatch, quiet};
      if (*train_seed) opt.seed = seed;
      cmd_train(RunConfig::load(config_path), opt);
    } else if (*inp) {
      cmd_inpaint(checkpoint, image, mask, out);
    } else if (*eval || *sweep_hole || *sweep_res) {
      const EvalData d{data_dir, count, seed ? seed : 2};
      const std::string dir = resolve_out(out).string();
      if (*eval) std::cout << metric_csv({cmd_eval(checkpoint, d, mask_mode, ratio, dir)});
      else if (*sweep_hole) std::cout << metric_csv(cmd_sweep_hole(checkpoint, d, parse_ratios(ratios), dir));
      else std::cout << metric_csv(cmd_sweep_res(checkpoint, d, parse_sizes(sizes), dir));
    } else if (*ablate) {
      RunConfig c = RunConfig::load(config_path);
      if (*ablate_seed) c.train.seed = seed;
      if (variants.size() == 1 && variants[0] == "all") {
        variants.clear();
        for (const auto& v : ablation_variants()) variants.push_back(v.name);
      }
      std::cout << ablation_table(cmd_ablate(c, variants, out, quiet));
    } else if (*grad) {
      return cmd_gradcheck(seed ? seed : 1, resolve_out(out).string()) ? kExitOk : kExitNumerical;
    } else if (*corpus) {
      cmd_make_corpus(resolve_out(out).string(), count, size, seed ? seed : 1);
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ArgumentError& e) {
    std::cerr << "argument error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace pyragen
