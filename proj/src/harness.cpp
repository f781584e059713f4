#include "ssdlab/harness.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "ssdlab/baselines.hpp"
#include "ssdlab/checkpoint.hpp"
#include "ssdlab/image_io.hpp"

namespace fs = std::filesystem;

namespace ssdlab {

namespace {

void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                         const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (allowed.count(key) == 0)
      throw ConfigError("config: unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T get_or(const nlohmann::json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const std::exception& e) {
    throw ConfigError("config: bad value for '" + key + "': " + e.what());
  }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"mode",           "prompt",          "model",
                          "method",         "style",           "loss",
                          "schedule",       "beta",            "iterations",
                          "lr",             "seed",            "out",
                          "baseline",       "style_loss_weight", "extractor",
                          "grid_size",      "snapshot_every",  "t_threshold_frac",
                          "t_min_frac",     "t_max_frac",      "weighting",
                          "negative_prompt", "textual_inversion_steps"},
                      "experiment config");
  ExperimentConfig c;
  c.mode = get_or<std::string>(j, "mode", c.mode);
  c.prompt = get_or<std::string>(j, "prompt", "");
  c.model_path = get_or<std::string>(j, "model", "");
  c.method = get_or<std::string>(j, "method", "");
  if (j.contains("style")) {
    const auto& s = j.at("style");
    reject_unknown_keys(s, {"image", "reference", "caption", "origin", "prompt"}, "style");
    c.has_style = true;
    c.style_image_path = get_or<std::string>(s, "image", "");
    c.style_reference_path = get_or<std::string>(s, "reference", "");
    c.style_caption = get_or<std::string>(s, "caption", "");
    c.style_origin = get_or<std::string>(s, "origin", c.style_origin);
    c.style_prompt = get_or<std::string>(s, "prompt", "");
  }
  c.loss = get_or<std::string>(j, "loss", c.loss);
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    reject_unknown_keys(s, {"kind", "lambda_max"}, "schedule");
    c.schedule_kind = get_or<std::string>(s, "kind", c.schedule_kind);
    c.lambda_max = get_or<Scalar>(s, "lambda_max", c.lambda_max);
  }
  c.beta = get_or<Scalar>(j, "beta", c.beta);
  c.iterations = get_or<long>(j, "iterations", c.iterations);
  c.lr = get_or<Scalar>(j, "lr", c.lr);
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
  c.out_dir = get_or<std::string>(j, "out", "");
  c.baseline = get_or<std::string>(j, "baseline", c.baseline);
  c.style_loss_weight = get_or<Scalar>(j, "style_loss_weight", c.style_loss_weight);
  c.extractor_path = get_or<std::string>(j, "extractor", "");
  c.grid_size = get_or<int>(j, "grid_size", c.grid_size);
  c.snapshot_every = get_or<int>(j, "snapshot_every", c.snapshot_every);
  c.t_threshold_frac = get_or<Scalar>(j, "t_threshold_frac", c.t_threshold_frac);
  if (j.contains("t_min_frac")) c.t_min_frac = j.at("t_min_frac").get<Scalar>();
  if (j.contains("t_max_frac")) c.t_max_frac = j.at("t_max_frac").get<Scalar>();
  if (j.contains("weighting")) c.weighting = j.at("weighting").get<std::string>();
  c.negative_prompt = get_or<std::string>(j, "negative_prompt", c.negative_prompt);
  c.textual_inversion_steps = get_or<int>(j, "textual_inversion_steps", c.textual_inversion_steps);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: JSON parse error: ") + e.what());
  }
  return from_json(j);
}

void ExperimentConfig::validate() const {
  if (mode != "canvas2d" && mode != "voxel3d")
    throw ConfigError("config: mode must be canvas2d or voxel3d");
  if (prompt.empty()) throw ConfigError("config: prompt is required");
  if (model_path.empty()) throw ConfigError("config: model is required");
  if (out_dir.empty()) throw ConfigError("config: out is required");
  (void)loss_kind_from_string(loss);
  (void)schedule_kind_from_string(schedule_kind);
  if (lambda_max < 0.0 || lambda_max > 1.0)
    throw ConfigError("config: schedule.lambda_max must be in [0, 1]");
  if (beta < 0.0) throw ConfigError("config: beta must be >= 0");
  if (iterations != -1 && iterations <= 0) throw ConfigError("config: iterations must be > 0");
  if (t_threshold_frac <= 0.0 || t_threshold_frac >= 1.0)
    throw ConfigError("config: t_threshold_frac must be in (0, 1)");
  if (grid_size < 2) throw ConfigError("config: grid_size must be >= 2");
  if (has_style) {
    if (style_image_path.empty() && style_reference_path.empty())
      throw ConfigError("config: style needs image or reference");
    if (style_origin != "generated" && style_origin != "inverted")
      throw ConfigError("config: style.origin must be generated or inverted");
  }
  const std::set<std::string> baselines = {"none", "style-in-prompt", "neural-style-loss",
                                           "textual-inversion"};
  if (baselines.count(baseline) == 0) throw ConfigError("config: unknown baseline " + baseline);
  if (baseline != "none" && !has_style && baseline != "style-in-prompt")
    throw ConfigError("config: baseline '" + baseline + "' requires a style block");
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j = {{"mode", mode},
                      {"prompt", prompt},
                      {"model", model_path},
                      {"method", method},
                      {"loss", loss},
                      {"schedule", {{"kind", schedule_kind}, {"lambda_max", lambda_max}}},
                      {"beta", beta},
                      {"iterations", iterations},
                      {"lr", lr},
                      {"seed", seed},
                      {"out", out_dir},
                      {"baseline", baseline},
                      {"style_loss_weight", style_loss_weight},
                      {"grid_size", grid_size},
                      {"snapshot_every", snapshot_every},
                      {"t_threshold_frac", t_threshold_frac},
                      {"negative_prompt", negative_prompt},
                      {"textual_inversion_steps", textual_inversion_steps}};
  if (!extractor_path.empty()) j["extractor"] = extractor_path;
  if (t_min_frac) j["t_min_frac"] = *t_min_frac;
  if (t_max_frac) j["t_max_frac"] = *t_max_frac;
  if (weighting) j["weighting"] = *weighting;
  if (has_style) {
    nlohmann::json s;
    if (!style_image_path.empty()) s["image"] = style_image_path;
    if (!style_reference_path.empty()) s["reference"] = style_reference_path;
    s["caption"] = style_caption;
    s["origin"] = style_origin;
    if (!style_prompt.empty()) s["prompt"] = style_prompt;
    j["style"] = s;
  }
  return j;
}

RunMetrics run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);

  auto loaded = load_denoiser(cfg.model_path);
  UNet& net = *loaded.net;
  NoiseSchedule sched = loaded.schedule;
  if (cfg.t_min_frac || cfg.t_max_frac || cfg.weighting) {
    sched = NoiseSchedule(
        sched.num_steps(),
        cfg.weighting ? (*cfg.weighting == "one" ? Weighting::one : Weighting::sigma2)
                      : sched.weighting(),
        cfg.t_min_frac.value_or(sched.t_min_frac()), cfg.t_max_frac.value_or(sched.t_max_frac()));
  }

  const bool grid_mode = cfg.mode == "voxel3d";
  DistillationConfig dc;
  dc.loss = loss_kind_from_string(cfg.loss);
  dc.beta = cfg.beta;
  dc.negative_prompt_text = cfg.negative_prompt;
  dc.iterations = cfg.iterations > 0 ? cfg.iterations : (grid_mode ? 5000 : 2000);
  dc.lr = cfg.lr > 0.0 ? cfg.lr : (grid_mode ? 5e-2 : 1e-2);
  dc.seed = cfg.seed;
  dc.t_threshold_frac = cfg.t_threshold_frac;
  dc.snapshot_every = cfg.snapshot_every;

  StyleRatioSchedule ratio{schedule_kind_from_string(cfg.schedule_kind), cfg.lambda_max};

  // ---- style reference -------------------------------------------------
  std::optional<StyleReference> style_ref;
  std::string caption = cfg.style_caption;
  if (cfg.has_style) {
    if (!cfg.style_reference_path.empty()) {
      style_ref = load_style_reference(cfg.style_reference_path, net);
      if (caption.empty()) caption = style_ref->caption;
    } else {
      Image style_img = load_png(cfg.style_image_path);
      if (style_img.h != net.arch().image_size || style_img.w != net.arch().image_size)
        style_img = resize_nearest(style_img, net.arch().image_size, net.arch().image_size);
      if (cfg.style_origin == "inverted") {
        auto report = invert_style_image(net, sched, style_img);
        style_ref = std::move(report.ref);
      } else {
        PromptEmbedding ys = cfg.style_prompt.empty()
                                 ? net.empty_prompt()
                                 : net.embed_text(cfg.style_prompt, PromptKind::style);
        style_ref = make_generated_reference(style_img, std::move(ys), caption);
      }
    }
    style_ref->caption = caption;
  }

  // ---- prompts and baseline wiring --------------------------------------
  std::string prompt_text = cfg.prompt;
  std::optional<InvertedToken> inv_token;
  if (cfg.baseline == "style-in-prompt") {
    prompt_text = style_in_prompt(net.vocab(), cfg.prompt, caption);
  }
  DistillPrompts prompts = make_distill_prompts(
      net, prompt_text, (cfg.baseline == "none" && cfg.has_style) ? caption : "");
  if (cfg.baseline == "textual-inversion") {
    check(style_ref.has_value(), "textual-inversion baseline needs a style image");
    Rng rng = Rng::substream(cfg.seed, "textual-inversion");
    TextualInversionConfig tic;
    tic.steps = cfg.textual_inversion_steps;
    tic.init_caption = caption;
    inv_token = textual_inversion(net, sched, style_ref->image, tic, rng);
    prompts.y = augment_with_token(net, cfg.prompt, *inv_token);
    prompts.y_aug = prompts.y;
  }

  std::optional<FeatureExtractor> extractor;
  std::function<Image(const Image&)> extra_grad;
  if (cfg.baseline == "neural-style-loss") {
    check(!cfg.extractor_path.empty(), "neural-style-loss baseline needs an extractor checkpoint");
    extractor.emplace(FeatureExtractor::load(cfg.extractor_path));
    const Image style_img = style_ref->image;
    const Scalar w = cfg.style_loss_weight;
    const FeatureExtractor* f = &*extractor;
    extra_grad = [style_img, w, f](const Image& render01) {
      auto [loss, dx] = neural_style_loss_grad(render01, style_img, *f);
      (void)loss;
      return Image(dx.h, dx.w, w * dx.data);
    };
  }

  // baselines distill with the unmodified model only
  const bool use_style_branch = cfg.has_style && cfg.baseline == "none";
  std::optional<StyleBranch> branch;
  if (use_style_branch)
    branch.emplace(net, sched, *style_ref, net.default_swap_layers(), cfg.seed);

  // ---- scene + optimization ---------------------------------------------
  Scene scene = grid_mode ? Scene::make_grid(cfg.grid_size)
                          : Scene::make_canvas(net.arch().image_size, net.arch().image_size);
  CameraPolicy cam_policy;
  cam_policy.res = net.arch().image_size;

  auto snapshot = [&](long iter, const Image& render) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "render_%06ld.png", iter);
    save_png(render, (fs::path(cfg.out_dir) / buf).string());
  };

  OptimizeResult result = optimize_scene(scene, net, branch ? &*branch : nullptr, prompts, dc,
                                         ratio, sched, cam_policy, snapshot, extra_grad);

  // ---- artifacts ---------------------------------------------------------
  {
    std::ofstream f(fs::path(cfg.out_dir) / "config.json");
    f << cfg.to_json().dump(2) << "\n";
  }
  {
    std::ofstream f(fs::path(cfg.out_dir) / "trajectory.jsonl");
    for (const auto& e : result.log) {
      nlohmann::json line = {{"iter", e.iter},          {"lambda", e.lambda},
                             {"t", e.t},                {"loss_kind", e.loss_kind},
                             {"residual_norm", e.residual_norm}, {"wall_ms", e.wall_ms}};
      f << line.dump() << "\n";
    }
  }
  save_scene(scene, dc.iterations, (fs::path(cfg.out_dir) / "scene.ckpt").string());

  Camera front;
  front.res = net.arch().image_size;
  Image final_render = render_scene(scene, grid_mode ? std::optional<Camera>(front) : std::nullopt);
  save_png(final_render, (fs::path(cfg.out_dir) / "final.png").string());

  RunMetrics metrics;
  metrics.json["loss"] = cfg.loss;
  metrics.json["schedule"] = cfg.schedule_kind;
  metrics.json["lambda_max"] = cfg.lambda_max;
  metrics.json["iterations"] = dc.iterations;
  metrics.json["seed"] = cfg.seed;
  metrics.json["baseline"] = cfg.baseline;
  metrics.json["residual_norm_final"] = result.log.empty() ? 0.0 : result.log.back().residual_norm;
  metrics.json["lambda_final"] = result.log.empty() ? 0.0 : result.log.back().lambda;
  if (inv_token) metrics.json["textual_inversion_loss"] = inv_token->final_loss;

  if (grid_mode) {
    RenderOptions ropts;
    auto gr = render_grid(scene.grid, front, ropts);
    Image normals = render_normals(scene.grid, front, ropts);
    save_png(normals, (fs::path(cfg.out_dir) / "final_normal.png").string());
    // turntable strip
    std::vector<Image> strip;
    for (int v = 0; v < 8; ++v) {
      Camera cam = front;
      cam.azimuth_deg = 360.0 * v / 8;
      strip.push_back(render_grid(scene.grid, cam, ropts).rgb);
    }
    save_png(hstrip(strip), (fs::path(cfg.out_dir) / "turntable.png").string());
    metrics.json["silhouette_consistency"] =
        silhouette_consistency(scene.grid, 8, net.arch().image_size);
    if (style_ref)
      metrics.json["style_alignment"] =
          style_alignment_metric(gr.rgb, style_ref->image, &gr.weight_sum);
  } else if (style_ref) {
    metrics.json["style_alignment"] = style_alignment_metric(final_render, style_ref->image);
  }
  if (style_ref) {
    save_png(style_ref->image, (fs::path(cfg.out_dir) / "style.png").string());
    metrics.json["style_hash"] = style_ref->content_hash;
  }

  {
    std::ofstream f(fs::path(cfg.out_dir) / "metrics.json");
    f << metrics.json.dump(2) << "\n";
  }
  return metrics;
}

LoadedRun load_run_dir(const std::string& dir) {
  LoadedRun run;
  run.config = ExperimentConfig::from_file((fs::path(dir) / "config.json").string());
  run.scene = load_scene((fs::path(dir) / "scene.ckpt").string()).scene;

  const fs::path style_path = fs::path(dir) / "style.png";
  const Image final_png = load_png((fs::path(dir) / "final.png").string());
  const int res = final_png.h;

  if (run.scene.mode == Scene::Mode::voxel3d) {
    RenderOptions ropts;
    for (int v = 0; v < 4; ++v) {
      Camera cam;
      cam.azimuth_deg = 90.0 * v;
      cam.res = res;
      ViewPair vp;
      vp.rgb = render_grid(run.scene.grid, cam, ropts).rgb;
      vp.normal = render_normals(run.scene.grid, cam, ropts);
      run.views.push_back(std::move(vp));
    }
  } else {
    Image rgb = run.scene.canvas.render();
    Image flat = Image::constant(3, rgb.h, rgb.w, 0.5);
    for (int v = 0; v < 4; ++v) run.views.push_back({rgb, flat});
  }

  if (fs::exists(style_path)) {
    run.style = load_png(style_path.string());
  } else {
    run.style = Image::constant(3, res, res, 0.5);
  }
  run.case_id = run.config.prompt + "|" + std::to_string(hash_mat(run.style.data));
  return run;
}

}  // namespace ssdlab
