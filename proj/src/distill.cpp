#include "ssdlab/distill.hpp"

#include <chrono>
#include <cmath>

namespace ssdlab {

Scalar schedule_lambda(const StyleRatioSchedule& s, long k, long K) {
  check(K > 0, "schedule_lambda: K must be > 0");
  check(k >= 0, "schedule_lambda: k must be >= 0");
  if (k > K) throw ContractError("schedule_lambda: k > K");
  check(s.lambda_max >= 0.0 && s.lambda_max <= 1.0, "schedule_lambda: lambda_max in [0,1]");
  const Scalar frac = static_cast<Scalar>(k) / static_cast<Scalar>(K);
  switch (s.kind) {
    case ScheduleKind::constant: return s.lambda_max;
    case ScheduleKind::sqrt: return s.lambda_max * std::sqrt(frac);
    case ScheduleKind::quad: return s.lambda_max * frac * frac;
  }
  throw ContractError("schedule_lambda: bad kind");
}

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "constant") return ScheduleKind::constant;
  if (s == "sqrt") return ScheduleKind::sqrt;
  if (s == "quad") return ScheduleKind::quad;
  throw ConfigError("unknown schedule kind: " + s);
}
const char* to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::constant: return "constant";
    case ScheduleKind::sqrt: return "sqrt";
    case ScheduleKind::quad: return "quad";
  }
  return "?";
}

LossKind loss_kind_from_string(const std::string& s) {
  if (s == "sds") return LossKind::sds;
  if (s == "ssd") return LossKind::ssd;
  if (s == "snf-ssd") return LossKind::snf_ssd;
  if (s == "vsd-ssd") return LossKind::vsd_ssd;
  throw ConfigError("unknown loss kind: " + s);
}
const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::sds: return "sds";
    case LossKind::ssd: return "ssd";
    case LossKind::snf_ssd: return "snf-ssd";
    case LossKind::vsd_ssd: return "vsd-ssd";
  }
  return "?";
}

DistillPrompts make_distill_prompts(const UNet& net, const std::string& prompt_text,
                                    const std::string& style_caption) {
  DistillPrompts p;
  p.y = net.embed_text(prompt_text, PromptKind::content);
  std::vector<int> aug = p.y.tokens;
  if (!style_caption.empty()) {
    auto extra = net.vocab().tokenize(style_caption);
    aug.insert(aug.end(), extra.begin(), extra.end());
  }
  p.y_aug = net.embed_tokens(aug, PromptKind::augmented);
  p.empty = net.empty_prompt();
  p.negative = net.negative_prompt();
  return p;
}

namespace {

struct Draw {
  int t;
  Image eps;
  Image z_t;
};

Draw draw_noisy(const NoiseSchedule& sched, const Image& x, Rng& rng) {
  Draw d;
  d.t = sched.sample_timestep(rng);
  d.eps = Image(x.channels(), x.h, x.w);
  d.eps.data = rng.normal_mat(x.data.rows(), x.data.cols());
  d.z_t = add_noise(sched, x, d.t, d.eps).z_t;
  return d;
}

}  // namespace

ResidualOutput sds_residual(const ScoreModel& model, const NoiseSchedule& sched, const Image& x,
                            const PromptEmbedding& y, const PromptEmbedding& empty, Scalar beta,
                            Rng& rng) {
  Draw d = draw_noisy(sched, x, rng);
  Image eps_cfg = cfg_combine(model, d.z_t, d.t, y, empty, beta);
  const Scalar w = sched.omega(d.t);
  return {Image(x.h, x.w, w * (eps_cfg.data - d.eps.data)), d.t};
}

ResidualOutput ssd_residual(const ScoreModel& unmodified, ModifiedBranch* modified,
                            const NoiseSchedule& sched, const Image& x,
                            const DistillPrompts& prompts, Scalar lambda, Scalar beta, Rng& rng) {
  check(lambda >= 0.0 && lambda <= 1.0, "ssd_residual: lambda in [0,1]");
  check(lambda == 0.0 || modified != nullptr, "ssd_residual: lambda > 0 requires a modified branch");
  Draw d = draw_noisy(sched, x, rng);
  const Scalar w = sched.omega(d.t);

  Mat mix;
  if (lambda == 0.0) {
    mix = cfg_combine(unmodified, d.z_t, d.t, prompts.y, prompts.empty, beta).data;
  } else if (lambda == 1.0) {
    const ScoreModel& hat = modified->at(d.t, d.eps);
    mix = cfg_combine(hat, d.z_t, d.t, prompts.y_aug, prompts.empty, beta).data;
  } else {
    Image eps_cfg = cfg_combine(unmodified, d.z_t, d.t, prompts.y, prompts.empty, beta);
    const ScoreModel& hat = modified->at(d.t, d.eps);
    Image eps_hat_cfg = cfg_combine(hat, d.z_t, d.t, prompts.y_aug, prompts.empty, beta);
    mix = (1.0 - lambda) * eps_cfg.data + lambda * eps_hat_cfg.data;
  }
  return {Image(x.h, x.w, w * (mix - d.eps.data)), d.t};
}

SnfResidualOutput snf_ssd_residual(const ScoreModel& unmodified, ModifiedBranch* modified,
                                   const NoiseSchedule& sched, const Image& x,
                                   const DistillPrompts& prompts, Scalar lambda, Scalar beta,
                                   Scalar t_threshold_frac, Rng& rng) {
  check(lambda >= 0.0 && lambda <= 1.0, "snf_ssd_residual: lambda in [0,1]");
  check(lambda == 0.0 || modified != nullptr,
        "snf_ssd_residual: lambda > 0 requires a modified branch");
  Draw d = draw_noisy(sched, x, rng);
  const Scalar w = sched.omega(d.t);
  const bool below = d.t < t_threshold_frac * sched.num_steps();

  SnfResidualOutput out;
  out.t = d.t;
  Mat acc = Mat::Zero(x.data.rows(), x.data.cols());

  if (lambda < 1.0) {
    Image eps_empty = unmodified.predict(d.z_t, d.t, prompts.empty);
    Image eps_y = unmodified.predict(d.z_t, d.t, prompts.y);
    Mat delta_D = below
                      ? eps_empty.data
                      : (eps_empty.data - unmodified.predict(d.z_t, d.t, prompts.negative).data);
    Mat delta_C = eps_y.data - eps_empty.data;
    acc += (1.0 - lambda) * (delta_D + beta * delta_C);
    out.decomposition.delta_D = Image(x.h, x.w, delta_D);
    out.decomposition.delta_C = Image(x.h, x.w, delta_C);
  }
  if (lambda > 0.0) {
    const ScoreModel& hat = modified->at(d.t, d.eps);
    Image eps_empty = hat.predict(d.z_t, d.t, prompts.empty);
    Image eps_y = hat.predict(d.z_t, d.t, prompts.y_aug);
    Mat delta_D_hat =
        below ? eps_empty.data : (eps_empty.data - hat.predict(d.z_t, d.t, prompts.negative).data);
    Mat delta_C_hat = eps_y.data - eps_empty.data;
    acc += lambda * (delta_D_hat + beta * delta_C_hat);
    out.decomposition.delta_D_hat = Image(x.h, x.w, delta_D_hat);
    out.decomposition.delta_C_hat = Image(x.h, x.w, delta_C_hat);
  }
  out.residual = Image(x.h, x.w, w * acc);
  return out;
}

VsdAuxiliary::VsdAuxiliary(const UNet& main_net, Scalar lr, std::uint64_t seed) {
  ArchConfig a = main_net.arch();
  a.base = std::max(4, a.base / 2);
  net_ = std::make_unique<UNet>(a, main_net.vocab(), seed);
  net_->set_untrained_ok(true);
  opt_ = std::make_unique<nn::Adam>(net_->params(), lr);
}

PromptEmbedding VsdAuxiliary::conditioned(const PromptEmbedding& y,
                                          const std::optional<Camera>& cam) const {
  if (!cam.has_value()) return y;
  PromptEmbedding p = y;
  p.tokens.push_back(kLearnedTokenId);
  Vec feats(net_->arch().token_dim);
  for (int i = 0; i < feats.size(); ++i) {
    const Scalar base = (i % 2 == 0) ? cam->azimuth_deg : cam->elevation_deg;
    const Scalar freq = std::pow(2.0, i / 2) * M_PI / 180.0;
    feats(i) = std::sin(base * freq + (i % 2) * M_PI / 2.0);
  }
  p.embedding.conservativeResize(Eigen::NoChange, p.embedding.cols() + 1);
  p.embedding.col(p.embedding.cols() - 1) = feats;
  p.kind = PromptKind::augmented;
  return p;
}

Scalar VsdAuxiliary::train_step(const Image& x, const PromptEmbedding& y,
                                const std::optional<Camera>& cam, const NoiseSchedule& sched,
                                Rng& rng) {
  const Image x0 = to_model_range(x);
  const int t = static_cast<int>(rng.uniform_int(1, sched.num_steps()));
  Image eps(x0.channels(), x0.h, x0.w);
  eps.data = rng.normal_mat(x0.data.rows(), x0.data.cols());
  auto ns = add_noise(sched, x0, t, eps);
  auto cond = conditioned(y, cam);

  UNet::Tape tape;
  Image pred = net_->forward_cached(ns.z_t, t, cond, tape);
  const Scalar numel = static_cast<Scalar>(pred.data.size());
  Mat diff = pred.data - eps.data;
  const Scalar loss = diff.squaredNorm() / numel;
  if (!std::isfinite(loss)) throw NumericalError("vsd auxiliary: training loss diverged (NaN)");
  nn::GradBuffer grads(net_->params());
  net_->backward(Image(pred.h, pred.w, (2.0 / numel) * diff), tape, grads);
  opt_->step(net_->params(), grads);
  return loss;
}

VsdResidualOutput vsd_ssd_residual(const ScoreModel& unmodified, ModifiedBranch* modified,
                                   const ScoreModel& aux_score, VsdAuxiliary* aux,
                                   const NoiseSchedule& sched, const Image& x,
                                   const DistillPrompts& prompts, Scalar lambda, Scalar beta,
                                   const std::optional<Camera>& cam, Rng& rng) {
  check(lambda >= 0.0 && lambda <= 1.0, "vsd_ssd_residual: lambda in [0,1]");
  check(lambda == 0.0 || modified != nullptr,
        "vsd_ssd_residual: lambda > 0 requires a modified branch");
  Draw d = draw_noisy(sched, x, rng);
  const Scalar w = sched.omega(d.t);

  Mat mix;
  if (lambda == 0.0) {
    mix = cfg_combine(unmodified, d.z_t, d.t, prompts.y, prompts.empty, beta).data;
  } else if (lambda == 1.0) {
    const ScoreModel& hat = modified->at(d.t, d.eps);
    mix = cfg_combine(hat, d.z_t, d.t, prompts.y_aug, prompts.empty, beta).data;
  } else {
    Image eps_cfg = cfg_combine(unmodified, d.z_t, d.t, prompts.y, prompts.empty, beta);
    const ScoreModel& hat = modified->at(d.t, d.eps);
    Image eps_hat_cfg = cfg_combine(hat, d.z_t, d.t, prompts.y_aug, prompts.empty, beta);
    mix = (1.0 - lambda) * eps_cfg.data + lambda * eps_hat_cfg.data;
  }

  // the auxiliary scores the noisy render in place of raw eps;
  // stylization applies to the pretrained branches only
  PromptEmbedding aux_cond = aux ? aux->conditioned(prompts.y, cam) : prompts.y;
  Image eps_aux = aux_score.predict(d.z_t, d.t, aux_cond);

  VsdResidualOutput out;
  out.t = d.t;
  out.residual = Image(x.h, x.w, w * (mix - eps_aux.data));
  const Image x_display = 0.5 * (x + Image::constant(x.channels(), x.h, x.w, 1.0));
  if (aux) out.aux_loss = aux->train_step(x_display, prompts.y, cam, sched, rng);
  return out;
}

// ---------------------------------------------------------------------------

Scene Scene::make_canvas(int h, int w) {
  Scene s;
  s.mode = Mode::canvas2d;
  s.canvas = Canvas2D::init(h, w);
  return s;
}

Scene Scene::make_grid(int n) {
  Scene s;
  s.mode = Mode::voxel3d;
  s.grid = RadianceGrid::init(n);
  return s;
}

Image render_scene(const Scene& scene, const std::optional<Camera>& cam,
                   const RenderOptions& opts) {
  if (scene.mode == Scene::Mode::canvas2d) return scene.canvas.render();
  check(cam.has_value(), "render_scene: grid mode requires a camera");
  return render_grid(scene.grid, *cam, opts).rgb;
}

OptimizeResult optimize_scene(Scene& scene, const UNet& net, StyleBranch* style,
                              const DistillPrompts& prompts, const DistillationConfig& cfg,
                              const StyleRatioSchedule& ratio, const NoiseSchedule& sched,
                              const CameraPolicy& cam_policy,
                              const std::function<void(long, const Image&)>& snapshot_cb,
                              const std::function<Image(const Image&)>& extra_image_grad) {
  cfg.validate();
  const bool grid_mode = scene.mode == Scene::Mode::voxel3d;
  if (grid_mode)
    check(cam_policy.res == net.arch().image_size,
          "optimize_scene: camera resolution must match the denoiser");

  // scene parameters into one optimizer
  nn::ParamSet scene_params;
  if (grid_mode) {
    scene_params.add("grid.density_logits", &scene.grid.density_logits);
    scene_params.add("grid.color_logits", &scene.grid.color_logits);
  } else {
    scene_params.add("canvas.logits", &scene.canvas.logits.data);
  }
  nn::Adam opt(scene_params, cfg.lr);
  nn::GradBuffer grads(scene_params);

  UNetScore unmodified(net);
  std::optional<StyleModifiedBranch> modified;
  if (style) modified.emplace(net, *style);

  std::optional<VsdAuxiliary> aux;
  std::optional<UNetScore> aux_score;
  if (cfg.loss == LossKind::vsd_ssd) {
    aux.emplace(net, 1e-3, cfg.seed ^ 0xa0a0a0a0ull);
    aux_score.emplace(aux->net());
  }

  Rng rng = Rng::substream(cfg.seed, "distillation");
  const RenderOptions ropts;
  OptimizeResult result;

  auto assert_scene_finite = [&](long k) {
    for (int i = 0; i < scene_params.size(); ++i)
      if (!scene_params[i].value->allFinite())
        throw NumericalError("optimize_scene: NaN in scene parameters at iteration " +
                             std::to_string(k));
  };

  for (long k = 0; k < cfg.iterations; ++k) {
    const auto start = std::chrono::steady_clock::now();
    assert_scene_finite(k);
    const Scalar lambda = style ? schedule_lambda(ratio, k, cfg.iterations) : 0.0;

    std::optional<Camera> cam;
    if (grid_mode) cam.emplace(sample_camera(rng, cam_policy));

    Image render01 = render_scene(scene, cam, ropts);
    Image x = to_model_range(render01);

    Image residual;
    int t = 0;
    switch (cfg.loss) {
      case LossKind::sds: {
        auto r = sds_residual(unmodified, sched, x, prompts.y, prompts.empty, cfg.beta, rng);
        residual = std::move(r.residual);
        t = r.t;
        break;
      }
      case LossKind::ssd: {
        auto r = ssd_residual(unmodified, modified ? &*modified : nullptr, sched, x, prompts,
                              lambda, cfg.beta, rng);
        residual = std::move(r.residual);
        t = r.t;
        break;
      }
      case LossKind::snf_ssd: {
        auto r = snf_ssd_residual(unmodified, modified ? &*modified : nullptr, sched, x, prompts,
                                  lambda, cfg.beta, cfg.t_threshold_frac, rng);
        residual = std::move(r.residual);
        t = r.t;
        break;
      }
      case LossKind::vsd_ssd: {
        auto r = vsd_ssd_residual(unmodified, modified ? &*modified : nullptr, *aux_score, &*aux,
                                  sched, x, prompts, lambda, cfg.beta, cam, rng);
        residual = std::move(r.residual);
        t = r.t;
        result.aux_loss_last = r.aux_loss;
        break;
      }
    }

    // d(loss)/d(render01): residual acts on the model-range image, x = 2r-1
    Image d_render(residual.h, residual.w, 2.0 * residual.data);
    if (extra_image_grad) d_render.data += extra_image_grad(render01).data;
    grads.zero();
    if (grid_mode) {
      render_grid_backward(scene.grid, *cam, ropts, d_render, grads.at(0), grads.at(1));
    } else {
      grads.at(0) = scene.canvas.backward(d_render).data;
    }
    opt.step(scene_params, grads);
    assert_scene_finite(k);

    const auto stop = std::chrono::steady_clock::now();
    TrajectoryEntry e;
    e.iter = k;
    e.lambda = lambda;
    e.t = t;
    e.loss_kind = to_string(cfg.loss);
    e.residual_norm = residual.data.norm();
    e.wall_ms = std::chrono::duration<double, std::milli>(stop - start).count();
    result.log.push_back(std::move(e));

    if (snapshot_cb && cfg.snapshot_every > 0 &&
        ((k + 1) % cfg.snapshot_every == 0 || k + 1 == cfg.iterations)) {
      snapshot_cb(k + 1, render_scene(scene, cam, ropts));
    }
  }
  return result;
}

}  // namespace ssdlab
