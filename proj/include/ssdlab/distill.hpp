#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ssdlab/denoiser.hpp"
#include "ssdlab/scene.hpp"
#include "ssdlab/schedule.hpp"
#include "ssdlab/style.hpp"

namespace ssdlab {

// ---------------------------------------------------------------------------
// style ratio schedule

enum class ScheduleKind { constant, sqrt, quad };

struct StyleRatioSchedule {
  ScheduleKind kind = ScheduleKind::sqrt;
  Scalar lambda_max = 0.6;
};

/// lambda(k): sqrt -> lambda_max*sqrt(k/K); quad -> lambda_max*(k/K)^2;
/// constant -> lambda_max. Requires 0 <= k <= K.
Scalar schedule_lambda(const StyleRatioSchedule& s, long k, long K);

ScheduleKind schedule_kind_from_string(const std::string& s);
const char* to_string(ScheduleKind k);

// ---------------------------------------------------------------------------
// residual operators

enum class LossKind { sds, ssd, snf_ssd, vsd_ssd };
LossKind loss_kind_from_string(const std::string& s);
const char* to_string(LossKind k);

struct DistillationConfig {
  LossKind loss = LossKind::ssd;
  Scalar beta = 7.5;  // CFG scale; 100 is the SDS default, 7.5 the noise-free default
  std::string negative_prompt_text = "unrealistic blurry low quality";
  long iterations = 2000;
  Scalar lr = 1e-2;  // 1e-2 canvas / 5e-2 grid defaults applied by the harness
  std::uint64_t seed = 0;
  Scalar t_threshold_frac = 0.2;  // noise-free domain-direction switch
  int snapshot_every = 0;

  void validate() const {
    check(beta >= 0.0, "DistillationConfig: beta must be >= 0");
    check(iterations > 0, "DistillationConfig: iterations must be > 0");
    check(t_threshold_frac > 0.0 && t_threshold_frac < 1.0,
          "DistillationConfig: t_threshold_frac in (0,1)");
  }
};

/// Prompts used by one distillation run. The modified branch consumes the
/// augmented prompt (content text plus style caption).
struct DistillPrompts {
  PromptEmbedding y;
  PromptEmbedding y_aug;
  PromptEmbedding empty;
  PromptEmbedding negative;
};

DistillPrompts make_distill_prompts(const UNet& net, const std::string& prompt_text,
                                    const std::string& style_caption);

/// Supplies the modified (K/V-swapped) score for a sampled (t, eps). The
/// style-backed implementation captures caches lazily; tests may stub it.
class ModifiedBranch {
 public:
  virtual ~ModifiedBranch() = default;
  virtual const ScoreModel& at(int t, const Image& eps) = 0;
};

/// ModifiedBranch backed by a StyleBranch cache and a SwappedScore view.
class StyleModifiedBranch final : public ModifiedBranch {
 public:
  StyleModifiedBranch(const UNet& net, StyleBranch& branch) : net_(net), branch_(branch) {}
  const ScoreModel& at(int t, const Image& eps) override {
    const AttentionCache& cache = branch_.ensure(t, eps);
    score_.emplace(net_, cache);
    return *score_;
  }

 private:
  const UNet& net_;
  StyleBranch& branch_;
  std::optional<SwappedScore> score_;
};

struct ResidualOutput {
  Image residual;
  int t = 0;
};

/// Eqs. of the guidance decomposition used by the noise-free loss.
struct GuidanceDecomposition {
  Image delta_D, delta_C;
  std::optional<Image> delta_D_hat, delta_C_hat;
};

struct SnfResidualOutput {
  Image residual;
  int t = 0;
  GuidanceDecomposition decomposition;
};

/// omega(t) * (eps_cfg(z_t|y) - eps), with t and eps drawn from rng.
ResidualOutput sds_residual(const ScoreModel& model, const NoiseSchedule& sched, const Image& x,
                            const PromptEmbedding& y, const PromptEmbedding& empty, Scalar beta,
                            Rng& rng);

/// omega(t) * ((1-lambda) eps_cfg + lambda eps_hat_cfg - eps); both branches
/// share one (t, eps, z_t). lambda=0 skips the modified branch entirely and is
/// draw-for-draw identical to sds_residual; lambda=1 skips the unmodified one.
ResidualOutput ssd_residual(const ScoreModel& unmodified, ModifiedBranch* modified,
                            const NoiseSchedule& sched, const Image& x,
                            const DistillPrompts& prompts, Scalar lambda, Scalar beta, Rng& rng);

/// Noise-free variant: omega(t) * ((1-l)(dD + b dC) + l(dD_hat + b dC_hat)),
/// domain direction switching at t < t_threshold_frac * T.
SnfResidualOutput snf_ssd_residual(const ScoreModel& unmodified, ModifiedBranch* modified,
                                   const NoiseSchedule& sched, const Image& x,
                                   const DistillPrompts& prompts, Scalar lambda, Scalar beta,
                                   Scalar t_threshold_frac, Rng& rng);

/// Small trainable denoiser that estimates the rendering distribution's
/// score for the VSD-flavored loss. Camera conditioning enters as one
/// synthetic token with fixed sinusoidal features.
class VsdAuxiliary {
 public:
  VsdAuxiliary(const UNet& main_net, Scalar lr, std::uint64_t seed);

  const UNet& net() const { return *net_; }
  PromptEmbedding conditioned(const PromptEmbedding& y, const std::optional<Camera>& cam) const;

  /// One denoising-loss training step on render x (display range).
  Scalar train_step(const Image& x, const PromptEmbedding& y, const std::optional<Camera>& cam,
                    const NoiseSchedule& sched, Rng& rng);

 private:
  std::unique_ptr<UNet> net_;
  std::unique_ptr<nn::Adam> opt_;
};

struct VsdResidualOutput {
  Image residual;
  int t = 0;
  Scalar aux_loss = 0.0;
};

/// omega(t) * ((1-l) eps_cfg + l eps_hat_cfg - eps_aux(z_t | y, cam)); also
/// performs one aux training step on the current render. aux_score may be a
/// stub; aux training runs only when aux != nullptr.
VsdResidualOutput vsd_ssd_residual(const ScoreModel& unmodified, ModifiedBranch* modified,
                                   const ScoreModel& aux_score, VsdAuxiliary* aux,
                                   const NoiseSchedule& sched, const Image& x,
                                   const DistillPrompts& prompts, Scalar lambda, Scalar beta,
                                   const std::optional<Camera>& cam, Rng& rng);

// ---------------------------------------------------------------------------
// optimization loop

struct Scene {
  enum class Mode { canvas2d, voxel3d };
  Mode mode = Mode::canvas2d;
  Canvas2D canvas;
  RadianceGrid grid;

  static Scene make_canvas(int h, int w);
  static Scene make_grid(int n);
};

struct TrajectoryEntry {
  long iter = 0;
  Scalar lambda = 0.0;
  int t = 0;
  std::string loss_kind;
  Scalar residual_norm = 0.0;
  double wall_ms = 0.0;
};

struct OptimizeResult {
  std::vector<TrajectoryEntry> log;
  Scalar aux_loss_last = 0.0;
};

/// K iterations of render -> residual -> scene update with the scheduled
/// style ratio. style == nullptr forces lambda == 0. extra_image_grad, when
/// set, returns an additional d(loss)/d(render01) term (the style-loss
/// regularizer of the neural-style baseline). Deterministic given cfg.seed
/// (wall_ms excepted).
OptimizeResult optimize_scene(
    Scene& scene, const UNet& net, StyleBranch* style, const DistillPrompts& prompts,
    const DistillationConfig& cfg, const StyleRatioSchedule& ratio, const NoiseSchedule& sched,
    const CameraPolicy& cam_policy,
    const std::function<void(long, const Image&)>& snapshot_cb = {},
    const std::function<Image(const Image&)>& extra_image_grad = {});

/// Display-range render of the scene (canvas ignores cam).
Image render_scene(const Scene& scene, const std::optional<Camera>& cam,
                   const RenderOptions& opts = {});

}  // namespace ssdlab
