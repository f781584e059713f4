#pragma once

#include <optional>
#include <set>
#include <string>

#include "ssdlab/attention_cache.hpp"
#include "ssdlab/denoiser.hpp"
#include "ssdlab/sampler.hpp"
#include "ssdlab/schedule.hpp"

namespace ssdlab {

enum class StyleOrigin { generated, inverted };

/// Style-conditioning source: a reference image plus either the prompt that
/// generates it (generated origin, including textual inversion) or a dense
/// DDIM inversion trajectory (inverted origin).
struct StyleReference {
  Image image;  // display range, model resolution
  StyleOrigin origin = StyleOrigin::generated;
  std::optional<PromptEmbedding> style_prompt;   // y_s; required for generated
  std::optional<LatentTrajectory> trajectory;    // required for inverted
  std::string caption;                           // used for prompt augmentation
  std::uint64_t content_hash = 0;

  /// Origin invariants; for inverted origin the trajectory must cover every
  /// timestep in [t_lo, t_hi].
  void validate(int t_lo, int t_hi) const;
};

StyleReference make_generated_reference(Image image, PromptEmbedding y_s, std::string caption);

/// Captures K/V at every swap layer of `cache` for timestep t, from a style
/// pass on z_t^s = alpha_t s + sigma_t eps. The style pass's own noise
/// prediction is discarded. No-op when the cache already covers t.
void capture_style_features(const UNet& net, const NoiseSchedule& sched, const StyleReference& ref,
                            int t, const Image& eps, AttentionCache& cache);

/// eps_hat(z_t | y, s): forward pass with K/V at the swap layers replaced by
/// the cache entries at t. The cache must be complete for t.
Image modified_predict_noise(const UNet& net, const Image& z_t, int t, const PromptEmbedding& y,
                             const AttentionCache& cache);

/// ScoreModel view of the swapped forward pass.
class SwappedScore final : public ScoreModel {
 public:
  SwappedScore(const UNet& net, const AttentionCache& cache) : net_(net), cache_(cache) {}
  Image predict(const Image& z_t, int t, const PromptEmbedding& cond) const override {
    return modified_predict_noise(net_, z_t, t, cond, cache_);
  }

 private:
  const UNet& net_;
  const AttentionCache& cache_;
};

/// Lazily-captured style conditioning for one reference. For generated origin
/// the style latent draws from a per-(style, t) substream and entries persist;
/// for inverted origin the latent shares the content branch's eps, so entries
/// are recaptured whenever that eps changes.
class StyleBranch {
 public:
  StyleBranch(const UNet& net, const NoiseSchedule& sched, StyleReference ref,
              std::set<int> swap_layers, std::uint64_t seed);

  const AttentionCache& ensure(int t, const Image& shared_eps);
  const AttentionCache& cache() const { return cache_; }
  const StyleReference& reference() const { return ref_; }

 private:
  const UNet& net_;
  const NoiseSchedule& sched_;
  StyleReference ref_;
  AttentionCache cache_;
  std::uint64_t seed_;
  std::uint64_t last_eps_hash_ = 0;
};

struct InvertOptions {
  Scalar recon_error_threshold = 0.05;  // MAE in display units
  int t_end = -1;                       // default: schedule t_max
};

struct InvertReport {
  StyleReference ref;
  Scalar recon_mae = 0.0;
  bool warning = false;  // reconstruction error above threshold
};

/// DDIM-inversion mode of invert_style_image. (The textual-inversion mode
/// lives in baselines and produces a generated-origin reference.)
InvertReport invert_style_image(const UNet& net, const NoiseSchedule& sched, const Image& image,
                                const InvertOptions& opts = {});

void save_style_reference(const StyleReference& ref, const std::string& path);
StyleReference load_style_reference(const std::string& path, const UNet& net);

}  // namespace ssdlab
