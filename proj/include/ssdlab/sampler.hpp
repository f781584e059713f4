#pragma once

#include <map>
#include <vector>

#include "ssdlab/denoiser.hpp"
#include "ssdlab/schedule.hpp"

namespace ssdlab {

struct SampleConfig {
  int steps = 50;       // DDIM grid size
  Scalar cfg_scale = 3.0;
  std::uint64_t seed = 0;
};

/// Deterministic DDIM sampling from pure noise; returns display-range images.
std::vector<Image> sample_images(const UNet& net, const NoiseSchedule& sched,
                                 const PromptEmbedding& cond, int count, const SampleConfig& cfg);

/// One deterministic DDIM step t -> s (s < t) given the model prediction.
Image ddim_step(const NoiseSchedule& sched, const Image& z_t, const Image& eps_hat, int t, int s);

/// Deterministic DDIM trajectory: model-range z at every recorded timestep.
struct LatentTrajectory {
  std::map<int, Image> latents;  // t -> z_t

  bool covers(int t) const { return latents.count(t) > 0; }
  const Image& at(int t) const {
    auto it = latents.find(t);
    if (it == latents.end())
      throw ContractError("trajectory: missing timestep t=" + std::to_string(t));
    return it->second;
  }
};

/// DDIM inversion of a display-range image along every integer timestep in
/// [0, t_end]; cond is typically the empty prompt.
LatentTrajectory ddim_invert(const UNet& net, const NoiseSchedule& sched, const Image& image,
                             const PromptEmbedding& cond, int t_end);

/// Deterministic DDIM re-sampling from a trajectory's terminal latent back to
/// t=0; used by the inversion round-trip oracle.
Image ddim_reconstruct(const UNet& net, const NoiseSchedule& sched, const Image& z_end, int t_end,
                       const PromptEmbedding& cond);

}  // namespace ssdlab
