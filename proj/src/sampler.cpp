#include "ssdlab/sampler.hpp"

#include "ssdlab/rng.hpp"

namespace ssdlab {

namespace {

Image predicted_x0(const NoiseSchedule& sched, const Image& z_t, const Image& eps_hat, int t) {
  const Scalar a = sched.alpha(t), s = sched.sigma(t);
  Image x0(z_t.h, z_t.w, (z_t.data - s * eps_hat.data) / a);
  x0.data = x0.data.cwiseMax(-1.5).cwiseMin(1.5);  // keeps toy sampling stable
  return x0;
}

}  // namespace

Image ddim_step(const NoiseSchedule& sched, const Image& z_t, const Image& eps_hat, int t, int s) {
  check(s >= 0 && s < t, "ddim_step: requires 0 <= s < t");
  Image x0 = predicted_x0(sched, z_t, eps_hat, t);
  return Image(z_t.h, z_t.w, sched.alpha(s) * x0.data + sched.sigma(s) * eps_hat.data);
}

std::vector<Image> sample_images(const UNet& net, const NoiseSchedule& sched,
                                 const PromptEmbedding& cond, int count, const SampleConfig& cfg) {
  check(count > 0 && cfg.steps > 0, "sample_images: count and steps must be positive");
  const int T = sched.num_steps();
  std::vector<int> grid;
  for (int i = cfg.steps; i >= 0; --i)
    grid.push_back(static_cast<int>(std::llround(static_cast<double>(T) * i / cfg.steps)));

  UNetScore score(net);
  const auto empty = net.embed_tokens({Vocabulary::kEmptyId}, PromptKind::empty);
  std::vector<Image> out;
  const int size = net.arch().image_size;
  for (int i = 0; i < count; ++i) {
    Rng rng = Rng::substream(cfg.seed, "sample-" + std::to_string(i));
    Image z(net.arch().in_channels, size, size);
    z.data = rng.normal_mat(z.data.rows(), z.data.cols());
    for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
      const int t = grid[k], s = grid[k + 1];
      Image eps_hat = cfg_combine(score, z, t, cond, empty, cfg.cfg_scale);
      z = s == 0 ? predicted_x0(sched, z, eps_hat, t) : ddim_step(sched, z, eps_hat, t, s);
    }
    out.push_back(to_display_range(z));
  }
  return out;
}

LatentTrajectory ddim_invert(const UNet& net, const NoiseSchedule& sched, const Image& image,
                             const PromptEmbedding& cond, int t_end) {
  check(t_end >= 1 && t_end <= sched.num_steps(), "ddim_invert: t_end out of range");
  check(image.h == net.arch().image_size && image.w == net.arch().image_size,
        "ddim_invert: image resolution does not match the model");
  LatentTrajectory traj;
  Image z = to_model_range(image);
  traj.latents[0] = z;
  for (int t = 0; t < t_end; ++t) {
    // sigma(0)=0 so x0 == z at the first step; afterwards the usual
    // eps(z_t, t) ~ eps(z_{t+1}, t+1) inversion approximation
    Image eps_hat = net.predict(z, t, cond);
    Image x0 = predicted_x0(sched, z, eps_hat, std::max(t, 1));
    if (t == 0) x0 = z;
    z = Image(z.h, z.w, sched.alpha(t + 1) * x0.data + sched.sigma(t + 1) * eps_hat.data);
    traj.latents[t + 1] = z;
  }
  return traj;
}

Image ddim_reconstruct(const UNet& net, const NoiseSchedule& sched, const Image& z_end, int t_end,
                       const PromptEmbedding& cond) {
  Image z = z_end;
  for (int t = t_end; t >= 1; --t) {
    Image eps_hat = net.predict(z, t, cond);
    z = t == 1 ? predicted_x0(sched, z, eps_hat, t) : ddim_step(sched, z, eps_hat, t, t - 1);
  }
  return to_display_range(z);
}

}  // namespace ssdlab
