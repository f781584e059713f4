#pragma once

#include <cmath>
#include <vector>

#include "ssdlab/common.hpp"
#include "ssdlab/image.hpp"
#include "ssdlab/rng.hpp"

namespace ssdlab {

enum class Weighting { sigma2, one };

/// Variance-preserving cosine schedule on the integer grid t in [0, T].
/// alpha(0) = 1, sigma(0) = 0 exactly; alpha^2 + sigma^2 = 1 by construction.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(int num_steps = 1000, Weighting weighting = Weighting::sigma2,
                         Scalar t_min_frac = 0.02, Scalar t_max_frac = 0.98)
      : T_(num_steps), weighting_(weighting), t_min_frac_(t_min_frac), t_max_frac_(t_max_frac) {
    check(num_steps >= 1, "NoiseSchedule: num_steps >= 1");
    check(t_min_frac >= 0.0 && t_max_frac <= 1.0 && t_min_frac < t_max_frac,
          "NoiseSchedule: bad timestep fraction range");
    alpha_.resize(T_ + 1);
    sigma_.resize(T_ + 1);
    const Scalar s = 0.008;
    const Scalar f0 = std::cos(s / (1.0 + s) * M_PI / 2.0);
    const Scalar denom = f0 * f0;
    for (int t = 0; t <= T_; ++t) {
      const Scalar u = (static_cast<Scalar>(t) / T_ + s) / (1.0 + s);
      const Scalar f = std::cos(u * M_PI / 2.0);
      Scalar abar = (f * f) / denom;
      if (abar > 1.0) abar = 1.0;
      if (abar < 0.0) abar = 0.0;
      alpha_[t] = std::sqrt(abar);
      sigma_[t] = std::sqrt(1.0 - abar);
    }
    alpha_[0] = 1.0;  // exact identity endpoint
    sigma_[0] = 0.0;
  }

  int num_steps() const { return T_; }
  Weighting weighting() const { return weighting_; }
  Scalar t_min_frac() const { return t_min_frac_; }
  Scalar t_max_frac() const { return t_max_frac_; }

  Scalar alpha(int t) const {
    check(t >= 0 && t <= T_, "alpha: t out of [0, T]");
    return alpha_[t];
  }
  Scalar sigma(int t) const {
    check(t >= 0 && t <= T_, "sigma: t out of [0, T]");
    return sigma_[t];
  }
  Scalar omega(int t) const {
    const Scalar s = sigma(t);
    return weighting_ == Weighting::sigma2 ? s * s : 1.0;
  }

  int t_min() const { return static_cast<int>(std::ceil(t_min_frac_ * T_)); }
  int t_max() const { return static_cast<int>(std::floor(t_max_frac_ * T_)); }

  /// Uniform integer timestep in the configured distillation range.
  int sample_timestep(Rng& rng) const {
    return static_cast<int>(rng.uniform_int(t_min(), t_max()));
  }

 private:
  int T_;
  Weighting weighting_;
  Scalar t_min_frac_, t_max_frac_;
  std::vector<Scalar> alpha_, sigma_;
};

/// z_t = alpha(t) x + sigma(t) eps together with the draw that made it.
struct NoisySample {
  Image z_t;
  int t = 0;
  Image eps;
};

inline NoisySample add_noise(const NoiseSchedule& sched, const Image& x, int t, const Image& eps) {
  check(x.all_finite(), "add_noise: x not finite");
  check(x.same_shape(eps), "add_noise: eps shape mismatch");
  check(t >= 0 && t <= sched.num_steps(), "add_noise: t out of [0, T]");
  NoisySample out;
  out.z_t = Image(x.h, x.w, sched.alpha(t) * x.data + sched.sigma(t) * eps.data);
  out.t = t;
  out.eps = eps;
  return out;
}

}  // namespace ssdlab
