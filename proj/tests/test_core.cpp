#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ssdlab/denoiser.hpp"
#include "ssdlab/rng.hpp"
#include "ssdlab/schedule.hpp"

using namespace ssdlab;

namespace {

UNet make_tiny_net(std::uint64_t seed = 7) {
  ArchConfig cfg;
  cfg.image_size = 8;
  cfg.base = 4;
  cfg.embed_dim = 16;
  cfg.token_dim = 8;
  return UNet(cfg, Vocabulary::standard(), seed);
}

}  // namespace

TEST_CASE("rng substreams are deterministic and independent") {
  Rng a = Rng::substream(42, "dataset");
  Rng b = Rng::substream(42, "dataset");
  Rng c = Rng::substream(42, "distillation");
  CHECK(a.normal() == b.normal());
  CHECK(a.uniform() == b.uniform());
  Rng a2 = Rng::substream(42, "dataset");
  CHECK(a2.normal() != c.normal());
}

TEST_CASE("noise schedule satisfies variance preservation and monotonicity") {
  NoiseSchedule sched(1000);
  for (int t = 0; t <= 1000; t += 17) {
    const Scalar a = sched.alpha(t), s = sched.sigma(t);
    CHECK(std::abs(a * a + s * s - 1.0) < 1e-6);
  }
  CHECK(sched.alpha(0) == 1.0);
  CHECK(sched.sigma(0) == 0.0);
  for (int t = 1; t <= 1000; ++t) {
    CHECK(sched.alpha(t) <= sched.alpha(t - 1) + 1e-15);
    CHECK(sched.sigma(t) >= sched.sigma(t - 1) - 1e-15);
    CHECK(sched.omega(t) >= 0.0);
  }
  CHECK(sched.t_min() == 20);
  CHECK(sched.t_max() == 980);
}

TEST_CASE("add_noise identity endpoint and linearity") {
  NoiseSchedule sched(100);
  Rng rng(1);
  Image x(3, 4, 4);
  x.data = rng.normal_mat(3, 16);
  Image eps(3, 4, 4);
  eps.data = rng.normal_mat(3, 16);

  auto ns = add_noise(sched, x, 0, eps);  // alpha=1, sigma=0
  CHECK(max_abs_diff(ns.z_t, x) == 0.0);

  // alpha=0.6/sigma=0.8 style linearity on a handmade schedule point:
  Image zero = Image::constant(3, 4, 4, 0.0);
  Image ones = Image::constant(3, 4, 4, 1.0);
  // find a t and verify z = alpha*0 + sigma*1 = sigma exactly
  int t = 60;
  auto ns2 = add_noise(sched, zero, t, ones);
  CHECK(ns2.z_t.data(0, 0) == doctest::Approx(sched.sigma(t)).epsilon(1e-12));

  Image bad(3, 4, 5);
  CHECK_THROWS_AS(add_noise(sched, x, 10, bad), ContractError);
}

TEST_CASE("add_noise matches moments over many draws") {
  NoiseSchedule sched(1000);
  Rng rng(99);
  const int t = 430;
  Image x = Image::constant(1, 2, 2, 0.7);
  const int n = 10000;
  Scalar sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    Image eps(1, 2, 2);
    eps.data = rng.normal_mat(1, 4);
    auto ns = add_noise(sched, x, t, eps);
    const Scalar v = ns.z_t.data(0, 0);
    sum += v;
    sumsq += v * v;
  }
  const Scalar mean = sum / n;
  const Scalar var = sumsq / n - mean * mean;
  const Scalar expected_mean = sched.alpha(t) * 0.7;
  const Scalar expected_var = sched.sigma(t) * sched.sigma(t);
  const Scalar se_mean = sched.sigma(t) / std::sqrt((Scalar)n);
  const Scalar se_var = expected_var * std::sqrt(2.0 / n);
  CHECK(std::abs(mean - expected_mean) < 3 * se_mean);
  CHECK(std::abs(var - expected_var) < 3 * se_var);
}

TEST_CASE("denoiser prediction is deterministic and parameter-pure") {
  UNet net = make_tiny_net();
  net.set_untrained_ok(true);
  Rng rng(5);
  Image z(3, 8, 8);
  z.data = rng.normal_mat(3, 64);
  auto cond = net.embed_text("red sphere", PromptKind::content);

  const std::uint64_t before = net.param_checksum();
  Image a = net.predict(z, 100, cond);
  Image b = net.predict(z, 100, cond);
  CHECK(max_abs_diff(a, b) == 0.0);
  CHECK(net.param_checksum() == before);
  CHECK(a.all_finite());
}

TEST_CASE("unknown vocabulary token raises") {
  UNet net = make_tiny_net();
  net.set_untrained_ok(true);
  CHECK_THROWS_WITH_AS(net.embed_text("glorp sphere", PromptKind::content),
                       doctest::Contains("glorp"), ContractError);
}

TEST_CASE("untrained predict requires explicit flag") {
  UNet net = make_tiny_net();
  Image z(3, 8, 8);
  auto cond = net.empty_prompt();
  CHECK_THROWS_AS(net.predict(z, 10, cond), ContractError);
  net.set_untrained_ok(true);
  CHECK_NOTHROW(net.predict(z, 10, cond));
}

TEST_CASE("cfg_combine endpoints and affine linearity in beta") {
  UNet net = make_tiny_net();
  net.set_untrained_ok(true);
  UNetScore score(net);
  Rng rng(11);
  Image z(3, 8, 8);
  z.data = rng.normal_mat(3, 64);
  auto cond = net.embed_text("blue cube", PromptKind::content);
  auto empty = net.empty_prompt();

  Image at1 = cfg_combine(score, z, 50, cond, empty, 1.0);
  CHECK(max_abs_diff(at1, net.predict(z, 50, cond)) == 0.0);
  Image at0 = cfg_combine(score, z, 50, cond, empty, 0.0);
  CHECK(max_abs_diff(at0, net.predict(z, 50, empty)) == 0.0);

  // affine in beta: e(b) = e(0) + b*(e(1)-e(0))
  Image e25 = cfg_combine(score, z, 50, cond, empty, 2.5);
  Image pred(z.h, z.w, at0.data + 2.5 * (at1.data - at0.data));
  CHECK(max_abs_diff(e25, pred) < 1e-12);

  Image e100 = cfg_combine(score, z, 50, cond, empty, 100.0);
  CHECK(e100.all_finite());
}

TEST_CASE("denoiser backward matches finite differences") {
  UNet net = make_tiny_net(21);
  net.set_untrained_ok(true);
  Rng rng(3);
  // zero-initialized projections (out_conv, attention wo) block gradient flow
  // on a fresh net; jitter every parameter so all paths are exercised
  for (int i = 0; i < net.params().size(); ++i) {
    Mat* pm = net.params()[i].value;
    *pm += 0.05 * rng.normal_mat(pm->rows(), pm->cols());
  }
  Image z(3, 8, 8);
  z.data = rng.normal_mat(3, 64);
  auto cond = net.embed_text("golden cone", PromptKind::content);
  const int t = 77;

  // loss = <R, eps_hat>
  Mat R = rng.normal_mat(3, 64);
  auto loss_fn = [&]() {
    Image out = net.predict(z, t, cond);
    return (R.cwiseProduct(out.data)).sum();
  };

  UNet::Tape tape;
  Image out = net.forward_cached(z, t, cond, tape);
  nn::GradBuffer g(net.params());
  auto in_grads = net.backward(Image(8, 8, R), tape, g);

  const Scalar h = 1e-5;

  // input gradient, a few coordinates
  for (auto [c, p] : {std::pair{0, 5}, {1, 33}, {2, 60}}) {
    const Scalar orig = z.data(c, p);
    z.data(c, p) = orig + h;
    const Scalar lp = loss_fn();
    z.data(c, p) = orig - h;
    const Scalar lm = loss_fn();
    z.data(c, p) = orig;
    const Scalar fd = (lp - lm) / (2 * h);
    CHECK(in_grads.dz.data(c, p) == doctest::Approx(fd).epsilon(1e-4));
  }

  // conditioning embedding gradient
  for (auto [r, c] : {std::pair{0, 0}, {3, 1}}) {
    const Scalar orig = cond.embedding(r, c);
    cond.embedding(r, c) = orig + h;
    const Scalar lp = loss_fn();
    cond.embedding(r, c) = orig - h;
    const Scalar lm = loss_fn();
    cond.embedding(r, c) = orig;
    const Scalar fd = (lp - lm) / (2 * h);
    CHECK(in_grads.dcond_embedding(r, c) == doctest::Approx(fd).epsilon(1e-4));
  }

  // parameter gradients: probe several coordinates across every parameter
  auto& ps = net.params();
  Rng pick(17);
  int checked = 0;
  for (int i = 0; i < ps.size(); ++i) {
    Mat* pm = ps[i].value;
    if (pm->size() == 0) continue;
    const Eigen::Index idx = static_cast<Eigen::Index>(
        pick.uniform_int(0, static_cast<std::int64_t>(pm->size() - 1)));
    const Scalar orig = pm->data()[idx];
    pm->data()[idx] = orig + h;
    const Scalar lp = loss_fn();
    pm->data()[idx] = orig - h;
    const Scalar lm = loss_fn();
    pm->data()[idx] = orig;
    const Scalar fd = (lp - lm) / (2 * h);
    const Scalar an = g.at(i).data()[idx];
    if (std::abs(fd) > 1e-7 || std::abs(an) > 1e-7) {
      CHECK(an == doctest::Approx(fd).epsilon(2e-3));
      ++checked;
    }
  }
  CHECK(checked > 20);
}
