#include "ssdlab/training.hpp"

#include <ostream>

namespace ssdlab {

namespace {

std::pair<std::vector<const LabeledImage*>, std::vector<const LabeledImage*>> split_holdout(
    const ToyDataset& data, Scalar holdout_fraction) {
  std::vector<const LabeledImage*> train, holdout;
  const int stride = holdout_fraction > 0.0 ? std::max(2, static_cast<int>(1.0 / holdout_fraction))
                                            : 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (stride > 0 && i % static_cast<std::size_t>(stride) == 0)
      holdout.push_back(&data.items()[i]);
    else
      train.push_back(&data.items()[i]);
  }
  if (holdout.empty()) holdout.push_back(&data.items()[0]);
  return {std::move(train), std::move(holdout)};
}

}  // namespace

Scalar holdout_denoise_loss(const UNet& net, const std::vector<const LabeledImage*>& items,
                            const NoiseSchedule& sched, std::uint64_t seed, int draws_per_item) {
  Rng rng = Rng::substream(seed, "holdout");
  Scalar total = 0.0;
  long count = 0;
  for (const auto* item : items) {
    const Image x0 = to_model_range(item->image);
    for (int d = 0; d < draws_per_item; ++d) {
      const int t = static_cast<int>(rng.uniform_int(1, sched.num_steps()));
      Image eps(x0.channels(), x0.h, x0.w);
      eps.data = rng.normal_mat(x0.data.rows(), x0.data.cols());
      auto ns = add_noise(sched, x0, t, eps);
      auto cond = net.embed_tokens(item->tokens, PromptKind::content);
      Image pred = net.predict(ns.z_t, t, cond);
      total += (pred.data - eps.data).squaredNorm() / static_cast<Scalar>(eps.data.size());
      ++count;
    }
  }
  return total / static_cast<Scalar>(count);
}

TrainResult train_toy_denoiser(UNet& net, const ToyDataset& data, const NoiseSchedule& sched,
                               const TrainConfig& cfg, std::ostream* log) {
  check(cfg.steps > 0 && cfg.batch_size > 0, "train: steps and batch_size must be positive");
  check(!data.items().empty(), "train: empty dataset");
  auto [train_items, holdout_items] = split_holdout(data, cfg.holdout_fraction);

  Rng rng = Rng::substream(cfg.seed, "train");
  nn::GradBuffer grads(net.params());
  nn::Adam opt(net.params(), cfg.lr);
  net.set_untrained_ok(true);

  TrainResult result;
  const auto empty = net.embed_tokens({Vocabulary::kEmptyId}, PromptKind::empty);
  Scalar smooth = 0.0;
  for (int step = 0; step < cfg.steps; ++step) {
    grads.zero();
    Scalar batch_loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto* item =
          train_items[static_cast<std::size_t>(rng.uniform_int(0, (std::int64_t)train_items.size() - 1))];
      const Image x0 = to_model_range(item->image);
      const bool high_t = rng.uniform() < cfg.high_t_bias;
      const int t = static_cast<int>(
          rng.uniform_int(high_t ? sched.num_steps() / 2 : 1, sched.num_steps()));
      Image eps(x0.channels(), x0.h, x0.w);
      eps.data = rng.normal_mat(x0.data.rows(), x0.data.cols());
      auto ns = add_noise(sched, x0, t, eps);

      const bool drop = rng.uniform() < cfg.cond_dropout;
      auto cond = drop ? empty : net.embed_tokens(item->tokens, PromptKind::content);
      if (drop) ++result.empty_cond_samples;
      ++result.total_samples;

      UNet::Tape tape;
      Image pred = net.forward_cached(ns.z_t, t, cond, tape);
      const Scalar numel = static_cast<Scalar>(pred.data.size());
      Mat diff = pred.data - eps.data;
      batch_loss += diff.squaredNorm() / numel;
      Image d_eps(pred.h, pred.w, (2.0 / (numel * cfg.batch_size)) * diff);
      net.backward(d_eps, tape, grads);
    }
    batch_loss /= cfg.batch_size;
    if (!std::isfinite(batch_loss)) throw NumericalError("train: loss diverged at step " + std::to_string(step));
    opt.step(net.params(), grads);
    result.loss_history.push_back(batch_loss);
    smooth = step == 0 ? batch_loss : 0.98 * smooth + 0.02 * batch_loss;
    if (log && cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
      (*log) << "step " << step << " loss " << batch_loss << " (smooth " << smooth << ")\n";
  }

  result.final_train_loss = smooth;
  result.holdout_loss = holdout_denoise_loss(net, holdout_items, sched, cfg.seed);
  result.converged = result.holdout_loss < cfg.converge_threshold;
  if (!result.converged && log)
    (*log) << "WARNING: holdout loss " << result.holdout_loss << " above threshold "
           << cfg.converge_threshold << " (not converged)\n";
  net.mark_trained(result.final_train_loss);
  return result;
}

}  // namespace ssdlab
