#include "ssdlab/style.hpp"

#include "ssdlab/checkpoint.hpp"

namespace ssdlab {

void StyleReference::validate(int t_lo, int t_hi) const {
  check(image.channels() == 3 && image.h > 0, "StyleReference: missing image");
  if (origin == StyleOrigin::generated) {
    check(style_prompt.has_value(), "StyleReference: generated origin requires a style prompt");
  } else {
    check(trajectory.has_value(), "StyleReference: inverted origin requires a trajectory");
    for (int t = t_lo; t <= t_hi; ++t)
      if (!trajectory->covers(t))
        throw ContractError("StyleReference: trajectory missing timestep t=" + std::to_string(t));
  }
}

StyleReference make_generated_reference(Image image, PromptEmbedding y_s, std::string caption) {
  StyleReference ref;
  ref.content_hash = hash_mat(image.data);
  ref.image = std::move(image);
  ref.origin = StyleOrigin::generated;
  ref.style_prompt = std::move(y_s);
  ref.caption = std::move(caption);
  return ref;
}

void capture_style_features(const UNet& net, const NoiseSchedule& sched, const StyleReference& ref,
                            int t, const Image& eps, AttentionCache& cache) {
  if (cache.complete_for(t)) return;
  if (ref.origin == StyleOrigin::inverted) {
    check(ref.trajectory.has_value(), "capture_style_features: inverted origin without trajectory");
    if (!ref.trajectory->covers(t))
      throw ContractError("capture_style_features: trajectory missing timestep t=" +
                          std::to_string(t));
  }
  const Image s0 = to_model_range(ref.image);
  check(s0.same_shape(eps), "capture_style_features: eps shape mismatch");
  auto ns = add_noise(sched, s0, t, eps);
  const PromptEmbedding cond =
      ref.style_prompt.has_value() ? *ref.style_prompt : net.empty_prompt();
  HookPlan plan;
  plan.capture_into = &cache;
  plan.t = t;
  (void)net.predict(ns.z_t, t, cond, &plan);  // style pass output discarded
}

Image modified_predict_noise(const UNet& net, const Image& z_t, int t, const PromptEmbedding& y,
                             const AttentionCache& cache) {
  if (!cache.complete_for(t))
    throw ContractError("modified_predict_noise: incomplete attention cache for t=" +
                        std::to_string(t));
  HookPlan plan;
  plan.replace_from = &cache;
  plan.t = t;
  return net.predict(z_t, t, y, &plan);
}

StyleBranch::StyleBranch(const UNet& net, const NoiseSchedule& sched, StyleReference ref,
                         std::set<int> swap_layers, std::uint64_t seed)
    : net_(net), sched_(sched), ref_(std::move(ref)), cache_(std::move(swap_layers)), seed_(seed) {
  ref_.validate(sched_.t_min(), sched_.t_max());
}

const AttentionCache& StyleBranch::ensure(int t, const Image& shared_eps) {
  if (ref_.origin == StyleOrigin::generated) {
    // independent per-(style, t) noise; entries stay valid for the whole run
    Rng rng = Rng::substream(seed_ ^ ref_.content_hash, "style-noise-" + std::to_string(t));
    Image eps(ref_.image.channels(), ref_.image.h, ref_.image.w);
    eps.data = rng.normal_mat(eps.data.rows(), eps.data.cols());
    capture_style_features(net_, sched_, ref_, t, eps, cache_);
    return cache_;
  }
  // inverted origin shares the content branch's eps, which changes per
  // iteration; recapture when it does
  const std::uint64_t h = hash_mat(shared_eps.data);
  if (h != last_eps_hash_) {
    cache_.clear();
    last_eps_hash_ = h;
  }
  capture_style_features(net_, sched_, ref_, t, shared_eps, cache_);
  return cache_;
}

InvertReport invert_style_image(const UNet& net, const NoiseSchedule& sched, const Image& image,
                                const InvertOptions& opts) {
  const int t_end = opts.t_end > 0 ? opts.t_end : sched.t_max();
  const auto empty = net.empty_prompt();
  InvertReport report;
  LatentTrajectory traj = ddim_invert(net, sched, image, empty, t_end);

  Image recon = ddim_reconstruct(net, sched, traj.at(t_end), t_end, empty);
  report.recon_mae =
      (recon.data - image.data).cwiseAbs().mean();
  report.warning = report.recon_mae > opts.recon_error_threshold;

  report.ref.image = image;
  report.ref.origin = StyleOrigin::inverted;
  report.ref.trajectory = std::move(traj);
  report.ref.content_hash = hash_mat(image.data);
  return report;
}

void save_style_reference(const StyleReference& ref, const std::string& path) {
  nlohmann::json header = {
      {"kind", "style_reference"},
      {"origin", ref.origin == StyleOrigin::generated ? "generated" : "inverted"},
      {"caption", ref.caption},
      {"content_hash", ref.content_hash},
      {"image_h", ref.image.h},
      {"image_w", ref.image.w},
  };
  std::vector<const Mat*> tensors = {&ref.image.data};
  if (ref.style_prompt.has_value()) {
    header["ys_tokens"] = ref.style_prompt->tokens;
    header["ys_kind"] = to_string(ref.style_prompt->kind);
    tensors.push_back(&ref.style_prompt->embedding);
  }
  std::vector<int> ts;
  if (ref.trajectory.has_value()) {
    for (const auto& [t, z] : ref.trajectory->latents) {
      ts.push_back(t);
      tensors.push_back(&z.data);
    }
    header["trajectory_h"] = ref.trajectory->latents.begin()->second.h;
  }
  header["trajectory_ts"] = ts;
  ckpt::write(path, std::move(header), tensors);
}

StyleReference load_style_reference(const std::string& path, const UNet& net) {
  auto contents = ckpt::read(path);
  const auto& h = contents.header;
  check(h.at("kind") == "style_reference", "load_style_reference: wrong checkpoint kind");
  StyleReference ref;
  ref.origin =
      h.at("origin").get<std::string>() == "generated" ? StyleOrigin::generated : StyleOrigin::inverted;
  ref.caption = h.at("caption").get<std::string>();
  ref.content_hash = h.at("content_hash").get<std::uint64_t>();
  std::size_t ti = 0;
  ref.image = Image(h.at("image_h").get<int>(), h.at("image_w").get<int>(),
                    contents.tensors[ti++]);
  if (h.contains("ys_tokens")) {
    PromptEmbedding p;
    p.tokens = h.at("ys_tokens").get<std::vector<int>>();
    p.embedding = contents.tensors[ti++];
    const std::string kind = h.at("ys_kind").get<std::string>();
    p.kind = kind == "style" ? PromptKind::style : PromptKind::augmented;
    ref.style_prompt = std::move(p);
  }
  const auto ts = h.at("trajectory_ts").get<std::vector<int>>();
  if (!ts.empty()) {
    LatentTrajectory traj;
    const int th = h.at("trajectory_h").get<int>();
    for (int t : ts) traj.latents[t] = Image(th, th, contents.tensors[ti++]);
    ref.trajectory = std::move(traj);
  }
  (void)net;
  return ref;
}

}  // namespace ssdlab
