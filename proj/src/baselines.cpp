#include "ssdlab/baselines.hpp"

#include <algorithm>
#include <ostream>

#include "ssdlab/checkpoint.hpp"

namespace ssdlab {

struct FeatureExtractor::Taps {
  nn::Conv2dCtx c[6];
  Mat pre[6];       // conv outputs before SiLU
  Image act[6];     // SiLU outputs (tap values as images)
};

FeatureExtractor::FeatureExtractor(int image_size, std::uint64_t seed) : image_size_(image_size) {
  Rng rng(seed);
  c1_.init(3, 12, 3, 1, rng);
  c2_.init(12, 12, 3, 2, rng);
  c3_.init(12, 24, 3, 1, rng);
  c4_.init(24, 24, 3, 2, rng);
  c5_.init(24, 32, 3, 1, rng);
  c6_.init(32, 32, 3, 2, rng);
  shape_head_.init(32, static_cast<int>(shape_classes().size()), rng);
  style_head_.init(32, static_cast<int>(style_classes().size()), rng);
  c1_.collect(params_, "c1");
  c2_.collect(params_, "c2");
  c3_.collect(params_, "c3");
  c4_.collect(params_, "c4");
  c5_.collect(params_, "c5");
  c6_.collect(params_, "c6");
  shape_head_.collect(params_, "shape_head");
  style_head_.collect(params_, "style_head");
}

std::vector<Mat> FeatureExtractor::run(const Image& x, Taps* taps) const {
  check(x.h == image_size_ && x.w == image_size_, "FeatureExtractor: resolution mismatch");
  const nn::Conv2d* convs[6] = {&c1_, &c2_, &c3_, &c4_, &c5_, &c6_};
  std::vector<Mat> feats;
  Image cur = x;
  for (int i = 0; i < 6; ++i) {
    Image pre = convs[i]->forward(cur, taps ? &taps->c[i] : nullptr);
    Image act(pre.h, pre.w, nn::silu(pre.data));
    if (taps) {
      taps->pre[i] = pre.data;
      taps->act[i] = act;
    }
    feats.push_back(act.data);
    cur = act;
  }
  return feats;
}

std::vector<Mat> FeatureExtractor::features(const Image& x) const { return run(x, nullptr); }

Image FeatureExtractor::features_backward(const Image& x, const std::vector<Mat>& d_feats) const {
  check(d_feats.size() == 6, "features_backward: expected 6 layer gradients");
  Taps taps;
  (void)run(x, &taps);
  const nn::Conv2d* convs[6] = {&c1_, &c2_, &c3_, &c4_, &c5_, &c6_};
  // scratch grad buffer: parameter grads are discarded, only dx matters
  nn::GradBuffer g(params_);
  Image dcur(taps.act[5].channels(), taps.act[5].h, taps.act[5].w);
  dcur.data.setZero();
  for (int i = 5; i >= 0; --i) {
    Mat dact = dcur.data + d_feats[static_cast<std::size_t>(i)];
    Mat dpre = dact.cwiseProduct(nn::silu_grad(taps.pre[i]));
    dcur = convs[i]->backward(Image(taps.act[i].h, taps.act[i].w, dpre), taps.c[i], g);
  }
  return dcur;
}

FeatureExtractor::Probe FeatureExtractor::classify(const Image& x) const {
  auto feats = run(x, nullptr);
  // global average pool of the last tap
  Vec pooled = feats.back().rowwise().mean();
  Probe p;
  p.shape_logits = Vec(shape_head_.forward(pooled).col(0));
  p.style_logits = Vec(style_head_.forward(pooled).col(0));
  p.shape_logits.maxCoeff(&p.shape_argmax);
  p.style_logits.maxCoeff(&p.style_argmax);
  return p;
}

namespace {

int index_of(const std::vector<std::string>& v, const std::string& s) {
  auto it = std::find(v.begin(), v.end(), s);
  return it == v.end() ? -1 : static_cast<int>(it - v.begin());
}

Vec softmax_vec(const Vec& z) {
  Vec e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

}  // namespace

Scalar FeatureExtractor::train(const ToyDataset& data, int steps, int batch, Scalar lr,
                               std::uint64_t seed, std::ostream* log) {
  std::vector<const LabeledImage*> labeled;
  for (const auto& item : data.items())
    if (!item.shape.empty()) labeled.push_back(&item);
  check(!labeled.empty(), "FeatureExtractor::train: no labeled items");

  Rng rng = Rng::substream(seed, "extractor");
  nn::Adam opt(params_, lr);
  Scalar last = 0.0;
  for (int step = 0; step < steps; ++step) {
    nn::GradBuffer g(params_);
    Scalar loss = 0.0;
    for (int b = 0; b < batch; ++b) {
      const auto* item =
          labeled[static_cast<std::size_t>(rng.uniform_int(0, (std::int64_t)labeled.size() - 1))];
      const int shape_idx = index_of(shape_classes(), item->shape);
      const int style_idx = index_of(style_classes(), item->style);

      Taps taps;
      auto feats = run(item->image, &taps);
      Vec pooled = feats.back().rowwise().mean();
      Vec shape_logits = Vec(shape_head_.forward(pooled).col(0));
      Vec style_logits = Vec(style_head_.forward(pooled).col(0));
      Vec ps = softmax_vec(shape_logits), pt = softmax_vec(style_logits);
      loss += -std::log(std::max(ps(shape_idx), 1e-12)) - std::log(std::max(pt(style_idx), 1e-12));

      Vec dshape = ps;
      dshape(shape_idx) -= 1.0;
      Vec dstyle = pt;
      dstyle(style_idx) -= 1.0;
      Mat dpooled = shape_head_.backward(pooled, dshape / batch, g) +
                    style_head_.backward(pooled, dstyle / batch, g);

      // pooled = rowwise mean of last tap; chain through the conv stack
      const Scalar npix = static_cast<Scalar>(taps.act[5].pixels());
      Mat dact = (dpooled.col(0) / npix).replicate(1, taps.act[5].pixels());
      const nn::Conv2d* convs[6] = {&c1_, &c2_, &c3_, &c4_, &c5_, &c6_};
      for (int i = 5; i >= 0; --i) {
        Mat dpre = dact.cwiseProduct(nn::silu_grad(taps.pre[i]));
        Image dx = convs[i]->backward(Image(taps.act[i].h, taps.act[i].w, dpre), taps.c[i], g);
        dact = dx.data;
      }
    }
    loss /= batch;
    opt.step(params_, g);
    last = loss;
    if (log && (step % 50 == 0 || step + 1 == steps))
      (*log) << "extractor step " << step << " loss " << loss << "\n";
  }
  return last;
}

void FeatureExtractor::save(const std::string& path) const {
  nlohmann::json header = {{"kind", "extractor"}, {"image_size", image_size_}};
  nlohmann::json names = nlohmann::json::array();
  std::vector<const Mat*> tensors;
  for (int i = 0; i < params_.size(); ++i) {
    names.push_back(params_[i].name);
    tensors.push_back(params_[i].value);
  }
  header["param_names"] = names;
  ckpt::write(path, std::move(header), tensors);
}

FeatureExtractor FeatureExtractor::load(const std::string& path) {
  auto contents = ckpt::read(path);
  check(contents.header.at("kind") == "extractor", "FeatureExtractor::load: wrong kind");
  FeatureExtractor f(contents.header.at("image_size").get<int>(), 0);
  check(static_cast<int>(contents.tensors.size()) == f.params_.size(),
        "FeatureExtractor::load: tensor count mismatch");
  for (int i = 0; i < f.params_.size(); ++i)
    *f.params_[i].value = contents.tensors[static_cast<std::size_t>(i)];
  return f;
}

Scalar neural_style_loss(const Image& x, const Image& s, const StyleFeatures& f) {
  check(x.h == s.h && x.w == s.w, "neural_style_loss: resolution mismatch");
  check(x.h == f.input_size() && x.w == f.input_size(),
        "neural_style_loss: resolution does not match the extractor input");
  auto fx = f.features(x);
  auto fs = f.features(s);
  Scalar loss = 0.0;
  for (std::size_t l = 0; l < fx.size(); ++l) loss += (fx[l] - fs[l]).squaredNorm();
  return loss;
}

std::pair<Scalar, Image> neural_style_loss_grad(const Image& x, const Image& s,
                                                const StyleFeatures& f) {
  check(x.h == s.h && x.w == s.w, "neural_style_loss: resolution mismatch");
  auto fx = f.features(x);
  auto fs = f.features(s);
  Scalar loss = 0.0;
  std::vector<Mat> d;
  for (std::size_t l = 0; l < fx.size(); ++l) {
    loss += (fx[l] - fs[l]).squaredNorm();
    d.push_back(2.0 * (fx[l] - fs[l]));
  }
  return {loss, f.features_backward(x, d)};
}

std::string style_in_prompt(const Vocabulary& vocab, const std::string& y,
                            const std::string& style_description) {
  check(!y.empty(), "style_in_prompt: empty content prompt");
  (void)vocab.tokenize(y);
  if (style_description.empty()) return y;
  (void)vocab.tokenize(style_description);  // raises listing unknown tokens
  return style_description + " " + y;
}

InvertedToken textual_inversion(const UNet& net, const NoiseSchedule& sched, const Image& s,
                                const TextualInversionConfig& cfg, Rng& rng) {
  check(s.h == net.arch().image_size && s.w == net.arch().image_size,
        "textual_inversion: image resolution does not match the model");
  const std::uint64_t checksum_before = net.param_checksum();

  InvertedToken token;
  token.source_hash = hash_mat(s.data);
  token.embedding = Vec::Zero(net.arch().token_dim);
  // warm start: nearest vocabulary style token named in the caption
  for (const auto& style : style_classes()) {
    if (cfg.init_caption.find(style) != std::string::npos) {
      token.embedding = net.token_table().col(net.vocab().id(style));
      break;
    }
  }
  if (cfg.steps == 0) return token;

  const Image s0 = to_model_range(s);
  const std::vector<int> prefix = net.vocab().tokenize("in the style of");

  Mat h = token.embedding;
  nn::ParamSet hp;
  hp.add("h", &h);
  nn::Adam opt(hp, cfg.lr);

  for (int step = 0; step < cfg.steps; ++step) {
    PromptEmbedding cond;
    cond.tokens = prefix;
    cond.tokens.push_back(kLearnedTokenId);
    cond.embedding.resize(net.arch().token_dim, static_cast<Eigen::Index>(cond.tokens.size()));
    for (std::size_t i = 0; i < prefix.size(); ++i)
      cond.embedding.col(static_cast<Eigen::Index>(i)) = net.token_table().col(prefix[i]);
    cond.embedding.col(cond.embedding.cols() - 1) = h.col(0);
    cond.kind = PromptKind::style;

    const int t = static_cast<int>(rng.uniform_int(1, sched.num_steps()));
    Image eps(s0.channels(), s0.h, s0.w);
    eps.data = rng.normal_mat(s0.data.rows(), s0.data.cols());
    auto ns = add_noise(sched, s0, t, eps);

    UNet::Tape tape;
    Image pred = net.forward_cached(ns.z_t, t, cond, tape);
    const Scalar numel = static_cast<Scalar>(pred.data.size());
    Mat diff = pred.data - eps.data;
    const Scalar loss = diff.squaredNorm() / numel;
    token.loss_history.push_back(loss);
    if (!std::isfinite(loss)) {
      std::ostringstream os;
      os << "textual_inversion: diverged at step " << step << "; loss history:";
      for (Scalar v : token.loss_history) os << " " << v;
      throw NumericalError(os.str());
    }

    nn::GradBuffer g(net.params());  // denoiser grads discarded, never applied
    auto in_grads = net.backward(Image(pred.h, pred.w, (2.0 / numel) * diff), tape, g);
    nn::GradBuffer hg(hp);
    hg.at(0) = in_grads.dcond_embedding.col(in_grads.dcond_embedding.cols() - 1);
    opt.step(hp, hg);
  }

  token.embedding = Vec(h.col(0));
  token.steps = cfg.steps;
  const std::size_t tail = std::min<std::size_t>(10, token.loss_history.size());
  token.final_loss = 0.0;
  for (std::size_t i = token.loss_history.size() - tail; i < token.loss_history.size(); ++i)
    token.final_loss += token.loss_history[i];
  token.final_loss /= static_cast<Scalar>(tail);

  check(net.param_checksum() == checksum_before,
        "textual_inversion: denoiser parameters changed (frozen-model contract)");
  return token;
}

PromptEmbedding inverted_prompt(const UNet& net, const InvertedToken& token) {
  PromptEmbedding p;
  p.tokens = net.vocab().tokenize("in the style of");
  p.embedding.resize(net.arch().token_dim, static_cast<Eigen::Index>(p.tokens.size()) + 1);
  for (std::size_t i = 0; i < p.tokens.size(); ++i)
    p.embedding.col(static_cast<Eigen::Index>(i)) = net.token_table().col(p.tokens[i]);
  p.embedding.col(p.embedding.cols() - 1) = token.embedding;
  p.tokens.push_back(kLearnedTokenId);
  p.kind = PromptKind::style;
  return p;
}

PromptEmbedding augment_with_token(const UNet& net, const std::string& y,
                                   const InvertedToken& token) {
  PromptEmbedding p;
  p.tokens = net.vocab().tokenize(y);
  auto prefix = net.vocab().tokenize("in the style of");
  p.tokens.insert(p.tokens.end(), prefix.begin(), prefix.end());
  p.embedding.resize(net.arch().token_dim, static_cast<Eigen::Index>(p.tokens.size()) + 1);
  for (std::size_t i = 0; i < p.tokens.size(); ++i)
    p.embedding.col(static_cast<Eigen::Index>(i)) = net.token_table().col(p.tokens[i]);
  p.embedding.col(p.embedding.cols() - 1) = token.embedding;
  p.tokens.push_back(kLearnedTokenId);
  p.kind = PromptKind::augmented;
  return p;
}

std::string caption_style_image(const Image& s, const CaptionProvider& provider) {
  if (provider.kind == CaptionProvider::Kind::manual) {
    if (provider.manual_caption.empty())
      throw ContractError("caption_style_image: manual provider requires a caption");
    return provider.manual_caption;
  }
  try {
    std::string caption = fetch_caption_http(s, provider);
    check(!caption.empty(), "caption_style_image: external provider returned empty caption");
    return caption;
  } catch (const ExternalServiceError&) {
    if (!provider.manual_caption.empty()) return provider.manual_caption;
    throw;
  }
}

}  // namespace ssdlab
