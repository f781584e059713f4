#include "ssdlab/denoiser.hpp"

#include "ssdlab/rng.hpp"

namespace ssdlab {

namespace {

void stage_check(const Mat& x, const char* stage) {
  if (!x.allFinite()) throw NumericalError(std::string("denoiser: NaN after layer '") + stage + "'");
}

/// RAII exclusivity latch for hooked passes.
struct HookLatch {
  explicit HookLatch(std::atomic<bool>& flag) : flag_(flag) {
    bool expected = false;
    if (!flag_.compare_exchange_strong(expected, true))
      throw ContractError("denoiser: concurrent hooked passes on one instance");
  }
  ~HookLatch() { flag_.store(false); }
  std::atomic<bool>& flag_;
};

}  // namespace

UNet::UNet(ArchConfig cfg, Vocabulary vocab, std::uint64_t init_seed)
    : arch_(cfg), vocab_(std::move(vocab)) {
  check(cfg.image_size % 4 == 0, "UNet: image_size must be divisible by 4");
  Rng rng(init_seed);
  const int c0 = cfg.base, c1 = 2 * cfg.base, c2 = 4 * cfg.base;

  token_table_ = 0.5 * rng.normal_mat(cfg.token_dim, vocab_.size());
  cond_proj_.init(cfg.token_dim, cfg.embed_dim, rng);
  time_fc1_.init(cfg.embed_dim, cfg.embed_dim, rng);
  time_fc2_.init(cfg.embed_dim, cfg.embed_dim, rng);

  stem_.init(cfg.in_channels, c0, 3, 1, rng);
  e1_.init(c0, c0, cfg.embed_dim, rng);
  down1_.init(c0, c1, 3, 2, rng);
  e2_.init(c1, c1, cfg.embed_dim, rng);
  attn_e2_.init(c1, rng);
  down2_.init(c1, c2, 3, 2, rng);
  m1_.init(c2, c2, cfg.embed_dim, rng);
  attn_m1_.init(c2, rng);
  m2_.init(c2, c2, cfg.embed_dim, rng);
  attn_m2_.init(c2, rng);
  up1_.init(c2, c1, 3, 1, rng);
  d2_.init(2 * c1, c1, cfg.embed_dim, rng);
  attn_d2_.init(c1, rng);
  up2_.init(c1, c0, 3, 1, rng);
  d1_.init(2 * c0, c0, cfg.embed_dim, rng);
  out_norm_.init(c0, std::min(8, c0));
  out_conv_.init(c0, cfg.in_channels, 3, 1, rng, /*zero_init=*/true);

  p_token_table_ = params_.add("token_table", &token_table_);
  cond_proj_.collect(params_, "cond_proj");
  time_fc1_.collect(params_, "time_fc1");
  time_fc2_.collect(params_, "time_fc2");
  stem_.collect(params_, "stem");
  e1_.collect(params_, "e1");
  down1_.collect(params_, "down1");
  e2_.collect(params_, "e2");
  attn_e2_.collect(params_, "attn_e2");
  down2_.collect(params_, "down2");
  m1_.collect(params_, "m1");
  attn_m1_.collect(params_, "attn_m1");
  m2_.collect(params_, "m2");
  attn_m2_.collect(params_, "attn_m2");
  up1_.collect(params_, "up1");
  d2_.collect(params_, "d2");
  attn_d2_.collect(params_, "attn_d2");
  up2_.collect(params_, "up2");
  d1_.collect(params_, "d1");
  out_norm_.collect(params_, "out_norm");
  out_conv_.collect(params_, "out_conv");
}

std::unique_ptr<UNet> UNet::clone() const {
  auto copy = std::make_unique<UNet>(arch_, vocab_, 0);
  for (int i = 0; i < params_.size(); ++i) *copy->params_[i].value = *params_[i].value;
  copy->trained_ = trained_;
  copy->untrained_ok_ = untrained_ok_;
  copy->final_training_loss_ = final_training_loss_;
  return copy;
}

PromptEmbedding UNet::embed_tokens(const std::vector<int>& ids, PromptKind kind) const {
  check(!ids.empty(), "embed_tokens: empty id list");
  PromptEmbedding p;
  p.tokens = ids;
  p.kind = kind;
  p.embedding.resize(arch_.token_dim, static_cast<Eigen::Index>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    check(ids[i] >= 0 && ids[i] < vocab_.size(), "embed_tokens: id out of vocabulary");
    p.embedding.col(static_cast<Eigen::Index>(i)) = token_table_.col(ids[i]);
  }
  p.validate();
  return p;
}

PromptEmbedding UNet::embed_text(const std::string& text, PromptKind kind) const {
  return embed_tokens(vocab_.tokenize(text), kind);
}

PromptEmbedding UNet::empty_prompt() const {
  return embed_tokens({Vocabulary::kEmptyId}, PromptKind::empty);
}

PromptEmbedding UNet::negative_prompt() const {
  return embed_text("unrealistic blurry low quality", PromptKind::negative);
}

Vec UNet::context_vector(int t, const PromptEmbedding& cond, Tape* tape) const {
  Vec t_feats = nn::timestep_features(t, arch_.embed_dim);
  Mat t_h1 = time_fc1_.forward(t_feats);
  Mat t_h1_act = nn::silu(t_h1);
  Mat t_out = time_fc2_.forward(t_h1_act);
  Vec pooled = cond.pooled();
  Mat cond_out = cond_proj_.forward(pooled);
  Mat ctx_pre = t_out + cond_out;
  Mat ctx = nn::silu(ctx_pre);
  if (tape) {
    tape->cond_tokens = cond.tokens;
    tape->cond_embedding = cond.embedding;
    tape->pooled = pooled;
    tape->t_feats = t_feats;
    tape->t_h1 = Vec(t_h1.col(0));
    tape->t_h1_act = Vec(t_h1_act.col(0));
    tape->ctx_pre = Vec(ctx_pre.col(0));
    tape->ctx = Vec(ctx.col(0));
  }
  return Vec(ctx.col(0));
}

Image UNet::run(const Image& z_t, int t, const PromptEmbedding& cond, const HookPlan* hooks,
                Tape* tape) const {
  check(z_t.h == arch_.image_size && z_t.w == arch_.image_size &&
            z_t.channels() == arch_.in_channels,
        "denoiser: input resolution mismatch");
  check(!(hooks && tape), "denoiser: hooked training passes are unsupported");
  cond.validate();
  for (int id : cond.tokens)
    check(id == kLearnedTokenId || (id >= 0 && id < vocab_.size()),
          "denoiser: unknown vocabulary token id");

  std::unique_ptr<HookLatch> latch;
  if (hooks) {
    check((hooks->capture_into != nullptr) != (hooks->replace_from != nullptr),
          "denoiser: hook plan must set exactly one of capture/replace");
    latch = std::make_unique<HookLatch>(hooked_active_);
  }

  auto attention = [&](int id, const nn::SelfAttention& attn, const Mat& x,
                       nn::AttentionCtx* ctx) -> Mat {
    if (hooks && hooks->capture_into && hooks->capture_into->swap_layers().count(id) > 0) {
      nn::KvFeatures kv;
      Mat y = attn.forward(x, ctx, &kv, nullptr);
      hooks->capture_into->insert(id, hooks->t, std::move(kv));
      return y;
    }
    if (hooks && hooks->replace_from && hooks->replace_from->swap_layers().count(id) > 0) {
      return attn.forward(x, ctx, nullptr, &hooks->replace_from->entry(id, hooks->t));
    }
    return attn.forward(x, ctx);
  };

  Vec ctx_vec = context_vector(t, cond, tape);
  if (tape) {
    tape->h = z_t.h;
    tape->w = z_t.w;
  }

  Image x0 = stem_.forward(z_t, tape ? &tape->stem : nullptr);
  Image x1 = e1_.forward(x0, ctx_vec, tape ? &tape->e1 : nullptr);
  stage_check(x1.data, "e1");
  if (tape) tape->e1_out = x1;

  Image x2 = down1_.forward(x1, tape ? &tape->down1 : nullptr);
  Image x3 = e2_.forward(x2, ctx_vec, tape ? &tape->e2 : nullptr);
  Image x4(x3.h, x3.w, attention(0, attn_e2_, x3.data, tape ? &tape->attn_e2 : nullptr));
  stage_check(x4.data, "attn_e2");
  if (tape) tape->e2a_out = x4;

  Image x5 = down2_.forward(x4, tape ? &tape->down2 : nullptr);
  Image x6 = m1_.forward(x5, ctx_vec, tape ? &tape->m1 : nullptr);
  Image x7(x6.h, x6.w, attention(1, attn_m1_, x6.data, tape ? &tape->attn_m1 : nullptr));
  Image x8 = m2_.forward(x7, ctx_vec, tape ? &tape->m2 : nullptr);
  Image x9(x8.h, x8.w, attention(2, attn_m2_, x8.data, tape ? &tape->attn_m2 : nullptr));
  stage_check(x9.data, "attn_m2");

  Image x9u = nn::upsample_nearest2(x9);
  if (tape) tape->up1_out = x9u;
  Image x10 = up1_.forward(x9u, tape ? &tape->up1 : nullptr);
  Image x11 = nn::concat_channels(x10, x4);
  Image x12 = d2_.forward(x11, ctx_vec, tape ? &tape->d2 : nullptr);
  Image x13(x12.h, x12.w, attention(3, attn_d2_, x12.data, tape ? &tape->attn_d2 : nullptr));
  stage_check(x13.data, "attn_d2");

  Image x13u = nn::upsample_nearest2(x13);
  if (tape) tape->up2_out = x13u;
  Image x14 = up2_.forward(x13u, tape ? &tape->up2 : nullptr);
  Image x15 = nn::concat_channels(x14, x1);
  Image x16 = d1_.forward(x15, ctx_vec, tape ? &tape->d1 : nullptr);
  stage_check(x16.data, "d1");

  Mat out_pre = out_norm_.forward(x16.data, tape ? &tape->out_norm : nullptr);
  if (tape) tape->out_pre = out_pre;
  Image out =
      out_conv_.forward(Image(x16.h, x16.w, nn::silu(out_pre)), tape ? &tape->out_conv : nullptr);
  stage_check(out.data, "out_conv");
  return out;
}

Image UNet::predict(const Image& z_t, int t, const PromptEmbedding& cond,
                    const HookPlan* hooks) const {
  check(trained_ || untrained_ok_,
        "denoiser: not trained (call set_untrained_ok(true) for explicit untrained use)");
  return run(z_t, t, cond, hooks, nullptr);
}

Image UNet::forward_cached(const Image& z_t, int t, const PromptEmbedding& cond,
                           Tape& tape) const {
  return run(z_t, t, cond, nullptr, &tape);
}

UNet::InputGrads UNet::backward(const Image& d_eps, const Tape& tape, nn::GradBuffer& g) const {
  const int c0 = arch_.base, c1 = 2 * arch_.base;
  Vec dctx = Vec::Zero(arch_.embed_dim);

  // output head
  Image dact = out_conv_.backward(d_eps, tape.out_conv, g);
  Mat dpre = dact.data.cwiseProduct(nn::silu_grad(tape.out_pre));
  Mat dx16 = out_norm_.backward(dpre, tape.out_norm, g);

  Image d15 = d1_.backward(Image(tape.h, tape.w, dx16), tape.d1, g, dctx);
  Image d14(c0, tape.h, tape.w), dskip1(c0, tape.h, tape.w);
  nn::split_channels(d15, c0, d14, dskip1);

  Image d13u = up2_.backward(d14, tape.up2, g);
  Image d13 = nn::upsample_nearest2_backward(d13u);
  Mat dx12 = attn_d2_.backward(d13.data, tape.attn_d2, g);
  Image d11 = d2_.backward(Image(d13.h, d13.w, dx12), tape.d2, g, dctx);
  Image d10(c1, d13.h, d13.w), dskip2(c1, d13.h, d13.w);
  nn::split_channels(d11, c1, d10, dskip2);

  Image d9u = up1_.backward(d10, tape.up1, g);
  Image d9 = nn::upsample_nearest2_backward(d9u);
  Mat dx8 = attn_m2_.backward(d9.data, tape.attn_m2, g);
  Image d7 = m2_.backward(Image(d9.h, d9.w, dx8), tape.m2, g, dctx);
  Mat dx6 = attn_m1_.backward(d7.data, tape.attn_m1, g);
  Image d5 = m1_.backward(Image(d7.h, d7.w, dx6), tape.m1, g, dctx);
  Image d4 = down2_.backward(d5, tape.down2, g);
  d4.data += dskip2.data;

  Mat dx3 = attn_e2_.backward(d4.data, tape.attn_e2, g);
  Image d2i = e2_.backward(Image(d4.h, d4.w, dx3), tape.e2, g, dctx);
  Image d1i = down1_.backward(d2i, tape.down1, g);
  d1i.data += dskip1.data;

  Image d0 = e1_.backward(d1i, tape.e1, g, dctx);
  Image dz = stem_.backward(d0, tape.stem, g);

  // context chain: ctx = silu(ctx_pre), ctx_pre = time_mlp(t) + cond_proj(pooled)
  Mat dctx_pre = Mat(dctx).cwiseProduct(nn::silu_grad(tape.ctx_pre));
  Mat dpooled = cond_proj_.backward(tape.pooled, dctx_pre, g);
  Mat dh1_act = time_fc2_.backward(tape.t_h1_act, dctx_pre, g);
  Mat dh1 = dh1_act.cwiseProduct(nn::silu_grad(tape.t_h1));
  (void)time_fc1_.backward(tape.t_feats, dh1, g);  // t features are constants

  const Eigen::Index n = tape.cond_embedding.cols();
  Mat dcond = Mat::Zero(arch_.token_dim, n);
  for (Eigen::Index j = 0; j < n; ++j) dcond.col(j) = dpooled.col(0) / static_cast<Scalar>(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const int id = tape.cond_tokens[static_cast<std::size_t>(j)];
    if (id >= 0) g.at(p_token_table_).col(id) += dcond.col(j);
  }
  return {std::move(dz), std::move(dcond)};
}

Image cfg_combine(const ScoreModel& model, const Image& z_t, int t, const PromptEmbedding& cond,
                  const PromptEmbedding& empty_cond, Scalar beta) {
  check(beta >= 0.0, "cfg_combine: beta must be >= 0");
  if (beta == 1.0) return model.predict(z_t, t, cond);
  if (beta == 0.0) return model.predict(z_t, t, empty_cond);
  Image uncond = model.predict(z_t, t, empty_cond);
  Image cond_eps = model.predict(z_t, t, cond);
  return Image(z_t.h, z_t.w, uncond.data + beta * (cond_eps.data - uncond.data));
}

}  // namespace ssdlab
