#pragma once

#include <atomic>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "ssdlab/attention_cache.hpp"
#include "ssdlab/common.hpp"
#include "ssdlab/image.hpp"
#include "ssdlab/nn.hpp"
#include "ssdlab/vocab.hpp"

namespace ssdlab {

/// Architecture descriptor. Channels double at each of the two downsamplings;
/// self-attention sits at the two lowest resolutions (ids 0,3 at size/2 and
/// 1,2 at size/4), which is also the default swap set for style injection.
struct ArchConfig {
  int image_size = 32;
  int in_channels = 3;
  int base = 16;
  int embed_dim = 64;
  int token_dim = 32;

  static constexpr int kNumAttentionLayers = 4;
};

/// Per-call attention hook request: capture this pass's K/V into a cache, or
/// replace them from one (exactly one pointer set). Hook state never outlives
/// the call.
struct HookPlan {
  AttentionCache* capture_into = nullptr;
  const AttentionCache* replace_from = nullptr;
  int t = 0;  // cache key
};

/// Toy conditional noise-prediction U-Net.
///
/// Evaluation never mutates parameters; plain predicts are safe to run
/// concurrently, hooked passes are exclusive per instance.
class UNet {
 public:
  UNet(ArchConfig cfg, Vocabulary vocab, std::uint64_t init_seed);
  UNet(const UNet&) = delete;
  UNet& operator=(const UNet&) = delete;

  std::unique_ptr<UNet> clone() const;

  // -- prompts ---------------------------------------------------------
  PromptEmbedding embed_tokens(const std::vector<int>& ids, PromptKind kind) const;
  PromptEmbedding embed_text(const std::string& text, PromptKind kind) const;
  PromptEmbedding empty_prompt() const;
  PromptEmbedding negative_prompt() const;  // "unrealistic blurry low quality"

  // -- inference -------------------------------------------------------
  Image predict(const Image& z_t, int t, const PromptEmbedding& cond,
                const HookPlan* hooks = nullptr) const;

  // -- training path ---------------------------------------------------
  struct Tape;
  Image forward_cached(const Image& z_t, int t, const PromptEmbedding& cond, Tape& tape) const;

  struct InputGrads {
    Image dz;
    Mat dcond_embedding;  // token_dim x n_tokens, aligned with cond columns
  };
  /// Backprops d_eps through the taped forward. Parameter gradients (including
  /// token-table rows for real vocabulary ids) accumulate into g.
  InputGrads backward(const Image& d_eps, const Tape& tape, nn::GradBuffer& g) const;

  // -- bookkeeping -----------------------------------------------------
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }
  std::uint64_t param_checksum() const { return params_.checksum(); }

  const Vocabulary& vocab() const { return vocab_; }
  const ArchConfig& arch() const { return arch_; }
  std::vector<int> attention_layer_ids() const { return {0, 1, 2, 3}; }
  std::set<int> default_swap_layers() const { return {0, 1, 2, 3}; }

  bool is_trained() const { return trained_; }
  void mark_trained(Scalar final_loss) {
    trained_ = true;
    final_training_loss_ = final_loss;
  }
  Scalar final_training_loss() const { return final_training_loss_; }
  void set_untrained_ok(bool ok) { untrained_ok_ = ok; }

  const Mat& token_table() const { return token_table_; }

 private:
  Image run(const Image& z_t, int t, const PromptEmbedding& cond, const HookPlan* hooks,
            Tape* tape) const;
  Vec context_vector(int t, const PromptEmbedding& cond, Tape* tape) const;

  ArchConfig arch_;
  Vocabulary vocab_;

  Mat token_table_;  // token_dim x vocab_size
  nn::Linear cond_proj_;
  nn::Linear time_fc1_, time_fc2_;

  nn::Conv2d stem_;
  nn::ResBlock e1_;
  nn::Conv2d down1_;
  nn::ResBlock e2_;
  nn::SelfAttention attn_e2_;  // id 0
  nn::Conv2d down2_;
  nn::ResBlock m1_;
  nn::SelfAttention attn_m1_;  // id 1
  nn::ResBlock m2_;
  nn::SelfAttention attn_m2_;  // id 2
  nn::Conv2d up1_;
  nn::ResBlock d2_;
  nn::SelfAttention attn_d2_;  // id 3
  nn::Conv2d up2_;
  nn::ResBlock d1_;
  nn::GroupNorm out_norm_;
  nn::Conv2d out_conv_;

  int p_token_table_ = -1;
  nn::ParamSet params_;

  bool trained_ = false;
  bool untrained_ok_ = false;
  Scalar final_training_loss_ = 0.0;

  mutable std::atomic<bool> hooked_active_{false};
};

/// Tape of one cached forward pass (training only; hooks unsupported here).
struct UNet::Tape {
  std::vector<int> cond_tokens;
  Mat cond_embedding;
  Vec pooled, t_feats, t_h1, t_h1_act, ctx_pre, ctx;

  nn::Conv2dCtx stem, down1, down2, up1, up2, out_conv;
  nn::ResBlockCtx e1, e2, m1, m2, d2, d1;
  nn::AttentionCtx attn_e2, attn_m1, attn_m2, attn_d2;
  nn::GroupNormCtx out_norm;
  Mat out_pre;
  Image e1_out, e2a_out, up1_out, up2_out;  // shapes needed at joins
  int h = 0, w = 0;
};

/// Abstract raw-noise predictor: lets distillation run against the real
/// U-Net, its K/V-swapped sibling, or test stubs interchangeably.
class ScoreModel {
 public:
  virtual ~ScoreModel() = default;
  virtual Image predict(const Image& z_t, int t, const PromptEmbedding& cond) const = 0;
};

class UNetScore final : public ScoreModel {
 public:
  explicit UNetScore(const UNet& net) : net_(net) {}
  Image predict(const Image& z_t, int t, const PromptEmbedding& cond) const override {
    return net_.predict(z_t, t, cond);
  }

 private:
  const UNet& net_;
};

/// eps(emptycond) + beta * (eps(cond) - eps(emptycond)). beta=1 collapses to the
/// conditional prediction, beta=0 to the unconditional one (no extra evals).
Image cfg_combine(const ScoreModel& model, const Image& z_t, int t, const PromptEmbedding& cond,
                  const PromptEmbedding& empty_cond, Scalar beta);

}  // namespace ssdlab
