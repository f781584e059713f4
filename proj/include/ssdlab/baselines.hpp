#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ssdlab/dataset.hpp"
#include "ssdlab/denoiser.hpp"
#include "ssdlab/schedule.hpp"

namespace ssdlab {

/// Layered feature function f: image -> feature tensors, differentiable in
/// the image. Abstract so tests can stub single-layer identities.
class StyleFeatures {
 public:
  virtual ~StyleFeatures() = default;
  virtual std::vector<Mat> features(const Image& x) const = 0;
  /// Backprop of sum_l <d_l, f_l(x)> to the input image.
  virtual Image features_backward(const Image& x, const std::vector<Mat>& d_feats) const = 0;
  virtual int input_size() const = 0;
};

/// Desk-scale stand-in for a big pretrained feature net: a small convnet
/// classifier trained on the toy dataset, with six tapped activations.
class FeatureExtractor final : public StyleFeatures {
 public:
  FeatureExtractor(int image_size, std::uint64_t seed);

  std::vector<Mat> features(const Image& x) const override;
  Image features_backward(const Image& x, const std::vector<Mat>& d_feats) const override;
  int input_size() const override { return image_size_; }

  struct Probe {
    Vec shape_logits, style_logits;
    int shape_argmax = 0, style_argmax = 0;
  };
  Probe classify(const Image& x) const;

  /// Cross-entropy training on (shape, style) labels; returns final loss.
  Scalar train(const ToyDataset& data, int steps, int batch, Scalar lr, std::uint64_t seed,
               std::ostream* log = nullptr);

  void save(const std::string& path) const;
  static FeatureExtractor load(const std::string& path);

  std::uint64_t param_checksum() const { return params_.checksum(); }

 private:
  struct Taps;
  std::vector<Mat> run(const Image& x, Taps* taps) const;

  int image_size_;
  nn::Conv2d c1_, c2_, c3_, c4_, c5_, c6_;
  nn::Linear shape_head_, style_head_;
  nn::ParamSet params_;
};

/// Sum over layers of squared L2 feature distance. Symmetric, zero at x == s.
Scalar neural_style_loss(const Image& x, const Image& s, const StyleFeatures& f);

/// Loss plus gradient w.r.t. x.
std::pair<Scalar, Image> neural_style_loss_grad(const Image& x, const Image& s,
                                                const StyleFeatures& f);

/// "<style_description> <y>" with vocabulary validation; empty style returns
/// y unchanged. Out-of-vocabulary tokens raise, naming the offenders.
std::string style_in_prompt(const Vocabulary& vocab, const std::string& y,
                            const std::string& style_description);

struct InvertedToken {
  Vec embedding;
  std::uint64_t source_hash = 0;
  int steps = 0;
  Scalar final_loss = 0.0;
  std::vector<Scalar> loss_history;
};

struct TextualInversionConfig {
  int steps = 300;
  Scalar lr = 5e-2;
  std::string init_caption;  // warm start from a style token found here, if any
};

/// Optimizes a single token embedding so the frozen denoiser reproduces the
/// style image under the "in the style of <h>" prompt. Never touches the
/// denoiser parameters.
InvertedToken textual_inversion(const UNet& net, const NoiseSchedule& sched, const Image& s,
                                const TextualInversionConfig& cfg, Rng& rng);

/// Prompt "in the style of <h>" (the y_s of a textual-inversion reference).
PromptEmbedding inverted_prompt(const UNet& net, const InvertedToken& token);
/// Augmented prompt y' = y + "in the style of" + h.
PromptEmbedding augment_with_token(const UNet& net, const std::string& y,
                                   const InvertedToken& token);

struct CaptionProvider {
  enum class Kind { manual, external };
  Kind kind = Kind::manual;
  std::string manual_caption;
  // external endpoint
  std::string host;
  int port = 80;
  std::string path = "/caption";
  int timeout_s = 5;
  int retries = 1;
};

/// Manual mode returns the configured caption verbatim; external mode posts
/// {image: base64} and expects {caption: text}, falling back to the manual
/// caption when unreachable (error if none).
std::string caption_style_image(const Image& s, const CaptionProvider& provider);

/// HTTP leg of the external captioner (implemented in http_clients.cpp).
std::string fetch_caption_http(const Image& s, const CaptionProvider& endpoint);

}  // namespace ssdlab
