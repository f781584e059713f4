#pragma once

#include <string>
#include <vector>

#include "ssdlab/common.hpp"
#include "ssdlab/image.hpp"
#include "ssdlab/rng.hpp"

namespace ssdlab::nn {

/// Registry of named parameter matrices. Collected once per model; the order
/// defines gradient-buffer, optimizer-state and checkpoint layout.
class ParamSet {
 public:
  struct Item {
    std::string name;
    Mat* value;
  };

  int add(std::string name, Mat* value) {
    items_.push_back({std::move(name), value});
    return static_cast<int>(items_.size()) - 1;
  }

  int size() const { return static_cast<int>(items_.size()); }
  const Item& operator[](int i) const { return items_[static_cast<std::size_t>(i)]; }

  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& it : items_) h = hash_mat(*it.value, h);
    return h;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& it : items_) n += static_cast<std::size_t>(it.value->size());
    return n;
  }

 private:
  std::vector<Item> items_;
};

/// Gradient accumulators mirroring a ParamSet. Owned by the training call,
/// never by the model, so inference stays const.
class GradBuffer {
 public:
  explicit GradBuffer(const ParamSet& ps) {
    grads_.reserve(static_cast<std::size_t>(ps.size()));
    for (int i = 0; i < ps.size(); ++i)
      grads_.push_back(Mat::Zero(ps[i].value->rows(), ps[i].value->cols()));
  }
  void zero() {
    for (auto& g : grads_) g.setZero();
  }
  Mat& at(int i) { return grads_[static_cast<std::size_t>(i)]; }
  const Mat& at(int i) const { return grads_[static_cast<std::size_t>(i)]; }
  int size() const { return static_cast<int>(grads_.size()); }

 private:
  std::vector<Mat> grads_;
};

/// Adam with bias correction; state is keyed by ParamSet order.
class Adam {
 public:
  Adam(const ParamSet& ps, Scalar lr, Scalar beta1 = 0.9, Scalar beta2 = 0.999,
       Scalar eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (int i = 0; i < ps.size(); ++i) {
      m_.push_back(Mat::Zero(ps[i].value->rows(), ps[i].value->cols()));
      v_.push_back(Mat::Zero(ps[i].value->rows(), ps[i].value->cols()));
    }
  }

  void step(ParamSet& ps, const GradBuffer& g) {
    ++t_;
    const Scalar c1 = 1.0 - std::pow(beta1_, t_);
    const Scalar c2 = 1.0 - std::pow(beta2_, t_);
    for (int i = 0; i < ps.size(); ++i) {
      auto& m = m_[static_cast<std::size_t>(i)];
      auto& v = v_[static_cast<std::size_t>(i)];
      const Mat& grad = g.at(i);
      m = beta1_ * m + (1.0 - beta1_) * grad;
      v = beta2_ * v + (1.0 - beta2_) * grad.cwiseProduct(grad);
      ps[i].value->array() -=
          lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
    }
  }

  Scalar learning_rate() const { return lr_; }
  void set_learning_rate(Scalar lr) { lr_ = lr; }

 private:
  Scalar lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Mat> m_, v_;
};

inline Mat silu(const Mat& x) {
  return (x.array() / (1.0 + (-x.array()).exp())).matrix();
}
inline Mat silu_grad(const Mat& x) {
  Arr s = 1.0 / (1.0 + (-x.array()).exp());
  return (s * (1.0 + x.array() * (1.0 - s))).matrix();
}
inline Mat sigmoid(const Mat& x) { return (1.0 / (1.0 + (-x.array()).exp())).matrix(); }

// ---------------------------------------------------------------------------

struct Linear {
  Mat weight;  // out x in
  Mat bias;    // out x 1
  int pw = -1, pb = -1;

  void init(int in, int out, Rng& rng) {
    weight = std::sqrt(2.0 / in) * rng.normal_mat(out, in);
    bias = Mat::Zero(out, 1);
  }
  void collect(ParamSet& ps, const std::string& prefix) {
    pw = ps.add(prefix + ".weight", &weight);
    pb = ps.add(prefix + ".bias", &bias);
  }

  /// x: in x n  ->  out x n
  Mat forward(const Mat& x) const {
    Mat y = weight * x;
    y.colwise() += bias.col(0);
    return y;
  }
  Mat backward(const Mat& x, const Mat& dy, GradBuffer& g) const {
    g.at(pw) += dy * x.transpose();
    g.at(pb) += dy.rowwise().sum();
    return weight.transpose() * dy;
  }
};

struct Conv2dCtx {
  Mat cols;  // (cin*k*k) x (hout*wout)
  int h = 0, w = 0;
};

/// Same-padded convolution, kernel 1 or 3, stride 1 or 2, via im2col.
struct Conv2d {
  int cin = 0, cout = 0, k = 1, stride = 1;
  Mat weight;  // cout x (cin*k*k)
  Mat bias;    // cout x 1
  int pw = -1, pb = -1;

  void init(int in, int out, int ksize, int str, Rng& rng, bool zero_init = false) {
    cin = in;
    cout = out;
    k = ksize;
    stride = str;
    if (zero_init)
      weight = Mat::Zero(out, in * k * k);
    else
      weight = std::sqrt(2.0 / (in * k * k)) * rng.normal_mat(out, in * k * k);
    bias = Mat::Zero(out, 1);
  }
  void collect(ParamSet& ps, const std::string& prefix) {
    pw = ps.add(prefix + ".weight", &weight);
    pb = ps.add(prefix + ".bias", &bias);
  }

  int out_dim(int in_dim) const { return (in_dim + 2 * (k / 2) - k) / stride + 1; }

  Image forward(const Image& x, Conv2dCtx* ctx) const;
  Image backward(const Image& dy, const Conv2dCtx& ctx, GradBuffer& g) const;
};

struct GroupNormCtx {
  Mat xhat;
  Vec inv_std;  // per group
  Mat x_centered;
};

struct GroupNorm {
  int channels = 0, groups = 1;
  Scalar eps = 1e-5;
  Mat gamma, beta;  // channels x 1
  int pg = -1, pbt = -1;

  void init(int ch, int gr) {
    channels = ch;
    groups = gr;
    check(ch % gr == 0, "GroupNorm: channels % groups != 0");
    gamma = Mat::Ones(ch, 1);
    beta = Mat::Zero(ch, 1);
  }
  void collect(ParamSet& ps, const std::string& prefix) {
    pg = ps.add(prefix + ".gamma", &gamma);
    pbt = ps.add(prefix + ".beta", &beta);
  }

  Mat forward(const Mat& x, GroupNormCtx* ctx) const;
  Mat backward(const Mat& dy, const GroupNormCtx& ctx, GradBuffer& g) const;
};

struct AttentionCtx {
  Mat xn, q, kk, vv, attn, att_out;
  GroupNormCtx gn_ctx;
  bool kv_swapped = false;
};

/// Captured or injected key/value features for one self-attention layer.
struct KvFeatures {
  Mat k, v;  // channels x positions
};

/// Single-head self-attention over pixel positions with pre-GroupNorm and a
/// residual connection. K/V can be captured to or replaced from the outside;
/// swapped passes are inference-only (backward asserts no swap happened).
struct SelfAttention {
  int channels = 0;
  GroupNorm norm;
  Mat wq, wk, wv, wo;  // channels x channels
  Mat bo;              // channels x 1
  int pq = -1, pk = -1, pv = -1, po = -1, pbo = -1;

  void init(int ch, Rng& rng) {
    channels = ch;
    norm.init(ch, std::min(8, ch));
    const Scalar s = std::sqrt(1.0 / ch);
    wq = s * rng.normal_mat(ch, ch);
    wk = s * rng.normal_mat(ch, ch);
    wv = s * rng.normal_mat(ch, ch);
    wo = Mat::Zero(ch, ch);  // residual starts as identity
    bo = Mat::Zero(ch, 1);
  }
  void collect(ParamSet& ps, const std::string& prefix) {
    norm.collect(ps, prefix + ".norm");
    pq = ps.add(prefix + ".wq", &wq);
    pk = ps.add(prefix + ".wk", &wk);
    pv = ps.add(prefix + ".wv", &wv);
    po = ps.add(prefix + ".wo", &wo);
    pbo = ps.add(prefix + ".bo", &bo);
  }

  /// capture != nullptr stores this pass's K/V; replace != nullptr substitutes
  /// them before the attention product. At most one of the two may be set.
  Mat forward(const Mat& x, AttentionCtx* ctx, KvFeatures* capture = nullptr,
              const KvFeatures* replace = nullptr) const;
  Mat backward(const Mat& dy, const AttentionCtx& ctx, GradBuffer& g) const;
};

struct ResBlockCtx {
  GroupNormCtx gn1, gn2;
  Mat pre1;     // gn1 output (first SiLU input)
  Mat gn2_out;  // gn2 output before FiLM
  Mat film;     // 2*cout x 1 (scale; shift)
  Mat pre2;     // modulated activations (second SiLU input)
  Mat ctx_vec;  // embed_dim x 1
  Conv2dCtx conv1, conv2, skip;
  int h = 0, w = 0;
};

/// GN -> SiLU -> conv3 -> GN -> FiLM(scale, shift from context) -> SiLU ->
/// conv3, with identity or 1x1-conv skip. FiLM keeps conditioning influential
/// even when the noisy input alone nearly determines the target.
struct ResBlock {
  int cin = 0, cout = 0;
  GroupNorm gn1, gn2;
  Conv2d conv1, conv2, skip;
  Linear film;  // embed_dim -> 2*cout (scale, shift)
  bool needs_skip = false;

  void init(int in, int out, int embed_dim, Rng& rng) {
    cin = in;
    cout = out;
    gn1.init(in, std::min(8, in));
    gn2.init(out, std::min(8, out));
    conv1.init(in, out, 3, 1, rng);
    conv2.init(out, out, 3, 1, rng);
    film.init(embed_dim, 2 * out, rng);
    needs_skip = (in != out);
    if (needs_skip) skip.init(in, out, 1, 1, rng);
  }
  void collect(ParamSet& ps, const std::string& prefix) {
    gn1.collect(ps, prefix + ".gn1");
    gn2.collect(ps, prefix + ".gn2");
    conv1.collect(ps, prefix + ".conv1");
    conv2.collect(ps, prefix + ".conv2");
    film.collect(ps, prefix + ".film");
    if (needs_skip) skip.collect(ps, prefix + ".skip");
  }

  Image forward(const Image& x, const Vec& ctx_vec, ResBlockCtx* ctx) const;
  /// Returns dx; accumulates dctx (gradient w.r.t. the context vector).
  Image backward(const Image& dy, const ResBlockCtx& ctx, GradBuffer& g, Vec& dctx) const;
};

/// Sinusoidal position features for integer timesteps.
Vec timestep_features(int t, int dim);

Image upsample_nearest2(const Image& x);
Image upsample_nearest2_backward(const Image& dy);

Image concat_channels(const Image& a, const Image& b);
void split_channels(const Image& d, int ca, Image& da, Image& db);

}  // namespace ssdlab::nn
