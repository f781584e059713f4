#include "ssdlab/nn.hpp"

namespace ssdlab::nn {

namespace {

/// Gathers same-padded patches: cols(ci*k*k + ky*k + kx, oy*wout+ox).
Mat im2col(const Image& x, int k, int stride) {
  const int pad = k / 2;
  const int hout = (x.h + 2 * pad - k) / stride + 1;
  const int wout = (x.w + 2 * pad - k) / stride + 1;
  const int cin = x.channels();
  Mat cols = Mat::Zero(static_cast<Eigen::Index>(cin) * k * k,
                       static_cast<Eigen::Index>(hout) * wout);
  for (int oy = 0; oy < hout; ++oy) {
    for (int ox = 0; ox < wout; ++ox) {
      const Eigen::Index col = static_cast<Eigen::Index>(oy) * wout + ox;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= x.h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= x.w) continue;
          const Eigen::Index src = static_cast<Eigen::Index>(iy) * x.w + ix;
          cols.block(static_cast<Eigen::Index>(ky * k + kx) * cin, col, cin, 1) =
              x.data.col(src);
        }
      }
    }
  }
  return cols;
}

/// Scatter-add of patch gradients back onto the input plane.
Image col2im(const Mat& dcols, int cin, int h, int w, int k, int stride) {
  const int pad = k / 2;
  const int hout = (h + 2 * pad - k) / stride + 1;
  const int wout = (w + 2 * pad - k) / stride + 1;
  Image dx(cin, h, w);
  for (int oy = 0; oy < hout; ++oy) {
    for (int ox = 0; ox < wout; ++ox) {
      const Eigen::Index col = static_cast<Eigen::Index>(oy) * wout + ox;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= w) continue;
          const Eigen::Index dst = static_cast<Eigen::Index>(iy) * w + ix;
          dx.data.col(dst) +=
              dcols.block(static_cast<Eigen::Index>(ky * k + kx) * cin, col, cin, 1);
        }
      }
    }
  }
  return dx;
}

}  // namespace

Image Conv2d::forward(const Image& x, Conv2dCtx* ctx) const {
  check(x.channels() == cin, "Conv2d: channel mismatch");
  const int hout = out_dim(x.h), wout = out_dim(x.w);
  Mat cols = im2col(x, k, stride);
  Mat y = weight * cols;
  y.colwise() += bias.col(0);
  if (ctx) {
    ctx->cols = std::move(cols);
    ctx->h = x.h;
    ctx->w = x.w;
  }
  return Image(hout, wout, std::move(y));
}

Image Conv2d::backward(const Image& dy, const Conv2dCtx& ctx, GradBuffer& g) const {
  g.at(pw) += dy.data * ctx.cols.transpose();
  g.at(pb) += dy.data.rowwise().sum();
  Mat dcols = weight.transpose() * dy.data;
  return col2im(dcols, cin, ctx.h, ctx.w, k, stride);
}

Mat GroupNorm::forward(const Mat& x, GroupNormCtx* ctx) const {
  check(x.rows() == channels, "GroupNorm: channel mismatch");
  const int m = channels / groups;
  const Eigen::Index n = x.cols();
  Mat xc(x.rows(), n), xhat(x.rows(), n);
  Vec inv_std(groups);
  for (int gi = 0; gi < groups; ++gi) {
    auto blk = x.middleRows(static_cast<Eigen::Index>(gi) * m, m);
    const Scalar mean = blk.mean();
    const Scalar var = (blk.array() - mean).square().mean();
    const Scalar is = 1.0 / std::sqrt(var + eps);
    inv_std(gi) = is;
    xc.middleRows(static_cast<Eigen::Index>(gi) * m, m) = blk.array() - mean;
    xhat.middleRows(static_cast<Eigen::Index>(gi) * m, m) =
        (blk.array() - mean) * is;
  }
  Mat y = (xhat.array().colwise() * Eigen::ArrayXd(gamma.col(0))).matrix();
  y.colwise() += Eigen::VectorXd(beta);
  if (ctx) {
    ctx->xhat = xhat;
    ctx->inv_std = inv_std;
    ctx->x_centered = std::move(xc);
  }
  return y;
}

Mat GroupNorm::backward(const Mat& dy, const GroupNormCtx& ctx, GradBuffer& g) const {
  const int m = channels / groups;
  const Eigen::Index n = dy.cols();
  g.at(pg) += (dy.array() * ctx.xhat.array()).rowwise().sum().matrix();
  g.at(pbt) += dy.rowwise().sum();

  Mat dxhat = (dy.array().colwise() * Eigen::ArrayXd(gamma.col(0))).matrix();
  Mat dx(dy.rows(), n);
  for (int gi = 0; gi < groups; ++gi) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(gi) * m;
    auto dxh = dxhat.middleRows(r0, m);
    auto xh = ctx.xhat.middleRows(r0, m);
    const Scalar cnt = static_cast<Scalar>(m) * static_cast<Scalar>(n);
    const Scalar sum_dxh = dxh.sum();
    const Scalar sum_dxh_xh = (dxh.array() * xh.array()).sum();
    // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
    dx.middleRows(r0, m) =
        ctx.inv_std(gi) *
        (dxh.array() - sum_dxh / cnt - xh.array() * (sum_dxh_xh / cnt)).matrix();
  }
  return dx;
}

Mat SelfAttention::forward(const Mat& x, AttentionCtx* ctx, KvFeatures* capture,
                           const KvFeatures* replace) const {
  check(!(capture && replace), "SelfAttention: capture and replace are exclusive");
  GroupNormCtx gn_ctx;
  Mat xn = norm.forward(x, ctx ? &ctx->gn_ctx : &gn_ctx);
  Mat q = wq * xn;
  Mat kk = wk * xn;
  Mat vv = wv * xn;
  if (capture) {
    capture->k = kk;
    capture->v = vv;
  }
  if (replace) {
    check(replace->k.rows() == channels && replace->v.rows() == channels,
          "SelfAttention: injected K/V channel mismatch");
    kk = replace->k;
    vv = replace->v;
  }
  const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(channels));
  Mat scores = scale * (q.transpose() * kk);  // queries x keys
  // row-wise softmax
  Mat attn(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::ArrayXd row = scores.row(i).array();
    row -= row.maxCoeff();
    Eigen::ArrayXd e = row.exp();
    attn.row(i) = (e / e.sum()).matrix().transpose();
  }
  Mat att_out = vv * attn.transpose();
  Mat y = x + wo * att_out;
  y.colwise() += bo.col(0);
  if (ctx) {
    ctx->xn = std::move(xn);
    ctx->q = std::move(q);
    ctx->kk = kk;
    ctx->vv = vv;
    ctx->attn = std::move(attn);
    ctx->att_out = std::move(att_out);
    ctx->kv_swapped = (replace != nullptr);
  }
  return y;
}

Mat SelfAttention::backward(const Mat& dy, const AttentionCtx& ctx, GradBuffer& g) const {
  check(!ctx.kv_swapped, "SelfAttention: backward through a swapped pass is unsupported");
  const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(channels));

  g.at(po) += dy * ctx.att_out.transpose();
  g.at(pbo) += dy.rowwise().sum();
  Mat dM = wo.transpose() * dy;            // grad of att_out
  Mat dV = dM * ctx.attn;                  // channels x positions
  Mat dA = dM.transpose() * ctx.vv;        // queries x keys
  // softmax backward, row-wise
  Mat dS(dA.rows(), dA.cols());
  for (Eigen::Index i = 0; i < dA.rows(); ++i) {
    const Scalar dot = dA.row(i).dot(ctx.attn.row(i));
    dS.row(i) = (ctx.attn.row(i).array() * (dA.row(i).array() - dot)).matrix();
  }
  Mat dQ = scale * (ctx.kk * dS.transpose());
  Mat dK = scale * (ctx.q * dS);

  g.at(pq) += dQ * ctx.xn.transpose();
  g.at(pk) += dK * ctx.xn.transpose();
  g.at(pv) += dV * ctx.xn.transpose();
  Mat dxn = wq.transpose() * dQ + wk.transpose() * dK + wv.transpose() * dV;
  Mat dx = norm.backward(dxn, ctx.gn_ctx, g);
  return dx + dy;  // residual
}

Image ResBlock::forward(const Image& x, const Vec& ctx_vec, ResBlockCtx* ctx) const {
  ResBlockCtx local;
  ResBlockCtx& c = ctx ? *ctx : local;
  c.h = x.h;
  c.w = x.w;
  if (ctx) c.ctx_vec = ctx_vec;

  c.pre1 = gn1.forward(x.data, ctx ? &c.gn1 : nullptr);
  Image h1 = conv1.forward(Image(x.h, x.w, silu(c.pre1)), ctx ? &c.conv1 : nullptr);

  c.gn2_out = gn2.forward(h1.data, ctx ? &c.gn2 : nullptr);
  c.film = film.forward(ctx_vec);
  auto scale = c.film.col(0).head(cout);
  auto shift = c.film.col(0).tail(cout);
  c.pre2 = (c.gn2_out.array().colwise() * (1.0 + scale.array())).matrix();
  c.pre2.colwise() += shift;
  Image h2 = conv2.forward(Image(h1.h, h1.w, silu(c.pre2)), ctx ? &c.conv2 : nullptr);

  if (needs_skip) {
    Image xs = skip.forward(x, ctx ? &c.skip : nullptr);
    h2.data += xs.data;
  } else {
    h2.data += x.data;
  }
  return h2;
}

Image ResBlock::backward(const Image& dy, const ResBlockCtx& ctx, GradBuffer& g,
                         Vec& dctx) const {
  // conv2 path
  Image dact2 = conv2.backward(dy, ctx.conv2, g);
  Mat dpre2 = dact2.data.cwiseProduct(silu_grad(ctx.pre2));

  // FiLM: pre2 = gn2_out .* (1 + scale) + shift (per channel)
  auto scale = ctx.film.col(0).head(cout);
  Mat dfilm(2 * cout, 1);
  dfilm.col(0).head(cout) = (dpre2.array() * ctx.gn2_out.array()).rowwise().sum().matrix();
  dfilm.col(0).tail(cout) = dpre2.rowwise().sum();
  dctx += Vec(film.backward(ctx.ctx_vec, dfilm, g).col(0));
  Mat dgn2 = (dpre2.array().colwise() * (1.0 + scale.array())).matrix();
  Mat dh1 = gn2.backward(dgn2, ctx.gn2, g);

  // conv1 path
  Image dact1 = conv1.backward(Image(ctx.h, ctx.w, dh1), ctx.conv1, g);
  Mat dpre1 = dact1.data.cwiseProduct(silu_grad(ctx.pre1));
  Mat dx = gn1.backward(dpre1, ctx.gn1, g);

  // skip path
  if (needs_skip) {
    Image dskip = skip.backward(dy, ctx.skip, g);
    dx += dskip.data;
  } else {
    dx += dy.data;
  }
  return Image(ctx.h, ctx.w, std::move(dx));
}

Vec timestep_features(int t, int dim) {
  check(dim % 2 == 0, "timestep_features: dim must be even");
  const int half = dim / 2;
  Vec out(dim);
  for (int i = 0; i < half; ++i) {
    const Scalar freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
    out(2 * i) = std::sin(t * freq);
    out(2 * i + 1) = std::cos(t * freq);
  }
  return out;
}

Image upsample_nearest2(const Image& x) {
  Image y(x.channels(), x.h * 2, x.w * 2);
  for (int yy = 0; yy < y.h; ++yy)
    for (int xx = 0; xx < y.w; ++xx)
      y.data.col(static_cast<Eigen::Index>(yy) * y.w + xx) =
          x.data.col(static_cast<Eigen::Index>(yy / 2) * x.w + xx / 2);
  return y;
}

Image upsample_nearest2_backward(const Image& dy) {
  Image dx(dy.channels(), dy.h / 2, dy.w / 2);
  for (int yy = 0; yy < dy.h; ++yy)
    for (int xx = 0; xx < dy.w; ++xx)
      dx.data.col(static_cast<Eigen::Index>(yy / 2) * dx.w + xx / 2) +=
          dy.data.col(static_cast<Eigen::Index>(yy) * dy.w + xx);
  return dx;
}

Image concat_channels(const Image& a, const Image& b) {
  check(a.h == b.h && a.w == b.w, "concat_channels: spatial mismatch");
  Image out(a.channels() + b.channels(), a.h, a.w);
  out.data.topRows(a.channels()) = a.data;
  out.data.bottomRows(b.channels()) = b.data;
  return out;
}

void split_channels(const Image& d, int ca, Image& da, Image& db) {
  da = Image(d.h, d.w, d.data.topRows(ca));
  db = Image(d.h, d.w, d.data.bottomRows(d.channels() - ca));
}

}  // namespace ssdlab::nn
