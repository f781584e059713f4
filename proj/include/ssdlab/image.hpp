#pragma once

#include <utility>

#include "ssdlab/common.hpp"

namespace ssdlab {

/// Planar image / feature map: one row per channel, one column per pixel
/// (row-major pixel order, index = y*w + x). Channel rows make 1x1 convs and
/// attention projections plain Eigen products.
struct Image {
  int h = 0, w = 0;
  Mat data;  // channels x (h*w)

  Image() = default;
  Image(int channels, int height, int width)
      : h(height), w(width), data(Mat::Zero(channels, static_cast<Eigen::Index>(height) * width)) {}
  Image(int height, int width, Mat d) : h(height), w(width), data(std::move(d)) {
    check(data.cols() == static_cast<Eigen::Index>(h) * w, "Image: data cols != h*w");
  }

  int channels() const { return static_cast<int>(data.rows()); }
  Eigen::Index pixels() const { return data.cols(); }

  Scalar& at(int c, int y, int x) { return data(c, static_cast<Eigen::Index>(y) * w + x); }
  Scalar at(int c, int y, int x) const { return data(c, static_cast<Eigen::Index>(y) * w + x); }

  bool same_shape(const Image& o) const {
    return h == o.h && w == o.w && data.rows() == o.data.rows();
  }

  bool all_finite() const { return data.allFinite(); }

  static Image constant(int channels, int height, int width, Scalar v) {
    Image im(channels, height, width);
    im.data.setConstant(v);
    return im;
  }
};

inline Image operator+(const Image& a, const Image& b) {
  check(a.same_shape(b), "image add: shape mismatch");
  return Image(a.h, a.w, a.data + b.data);
}
inline Image operator-(const Image& a, const Image& b) {
  check(a.same_shape(b), "image sub: shape mismatch");
  return Image(a.h, a.w, a.data - b.data);
}
inline Image operator*(Scalar s, const Image& a) { return Image(a.h, a.w, s * a.data); }

/// [0,1] display range <-> [-1,1] model range. All diffusion math runs in
/// model range; dataset files and renders live in display range.
inline Image to_model_range(const Image& x) { return Image(x.h, x.w, 2.0 * x.data - Mat::Constant(x.data.rows(), x.data.cols(), 1.0)); }
inline Image to_display_range(const Image& x) {
  Image y(x.h, x.w, (0.5 * (x.data.array() + 1.0)).matrix());
  y.data = y.data.cwiseMax(0.0).cwiseMin(1.0);
  return y;
}

inline Scalar max_abs_diff(const Image& a, const Image& b) {
  check(a.same_shape(b), "max_abs_diff: shape mismatch");
  return (a.data - b.data).cwiseAbs().maxCoeff();
}

inline Scalar norm(const Image& a) { return a.data.norm(); }

}  // namespace ssdlab
