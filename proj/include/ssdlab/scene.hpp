#pragma once

#include <array>
#include <string>

#include "ssdlab/image.hpp"
#include "ssdlab/rng.hpp"

namespace ssdlab {

/// Unconstrained logits rendered through an elementwise sigmoid; the fast
/// verification mode where g is (almost) the identity.
struct Canvas2D {
  Image logits;  // 3 x h x w

  static Canvas2D init(int h, int w, Scalar logit0 = 0.0) {
    Canvas2D c;
    c.logits = Image::constant(3, h, w, logit0);
    return c;
  }

  Image render() const;
  /// d(render)/d(logits) chain: returns dlogits given d(render).
  Image backward(const Image& d_render) const;
};

struct Camera {
  Scalar radius = 2.7;
  Scalar azimuth_deg = 0.0;
  Scalar elevation_deg = 15.0;
  Scalar fov_deg = 50.0;
  int res = 32;

  std::array<Scalar, 3> position() const;
  /// Normalized ray direction through pixel (y, x); throws on a degenerate
  /// (zero-radius) camera.
  std::array<Scalar, 3> ray_direction(int y, int x) const;
};

struct CameraPolicy {
  Scalar azimuth_lo = 0.0, azimuth_hi = 360.0;
  Scalar elevation_lo = -10.0, elevation_hi = 45.0;
  Scalar radius_lo = 2.4, radius_hi = 3.0;
  Scalar fov_deg = 50.0;
  int res = 32;
};

Camera sample_camera(Rng& rng, const CameraPolicy& policy);

/// Explicit voxel radiance field on [-extent, extent]^3: softplus densities,
/// sigmoid colors, trilinear interpolation.
struct RadianceGrid {
  int n = 32;
  Scalar extent = 1.0;
  Mat density_logits;  // 1 x n^3
  Mat color_logits;    // 3 x n^3

  static RadianceGrid init(int n, Scalar density_logit0 = -4.0, Scalar color_logit0 = 0.0);

  Eigen::Index cell(int ix, int iy, int iz) const {
    return (static_cast<Eigen::Index>(iz) * n + iy) * n + ix;
  }
};

struct RenderOptions {
  int samples_per_ray = 64;
  std::array<Scalar, 3> background = {0.5, 0.5, 0.5};
};

struct GridRender {
  Image rgb;         // display range
  Image weight_sum;  // 1 x res x res, alpha mass per pixel (<= 1)
};

GridRender render_grid(const RadianceGrid& grid, const Camera& cam, const RenderOptions& opts);

/// Accumulates d(loss)/d(logits) for d(loss)/d(rgb) by re-walking the rays.
void render_grid_backward(const RadianceGrid& grid, const Camera& cam, const RenderOptions& opts,
                          const Image& d_rgb, Mat& d_density_logits, Mat& d_color_logits);

/// Per-pixel unit normals from the negative normalized density gradient,
/// composited with the color weights; background maps to the neutral 0.5 gray.
Image render_normals(const RadianceGrid& grid, const Camera& cam, const RenderOptions& opts);

/// Canvas mode has no geometry; normals are a grid-mode concept.
Image render_normals(const Canvas2D& canvas);

}  // namespace ssdlab
