#include "ssdlab/scene.hpp"

#include <cmath>

namespace ssdlab {

namespace {

constexpr Scalar kDeg = M_PI / 180.0;

Scalar softplus(Scalar x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
Scalar sigmoid_s(Scalar x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Basis {
  std::array<Scalar, 3> pos, fwd, right, up;
};

std::array<Scalar, 3> cross(const std::array<Scalar, 3>& a, const std::array<Scalar, 3>& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
Scalar nrm(const std::array<Scalar, 3>& a) {
  return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
}
std::array<Scalar, 3> normalized(const std::array<Scalar, 3>& a) {
  const Scalar n = nrm(a);
  check(n > 1e-12, "camera: degenerate (zero) direction");
  return {a[0] / n, a[1] / n, a[2] / n};
}

Basis camera_basis(const Camera& cam) {
  check(cam.radius > 0.0, "camera: radius must be > 0");
  Basis b;
  b.pos = cam.position();
  b.fwd = normalized({-b.pos[0], -b.pos[1], -b.pos[2]});  // look at origin
  std::array<Scalar, 3> world_up = {0.0, 1.0, 0.0};
  std::array<Scalar, 3> r = cross(b.fwd, world_up);
  if (nrm(r) < 1e-9) r = {1.0, 0.0, 0.0};  // looking straight up/down
  b.right = normalized(r);
  b.up = cross(b.right, b.fwd);
  return b;
}

/// Ray / axis-aligned cube intersection; false when the ray misses.
bool intersect_box(const std::array<Scalar, 3>& o, const std::array<Scalar, 3>& d, Scalar extent,
                   Scalar& t0, Scalar& t1) {
  t0 = 0.0;
  t1 = std::numeric_limits<Scalar>::max();
  for (int i = 0; i < 3; ++i) {
    if (std::abs(d[i]) < 1e-12) {
      if (o[i] < -extent || o[i] > extent) return false;
      continue;
    }
    Scalar a = (-extent - o[i]) / d[i];
    Scalar b = (extent - o[i]) / d[i];
    if (a > b) std::swap(a, b);
    t0 = std::max(t0, a);
    t1 = std::min(t1, b);
  }
  return t0 < t1;
}

struct TrilinearStencil {
  Eigen::Index idx[8];
  Scalar w[8];
};

/// Corner indices and weights at world point p; clamps to the grid border.
TrilinearStencil stencil_at(const RadianceGrid& g, const std::array<Scalar, 3>& p) {
  TrilinearStencil s;
  Scalar gc[3], fr[3];
  int i0[3];
  for (int k = 0; k < 3; ++k) {
    Scalar u = (p[k] + g.extent) / (2.0 * g.extent) * (g.n - 1);
    u = std::clamp(u, 0.0, static_cast<Scalar>(g.n - 1));
    gc[k] = u;
    i0[k] = std::min(static_cast<int>(u), g.n - 2);
    fr[k] = u - i0[k];
  }
  int c = 0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx, ++c) {
        s.idx[c] = g.cell(i0[0] + dx, i0[1] + dy, i0[2] + dz);
        s.w[c] = (dx ? fr[0] : 1 - fr[0]) * (dy ? fr[1] : 1 - fr[1]) * (dz ? fr[2] : 1 - fr[2]);
      }
  return s;
}

Scalar density_at(const RadianceGrid& g, const TrilinearStencil& s) {
  Scalar out = 0.0;
  for (int c = 0; c < 8; ++c) out += s.w[c] * softplus(g.density_logits(0, s.idx[c]));
  return out;
}

Scalar density_at_point(const RadianceGrid& g, const std::array<Scalar, 3>& p) {
  return density_at(g, stencil_at(g, p));
}

void color_at(const RadianceGrid& g, const TrilinearStencil& s, Scalar out[3]) {
  out[0] = out[1] = out[2] = 0.0;
  for (int c = 0; c < 8; ++c)
    for (int ch = 0; ch < 3; ++ch) out[ch] += s.w[c] * sigmoid_s(g.color_logits(ch, s.idx[c]));
}

}  // namespace

Image Canvas2D::render() const {
  Image out(logits.h, logits.w, (1.0 / (1.0 + (-logits.data.array()).exp())).matrix());
  return out;
}

Image Canvas2D::backward(const Image& d_render) const {
  Arr s = 1.0 / (1.0 + (-logits.data.array()).exp());
  return Image(logits.h, logits.w, (d_render.data.array() * s * (1.0 - s)).matrix());
}

std::array<Scalar, 3> Camera::position() const {
  const Scalar a = azimuth_deg * kDeg, e = elevation_deg * kDeg;
  return {radius * std::cos(e) * std::cos(a), radius * std::sin(e),
          radius * std::cos(e) * std::sin(a)};
}

std::array<Scalar, 3> Camera::ray_direction(int y, int x) const {
  Basis b = camera_basis(*this);
  const Scalar tanf = std::tan(0.5 * fov_deg * kDeg);
  const Scalar u = ((x + 0.5) / res * 2.0 - 1.0) * tanf;
  const Scalar v = ((y + 0.5) / res * 2.0 - 1.0) * tanf;
  return normalized({b.fwd[0] + u * b.right[0] - v * b.up[0],
                     b.fwd[1] + u * b.right[1] - v * b.up[1],
                     b.fwd[2] + u * b.right[2] - v * b.up[2]});
}

Camera sample_camera(Rng& rng, const CameraPolicy& policy) {
  check(policy.azimuth_hi >= policy.azimuth_lo && policy.elevation_hi >= policy.elevation_lo &&
            policy.radius_hi >= policy.radius_lo,
        "sample_camera: empty range");
  check(policy.radius_lo > 0.0, "sample_camera: radius must be positive");
  Camera cam;
  cam.azimuth_deg = rng.uniform(policy.azimuth_lo, policy.azimuth_hi);
  cam.elevation_deg = rng.uniform(policy.elevation_lo, policy.elevation_hi);
  cam.radius = rng.uniform(policy.radius_lo, policy.radius_hi);
  cam.fov_deg = policy.fov_deg;
  cam.res = policy.res;
  return cam;
}

RadianceGrid RadianceGrid::init(int n, Scalar density_logit0, Scalar color_logit0) {
  check(n >= 2, "RadianceGrid: n >= 2");
  RadianceGrid g;
  g.n = n;
  const Eigen::Index cells = static_cast<Eigen::Index>(n) * n * n;
  g.density_logits = Mat::Constant(1, cells, density_logit0);
  g.color_logits = Mat::Constant(3, cells, color_logit0);
  return g;
}

GridRender render_grid(const RadianceGrid& grid, const Camera& cam, const RenderOptions& opts) {
  Basis basis = camera_basis(cam);
  GridRender out;
  out.rgb = Image(3, cam.res, cam.res);
  out.weight_sum = Image(1, cam.res, cam.res);
  const int M = opts.samples_per_ray;

  for (int y = 0; y < cam.res; ++y) {
    for (int x = 0; x < cam.res; ++x) {
      auto dir = cam.ray_direction(y, x);
      Scalar t0, t1;
      Scalar rgb[3] = {0, 0, 0};
      Scalar wsum = 0.0;
      if (intersect_box(basis.pos, dir, grid.extent, t0, t1)) {
        const Scalar dt = (t1 - t0) / M;
        Scalar transmittance = 1.0;
        for (int k = 0; k < M; ++k) {
          const Scalar tk = t0 + (k + 0.5) * dt;  // midpoint stratification
          const std::array<Scalar, 3> p = {basis.pos[0] + tk * dir[0], basis.pos[1] + tk * dir[1],
                                           basis.pos[2] + tk * dir[2]};
          TrilinearStencil st = stencil_at(grid, p);
          const Scalar sigma = density_at(grid, st);
          const Scalar alpha = 1.0 - std::exp(-sigma * dt);
          const Scalar wk = transmittance * alpha;
          Scalar c[3];
          color_at(grid, st, c);
          for (int ch = 0; ch < 3; ++ch) rgb[ch] += wk * c[ch];
          wsum += wk;
          transmittance *= (1.0 - alpha);
          if (transmittance < 1e-6) break;
        }
      }
      for (int ch = 0; ch < 3; ++ch)
        out.rgb.at(ch, y, x) = rgb[ch] + (1.0 - wsum) * opts.background[ch];
      out.weight_sum.at(0, y, x) = wsum;
    }
  }
  return out;
}

void render_grid_backward(const RadianceGrid& grid, const Camera& cam, const RenderOptions& opts,
                          const Image& d_rgb, Mat& d_density_logits, Mat& d_color_logits) {
  check(d_density_logits.rows() == 1 && d_density_logits.cols() == grid.density_logits.cols(),
        "render_grid_backward: d_density shape");
  check(d_color_logits.rows() == 3 && d_color_logits.cols() == grid.color_logits.cols(),
        "render_grid_backward: d_color shape");
  Basis basis = camera_basis(cam);
  const int M = opts.samples_per_ray;

  std::vector<Scalar> alpha(M), wk(M), dwk(M);
  std::vector<TrilinearStencil> st(M);
  std::vector<std::array<Scalar, 3>> col(M);

  for (int y = 0; y < cam.res; ++y) {
    for (int x = 0; x < cam.res; ++x) {
      auto dir = cam.ray_direction(y, x);
      Scalar t0, t1;
      if (!intersect_box(basis.pos, dir, grid.extent, t0, t1)) continue;
      const Scalar dt = (t1 - t0) / M;
      Scalar transmittance = 1.0;
      int used = 0;
      for (int k = 0; k < M; ++k) {
        const Scalar tk = t0 + (k + 0.5) * dt;
        const std::array<Scalar, 3> p = {basis.pos[0] + tk * dir[0], basis.pos[1] + tk * dir[1],
                                         basis.pos[2] + tk * dir[2]};
        st[k] = stencil_at(grid, p);
        const Scalar sigma = density_at(grid, st[k]);
        alpha[k] = 1.0 - std::exp(-sigma * dt);
        wk[k] = transmittance * alpha[k];
        color_at(grid, st[k], col[k].data());
        transmittance *= (1.0 - alpha[k]);
        ++used;
        if (transmittance < 1e-6) break;
      }

      const Scalar dr[3] = {d_rgb.at(0, y, x), d_rgb.at(1, y, x), d_rgb.at(2, y, x)};
      // dL/dw_k = <dr, c_k - background>; color grads directly
      for (int k = 0; k < used; ++k) {
        dwk[k] = 0.0;
        for (int ch = 0; ch < 3; ++ch)
          dwk[k] += dr[ch] * (col[k][ch] - opts.background[ch]);
        // d color
        for (int ch = 0; ch < 3; ++ch) {
          const Scalar dc = dr[ch] * wk[k];
          for (int c = 0; c < 8; ++c) {
            const Scalar lg = grid.color_logits(ch, st[k].idx[c]);
            const Scalar sg = sigmoid_s(lg);
            d_color_logits(ch, st[k].idx[c]) += dc * st[k].w[c] * sg * (1.0 - sg);
          }
        }
      }
      // dL/dalpha_k = dwk[k] * T_k - 1/(1-alpha_k) * sum_{j>k} dwk[j] * w_j
      Scalar suffix = 0.0;  // sum_{j>k} dwk[j] * w_j
      std::vector<Scalar> dalpha(used);
      for (int k = used - 1; k >= 0; --k) {
        const Scalar t_k = alpha[k] > 0.0 ? wk[k] / alpha[k]
                                          : [&] {  // recompute T_k when alpha underflows
                                              Scalar tr = 1.0;
                                              for (int j = 0; j < k; ++j) tr *= (1.0 - alpha[j]);
                                              return tr;
                                            }();
        dalpha[k] = dwk[k] * t_k;
        if (1.0 - alpha[k] > 1e-12) dalpha[k] -= suffix / (1.0 - alpha[k]);
        suffix += dwk[k] * wk[k];
      }
      // d sigma_k = dalpha_k * dt * exp(-sigma_k dt) = dalpha_k * dt * (1 - alpha_k)
      for (int k = 0; k < used; ++k) {
        const Scalar ds = dalpha[k] * dt * (1.0 - alpha[k]);
        for (int c = 0; c < 8; ++c) {
          const Scalar lg = grid.density_logits(0, st[k].idx[c]);
          d_density_logits(0, st[k].idx[c]) += ds * st[k].w[c] * sigmoid_s(lg);
        }
      }
    }
  }
}

Image render_normals(const RadianceGrid& grid, const Camera& cam, const RenderOptions& opts) {
  Basis basis = camera_basis(cam);
  const int M = opts.samples_per_ray;
  const Scalar h = 2.0 * grid.extent / (grid.n - 1);  // one voxel
  Image out(3, cam.res, cam.res);

  for (int y = 0; y < cam.res; ++y) {
    for (int x = 0; x < cam.res; ++x) {
      auto dir = cam.ray_direction(y, x);
      Scalar t0, t1;
      Scalar acc[3] = {0, 0, 0};
      Scalar wsum = 0.0;
      if (intersect_box(basis.pos, dir, grid.extent, t0, t1)) {
        const Scalar dt = (t1 - t0) / M;
        Scalar transmittance = 1.0;
        for (int k = 0; k < M; ++k) {
          const Scalar tk = t0 + (k + 0.5) * dt;
          const std::array<Scalar, 3> p = {basis.pos[0] + tk * dir[0], basis.pos[1] + tk * dir[1],
                                           basis.pos[2] + tk * dir[2]};
          const Scalar sigma = density_at_point(grid, p);
          const Scalar alpha = 1.0 - std::exp(-sigma * dt);
          const Scalar wk = transmittance * alpha;
          if (wk > 1e-9) {
            Scalar grad[3];
            for (int axis = 0; axis < 3; ++axis) {
              std::array<Scalar, 3> pp = p, pm = p;
              pp[axis] += h;
              pm[axis] -= h;
              grad[axis] = (density_at_point(grid, pp) - density_at_point(grid, pm)) / (2 * h);
            }
            const Scalar gn = std::sqrt(grad[0] * grad[0] + grad[1] * grad[1] + grad[2] * grad[2]);
            if (gn > 1e-9)
              for (int ch = 0; ch < 3; ++ch) acc[ch] += wk * (-grad[ch] / gn);
          }
          wsum += wk;
          transmittance *= (1.0 - alpha);
          if (transmittance < 1e-6) break;
        }
      }
      // foreground: renormalized composited normal, encoded into [0,1]
      const Scalar an = std::sqrt(acc[0] * acc[0] + acc[1] * acc[1] + acc[2] * acc[2]);
      if (wsum > 0.5 && an > 1e-9) {
        for (int ch = 0; ch < 3; ++ch) out.at(ch, y, x) = 0.5 * (acc[ch] / an + 1.0);
      } else {
        for (int ch = 0; ch < 3; ++ch) out.at(ch, y, x) = 0.5;
      }
    }
  }
  return out;
}

Image render_normals(const Canvas2D&) {
  throw ContractError("render_normals: unsupported mode (canvas has no geometry)");
}

}  // namespace ssdlab
