#include "ssdlab/dataset.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ssdlab/image_io.hpp"

namespace ssdlab {

namespace {

struct Rgb {
  Scalar r, g, b;
};

Rgb palette(const std::string& name) {
  if (name == "red") return {0.85, 0.12, 0.10};
  if (name == "blue") return {0.12, 0.25, 0.85};
  if (name == "green") return {0.10, 0.70, 0.20};
  if (name == "golden") return {0.90, 0.70, 0.15};
  throw ContractError("palette: unknown flat style " + name);
}

/// Style fill at normalized scene coords (u,v in [0,1]) with a shading
/// multiplier from the shape's geometry.
Rgb style_color(const std::string& style, Scalar u, Scalar v, Scalar shade, Scalar phase) {
  if (style == "stripes") {
    const bool band = static_cast<int>(std::floor((v + phase * 0.25) * 8.0)) % 2 == 0;
    Rgb c = band ? Rgb{0.80, 0.10, 0.20} : Rgb{0.95, 0.92, 0.82};
    return {c.r * shade, c.g * shade, c.b * shade};
  }
  if (style == "dots") {
    const Scalar px = std::fmod((u + phase * 0.2) * 5.0, 1.0) - 0.5;
    const Scalar py = std::fmod(v * 5.0, 1.0) - 0.5;
    const bool dot = (px * px + py * py) < 0.09;
    Rgb c = dot ? Rgb{0.95, 0.85, 0.20} : Rgb{0.05, 0.45, 0.50};
    return {c.r * shade, c.g * shade, c.b * shade};
  }
  if (style == "fire") {
    // vertical gradient, black top -> red -> yellow bottom, with flicker
    const Scalar flick = 0.06 * std::sin((u * 9.0 + phase * 6.28318));
    const Scalar h = std::clamp(1.0 - v + flick, 0.0, 1.0);  // 1 at top
    Scalar r, g, b;
    if (h > 0.66) {
      const Scalar k = (h - 0.66) / 0.34;
      r = 0.25 * (1 - k);
      g = 0.02 * (1 - k);
      b = 0.02 * (1 - k);
    } else if (h > 0.33) {
      const Scalar k = (h - 0.33) / 0.33;
      r = 0.95 - 0.70 * k;
      g = 0.25 - 0.23 * k;
      b = 0.05 - 0.03 * k;
    } else {
      const Scalar k = h / 0.33;
      r = 1.0 - 0.05 * k;
      g = 0.90 - 0.65 * k;
      b = 0.25 - 0.20 * k;
    }
    return {r * shade, g * shade, b * shade};
  }
  Rgb c = palette(style);
  return {c.r * shade, c.g * shade, c.b * shade};
}

/// Coverage (0 or 1) and shading for one shape at centered coords p in [-1,1].
bool shape_mask(const std::string& shape, Scalar px, Scalar py, Scalar r, Scalar& shade) {
  shade = 1.0;
  if (shape == "field") return true;
  if (shape == "sphere") {
    const Scalar d2 = px * px + py * py;
    if (d2 >= r * r) return false;
    shade = 0.55 + 0.45 * std::sqrt(1.0 - d2 / (r * r));
    return true;
  }
  if (shape == "cube") {
    const Scalar s = r * 0.82;
    if (std::abs(px) >= s || std::abs(py) >= s) return false;
    shade = px + py < 0.0 ? 1.0 : 0.72;  // two-tone faces
    return true;
  }
  if (shape == "cone") {
    const Scalar apex_y = -r, base_y = 0.85 * r;
    if (py < apex_y || py > base_y) return false;
    const Scalar half = 0.95 * r * (py - apex_y) / (base_y - apex_y);
    if (std::abs(px) >= half) return false;
    shade = 0.60 + 0.40 * (1.0 - std::abs(px) / std::max(half, 1e-9));
    return true;
  }
  if (shape == "car") {
    // body
    if (std::abs(px) < r && py > -0.1 * r && py < 0.45 * r) {
      shade = 0.95;
      return true;
    }
    // cabin
    if (std::abs(px - 0.05 * r) < 0.5 * r && py > -0.55 * r && py <= -0.1 * r) {
      shade = 0.75;
      return true;
    }
    // wheels render dark regardless of style
    const Scalar wy = py - 0.55 * r;
    for (Scalar wx : {px + 0.55 * r, px - 0.55 * r}) {
      if (wx * wx + wy * wy < 0.07 * r * r) {
        shade = 0.18;
        return true;
      }
    }
    return false;
  }
  throw ContractError("shape_mask: unknown shape " + shape);
}

constexpr Scalar kBackground = 0.5;

}  // namespace

Image render_shape(const std::string& shape, const std::string& style, int size, Scalar jx,
                   Scalar jy, Scalar jscale, Scalar phase) {
  Image im(3, size, size);
  const Scalar cx = 0.2 * (jx - 0.5), cy = 0.2 * (jy - 0.5);
  const Scalar r = 0.55 + 0.3 * jscale;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      Scalar acc[3] = {0, 0, 0};
      // 2x2 supersampling
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const Scalar u = (x + 0.25 + 0.5 * sx) / size;
          const Scalar v = (y + 0.25 + 0.5 * sy) / size;
          const Scalar px = 2.0 * u - 1.0 - cx;
          const Scalar py = 2.0 * v - 1.0 - cy;
          Scalar shade = 1.0;
          if (shape_mask(shape, px, py, r, shade)) {
            Rgb c = style_color(style, u, v, shade, phase);
            acc[0] += c.r;
            acc[1] += c.g;
            acc[2] += c.b;
          } else {
            acc[0] += kBackground;
            acc[1] += kBackground;
            acc[2] += kBackground;
          }
        }
      }
      for (int c = 0; c < 3; ++c) im.at(c, y, x) = acc[c] / 4.0;
    }
  }
  return im;
}

Image degrade(const Image& im, Rng& rng) {
  Image out = im;
  // two passes of 3x3 box blur
  for (int pass = 0; pass < 2; ++pass) {
    Image blurred(3, out.h, out.w);
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x) {
        Scalar acc[3] = {0, 0, 0};
        int n = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= out.h || xx < 0 || xx >= out.w) continue;
            for (int c = 0; c < 3; ++c) acc[c] += out.at(c, yy, xx);
            ++n;
          }
        for (int c = 0; c < 3; ++c) blurred.at(c, y, x) = acc[c] / n;
      }
    out = blurred;
  }
  // speckle
  const int n_speckle = (out.h * out.w) / 10;
  for (int i = 0; i < n_speckle; ++i) {
    const int y = static_cast<int>(rng.uniform_int(0, out.h - 1));
    const int x = static_cast<int>(rng.uniform_int(0, out.w - 1));
    const Scalar v = rng.uniform();
    for (int c = 0; c < 3; ++c) out.at(c, y, x) = v;
  }
  return out;
}

ToyDataset ToyDataset::generate(const DatasetConfig& cfg, const Vocabulary& vocab) {
  ToyDataset ds;
  ds.image_size_ = cfg.image_size;
  Rng rng = Rng::substream(cfg.seed, "dataset");
  const std::vector<int> neg_tokens = vocab.tokenize("unrealistic blurry low quality");

  int index = 0;
  for (const auto& shape : shape_classes()) {
    for (const auto& style : style_classes()) {
      for (int i = 0; i < cfg.per_class; ++i) {
        LabeledImage item;
        item.image = render_shape(shape, style, cfg.image_size, rng.uniform(), rng.uniform(),
                                  rng.uniform(), rng.uniform());
        if (rng.uniform() < cfg.negative_fraction) {
          item.image = degrade(item.image, rng);
          item.shape = "";
          item.style = "";
          item.tokens = neg_tokens;
        } else {
          item.shape = shape;
          item.style = style;
          item.tokens = {vocab.id(shape), vocab.id(style)};
        }
        char buf[32];
        std::snprintf(buf, sizeof(buf), "img_%05d.png", index++);
        item.file = buf;
        ds.items_.push_back(std::move(item));
      }
    }
  }
  return ds;
}

void ToyDataset::save(const std::string& dir) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& item : items_) {
    save_png(item.image, (fs::path(dir) / item.file).string());
    manifest.push_back({{"file", item.file}, {"shape", item.shape}, {"style", item.style}});
  }
  std::ofstream f(fs::path(dir) / "manifest.json");
  f << manifest.dump(2) << "\n";
}

ToyDataset ToyDataset::load(const std::string& dir, const Vocabulary& vocab) {
  namespace fs = std::filesystem;
  std::ifstream f(fs::path(dir) / "manifest.json");
  if (!f) throw ContractError("ToyDataset::load: no manifest.json in " + dir);
  nlohmann::json manifest = nlohmann::json::parse(f);
  ToyDataset ds;
  const std::vector<int> neg_tokens = vocab.tokenize("unrealistic blurry low quality");
  for (const auto& e : manifest) {
    LabeledImage item;
    item.file = e.at("file").get<std::string>();
    item.shape = e.at("shape").get<std::string>();
    item.style = e.at("style").get<std::string>();
    item.image = load_png((fs::path(dir) / item.file).string());
    item.tokens = item.shape.empty() ? neg_tokens
                                     : std::vector<int>{vocab.id(item.shape), vocab.id(item.style)};
    ds.items_.push_back(std::move(item));
  }
  check(!ds.items_.empty(), "ToyDataset::load: empty manifest");
  ds.image_size_ = ds.items_[0].image.h;
  return ds;
}

}  // namespace ssdlab
