#pragma once

#include <string>
#include <vector>

#include "ssdlab/image.hpp"
#include "ssdlab/rng.hpp"
#include "ssdlab/vocab.hpp"

namespace ssdlab {

inline const std::vector<std::string>& shape_classes() {
  static const std::vector<std::string> v = {"sphere", "cube", "cone", "car", "field"};
  return v;
}
inline const std::vector<std::string>& style_classes() {
  static const std::vector<std::string> v = {"red",     "blue", "green", "golden",
                                             "stripes", "dots", "fire"};
  return v;
}

struct DatasetConfig {
  int image_size = 32;
  int per_class = 16;              // samples per (shape, style) pair
  Scalar negative_fraction = 0.1;  // degraded copies labeled with the negative prompt
  std::uint64_t seed = 0;
};

struct LabeledImage {
  Image image;  // display range [0,1]
  std::string shape, style;
  std::vector<int> tokens;
  std::string file;  // set when persisted
};

/// Procedural primitive shapes in style variants, display range, gray
/// background. "<shape> <style>" prompts are independently controllable.
class ToyDataset {
 public:
  static ToyDataset generate(const DatasetConfig& cfg, const Vocabulary& vocab);

  const std::vector<LabeledImage>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  int image_size() const { return image_size_; }

  void save(const std::string& dir) const;  // PNGs + manifest.json
  static ToyDataset load(const std::string& dir, const Vocabulary& vocab);

  std::vector<LabeledImage> items_;
  int image_size_ = 32;
};

/// Renders one styled shape deterministically (used for dataset generation
/// and for procedural style-reference swatches). jitter in [0,1)^2 controls
/// center offset and scale.
Image render_shape(const std::string& shape, const std::string& style, int size, Scalar jx,
                   Scalar jy, Scalar jscale, Scalar phase);

/// Blur-plus-speckle degradation used for negative-prompt training samples.
Image degrade(const Image& im, Rng& rng);

}  // namespace ssdlab
