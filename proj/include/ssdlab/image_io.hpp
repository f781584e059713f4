#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssdlab/image.hpp"

namespace ssdlab {

/// 8-bit RGB PNG in, values scaled to [0,1]. Grayscale/alpha inputs are
/// expanded/dropped to 3 channels.
Image load_png(const std::string& path);

/// Writes a 3-channel image clamped to [0,1] as 8-bit RGB PNG.
void save_png(const Image& im, const std::string& path);

/// In-memory PNG encoding (for HTTP clients and content hashing).
std::vector<std::uint8_t> encode_png(const Image& im);

std::string base64_encode(const std::uint8_t* data, std::size_t n);
inline std::string base64_encode(const std::vector<std::uint8_t>& v) {
  return base64_encode(v.data(), v.size());
}

/// Nearest-neighbour resize (evaluation grids use fixed cell sizes).
Image resize_nearest(const Image& im, int out_h, int out_w);

/// Horizontal concatenation of equally sized images into one strip.
Image hstrip(const std::vector<Image>& images);

}  // namespace ssdlab
