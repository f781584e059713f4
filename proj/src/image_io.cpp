#include "ssdlab/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <memory>

namespace ssdlab {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_byte(Scalar v) {
  v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<std::uint8_t>(v * 255.0 + 0.5);
}

std::vector<std::uint8_t> pack_rgb_rows(const Image& im) {
  check(im.channels() == 3, "save_png: expected 3 channels");
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(im.h) * im.w * 3);
  for (int y = 0; y < im.h; ++y)
    for (int x = 0; x < im.w; ++x)
      for (int c = 0; c < 3; ++c)
        bytes[(static_cast<std::size_t>(y) * im.w + x) * 3 + c] = to_byte(im.at(c, y, x));
  return bytes;
}

void write_png_rows(png_structp png, png_infop info, const Image& im,
                    const std::vector<std::uint8_t>& bytes) {
  png_set_IHDR(png, info, static_cast<png_uint_32>(im.w), static_cast<png_uint_32>(im.h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(im.h);
  for (int y = 0; y < im.h; ++y)
    rows[y] = const_cast<png_bytep>(bytes.data() + static_cast<std::size_t>(y) * im.w * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
}

}  // namespace

Image load_png(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw ContractError("load_png: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ContractError("load_png: failed to decode " + path);
  }
  png_init_io(png, f.get());
  png_read_info(png, info);

  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(h) * png_get_rowbytes(png, info));
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y)
    rows[y] = bytes.data() + static_cast<std::size_t>(y) * png_get_rowbytes(png, info);
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  Image im(3, static_cast<int>(h), static_cast<int>(w));
  for (png_uint_32 y = 0; y < h; ++y)
    for (png_uint_32 x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        im.at(c, static_cast<int>(y), static_cast<int>(x)) =
            bytes[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
  return im;
}

void save_png(const Image& im, const std::string& path) {
  auto bytes = pack_rgb_rows(im);
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw ContractError("save_png: cannot open " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ContractError("save_png: failed to write " + path);
  }
  png_init_io(png, f.get());
  write_png_rows(png, info, im, bytes);
  png_destroy_write_struct(&png, &info);
}

std::vector<std::uint8_t> encode_png(const Image& im) {
  auto bytes = pack_rgb_rows(im);
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ContractError("encode_png: libpng failure");
  }
  png_set_write_fn(
      png, &out,
      [](png_structp p, png_bytep data, png_size_t n) {
        auto* buf = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
        buf->insert(buf->end(), data, data + n);
      },
      [](png_structp) {});
  write_png_rows(png, info, im, bytes);
  png_destroy_write_struct(&png, &info);
  return out;
}

std::string base64_encode(const std::uint8_t* data, std::size_t n) {
  static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  for (std::size_t i = 0; i < n; i += 3) {
    std::uint32_t v = data[i] << 16;
    if (i + 1 < n) v |= data[i + 1] << 8;
    if (i + 2 < n) v |= data[i + 2];
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back(i + 1 < n ? tbl[(v >> 6) & 63] : '=');
    out.push_back(i + 2 < n ? tbl[v & 63] : '=');
  }
  return out;
}

Image resize_nearest(const Image& im, int out_h, int out_w) {
  check(out_h > 0 && out_w > 0, "resize_nearest: empty target");
  Image out(im.channels(), out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    int sy = std::min(im.h - 1, y * im.h / out_h);
    for (int x = 0; x < out_w; ++x) {
      int sx = std::min(im.w - 1, x * im.w / out_w);
      for (int c = 0; c < im.channels(); ++c) out.at(c, y, x) = im.at(c, sy, sx);
    }
  }
  return out;
}

Image hstrip(const std::vector<Image>& images) {
  check(!images.empty(), "hstrip: no images");
  const int h = images[0].h, c = images[0].channels();
  int total_w = 0;
  for (const auto& im : images) {
    check(im.h == h && im.channels() == c, "hstrip: mismatched shapes");
    total_w += im.w;
  }
  Image out(c, h, total_w);
  int x0 = 0;
  for (const auto& im : images) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < im.w; ++x)
        for (int ch = 0; ch < c; ++ch) out.at(ch, y, x0 + x) = im.at(ch, y, x);
    x0 += im.w;
  }
  return out;
}

}  // namespace ssdlab
