#include "hdwsr/png_io.hpp"

#include <png.h>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <vector>

#include "hdwsr/errors.hpp"

namespace hdwsr {

namespace {

struct FileCloser {
  std::FILE* fp;
  ~FileCloser() {
    if (fp) std::fclose(fp);
  }
};

constexpr bool kLittleEndian = std::endian::native == std::endian::little;

}  // namespace

Tensor<double> read_png_rgb(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("read_png_rgb: cannot open " + path);
  FileCloser closer{fp};

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("read_png_rgb: png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("read_png_rgb: png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestError("read_png_rgb: cannot decode " + path);
  }
  png_init_io(png, fp);
  int transforms = PNG_TRANSFORM_EXPAND | PNG_TRANSFORM_STRIP_ALPHA |
                   PNG_TRANSFORM_GRAY_TO_RGB | PNG_TRANSFORM_PACKING;
  if (kLittleEndian) transforms |= PNG_TRANSFORM_SWAP_ENDIAN;
  png_read_png(png, info, transforms, nullptr);

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int channels = png_get_channels(png, info);
  png_bytepp rows = png_get_rows(png, info);

  if (channels != 3 || (depth != 8 && depth != 16)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestError("read_png_rgb: unsupported layout in " + path + " (channels=" +
                      std::to_string(channels) + ", depth=" + std::to_string(depth) + ")");
  }

  Tensor<double> img({3, static_cast<Index>(h), static_cast<Index>(w)});
  if (depth == 8) {
    const double scale = 1.0 / 255.0;
    for (png_uint_32 y = 0; y < h; ++y) {
      const png_bytep row = rows[y];
      for (png_uint_32 x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          img(c, static_cast<Index>(y), static_cast<Index>(x)) = row[3 * x + c] * scale;
    }
  } else {
    const double scale = 1.0 / 65535.0;
    for (png_uint_32 y = 0; y < h; ++y) {
      const auto* row = reinterpret_cast<const std::uint16_t*>(rows[y]);
      for (png_uint_32 x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          img(c, static_cast<Index>(y), static_cast<Index>(x)) = row[3 * x + c] * scale;
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png_rgb(const std::string& path, const Tensor<double>& img, int bit_depth) {
  if (img.rank() != 3 || img.channels() != 3)
    throw DimensionError("write_png_rgb: expected (3,h,w), have " + dims_str(img.dims()));
  if (bit_depth != 8 && bit_depth != 16)
    throw ConfigError("write_png_rgb: bit_depth must be 8 or 16");

  const Index h = img.height(), w = img.width();
  const int bytes_per_sample = bit_depth / 8;
  std::vector<std::uint8_t> buffer(static_cast<std::size_t>(h * w * 3 * bytes_per_sample));
  std::vector<png_bytep> row_ptrs(static_cast<std::size_t>(h));
  const double maxv = bit_depth == 8 ? 255.0 : 65535.0;
  for (Index y = 0; y < h; ++y) {
    png_bytep row = buffer.data() + y * w * 3 * bytes_per_sample;
    row_ptrs[static_cast<std::size_t>(y)] = row;
    for (Index x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        double v = img(c, y, x);
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        const auto q = static_cast<std::uint32_t>(v * maxv + 0.5);
        if (bit_depth == 8) {
          row[3 * x + c] = static_cast<std::uint8_t>(q);
        } else {
          reinterpret_cast<std::uint16_t*>(row)[3 * x + c] = static_cast<std::uint16_t>(q);
        }
      }
    }
  }

  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError("write_png_rgb: cannot open " + path + " for writing");
  FileCloser closer{fp};

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("write_png_rgb: png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("write_png_rgb: png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("write_png_rgb: encoding failed for " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), bit_depth,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_set_rows(png, info, row_ptrs.data());
  int transforms = PNG_TRANSFORM_IDENTITY;
  if (bit_depth == 16 && kLittleEndian) transforms |= PNG_TRANSFORM_SWAP_ENDIAN;
  png_write_png(png, info, transforms, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace hdwsr
