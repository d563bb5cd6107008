#pragma once

// Minimal 8-bit grayscale PNG I/O over libpng's simplified API.

#include <png.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kgl/error.hpp"

namespace kgl {

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
  std::uint8_t at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
};

/// BT.601 luma, rounded to nearest.
inline std::uint8_t luma(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  return static_cast<std::uint8_t>(std::lround(0.299 * r + 0.587 * g + 0.114 * b));
}

/// Reads any PNG as 8-bit gray. Colour sources go through `luma`; gray
/// sources keep their bytes.
inline GrayImage read_png_gray(const std::filesystem::path& path, bool* was_color = nullptr) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw DataError("cannot read PNG " + path.string() + ": " + img.message);
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  if (was_color) *was_color = color;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw DataError("cannot decode PNG " + path.string() + ": " + msg);
  }
  GrayImage out{img.width, img.height, {}};
  if (!color) {
    out.pixels = std::move(buf);
  } else {
    out.pixels.resize(out.width * out.height);
    for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = luma(buf[3 * i], buf[3 * i + 1], buf[3 * i + 2]);
  }
  return out;
}

inline void write_png_gray(const std::filesystem::path& path, const GrayImage& im) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, im.pixels.data(), 0, nullptr))
    throw Error("cannot write PNG " + path.string() + ": " + img.message);
}

inline void write_png_rgb(const std::filesystem::path& path, std::size_t width, std::size_t height,
                          const std::vector<std::uint8_t>& rgb) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, rgb.data(), 0, nullptr))
    throw Error("cannot write PNG " + path.string() + ": " + img.message);
}

}  // namespace kgl
