#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace attgf {

// Interleaved 8-bit image with 1 (gray) or 3 (RGB) channels.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int width, int height, int channels);
  std::uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

// Binary PGM (P5) / PPM (P6) with maxval 255.
Image read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const Image& image);

// Bilinear resampling with half-pixel centers.
Image resize_bilinear(const Image& image, int width, int height);

}  // namespace attgf
