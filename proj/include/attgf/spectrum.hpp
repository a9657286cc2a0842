#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "attgf/image_io.hpp"

namespace attgf {

// Row-major (height x width) map with the DC term at (height/2, width/2).
struct Spectrum {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

// Luma in [0, 1], row-major.
std::vector<double> to_gray(const Image& image);

// |F| / (height * width) of a real image, center-shifted, before the log.
Spectrum magnitude_spectrum(int height, int width, std::span<const double> gray);
// log(1 + |F| / (height * width)), center-shifted.
Spectrum log_spectrum(int height, int width, std::span<const double> gray);

// Mean log spectrum over equally sized gray images.
Spectrum average_spectrum(int height, int width, std::span<const std::vector<double>> images);
Spectrum average_spectrum(std::span<const Image> images);

// Min-max scaled 8-bit rendering.
Image render_spectrum(const Spectrum& spectrum);
// Whitespace-separated rows at full precision.
void write_spectrum_matrix(const std::filesystem::path& path, const Spectrum& spectrum);

}  // namespace attgf
