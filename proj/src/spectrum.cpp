#include "attgf/spectrum.hpp"

#include <cmath>
#include <complex>
#include <cstdio>
#include <fstream>
#include <mutex>

#include <fftw3.h>

#include "attgf/errors.hpp"

namespace attgf {

namespace {

// FFTW planning is not thread-safe.
std::mutex g_plan_mutex;

}  // namespace

std::vector<double> to_gray(const Image& image) {
  std::vector<double> g(static_cast<std::size_t>(image.width) * image.height);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      double v = image.channels == 1 ? image.at(y, x, 0)
                                     : 0.299 * image.at(y, x, 0) + 0.587 * image.at(y, x, 1) +
                                           0.114 * image.at(y, x, 2);
      g[static_cast<std::size_t>(y) * image.width + x] = v / 255.0;
    }
  }
  return g;
}

Spectrum magnitude_spectrum(int height, int width, std::span<const double> gray) {
  if (height < 1 || width < 1) throw PreconditionError("spectrum needs a non-empty image");
  const std::size_t n = static_cast<std::size_t>(height) * width;
  if (gray.size() != n) throw PreconditionError("gray image size does not match its dimensions");
  fftw_complex* buf = fftw_alloc_complex(n);
  for (std::size_t i = 0; i < n; ++i) {
    buf[i][0] = gray[i];
    buf[i][1] = 0.0;
  }
  fftw_plan plan;
  {
    std::lock_guard lock(g_plan_mutex);
    plan = fftw_plan_dft_2d(height, width, buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  Spectrum s{height, width, std::vector<double>(n)};
  const double scale = 1.0 / static_cast<double>(n);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::size_t src = static_cast<std::size_t>(y) * width + x;
      const int sy = (y + height / 2) % height, sx = (x + width / 2) % width;
      s.values[static_cast<std::size_t>(sy) * width + sx] = std::hypot(buf[src][0], buf[src][1]) * scale;
    }
  }
  {
    std::lock_guard lock(g_plan_mutex);
    fftw_destroy_plan(plan);
  }
  fftw_free(buf);
  return s;
}

Spectrum log_spectrum(int height, int width, std::span<const double> gray) {
  Spectrum s = magnitude_spectrum(height, width, gray);
  for (double& v : s.values) v = std::log1p(v);
  return s;
}

Spectrum average_spectrum(int height, int width, std::span<const std::vector<double>> images) {
  if (images.empty()) throw PreconditionError("average spectrum needs at least one image");
  Spectrum mean{height, width, std::vector<double>(static_cast<std::size_t>(height) * width, 0.0)};
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].size() != mean.values.size()) {
      throw DataError("image " + std::to_string(i) + " differs in size from the first image");
    }
    Spectrum s = log_spectrum(height, width, images[i]);
    for (std::size_t k = 0; k < s.values.size(); ++k) mean.values[k] += s.values[k];
  }
  for (double& v : mean.values) v /= static_cast<double>(images.size());
  return mean;
}

Spectrum average_spectrum(std::span<const Image> images) {
  if (images.empty()) throw PreconditionError("average spectrum needs at least one image");
  const int h = images[0].height, w = images[0].width;
  std::vector<std::vector<double>> gray;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].height != h || images[i].width != w) {
      throw DataError("image " + std::to_string(i) + " is " + std::to_string(images[i].width) + "x" +
                      std::to_string(images[i].height) + ", expected " + std::to_string(w) + "x" +
                      std::to_string(h));
    }
    gray.push_back(to_gray(images[i]));
  }
  return average_spectrum(h, w, gray);
}

Image render_spectrum(const Spectrum& spectrum) {
  Image img(spectrum.width, spectrum.height, 1);
  double lo = spectrum.values.front(), hi = lo;
  for (double v : spectrum.values) lo = std::min(lo, v), hi = std::max(hi, v);
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t i = 0; i < spectrum.values.size(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * (spectrum.values[i] - lo) / span));
  }
  return img;
}

void write_spectrum_matrix(const std::filesystem::path& path, const Spectrum& spectrum) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  char buf[32];
  for (int y = 0; y < spectrum.height; ++y) {
    for (int x = 0; x < spectrum.width; ++x) {
      std::snprintf(buf, sizeof(buf), "%.17g", spectrum.at(y, x));
      out << (x ? " " : "") << buf;
    }
    out << "\n";
  }
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace attgf
