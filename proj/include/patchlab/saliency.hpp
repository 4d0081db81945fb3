#pragma once

#include <fftw3.h>

#include <algorithm>
#include <complex>
#include <filesystem>
#include <functional>
#include <future>
#include <mutex>
#include <string>
#include <vector>

#include "image_io.hpp"
#include "raster.hpp"

namespace patchlab {

enum class SaliencyMode { precomputed, spectral_residual };

struct SaliencyProviderConfig {
  SaliencyMode mode = SaliencyMode::spectral_residual;
  std::vector<int> scales{256, 512};
  std::filesystem::path precomputed_dir;

  void validate() const {
    if (scales.empty()) throw Error(ErrorCode::invalid_argument, "saliency scales must be non-empty");
    for (int s : scales) {
      if (s < 32) throw Error(ErrorCode::invalid_argument, "saliency scale below 32: " + std::to_string(s));
    }
    if (mode == SaliencyMode::precomputed && precomputed_dir.empty()) {
      throw Error(ErrorCode::invalid_argument, "precomputed mode needs a directory");
    }
  }
};

namespace detail {

// FFTW's planner is not re-entrant; execution on distinct plans is.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

class Fft2d {
 public:
  Fft2d(int width, int height) : n_(static_cast<std::size_t>(width) * height) {
    buf_ = fftw_alloc_complex(n_);
    std::lock_guard lock(fftw_planner_mutex());
    fwd_ = fftw_plan_dft_2d(height, width, buf_, buf_, FFTW_FORWARD, FFTW_ESTIMATE);
    inv_ = fftw_plan_dft_2d(height, width, buf_, buf_, FFTW_BACKWARD, FFTW_ESTIMATE);
  }
  ~Fft2d() {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(inv_);
    fftw_free(buf_);
  }
  Fft2d(const Fft2d&) = delete;
  Fft2d& operator=(const Fft2d&) = delete;

  std::complex<double>* data() { return reinterpret_cast<std::complex<double>*>(buf_); }
  void forward() { fftw_execute(fwd_); }
  void inverse() { fftw_execute(inv_); }

 private:
  std::size_t n_;
  fftw_complex* buf_ = nullptr;
  fftw_plan fwd_ = nullptr;
  fftw_plan inv_ = nullptr;
};

}  // namespace detail

/// Classical spectral-residual saliency: the log-amplitude spectrum minus its
/// 3x3 local average, recombined with the original phase and transformed back.
inline GrayMask spectral_residual(const RasterImage& image) {
  const int w = image.width();
  const int h = image.height();
  if (w < 8 || h < 8) throw Error(ErrorCode::image_too_small, "spectral residual needs at least 8x8");
  const std::size_t n = static_cast<std::size_t>(w) * h;

  const auto luma = to_luma(image);
  auto [lo, hi] = std::minmax_element(luma.begin(), luma.end());
  if (*lo == *hi) return GrayMask(w, h, 0.0);

  detail::Fft2d fft(w, h);
  auto* spec = fft.data();
  for (std::size_t i = 0; i < n; ++i) spec[i] = {luma[i], 0.0};
  fft.forward();

  std::vector<double> amp(n);
  for (std::size_t i = 0; i < n; ++i) amp[i] = std::abs(spec[i]);
  // Bins this far below the peak are rounding noise; their phase is meaningless.
  const double floor = *std::max_element(amp.begin(), amp.end()) * 1e-12;
  // log1p keeps exact spectral zeros (box edges) from turning into deep holes.
  std::vector<double> log_amp(n);
  for (std::size_t i = 0; i < n; ++i) log_amp[i] = std::log1p(amp[i]);

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double avg = 0.0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          avg += log_amp[static_cast<std::size_t>((y + dy + h) % h) * w + (x + dx + w) % w];
        }
      }
      avg /= 9.0;
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      spec[i] = amp[i] > floor ? std::exp(log_amp[i] - avg) * (spec[i] / amp[i]) : std::complex<double>{};
    }
  }
  fft.inverse();

  std::vector<double> energy(n);
  for (std::size_t i = 0; i < n; ++i) energy[i] = std::norm(spec[i]);
  const double peak = *std::max_element(energy.begin(), energy.end());
  if (!(peak > 0.0)) return GrayMask(w, h, 0.0);
  for (double& e : energy) e /= peak;
  return min_max_scale(gaussian_blur(GrayMask::from_unclamped(w, h, std::move(energy)), 9));
}

inline std::filesystem::path precomputed_saliency_path(const std::filesystem::path& dir, const std::string& image_id,
                                                       int scale) {
  return dir / (image_id + "." + std::to_string(scale) + ".pgm");
}

/// Reads `<dir>/<imageId>.<scale>.pgm`, which must be scale x scale.
inline GrayMask load_precomputed_saliency(const std::filesystem::path& dir, const std::string& image_id, int scale) {
  const auto path = precomputed_saliency_path(dir, image_id, scale);
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::missing_file, path.string());
  auto mask = load_mask(path);
  if (mask.width() != scale || mask.height() != scale) {
    throw Error(ErrorCode::dimension_mismatch, path.string() + " is " + std::to_string(mask.width()) + "x" +
                                                   std::to_string(mask.height()) + ", expected " +
                                                   std::to_string(scale) + "x" + std::to_string(scale));
  }
  return mask;
}

/// A provider maps the image resized to scale x scale onto a saliency map.
using SaliencyProvider = std::function<GrayMask(const RasterImage& scaled, int scale)>;

/// Per-scale maps brought back to image size, averaged, then min-max scaled.
/// Scales are reduced in ascending order so the result is independent of
/// configuration order and completion order.
inline GrayMask multiscale_saliency(const RasterImage& image, std::vector<int> scales, const SaliencyProvider& provider) {
  if (scales.empty()) throw Error(ErrorCode::invalid_argument, "saliency scales must be non-empty");
  std::sort(scales.begin(), scales.end());
  std::vector<std::future<GrayMask>> parts;
  parts.reserve(scales.size());
  for (int s : scales) {
    parts.push_back(std::async(std::launch::async, [&image, &provider, s] {
      auto map = provider(resize_bilinear(image, s, s), s);
      return resize_bilinear(map, image.width(), image.height());
    }));
  }
  std::vector<double> sum(static_cast<std::size_t>(image.width()) * image.height(), 0.0);
  for (auto& part : parts) {
    const auto map = part.get();
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += map[i];
  }
  for (double& v : sum) v /= static_cast<double>(scales.size());
  return min_max_scale(image.width(), image.height(), sum);
}

inline GrayMask multiscale_saliency(const RasterImage& image, const SaliencyProviderConfig& cfg,
                                    const std::string& image_id = {}) {
  cfg.validate();
  if (cfg.mode == SaliencyMode::spectral_residual) {
    return multiscale_saliency(image, cfg.scales, [](const RasterImage& scaled, int) { return spectral_residual(scaled); });
  }
  if (image_id.empty()) throw Error(ErrorCode::invalid_argument, "precomputed saliency needs an image id");
  return multiscale_saliency(image, cfg.scales, [&](const RasterImage&, int s) {
    return load_precomputed_saliency(cfg.precomputed_dir, image_id, s);
  });
}

}  // namespace patchlab
