#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace patchlab {

/// Axis-aligned pixel rectangle. Top-left offset plus extent.
struct Rect {
  int x = 0;
  int y = 0;
  int w = 1;
  int h = 1;

  int right() const noexcept { return x + w; }
  int bottom() const noexcept { return y + h; }
  long long area() const noexcept { return static_cast<long long>(w) * h; }

  bool inside(int width, int height) const noexcept {
    return w >= 1 && h >= 1 && x >= 0 && y >= 0 && right() <= width && bottom() <= height;
  }

  friend bool operator==(const Rect&, const Rect&) = default;
};

/// 8-bit raster with 1 (gray) or 3 (RGB) interleaved channels, row-major.
class RasterImage {
 public:
  RasterImage() = default;

  RasterImage(int width, int height, int channels)
      : RasterImage(width, height, channels,
                    std::vector<std::uint8_t>(checked_size(width, height, channels), 0)) {}

  RasterImage(int width, int height, int channels, std::vector<std::uint8_t> pixels)
      : width_(width), height_(height), channels_(channels), pixels_(std::move(pixels)) {
    if (pixels_.size() != checked_size(width, height, channels)) {
      throw Error(ErrorCode::invalid_argument, "pixel buffer does not match image dimensions");
    }
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  int channels() const noexcept { return channels_; }
  std::span<const std::uint8_t> pixels() const noexcept { return pixels_; }
  std::span<std::uint8_t> pixels() noexcept { return pixels_; }

  std::uint8_t at(int x, int y, int c = 0) const {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }
  std::uint8_t& at(int x, int y, int c = 0) {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }

  friend bool operator==(const RasterImage&, const RasterImage&) = default;

 private:
  static std::size_t checked_size(int w, int h, int c) {
    if (w < 1 || h < 1) throw Error(ErrorCode::invalid_argument, "image dimensions must be >= 1");
    if (c != 1 && c != 3) throw Error(ErrorCode::invalid_argument, "channels must be 1 or 3");
    return static_cast<std::size_t>(w) * h * c;
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 1;
  std::vector<std::uint8_t> pixels_;
};

/// Real-valued single-channel map with every value in [0,1].
class GrayMask {
 public:
  GrayMask() = default;

  GrayMask(int width, int height, double fill = 0.0)
      : width_(width), height_(height), values_(checked_size(width, height), clamp01(fill)) {}

  /// Values outside [0,1] are rejected; use `from_unclamped` for computed data.
  GrayMask(int width, int height, std::vector<double> values)
      : width_(width), height_(height), values_(std::move(values)) {
    if (values_.size() != checked_size(width, height)) {
      throw Error(ErrorCode::invalid_argument, "value buffer does not match mask dimensions");
    }
    for (double v : values_) {
      if (!(v >= 0.0 && v <= 1.0)) throw Error(ErrorCode::invalid_argument, "mask value outside [0,1]");
    }
  }

  static GrayMask from_unclamped(int width, int height, std::vector<double> values) {
    for (double& v : values) v = clamp01(v);
    return GrayMask(width, height, std::move(values));
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  std::size_t size() const noexcept { return values_.size(); }
  std::span<const double> values() const noexcept { return values_; }

  double at(int x, int y) const { return values_[static_cast<std::size_t>(y) * width_ + x]; }
  double operator[](std::size_t i) const { return values_[i]; }

  /// Writes are clamped so the [0,1] invariant holds unconditionally.
  void set(int x, int y, double v) { values_[static_cast<std::size_t>(y) * width_ + x] = clamp01(v); }
  void set(std::size_t i, double v) { values_[i] = clamp01(v); }

  bool same_dims(const GrayMask& o) const noexcept { return width_ == o.width_ && height_ == o.height_; }

  friend bool operator==(const GrayMask&, const GrayMask&) = default;

 private:
  static double clamp01(double v) {
    if (std::isnan(v)) return 0.0;
    return std::clamp(v, 0.0, 1.0);
  }
  static std::size_t checked_size(int w, int h) {
    if (w < 1 || h < 1) throw Error(ErrorCode::invalid_argument, "mask dimensions must be >= 1");
    return static_cast<std::size_t>(w) * h;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<double> values_;
};

inline void require_same_dims(const GrayMask& a, const GrayMask& b, const char* what) {
  if (!a.same_dims(b)) {
    throw Error(ErrorCode::dimension_mismatch,
                std::string(what) + ": " + std::to_string(a.width()) + "x" + std::to_string(a.height()) +
                    " vs " + std::to_string(b.width()) + "x" + std::to_string(b.height()));
  }
}

/// Affine rescale to [0,1]. A flat map carries no signal and becomes all zeros.
inline GrayMask min_max_scale(const GrayMask& mask) {
  auto [lo, hi] = std::minmax_element(mask.values().begin(), mask.values().end());
  const double min = *lo;
  const double range = *hi - min;
  std::vector<double> out(mask.size(), 0.0);
  if (range > 0.0) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (mask[i] - min) / range;
  }
  return GrayMask::from_unclamped(mask.width(), mask.height(), std::move(out));
}

/// Same rescale for arbitrary real data (spectra, model activations).
inline GrayMask min_max_scale(int width, int height, std::span<const double> raw) {
  if (raw.size() != static_cast<std::size_t>(width) * height) {
    throw Error(ErrorCode::invalid_argument, "raw buffer does not match dimensions");
  }
  auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  const double min = *lo;
  const double range = *hi - min;
  std::vector<double> out(raw.size(), 0.0);
  if (range > 0.0 && std::isfinite(range)) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (raw[i] - min) / range;
  }
  return GrayMask::from_unclamped(width, height, std::move(out));
}

/// Odd kernel size actually used for a requested size (even sizes grow by one).
constexpr int effective_kernel_size(int kernel_size) noexcept {
  return kernel_size % 2 == 0 ? kernel_size + 1 : kernel_size;
}

/// Normalized 1-D Gaussian taps with sigma = size/6.
inline std::vector<double> gaussian_kernel(int kernel_size) {
  if (kernel_size < 1) throw Error(ErrorCode::invalid_argument, "kernel size must be >= 1");
  const int size = effective_kernel_size(kernel_size);
  const int radius = size / 2;
  const double sigma = static_cast<double>(size) / 6.0;
  std::vector<double> taps(size);
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - radius;
    taps[i] = std::exp(-(d * d) / (2.0 * sigma * sigma));
    sum += taps[i];
  }
  for (double& t : taps) t /= sum;
  return taps;
}

/// Separable Gaussian blur with clamp-to-edge borders.
inline GrayMask gaussian_blur(const GrayMask& mask, int kernel_size) {
  const auto taps = gaussian_kernel(kernel_size);
  const int radius = static_cast<int>(taps.size()) / 2;
  const int w = mask.width();
  const int h = mask.height();

  std::vector<double> tmp(mask.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        acc += taps[k + radius] * mask.at(std::clamp(x + k, 0, w - 1), y);
      }
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  }
  std::vector<double> out(mask.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        acc += taps[k + radius] * tmp[static_cast<std::size_t>(std::clamp(y + k, 0, h - 1)) * w + x];
      }
      out[static_cast<std::size_t>(y) * w + x] = acc;
    }
  }
  return GrayMask::from_unclamped(w, h, std::move(out));
}

namespace detail {

// Corner-aligned source coordinate for destination index `d`.
inline double corner_aligned(int d, int src_len, int dst_len) {
  if (dst_len == 1 || src_len == 1) return 0.0;
  return static_cast<double>(d) * (src_len - 1) / (dst_len - 1);
}

struct Tap {
  int i0;
  int i1;
  double t;
};

inline std::vector<Tap> bilinear_taps(int src_len, int dst_len) {
  std::vector<Tap> taps(dst_len);
  for (int d = 0; d < dst_len; ++d) {
    const double s = corner_aligned(d, src_len, dst_len);
    const int i0 = std::min(static_cast<int>(std::floor(s)), src_len - 1);
    const int i1 = std::min(i0 + 1, src_len - 1);
    taps[d] = {i0, i1, s - i0};
  }
  return taps;
}

template <typename Sample>
double bilinear(Sample&& sample, const Tap& tx, const Tap& ty) {
  const double top = sample(tx.i0, ty.i0) * (1.0 - tx.t) + sample(tx.i1, ty.i0) * tx.t;
  const double bot = sample(tx.i0, ty.i1) * (1.0 - tx.t) + sample(tx.i1, ty.i1) * tx.t;
  return top * (1.0 - ty.t) + bot * ty.t;
}

}  // namespace detail

/// Bilinear resize with corner-aligned sampling. Same dims is the identity.
inline GrayMask resize_bilinear(const GrayMask& mask, int w, int h) {
  if (w < 1 || h < 1) throw Error(ErrorCode::invalid_argument, "resize target must be >= 1x1");
  if (w == mask.width() && h == mask.height()) return mask;
  const auto tx = detail::bilinear_taps(mask.width(), w);
  const auto ty = detail::bilinear_taps(mask.height(), h);
  std::vector<double> out(static_cast<std::size_t>(w) * h);
  auto sample = [&](int x, int y) { return mask.at(x, y); };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) out[static_cast<std::size_t>(y) * w + x] = detail::bilinear(sample, tx[x], ty[y]);
  }
  return GrayMask::from_unclamped(w, h, std::move(out));
}

inline RasterImage resize_bilinear(const RasterImage& image, int w, int h) {
  if (w < 1 || h < 1) throw Error(ErrorCode::invalid_argument, "resize target must be >= 1x1");
  if (w == image.width() && h == image.height()) return image;
  const auto tx = detail::bilinear_taps(image.width(), w);
  const auto ty = detail::bilinear_taps(image.height(), h);
  RasterImage out(w, h, image.channels());
  for (int c = 0; c < image.channels(); ++c) {
    auto sample = [&](int x, int y) { return static_cast<double>(image.at(x, y, c)); };
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double v = detail::bilinear(sample, tx[x], ty[y]);
        out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

/// Luma of an RGB image (Rec. 601 weights); gray images pass through.
inline std::vector<double> to_luma(const RasterImage& image) {
  std::vector<double> out(static_cast<std::size_t>(image.width()) * image.height());
  for (int y = 0; y < image.height(); ++y) {
    for (int x = 0; x < image.width(); ++x) {
      double v = image.at(x, y, 0);
      if (image.channels() == 3) v = 0.299 * image.at(x, y, 0) + 0.587 * image.at(x, y, 1) + 0.114 * image.at(x, y, 2);
      out[static_cast<std::size_t>(y) * image.width() + x] = v;
    }
  }
  return out;
}

/// Fraction of the rectangle's pixels whose value exceeds `bin_threshold`.
/// This is the "IoU" used for patch filtering: intersection over patch area.
inline double coverage_fraction(const GrayMask& mask, const Rect& rect, double bin_threshold) {
  if (!rect.inside(mask.width(), mask.height())) {
    throw Error(ErrorCode::out_of_bounds, "rect outside mask");
  }
  long long positive = 0;
  for (int y = rect.y; y < rect.bottom(); ++y) {
    for (int x = rect.x; x < rect.right(); ++x) positive += mask.at(x, y) > bin_threshold ? 1 : 0;
  }
  return static_cast<double>(positive) / static_cast<double>(rect.area());
}

/// Intersection over union of the binarized masks; two empty masks score 1.
inline double mask_iou(const GrayMask& a, const GrayMask& b, double bin_threshold) {
  require_same_dims(a, b, "mask_iou");
  long long inter = 0;
  long long uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool pa = a[i] > bin_threshold;
    const bool pb = b[i] > bin_threshold;
    inter += (pa && pb) ? 1 : 0;
    uni += (pa || pb) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// 8-bit quantization used by the PGM writer.
inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
}

}  // namespace patchlab
