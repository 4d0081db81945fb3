#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "raster.hpp"

namespace patchlab {

/// Weight of the cross-entropy term when the attention loss is used for
/// training. Only recorded; classifier training is not part of this library.
inline constexpr double attention_balance_weight = 0.5;

struct MaskQuality {
  double iou = 0.0;
  double mse = 0.0;
  double attention_loss = 0.0;
};

/// Mean squared error between the min-max scaled model map and the attention mask.
inline double attention_loss(const GrayMask& model_map, const GrayMask& attention_mask) {
  require_same_dims(model_map, attention_mask, "attention_loss");
  const auto scaled = min_max_scale(model_map);
  double sum = 0.0;
  for (std::size_t i = 0; i < scaled.size(); ++i) {
    const double d = scaled[i] - attention_mask[i];
    sum += d * d;
  }
  return sum / static_cast<double>(scaled.size());
}

/// Raw-valued variant for activations not yet in [0,1] (e.g. a CAM).
inline double attention_loss(int width, int height, std::span<const double> model_map,
                             const GrayMask& attention_mask) {
  return attention_loss(min_max_scale(width, height, model_map), attention_mask);
}

inline double per_patch_time(double page_elapsed_ms, int page_size) {
  if (page_size < 1) throw Error(ErrorCode::invalid_argument, "page size must be >= 1");
  return page_elapsed_ms / page_size;
}

inline double mean_squared_error(const GrayMask& a, const GrayMask& b) {
  require_same_dims(a, b, "mean_squared_error");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += (a[i] - b[i]) * (a[i] - b[i]);
  return sum / static_cast<double>(a.size());
}

inline MaskQuality mask_quality(const GrayMask& candidate, const GrayMask& gt, double bin_threshold) {
  require_same_dims(candidate, gt, "mask_quality");
  return {mask_iou(candidate, gt, bin_threshold), mean_squared_error(candidate, gt), attention_loss(candidate, gt)};
}

/// Ten equal bins over [0,1]; a score of exactly 1 lands in the last bin.
inline std::array<int, 10> consensus_histogram(const std::vector<double>& scores) {
  std::array<int, 10> bins{};
  for (double s : scores) {
    const int b = std::clamp(static_cast<int>(std::floor(s * 10.0)), 0, 9);
    ++bins[b];
  }
  return bins;
}

struct TimeSummary {
  double mean = 0.0;
  double p50 = 0.0;
  double p95 = 0.0;
};

/// Nearest-rank percentiles.
inline TimeSummary summarize_times(std::vector<double> times) {
  TimeSummary s;
  if (times.empty()) return s;
  std::sort(times.begin(), times.end());
  double sum = 0.0;
  for (double t : times) sum += t;
  s.mean = sum / static_cast<double>(times.size());
  auto rank = [&](double p) {
    const auto n = static_cast<double>(times.size());
    const auto k = static_cast<std::size_t>(std::max(1.0, std::ceil(p * n)));
    return times[std::min(k, times.size()) - 1];
  };
  s.p50 = rank(0.50);
  s.p95 = rank(0.95);
  return s;
}

}  // namespace patchlab
