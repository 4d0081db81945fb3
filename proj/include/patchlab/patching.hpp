#pragma once

#include <algorithm>
#include <vector>

#include "raster.hpp"

namespace patchlab {

/// Minimal set of square, partially overlapping patches covering an image.
struct PatchGrid {
  int patch_size = 0;
  int rows = 0;
  int cols = 0;
  std::vector<Rect> rects;  // row-major
};

namespace detail {

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

// `count` offsets evenly spread over [0, side - len], first and last pinned,
// rounded half up.
inline std::vector<int> spread_offsets(int side, int len, int count) {
  std::vector<int> offs(count, 0);
  if (count == 1) return offs;
  const long long span = side - len;
  for (int i = 0; i < count; ++i) {
    offs[i] = static_cast<int>((2LL * i * span + (count - 1)) / (2LL * (count - 1)));
  }
  return offs;
}

}  // namespace detail

/// rows = ceil(H/patch), cols = ceil(W/patch); patch sides clamp to the image
/// side per axis.
inline PatchGrid overlap_grid(int image_w, int image_h, int patch_size) {
  if (image_w < 1 || image_h < 1) throw Error(ErrorCode::invalid_argument, "image dimensions must be >= 1");
  if (patch_size < 1 || patch_size > std::max(image_w, image_h)) {
    throw Error(ErrorCode::invalid_argument, "patch size " + std::to_string(patch_size) + " out of range");
  }
  PatchGrid grid;
  grid.patch_size = patch_size;
  grid.rows = detail::ceil_div(image_h, patch_size);
  grid.cols = detail::ceil_div(image_w, patch_size);
  const int pw = std::min(patch_size, image_w);
  const int ph = std::min(patch_size, image_h);
  const auto xs = detail::spread_offsets(image_w, pw, grid.cols);
  const auto ys = detail::spread_offsets(image_h, ph, grid.rows);
  grid.rects.reserve(xs.size() * ys.size());
  for (int y : ys) {
    for (int x : xs) grid.rects.push_back({x, y, pw, ph});
  }
  return grid;
}

/// Patches whose coverage of the previous mask reaches the threshold, in grid order.
inline std::vector<Rect> filter_patches(const PatchGrid& grid, const GrayMask& prev_mask, double coverage_threshold,
                                        double bin_threshold) {
  std::vector<Rect> kept;
  for (const auto& r : grid.rects) {
    if (coverage_fraction(prev_mask, r, bin_threshold) >= coverage_threshold) kept.push_back(r);
  }
  return kept;
}

inline RasterImage crop_patch(const RasterImage& image, const Rect& rect) {
  if (!rect.inside(image.width(), image.height())) {
    throw Error(ErrorCode::out_of_bounds, "crop rect outside image");
  }
  const int ch = image.channels();
  RasterImage out(rect.w, rect.h, ch);
  const auto row = static_cast<std::size_t>(rect.w) * ch;
  for (int y = 0; y < rect.h; ++y) {
    const auto src = (static_cast<std::size_t>(rect.y + y) * image.width() + rect.x) * ch;
    std::copy_n(image.pixels().begin() + static_cast<std::ptrdiff_t>(src), row,
                out.pixels().begin() + static_cast<std::ptrdiff_t>(y * row));
  }
  return out;
}

}  // namespace patchlab
