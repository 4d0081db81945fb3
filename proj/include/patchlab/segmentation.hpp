#pragma once

#include <algorithm>
#include <vector>

#include "raster.hpp"

namespace patchlab {

struct Point {
  int x = 0;
  int y = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

enum class Connectivity { four = 4, eight = 8 };

/// A connected group of positive pixels from a binarized saliency map.
struct PixelGroup {
  int id = 0;
  std::vector<Point> pixels;  // raster-scan order
  Rect bbox;

  long long size() const noexcept { return static_cast<long long>(pixels.size()); }
};

enum class SegmentationKind { proceed, terminate_with_full_map, whole_image_salient };

struct SegmentationOutcome {
  SegmentationKind kind = SegmentationKind::proceed;
  GrayMask target_map;
};

inline GrayMask threshold_mask(const GrayMask& mask, double t) {
  std::vector<double> out(mask.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[i] > t ? 1.0 : 0.0;
  return GrayMask(mask.width(), mask.height(), std::move(out));
}

/// Connected component labeling of the positive pixels. Ids follow the raster
/// position of each component's first pixel.
inline std::vector<PixelGroup> connected_components(const GrayMask& binary,
                                                    Connectivity conn = Connectivity::four) {
  const int w = binary.width();
  const int h = binary.height();
  std::vector<int> label(binary.size(), -1);
  std::vector<PixelGroup> groups;
  std::vector<Point> stack;

  static constexpr int d4[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
  static constexpr int d8[8][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}, {1, 1}, {1, -1}, {-1, 1}, {-1, -1}};
  const auto* dirs = conn == Connectivity::four ? d4 : d8;
  const int ndirs = conn == Connectivity::four ? 4 : 8;

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * w + x;
      if (binary[idx] <= 0.0 || label[idx] >= 0) continue;

      PixelGroup g;
      g.id = static_cast<int>(groups.size());
      int minx = x, maxx = x, miny = y, maxy = y;
      label[idx] = g.id;
      stack.push_back({x, y});
      while (!stack.empty()) {
        const Point p = stack.back();
        stack.pop_back();
        g.pixels.push_back(p);
        minx = std::min(minx, p.x);
        maxx = std::max(maxx, p.x);
        miny = std::min(miny, p.y);
        maxy = std::max(maxy, p.y);
        for (int k = 0; k < ndirs; ++k) {
          const int nx = p.x + dirs[k][0];
          const int ny = p.y + dirs[k][1];
          if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
          const std::size_t n = static_cast<std::size_t>(ny) * w + nx;
          if (binary[n] > 0.0 && label[n] < 0) {
            label[n] = g.id;
            stack.push_back({nx, ny});
          }
        }
      }
      std::sort(g.pixels.begin(), g.pixels.end(),
                [](const Point& a, const Point& b) { return a.y != b.y ? a.y < b.y : a.x < b.x; });
      g.bbox = {minx, miny, maxx - minx + 1, maxy - miny + 1};
      groups.push_back(std::move(g));
    }
  }
  return groups;
}

/// Keeps groups strictly larger than `min_group_size`, in order.
inline std::vector<PixelGroup> filter_groups(const std::vector<PixelGroup>& groups, long long min_group_size) {
  std::vector<PixelGroup> kept;
  std::copy_if(groups.begin(), groups.end(), std::back_inserter(kept),
               [&](const PixelGroup& g) { return g.size() > min_group_size; });
  return kept;
}

/// Longest bounding-box side over all groups; caps the first grid size.
inline int largest_object_size(const std::vector<PixelGroup>& groups) {
  if (groups.empty()) throw Error(ErrorCode::empty_input, "largest_object_size of no groups");
  int best = 0;
  for (const auto& g : groups) best = std::max({best, g.bbox.w, g.bbox.h});
  return best;
}

/// Keeps the saliency values of groups the crowd confirmed. With no confirmed
/// group every group is deemed necessary: the full map is returned and
/// extraction terminates.
inline SegmentationOutcome apply_group_verdicts(const GrayMask& saliency, const std::vector<PixelGroup>& groups,
                                                const std::vector<bool>& verdicts) {
  if (groups.size() != verdicts.size()) {
    throw Error(ErrorCode::length_mismatch, "one verdict per group required");
  }
  if (std::none_of(verdicts.begin(), verdicts.end(), [](bool v) { return v; })) {
    return {SegmentationKind::terminate_with_full_map, saliency};
  }
  GrayMask target(saliency.width(), saliency.height(), 0.0);
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (!verdicts[i]) continue;
    for (const auto& p : groups[i].pixels) target.set(p.x, p.y, saliency.at(p.x, p.y));
  }
  return {SegmentationKind::proceed, std::move(target)};
}

/// Binary mask of one group's pixels over the full image.
inline GrayMask group_region(const PixelGroup& group, int width, int height) {
  GrayMask region(width, height, 0.0);
  for (const auto& p : group.pixels) region.set(p.x, p.y, 1.0);
  return region;
}

}  // namespace patchlab
