#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "raster.hpp"

namespace patchlab {

struct PolygonPoint {
  double x = 0.0;
  double y = 0.0;
};

struct PolygonAnnotation {
  std::string image_id;
  std::string worker_id;
  std::vector<PolygonPoint> points;
  double elapsed_ms = 0.0;
};

inline constexpr std::size_t min_polygon_points = 5;

inline double polygon_area(const std::vector<PolygonPoint>& pts) {
  double twice = 0.0;
  for (std::size_t i = 0, j = pts.size() - 1; i < pts.size(); j = i++) {
    twice += pts[j].x * pts[i].y - pts[i].x * pts[j].y;
  }
  return std::abs(twice) / 2.0;
}

/// Points may lie on the image border (an outline of the full image is valid).
inline void validate_polygon(const std::vector<PolygonPoint>& pts, int image_w, int image_h) {
  if (pts.size() < min_polygon_points) {
    throw Error(ErrorCode::too_few_points, "polygon needs at least 5 points, got " + std::to_string(pts.size()));
  }
  for (const auto& p : pts) {
    if (!(p.x >= 0.0 && p.y >= 0.0 && p.x <= image_w && p.y <= image_h)) {
      throw Error(ErrorCode::out_of_bounds, "polygon point outside the image");
    }
  }
  if (polygon_area(pts) == 0.0) throw Error(ErrorCode::degenerate, "polygon has zero area");
}

/// Even-odd scanline fill. A pixel is positive iff its center is inside.
inline GrayMask rasterize_polygon(const std::vector<PolygonPoint>& pts, int image_w, int image_h) {
  if (pts.size() < 3 || polygon_area(pts) == 0.0) throw Error(ErrorCode::degenerate, "polygon has zero area");
  GrayMask out(image_w, image_h, 0.0);
  std::vector<double> xs;
  for (int y = 0; y < image_h; ++y) {
    const double cy = y + 0.5;
    xs.clear();
    for (std::size_t i = 0, j = pts.size() - 1; i < pts.size(); j = i++) {
      const auto& a = pts[i];
      const auto& b = pts[j];
      if ((a.y > cy) != (b.y > cy)) xs.push_back((b.x - a.x) * (cy - a.y) / (b.y - a.y) + a.x);
    }
    std::sort(xs.begin(), xs.end());
    for (int x = 0; x < image_w; ++x) {
      const double cx = x + 0.5;
      // Crossings strictly right of the center; odd count means inside.
      const auto right = xs.end() - std::upper_bound(xs.begin(), xs.end(), cx);
      if (right % 2 == 1) out.set(x, y, 1.0);
    }
  }
  return out;
}

}  // namespace patchlab
