#pragma once

#include <algorithm>
#include <cmath>
#include <compare>

namespace aogqa {

/// Cell index inside one conv-slice grid.
struct GridPos {
  int row = 0;
  int col = 0;
  auto operator<=>(const GridPos&) const = default;
};

/// Image-plane point in pixels, origin top-left.
struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

inline Point operator-(Point a, Point b) { return {a.x - b.x, a.y - b.y}; }
inline Point operator+(Point a, Point b) { return {a.x + b.x, a.y + b.y}; }

inline double squared_norm(Point p) { return p.x * p.x + p.y * p.y; }

/// Axis-aligned box [x, y, w, h] in image pixels.
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  bool operator==(const Box&) const = default;

  Point center() const { return {x + w / 2.0, y + h / 2.0}; }
  double area() const { return w * h; }
  bool valid() const { return w > 0.0 && h > 0.0; }

  static Box centered(Point c, double w, double h) { return {c.x - w / 2.0, c.y - h / 2.0, w, h}; }
};

inline Box clip_box(const Box& b, double image_w, double image_h) {
  const double x0 = std::clamp(b.x, 0.0, image_w);
  const double y0 = std::clamp(b.y, 0.0, image_h);
  const double x1 = std::clamp(b.x + b.w, 0.0, image_w);
  const double y1 = std::clamp(b.y + b.h, 0.0, image_h);
  return {x0, y0, x1 - x0, y1 - y0};
}

inline double intersection_over_union(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Reflects a box about the vertical midline of an image of width `image_w`.
inline Box mirror_box(const Box& b, double image_w) { return {image_w - b.x - b.w, b.y, b.w, b.h}; }

}  // namespace aogqa
