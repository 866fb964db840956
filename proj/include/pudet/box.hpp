#pragma once

#include <algorithm>
#include <cmath>

namespace pudet {

/// Axis-aligned box in corner form: (x, y) is the top-left corner.
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }

  friend bool operator==(const Box&, const Box&) = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double ix = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double iy = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  return (ix > 0.0 && iy > 0.0) ? ix * iy : 0.0;
}

inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

inline bool contains_point(const Box& b, double px, double py) {
  return px >= b.x && px <= b.x + b.w && py >= b.y && py <= b.y + b.h;
}

/// Anchor-relative deltas: x = ax + dx*aw, y = ay + dy*ah, w = aw*exp(dw), h = ah*exp(dh).
struct BoxDelta {
  double dx = 0.0;
  double dy = 0.0;
  double dw = 0.0;
  double dh = 0.0;
};

inline BoxDelta encode(const Box& box, const Box& anchor) {
  return {(box.x - anchor.x) / anchor.w, (box.y - anchor.y) / anchor.h,
          std::log(box.w / anchor.w), std::log(box.h / anchor.h)};
}

inline Box decode(const BoxDelta& d, const Box& anchor) {
  return {anchor.x + d.dx * anchor.w, anchor.y + d.dy * anchor.h, anchor.w * std::exp(d.dw),
          anchor.h * std::exp(d.dh)};
}

}  // namespace pudet
