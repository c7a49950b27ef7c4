#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace gammadesk {

/// Axis-aligned box in pixel coordinates.
struct Box {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const noexcept { return x_max - x_min; }
  double height() const noexcept { return y_max - y_min; }
  double area() const noexcept { return width() > 0.0 && height() > 0.0 ? width() * height() : 0.0; }
  bool valid() const noexcept { return x_min < x_max && y_min < y_max; }
  std::array<double, 4> coords() const noexcept { return {x_min, y_min, x_max, y_max}; }

  friend bool operator==(const Box&, const Box&) = default;
};

/// Intersection over union without validity checks; 0 when the union is empty.
double box_overlap(const Box& a, const Box& b) noexcept;

Box clip_box(const Box& b, double width, double height) noexcept;
Box scale_box(const Box& b, double sx, double sy) noexcept;

/// Regression deltas (dx, dy, dw, dh) relative to a reference box.
struct BoxDelta {
  double dx = 0.0, dy = 0.0, dw = 0.0, dh = 0.0;
};

/// Standard center/size parameterization with per-component weights.
/// Widths use x_max - x_min (continuous coordinates).
class BoxCoder {
 public:
  explicit BoxCoder(std::array<double, 4> weights = {1.0, 1.0, 1.0, 1.0}) : weights_(weights) {}

  BoxDelta encode(const Box& reference, const Box& target) const noexcept;
  /// dw/dh are clamped to log(1000/16) before exponentiation.
  Box decode(const Box& reference, const BoxDelta& delta) const noexcept;

 private:
  std::array<double, 4> weights_;
};

struct ScoredBox {
  Box box;
  double score = 0.0;
};

/// Greedy non-maximum suppression. Candidates are visited by descending
/// score, ties broken by lexicographic (x_min, y_min, x_max, y_max); a box is
/// dropped when its IoU with an already kept box exceeds `iou_threshold`.
/// Returns indices into `boxes` in visiting order.
std::vector<std::size_t> nms(const std::vector<ScoredBox>& boxes, double iou_threshold);

}  // namespace gammadesk
