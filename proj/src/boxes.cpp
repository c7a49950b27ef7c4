#include "gammadesk/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gammadesk/errors.hpp"

namespace gammadesk {

double box_overlap(const Box& a, const Box& b) noexcept {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

Box clip_box(const Box& b, double width, double height) noexcept {
  return {std::clamp(b.x_min, 0.0, width), std::clamp(b.y_min, 0.0, height), std::clamp(b.x_max, 0.0, width),
          std::clamp(b.y_max, 0.0, height)};
}

Box scale_box(const Box& b, double sx, double sy) noexcept {
  return {b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy};
}

BoxDelta BoxCoder::encode(const Box& ref, const Box& target) const noexcept {
  const double rw = ref.width(), rh = ref.height();
  const double rx = ref.x_min + 0.5 * rw, ry = ref.y_min + 0.5 * rh;
  const double tw = target.width(), th = target.height();
  const double tx = target.x_min + 0.5 * tw, ty = target.y_min + 0.5 * th;
  return {weights_[0] * (tx - rx) / rw, weights_[1] * (ty - ry) / rh, weights_[2] * std::log(tw / rw),
          weights_[3] * std::log(th / rh)};
}

Box BoxCoder::decode(const Box& ref, const BoxDelta& d) const noexcept {
  static const double kClamp = std::log(1000.0 / 16.0);
  const double rw = ref.width(), rh = ref.height();
  const double rx = ref.x_min + 0.5 * rw, ry = ref.y_min + 0.5 * rh;
  const double cx = rx + d.dx / weights_[0] * rw;
  const double cy = ry + d.dy / weights_[1] * rh;
  const double w = rw * std::exp(std::min(d.dw / weights_[2], kClamp));
  const double h = rh * std::exp(std::min(d.dh / weights_[3], kClamp));
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

std::vector<std::size_t> nms(const std::vector<ScoredBox>& boxes, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) throw ContractError("nms: iou_threshold must be in (0, 1)");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (boxes[a].score != boxes[b].score) return boxes[a].score > boxes[b].score;
    if (boxes[a].box.coords() != boxes[b].box.coords()) return boxes[a].box.coords() < boxes[b].box.coords();
    return a < b;
  });
  std::vector<std::size_t> keep;
  for (auto i : order) {
    bool suppressed = false;
    for (auto k : keep)
      if (box_overlap(boxes[i].box, boxes[k].box) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) keep.push_back(i);
  }
  return keep;
}

}  // namespace gammadesk
