#pragma once

// Brute-force references for detection metrics and NMS, written directly from
// the definitions and kept separate from the library code paths.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "gammadesk/boxes.hpp"
#include "gammadesk/metrics.hpp"
#include "gammadesk/rng.hpp"

namespace oracles {

using gammadesk::Box;
using gammadesk::Rng;
using gammadesk::ScoredBox;

/// Pixel-free IoU from interval lengths.
inline double iou_ref(const Box& a, const Box& b) {
  auto overlap = [](double lo1, double hi1, double lo2, double hi2) {
    return std::max(0.0, std::min(hi1, hi2) - std::max(lo1, lo2));
  };
  const double inter = overlap(a.x_min, a.x_max, b.x_min, b.x_max) * overlap(a.y_min, a.y_max, b.y_min, b.y_max);
  const double ua = (a.x_max - a.x_min) * (a.y_max - a.y_min);
  const double ub = (b.x_max - b.x_min) * (b.y_max - b.y_min);
  return inter == 0.0 ? 0.0 : inter / (ua + ub - inter);
}

/// Keep-set by precomputed suppression matrix over the priority order.
inline std::vector<std::size_t> nms_ref(const std::vector<ScoredBox>& boxes, double thr) {
  const std::size_t n = boxes.size();
  auto before = [&](std::size_t a, std::size_t b) {
    if (boxes[a].score != boxes[b].score) return boxes[a].score > boxes[b].score;
    auto ca = boxes[a].box.coords(), cb = boxes[b].box.coords();
    if (ca != cb) return ca < cb;
    return a < b;
  };
  std::vector<std::vector<bool>> overl(n, std::vector<bool>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) overl[i][j] = iou_ref(boxes[i].box, boxes[j].box) > thr;
  std::vector<std::size_t> rank(n);
  std::iota(rank.begin(), rank.end(), 0);
  // selection sort keeps this obviously O(n^2)
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = i;
    for (std::size_t j = i + 1; j < n; ++j)
      if (before(rank[j], rank[best])) best = j;
    std::swap(rank[i], rank[best]);
  }
  std::vector<bool> kept(n, false);
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t i = rank[r];
    bool ok = true;
    for (std::size_t q = 0; q < r; ++q)
      if (kept[rank[q]] && overl[i][rank[q]]) ok = false;
    kept[i] = ok;
    if (ok) out.push_back(i);
  }
  return out;
}

/// AP as sum over recall levels k/G of the best precision reached at recall >= k/G.
inline double ap_ref(const std::vector<gammadesk::metrics::ScoredDetection>& dets,
                     const std::vector<gammadesk::metrics::GroundTruthBox>& gts, double thr) {
  const std::size_t n = dets.size(), g = gts.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i < n; ++i)  // stable insertion sort by descending score
    for (std::size_t j = i; j > 0 && dets[order[j]].score > dets[order[j - 1]].score; --j)
      std::swap(order[j], order[j - 1]);
  std::vector<bool> used(g, false);
  std::vector<int> tp(n, 0);
  for (std::size_t r = 0; r < n; ++r) {
    const auto& d = dets[order[r]];
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t k = 0; k < g; ++k) {
      if (used[k] || gts[k].image != d.image) continue;
      double o = iou_ref(d.box, gts[k].box);
      if (o > best_iou) {
        best_iou = o;
        best = static_cast<int>(k);
      }
    }
    if (best >= 0 && best_iou >= thr) {
      used[best] = true;
      tp[r] = 1;
    }
  }
  double ap = 0.0;
  for (std::size_t level = 1; level <= g; ++level) {
    double best_p = 0.0;
    int cum = 0;
    for (std::size_t r = 0; r < n; ++r) {
      cum += tp[r];
      if (static_cast<std::size_t>(cum) >= level) best_p = std::max(best_p, double(cum) / double(r + 1));
    }
    ap += best_p / static_cast<double>(g);
  }
  return ap;
}

inline Box random_box(Rng& rng, double extent = 20.0, bool integer_grid = true) {
  auto draw = [&] { return integer_grid ? static_cast<double>(rng.below(static_cast<std::size_t>(extent))) : rng.uniform(0.0, extent); };
  double x0 = draw(), y0 = draw();
  double w = 1.0 + (integer_grid ? static_cast<double>(rng.below(8)) : rng.uniform(0.0, 8.0));
  double h = 1.0 + (integer_grid ? static_cast<double>(rng.below(8)) : rng.uniform(0.0, 8.0));
  return {x0, y0, x0 + w, y0 + h};
}

}  // namespace oracles
