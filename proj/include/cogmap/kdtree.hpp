#pragma once

// Exact nearest-neighbor index over 3-D points. Median-split k-d tree,
// O(log N) average query. Distance ties resolve to the lowest point index.

#include <numeric>
#include <vector>

#include "cogmap/core.hpp"
#include "cogmap/geometry.hpp"

namespace cogmap {

class KdTree3 {
 public:
  explicit KdTree3(std::vector<Vec3> points) : pts_(std::move(points)) {
    if (pts_.empty()) throw EmptyInputError("KdTree3: empty point set");
    order_.resize(pts_.size());
    std::iota(order_.begin(), order_.end(), 0);
    nodes_.reserve(pts_.size());
    root_ = build(0, pts_.size());
  }

  struct Hit {
    size_t index = 0;
    double dist2 = 0.0;
  };

  Hit nearest(const Vec3& q) const {
    Hit best{pts_.size(), std::numeric_limits<double>::max()};
    search(root_, q, best);
    return best;
  }

  size_t size() const { return pts_.size(); }
  const Vec3& point(size_t i) const { return pts_[i]; }

 private:
  struct Node {
    size_t point_index;
    int axis;
    int left = -1, right = -1;
  };

  int build(size_t lo, size_t hi) {
    if (lo >= hi) return -1;
    // split on the widest axis of this subset
    Vec3 mn = pts_[order_[lo]], mx = mn;
    for (size_t i = lo + 1; i < hi; ++i) {
      mn = mn.cwiseMin(pts_[order_[i]]);
      mx = mx.cwiseMax(pts_[order_[i]]);
    }
    int axis = 0;
    (mx - mn).maxCoeff(&axis);
    size_t mid = lo + (hi - lo) / 2;
    std::nth_element(order_.begin() + lo, order_.begin() + mid, order_.begin() + hi,
                     [&](size_t a, size_t b) {
                       double va = pts_[a][axis], vb = pts_[b][axis];
                       return va < vb || (va == vb && a < b);
                     });
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back({order_[mid], axis, -1, -1});
    int left = build(lo, mid);
    int right = build(mid + 1, hi);
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  void consider(size_t idx, const Vec3& q, Hit& best) const {
    double d2 = (pts_[idx] - q).squaredNorm();
    if (d2 < best.dist2 || (d2 == best.dist2 && idx < best.index)) best = {idx, d2};
  }

  void search(int node, const Vec3& q, Hit& best) const {
    if (node < 0) return;
    const Node& n = nodes_[node];
    consider(n.point_index, q, best);
    double delta = q[n.axis] - pts_[n.point_index][n.axis];
    int near = delta < 0 ? n.left : n.right;
    int far = delta < 0 ? n.right : n.left;
    search(near, q, best);
    if (delta * delta <= best.dist2) search(far, q, best);
  }

  std::vector<Vec3> pts_;
  std::vector<size_t> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace cogmap
