#pragma once

// Octree over 3-D points: axis-aligned cubic root enclosing all points,
// nodes split once they exceed leaf_capacity. Supports axis-aligned box
// range queries (used for merge dedup checks and bank stats).

#include <array>
#include <vector>

#include "cogmap/core.hpp"
#include "cogmap/geometry.hpp"

namespace cogmap {

class Octree {
 public:
  explicit Octree(const std::vector<Vec3>& points, int leaf_capacity = 64)
      : pts_(points), leaf_capacity_(std::max(1, leaf_capacity)) {
    if (pts_.empty()) return;  // empty root
    Vec3 mn = pts_[0], mx = pts_[0];
    for (const auto& p : pts_) {
      mn = mn.cwiseMin(p);
      mx = mx.cwiseMax(p);
    }
    center_ = 0.5 * (mn + mx);
    half_ = 0.5 * (mx - mn).maxCoeff();
    if (half_ <= 0.0) half_ = 1e-9;  // all points coincide
    std::vector<size_t> all(pts_.size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = i;
    root_ = build(std::move(all), center_, half_, 0);
  }

  bool empty() const { return pts_.empty(); }
  size_t size() const { return pts_.size(); }

  // Indices of points with lo <= p <= hi (componentwise), ascending.
  std::vector<size_t> query_box(const Vec3& lo, const Vec3& hi) const {
    std::vector<size_t> out;
    if (root_ >= 0) query(root_, center_, half_, lo, hi, out);
    std::sort(out.begin(), out.end());
    return out;
  }

  int depth() const { return max_depth_; }
  size_t leaf_count() const { return leaf_count_; }
  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<size_t> indices;  // leaves only
    std::array<int, 8> children{-1, -1, -1, -1, -1, -1, -1, -1};
    bool is_leaf = true;
  };

  static constexpr int kMaxDepth = 32;  // duplicate-point guard

  int build(std::vector<size_t> idx, const Vec3& center, double half, int depth) {
    int id = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    max_depth_ = std::max(max_depth_, depth);
    if (static_cast<int>(idx.size()) <= leaf_capacity_ || depth >= kMaxDepth) {
      nodes_[id].indices = std::move(idx);
      ++leaf_count_;
      return id;
    }
    nodes_[id].is_leaf = false;
    std::array<std::vector<size_t>, 8> parts;
    for (size_t i : idx) parts[octant(pts_[i], center)].push_back(i);
    for (int o = 0; o < 8; ++o) {
      if (parts[o].empty()) continue;
      Vec3 c = child_center(center, half, o);
      int child = build(std::move(parts[o]), c, 0.5 * half, depth + 1);
      nodes_[id].children[o] = child;
    }
    return id;
  }

  static int octant(const Vec3& p, const Vec3& c) {
    return (p.x() >= c.x() ? 1 : 0) | (p.y() >= c.y() ? 2 : 0) | (p.z() >= c.z() ? 4 : 0);
  }

  static Vec3 child_center(const Vec3& c, double half, int o) {
    double q = 0.5 * half;
    return Vec3(c.x() + ((o & 1) ? q : -q), c.y() + ((o & 2) ? q : -q),
                c.z() + ((o & 4) ? q : -q));
  }

  void query(int id, const Vec3& center, double half, const Vec3& lo, const Vec3& hi,
             std::vector<size_t>& out) const {
    // node cube vs query box overlap
    for (int a = 0; a < 3; ++a)
      if (center[a] + half < lo[a] || center[a] - half > hi[a]) return;
    const Node& n = nodes_[id];
    if (n.is_leaf) {
      for (size_t i : n.indices) {
        const Vec3& p = pts_[i];
        if (p.x() >= lo.x() && p.x() <= hi.x() && p.y() >= lo.y() && p.y() <= hi.y() &&
            p.z() >= lo.z() && p.z() <= hi.z())
          out.push_back(i);
      }
      return;
    }
    for (int o = 0; o < 8; ++o)
      if (n.children[o] >= 0) query(n.children[o], child_center(center, half, o), 0.5 * half, lo, hi, out);
  }

  std::vector<Vec3> pts_;
  int leaf_capacity_;
  Vec3 center_ = Vec3::Zero();
  double half_ = 0.0;
  std::vector<Node> nodes_;
  int root_ = -1;
  int max_depth_ = 0;
  size_t leaf_count_ = 0;
};

}  // namespace cogmap
