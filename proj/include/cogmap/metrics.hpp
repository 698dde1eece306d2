#pragma once

// Trajectory and mask evaluation: ATE (rigid SE(3) alignment, no scale),
// RPE over fixed frame gaps, and mask IoU. Trajectories are camera-to-world.

#include <vector>

#include "cogmap/core.hpp"
#include "cogmap/geometry.hpp"

namespace cogmap {

// Umeyama alignment (rotation + translation) of est onto gt, then RMSE of
// the translation differences.
inline double ate_rmse(const std::vector<Pose>& est, const std::vector<Pose>& gt) {
  if (est.size() != gt.size()) throw ShapeError("ate: trajectory length mismatch");
  if (est.size() < 2) throw DegenerateInputError("ate: need at least 2 poses");
  std::vector<Vec3> p, q;
  for (size_t i = 0; i < est.size(); ++i) {
    p.push_back(est[i].translation);
    q.push_back(gt[i].translation);
  }
  Pose align = rigid_align(p, q);
  double se = 0.0;
  for (size_t i = 0; i < p.size(); ++i) se += (align * p[i] - q[i]).squaredNorm();
  return std::sqrt(se / static_cast<double>(p.size()));
}

struct RpeResult {
  double trans = 0.0;  // meters, RMSE
  double rot_deg = 0.0;
};

inline RpeResult rpe(const std::vector<Pose>& est, const std::vector<Pose>& gt, int delta = 1) {
  if (est.size() != gt.size()) throw ShapeError("rpe: trajectory length mismatch");
  if (delta < 1 || est.size() <= static_cast<size_t>(delta))
    throw DegenerateInputError("rpe: frame gap exceeds trajectory");
  double se_t = 0.0, se_r = 0.0;
  size_t n = est.size() - delta;
  for (size_t i = 0; i < n; ++i) {
    Pose rel_est = est[i].inverse() * est[i + delta];
    Pose rel_gt = gt[i].inverse() * gt[i + delta];
    Vec6 err = se3_diff(rel_gt, rel_est);
    se_t += err.head<3>().squaredNorm();
    se_r += err.tail<3>().squaredNorm();
  }
  return {std::sqrt(se_t / n), std::sqrt(se_r / n) * 180.0 / M_PI};
}

// |intersection| / |union|; two empty masks count as a perfect match.
inline double mask_iou(const MaskGrid& pred, const MaskGrid& gt) {
  if (!pred.same_size(gt)) throw ShapeError("mask_iou: size mismatch");
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    bool a = pred.data()[i], b = gt.data()[i];
    inter += (a && b);
    uni += (a || b);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace cogmap
