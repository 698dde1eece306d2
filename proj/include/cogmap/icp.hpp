#pragma once

// Point-to-point ICP with k-d tree correspondences and closed-form rigid
// fits (Kabsch/Umeyama without scale). Used for geometric verification
// during memory recall and for relocalization transform estimation.

#include <vector>

#include "cogmap/core.hpp"
#include "cogmap/geometry.hpp"
#include "cogmap/kdtree.hpp"

namespace cogmap {

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<double> confidence;  // empty, or one weight in [0,1] per point

  size_t size() const { return points.size(); }
  bool has_confidence() const { return !confidence.empty(); }

  void validate() const {
    for (const auto& p : points)
      if (!p.allFinite()) throw ShapeError("PointCloud: non-finite coordinates");
    if (!confidence.empty() && confidence.size() != points.size())
      throw ShapeError("PointCloud: confidence size mismatch");
  }

  Vec3 centroid() const {
    Vec3 c = Vec3::Zero();
    for (const auto& p : points) c += p;
    return points.empty() ? c : Vec3(c / static_cast<double>(points.size()));
  }

  // Bounding-box diagonal; the scale used by every relative threshold.
  double diameter() const {
    if (points.empty()) return 0.0;
    Vec3 mn = points[0], mx = points[0];
    for (const auto& p : points) {
      mn = mn.cwiseMin(p);
      mx = mx.cwiseMax(p);
    }
    return (mx - mn).norm();
  }
};

struct IcpIterationStats {
  size_t correspondences = 0;
  double mean_dist_before = 0.0;  // on the iteration's fixed correspondence set
  double mean_dist_after = 0.0;
};

struct AlignmentResult {
  Pose transform;  // maps source points into the target frame
  size_t inlier_count = 0;
  double rmse = 0.0;
  int iterations = 0;
  bool accepted = false;
  bool converged = false;
  std::vector<IcpIterationStats> trace;
};

struct IcpOptions {
  int max_iter = 50;
  double corr_dist = 0.0;    // <=0: auto, 5% of target diameter
  double inlier_dist = 0.0;  // <=0: auto, 2% of target diameter
  double update_tol = 1e-6;  // |log(incremental update)| convergence gate
};

// Iterates gated NN correspondences and incremental rigid fits from `init`.
// Source confidences (and target confidences, at the matched points) weight
// the fit. inlier_count and rmse are recomputed from scratch at the returned
// transform. `accepted` here means the iteration mechanism succeeded;
// recall-verification policy thresholds are applied by the caller.
inline AlignmentResult icp_align(const PointCloud& source, const PointCloud& target,
                                 const Pose& init, const IcpOptions& opts = {}) {
  if (source.size() < 3 || target.size() < 3)
    throw DegenerateInputError("icp_align: need at least 3 points per cloud");

  const double diam = target.diameter();
  const double corr_dist = opts.corr_dist > 0 ? opts.corr_dist : 0.05 * diam;
  const double inlier_dist = opts.inlier_dist > 0 ? opts.inlier_dist : 0.02 * diam;

  KdTree3 tree(target.points);
  AlignmentResult out;
  out.transform = init;

  std::vector<Vec3> src, dst;
  std::vector<double> w;
  for (int iter = 0; iter < opts.max_iter; ++iter) {
    src.clear();
    dst.clear();
    w.clear();
    double dist_sum = 0.0;
    for (size_t i = 0; i < source.size(); ++i) {
      Vec3 p = out.transform * source.points[i];
      auto hit = tree.nearest(p);
      double d = std::sqrt(hit.dist2);
      if (d > corr_dist) continue;
      src.push_back(p);
      dst.push_back(target.points[hit.index]);
      double wi = source.has_confidence() ? source.confidence[i] : 1.0;
      if (target.has_confidence()) wi *= target.confidence[hit.index];
      w.push_back(wi);
      dist_sum += d;
    }
    out.iterations = iter + 1;
    if (src.size() < 3) {
      out.accepted = false;
      return out;
    }

    IcpIterationStats stats;
    stats.correspondences = src.size();
    stats.mean_dist_before = dist_sum / static_cast<double>(src.size());

    Pose delta = rigid_align(src, dst, &w);
    out.transform = delta * out.transform;
    out.transform.rotation = orthonormalize_rotation(out.transform.rotation);

    double after = 0.0;
    for (size_t i = 0; i < src.size(); ++i) after += (delta * src[i] - dst[i]).norm();
    stats.mean_dist_after = after / static_cast<double>(src.size());
    out.trace.push_back(stats);

    if (se3_log(delta).norm() < opts.update_tol) {
      out.converged = true;
      break;
    }
  }

  // Final bookkeeping from scratch at the returned transform.
  double se = 0.0;
  size_t inliers = 0;
  for (size_t i = 0; i < source.size(); ++i) {
    Vec3 p = out.transform * source.points[i];
    auto hit = tree.nearest(p);
    double d = std::sqrt(hit.dist2);
    if (d < inlier_dist) {
      ++inliers;
      se += hit.dist2;
    }
  }
  out.inlier_count = inliers;
  out.rmse = inliers ? std::sqrt(se / static_cast<double>(inliers)) : 0.0;
  out.accepted = inliers >= 3;
  return out;
}

}  // namespace cogmap
