#pragma once

// Camera model, SE(3) manifold operations, pointmaps and ego-flow.
//
// Conventions used across the whole library:
//  * Extrinsics E map world to camera: p_cam = E * p_world. Trajectory export
//    and the factor graph work with the inverse (camera-to-world) and say so
//    where they do.
//  * Pixels sample at integer coordinates, no half-pixel offset:
//    P(x,y) = D(x,y) * [(x-cx)/fx, (y-cy)/fy, 1].
//  * se(3) tangent vectors are [rho; phi] — translation block first,
//    rotation block second. exp([rho; phi]) = (exp(phi^), Jl(phi) * rho).
//  * Depths that are non-positive or non-finite mark invalid pixels and are
//    excluded from every downstream cue and landmark pool.

#include <cmath>
#include <limits>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include "cogmap/core.hpp"

namespace cogmap {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Mat6 = Eigen::Matrix<double, 6, 6>;

struct Intrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const {
    if (!(fx > 0) || !(fy > 0)) throw ShapeError("Intrinsics: focal lengths must be positive");
    if (!(cx >= 0 && cx < width) || !(cy >= 0 && cy < height))
      throw ShapeError("Intrinsics: principal point outside image");
  }
};

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

// Project R onto SO(3) via SVD (nearest rotation in Frobenius norm).
inline Mat3 orthonormalize_rotation(const Mat3& r) {
  Eigen::JacobiSVD<Mat3> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU(), v = svd.matrixV();
  Mat3 out = u * v.transpose();
  if (out.determinant() < 0) {
    u.col(2) *= -1.0;
    out = u * v.transpose();
  }
  return out;
}

struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return Pose{}; }

  Vec3 operator*(const Vec3& p) const { return rotation * p + translation; }

  Pose operator*(const Pose& o) const {
    return Pose{rotation * o.rotation, rotation * o.translation + translation};
  }

  Pose inverse() const {
    Mat3 rt = rotation.transpose();
    return Pose{rt, -(rt * translation)};
  }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = translation;
    return m;
  }

  static Pose from_matrix(const Mat4& m) {
    return Pose{m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>()};
  }

  // Orthonormality within tol (Frobenius) and det = +1 within tol.
  bool is_valid(double tol = 1e-9) const {
    if (!translation.allFinite() || !rotation.allFinite()) return false;
    double ortho = (rotation.transpose() * rotation - Mat3::Identity()).norm();
    return ortho <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
  }
};

inline Pose se3_compose(const Pose& a, const Pose& b) { return a * b; }
inline Pose se3_inverse(const Pose& a) { return a.inverse(); }

// ---------------------------------------------------------------------------
// SO(3) exp/log and left Jacobians, with Taylor branches for small angles.

inline Mat3 so3_exp(const Vec3& phi) {
  double t2 = phi.squaredNorm();
  double t = std::sqrt(t2);
  double a, b;  // sin(t)/t, (1-cos(t))/t^2
  if (t < 1e-5) {
    a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
    b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
  } else {
    a = std::sin(t) / t;
    b = (1.0 - std::cos(t)) / t2;
  }
  Mat3 k = skew(phi);
  return Mat3::Identity() + a * k + b * k * k;
}

// Quaternion-based log: stable for all angles including within 1e-12 of pi.
inline Vec3 so3_log(const Mat3& r) {
  Eigen::Quaterniond q(r);
  q.normalize();
  if (q.w() < 0) q.coeffs() *= -1.0;  // angle in [0, pi]
  double vn = q.vec().norm();
  double angle = 2.0 * std::atan2(vn, q.w());
  if (vn < 1e-12) {
    // angle ~ 0: vec ~ phi/2
    return 2.0 * q.vec();
  }
  return (angle / vn) * q.vec();
}

inline Mat3 so3_left_jacobian(const Vec3& phi) {
  double t2 = phi.squaredNorm();
  double t = std::sqrt(t2);
  double b, c;  // (1-cos t)/t^2, (t - sin t)/t^3
  if (t < 1e-5) {
    b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
    c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0;
  } else {
    b = (1.0 - std::cos(t)) / t2;
    c = (t - std::sin(t)) / (t2 * t);
  }
  Mat3 k = skew(phi);
  return Mat3::Identity() + b * k + c * k * k;
}

inline Mat3 so3_left_jacobian_inv(const Vec3& phi) {
  double t2 = phi.squaredNorm();
  double t = std::sqrt(t2);
  double c;  // 1/t^2 - cot(t/2)/(2t), series 1/12 + t^2/720 + t^4/30240
  if (t < 1e-4) {
    c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0;
  } else {
    c = 1.0 / t2 - std::cos(0.5 * t) / (2.0 * t * std::sin(0.5 * t));
  }
  Mat3 k = skew(phi);
  return Mat3::Identity() - 0.5 * k + c * k * k;
}

// ---------------------------------------------------------------------------
// SE(3) exp/log, adjoint, and the inverse left Jacobian (Q-matrix form).

inline Pose se3_exp(const Vec6& xi) {
  Vec3 rho = xi.head<3>(), phi = xi.tail<3>();
  return Pose{so3_exp(phi), so3_left_jacobian(phi) * rho};
}

inline Vec6 se3_log(const Pose& a) {
  Vec3 phi = so3_log(a.rotation);
  Vec6 xi;
  xi.head<3>() = so3_left_jacobian_inv(phi) * a.translation;
  xi.tail<3>() = phi;
  return xi;
}

// se3_diff(a, b) = log(a^-1 * b): the tangent that takes a to b.
inline Vec6 se3_diff(const Pose& a, const Pose& b) { return se3_log(a.inverse() * b); }

// Adjoint for the [rho; phi] ordering: Exp(Adj_T * xi) = T * Exp(xi) * T^-1.
inline Mat6 se3_adjoint(const Pose& a) {
  Mat6 adj = Mat6::Zero();
  adj.topLeftCorner<3, 3>() = a.rotation;
  adj.bottomRightCorner<3, 3>() = a.rotation;
  adj.topRightCorner<3, 3>() = skew(a.translation) * a.rotation;
  return adj;
}

namespace detail {

// Q block of the SE(3) left Jacobian (Barfoot's closed form).
inline Mat3 se3_q_matrix(const Vec3& rho, const Vec3& phi) {
  double t2 = phi.squaredNorm();
  double t = std::sqrt(t2);
  double c1, c2, c3;  // see series below for the small-angle limits
  if (t < 1e-4) {
    c1 = 1.0 / 6.0 - t2 / 120.0;            // (t - sin t)/t^3
    c2 = -1.0 / 24.0 + t2 / 720.0;          // (1 - t^2/2 - cos t)/t^4
    c3 = -1.0 / 120.0 + t2 / 5040.0;        // (t - sin t - t^3/6)/t^5
  } else {
    double t4 = t2 * t2;
    c1 = (t - std::sin(t)) / (t2 * t);
    c2 = (1.0 - 0.5 * t2 - std::cos(t)) / t4;
    c3 = (t - std::sin(t) - t2 * t / 6.0) / (t4 * t);
  }
  Mat3 rx = skew(rho), px = skew(phi);
  Mat3 m1 = px * rx + rx * px + px * rx * px;
  Mat3 m2 = px * px * rx + rx * px * px - 3.0 * px * rx * px;
  Mat3 m3 = px * rx * px * px + px * px * rx * px;
  return 0.5 * rx + c1 * m1 - c2 * m2 - 0.5 * (c2 - 3.0 * c3) * m3;
}

}  // namespace detail

// Inverse left Jacobian of SE(3): log(Exp(eps) * Exp(xi)) ~ xi + Jl_inv(xi) * eps.
inline Mat6 se3_left_jacobian_inv(const Vec6& xi) {
  Vec3 rho = xi.head<3>(), phi = xi.tail<3>();
  Mat3 jinv = so3_left_jacobian_inv(phi);
  Mat3 q = detail::se3_q_matrix(rho, phi);
  Mat6 out = Mat6::Zero();
  out.topLeftCorner<3, 3>() = jinv;
  out.bottomRightCorner<3, 3>() = jinv;
  out.topRightCorner<3, 3>() = -jinv * q * jinv;
  return out;
}

// ---------------------------------------------------------------------------
// Image-domain types.

struct DepthMap {
  Grid<float> values;
  MaskGrid valid;

  DepthMap() = default;
  DepthMap(int w, int h) : values(w, h, 0.f), valid(w, h, 0) {}

  // Validity derived from the data: positive and finite.
  static DepthMap from_values(Grid<float> v) {
    DepthMap d;
    d.valid = MaskGrid(v.width(), v.height(), 0);
    for (int y = 0; y < v.height(); ++y)
      for (int x = 0; x < v.width(); ++x)
        d.valid(x, y) = (std::isfinite(v(x, y)) && v(x, y) > 0.f) ? 1 : 0;
    d.values = std::move(v);
    return d;
  }
};

enum class PointFrame { camera, world };

// Invalid pixels hold non-finite entries, exactly where the depth is invalid.
struct PointMap {
  Grid<Vec3> points;
  PointFrame frame = PointFrame::camera;

  bool valid_at(int x, int y) const { return points(x, y).allFinite(); }
};

struct FlowField {
  Grid<float> u, v;

  FlowField() = default;
  FlowField(int w, int h) : u(w, h, 0.f), v(w, h, 0.f) {}
  int width() const { return u.width(); }
  int height() const { return u.height(); }
};

// ---------------------------------------------------------------------------
// Pinhole operations.

inline PointMap unproject(const DepthMap& depth, const Intrinsics& k) {
  if (depth.values.width() != k.width || depth.values.height() != k.height)
    throw ShapeError("unproject: depth dimensions do not match intrinsics");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  PointMap pm;
  pm.frame = PointFrame::camera;
  pm.points = Grid<Vec3>(k.width, k.height, Vec3::Constant(nan));
  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      if (!depth.valid(x, y)) continue;
      double d = depth.values(x, y);
      pm.points(x, y) = Vec3(d * (x - k.cx) / k.fx, d * (y - k.cy) / k.fy, d);
    }
  }
  return pm;
}

struct Projection {
  Vec2 pixel = Vec2::Zero();
  bool behind = false;  // Z at or below eps_z: caller must discard
};

inline Projection project(const Vec3& p, const Intrinsics& k, double eps_z = 1e-6) {
  Projection out;
  if (!(p.z() > eps_z)) {
    out.behind = true;
    return out;
  }
  out.pixel = Vec2(k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy);
  return out;
}

struct EgoFlowResult {
  FlowField flow;
  MaskGrid valid;
};

// Expected flow of a static scene from camera motion alone: for each valid
// pixel of frame t, project its 3-D point into frame t2 and subtract.
// Invalid where depth is invalid, the reprojection falls behind the camera,
// or it lands outside frame t2.
inline EgoFlowResult ego_flow(const DepthMap& depth_t, const Intrinsics& k_t,
                              const Intrinsics& k_t2, const Pose& e_t, const Pose& e_t2) {
  PointMap pm = unproject(depth_t, k_t);
  Pose rel = e_t2 * e_t.inverse();  // camera t -> camera t2
  EgoFlowResult out;
  out.flow = FlowField(k_t.width, k_t.height);
  out.valid = MaskGrid(k_t.width, k_t.height, 0);
  for (int y = 0; y < k_t.height; ++y) {
    for (int x = 0; x < k_t.width; ++x) {
      if (!pm.valid_at(x, y)) continue;
      Projection pr = project(rel * pm.points(x, y), k_t2);
      if (pr.behind) continue;
      const double edge = 1e-6;  // tolerate roundoff at the last row/column
      if (pr.pixel.x() < -edge || pr.pixel.x() > k_t2.width - 1 + edge || pr.pixel.y() < -edge ||
          pr.pixel.y() > k_t2.height - 1 + edge)
        continue;
      out.flow.u(x, y) = static_cast<float>(pr.pixel.x() - x);
      out.flow.v(x, y) = static_cast<float>(pr.pixel.y() - y);
      out.valid(x, y) = 1;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rigid point-set alignment (Kabsch/Umeyama without scale), optional weights.
// Returns the pose minimizing sum w_i |T(src_i) - dst_i|^2.

inline Pose rigid_align(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                        const std::vector<double>* weights = nullptr) {
  if (src.size() != dst.size()) throw ShapeError("rigid_align: size mismatch");
  if (src.size() < 2) throw DegenerateInputError("rigid_align: need at least 2 pairs");
  double wsum = 0.0;
  Vec3 cs = Vec3::Zero(), cd = Vec3::Zero();
  for (size_t i = 0; i < src.size(); ++i) {
    double w = weights ? (*weights)[i] : 1.0;
    cs += w * src[i];
    cd += w * dst[i];
    wsum += w;
  }
  if (!(wsum > 0)) throw DegenerateInputError("rigid_align: non-positive total weight");
  cs /= wsum;
  cd /= wsum;
  Mat3 h = Mat3::Zero();
  for (size_t i = 0; i < src.size(); ++i) {
    double w = weights ? (*weights)[i] : 1.0;
    h += w * (src[i] - cs) * (dst[i] - cd).transpose();
  }
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU(), v = svd.matrixV();
  Mat3 r = v * u.transpose();
  if (r.determinant() < 0) {
    v.col(2) *= -1.0;
    r = v * u.transpose();
  }
  return Pose{r, cd - r * cs};
}

}  // namespace cogmap
