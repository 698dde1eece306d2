#include "cogmap/geometry.hpp"

#include <catch_amalgamated.hpp>

using namespace cogmap;

namespace {

Intrinsics make_k(double fx, double fy, double cx, double cy, int w, int h) {
  Intrinsics k{fx, fy, cx, cy, w, h};
  k.validate();
  return k;
}

Pose random_pose(Rng& rng, double max_angle = 3.0, double max_trans = 5.0) {
  Vec3 axis(rng.gaussian(), rng.gaussian(), rng.gaussian());
  if (axis.norm() < 1e-12) axis = Vec3::UnitX();
  axis.normalize();
  double angle = rng.uniform(-max_angle, max_angle);
  Vec3 t(rng.uniform(-max_trans, max_trans), rng.uniform(-max_trans, max_trans),
         rng.uniform(-max_trans, max_trans));
  return Pose{so3_exp(angle * axis), t};
}

}  // namespace

TEST_CASE("unproject trivial rays") {
  auto k = make_k(100, 100, 32, 24, 64, 48);
  DepthMap d(64, 48);
  d.values(32, 24) = 2.0f;
  d.valid(32, 24) = 1;
  d.values(48, 24) = 1.0f;  // not used in first check
  d.valid(48, 24) = 1;
  auto pm = unproject(d, k);
  REQUIRE(pm.frame == PointFrame::camera);
  REQUIRE(pm.points(32, 24).isApprox(Vec3(0, 0, 2), 1e-12));
  // invalid pixels are non-finite
  REQUIRE_FALSE(pm.valid_at(0, 0));
}

TEST_CASE("unproject unit-tangent pixel") {
  auto k = make_k(100, 100, 100, 100, 320, 240);
  DepthMap d(320, 240);
  d.values(200, 100) = 1.0f;  // cx + 100
  d.valid(200, 100) = 1;
  auto pm = unproject(d, k);
  REQUIRE(pm.points(200, 100).isApprox(Vec3(1, 0, 1), 1e-12));
}

TEST_CASE("unproject rejects mismatched dims") {
  auto k = make_k(100, 100, 32, 24, 64, 48);
  DepthMap d(32, 48);
  REQUIRE_THROWS_AS(unproject(d, k), ShapeError);
}

TEST_CASE("project trivial cases") {
  auto k = make_k(100, 80, 320, 240, 640, 480);
  auto p1 = project(Vec3(0, 0, 5), k);
  REQUIRE_FALSE(p1.behind);
  REQUIRE(p1.pixel.isApprox(Vec2(320, 240), 1e-12));

  auto p2 = project(Vec3(1, 0, 1), k);
  REQUIRE(p2.pixel.isApprox(Vec2(420, 240), 1e-12));

  auto p3 = project(Vec3(0, 0, -1), k);
  REQUIRE(p3.behind);
}

TEST_CASE("project o unproject is identity on valid pixels") {
  Rng rng(1234);
  for (int trial = 0; trial < 50; ++trial) {
    int w = rng.uniform_int(16, 128), h = rng.uniform_int(16, 128);
    auto k = make_k(rng.uniform(50, 400), rng.uniform(50, 400), rng.uniform(0, w - 1),
                    rng.uniform(0, h - 1), w, h);
    DepthMap d(w, h);
    int x = rng.uniform_int(0, w - 1), y = rng.uniform_int(0, h - 1);
    d.values(x, y) = static_cast<float>(rng.uniform(0.1, 20.0));
    d.valid(x, y) = 1;
    auto pm = unproject(d, k);
    auto pr = project(pm.points(x, y), k);
    REQUIRE_FALSE(pr.behind);
    REQUIRE(std::abs(pr.pixel.x() - x) < 1e-6);
    REQUIRE(std::abs(pr.pixel.y() - y) < 1e-6);
  }
}

TEST_CASE("se3 trivial identities") {
  Rng rng(7);
  Pose t = random_pose(rng);
  REQUIRE(se3_diff(t, t).norm() < 1e-12);
  Pose e = se3_exp(Vec6::Zero());
  REQUIRE((e.matrix() - Mat4::Identity()).norm() < 1e-15);
  Pose prod = se3_compose(t, se3_inverse(t));
  REQUIRE((prod.matrix() - Mat4::Identity()).norm() < 1e-9);
}

TEST_CASE("se3 exp/log round trip") {
  Rng rng(99);
  for (int i = 0; i < 200; ++i) {
    Vec6 xi;
    for (int j = 0; j < 6; ++j) xi[j] = rng.uniform(-2.0, 2.0);
    // keep the rotation part below pi
    double wn = xi.tail<3>().norm();
    double cap = M_PI - 1e-3;
    if (wn > cap) xi.tail<3>() *= cap / wn;
    Pose t = se3_exp(xi);
    REQUIRE(t.is_valid(1e-9));
    Vec6 back = se3_log(t);
    REQUIRE((back - xi).norm() < 1e-9);
  }
}

TEST_CASE("se3 group laws") {
  Rng rng(2024);
  for (int i = 0; i < 50; ++i) {
    Pose a = random_pose(rng), b = random_pose(rng), c = random_pose(rng);
    Mat4 lhs = ((a * b) * c).matrix();
    Mat4 rhs = (a * (b * c)).matrix();
    REQUIRE((lhs - rhs).norm() < 1e-9);
    REQUIRE((a * b).is_valid(1e-9));
    REQUIRE(se3_diff(a, b).allFinite());
    // diff definition: b = a * exp(diff)
    Pose recon = a * se3_exp(se3_diff(a, b));
    REQUIRE((recon.matrix() - b.matrix()).norm() < 1e-9);
  }
}

TEST_CASE("so3 log stable near pi") {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    Vec3 axis(rng.gaussian(), rng.gaussian(), rng.gaussian());
    axis.normalize();
    for (double angle : {M_PI - 1e-13, M_PI, M_PI - 1e-9}) {
      Mat3 r = so3_exp(angle * axis);
      Vec3 phi = so3_log(r);
      REQUIRE(phi.allFinite());
      REQUIRE((so3_exp(phi) - r).norm() < 1e-9);
    }
  }
}

TEST_CASE("se3 inverse left Jacobian matches finite differences") {
  Rng rng(31);
  const double h = 1e-6;
  for (int trial = 0; trial < 30; ++trial) {
    Vec6 xi;
    for (int j = 0; j < 6; ++j) xi[j] = rng.uniform(-1.5, 1.5);
    double wn = xi.tail<3>().norm();
    if (wn > 2.5) xi.tail<3>() *= 2.5 / wn;
    Pose t = se3_exp(xi);
    Mat6 analytic = se3_left_jacobian_inv(xi);
    Mat6 fd;
    for (int c = 0; c < 6; ++c) {
      Vec6 eps = Vec6::Zero();
      eps[c] = h;
      Vec6 plus = se3_log(se3_exp(eps) * t);
      Vec6 minus = se3_log(se3_exp(Vec6(-eps)) * t);
      fd.col(c) = (plus - minus) / (2.0 * h);
    }
    REQUIRE((fd - analytic).norm() < 1e-5 * std::max(1.0, analytic.norm()));
  }
}

TEST_CASE("ego_flow is zero under identity relative pose") {
  auto k = make_k(100, 100, 32, 24, 64, 48);
  DepthMap d(64, 48);
  Rng rng(11);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 64; ++x) {
      d.values(x, y) = static_cast<float>(rng.uniform(0.5, 5.0));
      d.valid(x, y) = 1;
    }
  Pose e;  // same pose for both frames
  auto ef = ego_flow(d, k, k, e, e);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 64; ++x) {
      REQUIRE(ef.valid(x, y) == 1);
      REQUIRE(std::abs(ef.flow.u(x, y)) < 1e-9f);
      REQUIRE(std::abs(ef.flow.v(x, y)) < 1e-9f);
    }
}

TEST_CASE("ego_flow closed form under pure x translation") {
  // Camera translated +tx along world x; constant depth d.
  // Expected u = -fx * tx / d at every pixel that stays in frame.
  auto k = make_k(100, 100, 32, 24, 64, 48);
  const double tx = 0.1, depth = 2.0;
  DepthMap d(64, 48);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 64; ++x) {
      d.values(x, y) = static_cast<float>(depth);
      d.valid(x, y) = 1;
    }
  Pose e_t;                                          // world == camera at t
  Pose cam2world{Mat3::Identity(), Vec3(tx, 0, 0)};  // camera moved +tx
  Pose e_t2 = cam2world.inverse();
  auto ef = ego_flow(d, k, k, e_t, e_t2);
  double expect_u = -k.fx * tx / depth;
  int checked = 0;
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 64; ++x) {
      if (!ef.valid(x, y)) continue;
      ++checked;
      REQUIRE(std::abs(ef.flow.u(x, y) - expect_u) < 1e-6);
      REQUIRE(std::abs(ef.flow.v(x, y)) < 1e-9);
    }
  REQUIRE(checked > 1000);
}

TEST_CASE("rigid_align recovers a known transform") {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    Pose gt = random_pose(rng, 1.0, 2.0);
    std::vector<Vec3> src, dst;
    for (int i = 0; i < 40; ++i) {
      Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
      src.push_back(p);
      dst.push_back(gt * p);
    }
    Pose est = rigid_align(src, dst);
    REQUIRE((est.matrix() - gt.matrix()).norm() < 1e-9);
  }
}

TEST_CASE("rigid_align honors weights") {
  // Outlier with zero weight must not perturb the fit.
  Rng rng(78);
  Pose gt = random_pose(rng, 0.5, 1.0);
  std::vector<Vec3> src, dst;
  std::vector<double> w;
  for (int i = 0; i < 20; ++i) {
    Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    src.push_back(p);
    dst.push_back(gt * p);
    w.push_back(1.0);
  }
  src.push_back(Vec3(100, 100, 100));
  dst.push_back(Vec3(-50, 0, 3));
  w.push_back(0.0);
  Pose est = rigid_align(src, dst, &w);
  REQUIRE((est.matrix() - gt.matrix()).norm() < 1e-9);
}
