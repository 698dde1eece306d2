#include "cogmap/octree.hpp"

#include <catch_amalgamated.hpp>

using namespace cogmap;

TEST_CASE("octree empty cloud yields empty root") {
  Octree tree({});
  REQUIRE(tree.empty());
  REQUIRE(tree.query_box(Vec3(-1, -1, -1), Vec3(1, 1, 1)).empty());
}

TEST_CASE("octree below capacity stays a single leaf") {
  std::vector<Vec3> pts;
  for (int i = 0; i < 50; ++i) pts.emplace_back(i * 0.01, 0, 0);
  Octree tree(pts, 64);
  REQUIRE(tree.leaf_count() == 1);
  REQUIRE(tree.depth() == 0);
}

TEST_CASE("octree range query equals brute force") {
  Rng rng(404);
  std::vector<Vec3> pts;
  for (int i = 0; i < 5000; ++i)
    pts.emplace_back(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3));
  Octree tree(pts, 32);
  for (int q = 0; q < 100; ++q) {
    Vec3 a(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3));
    Vec3 b(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3));
    Vec3 lo = a.cwiseMin(b), hi = a.cwiseMax(b);
    std::vector<size_t> expect;
    for (size_t i = 0; i < pts.size(); ++i) {
      const Vec3& p = pts[i];
      if (p.x() >= lo.x() && p.x() <= hi.x() && p.y() >= lo.y() && p.y() <= hi.y() &&
          p.z() >= lo.z() && p.z() <= hi.z())
        expect.push_back(i);
    }
    REQUIRE(tree.query_box(lo, hi) == expect);
  }
}

TEST_CASE("octree splits past leaf capacity") {
  Rng rng(7);
  std::vector<Vec3> pts;
  for (int i = 0; i < 1000; ++i)
    pts.emplace_back(rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1));
  Octree tree(pts, 16);
  REQUIRE(tree.depth() >= 2);
  REQUIRE(tree.leaf_count() > 8);
}

TEST_CASE("octree tolerates duplicate points") {
  std::vector<Vec3> pts(500, Vec3(1, 2, 3));
  Octree tree(pts, 8);
  auto hits = tree.query_box(Vec3(0, 0, 0), Vec3(5, 5, 5));
  REQUIRE(hits.size() == 500);
}
