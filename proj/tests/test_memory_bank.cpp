#include "cogmap/memory_bank.hpp"

#include <catch_amalgamated.hpp>
#include <set>

using namespace cogmap;

namespace {

FeatureVec random_visual(Rng& rng, double scale = 1.0) {
  FeatureVec f;
  f.kind = FeatureVec::Kind::visual2d;
  f.values.resize(FeatureVec::kVisualDim);
  for (auto& v : f.values) v = static_cast<float>(scale * rng.gaussian());
  return f;
}

FeatureVec near_feature(const FeatureVec& base, Rng& rng, double sigma) {
  FeatureVec f = base;
  for (auto& v : f.values) v += static_cast<float>(sigma * rng.gaussian());
  return f;
}

PointCloud box_cloud(Rng& rng, size_t n, const Vec3& center, double extent) {
  PointCloud c;
  for (size_t i = 0; i < n; ++i)
    c.points.push_back(center + Vec3(rng.uniform(-extent, extent), rng.uniform(-extent, extent),
                                     rng.uniform(-extent, extent)));
  return c;
}

// the scene stand-in for recall tests: a few oriented rectangles keyed by a
// scene seed; surface structure keeps wrong-scene ICP verification honest
PointCloud scene_cloud(std::uint64_t scene_seed, std::uint64_t sample_seed, size_t n = 3000) {
  Rng layout(scene_seed);
  struct Rect {
    Vec3 origin, u, v;
  };
  std::vector<Rect> rects;
  for (int i = 0; i < 4; ++i) {
    Vec3 axis(layout.gaussian(), layout.gaussian(), layout.gaussian());
    axis.normalize();
    Mat3 r = so3_exp(layout.uniform(0, 3.0) * axis);
    Vec3 origin(layout.uniform(-1.5, 1.5), layout.uniform(-1.5, 1.5), layout.uniform(-1.5, 1.5));
    rects.push_back({origin, r.col(0) * layout.uniform(0.8, 2.0), r.col(1) * layout.uniform(0.8, 2.0)});
  }
  Rng rng(sample_seed);
  PointCloud c;
  for (size_t i = 0; i < n; ++i) {
    const Rect& rect = rects[rng.index(rects.size())];
    c.points.push_back(rect.origin + rng.uniform() * rect.u + rng.uniform() * rect.v);
  }
  return c;
}

}  // namespace

TEST_CASE("voxel_downsample collapses a single cell to its centroid") {
  PointCloud c;
  c.points = {Vec3(0.01, 0.01, 0.01), Vec3(0.02, 0.03, 0.01), Vec3(0.03, 0.02, 0.02)};
  PointCloud out = voxel_downsample(c, 1.0);
  REQUIRE(out.size() == 1);
  Vec3 mean = (c.points[0] + c.points[1] + c.points[2]) / 3.0;
  REQUIRE((out.points[0] - mean).norm() < 1e-12);
}

TEST_CASE("voxel_downsample keeps well-separated grid points") {
  PointCloud c;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) c.points.emplace_back(i * 2.0 + 0.5, j * 2.0 + 0.5, 0.5);
  PointCloud out = voxel_downsample(c, 1.0);
  REQUIRE(out.size() == c.size());
  // order-normalized: sorted by voxel key
  std::set<std::tuple<std::int64_t, std::int64_t, std::int64_t>> in_keys, out_keys;
  for (const auto& p : c.points) in_keys.insert(voxel_key(p, 1.0));
  for (const auto& p : out.points) out_keys.insert(voxel_key(p, 1.0));
  REQUIRE(in_keys == out_keys);
}

TEST_CASE("voxel_downsample equals brute-force bucketing on random data") {
  Rng rng(99);
  PointCloud c = box_cloud(rng, 10000, Vec3(0, 0, 0), 3.0);
  c.confidence.resize(c.size());
  for (auto& w : c.confidence) w = rng.uniform(0.1, 1.0);
  const double voxel = 0.4;
  PointCloud out = voxel_downsample(c, voxel);

  struct Acc {
    Vec3 sum = Vec3::Zero();
    double w = 0.0;
  };
  std::map<std::tuple<std::int64_t, std::int64_t, std::int64_t>, Acc> oracle;
  for (size_t i = 0; i < c.size(); ++i) {
    auto& acc = oracle[voxel_key(c.points[i], voxel)];
    acc.sum += c.confidence[i] * c.points[i];
    acc.w += c.confidence[i];
  }
  REQUIRE(out.size() == oracle.size());
  size_t i = 0;
  for (const auto& [key, acc] : oracle) {
    Vec3 centroid = acc.sum / acc.w;
    REQUIRE((out.points[i] - centroid).norm() == 0.0);  // same arithmetic, same order
    ++i;
  }
}

TEST_CASE("voxel grid bound: at most one output point per cell") {
  Rng rng(5);
  PointCloud c = box_cloud(rng, 5000, Vec3(1, -2, 0.5), 2.0);
  PointCloud out = voxel_downsample(c, 0.3);
  std::set<std::tuple<std::int64_t, std::int64_t, std::int64_t>> keys;
  for (const auto& p : out.points) REQUIRE(keys.insert(voxel_key(p, 0.3)).second);
}

TEST_CASE("select_keyframes greedy behavior") {
  // identical features: single keyframe
  FeatureVec base;
  base.kind = FeatureVec::Kind::visual2d;
  base.values.assign(FeatureVec::kVisualDim, 0.5f);
  std::vector<FeatureVec> same(5, base);
  REQUIRE(select_keyframes(same, 1.0) == std::vector<size_t>{0});

  // features on a line spaced exactly d_target: every frame kept
  std::vector<FeatureVec> line;
  for (int i = 0; i < 6; ++i) {
    FeatureVec f = base;
    f.values[0] = static_cast<float>(i * 2.0);
    line.push_back(f);
  }
  auto kept = select_keyframes(line, 2.0);
  REQUIRE(kept.size() == line.size());

  // random walk equals a reference greedy simulation
  Rng rng(17);
  std::vector<FeatureVec> walk;
  FeatureVec cur = base;
  for (int i = 0; i < 60; ++i) {
    walk.push_back(cur);
    for (auto& v : cur.values) v += static_cast<float>(0.02 * rng.gaussian());
  }
  double d_target = 0.3;
  auto chosen = select_keyframes(walk, d_target);
  std::vector<size_t> expect{0};
  for (size_t i = 1; i < walk.size(); ++i)
    if (feature_distance(walk[i].values, walk[expect.back()].values) >= d_target)
      expect.push_back(i);
  REQUIRE(chosen == expect);
  REQUIRE_THROWS_AS(select_keyframes({}, 0.5), EmptyInputError);
}

TEST_CASE("feature table exact query and ties") {
  Rng rng(21);
  FeatureTable table(123);
  std::vector<FeatureVec> feats;
  for (int i = 0; i < 100; ++i) {
    feats.push_back(random_visual(rng));
    table.insert(feats.back(), i % 7 + 1, i);
  }
  // query equal to a stored feature: that entry first at distance 0
  auto hits = table.query(feats[42], 3);
  REQUIRE(hits.size() == 3);
  REQUIRE(hits[0].distance == 0.0);
  REQUIRE(hits[0].frame_id == 42);
  // n larger than table: everything returned sorted
  auto all = table.query(feats[0], 1000);
  REQUIRE(all.size() == 100);
  for (size_t i = 1; i < all.size(); ++i) REQUIRE(all[i - 1].distance <= all[i].distance);
}

TEST_CASE("feature table hash path agrees with exact scan") {
  Rng rng(22);
  FeatureTable table(9);
  std::vector<FeatureVec> feats;
  for (int i = 0; i < 1000; ++i) {
    feats.push_back(random_visual(rng));
    table.insert(feats.back(), i + 1, i);
  }
  // fallback enabled (table below the exact-scan limit): always exact
  int agree = 0;
  for (int q = 0; q < 200; ++q) {
    FeatureVec query = near_feature(feats[rng.index(feats.size())], rng, 0.05);
    auto fast = table.query(query, 1);
    auto exact = table.exact_query(query, 1);
    REQUIRE(fast[0].entry_index == exact[0].entry_index);
    ++agree;
  }
  REQUIRE(agree == 200);

  // pure hash probing on near-duplicate queries: top-1 recall >= 99%
  int hash_agree = 0;
  for (int q = 0; q < 300; ++q) {
    size_t pick = rng.index(feats.size());
    FeatureVec query = near_feature(feats[pick], rng, 0.01);
    auto fast = table.query(query, 1, /*hash_only=*/true);
    auto exact = table.exact_query(query, 1);
    if (!fast.empty() && fast[0].entry_index == exact[0].entry_index) ++hash_agree;
  }
  REQUIRE(hash_agree >= 297);
}

TEST_CASE("empty table query returns a no-match result") {
  FeatureTable table(1);
  Rng rng(3);
  REQUIRE(table.query(random_visual(rng), 5).empty());
}

TEST_CASE("create_map basics and duplicate creation") {
  Rng rng(31);
  MemoryBank bank;
  PointCloud cloud = box_cloud(rng, 500, Vec3(0, 0, 0), 1.0);
  std::vector<std::pair<std::uint64_t, FeatureVec>> kf;
  for (int i = 0; i < 4; ++i) kf.emplace_back(i * 10, random_visual(rng));
  auto id1 = bank.create_map(cloud, kf, occupancy_geo_feature(cloud), 0.1);
  REQUIRE(id1 == 1);
  REQUIRE(bank.table().size() == 4);
  // duplicate create: distinct id, never dedups
  auto id2 = bank.create_map(cloud, kf, occupancy_geo_feature(cloud), 0.1);
  REQUIRE(id2 == 2);
  REQUIRE(bank.size() == 2);
  PointCloud empty;
  REQUIRE_THROWS_AS(bank.create_map(empty, kf, occupancy_geo_feature(cloud), 0.1),
                    EmptyInputError);
}

TEST_CASE("recall on an empty bank yields no candidate") {
  MemoryBank bank;
  Rng rng(1);
  PointCloud q = box_cloud(rng, 100, Vec3(0, 0, 0), 1.0);
  auto res = bank.recall({random_visual(rng)}, q);
  REQUIRE_FALSE(res.candidate_map.has_value());
}

TEST_CASE("recall accepts a revisited scene and rejects a foreign one") {
  Rng rng(77);
  MemoryBank bank;
  bank.thresholds().n_inlier_abs = 50;  // desk-scale unit test clouds

  // two scenes with distinct geometry and features
  std::vector<FeatureVec> base_feats;
  for (int s = 0; s < 2; ++s) base_feats.push_back(random_visual(rng, 5.0));
  std::vector<std::uint64_t> ids;
  for (int s = 0; s < 2; ++s) {
    PointCloud cloud = scene_cloud(1000 + s, 1);
    std::vector<std::pair<std::uint64_t, FeatureVec>> kf;
    for (int i = 0; i < 5; ++i) kf.emplace_back(i, near_feature(base_feats[s], rng, 0.05));
    ids.push_back(bank.create_map(cloud, kf, occupancy_geo_feature(cloud), 0.05));
  }

  // query = scene 0 resampled (same geometry, new sampling + near features)
  PointCloud q = scene_cloud(1000, 2);
  std::vector<FeatureVec> qf;
  for (int i = 0; i < 5; ++i) qf.push_back(near_feature(base_feats[0], rng, 0.05));
  auto res = bank.recall(qf, q);
  REQUIRE(res.vote_winner == ids[0]);
  REQUIRE(res.candidate_map.has_value());
  REQUIRE(*res.candidate_map == ids[0]);
  REQUIRE(res.alignment->accepted);

  // foreign geometry with scene-0 features: votes hit, the geometric gate
  // must not. Plane-soup scenes can coincidentally overlap ~10%, so this
  // adversarial check runs with a stricter inlier fraction; family-level
  // soundness at default thresholds is covered by the acceptance protocol.
  bank.thresholds().n_inlier_frac = 0.35;
  PointCloud foreign = scene_cloud(4242, 3);
  auto res2 = bank.recall(qf, foreign);
  REQUIRE_FALSE(res2.candidate_map.has_value());
  REQUIRE(res2.vote_winner == ids[0]);  // votes alone would have matched
}

TEST_CASE("recall vote tie produces no candidate") {
  Rng rng(55);
  MemoryBank bank;
  bank.thresholds().v_min_abs = 1;
  FeatureVec f1 = random_visual(rng, 5.0), f2 = random_visual(rng, 5.0);
  PointCloud c1 = scene_cloud(1, 1), c2 = scene_cloud(2, 1);
  bank.create_map(c1, {{0, f1}}, occupancy_geo_feature(c1), 0.05);
  bank.create_map(c2, {{0, f2}}, occupancy_geo_feature(c2), 0.05);
  // one query feature votes map 1, the other map 2: tie
  auto res = bank.recall({f1, f2}, c1);
  REQUIRE(res.votes.size() == 2);
  REQUIRE_FALSE(res.candidate_map.has_value());
  REQUIRE(res.vote_winner == 0);
}

TEST_CASE("update_map merge, idempotence, and monotone coverage") {
  Rng rng(88);
  MemoryBank bank;
  PointCloud cloud = box_cloud(rng, 4000, Vec3(0, 0, 0), 1.0);
  auto id = bank.create_map(cloud, {}, occupancy_geo_feature(cloud), 0.2);
  const MemoryMap& m = bank.maps().at(id);
  size_t base_count = m.static_cloud.size();

  AlignmentResult ident;
  ident.accepted = true;  // identity transform
  // update with the map's own stored cloud: point count unchanged
  PointCloud own = m.static_cloud;
  bank.update_map(id, own, {}, ident);
  REQUIRE(bank.maps().at(id).static_cloud.size() == base_count);

  std::set<std::tuple<std::int64_t, std::int64_t, std::int64_t>> before_keys;
  for (const auto& p : bank.maps().at(id).static_cloud.points) before_keys.insert(voxel_key(p, 0.2));

  // disjoint adjacent region: grows by the new region's voxel count
  PointCloud extra = box_cloud(rng, 3000, Vec3(5, 0, 0), 1.0);
  std::set<std::tuple<std::int64_t, std::int64_t, std::int64_t>> extra_keys;
  for (const auto& p : extra.points) extra_keys.insert(voxel_key(p, 0.2));
  bank.update_map(id, extra, {}, ident);
  REQUIRE(bank.maps().at(id).static_cloud.size() == base_count + extra_keys.size());

  // monotone coverage: old voxel set is preserved
  std::set<std::tuple<std::int64_t, std::int64_t, std::int64_t>> after_keys;
  for (const auto& p : bank.maps().at(id).static_cloud.points) after_keys.insert(voxel_key(p, 0.2));
  for (const auto& k : before_keys) REQUIRE(after_keys.count(k) == 1);

  // two successive identical updates: the second is a geometric no-op
  size_t count_after_first = bank.maps().at(id).static_cloud.size();
  auto cloud_snapshot = bank.maps().at(id).static_cloud.points;
  bank.update_map(id, extra, {}, ident);
  REQUIRE(bank.maps().at(id).static_cloud.size() == count_after_first);
  double max_shift = 0.0;
  for (size_t i = 0; i < cloud_snapshot.size(); ++i)
    max_shift = std::max(max_shift,
                         (bank.maps().at(id).static_cloud.points[i] - cloud_snapshot[i]).norm());
  REQUIRE(max_shift < 1e-9);

  // rejected alignment violates the contract
  AlignmentResult rejected;
  rejected.accepted = false;
  REQUIRE_THROWS_AS(bank.update_map(id, extra, {}, rejected), ContractError);
}

TEST_CASE("persist/load round trip preserves bank behavior") {
  Rng rng(2025);
  fs::path root = fs::temp_directory_path() / "cogmap_bank_rt";
  fs::remove_all(root);

  MemoryBank bank;
  std::vector<FeatureVec> bases;
  for (int s = 0; s < 3; ++s) {
    bases.push_back(random_visual(rng, 5.0));
    PointCloud cloud = scene_cloud(100 + s, s + 1);
    std::vector<std::pair<std::uint64_t, FeatureVec>> kf;
    for (int i = 0; i < 4; ++i) kf.emplace_back(i, near_feature(bases[s], rng, 0.05));
    bank.create_map(cloud, kf, occupancy_geo_feature(cloud), 0.05);
  }
  bank.persist(root);
  MemoryBank loaded = MemoryBank::load(root);

  REQUIRE(loaded.size() == bank.size());
  REQUIRE(loaded.table().size() == bank.table().size());
  for (const auto& [id, m] : bank.maps()) {
    const auto& lm = loaded.maps().at(id);
    REQUIRE(lm.static_cloud.size() == m.static_cloud.size());
    for (size_t i = 0; i < m.static_cloud.size(); ++i)
      REQUIRE((lm.static_cloud.points[i] - m.static_cloud.points[i]).norm() < 1e-6);
    REQUIRE(lm.keyframe_feats.size() == m.keyframe_feats.size());
  }

  // identical vote results for 50 random queries
  for (int q = 0; q < 50; ++q) {
    FeatureVec query = near_feature(bases[q % 3], rng, 0.2);
    auto a = bank.table_query(query, 1);
    auto b = loaded.table_query(query, 1);
    REQUIRE(a[0].map_id == b[0].map_id);
    REQUIRE(a[0].frame_id == b[0].frame_id);
  }

  // empty bank round trip
  fs::path root2 = fs::temp_directory_path() / "cogmap_bank_empty";
  fs::remove_all(root2);
  MemoryBank empty;
  empty.persist(root2);
  REQUIRE(MemoryBank::load(root2).size() == 0);
  fs::remove_all(root);
  fs::remove_all(root2);
}

TEST_CASE("truncated cloud file fails the load with the file named") {
  Rng rng(3030);
  fs::path root = fs::temp_directory_path() / "cogmap_bank_trunc";
  fs::remove_all(root);
  MemoryBank bank;
  PointCloud cloud = box_cloud(rng, 300, Vec3(0, 0, 0), 1.0);
  bank.create_map(cloud, {{0, random_visual(rng)}}, occupancy_geo_feature(cloud), 0.1);
  bank.persist(root);

  fs::path ply = root / "map_1.ply";
  auto size = fs::file_size(ply);
  fs::resize_file(ply, size / 2);
  try {
    MemoryBank::load(root);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    REQUIRE(std::string(e.what()).find("map_1.ply") != std::string::npos);
  }
  fs::remove_all(root);
}

TEST_CASE("persist is crash-safe at every fault point") {
  Rng rng(4040);
  fs::path root = fs::temp_directory_path() / "cogmap_bank_crash";
  fs::remove_all(root);

  MemoryBank bank;
  for (int s = 0; s < 2; ++s) {
    PointCloud cloud = scene_cloud(500 + s, s + 1, 800);
    bank.create_map(cloud, {{0, random_visual(rng)}}, occupancy_geo_feature(cloud), 0.1);
  }
  bank.persist(root);  // committed state: 2 maps

  MemoryBank bigger = MemoryBank::load(root);
  PointCloud cloud = scene_cloud(999, 3, 800);
  bigger.create_map(cloud, {{0, random_visual(rng)}}, occupancy_geo_feature(cloud), 0.1);

  // kill the persist after every possible number of file operations; the
  // bank on disk must stay loadable (old state until the manifest commits)
  for (long long ops = 0; ops < 32; ++ops) {
    FaultInjector fault{ops};
    bool killed = false;
    try {
      bigger.persist(root, &fault);
    } catch (const IoError&) {
      killed = true;
    }
    MemoryBank recovered = MemoryBank::load(root);
    REQUIRE((recovered.size() == 2 || recovered.size() == 3));
    if (!killed) {
      REQUIRE(recovered.size() == 3);
      break;
    }
  }
  fs::remove_all(root);
}

TEST_CASE("recall results are invariant to map insertion order") {
  Rng rng(6060);
  std::vector<FeatureVec> bases;
  std::vector<PointCloud> clouds;
  for (int s = 0; s < 4; ++s) {
    bases.push_back(random_visual(rng, 5.0));
    clouds.push_back(scene_cloud(700 + s, s + 1));
  }
  std::vector<std::vector<std::pair<std::uint64_t, FeatureVec>>> kfs(4);
  for (int s = 0; s < 4; ++s)
    for (int i = 0; i < 4; ++i) kfs[s].emplace_back(i, near_feature(bases[s], rng, 0.05));

  auto build = [&](const std::vector<int>& order) {
    MemoryBank bank;
    bank.thresholds().n_inlier_abs = 50;
    std::map<int, std::uint64_t> scene_to_map;
    for (int s : order)
      scene_to_map[s] = bank.create_map(clouds[s], kfs[s], occupancy_geo_feature(clouds[s]), 0.05);
    return std::make_pair(std::move(bank), scene_to_map);
  };

  auto [bank_a, ids_a] = build({0, 1, 2, 3});
  auto [bank_b, ids_b] = build({3, 1, 0, 2});

  for (int s = 0; s < 4; ++s) {
    std::vector<FeatureVec> qf;
    Rng qrng(9000 + s);
    for (int i = 0; i < 4; ++i) qf.push_back(near_feature(bases[s], qrng, 0.05));
    PointCloud q = scene_cloud(700 + s, 42);
    auto ra = bank_a.recall(qf, q);
    auto rb = bank_b.recall(qf, q);
    REQUIRE(ra.candidate_map.has_value());
    REQUIRE(rb.candidate_map.has_value());
    // same scene wins regardless of insertion order
    REQUIRE(*ra.candidate_map == ids_a[s]);
    REQUIRE(*rb.candidate_map == ids_b[s]);
  }
}
