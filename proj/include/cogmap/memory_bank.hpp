#pragma once

// Cognitive mapping system: creation, recall/relocalization, and update of
// persistent static-scene memories. Two-tier design: a flat global feature
// table (fast visual search, LSH buckets with exact fallback) in front of
// per-map geometry loaded for verification.
//
// On-disk layout under a bank root:
//   manifest.json   version, thresholds, hash seed, map registry
//   features.bin    "CMFT" + u64 count + u32 dim, then per entry
//                   map_id u64, frame_id u64, dim float32 (little-endian)
//   map_<id>.ply    binary little-endian PLY: x, y, z, confidence float32
//
// Writers are atomic (tmp + rename) with the manifest renamed last, so a
// kill at any point leaves the previous consistent bank loadable.

#include <cstring>
#include <map>
#include <optional>
#include <tuple>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "cogmap/core.hpp"
#include "cogmap/geometry.hpp"
#include "cogmap/icp.hpp"
#include "cogmap/io.hpp"
#include "cogmap/octree.hpp"

namespace cogmap {

// ---------------------------------------------------------------------------
// Features.

struct FeatureVec {
  enum class Kind { visual2d, geometric3d };
  static constexpr int kVisualDim = 1024;
  static constexpr int kGeoDim = 512;

  Kind kind = Kind::visual2d;
  std::vector<float> values;

  void validate() const {
    int expect = kind == Kind::visual2d ? kVisualDim : kGeoDim;
    if (static_cast<int>(values.size()) != expect)
      throw ShapeError("FeatureVec: dimension does not match kind");
    for (float v : values)
      if (!std::isfinite(v)) throw ShapeError("FeatureVec: non-finite entry");
  }
};

inline double feature_distance(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) throw ShapeError("feature_distance: dimension mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

// PointNet++ stand-in used for geo descriptors: normalize the cloud to a unit
// cube about its centroid and take the L1-normalized 8x8x8 occupancy-count
// histogram. Deterministic and permutation-invariant.
inline FeatureVec occupancy_geo_feature(const PointCloud& cloud) {
  FeatureVec f;
  f.kind = FeatureVec::Kind::geometric3d;
  f.values.assign(FeatureVec::kGeoDim, 0.f);
  if (cloud.size() == 0) return f;
  Vec3 c = cloud.centroid();
  double extent = 0.0;
  for (const auto& p : cloud.points) extent = std::max(extent, (p - c).cwiseAbs().maxCoeff());
  if (extent <= 0.0) extent = 1.0;  // single point / degenerate cloud
  for (const auto& p : cloud.points) {
    Vec3 q = (p - c) / (2.0 * extent);  // in [-0.5, 0.5]
    int ix = std::min(7, std::max(0, static_cast<int>((q.x() + 0.5) * 8.0)));
    int iy = std::min(7, std::max(0, static_cast<int>((q.y() + 0.5) * 8.0)));
    int iz = std::min(7, std::max(0, static_cast<int>((q.z() + 0.5) * 8.0)));
    f.values[static_cast<size_t>(iz) * 64 + iy * 8 + ix] += 1.f;
  }
  float total = static_cast<float>(cloud.size());
  for (auto& v : f.values) v /= total;
  return f;
}

// ---------------------------------------------------------------------------
// Voxel downsampling: one confidence-weighted centroid per occupied cell,
// output sorted by cell key. Uniform weights when confidence is absent.

inline PointCloud voxel_downsample(const PointCloud& cloud, double voxel) {
  if (!(voxel > 0)) throw ShapeError("voxel_downsample: voxel size must be positive");
  struct Accum {
    Vec3 wsum = Vec3::Zero();
    Vec3 psum = Vec3::Zero();
    double w = 0.0;
    double csum = 0.0;
    size_t n = 0;
  };
  using Key = std::tuple<std::int64_t, std::int64_t, std::int64_t>;
  std::map<Key, Accum> cells;
  for (size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.points[i];
    Key key{static_cast<std::int64_t>(std::floor(p.x() / voxel)),
            static_cast<std::int64_t>(std::floor(p.y() / voxel)),
            static_cast<std::int64_t>(std::floor(p.z() / voxel))};
    double w = cloud.has_confidence() ? cloud.confidence[i] : 1.0;
    auto& a = cells[key];
    a.wsum += w * p;
    a.psum += p;
    a.w += w;
    a.csum += w;
    ++a.n;
  }
  PointCloud out;
  out.points.reserve(cells.size());
  if (cloud.has_confidence()) out.confidence.reserve(cells.size());
  for (const auto& [key, a] : cells) {
    // all-zero confidence in a cell degrades to the unweighted centroid
    out.points.push_back(a.w > 0.0 ? Vec3(a.wsum / a.w) : Vec3(a.psum / static_cast<double>(a.n)));
    if (cloud.has_confidence()) out.confidence.push_back(a.csum / static_cast<double>(a.n));
  }
  return out;
}

// Voxel key helper shared with tests and coverage checks.
inline std::tuple<std::int64_t, std::int64_t, std::int64_t> voxel_key(const Vec3& p, double voxel) {
  return {static_cast<std::int64_t>(std::floor(p.x() / voxel)),
          static_cast<std::int64_t>(std::floor(p.y() / voxel)),
          static_cast<std::int64_t>(std::floor(p.z() / voxel))};
}

// ---------------------------------------------------------------------------
// Keyframe selection: greedy by feature distance to the last kept frame.

inline std::vector<size_t> select_keyframes(const std::vector<FeatureVec>& features,
                                            double d_target) {
  if (features.empty()) throw EmptyInputError("select_keyframes: empty feature sequence");
  std::vector<size_t> kept{0};
  for (size_t i = 1; i < features.size(); ++i)
    if (feature_distance(features[i].values, features[kept.back()].values) >= d_target)
      kept.push_back(i);
  return kept;
}

// ---------------------------------------------------------------------------
// Global feature table with random-hyperplane sign buckets.

struct TableHit {
  double distance = 0.0;
  std::uint64_t map_id = 0;
  std::uint64_t frame_id = 0;
  size_t entry_index = 0;
};

class FeatureTable {
 public:
  explicit FeatureTable(std::uint64_t hash_seed = 0x5eedcafe, int num_planes = 16,
                        size_t exact_scan_limit = 10000)
      : hash_seed_(hash_seed), num_planes_(num_planes), exact_scan_limit_(exact_scan_limit) {
    generate_planes();
  }

  size_t size() const { return entries_.size(); }
  std::uint64_t hash_seed() const { return hash_seed_; }
  int num_planes() const { return num_planes_; }

  void insert(const FeatureVec& feat, std::uint64_t map_id, std::uint64_t frame_id) {
    if (feat.kind != FeatureVec::Kind::visual2d)
      throw ShapeError("FeatureTable: only visual2d features are indexed");
    feat.validate();
    Entry e;
    e.map_id = map_id;
    e.frame_id = frame_id;
    e.offset = values_.size();
    values_.insert(values_.end(), feat.values.begin(), feat.values.end());
    std::uint32_t idx = static_cast<std::uint32_t>(entries_.size());
    entries_.push_back(e);
    buckets_[signature(feat.values.data())].push_back(idx);
    median_dirty_ = true;
  }

  const float* entry_values(size_t i) const { return values_.data() + entries_[i].offset; }
  std::uint64_t entry_map(size_t i) const { return entries_[i].map_id; }
  std::uint64_t entry_frame(size_t i) const { return entries_[i].frame_id; }

  // n nearest entries by L2. Buckets (query signature + Hamming-1 neighbors)
  // are probed first; if they yield fewer than n candidates, or the table is
  // small enough that a scan is cheap, falls back to the exact scan.
  std::vector<TableHit> query(const FeatureVec& q, size_t n, bool hash_only = false) const {
    if (q.kind != FeatureVec::Kind::visual2d) throw ShapeError("FeatureTable: visual2d query expected");
    q.validate();
    if (entries_.empty()) return {};
    if (!hash_only && entries_.size() <= exact_scan_limit_) return exact_query(q, n);

    std::uint16_t sig = signature(q.values.data());
    std::vector<std::uint32_t> cand;
    probe_bucket(sig, cand);
    for (int b = 0; b < num_planes_; ++b) probe_bucket(sig ^ static_cast<std::uint16_t>(1u << b), cand);
    if (!hash_only && cand.size() < n) return exact_query(q, n);
    return rank(q, cand, n);
  }

  std::vector<TableHit> exact_query(const FeatureVec& q, size_t n) const {
    std::vector<std::uint32_t> all(entries_.size());
    for (std::uint32_t i = 0; i < all.size(); ++i) all[i] = i;
    return rank(q, all, n);
  }

  // Median pairwise distance among stored features; exact for small tables,
  // seeded pair sampling otherwise. Basis of the auto-calibrated vote gate.
  double median_pairwise_distance() const {
    if (median_dirty_) {
      median_cache_ = compute_median();
      median_dirty_ = false;
    }
    return median_cache_;
  }

 private:
  struct Entry {
    std::uint64_t map_id = 0;
    std::uint64_t frame_id = 0;
    size_t offset = 0;
  };

  void generate_planes() {
    Rng rng(hash_seed_);
    planes_.resize(static_cast<size_t>(num_planes_) * FeatureVec::kVisualDim);
    for (auto& v : planes_) v = static_cast<float>(rng.gaussian());
  }

  std::uint16_t signature(const float* v) const {
    std::uint16_t sig = 0;
    for (int p = 0; p < num_planes_; ++p) {
      const float* plane = planes_.data() + static_cast<size_t>(p) * FeatureVec::kVisualDim;
      double dot = 0.0;
      for (int i = 0; i < FeatureVec::kVisualDim; ++i) dot += static_cast<double>(plane[i]) * v[i];
      if (dot >= 0) sig |= static_cast<std::uint16_t>(1u << p);
    }
    return sig;
  }

  void probe_bucket(std::uint16_t sig, std::vector<std::uint32_t>& cand) const {
    auto it = buckets_.find(sig);
    if (it == buckets_.end()) return;
    cand.insert(cand.end(), it->second.begin(), it->second.end());
  }

  std::vector<TableHit> rank(const FeatureVec& q, const std::vector<std::uint32_t>& cand,
                             size_t n) const {
    std::vector<TableHit> hits;
    hits.reserve(cand.size());
    for (std::uint32_t i : cand) {
      double acc = 0.0;
      const float* v = entry_values(i);
      for (int d = 0; d < FeatureVec::kVisualDim; ++d) {
        double diff = static_cast<double>(q.values[d]) - v[d];
        acc += diff * diff;
      }
      hits.push_back({std::sqrt(acc), entries_[i].map_id, entries_[i].frame_id, i});
    }
    std::sort(hits.begin(), hits.end(), [](const TableHit& a, const TableHit& b) {
      return std::tie(a.distance, a.map_id, a.frame_id, a.entry_index) <
             std::tie(b.distance, b.map_id, b.frame_id, b.entry_index);
    });
    if (hits.size() > n) hits.resize(n);
    return hits;
  }

  double compute_median() const {
    const size_t n = entries_.size();
    if (n < 2) return 0.0;
    std::vector<double> dists;
    if (n <= 200) {
      for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j)
          dists.push_back(feature_pair_distance(i, j));
    } else {
      Rng rng(hash_seed_ ^ 0xabcdef);
      for (int s = 0; s < 20000; ++s) {
        size_t i = rng.index(n), j = rng.index(n);
        if (i == j) continue;
        dists.push_back(feature_pair_distance(i, j));
      }
    }
    if (dists.empty()) return 0.0;
    std::nth_element(dists.begin(), dists.begin() + dists.size() / 2, dists.end());
    return dists[dists.size() / 2];
  }

  double feature_pair_distance(size_t i, size_t j) const {
    const float* a = entry_values(i);
    const float* b = entry_values(j);
    double acc = 0.0;
    for (int d = 0; d < FeatureVec::kVisualDim; ++d) {
      double diff = static_cast<double>(a[d]) - b[d];
      acc += diff * diff;
    }
    return std::sqrt(acc);
  }

  std::uint64_t hash_seed_;
  int num_planes_;
  size_t exact_scan_limit_;
  std::vector<Entry> entries_;
  std::vector<float> values_;
  std::vector<float> planes_;
  std::unordered_map<std::uint16_t, std::vector<std::uint32_t>> buckets_;
  mutable double median_cache_ = 0.0;
  mutable bool median_dirty_ = true;
};

// ---------------------------------------------------------------------------
// Memory maps and the bank.

struct MemoryMap {
  std::uint64_t map_id = 0;
  PointCloud static_cloud;  // map frame, voxel-grid bound maintained
  std::vector<std::pair<std::uint64_t, FeatureVec>> keyframe_feats;
  FeatureVec geo_feat;
  double voxel_size = 0.0;
  std::uint64_t visits = 1;  // creation counts as the first visit
};

struct RecallThresholds {
  double d_match = 0.0;       // <= 0: auto, 0.7 x median pairwise stored distance
  double v_min_frac = 0.30;   // votes required: max(v_min_abs, frac * |query_feats|)
  int v_min_abs = 2;
  double n_inlier_frac = 0.10;  // inliers required: max(n_inlier_abs, frac * |query cloud|)
  int n_inlier_abs = 100;
  double r_max_frac = 0.03;  // rmse gate as a fraction of candidate cloud diameter
};

struct RecallResult {
  std::optional<std::uint64_t> candidate_map;  // present only when accepted
  std::map<std::uint64_t, int> votes;
  std::optional<AlignmentResult> alignment;  // diagnostics, present when ICP ran
  std::uint64_t vote_winner = 0;  // strict-max map before verification, 0 if none
  double d_match_used = 0.0;
};

class MemoryBank {
 public:
  explicit MemoryBank(std::uint64_t hash_seed = 0x5eedcafe)
      : table_(hash_seed), hash_seed_(hash_seed) {}

  const std::map<std::uint64_t, MemoryMap>& maps() const { return maps_; }
  const FeatureTable& table() const { return table_; }
  RecallThresholds& thresholds() { return thresholds_; }
  const RecallThresholds& thresholds() const { return thresholds_; }
  size_t size() const { return maps_.size(); }

  // Stores a voxel-downsampled copy of the cloud, indexes the keyframe
  // features, and returns the fresh map id. Creation never dedups; recall
  // does.
  std::uint64_t create_map(const PointCloud& static_cloud,
                           const std::vector<std::pair<std::uint64_t, FeatureVec>>& kf_feats,
                           const FeatureVec& geo_feat, double voxel) {
    if (static_cloud.size() == 0) throw EmptyInputError("create_map: empty static cloud");
    static_cloud.validate();
    if (!(voxel > 0)) throw ShapeError("create_map: voxel size must be positive");
    MemoryMap m;
    m.map_id = next_map_id_++;
    m.static_cloud = voxel_downsample(static_cloud, voxel);
    m.voxel_size = voxel;
    m.geo_feat = geo_feat;
    m.geo_feat.validate();
    for (const auto& [frame_id, feat] : kf_feats) {
      feat.validate();
      table_.insert(feat, m.map_id, frame_id);
      m.keyframe_feats.emplace_back(frame_id, feat);
    }
    std::uint64_t id = m.map_id;
    maps_.emplace(id, std::move(m));
    return id;
  }

  std::vector<TableHit> table_query(const FeatureVec& q, size_t n) const {
    return table_.query(q, n);
  }

  // Feature voting (top-1 within d_match per query feature), strict-max
  // consensus, then ICP verification against the winning map's cloud.
  // Acceptance: inlier_count >= n_inlier and rmse <= r_max. When init_align
  // is the identity the clouds are pre-aligned on their centroids, which
  // covers revisits with substantial overlap.
  RecallResult recall(const std::vector<FeatureVec>& query_feats, const PointCloud& query_static,
                      const Pose& init_align = Pose::identity()) const {
    if (query_feats.empty()) throw ContractError("recall: empty query features");
    RecallResult out;
    if (table_.size() == 0 || maps_.empty()) return out;

    double d_match = thresholds_.d_match > 0 ? thresholds_.d_match
                                             : 0.7 * table_.median_pairwise_distance();
    out.d_match_used = d_match;
    for (const auto& qf : query_feats) {
      auto hits = table_.query(qf, 1);
      if (!hits.empty() && hits[0].distance < d_match) ++out.votes[hits[0].map_id];
    }

    // strict maximum; ties mean no candidate (treated as a new scene)
    std::uint64_t best_map = 0;
    int best_votes = 0;
    bool strict = false;
    for (const auto& [map_id, v] : out.votes) {
      if (v > best_votes) {
        best_votes = v;
        best_map = map_id;
        strict = true;
      } else if (v == best_votes) {
        strict = false;
      }
    }
    int v_min = std::max(thresholds_.v_min_abs,
                         static_cast<int>(std::ceil(thresholds_.v_min_frac * query_feats.size())));
    if (!strict || best_votes < v_min) return out;
    out.vote_winner = best_map;

    const MemoryMap& cand = maps_.at(best_map);
    if (query_static.size() < 3 || cand.static_cloud.size() < 3) return out;

    Pose init = init_align;
    bool is_identity = (init.rotation - Mat3::Identity()).norm() == 0.0 &&
                       init.translation.norm() == 0.0;
    if (is_identity)
      init.translation = cand.static_cloud.centroid() - query_static.centroid();

    AlignmentResult align = icp_align(query_static, cand.static_cloud, init);
    size_t n_inlier = std::max<size_t>(
        thresholds_.n_inlier_abs,
        static_cast<size_t>(std::ceil(thresholds_.n_inlier_frac * query_static.size())));
    double r_max = thresholds_.r_max_frac * cand.static_cloud.diameter();
    bool accepted = align.accepted && align.inlier_count >= n_inlier && align.rmse <= r_max;
    align.accepted = accepted;
    out.alignment = align;
    if (accepted) out.candidate_map = best_map;
    return out;
  }

  // Merges an accepted alignment: transform the query cloud into the map
  // frame, concatenate, re-downsample at the map's voxel size, index the new
  // keyframe features, recompute the geo descriptor, bump the visit counter.
  MemoryMap& update_map(std::uint64_t map_id, const PointCloud& aligned_static,
                        const std::vector<std::pair<std::uint64_t, FeatureVec>>& new_kf_feats,
                        const AlignmentResult& alignment) {
    if (!alignment.accepted) throw ContractError("update_map: alignment was not accepted");
    auto it = maps_.find(map_id);
    if (it == maps_.end()) throw ContractError("update_map: unknown map id");
    MemoryMap& m = it->second;

    PointCloud merged = m.static_cloud;
    bool merged_conf = merged.has_confidence();
    bool incoming_conf = aligned_static.has_confidence();
    if (merged_conf || incoming_conf) {
      if (!merged_conf) merged.confidence.assign(merged.size(), 1.0);
    }
    for (size_t i = 0; i < aligned_static.size(); ++i) {
      merged.points.push_back(alignment.transform * aligned_static.points[i]);
      if (merged_conf || incoming_conf)
        merged.confidence.push_back(incoming_conf ? aligned_static.confidence[i] : 1.0);
    }
    m.static_cloud = voxel_downsample(merged, m.voxel_size);

    for (const auto& [frame_id, feat] : new_kf_feats) {
      feat.validate();
      table_.insert(feat, map_id, frame_id);
      m.keyframe_feats.emplace_back(frame_id, feat);
    }
    m.geo_feat = occupancy_geo_feature(m.static_cloud);
    ++m.visits;
    return m;
  }

  // -------------------------------------------------------------------------
  // Persistence.

  void persist(const fs::path& root, FaultInjector* fault = nullptr) const {
    fs::create_directories(root);
    if (fault) fault->step("mkdir " + root.string());
    for (const auto& [id, m] : maps_) {
      write_cloud_ply(root / map_file_name(id), m.static_cloud, fault);
    }
    atomic_write(root / "features.bin", [&](std::ostream& os) {
      os.write("CMFT", 4);
      std::uint64_t count = table_.size();
      os.write(reinterpret_cast<const char*>(&count), 8);
      std::uint32_t dim = FeatureVec::kVisualDim;
      os.write(reinterpret_cast<const char*>(&dim), 4);
      for (size_t i = 0; i < table_.size(); ++i) {
        std::uint64_t map_id = table_.entry_map(i), frame_id = table_.entry_frame(i);
        os.write(reinterpret_cast<const char*>(&map_id), 8);
        os.write(reinterpret_cast<const char*>(&frame_id), 8);
        os.write(reinterpret_cast<const char*>(table_.entry_values(i)),
                 sizeof(float) * FeatureVec::kVisualDim);
      }
    }, fault);

    nlohmann::ordered_json manifest;
    manifest["version"] = 1;
    manifest["hash_seed"] = hash_seed_;
    manifest["next_map_id"] = next_map_id_;
    manifest["thresholds"] = {{"d_match", thresholds_.d_match},
                              {"v_min_frac", thresholds_.v_min_frac},
                              {"v_min_abs", thresholds_.v_min_abs},
                              {"n_inlier_frac", thresholds_.n_inlier_frac},
                              {"n_inlier_abs", thresholds_.n_inlier_abs},
                              {"r_max_frac", thresholds_.r_max_frac}};
    nlohmann::ordered_json maps = nlohmann::ordered_json::array();
    for (const auto& [id, m] : maps_) {
      nlohmann::ordered_json jm;
      jm["map_id"] = id;
      jm["cloud_file"] = map_file_name(id);
      jm["voxel_size"] = m.voxel_size;
      jm["visits"] = m.visits;
      jm["point_count"] = m.static_cloud.size();
      std::vector<std::uint64_t> kf;
      for (const auto& [frame_id, feat] : m.keyframe_feats) kf.push_back(frame_id);
      jm["keyframes"] = kf;
      jm["geo_feat"] = m.geo_feat.values;
      maps.push_back(jm);
    }
    manifest["maps"] = maps;
    // manifest last: its rename is the commit point
    atomic_write(root / "manifest.json", [&](std::ostream& os) { os << manifest.dump(2) << "\n"; },
                 fault);
  }

  static MemoryBank load(const fs::path& root) {
    fs::path mf = root / "manifest.json";
    if (!fs::exists(mf)) return MemoryBank();  // fresh or pre-commit bank

    nlohmann::json manifest;
    try {
      std::ifstream is(mf);
      is >> manifest;
    } catch (const std::exception& e) {
      throw IoError("corrupt manifest: " + mf.string() + " (" + e.what() + ")");
    }

    MemoryBank bank(manifest.value("hash_seed", 0x5eedcafeULL));
    bank.next_map_id_ = manifest.value("next_map_id", 1ULL);
    if (manifest.contains("thresholds")) {
      const auto& t = manifest["thresholds"];
      bank.thresholds_.d_match = t.value("d_match", 0.0);
      bank.thresholds_.v_min_frac = t.value("v_min_frac", 0.30);
      bank.thresholds_.v_min_abs = t.value("v_min_abs", 2);
      bank.thresholds_.n_inlier_frac = t.value("n_inlier_frac", 0.10);
      bank.thresholds_.n_inlier_abs = t.value("n_inlier_abs", 100);
      bank.thresholds_.r_max_frac = t.value("r_max_frac", 0.03);
    }

    for (const auto& jm : manifest["maps"]) {
      MemoryMap m;
      m.map_id = jm.at("map_id").get<std::uint64_t>();
      m.voxel_size = jm.at("voxel_size").get<double>();
      m.visits = jm.value("visits", 1ULL);
      // point_count is diagnostic only: a kill between per-file renames can
      // legitimately leave a newer cloud next to an older manifest
      m.static_cloud = read_cloud_ply(root / jm.at("cloud_file").get<std::string>());
      m.geo_feat.kind = FeatureVec::Kind::geometric3d;
      m.geo_feat.values = jm.at("geo_feat").get<std::vector<float>>();
      m.geo_feat.validate();
      bank.maps_.emplace(m.map_id, std::move(m));
    }

    // global feature table; per-map feature sets are rebuilt from it
    fs::path ff = root / "features.bin";
    std::ifstream is(ff, std::ios::binary);
    if (!is) throw IoError("missing feature table: " + ff.string());
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "CMFT", 4) != 0)
      throw IoError("bad feature table magic: " + ff.string());
    std::uint64_t count = 0;
    std::uint32_t dim = 0;
    if (!is.read(reinterpret_cast<char*>(&count), 8) || !is.read(reinterpret_cast<char*>(&dim), 4))
      throw IoError("truncated feature table header: " + ff.string());
    if (dim != FeatureVec::kVisualDim) throw IoError("unexpected feature dim in " + ff.string());
    for (std::uint64_t i = 0; i < count; ++i) {
      std::uint64_t map_id = 0, frame_id = 0;
      FeatureVec f;
      f.kind = FeatureVec::Kind::visual2d;
      f.values.resize(dim);
      if (!is.read(reinterpret_cast<char*>(&map_id), 8) ||
          !is.read(reinterpret_cast<char*>(&frame_id), 8) ||
          !is.read(reinterpret_cast<char*>(f.values.data()), sizeof(float) * dim))
        throw IoError("truncated feature table entry in " + ff.string());
      auto it = bank.maps_.find(map_id);
      // entries for maps the manifest does not know belong to a newer,
      // uncommitted generation (kill between renames): skip them
      if (it == bank.maps_.end()) continue;
      bank.table_.insert(f, map_id, frame_id);
      it->second.keyframe_feats.emplace_back(frame_id, std::move(f));
    }
    return bank;
  }

  static std::string map_file_name(std::uint64_t id) { return "map_" + std::to_string(id) + ".ply"; }

  // Occupancy / structure stats for `bank inspect`.
  struct MapStats {
    std::uint64_t map_id = 0;
    size_t points = 0;
    size_t keyframes = 0;
    std::uint64_t visits = 0;
    double voxel_size = 0.0;
    double diameter = 0.0;
    int octree_depth = 0;
    size_t octree_leaves = 0;
  };

  std::vector<MapStats> stats() const {
    std::vector<MapStats> out;
    for (const auto& [id, m] : maps_) {
      Octree tree(m.static_cloud.points);
      out.push_back({id, m.static_cloud.size(), m.keyframe_feats.size(), m.visits, m.voxel_size,
                     m.static_cloud.diameter(), tree.depth(), tree.leaf_count()});
    }
    return out;
  }

 private:
  std::map<std::uint64_t, MemoryMap> maps_;
  FeatureTable table_;
  RecallThresholds thresholds_;
  std::uint64_t next_map_id_ = 1;
  std::uint64_t hash_seed_;
};

}  // namespace cogmap
