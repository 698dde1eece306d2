#pragma once

// Frame ingestion, end-to-end orchestration (segment -> recall -> update ->
// optimize), memory cadence, and the sequence directory layout.
//
// Sequence layout under <root>:
//   intrinsics.txt            fx fy cx cy w h
//   NNNNNN.depth.f32          CMGR grid, 1 channel (meters; <=0 marks invalid)
//   NNNNNN.conf.f32           CMGR grid, 1 channel, [0,1]
//   NNNNNN.flow.f32           CMGR grid, 2 channels (u, v), flow to the
//                             previous frame, anchored at this frame's pixels
//   NNNNNN.pose.txt           4x4 row-major world-to-camera
//   NNNNNN.feat.f32           optional CMGR grid 1024x1, visual descriptor
//   NNNNNN.matches.txt        optional, "x1 y1 x2 y2 score" (current, previous)
//
// Outputs under the run's output root: masks/NNNNNN.pgm, trajectory.tum
// (camera-to-world), bank/ (memory bank layout), metrics.json. Everything is
// staged in memory and written only after all stages succeed, each file
// atomically.

#include <chrono>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cogmap/core.hpp"
#include "cogmap/geometry.hpp"
#include "cogmap/icp.hpp"
#include "cogmap/io.hpp"
#include "cogmap/memory_bank.hpp"
#include "cogmap/metrics.hpp"
#include "cogmap/motion_cue.hpp"
#include "cogmap/pose_graph.hpp"

namespace cogmap {

struct FrameBundle {
  std::uint64_t frame_id = 0;
  Intrinsics intrinsics;
  Pose init_pose;  // world-to-camera (extrinsics)
  DepthMap depth;
  Grid<float> confidence;
  std::optional<FlowField> flow_prev;
  std::optional<FeatureVec> visual_feat;
  std::optional<KeypointMatches> matches_prev;
};

struct PipelineConfig {
  std::uint64_t seed = 1;

  // segmentation
  int gmm_k = 3;
  double delta_new = 0.01;
  double mag_k = 3.0;
  double ang_max_deg = 45.0;
  double min_mean_disp = 1e-3;

  // memory
  int cadence = 20;
  int cloud_stride = 4;
  double conf_min = 0.5;
  double voxel_frac = 0.01;  // of the first accumulated cloud's diameter
  double voxel_size = 0.0;   // > 0 overrides voxel_frac
  double kf_dist = -1.0;     // < 0: auto (mean consecutive feature distance)
  RecallThresholds recall;

  // factor graph
  int grid_step = 8;
  double tau_min = 0.05;
  double alpha_assoc = 0.01;
  double huber_px = 2.0;
  double sigma_prior = 1e-6;   // diagonal variance
  double sigma_motion = 1e-2;  // diagonal variance
  double alpha_mem = 0.25;
  int solver_max_iter = 100;
  int solver_rounds = 3;

  std::string bank_dir;

  void validate() const {
    if (cadence < 1) throw ContractError("config: cadence must be >= 1");
    if (cloud_stride < 1) throw ContractError("config: cloud_stride must be >= 1");
    if (gmm_k < 1) throw ContractError("config: gmm.k must be >= 1");
    if (grid_step < 1) throw ContractError("config: graph.grid_step must be >= 1");
    if (!(alpha_mem > 0.0) || alpha_mem > 1.0)
      throw ContractError("config: graph.alpha_mem must lie in (0, 1]");
  }
};

// ---------------------------------------------------------------------------
// Flat key=value config text.

namespace detail {

template <typename T>
void parse_into(const std::string& key, const std::string& value, T& out) {
  std::istringstream ss(value);
  ss >> out;
  if (ss.fail()) throw ContractError("config: bad value for " + key + ": " + value);
}

}  // namespace detail

inline void config_set(PipelineConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_into;
  if (key == "seed") parse_into(key, value, c.seed);
  else if (key == "gmm.k") parse_into(key, value, c.gmm_k);
  else if (key == "seg.delta_new") parse_into(key, value, c.delta_new);
  else if (key == "seg.mag_k") parse_into(key, value, c.mag_k);
  else if (key == "seg.ang_max_deg") parse_into(key, value, c.ang_max_deg);
  else if (key == "seg.min_mean_disp") parse_into(key, value, c.min_mean_disp);
  else if (key == "memory.cadence") parse_into(key, value, c.cadence);
  else if (key == "memory.cloud_stride") parse_into(key, value, c.cloud_stride);
  else if (key == "memory.conf_min") parse_into(key, value, c.conf_min);
  else if (key == "memory.voxel_frac") parse_into(key, value, c.voxel_frac);
  else if (key == "memory.voxel_size") parse_into(key, value, c.voxel_size);
  else if (key == "memory.kf_dist") parse_into(key, value, c.kf_dist);
  else if (key == "recall.d_match") parse_into(key, value, c.recall.d_match);
  else if (key == "recall.v_min_frac") parse_into(key, value, c.recall.v_min_frac);
  else if (key == "recall.v_min_abs") parse_into(key, value, c.recall.v_min_abs);
  else if (key == "recall.n_inlier_frac") parse_into(key, value, c.recall.n_inlier_frac);
  else if (key == "recall.n_inlier_abs") parse_into(key, value, c.recall.n_inlier_abs);
  else if (key == "recall.r_max_frac") parse_into(key, value, c.recall.r_max_frac);
  else if (key == "graph.grid_step") parse_into(key, value, c.grid_step);
  else if (key == "graph.tau_min") parse_into(key, value, c.tau_min);
  else if (key == "graph.alpha_assoc") parse_into(key, value, c.alpha_assoc);
  else if (key == "graph.huber_px") parse_into(key, value, c.huber_px);
  else if (key == "graph.sigma_prior") parse_into(key, value, c.sigma_prior);
  else if (key == "graph.sigma_motion") parse_into(key, value, c.sigma_motion);
  else if (key == "graph.alpha_mem") parse_into(key, value, c.alpha_mem);
  else if (key == "graph.max_iter") parse_into(key, value, c.solver_max_iter);
  else if (key == "graph.rounds") parse_into(key, value, c.solver_rounds);
  else if (key == "bank") c.bank_dir = value;
  else throw ContractError("config: unknown key: " + key);
}

inline PipelineConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path.string());
  PipelineConfig c;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      bool blank = line.find_first_not_of(" \t\r") == std::string::npos;
      if (blank) continue;
      throw ContractError("config: bad line " + std::to_string(lineno) + " in " + path.string());
    }
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t\r");
      size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    config_set(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Ingestion.

inline std::string frame_stem(std::uint64_t id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06llu", static_cast<unsigned long long>(id));
  return buf;
}

inline std::vector<std::uint64_t> sequence_frame_ids(const fs::path& root) {
  std::vector<std::uint64_t> ids;
  if (!fs::is_directory(root)) throw IoError("sequence root is not a directory: " + root.string());
  for (const auto& entry : fs::directory_iterator(root)) {
    const std::string name = entry.path().filename().string();
    if (name.size() == 16 && name.ends_with(".depth.f32"))
      ids.push_back(std::stoull(name.substr(0, 6)));
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline FrameBundle load_frame(const fs::path& root, std::uint64_t id, const Intrinsics& k,
                              bool expect_flow) {
  FrameBundle b;
  b.frame_id = id;
  b.intrinsics = k;
  const std::string stem = frame_stem(id);

  auto depth_grids = read_grids_f32(root / (stem + ".depth.f32"), 1);
  if (depth_grids[0].width() != k.width || depth_grids[0].height() != k.height)
    throw IoError("depth dimensions mismatch intrinsics: " + (root / (stem + ".depth.f32")).string());
  for (int y = 0; y < k.height; ++y)
    for (int x = 0; x < k.width; ++x)
      if (std::isnan(depth_grids[0](x, y)))
        throw IoError("depth contains NaN at pixel (" + std::to_string(x) + ", " +
                      std::to_string(y) + "): " + (root / (stem + ".depth.f32")).string());
  b.depth = DepthMap::from_values(std::move(depth_grids[0]));

  auto conf_grids = read_grids_f32(root / (stem + ".conf.f32"), 1);
  if (!conf_grids[0].same_size(b.depth.values))
    throw IoError("confidence dimensions mismatch: " + (root / (stem + ".conf.f32")).string());
  for (auto& v : conf_grids[0].data()) {
    if (!std::isfinite(v)) throw IoError("non-finite confidence in " + (root / (stem + ".conf.f32")).string());
    v = std::min(1.f, std::max(0.f, v));
  }
  b.confidence = std::move(conf_grids[0]);

  b.init_pose = read_pose_txt(root / (stem + ".pose.txt"));
  if (!b.init_pose.is_valid(1e-6))
    throw IoError("pose is not a rigid transform: " + (root / (stem + ".pose.txt")).string());

  fs::path flow_path = root / (stem + ".flow.f32");
  if (fs::exists(flow_path)) {
    auto grids = read_grids_f32(flow_path, 2);
    if (!grids[0].same_size(b.depth.values))
      throw IoError("flow dimensions mismatch: " + flow_path.string());
    for (const auto& g : grids)
      for (float v : g.data())
        if (!std::isfinite(v)) throw IoError("non-finite flow in " + flow_path.string());
    FlowField f;
    f.u = std::move(grids[0]);
    f.v = std::move(grids[1]);
    b.flow_prev = std::move(f);
  } else if (expect_flow) {
    throw IoError("missing flow file: " + flow_path.string());
  }

  fs::path feat_path = root / (stem + ".feat.f32");
  if (fs::exists(feat_path)) {
    auto grids = read_grids_f32(feat_path, 1);
    if (grids[0].width() != FeatureVec::kVisualDim || grids[0].height() != 1)
      throw IoError("unexpected feature dimensions: " + feat_path.string());
    FeatureVec f;
    f.kind = FeatureVec::Kind::visual2d;
    f.values = grids[0].data();
    f.validate();
    b.visual_feat = std::move(f);
  }

  fs::path match_path = root / (stem + ".matches.txt");
  if (fs::exists(match_path)) {
    KeypointMatches matches;
    for (const auto& r : read_matches_txt(match_path)) {
      if (r.x1 < 0 || r.x1 > k.width - 1 || r.y1 < 0 || r.y1 > k.height - 1)
        throw IoError("match pixel outside frame in " + match_path.string());
      matches.push_back({Vec2(r.x1, r.y1), Vec2(r.x2, r.y2), r.score});
    }
    b.matches_prev = std::move(matches);
  }
  return b;
}

// Validated bundles for a whole sequence. Frame 0 may omit flow; every later
// frame must carry it.
inline std::vector<FrameBundle> ingest(const fs::path& root) {
  Intrinsics k = read_intrinsics_txt(root / "intrinsics.txt");
  auto ids = sequence_frame_ids(root);
  if (ids.empty()) throw IoError("no frames found under " + root.string());
  std::vector<FrameBundle> frames;
  frames.reserve(ids.size());
  for (size_t i = 0; i < ids.size(); ++i)
    frames.push_back(load_frame(root, ids[i], k, /*expect_flow=*/i > 0));
  return frames;
}

// ---------------------------------------------------------------------------
// Segmentation driver: full three-cue pipeline on the first pair and whenever
// the new-mover monitor fires, tracked propagation otherwise.

struct SegmentationOutput {
  std::vector<MaskGrid> masks;          // m_dyn per frame
  std::vector<Grid<float>> residuals;   // geometry-cue residual per frame (t >= 1)
  std::vector<std::uint8_t> full_runs;  // 1 where the full pipeline ran
  std::vector<double> tau_geo;
};

namespace detail {

struct CueRun {
  MaskGrid m_dyn;
  bool fell_back = false;
};

inline CueRun run_three_cues(const FrameBundle& cur, const FrameBundle& prev,
                             const GeometryCueResult& geo, const PipelineConfig& cfg) {
  MaskGrid all_valid(cur.intrinsics.width, cur.intrinsics.height, 1);
  GmmResult gmm;
  MaskGrid m_flow(cur.intrinsics.width, cur.intrinsics.height, 0);
  try {
    gmm = fit_gmm(*cur.flow_prev, all_valid, cfg.gmm_k, cfg.seed ^ cur.frame_id);
    m_flow = flow_motion_cue(gmm, *cur.flow_prev);
  } catch (const DegenerateInputError&) {
    // not enough pixels for the requested k: flow cue contributes nothing
  }
  RobustCueParams params;
  params.mag_k = cfg.mag_k;
  params.ang_max = cfg.ang_max_deg * M_PI / 180.0;
  params.min_mean_disp = cfg.min_mean_disp;
  KeypointMatches matches = cur.matches_prev.value_or(KeypointMatches{});
  auto robust = robust_motion_cue(matches, cur.depth, prev.depth, cur.intrinsics, prev.intrinsics,
                                  cur.init_pose, prev.init_pose, m_flow, geo.m_geo, params);
  return {robust.m_dyn, robust.fell_back};
}

}  // namespace detail

inline SegmentationOutput segment_sequence(const std::vector<FrameBundle>& frames,
                                           const PipelineConfig& cfg) {
  SegmentationOutput out;
  const size_t n = frames.size();
  if (n == 0) return out;
  const int w = frames[0].intrinsics.width, h = frames[0].intrinsics.height;
  out.masks.assign(n, MaskGrid(w, h, 0));
  out.residuals.assign(n, Grid<float>(w, h, 0.f));
  out.full_runs.assign(n, 0);
  out.tau_geo.assign(n, 0.0);
  if (n == 1) return out;

  for (size_t t = 1; t < n; ++t) {
    const FrameBundle& cur = frames[t];
    const FrameBundle& prev = frames[t - 1];
    if (!cur.flow_prev) throw ContractError("segment: frame lacks flow to previous frame");
    GeometryCueResult geo = geometry_motion_cue(*cur.flow_prev, cur.depth, cur.intrinsics,
                                                prev.intrinsics, cur.init_pose, prev.init_pose);
    out.residuals[t] = geo.residual;
    out.tau_geo[t] = geo.tau;

    if (t == 1) {
      auto cue = detail::run_three_cues(cur, prev, geo, cfg);
      out.masks[1] = cue.m_dyn;
      out.full_runs[1] = 1;
      // frame 0 gets the first pair's mask warped backward along the pair flow
      out.masks[0] = propagate_mask(out.masks[1], *cur.flow_prev);
      continue;
    }

    MaskGrid tracked = track_mask(out.masks[t - 1], *cur.flow_prev);
    if (!geo.degenerate) {
      // Flow-warp tracking accretes revealed background behind a mover: the
      // uncovered pixels' backward flow lands inside the mover's previous
      // footprint. Pixels whose current residual is clearly static are
      // dropped before the monitor runs.
      std::vector<double> vals;
      for (size_t i = 0; i < geo.valid.size(); ++i)
        if (geo.valid.data()[i]) vals.push_back(geo.residual.data()[i]);
      double veto = 0.5 * geo.tau;
      if (!vals.empty()) {
        std::nth_element(vals.begin(), vals.begin() + vals.size() / 2, vals.end());
        veto = std::max(veto, 3.0 * vals[vals.size() / 2]);
      }
      for (int y = 0; y < tracked.height(); ++y)
        for (int x = 0; x < tracked.width(); ++x)
          if (tracked(x, y) && geo.valid(x, y) && geo.residual(x, y) < veto) tracked(x, y) = 0;
      tracked = morphological_close(tracked);
    }
    if (detect_new_movers(geo.m_geo, tracked, cfg.delta_new)) {
      auto cue = detail::run_three_cues(cur, prev, geo, cfg);
      out.masks[t] = cue.m_dyn;
      out.full_runs[t] = 1;
    } else {
      out.masks[t] = tracked;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// run(): the full pipeline over one sequence.

struct RecallEvent {
  std::uint64_t frame_id = 0;
  size_t query_cloud_size = 0;
  size_t query_feature_count = 0;
  std::uint64_t vote_winner = 0;
  bool accepted = false;
  std::uint64_t map_id = 0;
  size_t inliers = 0;
  double rmse = 0.0;
};

struct RunResult {
  std::vector<Pose> refined_trajectory;  // camera-to-world
  std::vector<Pose> initial_trajectory;  // camera-to-world
  std::vector<MaskGrid> masks;
  std::vector<RecallEvent> recall_events;
  std::optional<std::uint64_t> created_map;
  std::optional<std::uint64_t> updated_map;
  double voxel_size = 0.0;
  SolveReport solver_report;
  nlohmann::ordered_json metrics;
};

inline RunResult run(const fs::path& sequence_root, MemoryBank& bank, const PipelineConfig& cfg,
                     const fs::path& output_root) {
  cfg.validate();
  using clock = std::chrono::steady_clock;
  auto ms_since = [](clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  };
  nlohmann::ordered_json stage_ms;

  auto t_ingest = clock::now();
  std::vector<FrameBundle> frames = ingest(sequence_root);
  stage_ms["ingest"] = ms_since(t_ingest);

  RunResult result;
  bank.thresholds() = cfg.recall;

  // ---- segmentation
  auto t_seg = clock::now();
  SegmentationOutput seg = segment_sequence(frames, cfg);
  stage_ms["segment"] = ms_since(t_seg);
  result.masks = seg.masks;

  // ---- static cloud accumulation + keyframe features + memory stage
  auto t_mem = clock::now();
  PointCloud accumulated;
  double voxel = cfg.voxel_size;
  std::vector<FeatureVec> frame_feats;
  std::vector<std::uint64_t> feat_frame_ids;
  size_t kf_added_upto = 0;  // features already pushed to the bank for the accepted map
  std::optional<std::pair<std::uint64_t, AlignmentResult>> last_accept;

  auto accumulate_frame = [&](size_t t) {
    const FrameBundle& f = frames[t];
    PointCloud pts;
    Pose cam_to_world = f.init_pose.inverse();
    for (int y = 0; y < f.intrinsics.height; ++y)
      for (int x = 0; x < f.intrinsics.width; ++x) {
        if (!f.depth.valid(x, y) || seg.masks[t](x, y)) continue;
        if (f.confidence(x, y) < cfg.conf_min) continue;
        double d = f.depth.values(x, y);
        Vec3 cam(d * (x - f.intrinsics.cx) / f.intrinsics.fx,
                 d * (y - f.intrinsics.cy) / f.intrinsics.fy, d);
        pts.points.push_back(cam_to_world * cam);
        pts.confidence.push_back(f.confidence(x, y));
      }
    if (pts.size() == 0) return;
    if (voxel <= 0) voxel = std::max(1e-6, cfg.voxel_frac * pts.diameter());
    if (!accumulated.has_confidence() && accumulated.size() == 0)
      accumulated.confidence.clear();
    accumulated.points.insert(accumulated.points.end(), pts.points.begin(), pts.points.end());
    accumulated.confidence.insert(accumulated.confidence.end(), pts.confidence.begin(),
                                  pts.confidence.end());
    accumulated = voxel_downsample(accumulated, voxel);
  };

  auto keyframe_features = [&]() {
    std::vector<std::pair<std::uint64_t, FeatureVec>> out;
    if (frame_feats.empty()) return out;
    double d_target = cfg.kf_dist;
    if (d_target < 0) {
      double sum = 0.0;
      for (size_t i = 1; i < frame_feats.size(); ++i)
        sum += feature_distance(frame_feats[i].values, frame_feats[i - 1].values);
      d_target = frame_feats.size() > 1 ? sum / (frame_feats.size() - 1) : 0.0;
    }
    for (size_t idx : select_keyframes(frame_feats, d_target))
      out.emplace_back(feat_frame_ids[idx], frame_feats[idx]);
    return out;
  };

  for (size_t t = 0; t < frames.size(); ++t) {
    if (t % cfg.cloud_stride == 0) accumulate_frame(t);
    if (frames[t].visual_feat) {
      frame_feats.push_back(*frames[t].visual_feat);
      feat_frame_ids.push_back(frames[t].frame_id);
    }

    bool cadence_point = (t + 1) % cfg.cadence == 0;
    if (!cadence_point || accumulated.size() == 0 || frame_feats.empty()) continue;

    auto kf = keyframe_features();
    std::vector<FeatureVec> query_feats;
    for (const auto& [fid, feat] : kf) query_feats.push_back(feat);
    if (query_feats.empty() || bank.size() == 0) continue;

    RecallResult recall = bank.recall(query_feats, accumulated);
    RecallEvent ev;
    ev.frame_id = frames[t].frame_id;
    ev.query_cloud_size = accumulated.size();
    ev.query_feature_count = query_feats.size();
    ev.vote_winner = recall.vote_winner;
    if (recall.alignment) {
      ev.inliers = recall.alignment->inlier_count;
      ev.rmse = recall.alignment->rmse;
    }
    if (recall.candidate_map) {
      ev.accepted = true;
      ev.map_id = *recall.candidate_map;
      std::vector<std::pair<std::uint64_t, FeatureVec>> new_kf(kf.begin() + kf_added_upto,
                                                               kf.end());
      bank.update_map(*recall.candidate_map, accumulated, new_kf, *recall.alignment);
      kf_added_upto = kf.size();
      last_accept = {*recall.candidate_map, *recall.alignment};
      result.updated_map = *recall.candidate_map;
    }
    result.recall_events.push_back(ev);
  }

  // unrecalled scene: one new map at sequence end
  if (!last_accept && accumulated.size() > 0) {
    double v = voxel > 0 ? voxel : std::max(1e-6, cfg.voxel_frac * accumulated.diameter());
    result.created_map =
        bank.create_map(accumulated, keyframe_features(), occupancy_geo_feature(accumulated), v);
  }
  result.voxel_size = voxel;
  stage_ms["memory"] = ms_since(t_mem);

  // ---- factor graph over the whole sequence
  auto t_opt = clock::now();
  std::vector<SelectView> views;
  for (size_t t = 0; t < frames.size(); ++t)
    views.push_back({&frames[t].depth, &frames[t].confidence, &seg.masks[t],
                     frames[t].intrinsics, frames[t].init_pose.inverse()});
  auto candidates = select_landmarks(views, cfg.conf_min, cfg.grid_step);

  AssociationConfig assoc_cfg;
  assoc_cfg.tau_min = cfg.tau_min;
  assoc_cfg.alpha_assoc = cfg.alpha_assoc;
  assoc_cfg.huber_delta = cfg.huber_px;
  std::vector<Landmark> seeds;
  if (last_accept)
    seeds = memory_landmark_seeds(bank.maps().at(last_accept->first), last_accept->second,
                                  cfg.alpha_mem);
  auto assoc = associate_landmarks(candidates, views, assoc_cfg, seeds);

  FactorGraphProblem graph;
  for (size_t t = 0; t < frames.size(); ++t) {
    graph.poses.push_back(frames[t].init_pose.inverse());
    graph.init_poses.push_back(frames[t].init_pose.inverse());
    graph.intrinsics.push_back(frames[t].intrinsics);
  }
  graph.landmarks = std::move(assoc.landmarks);
  graph.observations = std::move(assoc.observations);
  graph.sigma_prior = Vec6::Constant(cfg.sigma_prior);
  graph.sigma_motion = Vec6::Constant(cfg.sigma_motion);
  graph.huber_delta = cfg.huber_px;

  SolveOptions solve_opts;
  solve_opts.max_iter = cfg.solver_max_iter;
  solve_opts.outer_rounds = cfg.solver_rounds;
  result.initial_trajectory = graph.init_poses;
  result.solver_report = solve(graph);
  result.refined_trajectory = graph.poses;
  stage_ms["optimize"] = ms_since(t_opt);

  // ---- outputs (staged until every stage has succeeded)
  auto t_out = clock::now();
  fs::create_directories(output_root / "masks");
  for (size_t t = 0; t < frames.size(); ++t)
    write_mask_pgm(output_root / "masks" / (frame_stem(frames[t].frame_id) + ".pgm"),
                   seg.masks[t]);
  write_trajectory_tum(output_root / "trajectory.tum", result.refined_trajectory);
  fs::path bank_root = cfg.bank_dir.empty() ? output_root / "bank" : fs::path(cfg.bank_dir);
  bank.persist(bank_root);

  nlohmann::ordered_json metrics;
  metrics["frames"] = frames.size();
  metrics["full_segmentation_runs"] = 0;
  int full_runs = 0;
  for (auto v : seg.full_runs) full_runs += v;
  metrics["full_segmentation_runs"] = full_runs;
  metrics["voxel_size"] = result.voxel_size;
  metrics["landmarks"] = graph.landmarks.size();
  metrics["observations"] = graph.observations.size();
  metrics["solver"] = {{"initial_cost", result.solver_report.initial_cost},
                       {"final_cost", result.solver_report.final_cost},
                       {"iterations", result.solver_report.total_iterations},
                       {"rounds", result.solver_report.rounds},
                       {"termination", result.solver_report.termination},
                       {"deactivated_outliers", result.solver_report.deactivated_outliers}};
  nlohmann::ordered_json events = nlohmann::ordered_json::array();
  for (const auto& ev : result.recall_events)
    events.push_back({{"frame", ev.frame_id},
                      {"query_cloud", ev.query_cloud_size},
                      {"query_feats", ev.query_feature_count},
                      {"vote_winner", ev.vote_winner},
                      {"accepted", ev.accepted},
                      {"map_id", ev.map_id},
                      {"inliers", ev.inliers},
                      {"rmse", ev.rmse}});
  metrics["recall_events"] = events;
  if (result.created_map) metrics["created_map"] = *result.created_map;
  if (result.updated_map) metrics["updated_map"] = *result.updated_map;
  stage_ms["write"] = ms_since(t_out);
  metrics["stage_times_ms"] = stage_ms;
  result.metrics = metrics;
  atomic_write(output_root / "metrics.json",
               [&](std::ostream& os) { os << metrics.dump(2) << "\n"; });
  return result;
}

}  // namespace cogmap
