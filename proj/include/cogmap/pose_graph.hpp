#pragma once

// Factor-graph refinement of camera trajectories over static landmarks:
// landmark selection/association, the three factor types (projection, prior,
// inter-frame motion), and a Levenberg-Marquardt solver with IRLS-Huber
// robustification, landmark Schur complement, SVD rotation cleanup, and
// median-based outlier deactivation between outer rounds.
//
// Pose variables here are camera-to-world. The stored frame extrinsics are
// world-to-camera; callers convert when building the problem. This choice
// makes the relative-motion factor and the total cost exactly invariant to a
// common left-multiplied rigid transform of all poses and landmarks (the
// trajectory gauge), with the prior factor pinning that gauge.
//
// Pose updates use the left retraction T <- exp(delta) * T; all analytic
// Jacobians below are with respect to that perturbation.

#include <functional>
#include <map>
#include <optional>
#include <unordered_map>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "cogmap/core.hpp"
#include "cogmap/geometry.hpp"
#include "cogmap/icp.hpp"
#include "cogmap/memory_bank.hpp"

namespace cogmap {

using Mat63 = Eigen::Matrix<double, 6, 3>;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Mat26 = Eigen::Matrix<double, 2, 6>;

// ---------------------------------------------------------------------------
// Graph data.

struct Landmark {
  std::uint64_t id = 0;
  Vec3 position = Vec3::Zero();
  bool from_memory = false;
  double sigma_scale = 1.0;  // multiplies sigma_proj of observations of this landmark
};

struct Observation {
  int frame = 0;
  std::uint64_t landmark = 0;
  Vec2 pixel = Vec2::Zero();
  Mat2 sigma_proj = Mat2::Identity();  // pixels^2
};

struct FactorGraphProblem {
  std::vector<Pose> poses;       // camera-to-world, optimized
  std::vector<Pose> init_poses;  // anchors for the prior and motion factors
  std::vector<Intrinsics> intrinsics;
  std::vector<Landmark> landmarks;
  std::vector<Observation> observations;
  Vec6 sigma_prior = Vec6::Constant(1e-6);   // diagonal variances [m^2; rad^2]
  Vec6 sigma_motion = Vec6::Constant(1e-2);  // diagonal variances [m^2; rad^2]
  double huber_delta = 2.0;                  // pixels, on the whitened residual norm
  bool use_prior = true;

  void validate() const {
    if (poses.empty()) throw ContractError("FactorGraphProblem: no poses");
    if (poses.size() != init_poses.size() || poses.size() != intrinsics.size())
      throw ContractError("FactorGraphProblem: pose/init/intrinsics size mismatch");
    std::map<std::uint64_t, size_t> ids;
    for (size_t i = 0; i < landmarks.size(); ++i) ids[landmarks[i].id] = i;
    if (ids.size() != landmarks.size()) throw ContractError("FactorGraphProblem: duplicate landmark ids");
    for (const auto& o : observations) {
      if (o.frame < 0 || o.frame >= static_cast<int>(poses.size()))
        throw ContractError("FactorGraphProblem: observation references missing frame");
      if (!ids.count(o.landmark))
        throw ContractError("FactorGraphProblem: observation references missing landmark");
      Eigen::SelfAdjointEigenSolver<Mat2> es(o.sigma_proj);
      if (es.eigenvalues().minCoeff() <= 0)
        throw ContractError("FactorGraphProblem: sigma_proj must be positive definite");
    }
  }
};

// ---------------------------------------------------------------------------
// Residuals and analytic Jacobians.

struct ProjectionResidual {
  Vec2 residual = Vec2::Zero();
  bool behind = false;  // observation deactivated for this evaluation
};

inline ProjectionResidual residual_projection(const Pose& cam_to_world, const Vec3& landmark,
                                              const Intrinsics& k, const Vec2& z) {
  Pose w2c = cam_to_world.inverse();
  Vec3 p_cam = w2c * landmark;
  Projection pr = project(p_cam, k);
  if (pr.behind) return {Vec2::Zero(), true};
  return {pr.pixel - z, false};
}

// d(residual) / d(pose perturbation), d(residual) / d(landmark)
struct ProjectionJacobians {
  Mat26 j_pose = Mat26::Zero();
  Mat23 j_landmark = Mat23::Zero();
  bool behind = false;
};

inline ProjectionJacobians projection_jacobians(const Pose& cam_to_world, const Vec3& landmark,
                                                const Intrinsics& k) {
  ProjectionJacobians out;
  Pose w2c = cam_to_world.inverse();
  Vec3 p = w2c * landmark;
  if (!(p.z() > 1e-6)) {
    out.behind = true;
    return out;
  }
  Mat23 j_pi;
  double iz = 1.0 / p.z();
  j_pi << k.fx * iz, 0, -k.fx * p.x() * iz * iz, 0, k.fy * iz, -k.fy * p.y() * iz * iz;
  // T <- exp(delta) T  =>  p_cam = T^-1 exp(-delta) L
  out.j_pose.leftCols<3>() = -j_pi * w2c.rotation;
  out.j_pose.rightCols<3>() = j_pi * w2c.rotation * skew(landmark);
  out.j_landmark = j_pi * w2c.rotation;
  return out;
}

inline Vec6 residual_prior(const Pose& t0, const Pose& t0_init) { return se3_diff(t0_init, t0); }

inline Mat6 prior_jacobian(const Pose& t0, const Pose& t0_init) {
  Vec6 r = residual_prior(t0, t0_init);
  return se3_left_jacobian_inv(r) * se3_adjoint(t0_init.inverse());
}

inline Vec6 residual_motion(const Pose& t_prev, const Pose& t_cur, const Pose& t_prev_init,
                            const Pose& t_cur_init) {
  Pose rel_init = t_prev_init.inverse() * t_cur_init;
  Pose rel = t_prev.inverse() * t_cur;
  return se3_diff(rel_init, rel);
}

struct MotionJacobians {
  Mat6 j_prev, j_cur;
};

inline MotionJacobians motion_jacobians(const Pose& t_prev, const Pose& t_cur,
                                        const Pose& t_prev_init, const Pose& t_cur_init) {
  Vec6 r = residual_motion(t_prev, t_cur, t_prev_init, t_cur_init);
  Pose rel_init = t_prev_init.inverse() * t_cur_init;
  Pose b = rel_init.inverse() * t_prev.inverse();
  Mat6 base = se3_left_jacobian_inv(r) * se3_adjoint(b);
  return {Mat6(-base), base};
}

struct HuberResult {
  double cost = 0.0;
  double weight = 1.0;  // IRLS weight
};

inline HuberResult huber(double r_norm, double delta) {
  if (r_norm <= delta) return {0.5 * r_norm * r_norm, 1.0};
  return {delta * (r_norm - 0.5 * delta), delta / r_norm};
}

// ---------------------------------------------------------------------------
// Landmark selection.

struct LandmarkCandidate {
  int frame = 0;
  Vec2 pixel = Vec2::Zero();
  Vec3 world = Vec3::Zero();  // lifted through the frame's initial pose
  double confidence = 1.0;
};

struct SelectView {
  const DepthMap* depth = nullptr;
  const Grid<float>* confidence = nullptr;  // optional
  const MaskGrid* m_dyn = nullptr;          // optional: no mask = all static
  Intrinsics k;
  Pose cam_to_world;  // initial estimate
};

// Samples a grid_step lattice (cell centers) of static, confident,
// valid-depth pixels and lifts them to world points. A frame with zero
// qualifying pixels simply contributes no candidates.
inline std::vector<LandmarkCandidate> select_landmarks(const std::vector<SelectView>& views,
                                                       double conf_min, int grid_step) {
  if (grid_step < 1) throw ContractError("select_landmarks: grid_step must be >= 1");
  std::vector<LandmarkCandidate> out;
  for (size_t f = 0; f < views.size(); ++f) {
    const SelectView& v = views[f];
    if (!v.depth) throw ContractError("select_landmarks: missing depth");
    const int nx = v.k.width / grid_step, ny = v.k.height / grid_step;
    for (int gy = 0; gy < ny; ++gy) {
      for (int gx = 0; gx < nx; ++gx) {
        int x = gx * grid_step + grid_step / 2;
        int y = gy * grid_step + grid_step / 2;
        if (!v.depth->valid.in_bounds(x, y) || !v.depth->valid(x, y)) continue;
        if (v.m_dyn && (*v.m_dyn)(x, y)) continue;
        double conf = v.confidence ? (*v.confidence)(x, y) : 1.0;
        if (conf < conf_min) continue;
        double d = v.depth->values(x, y);
        Vec3 cam(d * (x - v.k.cx) / v.k.fx, d * (y - v.k.cy) / v.k.fy, d);
        out.push_back({static_cast<int>(f), Vec2(x, y), v.cam_to_world * cam, conf});
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Landmark association.

struct AssociationConfig {
  double tau_min = 0.05;     // meters
  double alpha_assoc = 0.01; // tau_dist = max(tau_min, d_scene * alpha_assoc)
  double d_scene = 0.0;      // <= 0: bounding-box diagonal of the candidates
  double huber_delta = 2.0;  // pixels; reprojection gate is 2x this
  double sigma_proj_px = 1.0;
};

struct AssociationResult {
  std::vector<Landmark> landmarks;
  std::vector<Observation> observations;
  double tau_dist = 0.0;
};

inline double association_tau(const AssociationConfig& cfg, double d_scene) {
  return std::max(cfg.tau_min, d_scene * cfg.alpha_assoc);
}

// Greedy spatial clustering with a two-step gate: world distance below
// tau_dist, then reprojection into every frame already observing the landmark
// within 2x huber_delta of that frame's observation. Seed landmarks (from
// memory) keep their stored positions; fresh landmark positions are the
// running mean of their member points. One observation per frame per
// landmark.
inline AssociationResult associate_landmarks(const std::vector<LandmarkCandidate>& candidates,
                                             const std::vector<SelectView>& views,
                                             const AssociationConfig& cfg,
                                             const std::vector<Landmark>& seeds = {}) {
  AssociationResult out;
  double d_scene = cfg.d_scene;
  if (d_scene <= 0 && !candidates.empty()) {
    Vec3 mn = candidates[0].world, mx = candidates[0].world;
    for (const auto& c : candidates) {
      mn = mn.cwiseMin(c.world);
      mx = mx.cwiseMax(c.world);
    }
    d_scene = (mx - mn).norm();
  }
  const double tau = association_tau(cfg, d_scene);
  out.tau_dist = tau;

  struct Cell {
    std::vector<size_t> landmark_indices;
  };
  auto cell_key = [tau](const Vec3& p) {
    return std::tuple<std::int64_t, std::int64_t, std::int64_t>{
        static_cast<std::int64_t>(std::floor(p.x() / tau)),
        static_cast<std::int64_t>(std::floor(p.y() / tau)),
        static_cast<std::int64_t>(std::floor(p.z() / tau))};
  };
  std::map<std::tuple<std::int64_t, std::int64_t, std::int64_t>, Cell> grid;

  struct Track {
    Vec3 sum = Vec3::Zero();
    size_t count = 0;
    std::vector<size_t> obs_indices;   // into out.observations
    std::vector<int> frames;           // frames already observing
  };
  std::vector<Track> tracks;

  std::uint64_t next_id = 1;
  for (const auto& s : seeds) {
    Landmark lm = s;
    lm.id = next_id++;
    out.landmarks.push_back(lm);
    tracks.push_back({lm.position, 1, {}, {}});
    grid[cell_key(lm.position)].landmark_indices.push_back(out.landmarks.size() - 1);
  }

  for (const auto& c : candidates) {
    // nearest existing landmark within tau (27-cell neighborhood)
    auto [kx, ky, kz] = cell_key(c.world);
    size_t best = out.landmarks.size();
    double best_d = tau;
    for (std::int64_t dx = -1; dx <= 1; ++dx)
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          auto it = grid.find({kx + dx, ky + dy, kz + dz});
          if (it == grid.end()) continue;
          for (size_t li : it->second.landmark_indices) {
            double d = (out.landmarks[li].position - c.world).norm();
            if (d < best_d || (d == best_d && li < best)) {
              best_d = d;
              best = li;
            }
          }
        }

    bool joined = false;
    if (best < out.landmarks.size()) {
      Track& tr = tracks[best];
      bool gate_ok = true;
      // one observation per frame per landmark
      for (int fr : tr.frames)
        if (fr == c.frame) {
          gate_ok = false;
          break;
        }
      // step 2: the candidate must reproject within 2x huber_delta of every
      // observation the landmark already has
      if (gate_ok) {
        for (size_t oi : tr.obs_indices) {
          const Observation& o = out.observations[oi];
          ProjectionResidual pr =
              residual_projection(views[o.frame].cam_to_world, c.world, views[o.frame].k, o.pixel);
          if (pr.behind || pr.residual.norm() > 2.0 * cfg.huber_delta) {
            gate_ok = false;
            break;
          }
        }
      }
      if (gate_ok) {
        joined = true;
        out.observations.push_back({c.frame, out.landmarks[best].id, c.pixel,
                                    Mat2::Identity() * cfg.sigma_proj_px * cfg.sigma_proj_px *
                                        out.landmarks[best].sigma_scale});
        tr.obs_indices.push_back(out.observations.size() - 1);
        tr.frames.push_back(c.frame);
        if (!out.landmarks[best].from_memory) {
          tr.sum += c.world;
          ++tr.count;
          out.landmarks[best].position = tr.sum / static_cast<double>(tr.count);
        }
      }
    }
    if (!joined) {
      Landmark lm;
      lm.id = next_id++;
      lm.position = c.world;
      out.landmarks.push_back(lm);
      tracks.push_back({c.world, 1, {}, {}});
      size_t li = out.landmarks.size() - 1;
      grid[cell_key(c.world)].landmark_indices.push_back(li);
      out.observations.push_back(
          {c.frame, lm.id, c.pixel, Mat2::Identity() * cfg.sigma_proj_px * cfg.sigma_proj_px});
      tracks[li].obs_indices.push_back(out.observations.size() - 1);
      tracks[li].frames.push_back(c.frame);
    }
  }
  return out;
}

// Transforms the recalled map's stored points into the current coordinate
// frame (alignment maps query -> map, so its inverse is applied) and appends
// them as trusted landmarks whose observation covariances are scaled by
// alpha_mem once observations attach.
inline std::vector<Landmark> memory_landmark_seeds(const MemoryMap& recalled,
                                                   const AlignmentResult& alignment,
                                                   double alpha_mem = 0.25) {
  if (!alignment.accepted) throw ContractError("memory landmarks require an accepted alignment");
  if (!(alpha_mem > 0.0) || alpha_mem > 1.0)
    throw ContractError("alpha_mem must lie in (0, 1]");
  Pose map_to_cur = alignment.transform.inverse();
  std::vector<Landmark> seeds;
  seeds.reserve(recalled.static_cloud.size());
  for (const auto& p : recalled.static_cloud.points) {
    Landmark lm;
    lm.position = map_to_cur * p;
    lm.from_memory = true;
    lm.sigma_scale = alpha_mem;
    seeds.push_back(lm);
  }
  return seeds;
}

inline void inject_memory_landmarks(FactorGraphProblem& graph, const MemoryMap& recalled,
                                    const AlignmentResult& alignment, double alpha_mem = 0.25) {
  std::uint64_t next_id = 1;
  for (const auto& lm : graph.landmarks) next_id = std::max(next_id, lm.id + 1);
  for (auto lm : memory_landmark_seeds(recalled, alignment, alpha_mem)) {
    lm.id = next_id++;
    graph.landmarks.push_back(lm);
  }
}

// ---------------------------------------------------------------------------
// Solver.

struct SolveOptions {
  int max_iter = 100;         // LM iterations per outer round
  int outer_rounds = 3;       // outlier re-thresholding rounds
  double lambda_init = 1e-4;
  double lambda_max = 1e8;
  double cost_tol = 1e-8;  // relative decrease
  double step_tol = 1e-8;
  double outlier_median_mult = 3.0;
  size_t min_obs_per_landmark = 2;  // below this, non-memory landmarks drop out
};

struct RoundCosts {
  int round = 0;
  std::vector<double> accepted_costs;  // cost after each accepted LM step
};

struct SolveReport {
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int total_iterations = 0;
  int rounds = 0;
  size_t active_observations = 0;
  size_t deactivated_outliers = 0;
  size_t dropped_landmarks = 0;
  size_t behind_camera_events = 0;
  std::vector<RoundCosts> cost_history;
  std::string termination;
  bool converged = false;
};

namespace detail {

struct ObsState {
  Mat2 whitener = Mat2::Identity();  // sigma^{-1/2}
  bool active = true;
  int landmark_slot = -1;  // -1: position held constant (memory or dropped)
  size_t landmark_index = 0;
};

inline Mat2 inverse_sqrt_2x2(const Mat2& sigma) {
  Eigen::SelfAdjointEigenSolver<Mat2> es(sigma);
  Vec2 ev = es.eigenvalues();
  Mat2 d = Mat2::Zero();
  d(0, 0) = 1.0 / std::sqrt(ev(0));
  d(1, 1) = 1.0 / std::sqrt(ev(1));
  return es.eigenvectors() * d * es.eigenvectors().transpose();
}

}  // namespace detail

// Total robustified cost at the problem's current state: quadratic prior and
// motion terms, Huber on whitened projection norms. Behind-camera
// observations contribute zero (and are counted when a counter is supplied).
inline double evaluate_cost(const FactorGraphProblem& g,
                            const std::vector<std::uint8_t>* obs_active = nullptr,
                            size_t* behind_count = nullptr) {
  double cost = 0.0;
  if (g.use_prior) {
    Vec6 r = residual_prior(g.poses[0], g.init_poses[0]);
    Vec6 w = g.sigma_prior.cwiseSqrt().cwiseInverse();
    cost += 0.5 * (w.asDiagonal() * r).squaredNorm();
  }
  Vec6 wm = g.sigma_motion.cwiseSqrt().cwiseInverse();
  for (size_t i = 1; i < g.poses.size(); ++i) {
    Vec6 r = residual_motion(g.poses[i - 1], g.poses[i], g.init_poses[i - 1], g.init_poses[i]);
    cost += 0.5 * (wm.asDiagonal() * r).squaredNorm();
  }
  std::map<std::uint64_t, const Landmark*> lm;
  for (const auto& l : g.landmarks) lm[l.id] = &l;
  for (size_t oi = 0; oi < g.observations.size(); ++oi) {
    if (obs_active && !(*obs_active)[oi]) continue;
    const Observation& o = g.observations[oi];
    ProjectionResidual pr =
        residual_projection(g.poses[o.frame], lm.at(o.landmark)->position, g.intrinsics[o.frame], o.pixel);
    if (pr.behind) {
      if (behind_count) ++*behind_count;
      continue;
    }
    Vec2 rw = detail::inverse_sqrt_2x2(o.sigma_proj) * pr.residual;
    cost += huber(rw.norm(), g.huber_delta).cost;
  }
  return cost;
}

// Levenberg-Marquardt with a landmark Schur complement. Accepted steps never
// increase the active-set cost; rotations are re-orthonormalized by SVD after
// every accepted step. Observations whose whitened residual exceeds
// outlier_median_mult x the median are deactivated between rounds and may
// reactivate later.
inline SolveReport solve(FactorGraphProblem& g, const SolveOptions& opts = {}) {
  g.validate();
  SolveReport report;

  const size_t num_poses = g.poses.size();
  const size_t num_obs = g.observations.size();
  std::unordered_map<std::uint64_t, size_t> lm_index;
  for (size_t i = 0; i < g.landmarks.size(); ++i) lm_index[g.landmarks[i].id] = i;

  std::vector<detail::ObsState> obs_state(num_obs);
  for (size_t oi = 0; oi < num_obs; ++oi) {
    obs_state[oi].whitener = detail::inverse_sqrt_2x2(g.observations[oi].sigma_proj);
    obs_state[oi].landmark_index = lm_index.at(g.observations[oi].landmark);
  }

  Vec6 w_prior = g.sigma_prior.cwiseSqrt().cwiseInverse();
  Vec6 w_motion = g.sigma_motion.cwiseSqrt().cwiseInverse();

  auto whitened_proj_norms = [&](std::vector<double>& out) {
    out.assign(num_obs, -1.0);  // -1: behind camera
    for (size_t oi = 0; oi < num_obs; ++oi) {
      const Observation& o = g.observations[oi];
      ProjectionResidual pr = residual_projection(
          g.poses[o.frame], g.landmarks[obs_state[oi].landmark_index].position,
          g.intrinsics[o.frame], o.pixel);
      if (pr.behind) continue;
      out[oi] = (obs_state[oi].whitener * pr.residual).norm();
    }
  };

  auto active_flags = [&]() {
    std::vector<std::uint8_t> f(num_obs);
    for (size_t i = 0; i < num_obs; ++i) f[i] = obs_state[i].active ? 1 : 0;
    return f;
  };

  report.initial_cost = evaluate_cost(g);
  double lambda = opts.lambda_init;
  std::vector<double> norms;
  std::vector<std::uint8_t> prev_active;

  for (int round = 0; round < opts.outer_rounds; ++round) {
    // ---- active set for this round
    if (round > 0) {
      whitened_proj_norms(norms);
      std::vector<double> live;
      for (double n : norms)
        if (n >= 0) live.push_back(n);
      if (!live.empty()) {
        std::nth_element(live.begin(), live.begin() + live.size() / 2, live.end());
        double median = live[live.size() / 2];
        // floor keeps exact synthetic data (all-zero residuals) fully active
        double thr = std::max(opts.outlier_median_mult * median, 0.5 * g.huber_delta);
        for (size_t oi = 0; oi < num_obs; ++oi)
          obs_state[oi].active = norms[oi] >= 0 ? (norms[oi] <= thr) : obs_state[oi].active;
      }
    }

    // ---- landmark slots: optimized iff enough active observations
    std::vector<size_t> active_count(g.landmarks.size(), 0);
    for (size_t oi = 0; oi < num_obs; ++oi)
      if (obs_state[oi].active) ++active_count[obs_state[oi].landmark_index];
    std::vector<size_t> slot_of(g.landmarks.size(), static_cast<size_t>(-1));
    std::vector<size_t> slot_landmarks;
    size_t dropped = 0;
    for (size_t li = 0; li < g.landmarks.size(); ++li) {
      if (active_count[li] >= opts.min_obs_per_landmark) {
        slot_of[li] = slot_landmarks.size();
        slot_landmarks.push_back(li);
      } else if (!g.landmarks[li].from_memory && active_count[li] > 0) {
        // under-constrained fresh landmark: its observations sit out this round
        for (size_t oi = 0; oi < num_obs; ++oi)
          if (obs_state[oi].landmark_index == li) obs_state[oi].active = false;
        ++dropped;
      }
      // under-observed memory landmarks stay as fixed, pose-only factors
    }
    report.dropped_landmarks = dropped;
    for (size_t oi = 0; oi < num_obs; ++oi)
      obs_state[oi].landmark_slot = static_cast<int>(slot_of[obs_state[oi].landmark_index]);

    auto act = active_flags();
    if (round > 0 && act == prev_active && report.converged) break;
    prev_active = act;

    const size_t num_slots = slot_landmarks.size();
    const size_t pose_dim = 6 * num_poses;

    double cost = evaluate_cost(g, &act, &report.behind_camera_events);
    RoundCosts rc;
    rc.round = round;
    report.converged = false;

    for (int iter = 0; iter < opts.max_iter; ++iter) {
      ++report.total_iterations;

      // ---- assemble
      Eigen::MatrixXd u = Eigen::MatrixXd::Zero(pose_dim, pose_dim);
      Eigen::VectorXd g_p = Eigen::VectorXd::Zero(pose_dim);
      std::vector<Mat3> v(num_slots, Mat3::Zero());
      std::vector<Vec3> g_l(num_slots, Vec3::Zero());
      std::vector<std::vector<std::pair<size_t, Mat63>>> w_blocks(num_slots);

      if (g.use_prior) {
        Vec6 r = residual_prior(g.poses[0], g.init_poses[0]);
        if (!r.allFinite()) throw Error("solve: non-finite residual in the prior factor");
        Mat6 j = w_prior.asDiagonal() * prior_jacobian(g.poses[0], g.init_poses[0]);
        Vec6 rw = w_prior.asDiagonal() * r;
        u.block<6, 6>(0, 0) += j.transpose() * j;
        g_p.segment<6>(0) += j.transpose() * rw;
      }
      for (size_t i = 1; i < num_poses; ++i) {
        Vec6 r = residual_motion(g.poses[i - 1], g.poses[i], g.init_poses[i - 1], g.init_poses[i]);
        if (!r.allFinite())
          throw Error("solve: non-finite residual in motion factor " + std::to_string(i));
        MotionJacobians mj =
            motion_jacobians(g.poses[i - 1], g.poses[i], g.init_poses[i - 1], g.init_poses[i]);
        Mat6 jp = w_motion.asDiagonal() * mj.j_prev;
        Mat6 jc = w_motion.asDiagonal() * mj.j_cur;
        Vec6 rw = w_motion.asDiagonal() * r;
        size_t a = 6 * (i - 1), b = 6 * i;
        u.block<6, 6>(a, a) += jp.transpose() * jp;
        u.block<6, 6>(b, b) += jc.transpose() * jc;
        u.block<6, 6>(a, b) += jp.transpose() * jc;
        u.block<6, 6>(b, a) += jc.transpose() * jp;
        g_p.segment<6>(a) += jp.transpose() * rw;
        g_p.segment<6>(b) += jc.transpose() * rw;
      }
      for (size_t oi = 0; oi < num_obs; ++oi) {
        if (!obs_state[oi].active) continue;
        const Observation& o = g.observations[oi];
        const Landmark& lm = g.landmarks[obs_state[oi].landmark_index];
        ProjectionResidual pr =
            residual_projection(g.poses[o.frame], lm.position, g.intrinsics[o.frame], o.pixel);
        if (pr.behind) {
          ++report.behind_camera_events;
          continue;
        }
        if (!pr.residual.allFinite())
          throw Error("solve: non-finite residual in projection factor (frame " +
                      std::to_string(o.frame) + ", landmark " + std::to_string(o.landmark) + ")");
        ProjectionJacobians pj = projection_jacobians(g.poses[o.frame], lm.position, g.intrinsics[o.frame]);
        Vec2 rw = obs_state[oi].whitener * pr.residual;
        double sw = std::sqrt(huber(rw.norm(), g.huber_delta).weight);
        rw *= sw;
        Mat26 jp = sw * obs_state[oi].whitener * pj.j_pose;
        size_t a = 6 * o.frame;
        u.block<6, 6>(a, a) += jp.transpose() * jp;
        g_p.segment<6>(a) += jp.transpose() * rw;
        int slot = obs_state[oi].landmark_slot;
        if (slot >= 0) {
          Mat23 jl = sw * obs_state[oi].whitener * pj.j_landmark;
          v[slot] += jl.transpose() * jl;
          g_l[slot] += jl.transpose() * rw;
          w_blocks[slot].push_back({a, jp.transpose() * jl});
        }
      }

      // ---- damped Schur solve, retrying with larger lambda on failure
      bool stepped = false;
      while (lambda <= opts.lambda_max) {
        Eigen::MatrixXd s = u;
        for (size_t d = 0; d < pose_dim; ++d) s(d, d) += lambda * std::max(u(d, d), 1e-12);
        Eigen::VectorXd rhs = -g_p;
        std::vector<Mat3> v_inv(num_slots);
        bool ok = true;
        for (size_t sl = 0; sl < num_slots; ++sl) {
          Mat3 vd = v[sl];
          for (int d = 0; d < 3; ++d) vd(d, d) += lambda * std::max(v[sl](d, d), 1e-12);
          Eigen::LDLT<Mat3> ldlt(vd);
          if (ldlt.info() != Eigen::Success) {
            ok = false;
            break;
          }
          v_inv[sl] = ldlt.solve(Mat3::Identity());
          for (const auto& [a1, w1] : w_blocks[sl]) {
            rhs.segment<6>(a1) += w1 * (v_inv[sl] * g_l[sl]);
            for (const auto& [a2, w2] : w_blocks[sl])
              s.block<6, 6>(a1, a2) -= w1 * v_inv[sl] * w2.transpose();
          }
        }
        Eigen::LDLT<Eigen::MatrixXd> ldlt;
        Eigen::VectorXd dp;
        if (ok) {
          ldlt.compute(s);
          ok = ldlt.info() == Eigen::Success;
          if (ok) {
            dp = ldlt.solve(rhs);
            ok = dp.allFinite();
          }
        }
        if (!ok) {
          lambda *= 10.0;
          continue;
        }

        // candidate state
        std::vector<Pose> cand_poses(num_poses);
        for (size_t i = 0; i < num_poses; ++i)
          cand_poses[i] = se3_exp(dp.segment<6>(6 * i)) * g.poses[i];
        std::vector<Vec3> cand_lms(num_slots);
        double step_sq = dp.squaredNorm();
        for (size_t sl = 0; sl < num_slots; ++sl) {
          Vec3 wtdp = Vec3::Zero();
          for (const auto& [a1, w1] : w_blocks[sl]) wtdp += w1.transpose() * dp.segment<6>(a1);
          Vec3 dl = -v_inv[sl] * (g_l[sl] + wtdp);
          cand_lms[sl] = g.landmarks[slot_landmarks[sl]].position + dl;
          step_sq += dl.squaredNorm();
        }

        std::vector<Pose> saved_poses = g.poses;
        std::vector<Vec3> saved_lms(num_slots);
        for (size_t sl = 0; sl < num_slots; ++sl)
          saved_lms[sl] = g.landmarks[slot_landmarks[sl]].position;
        g.poses = cand_poses;
        for (size_t sl = 0; sl < num_slots; ++sl)
          g.landmarks[slot_landmarks[sl]].position = cand_lms[sl];
        double cand_cost = evaluate_cost(g, &act);

        if (std::isfinite(cand_cost) && cand_cost < cost) {
          // accept: keep state, clean up rotations
          for (auto& p : g.poses) p.rotation = orthonormalize_rotation(p.rotation);
          double rel_decrease = (cost - cand_cost) / std::max(cost, 1e-300);
          cost = cand_cost;
          rc.accepted_costs.push_back(cost);
          lambda = std::max(lambda / 3.0, 1e-12);
          stepped = true;
          if (rel_decrease < opts.cost_tol || std::sqrt(step_sq) < opts.step_tol)
            report.converged = true;
          break;
        }
        // reject: restore and raise damping
        g.poses = saved_poses;
        for (size_t sl = 0; sl < num_slots; ++sl)
          g.landmarks[slot_landmarks[sl]].position = saved_lms[sl];
        lambda *= 10.0;
      }

      if (!stepped) {
        report.termination = lambda > opts.lambda_max ? "lambda_limit" : "no_step";
        report.converged = report.converged || rc.accepted_costs.empty();
        break;
      }
      if (report.converged) {
        report.termination = "converged";
        break;
      }
      if (iter + 1 == opts.max_iter) report.termination = "max_iter";
    }

    report.cost_history.push_back(std::move(rc));
    report.rounds = round + 1;
    if (report.termination.empty()) report.termination = "max_iter";
  }

  auto act = active_flags();
  report.active_observations = 0;
  report.deactivated_outliers = 0;
  for (size_t oi = 0; oi < num_obs; ++oi)
    (obs_state[oi].active ? report.active_observations : report.deactivated_outliers)++;
  report.final_cost = evaluate_cost(g, &act);
  return report;
}

}  // namespace cogmap
