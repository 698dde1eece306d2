#pragma once

// Deterministic synthetic-scene generator: textured planes and boxes, a
// smooth camera trajectory, optional rigid movers, exact per-frame priors
// (depth, pose, flow, confidence, features, keypoint matches) and exact
// ground truth. The same seed always produces bit-identical output; all
// texture and sampling decisions derive from hashes, not sequential RNG.
//
// Scenes are rendered by per-pixel ray casting against the quad set, which
// produces the same per-pixel nearest-surface depth a z-buffer rasterizer
// would.

#include <optional>
#include <vector>

#include "cogmap/core.hpp"
#include "cogmap/geometry.hpp"
#include "cogmap/io.hpp"
#include "cogmap/memory_bank.hpp"
#include "cogmap/pipeline.hpp"

namespace cogmap::synth {

// ---------------------------------------------------------------------------
// Scene description.

struct SceneConfig {
  std::uint64_t seed = 1;
  int width = 128, height = 96;
  int frame_count = 30;

  int num_movers = 1;
  double mover_half = 0.52;         // box half extent (m)
  double mover_orbit_radius = 0.28;
  double mover_orbit_omega = 0.7;  // radians per frame
  double camera_dolly = 0.5;       // lateral sweep amplitude (m)

  // noise, applied to the emitted FrameBundles after ground truth capture
  double noise_depth_rel = 0.0;
  double noise_pose_rot = 0.0;    // radians, RMS rotation angle
  double noise_pose_trans = 0.0;  // meters, RMS translation norm
  double noise_flow_px = 0.0;
  int num_matches = 300;

  Intrinsics intrinsics() const {
    return Intrinsics{0.9 * width, 0.9 * width, width / 2.0, height / 2.0, width, height};
  }
};

namespace detail {

inline std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline double hash01(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
  std::uint64_t h = splitmix(a ^ splitmix(b ^ splitmix(c ^ splitmix(d))));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

}  // namespace detail

// Rectangle with perpendicular edge vectors; the unit of all textures.
struct Quad {
  Vec3 origin;
  Vec3 edge_u, edge_v;  // perpendicular
  int face_id = 0;
  int mover = -1;  // index into movers, or -1 for static geometry

  Vec3 normal() const { return edge_u.cross(edge_v).normalized(); }
};

struct Mover {
  std::vector<Quad> quads;        // object frame
  std::vector<Pose> trajectory;   // object -> world, one per frame
};

struct Scene {
  SceneConfig cfg;
  std::vector<Quad> static_quads;
  std::vector<Mover> movers;
  std::vector<Pose> cam_to_world;

  // procedural texture: per-face base + checkerboard + seeded value noise
  double luminance(int face_id, double u, double v) const {
    double base = 0.35 + 0.35 * detail::hash01(cfg.seed, face_id, 11, 0);
    double cell = 0.06 + 0.14 * detail::hash01(cfg.seed, face_id, 13, 0);
    int cu = static_cast<int>(std::floor(u / cell));
    int cv = static_cast<int>(std::floor(v / cell));
    double checker = ((cu + cv) & 1) ? 0.18 : -0.18;
    const double lat = 0.05;
    double gu = u / lat, gv = v / lat;
    int iu = static_cast<int>(std::floor(gu)), iv = static_cast<int>(std::floor(gv));
    double fu = gu - iu, fv = gv - iv;
    double n00 = detail::hash01(cfg.seed, face_id, iu, iv);
    double n10 = detail::hash01(cfg.seed, face_id, iu + 1, iv);
    double n01 = detail::hash01(cfg.seed, face_id, iu, iv + 1);
    double n11 = detail::hash01(cfg.seed, face_id, iu + 1, iv + 1);
    double noise = (n00 * (1 - fu) + n10 * fu) * (1 - fv) + (n01 * (1 - fu) + n11 * fu) * fv;
    return std::clamp(base + checker + 0.2 * (noise - 0.5), 0.0, 1.0);
  }
};

namespace detail {

inline void add_box(std::vector<Quad>& quads, const Vec3& center, const Vec3& half, int& face_id,
                    int mover = -1) {
  auto add = [&](const Vec3& o, const Vec3& u, const Vec3& v) {
    quads.push_back({o, u, v, face_id++, mover});
  };
  Vec3 c = center, h = half;
  // +z / -z
  add(c + Vec3(-h.x(), -h.y(), h.z()), Vec3(2 * h.x(), 0, 0), Vec3(0, 2 * h.y(), 0));
  add(c + Vec3(-h.x(), -h.y(), -h.z()), Vec3(2 * h.x(), 0, 0), Vec3(0, 2 * h.y(), 0));
  // +x / -x
  add(c + Vec3(h.x(), -h.y(), -h.z()), Vec3(0, 2 * h.y(), 0), Vec3(0, 0, 2 * h.z()));
  add(c + Vec3(-h.x(), -h.y(), -h.z()), Vec3(0, 2 * h.y(), 0), Vec3(0, 0, 2 * h.z()));
  // +y / -y
  add(c + Vec3(-h.x(), h.y(), -h.z()), Vec3(2 * h.x(), 0, 0), Vec3(0, 0, 2 * h.z()));
  add(c + Vec3(-h.x(), -h.y(), -h.z()), Vec3(2 * h.x(), 0, 0), Vec3(0, 0, 2 * h.z()));
}

inline Pose look_at(const Vec3& eye, const Vec3& target) {
  Vec3 z = (target - eye).normalized();
  Vec3 x = Vec3(0, 1, 0).cross(z).normalized();  // world +y is "down"
  Vec3 y = z.cross(x);
  Mat3 r;
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = z;
  return Pose{r, eye};  // camera-to-world
}

}  // namespace detail

// Standard scene family keyed by the seed: a floor and a back wall (two
// depth strata under lateral camera motion), one or two static boxes, and
// num_movers orbiting textured boxes in front of the wall.
inline Scene build_scene(const SceneConfig& cfg) {
  Scene scene;
  scene.cfg = cfg;
  int face_id = 0;
  auto jitter = [&](int salt, double lo, double hi) {
    return lo + (hi - lo) * detail::hash01(cfg.seed, 7777, salt, 0);
  };

  double wall_z = jitter(1, 4.2, 5.2);
  double floor_y = jitter(2, 0.55, 0.75);
  // floor (near stratum at the image bottom)
  scene.static_quads.push_back(
      {Vec3(-3.5, floor_y, 0.8), Vec3(7, 0, 0), Vec3(0, 0, wall_z - 0.3), face_id++, -1});
  // back wall (far stratum)
  scene.static_quads.push_back(
      {Vec3(-3.5, floor_y, wall_z), Vec3(7, 0, 0), Vec3(0, -3.4, 0), face_id++, -1});
  // static boxes on the floor, clear of the mover orbit corridor
  int num_boxes = 1 + static_cast<int>(detail::hash01(cfg.seed, 3, 0, 0) * 2);
  for (int b = 0; b < num_boxes; ++b) {
    double bx = (b % 2 ? 1 : -1) * jitter(10 + b, 2.0, 2.6);
    double bz = jitter(20 + b, 1.8, 3.0);
    Vec3 half(jitter(30 + b, 0.15, 0.3), jitter(40 + b, 0.15, 0.35), jitter(50 + b, 0.15, 0.3));
    detail::add_box(scene.static_quads, Vec3(bx, floor_y - half.y(), bz), half, face_id);
  }

  for (int m = 0; m < cfg.num_movers; ++m) {
    Mover mover;
    int mf = 1000 + 100 * m;
    detail::add_box(mover.quads, Vec3::Zero(), Vec3::Constant(cfg.mover_half), mf, m);
    double cx = jitter(60 + m, -0.5, 0.5) + (m ? 0.35 : 0.0);
    double cy = jitter(70 + m, -0.8, -0.5);
    double cz = jitter(80 + m, 2.0, 2.4);
    double phase = detail::hash01(cfg.seed, 90 + m, 0, 0) * 2.0 * M_PI;
    for (int t = 0; t < cfg.frame_count; ++t) {
      double ang = phase + cfg.mover_orbit_omega * t;
      Vec3 pos(cx + cfg.mover_orbit_radius * std::cos(ang),
               cy + cfg.mover_orbit_radius * std::sin(ang), cz);
      mover.trajectory.push_back(Pose{Mat3::Identity(), pos});
    }
    scene.movers.push_back(std::move(mover));
  }

  Vec3 base_eye(jitter(4, -0.3, 0.3), jitter(5, -0.35, -0.15), jitter(6, -2.4, -1.9));
  Vec3 target(0, 0.1, wall_z - 1.2);
  for (int t = 0; t < cfg.frame_count; ++t) {
    double s = static_cast<double>(t) / std::max(1, cfg.frame_count - 1);
    Vec3 eye = base_eye + Vec3(cfg.camera_dolly * std::sin(2.2 * s), 0.06 * std::sin(4.0 * s),
                               0.25 * s);
    scene.cam_to_world.push_back(detail::look_at(eye, target));
  }

  // generation error if the camera starts inside scene geometry
  for (const auto& p : scene.cam_to_world) {
    if (p.translation.y() > floor_y || p.translation.z() > wall_z)
      throw ContractError("build_scene: camera inside geometry");
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Rendering and ground truth.

struct HitRecord {
  bool hit = false;
  double t = 0.0;  // camera-frame depth along the pixel ray (z-depth)
  int quad = -1;   // index into the frame's world-space quad list
  double u = 0.0, v = 0.0;
};

struct FrameRender {
  DepthMap depth;
  MaskGrid dynamic;       // pixel covered by a mover
  Grid<float> luminance;
  Grid<std::int32_t> quad_index;  // -1 where no hit
  Grid<float> hit_u, hit_v;
};

struct WorldQuad {
  Quad quad;     // world space at this frame
  int mover;     // -1 static
  Vec3 obj_origin, obj_u, obj_v;  // object-frame geometry for movers
};

inline std::vector<WorldQuad> frame_quads(const Scene& scene, int t) {
  std::vector<WorldQuad> out;
  for (const auto& q : scene.static_quads) out.push_back({q, -1, q.origin, q.edge_u, q.edge_v});
  for (size_t m = 0; m < scene.movers.size(); ++m) {
    const Pose& pose = scene.movers[m].trajectory[t];
    for (const auto& q : scene.movers[m].quads) {
      Quad wq = q;
      wq.origin = pose * q.origin;
      wq.edge_u = pose.rotation * q.edge_u;
      wq.edge_v = pose.rotation * q.edge_v;
      out.push_back({wq, static_cast<int>(m), q.origin, q.edge_u, q.edge_v});
    }
  }
  return out;
}

// Ray-quad intersection exploiting perpendicular edges. dir is scaled so the
// hit parameter equals camera z-depth.
inline std::optional<HitRecord> intersect(const Vec3& origin, const Vec3& dir,
                                          const std::vector<WorldQuad>& quads) {
  HitRecord best;
  best.t = std::numeric_limits<double>::max();
  for (size_t i = 0; i < quads.size(); ++i) {
    const Quad& q = quads[i].quad;
    Vec3 n = q.edge_u.cross(q.edge_v);
    double denom = dir.dot(n);
    if (std::abs(denom) < 1e-12) continue;
    double t = (q.origin - origin).dot(n) / denom;
    if (t <= 1e-6 || t >= best.t) continue;
    Vec3 p = origin + t * dir - q.origin;
    double uu = q.edge_u.squaredNorm(), vv = q.edge_v.squaredNorm();
    double a = p.dot(q.edge_u) / uu, b = p.dot(q.edge_v) / vv;
    if (a < 0 || a > 1 || b < 0 || b > 1) continue;
    best.hit = true;
    best.t = t;
    best.quad = static_cast<int>(i);
    best.u = a;
    best.v = b;
  }
  if (!best.hit) return std::nullopt;
  return best;
}

inline FrameRender render_frame(const Scene& scene, int t) {
  const Intrinsics k = scene.cfg.intrinsics();
  const Pose& c2w = scene.cam_to_world[t];
  auto quads = frame_quads(scene, t);

  FrameRender r;
  r.depth = DepthMap(k.width, k.height);
  r.dynamic = MaskGrid(k.width, k.height, 0);
  r.luminance = Grid<float>(k.width, k.height, 0.f);
  r.quad_index = Grid<std::int32_t>(k.width, k.height, -1);
  r.hit_u = Grid<float>(k.width, k.height, 0.f);
  r.hit_v = Grid<float>(k.width, k.height, 0.f);

  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      Vec3 dir_cam((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
      Vec3 dir_world = c2w.rotation * dir_cam;  // |dir_z(cam)| = 1: t is z-depth
      auto hit = intersect(c2w.translation, dir_world, quads);
      if (!hit) continue;
      r.depth.values(x, y) = static_cast<float>(hit->t);
      r.depth.valid(x, y) = 1;
      r.quad_index(x, y) = hit->quad;
      r.hit_u(x, y) = static_cast<float>(hit->u);
      r.hit_v(x, y) = static_cast<float>(hit->v);
      const WorldQuad& wq = quads[hit->quad];
      if (wq.mover >= 0) r.dynamic(x, y) = 1;
      // textures are sampled in object-frame coordinates so they ride along
      // with the mover
      double tex_u = hit->u * wq.obj_u.norm(), tex_v = hit->v * wq.obj_v.norm();
      r.luminance(x, y) = static_cast<float>(scene.luminance(wq.quad.face_id, tex_u, tex_v));
    }
  }
  return r;
}

struct GroundTruth {
  std::vector<Pose> cam_to_world;
  std::vector<DepthMap> depth;
  std::vector<MaskGrid> dynamic_mask;
  std::vector<Grid<float>> luminance;
  std::vector<FlowField> flow;       // t -> t-1, anchored at frame t; flow[0] = 0
  std::vector<MaskGrid> flow_valid;  // correspondence lands in front of the previous camera
  std::vector<KeypointMatches> matches;  // exact, per frame (empty at t = 0)
  PointCloud static_cloud;           // world frame, quad-grid sampled
};

struct Generated {
  std::vector<FrameBundle> frames;
  GroundTruth gt;
};

inline Generated generate(const SceneConfig& cfg) {
  Scene scene = build_scene(cfg);
  const Intrinsics k = cfg.intrinsics();
  Generated out;
  out.gt.cam_to_world = scene.cam_to_world;

  std::vector<FrameRender> renders;
  renders.reserve(cfg.frame_count);
  for (int t = 0; t < cfg.frame_count; ++t) renders.push_back(render_frame(scene, t));

  std::vector<std::vector<WorldQuad>> quads;
  quads.reserve(cfg.frame_count);
  for (int t = 0; t < cfg.frame_count; ++t) quads.push_back(frame_quads(scene, t));

  auto correspond_fast = [&](int t, int t2, int x, int y) -> std::optional<Vec2> {
    const FrameRender& render = renders[t];
    if (!render.depth.valid(x, y)) return std::nullopt;
    double d = render.depth.values(x, y);
    Vec3 cam(d * (x - k.cx) / k.fx, d * (y - k.cy) / k.fy, d);
    Vec3 world = scene.cam_to_world[t] * cam;
    const WorldQuad& wq = quads[t][render.quad_index(x, y)];
    if (wq.mover >= 0) {
      Vec3 obj = wq.obj_origin + render.hit_u(x, y) * wq.obj_u + render.hit_v(x, y) * wq.obj_v;
      world = scene.movers[wq.mover].trajectory[t2] * obj;
    }
    Projection pr = project(scene.cam_to_world[t2].inverse() * world, k);
    if (pr.behind) return std::nullopt;
    return pr.pixel;
  };

  for (int t = 0; t < cfg.frame_count; ++t) {
    const FrameRender& r = renders[t];
    out.gt.depth.push_back(r.depth);
    out.gt.dynamic_mask.push_back(r.dynamic);
    out.gt.luminance.push_back(r.luminance);

    FlowField flow(k.width, k.height);
    MaskGrid fvalid(k.width, k.height, 0);
    KeypointMatches matches;
    if (t > 0) {
      for (int y = 0; y < k.height; ++y)
        for (int x = 0; x < k.width; ++x) {
          auto px = correspond_fast(t, t - 1, x, y);
          if (!px) continue;
          flow.u(x, y) = static_cast<float>(px->x() - x);
          flow.v(x, y) = static_cast<float>(px->y() - y);
          fvalid(x, y) = 1;
        }
      // exact keypoint matches: seeded integer pixels whose correspondence is
      // visible in both frames (matchers only produce mutually visible pairs)
      Rng rng(detail::splitmix(cfg.seed ^ (0xabcull + t)));
      int attempts = 0;
      while (static_cast<int>(matches.size()) < cfg.num_matches && attempts < cfg.num_matches * 10) {
        ++attempts;
        int x = static_cast<int>(rng.index(k.width)), y = static_cast<int>(rng.index(k.height));
        if (!fvalid(x, y)) continue;
        Vec2 prev(x + flow.u(x, y), y + flow.v(x, y));
        if (prev.x() < 0 || prev.x() > k.width - 1 || prev.y() < 0 || prev.y() > k.height - 1)
          continue;
        // z-buffer visibility at the previous frame
        double d = renders[t].depth.values(x, y);
        Vec3 cam(d * (x - k.cx) / k.fx, d * (y - k.cy) / k.fy, d);
        Vec3 world = scene.cam_to_world[t] * cam;
        const WorldQuad& wq = quads[t][renders[t].quad_index(x, y)];
        if (wq.mover >= 0) {
          Vec3 obj = wq.obj_origin + renders[t].hit_u(x, y) * wq.obj_u +
                     renders[t].hit_v(x, y) * wq.obj_v;
          world = scene.movers[wq.mover].trajectory[t - 1] * obj;
        }
        double z_prev = (scene.cam_to_world[t - 1].inverse() * world).z();
        int px = static_cast<int>(std::lround(prev.x()));
        int py = static_cast<int>(std::lround(prev.y()));
        if (!renders[t - 1].depth.valid.in_bounds(px, py) || !renders[t - 1].depth.valid(px, py))
          continue;
        if (std::abs(renders[t - 1].depth.values(px, py) - z_prev) > 0.02 * z_prev + 0.02)
          continue;
        matches.push_back({Vec2(x, y), prev, 1.0});
      }
    }
    out.gt.flow.push_back(std::move(flow));
    out.gt.flow_valid.push_back(std::move(fvalid));
    out.gt.matches.push_back(std::move(matches));
  }

  // static cloud: deterministic grid sampling of the static quads
  const double spacing = 0.06;
  for (const auto& q : scene.static_quads) {
    int nu = std::max(1, static_cast<int>(q.edge_u.norm() / spacing));
    int nv = std::max(1, static_cast<int>(q.edge_v.norm() / spacing));
    for (int iu = 0; iu < nu; ++iu)
      for (int iv = 0; iv < nv; ++iv) {
        double a = (iu + 0.5) / nu, b = (iv + 0.5) / nv;
        out.gt.static_cloud.points.push_back(q.origin + a * q.edge_u + b * q.edge_v);
      }
  }

  // bundles: ground truth plus configured noise
  Rng noise_rng(detail::splitmix(cfg.seed ^ 0xbadc0ffeULL));
  for (int t = 0; t < cfg.frame_count; ++t) {
    FrameBundle b;
    b.frame_id = static_cast<std::uint64_t>(t);
    b.intrinsics = k;

    Pose c2w = scene.cam_to_world[t];
    if (cfg.noise_pose_rot > 0 || cfg.noise_pose_trans > 0) {
      Vec6 xi;
      double st = cfg.noise_pose_trans / std::sqrt(3.0), sr = cfg.noise_pose_rot / std::sqrt(3.0);
      xi << noise_rng.gaussian(0, st), noise_rng.gaussian(0, st), noise_rng.gaussian(0, st),
          noise_rng.gaussian(0, sr), noise_rng.gaussian(0, sr), noise_rng.gaussian(0, sr);
      c2w = c2w * se3_exp(xi);
    }
    b.init_pose = c2w.inverse();

    Grid<float> depth_values = out.gt.depth[t].values;
    if (cfg.noise_depth_rel > 0) {
      for (int y = 0; y < k.height; ++y)
        for (int x = 0; x < k.width; ++x)
          if (out.gt.depth[t].valid(x, y)) {
            double f = 1.0 + cfg.noise_depth_rel * noise_rng.gaussian();
            depth_values(x, y) *= static_cast<float>(std::max(0.05, f));
          }
    }
    b.depth = DepthMap::from_values(std::move(depth_values));

    b.confidence = Grid<float>(k.width, k.height, 0.f);
    for (int y = 0; y < k.height; ++y)
      for (int x = 0; x < k.width; ++x)
        if (out.gt.depth[t].valid(x, y)) b.confidence(x, y) = 1.0f;

    if (t > 0) {
      FlowField flow = out.gt.flow[t];
      if (cfg.noise_flow_px > 0) {
        for (int y = 0; y < k.height; ++y)
          for (int x = 0; x < k.width; ++x) {
            flow.u(x, y) += static_cast<float>(noise_rng.gaussian(0, cfg.noise_flow_px));
            flow.v(x, y) += static_cast<float>(noise_rng.gaussian(0, cfg.noise_flow_px));
          }
      }
      b.flow_prev = std::move(flow);
      b.matches_prev = out.gt.matches[t];
    }
    out.frames.push_back(std::move(b));
  }
  return out;
}

// A contiguous sub-sequence as an independent sequence: frame ids renumbered
// from zero, the leading frame's flow/matches dropped (no previous frame).
inline Generated slice(const Generated& gen, size_t begin, size_t count) {
  if (begin + count > gen.frames.size()) throw ContractError("slice: range exceeds sequence");
  if (count == 0) throw ContractError("slice: empty range");
  Generated out;
  for (size_t i = 0; i < count; ++i) {
    FrameBundle b = gen.frames[begin + i];
    b.frame_id = i;
    if (i == 0) {
      b.flow_prev.reset();
      b.matches_prev.reset();
    }
    out.frames.push_back(std::move(b));
    out.gt.cam_to_world.push_back(gen.gt.cam_to_world[begin + i]);
    out.gt.depth.push_back(gen.gt.depth[begin + i]);
    out.gt.dynamic_mask.push_back(gen.gt.dynamic_mask[begin + i]);
    out.gt.luminance.push_back(gen.gt.luminance[begin + i]);
    if (i == 0) {
      const auto& d0 = gen.gt.depth[begin];
      out.gt.flow.emplace_back(d0.values.width(), d0.values.height());
      out.gt.flow_valid.emplace_back(d0.values.width(), d0.values.height(), 0);
      out.gt.matches.emplace_back();
    } else {
      out.gt.flow.push_back(gen.gt.flow[begin + i]);
      out.gt.flow_valid.push_back(gen.gt.flow_valid[begin + i]);
      out.gt.matches.push_back(gen.gt.matches[begin + i]);
    }
  }
  out.gt.static_cloud = gen.gt.static_cloud;
  return out;
}

// ---------------------------------------------------------------------------
// Toy feature encoders (stand-ins for learned descriptors).

// 1024-dim visual descriptor over static pixels only: a 16x16 mean-luminance
// grid (256 values) plus 8x8 spatial cells x 12 orientation bins of
// gradient-magnitude-weighted histograms (768 values).
inline FeatureVec toy_visual_feature(const Grid<float>& luminance, const MaskGrid& static_mask) {
  if (!luminance.same_size(static_mask)) throw ShapeError("toy_visual_feature: size mismatch");
  FeatureVec f;
  f.kind = FeatureVec::Kind::visual2d;
  f.values.assign(FeatureVec::kVisualDim, 0.f);
  const int w = luminance.width(), h = luminance.height();

  // 16x16 luminance means
  std::array<double, 256> sum{};
  std::array<int, 256> cnt{};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!static_mask(x, y)) continue;
      int gx = std::min(15, x * 16 / w), gy = std::min(15, y * 16 / h);
      sum[gy * 16 + gx] += luminance(x, y);
      ++cnt[gy * 16 + gx];
    }
  for (int i = 0; i < 256; ++i) f.values[i] = cnt[i] ? static_cast<float>(sum[i] / cnt[i]) : 0.f;

  // 8x8 cells x 12 orientation bins
  for (int y = 1; y + 1 < h; ++y)
    for (int x = 1; x + 1 < w; ++x) {
      if (!static_mask(x, y)) continue;
      double gx = luminance(x + 1, y) - luminance(x - 1, y);
      double gy = luminance(x, y + 1) - luminance(x, y - 1);
      double mag = std::hypot(gx, gy);
      if (mag < 1e-9) continue;
      double ang = std::atan2(gy, gx);  // [-pi, pi]
      int bin = std::min(11, static_cast<int>((ang + M_PI) / (2.0 * M_PI) * 12.0));
      int cx = std::min(7, x * 8 / w), cy = std::min(7, y * 8 / h);
      f.values[256 + (cy * 8 + cx) * 12 + bin] += static_cast<float>(mag);
    }
  // L1-normalize the gradient block so scene scale does not dominate
  double total = 0.0;
  for (int i = 256; i < FeatureVec::kVisualDim; ++i) total += f.values[i];
  if (total > 0)
    for (int i = 256; i < FeatureVec::kVisualDim; ++i)
      f.values[i] = static_cast<float>(f.values[i] / total);
  return f;
}

// 512-dim geometric descriptor: normalized 8x8x8 occupancy histogram.
inline FeatureVec toy_geo_feature(const PointCloud& cloud) { return occupancy_geo_feature(cloud); }

// ---------------------------------------------------------------------------
// Emission in the pipeline's sequence layout (plus gt/ for evaluation).

inline void write_sequence(const fs::path& root, const Generated& gen, bool with_gt = true) {
  fs::create_directories(root);
  const Intrinsics k = gen.frames.front().intrinsics;
  write_intrinsics_txt(root / "intrinsics.txt", k);
  for (size_t t = 0; t < gen.frames.size(); ++t) {
    const FrameBundle& b = gen.frames[t];
    const std::string stem = frame_stem(b.frame_id);
    write_grids_f32(root / (stem + ".depth.f32"), {&b.depth.values});
    write_grids_f32(root / (stem + ".conf.f32"), {&b.confidence});
    write_pose_txt(root / (stem + ".pose.txt"), b.init_pose);
    if (b.flow_prev) write_grids_f32(root / (stem + ".flow.f32"), {&b.flow_prev->u, &b.flow_prev->v});
    // visual descriptor from the rendered static region
    MaskGrid static_mask(k.width, k.height, 0);
    for (int y = 0; y < k.height; ++y)
      for (int x = 0; x < k.width; ++x)
        static_mask(x, y) = (gen.gt.depth[t].valid(x, y) && !gen.gt.dynamic_mask[t](x, y)) ? 1 : 0;
    FeatureVec feat = toy_visual_feature(gen.gt.luminance[t], static_mask);
    Grid<float> fgrid(FeatureVec::kVisualDim, 1, 0.f);
    for (int i = 0; i < FeatureVec::kVisualDim; ++i) fgrid(i, 0) = feat.values[i];
    write_grids_f32(root / (stem + ".feat.f32"), {&fgrid});
    if (b.matches_prev && !b.matches_prev->empty()) {
      std::vector<MatchRecord> recs;
      for (const auto& m : *b.matches_prev)
        recs.push_back({m.pixel_cur.x(), m.pixel_cur.y(), m.pixel_prev.x(), m.pixel_prev.y(),
                        m.score});
      write_matches_txt(root / (stem + ".matches.txt"), recs);
    }
  }
  if (with_gt) {
    fs::create_directories(root / "gt" / "masks");
    write_trajectory_tum(root / "gt" / "trajectory.tum", gen.gt.cam_to_world);
    for (size_t t = 0; t < gen.gt.dynamic_mask.size(); ++t)
      write_mask_pgm(root / "gt" / "masks" / (frame_stem(t) + ".pgm"), gen.gt.dynamic_mask[t]);
    write_cloud_ply(root / "gt" / "static_cloud.ply", gen.gt.static_cloud);
  }
}

// ---------------------------------------------------------------------------
// Exact multi-view landmark observations for optimizer protocols: samples
// static surface points, projects them into every frame, and keeps those
// visible (z-buffer agreement) in at least min_views frames.

struct GtObservations {
  std::vector<Landmark> landmarks;
  std::vector<Observation> observations;
};

inline GtObservations gt_landmark_observations(const Generated& gen, int count,
                                               std::uint64_t seed, int min_views = 2) {
  const Intrinsics k = gen.frames.front().intrinsics;
  Rng rng(seed);
  GtObservations out;
  std::uint64_t next_id = 1;
  int attempts = 0;
  while (static_cast<int>(out.landmarks.size()) < count && attempts < count * 20) {
    ++attempts;
    const Vec3& p = gen.gt.static_cloud.points[rng.index(gen.gt.static_cloud.points.size())];
    std::vector<Observation> obs;
    for (size_t t = 0; t < gen.gt.cam_to_world.size(); ++t) {
      Pose w2c = gen.gt.cam_to_world[t].inverse();
      Vec3 cam = w2c * p;
      Projection pr = project(cam, k);
      if (pr.behind) continue;
      int xi = static_cast<int>(std::lround(pr.pixel.x()));
      int yi = static_cast<int>(std::lround(pr.pixel.y()));
      if (!gen.gt.depth[t].valid.in_bounds(xi, yi) || !gen.gt.depth[t].valid(xi, yi)) continue;
      // occlusion: the rendered depth must agree with the point's depth
      if (std::abs(gen.gt.depth[t].values(xi, yi) - cam.z()) > 0.03 * cam.z()) continue;
      obs.push_back({static_cast<int>(t), next_id, pr.pixel, Mat2::Identity()});
    }
    if (static_cast<int>(obs.size()) < min_views) continue;
    Landmark lm;
    lm.id = next_id++;
    lm.position = p;
    out.landmarks.push_back(lm);
    out.observations.insert(out.observations.end(), obs.begin(), obs.end());
  }
  return out;
}

}  // namespace cogmap::synth
