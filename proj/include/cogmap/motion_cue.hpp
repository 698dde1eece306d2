#pragma once

// Multi-stage dynamic-region identification on a frame pair:
//   1. flow cue      — GMM clustering of the 2-D flow field, drop the
//                      cluster with minimal mean motion magnitude
//   2. geometry cue  — residual between observed flow and ego-flow,
//                      thresholded by Otsu's method
//   3. robust cue    — 3-D keypoint displacement outliers select which
//                      candidate components survive into m_dyn
// plus mask propagation across frames and the new-mover monitor.
//
// Flow fields here follow the library convention: the flow stored with
// frame t is anchored at frame t pixels and points to frame t-1.

#include <array>
#include <cmath>
#include <deque>
#include <optional>
#include <vector>

#include <Eigen/Eigenvalues>

#include "cogmap/core.hpp"
#include "cogmap/geometry.hpp"

namespace cogmap {

// ---------------------------------------------------------------------------
// Masks and small raster helpers.

inline MaskGrid mask_union(const MaskGrid& a, const MaskGrid& b) {
  if (!a.same_size(b)) throw ShapeError("mask_union: size mismatch");
  MaskGrid out(a.width(), a.height(), 0);
  for (size_t i = 0; i < a.size(); ++i) out.data()[i] = (a.data()[i] || b.data()[i]) ? 1 : 0;
  return out;
}

inline MaskGrid dilate3x3(const MaskGrid& m) {
  MaskGrid out(m.width(), m.height(), 0);
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) {
      std::uint8_t v = 0;
      for (int dy = -1; dy <= 1 && !v; ++dy)
        for (int dx = -1; dx <= 1 && !v; ++dx)
          if (m.in_bounds(x + dx, y + dy) && m(x + dx, y + dy)) v = 1;
      out(x, y) = v;
    }
  return out;
}

// Out-of-bounds neighbors count as true so the image border is not eroded.
inline MaskGrid erode3x3(const MaskGrid& m) {
  MaskGrid out(m.width(), m.height(), 0);
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) {
      std::uint8_t v = 1;
      for (int dy = -1; dy <= 1 && v; ++dy)
        for (int dx = -1; dx <= 1 && v; ++dx)
          if (m.in_bounds(x + dx, y + dy) && !m(x + dx, y + dy)) v = 0;
      out(x, y) = v;
    }
  return out;
}

inline MaskGrid morphological_close(const MaskGrid& m) { return erode3x3(dilate3x3(m)); }

struct ComponentLabels {
  Grid<std::int32_t> labels;  // 0 background, 1..count components
  int count = 0;
};

// 8-connected components, labeled in scan order (deterministic).
inline ComponentLabels connected_components(const MaskGrid& m) {
  ComponentLabels out;
  out.labels = Grid<std::int32_t>(m.width(), m.height(), 0);
  std::deque<std::pair<int, int>> queue;
  for (int y = 0; y < m.height(); ++y) {
    for (int x = 0; x < m.width(); ++x) {
      if (!m(x, y) || out.labels(x, y)) continue;
      int id = ++out.count;
      out.labels(x, y) = id;
      queue.push_back({x, y});
      while (!queue.empty()) {
        auto [px, py] = queue.front();
        queue.pop_front();
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            int nx = px + dx, ny = py + dy;
            if (!m.in_bounds(nx, ny) || !m(nx, ny) || out.labels(nx, ny)) continue;
            out.labels(nx, ny) = id;
            queue.push_back({nx, ny});
          }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian mixture over 2-D flow vectors.

struct GmmResult {
  Grid<std::int32_t> labels;        // 1..effective_k; 0 on invalid pixels
  std::vector<Vec2> means;          // indexed by label-1
  std::vector<Mat2> covariances;    // symmetric, eigenvalues >= cov_floor
  std::vector<double> weights;      // sum to 1
  double log_likelihood = 0.0;
  int effective_k = 0;
};

namespace detail {

inline Mat2 floor_covariance(const Mat2& c, double floor) {
  Eigen::SelfAdjointEigenSolver<Mat2> es(0.5 * (c + c.transpose()));
  Vec2 ev = es.eigenvalues().cwiseMax(floor);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

struct Gauss2 {
  Mat2 inv;
  double log_norm;  // log(w) - log(2*pi) - 0.5*log(det)
};

inline Gauss2 prepare_gauss(const Vec2& /*mean*/, const Mat2& cov, double weight) {
  double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
  Gauss2 g;
  g.inv << cov(1, 1), -cov(0, 1), -cov(1, 0), cov(0, 0);
  g.inv /= det;
  g.log_norm = std::log(weight) - std::log(2.0 * M_PI) - 0.5 * std::log(det);
  return g;
}

}  // namespace detail

// Seeded k-means++ initialization followed by EM with full 2x2 covariances
// (eigenvalue floor cov_floor). Deterministic for a given seed. Clusters whose
// weight collapses below 1e-6, or that end with no assigned pixels, are dropped
// and the remaining ones relabeled; effective_k reports the survivors.
inline GmmResult fit_gmm(const FlowField& flow, const MaskGrid& valid, int k, std::uint64_t seed,
                         int max_iter = 100, double cov_floor = 1e-6) {
  if (!flow.u.same_size(valid)) throw ShapeError("fit_gmm: flow/valid size mismatch");
  if (k < 1) throw DegenerateInputError("fit_gmm: k must be >= 1");

  std::vector<Vec2> pts;
  std::vector<std::pair<int, int>> coords;
  for (int y = 0; y < flow.height(); ++y)
    for (int x = 0; x < flow.width(); ++x)
      if (valid(x, y)) {
        pts.emplace_back(flow.u(x, y), flow.v(x, y));
        coords.emplace_back(x, y);
      }
  const size_t n = pts.size();
  if (n < static_cast<size_t>(k) * 10)
    throw DegenerateInputError("fit_gmm: fewer than 10*k valid pixels");

  // k-means++ seeding
  Rng rng(seed);
  std::vector<Vec2> means;
  means.push_back(pts[rng.index(n)]);
  std::vector<double> d2(n, 0.0);
  while (static_cast<int>(means.size()) < k) {
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      for (const auto& m : means) best = std::min(best, (pts[i] - m).squaredNorm());
      d2[i] = best;
      total += best;
    }
    size_t pick;
    if (total <= 0.0) {
      pick = rng.index(n);  // all points coincide with a center
    } else {
      double r = rng.uniform() * total, acc = 0.0;
      pick = n - 1;
      for (size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= r) {
          pick = i;
          break;
        }
      }
    }
    means.push_back(pts[pick]);
  }

  // shared initial covariance = data covariance (floored)
  Vec2 gmean = Vec2::Zero();
  for (const auto& p : pts) gmean += p;
  gmean /= static_cast<double>(n);
  Mat2 gcov = Mat2::Zero();
  for (const auto& p : pts) gcov += (p - gmean) * (p - gmean).transpose();
  gcov = detail::floor_covariance(gcov / static_cast<double>(n), cov_floor);

  std::vector<Mat2> covs(means.size(), gcov);
  std::vector<double> weights(means.size(), 1.0 / means.size());

  std::vector<double> resp;  // n x k responsibilities
  double ll = -std::numeric_limits<double>::max();
  for (int iter = 0; iter < max_iter; ++iter) {
    const int kc = static_cast<int>(means.size());
    // E step
    std::vector<detail::Gauss2> gs;
    gs.reserve(kc);
    for (int c = 0; c < kc; ++c) gs.push_back(detail::prepare_gauss(means[c], covs[c], weights[c]));
    resp.assign(n * kc, 0.0);
    double new_ll = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::max();
      for (int c = 0; c < kc; ++c) {
        Vec2 d = pts[i] - means[c];
        double lp = gs[c].log_norm - 0.5 * d.dot(gs[c].inv * d);
        resp[i * kc + c] = lp;
        mx = std::max(mx, lp);
      }
      double sum = 0.0;
      for (int c = 0; c < kc; ++c) sum += std::exp(resp[i * kc + c] - mx);
      double lse = mx + std::log(sum);
      new_ll += lse;
      for (int c = 0; c < kc; ++c) resp[i * kc + c] = std::exp(resp[i * kc + c] - lse);
    }

    // M step
    std::vector<double> nk(kc, 0.0);
    std::vector<Vec2> new_means(kc, Vec2::Zero());
    for (size_t i = 0; i < n; ++i)
      for (int c = 0; c < kc; ++c) {
        nk[c] += resp[i * kc + c];
        new_means[c] += resp[i * kc + c] * pts[i];
      }
    std::vector<int> keep;
    for (int c = 0; c < kc; ++c)
      if (nk[c] / static_cast<double>(n) >= 1e-6) keep.push_back(c);
    if (static_cast<int>(keep.size()) < kc) {
      // collapse: drop the starved clusters and restart the E step
      std::vector<Vec2> m2;
      std::vector<Mat2> c2;
      std::vector<double> w2;
      double wsum = 0.0;
      for (int c : keep) {
        m2.push_back(means[c]);
        c2.push_back(covs[c]);
        w2.push_back(weights[c]);
        wsum += weights[c];
      }
      for (auto& w : w2) w /= wsum;
      means = std::move(m2);
      covs = std::move(c2);
      weights = std::move(w2);
      continue;
    }
    for (int c = 0; c < kc; ++c) {
      new_means[c] /= nk[c];
      Mat2 cov = Mat2::Zero();
      for (size_t i = 0; i < n; ++i) {
        Vec2 d = pts[i] - new_means[c];
        cov += resp[i * kc + c] * d * d.transpose();
      }
      covs[c] = detail::floor_covariance(cov / nk[c], cov_floor);
      weights[c] = nk[c] / static_cast<double>(n);
      means[c] = new_means[c];
    }

    if (std::abs(new_ll - ll) < 1e-9 * (1.0 + std::abs(new_ll))) {
      ll = new_ll;
      break;
    }
    ll = new_ll;
  }

  // Final hard assignment; argmax responsibility, lowest index on ties.
  const int kc = static_cast<int>(means.size());
  std::vector<detail::Gauss2> gs;
  for (int c = 0; c < kc; ++c) gs.push_back(detail::prepare_gauss(means[c], covs[c], weights[c]));
  GmmResult out;
  out.labels = Grid<std::int32_t>(flow.width(), flow.height(), 0);
  std::vector<int> assigned(kc, 0);
  std::vector<int> raw_label(n, 0);
  double final_ll = 0.0;
  for (size_t i = 0; i < n; ++i) {
    int best = 0;
    double best_lp = -std::numeric_limits<double>::max();
    double mx = -std::numeric_limits<double>::max();
    std::vector<double> lps(kc);
    for (int c = 0; c < kc; ++c) {
      Vec2 d = pts[i] - means[c];
      double lp = gs[c].log_norm - 0.5 * d.dot(gs[c].inv * d);
      lps[c] = lp;
      mx = std::max(mx, lp);
      if (lp > best_lp) {
        best_lp = lp;
        best = c;
      }
    }
    double sum = 0.0;
    for (int c = 0; c < kc; ++c) sum += std::exp(lps[c] - mx);
    final_ll += mx + std::log(sum);
    raw_label[i] = best;
    ++assigned[best];
  }
  // relabel survivors 1..effective_k preserving original order
  std::vector<int> remap(kc, 0);
  int next = 0;
  for (int c = 0; c < kc; ++c)
    if (assigned[c] > 0) remap[c] = ++next;
  out.effective_k = next;
  for (int c = 0; c < kc; ++c) {
    if (!assigned[c]) continue;
    out.means.push_back(means[c]);
    out.covariances.push_back(covs[c]);
    out.weights.push_back(weights[c]);
  }
  double wsum = 0.0;
  for (double w : out.weights) wsum += w;
  for (double& w : out.weights) w /= wsum;
  for (size_t i = 0; i < n; ++i) out.labels(coords[i].first, coords[i].second) = remap[raw_label[i]];
  out.log_likelihood = final_ll;
  return out;
}

// Exposed for the likelihood-monotonicity property test: one EM sweep's
// log-likelihood at the given parameters.
inline double gmm_log_likelihood(const std::vector<Vec2>& pts, const std::vector<Vec2>& means,
                                 const std::vector<Mat2>& covs, const std::vector<double>& weights) {
  double ll = 0.0;
  const int kc = static_cast<int>(means.size());
  std::vector<detail::Gauss2> gs;
  for (int c = 0; c < kc; ++c) gs.push_back(detail::prepare_gauss(means[c], covs[c], weights[c]));
  for (const auto& p : pts) {
    double mx = -std::numeric_limits<double>::max();
    std::vector<double> lps(kc);
    for (int c = 0; c < kc; ++c) {
      Vec2 d = p - means[c];
      lps[c] = gs[c].log_norm - 0.5 * d.dot(gs[c].inv * d);
      mx = std::max(mx, lps[c]);
    }
    double sum = 0.0;
    for (int c = 0; c < kc; ++c) sum += std::exp(lps[c] - mx);
    ll += mx + std::log(sum);
  }
  return ll;
}

// ---------------------------------------------------------------------------
// Flow motion cue: exclude the cluster with minimal mean flow magnitude.

// Mean ||f|| per cluster, accumulated in row-major pixel order.
inline std::vector<double> cluster_mean_magnitudes(const GmmResult& g, const FlowField& flow) {
  std::vector<double> sum(g.effective_k, 0.0);
  std::vector<size_t> cnt(g.effective_k, 0);
  for (int y = 0; y < flow.height(); ++y)
    for (int x = 0; x < flow.width(); ++x) {
      int label = g.labels(x, y);
      if (!label) continue;
      sum[label - 1] += std::hypot(static_cast<double>(flow.u(x, y)), static_cast<double>(flow.v(x, y)));
      ++cnt[label - 1];
    }
  for (int c = 0; c < g.effective_k; ++c) sum[c] = cnt[c] ? sum[c] / static_cast<double>(cnt[c]) : 0.0;
  return sum;
}

// A pixel is dynamic iff its label differs from the minimum-magnitude
// cluster. Ties within 1e-12 go to the lowest cluster index.
inline MaskGrid flow_motion_cue(const GmmResult& g, const FlowField& flow) {
  MaskGrid out(flow.width(), flow.height(), 0);
  if (g.effective_k <= 1) return out;  // single cluster: nothing to exclude
  std::vector<double> mean_mag = cluster_mean_magnitudes(g, flow);
  int min_label = 1;
  for (int c = 1; c < g.effective_k; ++c)
    if (mean_mag[c] < mean_mag[min_label - 1] - 1e-12) min_label = c + 1;
  for (int y = 0; y < flow.height(); ++y)
    for (int x = 0; x < flow.width(); ++x) {
      int label = g.labels(x, y);
      out(x, y) = (label != 0 && label != min_label) ? 1 : 0;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Otsu threshold: exhaustive search over a 256-bin histogram of [0, max].

inline double otsu_threshold(const std::vector<double>& values) {
  if (values.size() < 2) throw DegenerateInputError("otsu_threshold: need at least 2 values");
  double vmax = 0.0;
  for (double v : values) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ShapeError("otsu_threshold: values must be finite and non-negative");
    vmax = std::max(vmax, v);
  }
  if (vmax <= 0.0) throw DegenerateInputError("otsu_threshold: all values equal");

  constexpr int kBins = 256;
  std::array<std::int64_t, kBins> hist{};
  std::array<double, kBins> binsum{};
  for (double v : values) {
    int b = std::min(kBins - 1, static_cast<int>(v / vmax * kBins));
    ++hist[b];
    binsum[b] += v;
  }

  const double total_cnt = static_cast<double>(values.size());
  double total_sum = 0.0;
  for (double s : binsum) total_sum += s;

  int best_t = -1;
  double best_var = 0.0;
  double cnt0 = 0.0, sum0 = 0.0;
  for (int t = 0; t + 1 < kBins; ++t) {
    cnt0 += static_cast<double>(hist[t]);
    sum0 += binsum[t];
    double cnt1 = total_cnt - cnt0;
    if (cnt0 == 0.0 || cnt1 == 0.0) continue;
    double mu0 = sum0 / cnt0, mu1 = (total_sum - sum0) / cnt1;
    double var = cnt0 / total_cnt * cnt1 / total_cnt * (mu0 - mu1) * (mu0 - mu1);
    if (var > best_var) {
      best_var = var;
      best_t = t;
    }
  }
  if (best_t < 0) throw DegenerateInputError("otsu_threshold: degenerate distribution");
  return vmax * (best_t + 1) / static_cast<double>(kBins);
}

// ---------------------------------------------------------------------------
// Geometry motion cue.

struct GeometryCueResult {
  Grid<float> residual;  // |flow - ego_flow| per pixel; 0 where invalid
  MaskGrid valid;
  MaskGrid m_geo;
  double tau = 0.0;
  bool degenerate = false;  // residual distribution carried no split: all static
};

inline GeometryCueResult geometry_motion_cue(const FlowField& flow, const DepthMap& depth,
                                             const Intrinsics& k_t, const Intrinsics& k_t2,
                                             const Pose& e_t, const Pose& e_t2) {
  if (flow.width() != k_t.width || flow.height() != k_t.height)
    throw ShapeError("geometry_motion_cue: flow dimensions do not match intrinsics");
  EgoFlowResult ego = ego_flow(depth, k_t, k_t2, e_t, e_t2);
  GeometryCueResult out;
  out.residual = Grid<float>(flow.width(), flow.height(), 0.f);
  out.valid = ego.valid;
  out.m_geo = MaskGrid(flow.width(), flow.height(), 0);
  std::vector<double> vals;
  vals.reserve(flow.u.size());
  for (int y = 0; y < flow.height(); ++y)
    for (int x = 0; x < flow.width(); ++x) {
      if (!ego.valid(x, y)) continue;
      double du = static_cast<double>(flow.u(x, y)) - ego.flow.u(x, y);
      double dv = static_cast<double>(flow.v(x, y)) - ego.flow.v(x, y);
      double r = std::hypot(du, dv);
      out.residual(x, y) = static_cast<float>(r);
      vals.push_back(r);
    }
  if (vals.size() < 2) {
    out.degenerate = true;
    return out;
  }
  try {
    out.tau = otsu_threshold(vals);
  } catch (const DegenerateInputError&) {
    out.degenerate = true;
    out.tau = *std::max_element(vals.begin(), vals.end());
    return out;
  }
  for (int y = 0; y < flow.height(); ++y)
    for (int x = 0; x < flow.width(); ++x)
      if (out.valid(x, y) && out.residual(x, y) > out.tau) out.m_geo(x, y) = 1;
  return out;
}

// ---------------------------------------------------------------------------
// Robust motion cue.

struct KeypointMatch {
  Vec2 pixel_cur;   // in frame t
  Vec2 pixel_prev;  // in frame t-1
  double score = 1.0;
};
using KeypointMatches = std::vector<KeypointMatch>;

struct RobustCueParams {
  double mag_k = 3.0;           // magnitude gate, in static-set sigmas
  double ang_max = M_PI / 4.0;  // direction gate, radians
  double min_mean_disp = 1e-3;  // skip the angle test below this |mean| (m)
  double min_sigma = 1e-3;      // sigma floor (m): sub-mm lift jitter is static
};

struct RobustCueResult {
  MaskGrid m_dyn;
  std::vector<std::uint8_t> dynamic_flags;  // per input match
  bool fell_back = false;                   // no usable static reference: m_dyn = m_geo
  size_t static_ref_count = 0;
};

namespace detail {

// Lift a match endpoint to world space. Integer pixels read the depth map
// directly. Sub-pixel positions interpolate bilinearly, but only where the
// 2x2 cell is a single surface (depth range within 1% of depth); a sub-pixel
// lookup across a discontinuity or a grazing surface has no well-defined
// depth and invalidates the endpoint, like nonpositive depth does.
inline std::optional<Vec3> lift_to_world(const Vec2& px, const DepthMap& depth,
                                         const Intrinsics& k, const Pose& e) {
  int xi = static_cast<int>(std::lround(px.x()));
  int yi = static_cast<int>(std::lround(px.y()));
  if (!depth.valid.in_bounds(xi, yi) || !depth.valid(xi, yi)) return std::nullopt;
  double d = depth.values(xi, yi);
  bool integer_pixel = std::abs(px.x() - xi) < 1e-9 && std::abs(px.y() - yi) < 1e-9;
  if (!integer_pixel) {
    int x0 = static_cast<int>(std::floor(px.x()));
    int y0 = static_cast<int>(std::floor(px.y()));
    if (!depth.valid.in_bounds(x0, y0) || !depth.valid.in_bounds(x0 + 1, y0 + 1) ||
        !depth.valid(x0, y0) || !depth.valid(x0 + 1, y0) || !depth.valid(x0, y0 + 1) ||
        !depth.valid(x0 + 1, y0 + 1))
      return std::nullopt;
    double d00 = depth.values(x0, y0), d10 = depth.values(x0 + 1, y0);
    double d01 = depth.values(x0, y0 + 1), d11 = depth.values(x0 + 1, y0 + 1);
    double dmin = std::min(std::min(d00, d10), std::min(d01, d11));
    double dmax = std::max(std::max(d00, d10), std::max(d01, d11));
    if (dmax - dmin > std::max(0.01 * d, 0.01)) return std::nullopt;
    double fx = px.x() - x0, fy = px.y() - y0;
    d = (d00 * (1 - fx) + d10 * fx) * (1 - fy) + (d01 * (1 - fx) + d11 * fx) * fy;
  }
  Vec3 cam(d * (px.x() - k.cx) / k.fx, d * (px.y() - k.cy) / k.fy, d);
  return e.inverse() * cam;
}

}  // namespace detail

// Lifts both endpoints of every match to world space and tests displacement
// against the mean displacement of keypoints outside the candidate regions
// (the static reference set). Candidate components containing at least one
// dynamic keypoint form m_dyn.
inline RobustCueResult robust_motion_cue(const KeypointMatches& matches, const DepthMap& depth_cur,
                                         const DepthMap& depth_prev, const Intrinsics& k_cur,
                                         const Intrinsics& k_prev, const Pose& e_cur,
                                         const Pose& e_prev, const MaskGrid& m_flow,
                                         const MaskGrid& m_geo,
                                         const RobustCueParams& params = {}) {
  if (!m_flow.same_size(m_geo)) throw ShapeError("robust_motion_cue: cue mask size mismatch");
  MaskGrid candidates = mask_union(m_flow, m_geo);

  RobustCueResult out;
  out.dynamic_flags.assign(matches.size(), 0);

  struct Lifted {
    size_t idx;
    Vec3 disp;
    bool in_candidates;
  };
  std::vector<Lifted> lifted;
  for (size_t i = 0; i < matches.size(); ++i) {
    auto pw_cur = detail::lift_to_world(matches[i].pixel_cur, depth_cur, k_cur, e_cur);
    auto pw_prev = detail::lift_to_world(matches[i].pixel_prev, depth_prev, k_prev, e_prev);
    if (!pw_cur || !pw_prev) continue;
    int xi = static_cast<int>(std::lround(matches[i].pixel_cur.x()));
    int yi = static_cast<int>(std::lround(matches[i].pixel_cur.y()));
    lifted.push_back({i, *pw_cur - *pw_prev, candidates.in_bounds(xi, yi) && candidates(xi, yi) != 0});
  }

  std::vector<const Lifted*> static_ref;
  for (const auto& l : lifted)
    if (!l.in_candidates) static_ref.push_back(&l);
  out.static_ref_count = static_ref.size();

  if (lifted.size() < 4 || static_ref.empty()) {
    out.fell_back = true;
    out.m_dyn = m_geo;
    return out;
  }

  Vec3 mean = Vec3::Zero();
  for (const auto* l : static_ref) mean += l->disp;
  mean /= static_cast<double>(static_ref.size());
  // sigma of |d| over the static set, floored against exact synthetic inputs
  double mag_mean = 0.0;
  for (const auto* l : static_ref) mag_mean += l->disp.norm();
  mag_mean /= static_cast<double>(static_ref.size());
  double var = 0.0;
  for (const auto* l : static_ref) {
    double d = l->disp.norm() - mag_mean;
    var += d * d;
  }
  double sigma = std::max(std::sqrt(var / static_cast<double>(static_ref.size())), params.min_sigma);

  ComponentLabels comps = connected_components(candidates);
  std::vector<std::uint8_t> component_dynamic(static_cast<size_t>(comps.count) + 1, 0);

  for (const auto& l : lifted) {
    if (!l.in_candidates) continue;
    bool dynamic = (l.disp - mean).norm() > params.mag_k * sigma;
    if (!dynamic && mean.norm() > params.min_mean_disp && l.disp.norm() > 0.0) {
      double angle = std::atan2(l.disp.cross(mean).norm(), l.disp.dot(mean));
      dynamic = angle > params.ang_max;
    }
    if (dynamic) {
      out.dynamic_flags[l.idx] = 1;
      int xi = static_cast<int>(std::lround(matches[l.idx].pixel_cur.x()));
      int yi = static_cast<int>(std::lround(matches[l.idx].pixel_cur.y()));
      if (comps.labels.in_bounds(xi, yi)) component_dynamic[comps.labels(xi, yi)] = 1;
    }
  }

  out.m_dyn = MaskGrid(candidates.width(), candidates.height(), 0);
  for (int y = 0; y < candidates.height(); ++y)
    for (int x = 0; x < candidates.width(); ++x) {
      int c = comps.labels(x, y);
      if (c > 0 && component_dynamic[c]) out.m_dyn(x, y) = 1;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Mask propagation.

// Forward-warp: flow is anchored at the mask's own frame and points to the
// target frame. Warp holes are filled by one morphological closing pass.
inline MaskGrid propagate_mask(const MaskGrid& mask, const FlowField& flow) {
  if (!mask.same_size(flow.u)) throw ShapeError("propagate_mask: size mismatch");
  MaskGrid warped(mask.width(), mask.height(), 0);
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x) {
      if (!mask(x, y)) continue;
      int nx = static_cast<int>(std::lround(x + flow.u(x, y)));
      int ny = static_cast<int>(std::lround(y + flow.v(x, y)));
      if (warped.in_bounds(nx, ny)) warped(nx, ny) = 1;
    }
  return morphological_close(warped);
}

// Pullback along the current frame's flow-to-previous: the propagated value at
// pixel p is the previous mask sampled (bilinearly) at p + flow(p). This is
// the in-pipeline tracker, since stored flow points backward in time.
inline MaskGrid track_mask(const MaskGrid& mask_prev, const FlowField& flow_cur_to_prev) {
  if (!mask_prev.same_size(flow_cur_to_prev.u)) throw ShapeError("track_mask: size mismatch");
  const int w = mask_prev.width(), h = mask_prev.height();
  auto sample = [&](double sx, double sy) -> double {
    int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
    double fx = sx - x0, fy = sy - y0;
    double acc = 0.0;
    for (int dy = 0; dy <= 1; ++dy)
      for (int dx = 0; dx <= 1; ++dx) {
        double wgt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
        int xi = x0 + dx, yi = y0 + dy;
        if (xi >= 0 && xi < w && yi >= 0 && yi < h && mask_prev(xi, yi)) acc += wgt;
      }
    return acc;
  };
  MaskGrid warped(w, h, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (sample(x + flow_cur_to_prev.u(x, y), y + flow_cur_to_prev.v(x, y)) >= 0.5)
        warped(x, y) = 1;
  return morphological_close(warped);
}

// True when the geometry cue uncovers enough area outside the tracked mask to
// warrant a full re-run of the cue pipeline on this frame pair.
inline bool detect_new_movers(const MaskGrid& m_geo_cur, const MaskGrid& m_dyn_cur,
                              double delta_new = 0.01) {
  if (!m_geo_cur.same_size(m_dyn_cur)) throw ShapeError("detect_new_movers: size mismatch");
  size_t uncovered = 0;
  for (size_t i = 0; i < m_geo_cur.size(); ++i)
    uncovered += (m_geo_cur.data()[i] && !m_dyn_cur.data()[i]);
  return static_cast<double>(uncovered) > delta_new * static_cast<double>(m_geo_cur.size());
}

struct DynamicMask {
  MaskGrid m_flow, m_geo, m_dyn;
  double tau_geo = 0.0;
};

}  // namespace cogmap
