#pragma once

// On-disk formats shared by the pipeline, the memory bank, and the CLI.
//
//  * binary grids (.f32): 16-byte header "CMGR" + u32 width + u32 height +
//    u32 channels, then float32 row-major, channel-interleaved, little-endian
//  * masks: binary PGM (P5), 255 = dynamic
//  * clouds: binary little-endian PLY with float32 x, y, z, confidence
//  * trajectories: TUM text, "timestamp tx ty tz qx qy qz qw" per line,
//    camera-to-world convention
//  * poses (.pose.txt): 4x4 row-major, world-to-camera
//
// All writers go through atomic_write: data lands in "<path>.tmp" and is
// renamed over the target only after a complete write.

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "cogmap/core.hpp"
#include "cogmap/geometry.hpp"
#include "cogmap/icp.hpp"

namespace cogmap {

namespace fs = std::filesystem;

// Test hook for crash-safety checks: when set, counts down completed file
// operations (tmp write or rename) and throws once it reaches zero, leaving
// the directory exactly as a process kill would.
struct FaultInjector {
  long long remaining_ops = -1;  // negative: disabled

  void step(const std::string& what) {
    if (remaining_ops < 0) return;
    if (remaining_ops == 0) throw IoError("injected fault before: " + what);
    --remaining_ops;
  }
};

inline void atomic_write(const fs::path& path, const std::function<void(std::ostream&)>& body,
                         FaultInjector* fault = nullptr) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + tmp.string());
    body(os);
    os.flush();
    if (!os) throw IoError("write failed: " + tmp.string());
  }
  if (fault) fault->step("rename " + path.string());
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Binary grids.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t get_u32(std::istream& is, const std::string& file) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw IoError("truncated header: " + file);
  return v;
}

}  // namespace detail

inline void write_grids_f32(const fs::path& path, const std::vector<const Grid<float>*>& channels,
                            FaultInjector* fault = nullptr) {
  if (channels.empty()) throw EmptyInputError("write_grids_f32: no channels");
  const int w = channels[0]->width(), h = channels[0]->height();
  for (const auto* c : channels)
    if (c->width() != w || c->height() != h) throw ShapeError("write_grids_f32: channel size mismatch");
  atomic_write(path, [&](std::ostream& os) {
    os.write("CMGR", 4);
    detail::put_u32(os, static_cast<std::uint32_t>(w));
    detail::put_u32(os, static_cast<std::uint32_t>(h));
    detail::put_u32(os, static_cast<std::uint32_t>(channels.size()));
    std::vector<float> row(static_cast<size_t>(w) * channels.size());
    for (int y = 0; y < h; ++y) {
      size_t i = 0;
      for (int x = 0; x < w; ++x)
        for (const auto* c : channels) row[i++] = (*c)(x, y);
      os.write(reinterpret_cast<const char*>(row.data()), row.size() * sizeof(float));
    }
  }, fault);
}

inline std::vector<Grid<float>> read_grids_f32(const fs::path& path, int expect_channels = 0) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "CMGR", 4) != 0)
    throw IoError("bad grid magic: " + path.string());
  const auto w = detail::get_u32(is, path.string());
  const auto h = detail::get_u32(is, path.string());
  const auto ch = detail::get_u32(is, path.string());
  if (w == 0 || h == 0 || ch == 0 || ch > 16) throw IoError("bad grid header: " + path.string());
  if (expect_channels && static_cast<int>(ch) != expect_channels)
    throw IoError("unexpected channel count in " + path.string());
  std::vector<Grid<float>> out(ch, Grid<float>(static_cast<int>(w), static_cast<int>(h), 0.f));
  std::vector<float> row(static_cast<size_t>(w) * ch);
  for (std::uint32_t y = 0; y < h; ++y) {
    if (!is.read(reinterpret_cast<char*>(row.data()), row.size() * sizeof(float)))
      throw IoError("truncated grid data: " + path.string());
    size_t i = 0;
    for (std::uint32_t x = 0; x < w; ++x)
      for (std::uint32_t c = 0; c < ch; ++c) out[c](static_cast<int>(x), static_cast<int>(y)) = row[i++];
  }
  return out;
}

// ---------------------------------------------------------------------------
// PGM masks (8-bit binary, 0 / 255).

inline void write_mask_pgm(const fs::path& path, const MaskGrid& mask,
                           FaultInjector* fault = nullptr) {
  atomic_write(path, [&](std::ostream& os) {
    os << "P5\n" << mask.width() << " " << mask.height() << "\n255\n";
    std::vector<unsigned char> row(mask.width());
    for (int y = 0; y < mask.height(); ++y) {
      for (int x = 0; x < mask.width(); ++x) row[x] = mask(x, y) ? 255 : 0;
      os.write(reinterpret_cast<const char*>(row.data()), row.size());
    }
  }, fault);
}

inline MaskGrid read_mask_pgm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255)
    throw IoError("bad PGM header: " + path.string());
  is.get();  // single whitespace after maxval
  MaskGrid mask(w, h, 0);
  std::vector<unsigned char> row(w);
  for (int y = 0; y < h; ++y) {
    if (!is.read(reinterpret_cast<char*>(row.data()), w)) throw IoError("truncated PGM: " + path.string());
    for (int x = 0; x < w; ++x) mask(x, y) = row[x] >= 128 ? 1 : 0;
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Point clouds (binary little-endian PLY).

inline void write_cloud_ply(const fs::path& path, const PointCloud& cloud,
                            FaultInjector* fault = nullptr) {
  atomic_write(path, [&](std::ostream& os) {
    os << "ply\nformat binary_little_endian 1.0\n"
       << "element vertex " << cloud.size() << "\n"
       << "property float x\nproperty float y\nproperty float z\n"
       << "property float confidence\nend_header\n";
    for (size_t i = 0; i < cloud.size(); ++i) {
      float rec[4] = {static_cast<float>(cloud.points[i].x()), static_cast<float>(cloud.points[i].y()),
                      static_cast<float>(cloud.points[i].z()),
                      static_cast<float>(cloud.has_confidence() ? cloud.confidence[i] : 1.0)};
      os.write(reinterpret_cast<const char*>(rec), sizeof(rec));
    }
  }, fault);
}

inline PointCloud read_cloud_ply(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  std::string line;
  size_t n = 0;
  std::vector<std::string> props;
  bool header_done = false;
  if (!std::getline(is, line) || line != "ply") throw IoError("not a PLY file: " + path.string());
  while (std::getline(is, line)) {
    if (line == "end_header") {
      header_done = true;
      break;
    }
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "element") {
      std::string what;
      ls >> what >> n;
      if (what != "vertex") throw IoError("unsupported PLY element in " + path.string());
    } else if (tok == "property") {
      std::string type, name;
      ls >> type >> name;
      if (type != "float") throw IoError("unsupported PLY property type in " + path.string());
      props.push_back(name);
    } else if (tok == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "binary_little_endian") throw IoError("unsupported PLY format in " + path.string());
    }
  }
  if (!header_done) throw IoError("truncated PLY header: " + path.string());
  if (props != std::vector<std::string>{"x", "y", "z", "confidence"})
    throw IoError("unexpected PLY properties in " + path.string());
  PointCloud cloud;
  cloud.points.reserve(n);
  cloud.confidence.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    float rec[4];
    if (!is.read(reinterpret_cast<char*>(rec), sizeof(rec)))
      throw IoError("truncated PLY data: " + path.string());
    cloud.points.emplace_back(rec[0], rec[1], rec[2]);
    cloud.confidence.push_back(rec[3]);
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// Trajectories (TUM text, camera-to-world).

inline void write_trajectory_tum(const fs::path& path, const std::vector<Pose>& cam_to_world,
                                 FaultInjector* fault = nullptr) {
  atomic_write(path, [&](std::ostream& os) {
    char buf[256];
    for (size_t i = 0; i < cam_to_world.size(); ++i) {
      const Pose& p = cam_to_world[i];
      Eigen::Quaterniond q(p.rotation);
      q.normalize();
      if (q.w() < 0) q.coeffs() *= -1.0;
      std::snprintf(buf, sizeof(buf), "%.6f %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n",
                    static_cast<double>(i), p.translation.x(), p.translation.y(),
                    p.translation.z(), q.x(), q.y(), q.z(), q.w());
      os << buf;
    }
  }, fault);
}

inline std::vector<Pose> read_trajectory_tum(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  std::vector<Pose> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    double ts, tx, ty, tz, qx, qy, qz, qw;
    if (!(ls >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw))
      throw IoError("bad TUM line in " + path.string() + ": " + line);
    Eigen::Quaterniond q(qw, qx, qy, qz);
    if (std::abs(q.norm() - 1.0) > 1e-3) throw IoError("non-unit quaternion in " + path.string());
    q.normalize();
    out.push_back(Pose{q.toRotationMatrix(), Vec3(tx, ty, tz)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Small text formats.

inline void write_intrinsics_txt(const fs::path& path, const Intrinsics& k,
                                 FaultInjector* fault = nullptr) {
  atomic_write(path, [&](std::ostream& os) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%.9f %.9f %.9f %.9f %d %d\n", k.fx, k.fy, k.cx, k.cy,
                  k.width, k.height);
    os << buf;
  }, fault);
}

inline Intrinsics read_intrinsics_txt(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  Intrinsics k;
  if (!(is >> k.fx >> k.fy >> k.cx >> k.cy >> k.width >> k.height))
    throw IoError("bad intrinsics file: " + path.string());
  k.validate();
  return k;
}

// 4x4 row-major, world-to-camera.
inline void write_pose_txt(const fs::path& path, const Pose& pose, FaultInjector* fault = nullptr) {
  atomic_write(path, [&](std::ostream& os) {
    Mat4 m = pose.matrix();
    char buf[256];
    for (int r = 0; r < 4; ++r) {
      std::snprintf(buf, sizeof(buf), "%.12f %.12f %.12f %.12f\n", m(r, 0), m(r, 1), m(r, 2),
                    m(r, 3));
      os << buf;
    }
  }, fault);
}

inline Pose read_pose_txt(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  Mat4 m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c)
      if (!(is >> m(r, c))) throw IoError("bad pose file: " + path.string());
  Pose p = Pose::from_matrix(m);
  p.rotation = orthonormalize_rotation(p.rotation);  // absorb text roundoff
  return p;
}

// ---------------------------------------------------------------------------
// Keypoint matches: "x1 y1 x2 y2 score" per line, current frame then previous.

struct MatchRecord {
  double x1, y1, x2, y2, score;
};

inline void write_matches_txt(const fs::path& path, const std::vector<MatchRecord>& matches,
                              FaultInjector* fault = nullptr) {
  atomic_write(path, [&](std::ostream& os) {
    char buf[256];
    for (const auto& m : matches) {
      std::snprintf(buf, sizeof(buf), "%.6f %.6f %.6f %.6f %.6f\n", m.x1, m.y1, m.x2, m.y2,
                    m.score);
      os << buf;
    }
  }, fault);
}

inline std::vector<MatchRecord> read_matches_txt(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path.string());
  std::vector<MatchRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    MatchRecord m;
    if (!(ls >> m.x1 >> m.y1 >> m.x2 >> m.y2 >> m.score))
      throw IoError("bad match line in " + path.string() + ": " + line);
    out.push_back(m);
  }
  return out;
}

}  // namespace cogmap
