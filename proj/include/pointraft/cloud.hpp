#pragma once

// point-cloud primitives: file io, deterministic farthest point sampling,
// centering, dbscan cluster filtering, height estimation and pca-based
// oriented bounding boxes. all geometry in meters, camera frame with +z
// pointing from the camera toward the belt.

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "pointraft/common.hpp"

namespace pointraft {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double squared_norm() const { return dot(*this); }
  double norm() const { return std::sqrt(squared_norm()); }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
};

inline double squared_dist(const Vec3& a, const Vec3& b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return dx * dx + dy * dy + dz * dz;
}

inline bool lex_less(const Vec3& a, const Vec3& b) {
  if (a.x != b.x) return a.x < b.x;
  if (a.y != b.y) return a.y < b.y;
  return a.z < b.z;
}

struct PointCloud {
  std::vector<Vec3> pts;
  std::string id;

  std::size_t size() const { return pts.size(); }
  bool empty() const { return pts.empty(); }
};

// ---------------------------------------------------------------------------
// io

namespace detail {

// round to float32 and back; the volatile store keeps gcc 11's SLP pass from
// folding the paired narrow/widen casts into a no-op (miscompile at -O3)
inline double f32(double v) {
  volatile float f = float(v);
  return double(f);
}

inline bool parse_double(std::string_view tok, double& out) {
  const char* b = tok.data();
  const char* e = b + tok.size();
  auto res = std::from_chars(b, e, out);
  return res.ec == std::errc() && res.ptr == e;
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      std::string f = line.substr(start, i - start);
      while (!f.empty() && (f.back() == '\r' || f.back() == ' ')) f.pop_back();
      std::size_t b = 0;
      while (b < f.size() && f[b] == ' ') ++b;
      out.push_back(f.substr(b));
      start = i + 1;
    }
  }
  return out;
}

inline void check_finite(const PointCloud& c, const std::string& path) {
  for (const Vec3& p : c.pts) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
      throw DataError("non-finite coordinate in " + path);
    }
  }
}

}  // namespace detail

inline PointCloud load_cloud_xyz(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  PointCloud c;
  c.id = path;
  std::string line;
  while (std::getline(in, line)) {
    auto toks = detail::split_ws(line);
    if (toks.empty()) continue;
    if (toks.size() < 3) throw DataError("bad xyz line in " + path + ": " + line);
    Vec3 p;
    if (!detail::parse_double(toks[0], p.x) || !detail::parse_double(toks[1], p.y) ||
        !detail::parse_double(toks[2], p.z)) {
      throw DataError("bad xyz line in " + path + ": " + line);
    }
    c.pts.push_back(p);
  }
  if (c.empty()) throw DataError("empty cloud: " + path);
  detail::check_finite(c, path);
  return c;
}

inline PointCloud load_cloud_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty cloud: " + path);
  auto header = detail::split_csv(line);
  int ix = -1, iy = -1, iz = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "x") ix = int(i);
    if (header[i] == "y") iy = int(i);
    if (header[i] == "z") iz = int(i);
  }
  if (ix < 0 || iy < 0 || iz < 0)
    throw DataError("csv header must contain x,y,z columns: " + path);
  PointCloud c;
  c.id = path;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    auto f = detail::split_csv(line);
    if (f.size() <= std::size_t(std::max({ix, iy, iz})))
      throw DataError("short csv row in " + path);
    Vec3 p;
    if (!detail::parse_double(f[std::size_t(ix)], p.x) ||
        !detail::parse_double(f[std::size_t(iy)], p.y) ||
        !detail::parse_double(f[std::size_t(iz)], p.z)) {
      throw DataError("bad csv row in " + path + ": " + line);
    }
    c.pts.push_back(p);
  }
  if (c.empty()) throw DataError("empty cloud: " + path);
  detail::check_finite(c, path);
  return c;
}

inline PointCloud load_cloud_ply(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || detail::split_ws(line).empty() ||
      detail::split_ws(line)[0] != "ply") {
    throw DataError("not a ply file: " + path);
  }
  long n_vertices = -1;
  int ix = -1, iy = -1, iz = -1;
  bool single_precision = true;  // quantize parsed values to the declared type
  int prop_count = 0;
  bool in_vertex_element = false;
  bool ascii = false;
  while (std::getline(in, line)) {
    auto t = detail::split_ws(line);
    if (t.empty()) continue;
    if (t[0] == "comment") continue;
    if (t[0] == "format") {
      ascii = t.size() >= 2 && t[1] == "ascii";
      if (!ascii) throw DataError("only ascii ply is supported: " + path);
    } else if (t[0] == "element") {
      in_vertex_element = t.size() >= 3 && t[1] == "vertex";
      if (in_vertex_element) {
        double n = 0;
        if (!detail::parse_double(t[2], n)) throw DataError("bad ply header: " + path);
        n_vertices = long(n);
      }
    } else if (t[0] == "property" && in_vertex_element) {
      if (t.size() >= 3) {
        if (t[2] == "x") ix = prop_count;
        if (t[2] == "y") iy = prop_count;
        if (t[2] == "z") iz = prop_count;
        if ((t[2] == "x" || t[2] == "y" || t[2] == "z") &&
            (t[1] == "double" || t[1] == "float64")) {
          single_precision = false;
        }
      }
      ++prop_count;
    } else if (t[0] == "end_header") {
      break;
    }
  }
  if (n_vertices < 0 || ix < 0 || iy < 0 || iz < 0)
    throw DataError("ply header missing vertex x/y/z: " + path);
  if (n_vertices == 0) throw DataError("empty cloud: " + path);
  PointCloud c;
  c.id = path;
  c.pts.reserve(std::size_t(n_vertices));
  for (long v = 0; v < n_vertices; ++v) {
    if (!std::getline(in, line)) throw DataError("truncated ply: " + path);
    auto t = detail::split_ws(line);
    if (int(t.size()) < prop_count) throw DataError("short ply vertex row: " + path);
    Vec3 p;
    if (!detail::parse_double(t[std::size_t(ix)], p.x) ||
        !detail::parse_double(t[std::size_t(iy)], p.y) ||
        !detail::parse_double(t[std::size_t(iz)], p.z)) {
      throw DataError("bad ply vertex row in " + path + ": " + line);
    }
    if (single_precision) {
      p.x = detail::f32(p.x);
      p.y = detail::f32(p.y);
      p.z = detail::f32(p.z);
    }
    c.pts.push_back(p);
  }
  detail::check_finite(c, path);
  return c;
}

inline PointCloud load_cloud(const std::string& path) {
  auto dot = path.rfind('.');
  std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  for (char& ch : ext) ch = char(std::tolower(static_cast<unsigned char>(ch)));
  if (ext == "ply") return load_cloud_ply(path);
  if (ext == "xyz" || ext == "txt") return load_cloud_xyz(path);
  if (ext == "csv") return load_cloud_csv(path);
  throw DataError("unknown cloud format (expect .ply/.xyz/.csv): " + path);
}

// coordinates are quantized to float32 on write (matches the declared ply
// property type); printing with 9 significant digits round-trips those floats
// exactly, so write-then-read is lossless.
inline void save_cloud_ply(const PointCloud& c, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw DataError("cannot write " + path);
  std::fprintf(f, "ply\nformat ascii 1.0\nelement vertex %zu\n", c.size());
  std::fprintf(f, "property float x\nproperty float y\nproperty float z\nend_header\n");
  for (const Vec3& p : c.pts) {
    std::fprintf(f, "%.9g %.9g %.9g\n", detail::f32(p.x), detail::f32(p.y),
                 detail::f32(p.z));
  }
  if (std::fclose(f) != 0) throw DataError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// centering

// permutation-invariant centroid: coordinates are accumulated in sorted order
// so the same point set always yields the bitwise-identical mean
inline Vec3 centroid(const PointCloud& c) {
  if (c.empty()) throw DataError("centroid of empty cloud");
  std::vector<Vec3> s = c.pts;
  std::sort(s.begin(), s.end(), lex_less);
  Vec3 acc;
  for (const Vec3& p : s) acc = acc + p;
  return acc * (1.0 / double(c.size()));
}

struct CenterResult {
  PointCloud cloud;
  Vec3 centroid;  // the translation that was removed
};

// translation only; pairwise distances are preserved exactly (no scale change)
inline CenterResult center(const PointCloud& c) {
  CenterResult r;
  r.centroid = centroid(c);
  r.cloud.id = c.id;
  r.cloud.pts.reserve(c.size());
  for (const Vec3& p : c.pts) r.cloud.pts.push_back(p - r.centroid);
  return r;
}

// ---------------------------------------------------------------------------
// height from the belt reference

// height = belt distance - min z over the raw (uncentered) cloud, clamped to
// [0, belt]; depth noise can push min z past the belt plane, hence the clamp
inline double estimate_height(const PointCloud& c, double camera_belt_distance_m,
                              bool* clamped = nullptr) {
  if (c.empty()) throw DataError("estimate_height: empty cloud");
  if (!(camera_belt_distance_m > 0.0))
    throw DataError("estimate_height: camera-belt distance must be > 0");
  double min_z = std::numeric_limits<double>::infinity();
  for (const Vec3& p : c.pts) min_z = std::min(min_z, p.z);
  double h = camera_belt_distance_m - min_z;
  bool clip = false;
  if (h < 0.0) { h = 0.0; clip = true; }
  if (h > camera_belt_distance_m) { h = camera_belt_distance_m; clip = true; }
  if (clamped) *clamped = clip;
  return h;
}

// ---------------------------------------------------------------------------
// farthest point sampling

namespace detail {

// deterministic fps over an indexable accessor returning Vec3. start = point
// farthest from the centroid; every later pick maximizes the min distance to
// the selected set. all ties break by lexicographic (x,y,z) comparison of the
// candidate points, never by input position, and the centroid is accumulated
// in sorted order -- together this makes the selected point set invariant to
// input permutation.
template <class GetPt>
std::vector<std::size_t> fps_core(GetPt&& get, std::size_t n, std::size_t k) {
  if (k == 0) throw DataError("fps: k must be >= 1");
  if (n == 0) throw DataError("fps: empty cloud");
  std::vector<std::size_t> picked;
  if (k >= n) {
    picked.resize(n);
    std::iota(picked.begin(), picked.end(), std::size_t(0));
    return picked;
  }

  std::vector<Vec3> sorted;
  sorted.reserve(n);
  for (std::size_t i = 0; i < n; ++i) sorted.push_back(get(i));
  std::sort(sorted.begin(), sorted.end(), lex_less);
  Vec3 ctr;
  for (const Vec3& p : sorted) ctr = ctr + p;
  ctr = ctr * (1.0 / double(n));

  std::vector<char> used(n, 0);
  auto pick_best = [&](auto&& dist_of) {
    std::size_t best = std::size_t(-1);
    double bd = -1.0;
    Vec3 bp;
    for (std::size_t i = 0; i < n; ++i) {
      if (used[i]) continue;
      const double d = dist_of(i);
      const Vec3 p = get(i);
      if (best == std::size_t(-1) || d > bd || (d == bd && lex_less(p, bp))) {
        best = i;
        bd = d;
        bp = p;
      }
    }
    return best;
  };

  const std::size_t start = pick_best([&](std::size_t i) { return squared_dist(get(i), ctr); });
  picked.reserve(k);
  picked.push_back(start);
  used[start] = 1;

  std::vector<double> min_d2(n);
  for (std::size_t i = 0; i < n; ++i) min_d2[i] = squared_dist(get(i), get(start));

  while (picked.size() < k) {
    const std::size_t nxt = pick_best([&](std::size_t i) { return min_d2[i]; });
    picked.push_back(nxt);
    used[nxt] = 1;
    for (std::size_t i = 0; i < n; ++i) {
      if (!used[i]) min_d2[i] = std::min(min_d2[i], squared_dist(get(i), get(nxt)));
    }
  }
  return picked;
}

}  // namespace detail

inline std::vector<std::size_t> fps_indices(const PointCloud& c, std::size_t k) {
  return detail::fps_core([&](std::size_t i) { return c.pts[i]; }, c.size(), k);
}

inline PointCloud fps(const PointCloud& c, std::size_t k) {
  auto idx = fps_indices(c, k);
  PointCloud out;
  out.id = c.id;
  out.pts.reserve(idx.size());
  for (std::size_t i : idx) out.pts.push_back(c.pts[i]);
  return out;
}

// ---------------------------------------------------------------------------
// dbscan cluster filtering

namespace detail {

// uniform grid over eps-sized cells; cell coords are packed into one key.
// offsets keep indices positive for clouds within +-10 km of the origin.
struct EpsGrid {
  double eps;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> cells;

  static std::uint64_t key(long ix, long iy, long iz) {
    const std::uint64_t bias = 1u << 20;
    return ((std::uint64_t(ix) + bias) << 42) | ((std::uint64_t(iy) + bias) << 21) |
           (std::uint64_t(iz) + bias);
  }

  EpsGrid(const std::vector<Vec3>& pts, double e) : eps(e) {
    for (std::size_t i = 0; i < pts.size(); ++i) {
      cells[key(cell(pts[i].x), cell(pts[i].y), cell(pts[i].z))].push_back(std::uint32_t(i));
    }
  }

  long cell(double v) const { return long(std::floor(v / eps)); }

  // ascending index order keeps downstream iteration deterministic
  std::vector<std::size_t> neighbors(const std::vector<Vec3>& pts, std::size_t i) const {
    std::vector<std::size_t> out;
    const Vec3& p = pts[i];
    const double e2 = eps * eps;
    const long cx = cell(p.x), cy = cell(p.y), cz = cell(p.z);
    for (long dx = -1; dx <= 1; ++dx)
      for (long dy = -1; dy <= 1; ++dy)
        for (long dz = -1; dz <= 1; ++dz) {
          auto it = cells.find(key(cx + dx, cy + dy, cz + dz));
          if (it == cells.end()) continue;
          for (std::uint32_t j : it->second) {
            if (squared_dist(p, pts[j]) <= e2) out.push_back(j);
          }
        }
    std::sort(out.begin(), out.end());
    return out;
  }
};

}  // namespace detail

// classic dbscan; min_pts counts the query point itself. clusters are returned
// in formation order; border points join the first cluster that reaches them.
inline std::vector<std::vector<std::size_t>> dbscan_clusters(const std::vector<Vec3>& pts,
                                                             double eps, int min_pts) {
  if (pts.empty()) throw DataError("dbscan: empty cloud");
  if (!(eps > 0.0)) throw DataError("dbscan: eps must be > 0");
  if (min_pts < 1) throw DataError("dbscan: min_pts must be >= 1");
  const detail::EpsGrid grid(pts, eps);

  const int kUnvisited = 0, kNoise = -1;
  std::vector<int> label(pts.size(), kUnvisited);
  std::vector<std::vector<std::size_t>> clusters;

  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (label[i] != kUnvisited) continue;
    auto nb = grid.neighbors(pts, i);
    if (int(nb.size()) < min_pts) {
      label[i] = kNoise;
      continue;
    }
    const int cid = int(clusters.size()) + 1;
    clusters.emplace_back();
    label[i] = cid;
    clusters.back().push_back(i);
    std::vector<std::size_t> queue = nb;
    for (std::size_t pos = 0; pos < queue.size(); ++pos) {
      const std::size_t j = queue[pos];
      if (label[j] == kNoise) {
        label[j] = cid;  // border point adopted by the first cluster to reach it
        clusters.back().push_back(j);
      }
      if (label[j] != kUnvisited) continue;
      label[j] = cid;
      clusters.back().push_back(j);
      auto nbj = grid.neighbors(pts, j);
      if (int(nbj.size()) >= min_pts) queue.insert(queue.end(), nbj.begin(), nbj.end());
    }
    std::sort(clusters.back().begin(), clusters.back().end());
  }
  return clusters;
}

// keeps the largest dbscan cluster (the main object); ties keep the first
// formed. throws when everything is classified as noise.
inline PointCloud filter_clusters(const PointCloud& c, double eps = 0.01, int min_pts = 10) {
  auto clusters = dbscan_clusters(c.pts, eps, min_pts);
  if (clusters.empty()) throw DataError("no main cluster (all points noise)");
  std::size_t best = 0;
  for (std::size_t i = 1; i < clusters.size(); ++i) {
    if (clusters[i].size() > clusters[best].size()) best = i;
  }
  PointCloud out;
  out.id = c.id;
  out.pts.reserve(clusters[best].size());
  for (std::size_t i : clusters[best]) out.pts.push_back(c.pts[i]);
  return out;
}

// ---------------------------------------------------------------------------
// pca oriented bounding box

struct OrientedBBox {
  Vec3 center;
  std::array<Vec3, 3> axes;       // unit length, pairwise orthogonal
  std::array<double, 3> extents;  // d1 >= d2 >= d3 (meters), paired with axes
};

// axes are the covariance eigenvectors; each axis sign is fixed so its dot
// product with (1,1,1) is non-negative, falling back to +x (then +y) when
// perpendicular. extents are max-min projections sorted descending together
// with their axes.
inline OrientedBBox oriented_bbox(const PointCloud& c) {
  if (c.size() < 3) throw DataError("oriented_bbox: need at least 3 points");
  const Vec3 mu = centroid(c);
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const Vec3& p : c.pts) {
    const Eigen::Vector3d d(p.x - mu.x, p.y - mu.y, p.z - mu.z);
    cov += d * d.transpose();
  }
  cov /= double(c.size());
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  if (es.info() != Eigen::Success) throw NumericError("oriented_bbox: eigensolver failed");
  const Eigen::Vector3d evals = es.eigenvalues();  // ascending
  if (!(evals(2) > 0.0) || evals(1) <= 1e-10 * evals(2)) {
    throw DataError("oriented_bbox: degenerate (collinear or coincident) cloud");
  }

  OrientedBBox box;
  std::array<double, 3> mid{};
  for (int a = 0; a < 3; ++a) {
    Eigen::Vector3d v = es.eigenvectors().col(2 - a);  // descending eigenvalue
    Vec3 axis{v(0), v(1), v(2)};
    double s = axis.x + axis.y + axis.z;  // dot with (1,1,1)
    if (std::abs(s) <= 1e-12) s = axis.x;
    if (std::abs(s) <= 1e-12) s = axis.y;
    if (s < 0.0) axis = axis * -1.0;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (const Vec3& p : c.pts) {
      const double t = (p - mu).dot(axis);
      lo = std::min(lo, t);
      hi = std::max(hi, t);
    }
    box.axes[std::size_t(a)] = axis;
    box.extents[std::size_t(a)] = hi - lo;
    mid[std::size_t(a)] = 0.5 * (lo + hi);
  }

  // keep extents paired with axes while sorting descending
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return box.extents[std::size_t(a)] > box.extents[std::size_t(b)];
  });
  OrientedBBox out;
  out.center = mu;
  for (int a = 0; a < 3; ++a) {
    out.axes[std::size_t(a)] = box.axes[std::size_t(order[std::size_t(a)])];
    out.extents[std::size_t(a)] = box.extents[std::size_t(order[std::size_t(a)])];
    out.center = out.center + out.axes[std::size_t(a)] * mid[std::size_t(order[std::size_t(a)])];
  }
  return out;
}

// longest over shortest obb extent; ~1 for spheres, ~2 for elongated tubers
inline double elongation_factor(const OrientedBBox& box) {
  if (box.extents[2] <= 1e-6) throw DataError("elongation_factor: degenerate flat cloud");
  return box.extents[0] / box.extents[2];
}

}  // namespace pointraft
