#pragma once

// Synthetic world: superellipsoid tubers sampled as surface clouds, rendered
// to partial views as seen by a top-view depth camera at the origin (+z points
// toward the belt), with analytic ground-truth weight.  Emits the same
// manifest + PLY layout as the real-data pipeline.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "pointraft/cloud.hpp"
#include "pointraft/common.hpp"
#include "pointraft/dataset.hpp"
#include "pointraft/hull.hpp"
#include "pointraft/train.hpp"

namespace pointraft {

struct SynthTuberSpec {
  double a = 0.03, b = 0.03, c = 0.03;  // semi-axes, a >= b >= c, meters
  double eps1 = 1.0, eps2 = 1.0;        // shape exponents, (0, 2) keeps it convex
  double density_g_cm3 = 1.08;          // synthetic-world constant, not a measured value
  double yaw_rad = 0.0;
  double tilt_rad = 0.0;       // rotation about a horizontal axis, small by design
  double tilt_axis_rad = 0.0;  // direction of that horizontal axis in the xy plane
  double x_offset_m = 0.0, y_offset_m = 0.0;
  double belt_distance_m = 0.46;

  void validate() const {
    if (!(a >= b && b >= c)) throw std::invalid_argument("semi-axes must satisfy a >= b >= c");
    if (!(c >= 0.01 && a <= 0.06))
      throw std::invalid_argument("semi-axes must lie in [0.01, 0.06] m");
    if (!(eps1 > 0.0 && eps1 < 2.0 && eps2 > 0.0 && eps2 < 2.0))
      throw std::invalid_argument("shape exponents must lie in (0, 2)");
    if (!(density_g_cm3 > 0.0)) throw std::invalid_argument("density must be positive");
    if (!(belt_distance_m > 0.0)) throw std::invalid_argument("belt distance must be positive");
  }
};

namespace detail {

// signed power: sign(s) * |s|^e
inline double spow(double s, double e) {
  if (s == 0.0) return 0.0;
  return std::copysign(std::pow(std::abs(s), e), s);
}

// V = 2 a b c e1 e2 B(e1/2 + 1, e1) B(e2/2, e2/2)
inline double se_volume(double a, double b, double c, double e1, double e2) {
  return 2.0 * a * b * c * e1 * e2 * std::beta(e1 / 2.0 + 1.0, e1) *
         std::beta(e2 / 2.0, e2 / 2.0);
}

}  // namespace detail

// analytic superellipsoid volume, cubic meters
inline double superellipsoid_volume(const SynthTuberSpec& s) {
  return detail::se_volume(s.a, s.b, s.c, s.eps1, s.eps2);
}

inline double tuber_weight_g(const SynthTuberSpec& s) {
  return s.density_g_cm3 * superellipsoid_volume(s) * 1e6;  // m^3 -> cm^3
}

// full surface cloud with matching outward normals, posed in the camera frame
struct SynthTuber {
  PointCloud cloud;
  std::vector<Vec3> normals;  // unit outward normals, same order as points
  double weight_g = 0.0;
  SynthTuberSpec spec;
};

// surface samples and unit outward normals in the object frame, unposed
inline void sample_superellipsoid(const SynthTuberSpec& spec, std::size_t n_points,
                                  Rng& rng, std::vector<Vec3>& points,
                                  std::vector<Vec3>& normals) {
  spec.validate();
  if (n_points < 4) throw std::invalid_argument("sample_superellipsoid: need >= 4 points");
  points.clear();
  normals.clear();
  points.reserve(n_points);
  normals.reserve(n_points);
  for (std::size_t i = 0; i < n_points; ++i) {
    // eta = asin(u) makes the sphere case exactly area-uniform
    const double eta = std::asin(rng.uniform(-1.0, 1.0));
    const double omega = rng.uniform(-3.14159265358979323846, 3.14159265358979323846);
    const double ce = std::cos(eta), se = std::sin(eta);
    const double cw = std::cos(omega), sw = std::sin(omega);
    points.push_back(
        {spec.a * detail::spow(ce, spec.eps1) * detail::spow(cw, spec.eps2),
         spec.b * detail::spow(ce, spec.eps1) * detail::spow(sw, spec.eps2),
         spec.c * detail::spow(se, spec.eps1)});
    Vec3 nrm{detail::spow(ce, 2.0 - spec.eps1) * detail::spow(cw, 2.0 - spec.eps2) / spec.a,
             detail::spow(ce, 2.0 - spec.eps1) * detail::spow(sw, 2.0 - spec.eps2) / spec.b,
             detail::spow(se, 2.0 - spec.eps1) / spec.c};
    const double len = nrm.norm();
    if (len > 0.0) nrm = nrm * (1.0 / len);
    normals.push_back(nrm);
  }
}

inline SynthTuber generate_tuber(const SynthTuberSpec& spec, std::size_t n_points,
                                 Rng& rng) {
  SynthTuber t;
  t.spec = spec;
  t.weight_g = tuber_weight_g(spec);
  sample_superellipsoid(spec, n_points, rng, t.cloud.pts, t.normals);

  // pose: tilt about a horizontal axis, then yaw about z
  const Vec3 axis{std::cos(spec.tilt_axis_rad), std::sin(spec.tilt_axis_rad), 0.0};
  const double ct = std::cos(spec.tilt_rad), st = std::sin(spec.tilt_rad);
  const double cy = std::cos(spec.yaw_rad), sy = std::sin(spec.yaw_rad);
  auto rotate = [&](const Vec3& v) {
    // Rodrigues about the horizontal axis
    const Vec3 r = v * ct + axis.cross(v) * st + axis * (axis.dot(v) * (1.0 - ct));
    return Vec3{cy * r.x - sy * r.y, sy * r.x + cy * r.y, r.z};
  };
  for (Vec3& p : t.cloud.pts) p = rotate(p);
  for (Vec3& n : t.normals) n = rotate(n);

  // rest on the belt plane: the lowest point (largest z, farthest from the
  // camera) touches z = belt_distance
  double max_z = -std::numeric_limits<double>::infinity();
  for (const Vec3& p : t.cloud.pts) max_z = std::max(max_z, p.z);
  const Vec3 shift{spec.x_offset_m, spec.y_offset_m, spec.belt_distance_m - max_z};
  for (Vec3& p : t.cloud.pts) p = p + shift;
  return t;
}

enum class Visibility { normal_test, hidden_point_removal };

inline Visibility parse_visibility(const std::string& s) {
  if (s == "normal_test") return Visibility::normal_test;
  if (s == "hidden_point_removal") return Visibility::hidden_point_removal;
  throw std::invalid_argument("unknown visibility '" + s +
                              "' (normal_test, hidden_point_removal)");
}

// indices of points visible from the camera at the origin.
// normal_test: a surface point is visible iff its outward normal faces the
// camera (exact for convex bodies).  hidden_point_removal: spherical flip and
// convex hull membership (Katz et al. construction), no normals needed.
inline std::vector<std::size_t> visible_indices(const PointCloud& full,
                                                const std::vector<Vec3>& normals,
                                                Visibility method) {
  if (full.empty()) throw DataError("partial_view: empty cloud");
  std::vector<std::size_t> keep;
  if (method == Visibility::normal_test) {
    if (normals.size() != full.size())
      throw std::invalid_argument("partial_view: normals missing for normal_test");
    for (std::size_t i = 0; i < full.size(); ++i)
      if (normals[i].dot(full.pts[i]) < 0.0) keep.push_back(i);
  } else {
    double rmax = 0.0;
    for (const Vec3& p : full.pts) rmax = std::max(rmax, p.norm());
    // flip radius trade-off: too small falsely removes visible points near
    // high-curvature regions, too large buries near-silhouette occlusions in a
    // hull band that widens with R; 10x the cloud radius sits in the stable
    // plateau for both effects at typical sampling densities
    const double R = 10.0 * rmax;
    std::vector<Vec3> flipped;
    flipped.reserve(full.size() + 1);
    for (const Vec3& p : full.pts) {
      const double d = p.norm();
      if (d == 0.0) throw DataError("partial_view: point coincides with the camera");
      flipped.push_back(p * (2.0 * R / d - 1.0));
    }
    flipped.push_back({0.0, 0.0, 0.0});  // the camera belongs to the hull
    const std::set<std::size_t> verts = convex_hull_vertices(flipped);
    for (std::size_t i = 0; i < full.size(); ++i)
      if (verts.count(i)) keep.push_back(i);
  }
  if (keep.empty()) throw DataError("partial_view: object fully occluded");
  return keep;
}

inline PointCloud partial_view(const SynthTuber& t,
                               Visibility method = Visibility::normal_test) {
  PointCloud out;
  out.id = t.cloud.id;
  for (std::size_t i : visible_indices(t.cloud, t.normals, method))
    out.pts.push_back(t.cloud.pts[i]);
  return out;
}

// ---------------------------------------------------------------------------
// dataset generation

struct SynthOptions {
  int n_tubers = 600;
  int views_per_tuber = 5;
  int min_points = 256;  // partial clouds are subsampled into this range
  int max_points = 1024;
  double z_noise_m = 0.0;  // optional Gaussian depth noise, applied after subsampling
  Visibility visibility = Visibility::normal_test;
  double min_weight_g = 17.0;  // targets drawn log-uniform inside this range
  double max_weight_g = 620.0;
  int workers = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_tubers < 1) throw std::invalid_argument("n_tubers must be >= 1");
    if (views_per_tuber < 1) throw std::invalid_argument("views_per_tuber must be >= 1");
    if (min_points < 8 || max_points < min_points)
      throw std::invalid_argument("need 8 <= min_points <= max_points");
    if (z_noise_m < 0) throw std::invalid_argument("z_noise_m must be >= 0");
    if (!(min_weight_g > 0) || max_weight_g < min_weight_g)
      throw std::invalid_argument("need 0 < min_weight_g <= max_weight_g");
    if (workers < 1) throw std::invalid_argument("workers must be >= 1");
  }
};

namespace detail {

constexpr std::uint64_t kSaltShape = 0x73687065ULL;
constexpr std::uint64_t kSaltView = 0x76696577ULL;

struct Family {
  const char* name;
  double rb_lo, rb_hi;  // b/a
  double rc_lo, rc_hi;  // c/a
  double e1_lo, e1_hi;
  double e2_lo, e2_hi;
};

// pseudo-cultivars: four shape-exponent families from near-spherical to
// elongated
inline const Family* families() {
  static const Family f[4] = {
      {"round", 0.88, 1.00, 0.80, 1.00, 0.85, 1.15, 0.85, 1.15},
      {"oval", 0.70, 0.85, 0.60, 0.80, 0.80, 1.20, 0.80, 1.20},
      {"oblong", 0.55, 0.70, 0.50, 0.65, 0.90, 1.30, 0.80, 1.10},
      {"long", 0.42, 0.55, 0.40, 0.55, 1.00, 1.40, 0.80, 1.10},
  };
  return f;
}

}  // namespace detail

// deterministic tuber shape for index i: family by i mod 4, target weight
// log-uniform, semi-axes solved from the analytic volume and clamped to the
// tuber-scale range (the recorded weight always matches the final axes)
inline SynthTuberSpec synth_shape(int index, const SynthOptions& opt) {
  Rng rng = Rng(opt.seed).child(detail::kSaltShape, std::uint64_t(index));
  const detail::Family& fam = detail::families()[index % 4];
  SynthTuberSpec s;
  s.eps1 = rng.uniform(fam.e1_lo, fam.e1_hi);
  s.eps2 = rng.uniform(fam.e2_lo, fam.e2_hi);
  double rb = rng.uniform(fam.rb_lo, fam.rb_hi);
  double rc = rng.uniform(fam.rc_lo, fam.rc_hi);
  if (rc > rb) std::swap(rb, rc);
  const double w_target =
      std::exp(rng.uniform(std::log(opt.min_weight_g), std::log(opt.max_weight_g)));

  const double unit_w =
      s.density_g_cm3 * detail::se_volume(1.0, rb, rc, s.eps1, s.eps2) * 1e6;
  double a = std::cbrt(w_target / unit_w);
  // clamp into [0.01, 0.06] preserving the axis ratios
  if (a > 0.06) a = 0.06;
  if (a * rc < 0.01) a = 0.01 / rc;
  s.a = a;
  s.b = rb * a;
  s.c = rc * a;
  return s;
}

// writes out_dir/clouds/*.ply and out_dir/manifest.csv; returns the records.
// Per-tuber work runs on derived rng streams, so the output is identical for
// any worker count and any run with the same seed.
inline std::vector<TuberRecord> generate_dataset(const SynthOptions& opt,
                                                 const std::string& out_dir) {
  opt.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "clouds", ec);
  if (ec) throw DataError("cannot create output directory: " + out_dir);

  std::vector<TuberRecord> records(std::size_t(opt.n_tubers));
  parallel_for(std::size_t(opt.n_tubers), opt.workers, [&](std::size_t ui) {
    const int i = int(ui);
    SynthTuberSpec s = synth_shape(i, opt);
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "syn%04d", i);

    TuberRecord rec;
    rec.tuber_id = idbuf;
    rec.cultivar = detail::families()[i % 4].name;
    // three contiguous batches become three seasons with their own belts
    const int batch = (3 * i) / opt.n_tubers;
    rec.season = 2023 + batch;
    rec.camera_belt_distance_m = batch == 0 ? 0.35 : (batch == 1 ? 0.46 : 0.40);
    s.belt_distance_m = rec.camera_belt_distance_m;

    for (int v = 0; v < opt.views_per_tuber; ++v) {
      Rng vr = Rng(opt.seed).child(detail::kSaltView, std::uint64_t(i), std::uint64_t(v));
      SynthTuberSpec posed = s;
      posed.yaw_rad = vr.uniform(-3.141592653589793, 3.141592653589793);
      posed.tilt_axis_rad = vr.uniform(-3.141592653589793, 3.141592653589793);
      posed.tilt_rad = vr.uniform(0.0, 10.0 * 0.017453292519943295);
      posed.x_offset_m = vr.uniform(-0.01, 0.01);
      posed.y_offset_m = vr.uniform(-0.01, 0.01);

      const std::size_t target =
          std::size_t(opt.min_points) + vr.index(std::size_t(opt.max_points - opt.min_points + 1));
      // oversample the full surface so the visible part still covers target
      const std::size_t n_surface = std::size_t(double(target) / 0.35) + 16;
      SynthTuber tuber = generate_tuber(posed, n_surface, vr);
      rec.weight_g = tuber.weight_g;
      PointCloud part = partial_view(tuber, opt.visibility);
      if (part.size() > target) {
        std::vector<std::size_t> idx(part.size());
        std::iota(idx.begin(), idx.end(), 0);
        vr.shuffle(idx);
        idx.resize(target);
        std::sort(idx.begin(), idx.end());  // keep original order, still a subset
        PointCloud sub;
        sub.pts.reserve(target);
        for (std::size_t k : idx) sub.pts.push_back(part.pts[k]);
        part = std::move(sub);
      }
      if (opt.z_noise_m > 0.0)
        for (Vec3& p : part.pts) p.z += vr.normal(0.0, opt.z_noise_m);

      const std::string rel = std::string("clouds/") + idbuf + "_v" + std::to_string(v) + ".ply";
      save_cloud_ply(part, (fs::path(out_dir) / rel).string());
      rec.cloud_paths.push_back(rel);
    }
    records[ui] = std::move(rec);
  });

  save_manifest(records, (fs::path(out_dir) / "manifest.csv").string());
  // hand back absolute paths like load_manifest would
  return load_manifest((fs::path(out_dir) / "manifest.csv").string());
}

}  // namespace pointraft
