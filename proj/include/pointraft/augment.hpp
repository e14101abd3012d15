#pragma once

// Train-time cloud augmentation: per-point jitter, small rotations about all
// three axes, random x/y mirror flips, and a random shear.  Draw order from
// one Rng is pinned (jitter xyz per point, then angles x,y,z, then flips x,y,
// then the six shear coefficients row-major) so a seed reproduces the same
// transform regardless of caller.  The output is not re-centered here; the
// training pipeline centers after augmenting.

#include <cmath>

#include "pointraft/cloud.hpp"
#include "pointraft/common.hpp"

namespace pointraft {

struct AugmentOptions {
  bool jitter = true;
  double jitter_m = 5e-4;  // uniform per-coordinate offset bound, meters
  bool rotate = true;
  double max_angle_deg = 2.0;  // each axis angle drawn from [0, max]
  bool flip = true;            // x and y mirror, each with p = 0.5
  bool shear = true;
  // off-diagonal entries drawn from [-mag, mag]; kept small because shear
  // distorts apparent extents while the weight label stays fixed, so large
  // values act as label noise on a size-driven regression target
  double shear_mag = 0.05;
};

inline PointCloud augment(const PointCloud& cloud, Rng& rng,
                          const AugmentOptions& opt = {}) {
  PointCloud out = cloud;
  if (opt.jitter) {
    for (Vec3& p : out.pts) {
      p.x += rng.uniform(-opt.jitter_m, opt.jitter_m);
      p.y += rng.uniform(-opt.jitter_m, opt.jitter_m);
      p.z += rng.uniform(-opt.jitter_m, opt.jitter_m);
    }
  }
  if (opt.rotate) {
    const double d2r = 0.017453292519943295;
    const double ax = rng.uniform(0.0, opt.max_angle_deg) * d2r;
    const double ay = rng.uniform(0.0, opt.max_angle_deg) * d2r;
    const double az = rng.uniform(0.0, opt.max_angle_deg) * d2r;
    const double cx = std::cos(ax), sx = std::sin(ax);
    const double cy = std::cos(ay), sy = std::sin(ay);
    const double cz = std::cos(az), sz = std::sin(az);
    for (Vec3& p : out.pts) {
      double y1 = cx * p.y - sx * p.z, z1 = sx * p.y + cx * p.z;  // about x
      double x2 = cy * p.x + sy * z1, z2 = -sy * p.x + cy * z1;   // about y
      double x3 = cz * x2 - sz * y1, y3 = sz * x2 + cz * y1;      // about z
      p = {x3, y3, z2};
    }
  }
  if (opt.flip) {
    const bool fx = rng.bernoulli(0.5);
    const bool fy = rng.bernoulli(0.5);
    if (fx)
      for (Vec3& p : out.pts) p.x = -p.x;
    if (fy)
      for (Vec3& p : out.pts) p.y = -p.y;
  }
  if (opt.shear) {
    // M = I + S with S zero on the diagonal, entries drawn row-major
    const double sxy = rng.uniform(-opt.shear_mag, opt.shear_mag);
    const double sxz = rng.uniform(-opt.shear_mag, opt.shear_mag);
    const double syx = rng.uniform(-opt.shear_mag, opt.shear_mag);
    const double syz = rng.uniform(-opt.shear_mag, opt.shear_mag);
    const double szx = rng.uniform(-opt.shear_mag, opt.shear_mag);
    const double szy = rng.uniform(-opt.shear_mag, opt.shear_mag);
    for (Vec3& p : out.pts) {
      const Vec3 q = p;
      p.x = q.x + sxy * q.y + sxz * q.z;
      p.y = syx * q.x + q.y + syz * q.z;
      p.z = szx * q.x + szy * q.y + q.z;
    }
  }
  return out;
}

}  // namespace pointraft
