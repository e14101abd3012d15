#pragma once

// Incremental 3D convex hull, O(n^2), double precision with a relative
// epsilon on the visibility test.  Only needs to classify which input points
// end up as hull vertices; that is what the hidden-point-removal visibility
// test consumes.

#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <stdexcept>
#include <vector>

#include "pointraft/cloud.hpp"

namespace pointraft {

// indices of the input points that are vertices of the convex hull.
// Degenerate input (all coplanar or fewer than 4 points) throws.
inline std::set<std::size_t> convex_hull_vertices(const std::vector<Vec3>& pts) {
  const std::size_t n = pts.size();
  if (n < 4) throw std::invalid_argument("convex hull needs >= 4 points");

  double scale = 0.0;
  for (const Vec3& p : pts)
    scale = std::max({scale, std::abs(p.x), std::abs(p.y), std::abs(p.z)});
  const double eps = std::max(scale, 1.0) * 1e-10;

  // initial tetrahedron: two extreme points, then max-distance from the line,
  // then max-distance from the plane
  std::size_t i0 = 0, i1 = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (lex_less(pts[i], pts[i0])) i0 = i;
    if (lex_less(pts[i1], pts[i])) i1 = i;
  }
  if (i0 == i1) throw std::invalid_argument("convex hull: all points identical");
  std::size_t i2 = n;
  double best = eps;
  const Vec3 d01 = pts[i1] - pts[i0];
  for (std::size_t i = 0; i < n; ++i) {
    const double area = d01.cross(pts[i] - pts[i0]).norm();
    if (area > best) {
      best = area;
      i2 = i;
    }
  }
  if (i2 == n) throw std::invalid_argument("convex hull: points are collinear");
  std::size_t i3 = n;
  best = eps;
  const Vec3 nrm0 = d01.cross(pts[i2] - pts[i0]);
  for (std::size_t i = 0; i < n; ++i) {
    const double vol = std::abs(nrm0.dot(pts[i] - pts[i0]));
    if (vol > best) {
      best = vol;
      i3 = i;
    }
  }
  if (i3 == n) throw std::invalid_argument("convex hull: points are coplanar");

  struct Face {
    std::array<std::size_t, 3> v;
    Vec3 n;  // outward, unnormalized
    bool alive = true;
  };
  std::vector<Face> faces;
  const Vec3 inner = (pts[i0] + pts[i1] + pts[i2] + pts[i3]) * 0.25;
  auto add_face = [&](std::size_t a, std::size_t b, std::size_t c) {
    Face f;
    f.v = {a, b, c};
    f.n = (pts[b] - pts[a]).cross(pts[c] - pts[a]);
    if (f.n.dot(inner - pts[a]) > 0.0) {  // flip to point away from the interior
      std::swap(f.v[1], f.v[2]);
      f.n = f.n * -1.0;
    }
    faces.push_back(f);
  };
  add_face(i0, i1, i2);
  add_face(i0, i1, i3);
  add_face(i0, i2, i3);
  add_face(i1, i2, i3);

  for (std::size_t p = 0; p < n; ++p) {
    if (p == i0 || p == i1 || p == i2 || p == i3) continue;
    // faces the point can see
    std::vector<std::size_t> visible;
    for (std::size_t fi = 0; fi < faces.size(); ++fi) {
      Face& f = faces[fi];
      if (!f.alive) continue;
      if (f.n.dot(pts[p] - pts[f.v[0]]) > eps * std::max(1.0, f.n.norm()))
        visible.push_back(fi);
    }
    if (visible.empty()) continue;  // interior (or on the surface) point

    // horizon = edges of visible faces adjacent to exactly one visible face
    std::map<std::pair<std::size_t, std::size_t>, int> edge_count;
    for (std::size_t fi : visible) {
      const auto& v = faces[fi].v;
      for (int k = 0; k < 3; ++k) {
        std::size_t a = v[k], b = v[(k + 1) % 3];
        if (a > b) std::swap(a, b);
        edge_count[{a, b}]++;
      }
      faces[fi].alive = false;
    }
    for (const auto& [edge, count] : edge_count)
      if (count == 1) add_face(edge.first, edge.second, p);
  }

  std::set<std::size_t> verts;
  for (const Face& f : faces)
    if (f.alive) verts.insert(f.v.begin(), f.v.end());
  return verts;
}

}  // namespace pointraft
