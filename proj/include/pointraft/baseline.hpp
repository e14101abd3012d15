#pragma once

// Linear-regression benchmark: weight from oriented-bounding-box length and
// width plus the belt-referenced height.  Ordinary least squares with an
// intercept, solved through column-equilibrated normal equations.  Samples
// are accumulated in lexicographic order so the fit is bit-identical under
// input permutation.

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pointraft/cloud.hpp"
#include "pointraft/common.hpp"

namespace pointraft {

struct LinearModel {
  double c_length = 0.0;  // grams per meter
  double c_width = 0.0;
  double c_height = 0.0;
  double intercept = 0.0;  // grams
};

// obb length/width plus belt height, all in meters, from the raw
// (uncentered) cloud
inline std::array<double, 3> extract_features(const PointCloud& cloud,
                                              double camera_belt_distance_m) {
  const OrientedBBox box = oriented_bbox(cloud);
  const double h = estimate_height(cloud, camera_belt_distance_m);
  return {box.extents[0], box.extents[1], h};
}

inline LinearModel fit_linear(const std::vector<std::array<double, 3>>& features,
                              const std::vector<double>& weights_g) {
  if (features.size() != weights_g.size())
    throw std::invalid_argument("fit_linear: feature/target count mismatch");
  const std::size_t n = features.size();
  if (n < 4) throw DataError("linear fit needs at least 4 samples, got " + std::to_string(n));

  // accumulate in sorted order: the fit must not depend on sample order
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (features[a] != features[b]) return features[a] < features[b];
    return weights_g[a] < weights_g[b];
  });

  // columns: intercept, length, width, height; the intercept leads so a
  // constant feature is the one reported as collinear
  static const char* kCol[4] = {"intercept", "length", "width", "height"};
  Eigen::MatrixXd X(n, 4);
  Eigen::VectorXd y(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t i = order[r];
    if (!std::isfinite(features[i][0]) || !std::isfinite(features[i][1]) ||
        !std::isfinite(features[i][2]) || !std::isfinite(weights_g[i]))
      throw DataError("fit_linear: non-finite sample");
    X(r, 0) = 1.0;
    X(r, 1) = features[i][0];
    X(r, 2) = features[i][1];
    X(r, 3) = features[i][2];
    y(r) = weights_g[i];
  }

  // equilibrate columns so metre-scale features and the unit intercept
  // condition alike, then detect dependent columns by Gram-Schmidt residual
  Eigen::Vector4d scale;
  for (int c = 0; c < 4; ++c) {
    const double m = X.col(c).cwiseAbs().maxCoeff();
    scale(c) = m > 0 ? 1.0 / m : 1.0;
    X.col(c) *= scale(c);
  }
  {
    Eigen::MatrixXd q(n, 4);
    int rank = 0;
    std::string bad;
    for (int c = 0; c < 4; ++c) {
      Eigen::VectorXd v = X.col(c);
      for (int k = 0; k < rank; ++k) v -= q.col(k).dot(X.col(c)) * q.col(k);
      if (v.norm() <= 1e-8 * X.col(c).norm()) {
        if (!bad.empty()) bad += ", ";
        bad += kCol[c];
        continue;
      }
      q.col(rank++) = v / v.norm();
    }
    if (!bad.empty())
      throw DataError("rank-deficient features: column(s) collinear with the others: " + bad);
  }

  const Eigen::Matrix4d A = X.transpose() * X;
  const Eigen::Vector4d b = X.transpose() * y;
  Eigen::Vector4d beta = A.ldlt().solve(b);
  beta += A.ldlt().solve(b - A * beta);  // one refinement step
  beta = beta.cwiseProduct(scale);       // undo equilibration

  LinearModel m;
  m.intercept = beta(0);
  m.c_length = beta(1);
  m.c_width = beta(2);
  m.c_height = beta(3);
  if (!std::isfinite(m.intercept) || !std::isfinite(m.c_length) ||
      !std::isfinite(m.c_width) || !std::isfinite(m.c_height))
    throw NumericError("fit_linear: non-finite coefficients");
  return m;
}

inline double predict_linear(const LinearModel& m, const std::array<double, 3>& f) {
  return m.c_length * f[0] + m.c_width * f[1] + m.c_height * f[2] + m.intercept;
}

inline void save_linear_model(const LinearModel& m, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write linear model: " + path);
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "c_length %.17g\nc_width %.17g\nc_height %.17g\nintercept %.17g\n",
                m.c_length, m.c_width, m.c_height, m.intercept);
  f << buf;
  if (!f.good()) throw DataError("failed writing linear model: " + path);
}

inline LinearModel load_linear_model(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open linear model: " + path);
  LinearModel m;
  const char* keys[4] = {"c_length", "c_width", "c_height", "intercept"};
  double* slots[4] = {&m.c_length, &m.c_width, &m.c_height, &m.intercept};
  for (int i = 0; i < 4; ++i) {
    std::string key;
    double val = 0.0;
    if (!(f >> key >> val) || key != keys[i] || !std::isfinite(val))
      throw DataError("malformed linear model file: " + path);
    *slots[i] = val;
  }
  return m;
}

}  // namespace pointraft
