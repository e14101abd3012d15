#include "pointraft/synth.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

namespace pointraft {
namespace {

namespace fs = std::filesystem;

SynthTuberSpec sphere_spec(double r, double belt = 0.46) {
  SynthTuberSpec s;
  s.a = s.b = s.c = r;
  s.eps1 = s.eps2 = 1.0;
  s.belt_distance_m = belt;
  return s;
}

TEST(SynthVolume, SphereMatchesAnalytic) {
  const SynthTuberSpec s = sphere_spec(0.03);
  const double vol_cm3 = superellipsoid_volume(s) * 1e6;
  EXPECT_NEAR(vol_cm3, 4.0 / 3.0 * 3.14159265358979 * 27.0, 1e-7);  // 113.097 cm^3
  EXPECT_NEAR(tuber_weight_g(s), 122.145, 0.01);
}

TEST(SynthVolume, CubicScaling) {
  SynthTuberSpec s;
  s.a = 0.024;
  s.b = 0.02;
  s.c = 0.015;
  s.eps1 = 1.2;
  s.eps2 = 0.9;
  SynthTuberSpec big = s;
  big.a *= 2;
  big.b *= 2;
  big.c *= 2;
  EXPECT_NEAR(tuber_weight_g(big) / tuber_weight_g(s), 8.0, 1e-9);
}

// inside test for |x/a|, |y/b|, |z/c| against the implicit superellipsoid
bool inside(const SynthTuberSpec& s, double x, double y, double z) {
  const double fx = std::pow(std::abs(x / s.a), 2.0 / s.eps2) +
                    std::pow(std::abs(y / s.b), 2.0 / s.eps2);
  return std::pow(fx, s.eps2 / s.eps1) + std::pow(std::abs(z / s.c), 2.0 / s.eps1) <= 1.0;
}

TEST(SynthVolume, MatchesMonteCarloWithinHalfPercent) {
  const SynthTuberSpec shapes[] = {
      sphere_spec(0.03),
      [] { SynthTuberSpec s; s.a = 0.05; s.b = 0.03; s.c = 0.02; s.eps1 = 1.3; s.eps2 = 0.85; return s; }(),
      [] { SynthTuberSpec s; s.a = 0.04; s.b = 0.035; s.c = 0.03; s.eps1 = 0.8; s.eps2 = 1.2; return s; }(),
  };
  Rng rng(5);
  for (const SynthTuberSpec& s : shapes) {
    const int n = 500000;
    int hits = 0;
    for (int i = 0; i < n; ++i) {
      const double x = rng.uniform(-s.a, s.a);
      const double y = rng.uniform(-s.b, s.b);
      const double z = rng.uniform(-s.c, s.c);
      if (inside(s, x, y, z)) ++hits;
    }
    const double mc = 8.0 * s.a * s.b * s.c * double(hits) / double(n);
    EXPECT_NEAR(superellipsoid_volume(s) / mc, 1.0, 5e-3);
  }
}

TEST(SynthTuberGen, SampledPointsLieOnTheSurface) {
  SynthTuberSpec s;
  s.a = 0.05;
  s.b = 0.03;
  s.c = 0.025;
  s.eps1 = 1.25;
  s.eps2 = 0.9;
  Rng rng(9);
  std::vector<Vec3> pts, nrm;
  sample_superellipsoid(s, 500, rng, pts, nrm);
  ASSERT_EQ(pts.size(), 500u);
  ASSERT_EQ(nrm.size(), 500u);
  for (std::size_t i = 0; i < pts.size(); i += 17) {
    const Vec3 q = pts[i];
    const double fx = std::pow(std::abs(q.x / s.a), 2.0 / s.eps2) +
                      std::pow(std::abs(q.y / s.b), 2.0 / s.eps2);
    const double f = std::pow(fx, s.eps2 / s.eps1) +
                     std::pow(std::abs(q.z / s.c), 2.0 / s.eps1);
    EXPECT_NEAR(f, 1.0, 1e-9);
    EXPECT_NEAR(nrm[i].norm(), 1.0, 1e-12);
    // outward normal: the analytic gradient points away from the center
    EXPECT_GT(nrm[i].dot(q), 0.0);
  }
  // the posed cloud rests on the belt plane
  s.belt_distance_m = 0.46;
  Rng rng2(9);
  const SynthTuber t = generate_tuber(s, 500, rng2);
  double max_z = -1e9;
  for (const Vec3& p : t.cloud.pts) max_z = std::max(max_z, p.z);
  EXPECT_NEAR(max_z, 0.46, 1e-12);
}

TEST(SynthTuberGen, EllipsoidElongationFactor) {
  SynthTuberSpec s;
  s.a = 0.05;
  s.b = 0.025;
  s.c = 0.025;
  Rng rng(10);
  const SynthTuber t = generate_tuber(s, 4000, rng);
  const double elo = elongation_factor(oriented_bbox(t.cloud));
  EXPECT_NEAR(elo, 2.0, 0.1);
}

TEST(SynthTuberGen, RejectsInvalidSpecs) {
  Rng rng(1);
  SynthTuberSpec bad = sphere_spec(0.03);
  bad.eps1 = 0.0;
  EXPECT_THROW(generate_tuber(bad, 100, rng), std::invalid_argument);
  bad = sphere_spec(0.03);
  bad.eps2 = 2.5;
  EXPECT_THROW(generate_tuber(bad, 100, rng), std::invalid_argument);
  bad = sphere_spec(0.005);  // below tuber scale
  EXPECT_THROW(generate_tuber(bad, 100, rng), std::invalid_argument);
  bad = sphere_spec(0.03);
  bad.b = 0.04;  // violates a >= b
  EXPECT_THROW(generate_tuber(bad, 100, rng), std::invalid_argument);
}

TEST(PartialView, ExactSubsetBothMethods) {
  SynthTuberSpec s;
  s.a = 0.045;
  s.b = 0.03;
  s.c = 0.022;
  s.eps1 = 1.1;
  s.eps2 = 0.95;
  s.yaw_rad = 0.7;
  s.tilt_rad = 0.12;
  s.tilt_axis_rad = 1.3;
  Rng rng(11);
  const SynthTuber t = generate_tuber(s, 900, rng);

  std::set<std::tuple<double, double, double>> full;
  double full_min_z = 1e9;
  for (const Vec3& p : t.cloud.pts) {
    full.insert({p.x, p.y, p.z});
    full_min_z = std::min(full_min_z, p.z);
  }
  for (Visibility vis : {Visibility::normal_test, Visibility::hidden_point_removal}) {
    const PointCloud part = partial_view(t, vis);
    ASSERT_GT(part.size(), 0u);
    ASSERT_LT(part.size(), t.cloud.size());
    double part_min_z = 1e9;
    for (const Vec3& p : part.pts) {
      EXPECT_TRUE(full.count({p.x, p.y, p.z}));  // bitwise subset
      part_min_z = std::min(part_min_z, p.z);
    }
    EXPECT_GE(part_min_z, full_min_z);
  }
}

TEST(PartialView, SphereKeepsAboutHalf) {
  const double r = 0.02, belt = 0.46;
  Rng rng(12);
  const SynthTuber t = generate_tuber(sphere_spec(r, belt), 8000, rng);
  for (Visibility vis : {Visibility::normal_test, Visibility::hidden_point_removal}) {
    const PointCloud part = partial_view(t, vis);
    const double frac = double(part.size()) / double(t.cloud.size());
    EXPECT_NEAR(frac, 0.5, 0.05);
    // finite-distance cap: visible fraction is (1 - r/d)/2 with d = belt - r
    EXPECT_NEAR(frac, 0.5 * (1.0 - r / (belt - r)), 0.02);
  }
}

TEST(PartialView, MethodsAgreeOnConvexShape) {
  SynthTuberSpec s;
  s.a = 0.04;
  s.b = 0.028;
  s.c = 0.02;
  s.eps1 = 1.2;
  s.eps2 = 0.9;
  s.yaw_rad = -0.4;
  s.tilt_rad = 0.1;
  Rng rng(13);
  const SynthTuber t = generate_tuber(s, 1500, rng);
  const std::vector<std::size_t> a = visible_indices(t.cloud, t.normals, Visibility::normal_test);
  const std::vector<std::size_t> b =
      visible_indices(t.cloud, t.normals, Visibility::hidden_point_removal);
  std::set<std::size_t> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::size_t agree = 0;
  for (std::size_t i = 0; i < t.cloud.size(); ++i)
    if (sa.count(i) == sb.count(i)) ++agree;
  EXPECT_GE(double(agree) / double(t.cloud.size()), 0.95);
}

TEST(PartialView, SphereHeightEstimate) {
  const double r = 0.03, belt = 0.46;
  Rng rng(14);
  const SynthTuber t = generate_tuber(sphere_spec(r, belt), 6000, rng);
  const PointCloud part = partial_view(t);
  EXPECT_NEAR(estimate_height(part, belt), 2 * r, 3e-3);
}

// for spheres, weight is recoverable from the partial view's OBB alone: both
// the baseline and the network have a learnable signal
TEST(PartialView, SphereWeightFromObbDimensions) {
  Rng rng(15);
  for (double r : {0.02, 0.03, 0.045}) {
    const SynthTuber t = generate_tuber(sphere_spec(r), 6000, rng);
    const PointCloud part = partial_view(t);
    const OrientedBBox box = oriented_bbox(part);
    const double h = estimate_height(part, 0.46);
    const double w_est =
        1.08e6 * (3.14159265358979 / 6.0) * box.extents[0] * box.extents[1] * h;
    EXPECT_NEAR(w_est / tuber_weight_g(sphere_spec(r)), 1.0, 0.05);
  }
}

TEST(Hull, CubeCornersAreTheVertices) {
  std::vector<Vec3> pts;
  for (int i = 0; i < 8; ++i)
    pts.push_back({double(i & 1), double((i >> 1) & 1), double((i >> 2) & 1)});
  Rng rng(16);
  for (int i = 0; i < 60; ++i)  // strictly interior points
    pts.push_back({rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)});
  const std::set<std::size_t> v = convex_hull_vertices(pts);
  ASSERT_EQ(v.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_TRUE(v.count(i));

  std::vector<Vec3> plane;
  for (int i = 0; i < 10; ++i) plane.push_back({double(i), double(i % 3), 0.0});
  EXPECT_THROW(convex_hull_vertices(plane), std::invalid_argument);
  EXPECT_THROW(convex_hull_vertices({{0, 0, 0}, {1, 1, 1}}), std::invalid_argument);
}

TEST(GenerateDataset, CountsLayoutAndDeterminism) {
  const fs::path base = fs::temp_directory_path() / "pointraft_synth";
  fs::remove_all(base);
  SynthOptions opt;
  opt.n_tubers = 12;
  opt.views_per_tuber = 2;
  opt.min_points = 64;
  opt.max_points = 128;
  opt.seed = 3;

  const std::vector<TuberRecord> recs = generate_dataset(opt, (base / "a").string());
  ASSERT_EQ(recs.size(), 12u);
  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(base / "a" / "clouds")) {
    (void)entry;
    ++files;
  }
  EXPECT_EQ(files, 24u);

  std::set<std::string> cultivars;
  std::set<int> seasons;
  for (const TuberRecord& r : recs) {
    EXPECT_EQ(r.cloud_paths.size(), 2u);
    EXPECT_GT(r.weight_g, 16.0);
    EXPECT_LT(r.weight_g, 625.0);
    cultivars.insert(r.cultivar);
    seasons.insert(r.season);
    const PointCloud c = load_cloud(r.cloud_paths[0]);
    EXPECT_GE(c.size(), 8u);
    EXPECT_LE(c.size(), 128u);
    // belt follows the season batch
    if (r.season == 2023) EXPECT_EQ(r.camera_belt_distance_m, 0.35);
    if (r.season == 2024) EXPECT_EQ(r.camera_belt_distance_m, 0.46);
    if (r.season == 2025) EXPECT_EQ(r.camera_belt_distance_m, 0.40);
  }
  EXPECT_EQ(cultivars.size(), 4u);
  EXPECT_EQ(seasons, (std::set<int>{2023, 2024, 2025}));

  // same seed -> byte-identical outputs
  generate_dataset(opt, (base / "b").string());
  auto bytes = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  EXPECT_EQ(bytes(base / "a" / "manifest.csv"), bytes(base / "b" / "manifest.csv"));
  EXPECT_EQ(bytes(base / "a" / "clouds" / "syn0000_v0.ply"),
            bytes(base / "b" / "clouds" / "syn0000_v0.ply"));
  EXPECT_EQ(bytes(base / "a" / "clouds" / "syn0011_v1.ply"),
            bytes(base / "b" / "clouds" / "syn0011_v1.ply"));

  // worker count must not change the output
  SynthOptions par = opt;
  par.workers = 3;
  generate_dataset(par, (base / "c").string());
  EXPECT_EQ(bytes(base / "a" / "manifest.csv"), bytes(base / "c" / "manifest.csv"));
  EXPECT_EQ(bytes(base / "a" / "clouds" / "syn0007_v1.ply"),
            bytes(base / "c" / "clouds" / "syn0007_v1.ply"));

  // a different seed changes the clouds
  SynthOptions other = opt;
  other.seed = 4;
  generate_dataset(other, (base / "d").string());
  EXPECT_NE(bytes(base / "a" / "manifest.csv"), bytes(base / "d" / "manifest.csv"));
}

TEST(GenerateDataset, WeightHistogramCoversSplitBins) {
  const fs::path base = fs::temp_directory_path() / "pointraft_synth_hist";
  fs::remove_all(base);
  SynthOptions opt;
  opt.n_tubers = 200;
  opt.views_per_tuber = 1;
  opt.min_points = 32;
  opt.max_points = 64;
  opt.seed = 8;
  const std::vector<TuberRecord> recs = generate_dataset(opt, base.string());

  double wmin = 1e9, wmax = 0;
  std::vector<int> bin_counts(10, 0);
  const std::vector<double>& edges = SplitSpec{}.bin_edges;
  for (const TuberRecord& r : recs) {
    wmin = std::min(wmin, r.weight_g);
    wmax = std::max(wmax, r.weight_g);
    bin_counts[detail::bin_of(r.weight_g, edges)]++;
  }
  EXPECT_LT(wmin, 40.0);
  EXPECT_GT(wmax, 400.0);
  for (int b = 0; b < 10; ++b) EXPECT_GT(bin_counts[b], 0) << "bin " << b;

  // and the stratified split accepts it directly
  SplitSpec spec;
  spec.seed = 1;
  const SplitResult sr = stratified_split(recs, spec);
  EXPECT_EQ(sr.train.size() + sr.val.size() + sr.test.size(), recs.size());
}

TEST(GenerateDataset, OptionalDepthNoiseAndValidation) {
  const fs::path base = fs::temp_directory_path() / "pointraft_synth_noise";
  fs::remove_all(base);
  SynthOptions opt;
  opt.n_tubers = 2;
  opt.views_per_tuber = 1;
  opt.min_points = 64;
  opt.max_points = 64;
  opt.seed = 9;
  opt.z_noise_m = 0.002;
  const std::vector<TuberRecord> recs = generate_dataset(opt, base.string());
  // noisy depth can dip below the belt plane; the clamp in estimate_height
  // plus the noise magnitude bound the spread
  const PointCloud c = load_cloud(recs[0].cloud_paths[0]);
  EXPECT_EQ(c.size(), 64u);

  SynthOptions bad = opt;
  bad.n_tubers = 0;
  EXPECT_THROW(generate_dataset(bad, base.string()), std::invalid_argument);
  bad = opt;
  bad.min_points = 4;
  EXPECT_THROW(generate_dataset(bad, base.string()), std::invalid_argument);
}

}  // namespace
}  // namespace pointraft
