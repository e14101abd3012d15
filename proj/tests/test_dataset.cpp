#include "pointraft/dataset.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <set>

namespace pointraft {
namespace {

namespace fs = std::filesystem;

TuberRecord rec(const std::string& id, double w, const std::string& cv = "cv",
                int season = 2023, double belt = 0.46) {
  TuberRecord r;
  r.tuber_id = id;
  r.weight_g = w;
  r.cultivar = cv;
  r.season = season;
  r.camera_belt_distance_m = belt;
  r.cloud_paths = {"/tmp/" + id + ".ply"};
  return r;
}

fs::path temp_dir(const char* tag) {
  fs::path d = fs::temp_directory_path() / (std::string("pointraft_ds_") + tag);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

TEST(Manifest, RoundTripGroupsClouds) {
  fs::path dir = temp_dir("rt");
  std::vector<TuberRecord> recs = {rec("a1", 120.5, "agria", 2023, 0.35),
                                   rec("b2", 33.25, "colomba", 2024, 0.46)};
  recs[0].cloud_paths = {"clouds/a1_v0.ply", "clouds/a1_v1.ply", "clouds/a1_v2.ply"};
  recs[1].cloud_paths = {"clouds/b2_v0.ply"};
  const std::string path = (dir / "manifest.csv").string();
  save_manifest(recs, path);

  std::vector<TuberRecord> back = load_manifest(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].tuber_id, "a1");
  EXPECT_EQ(back[0].weight_g, 120.5);
  EXPECT_EQ(back[0].cultivar, "agria");
  EXPECT_EQ(back[0].season, 2023);
  EXPECT_EQ(back[0].camera_belt_distance_m, 0.35);
  ASSERT_EQ(back[0].cloud_paths.size(), 3u);
  // relative paths resolve against the manifest's directory
  EXPECT_EQ(back[0].cloud_paths[1], (dir / "clouds/a1_v1.ply").string());
  EXPECT_EQ(back[1].cloud_paths.size(), 1u);
  EXPECT_EQ(back[1].weight_g, 33.25);
}

TEST(Manifest, RejectsBadInput) {
  fs::path dir = temp_dir("bad");
  auto write = [&](const char* name, const std::string& body) {
    std::ofstream f(dir / name);
    f << body;
    return (dir / name).string();
  };
  EXPECT_THROW(load_manifest((dir / "missing.csv").string()), DataError);
  EXPECT_THROW(load_manifest(write("h.csv", "tuber,weight\n")), DataError);
  const std::string hdr =
      "tuber_id,weight_g,cultivar,season,camera_belt_distance_m,cloud_path\n";
  EXPECT_THROW(load_manifest(write("empty.csv", hdr)), DataError);
  EXPECT_THROW(load_manifest(write("cols.csv", hdr + "a,1,c,2023,0.4\n")), DataError);
  EXPECT_THROW(load_manifest(write("num.csv", hdr + "a,heavy,c,2023,0.4,p.ply\n")),
               DataError);
  EXPECT_THROW(load_manifest(write("w0.csv", hdr + "a,0,c,2023,0.4,p.ply\n")), DataError);
  // same tuber with two different weights
  EXPECT_THROW(load_manifest(write("inc.csv", hdr + "a,10,c,2023,0.4,p1.ply\n"
                                                    "a,11,c,2023,0.4,p2.ply\n")),
               DataError);
}

TEST(Split, BinAssignmentIsLeftInclusive) {
  const std::vector<double>& e = SplitSpec{}.bin_edges;
  EXPECT_EQ(detail::bin_of(16.0, e), 0u);
  EXPECT_EQ(detail::bin_of(50.9, e), 0u);
  EXPECT_EQ(detail::bin_of(51.0, e), 1u);
  EXPECT_EQ(detail::bin_of(324.9, e), 8u);
  EXPECT_EQ(detail::bin_of(325.0, e), 9u);
  EXPECT_EQ(detail::bin_of(624.9, e), 9u);
  EXPECT_THROW(detail::bin_of(15.9, e), DataError);
  EXPECT_THROW(detail::bin_of(625.0, e), DataError);
}

std::vector<TuberRecord> records_with_occupancy(const std::vector<int>& occupancy) {
  const std::vector<double>& e = SplitSpec{}.bin_edges;
  std::vector<TuberRecord> recs;
  int id = 0;
  for (std::size_t b = 0; b < occupancy.size(); ++b) {
    const double w = 0.5 * (e[b] + e[b + 1]);
    for (int k = 0; k < occupancy[b]; ++k)
      recs.push_back(rec("t" + std::to_string(id++), w));
  }
  return recs;
}

// any occupancy in the published range (83..88 per bin, 859 total) must give
// exactly the published 60/20/20 split sizes
TEST(Split, PaperOccupancyGivesExactSizes) {
  const std::vector<std::vector<int>> compositions = {
      {86, 86, 86, 86, 86, 86, 86, 86, 86, 85},
      {83, 84, 85, 86, 87, 88, 88, 87, 86, 85},
      {88, 88, 88, 88, 83, 83, 83, 84, 86, 88},
  };
  for (const auto& occ : compositions) {
    int total = 0;
    for (int c : occ) total += c;
    ASSERT_EQ(total, 859);
    std::vector<TuberRecord> recs = records_with_occupancy(occ);
    SplitSpec spec;
    spec.seed = 7;
    SplitResult r = stratified_split(recs, spec);
    EXPECT_EQ(r.train.size(), 515u);
    EXPECT_EQ(r.val.size(), 172u);
    EXPECT_EQ(r.test.size(), 172u);

    std::set<std::string> train_ids, val_ids, test_ids;
    for (const auto& t : r.train) train_ids.insert(t.tuber_id);
    for (const auto& t : r.val) val_ids.insert(t.tuber_id);
    for (const auto& t : r.test) test_ids.insert(t.tuber_id);
    EXPECT_EQ(train_ids.size(), r.train.size());
    for (const auto& id : val_ids) {
      EXPECT_FALSE(train_ids.count(id));
      EXPECT_FALSE(test_ids.count(id));
    }
    for (const auto& id : test_ids) EXPECT_FALSE(train_ids.count(id));
    EXPECT_EQ(train_ids.size() + val_ids.size() + test_ids.size(), recs.size());
  }
}

TEST(Split, DeterministicPerSeed) {
  std::vector<TuberRecord> recs = records_with_occupancy({86, 86, 86, 86, 86, 86, 86, 86, 86, 85});
  SplitSpec s1;
  s1.seed = 11;
  SplitResult a = stratified_split(recs, s1);
  SplitResult b = stratified_split(recs, s1);
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i)
    EXPECT_EQ(a.train[i].tuber_id, b.train[i].tuber_id);

  SplitSpec s2;
  s2.seed = 12;
  SplitResult c = stratified_split(recs, s2);
  bool same = a.train.size() == c.train.size();
  if (same)
    for (std::size_t i = 0; i < a.train.size(); ++i)
      same = same && a.train[i].tuber_id == c.train[i].tuber_id;
  EXPECT_FALSE(same);
}

// global sizes always match largest-remainder totals; per-bin counts stay
// within 2 of exact proportionality
TEST(Split, FuzzedSizesAndProportionality) {
  Rng rng(404);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 5 + rng.index(400);
    std::vector<TuberRecord> recs;
    for (std::size_t i = 0; i < n; ++i)
      recs.push_back(rec("f" + std::to_string(i), rng.uniform(16.0, 624.9)));
    SplitSpec spec;
    spec.seed = 1000 + std::uint64_t(trial);
    SplitResult r = stratified_split(recs, spec);

    const double q0 = 0.6 * double(n), q1 = 0.2 * double(n);
    std::size_t t0 = std::size_t(q0), t1 = std::size_t(q1), t2 = std::size_t(q1);
    std::size_t left = n - t0 - t1 - t2;
    // remainders: assign extras in descending remainder order, train wins ties
    std::vector<std::pair<double, int>> rem = {
        {q0 - std::floor(q0), 0}, {q1 - std::floor(q1), 1}, {q1 - std::floor(q1), 2}};
    std::stable_sort(rem.begin(), rem.end(),
                     [](auto& a, auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; k < left; ++k) {
      if (rem[k].second == 0) ++t0;
      if (rem[k].second == 1) ++t1;
      if (rem[k].second == 2) ++t2;
    }
    EXPECT_EQ(r.train.size(), t0) << "n=" << n;
    EXPECT_EQ(r.val.size(), t1) << "n=" << n;
    EXPECT_EQ(r.test.size(), t2) << "n=" << n;

    // per-bin proportionality
    const std::vector<double>& e = SplitSpec{}.bin_edges;
    std::vector<double> bin_n(e.size() - 1, 0), bin_tr(e.size() - 1, 0);
    for (const auto& t : r.train) bin_tr[detail::bin_of(t.weight_g, e)] += 1;
    for (const auto& t : recs) bin_n[detail::bin_of(t.weight_g, e)] += 1;
    for (std::size_t b = 0; b + 1 < e.size(); ++b)
      EXPECT_LT(std::abs(bin_tr[b] - 0.6 * bin_n[b]), 2.0 + 1e-9);
  }
}

TEST(Split, TenSingletonBins) {
  std::vector<TuberRecord> recs = records_with_occupancy({1, 1, 1, 1, 1, 1, 1, 1, 1, 1});
  SplitSpec spec;
  spec.seed = 3;
  SplitResult r = stratified_split(recs, spec);
  EXPECT_EQ(r.train.size(), 6u);
  EXPECT_EQ(r.val.size(), 2u);
  EXPECT_EQ(r.test.size(), 2u);
}

TEST(Split, SingleTuberGoesToTrainWithWarning) {
  SplitResult r = stratified_split({rec("only", 99.0)}, SplitSpec{});
  EXPECT_EQ(r.train.size(), 1u);
  EXPECT_TRUE(r.val.empty());
  EXPECT_TRUE(r.test.empty());
  EXPECT_FALSE(r.warnings.empty());
}

TEST(Split, RejectsBadInput) {
  EXPECT_THROW(stratified_split({}, SplitSpec{}), DataError);
  EXPECT_THROW(stratified_split({rec("a", 700.0)}, SplitSpec{}), DataError);  // out of range
  std::vector<TuberRecord> dup = {rec("a", 100.0), rec("a", 120.0)};
  EXPECT_THROW(stratified_split(dup, SplitSpec{}), DataError);
  SplitSpec bad;
  bad.fractions = {0.5, 0.2, 0.2};
  EXPECT_THROW(stratified_split({rec("a", 100.0)}, bad), std::invalid_argument);
  SplitSpec bad2;
  bad2.bin_edges = {100.0};
  EXPECT_THROW(stratified_split({rec("a", 100.0)}, bad2), std::invalid_argument);
}

TEST(Split, IdListRoundTripAndSelect) {
  fs::path dir = temp_dir("ids");
  std::vector<TuberRecord> recs = {rec("x", 20.0), rec("y", 100.0), rec("z", 400.0)};
  const std::string path = (dir / "train_ids.txt").string();
  write_id_list({recs[2], recs[0]}, path);
  std::vector<std::string> ids = read_id_list(path);
  ASSERT_EQ(ids.size(), 2u);
  EXPECT_EQ(ids[0], "z");
  EXPECT_EQ(ids[1], "x");

  std::vector<TuberRecord> sel = select_records(recs, ids);
  ASSERT_EQ(sel.size(), 2u);
  EXPECT_EQ(sel[0].tuber_id, "z");
  EXPECT_EQ(sel[1].weight_g, 20.0);
  EXPECT_THROW(select_records(recs, {"nope"}), DataError);
  EXPECT_THROW(select_records(recs, {"x", "x"}), DataError);
}

// a 9:1 imbalanced dataset must come out class-balanced under the weighted
// sampler: chi-square over the two classes at 10k draws, p > 0.01
TEST(Sampler, BalancesClassesChiSquare) {
  std::vector<double> grams;
  for (int i = 0; i < 900; ++i) grams.push_back(30.0);   // class 0
  for (int i = 0; i < 100; ++i) grams.push_back(430.0);  // class 8
  WeightedSampler s(grams);
  Rng rng(2024);
  const int draws = 10000;
  double c0 = 0, c1 = 0;
  for (int i = 0; i < draws; ++i) {
    std::size_t k = s.draw(rng);
    ASSERT_LT(k, grams.size());
    (grams[k] < 50.0 ? c0 : c1) += 1;
  }
  const double expected = draws / 2.0;
  const double chi2 = (c0 - expected) * (c0 - expected) / expected +
                      (c1 - expected) * (c1 - expected) / expected;
  EXPECT_LT(chi2, 6.635) << "c0=" << c0 << " c1=" << c1;  // df=1, p=0.01 critical
}

TEST(Sampler, UniformWithinClassAndSkipsEmpty) {
  // three occupied classes of very different sizes; all other classes empty
  std::vector<double> grams;
  for (int i = 0; i < 500; ++i) grams.push_back(25.0);
  for (int i = 0; i < 50; ++i) grams.push_back(125.0);
  for (int i = 0; i < 5; ++i) grams.push_back(475.0);
  WeightedSampler s(grams);
  Rng rng(7);
  std::vector<int> per_class(3, 0);
  std::vector<int> per_item(grams.size(), 0);
  const int draws = 30000;
  for (int i = 0; i < draws; ++i) {
    std::size_t k = s.draw(rng);
    per_item[k]++;
    per_class[k < 500 ? 0 : (k < 550 ? 1 : 2)]++;
  }
  const double expected = draws / 3.0;
  const double chi2 = [&] {
    double acc = 0;
    for (int c : per_class) acc += (c - expected) * (c - expected) / expected;
    return acc;
  }();
  EXPECT_LT(chi2, 9.21);  // df=2, p=0.01 critical
  // within the rare class each of the 5 items is hit roughly equally
  for (std::size_t i = 550; i < grams.size(); ++i)
    EXPECT_NEAR(per_item[i], expected / 5.0, 0.25 * expected / 5.0);
}

TEST(Sampler, DeterministicAndValidated) {
  std::vector<double> grams = {10, 20, 30, 200, 210, 480};
  WeightedSampler s(grams);
  Rng a(5), b(5);
  for (int i = 0; i < 200; ++i) EXPECT_EQ(s.draw(a), s.draw(b));
  EXPECT_THROW(WeightedSampler({}), std::invalid_argument);
  EXPECT_THROW(WeightedSampler({-3.0}), DataError);  // below the 0 g edge
}

}  // namespace
}  // namespace pointraft
