#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include "pointraft/checkpoint.hpp"
#include "pointraft/cloud.hpp"
#include "pointraft/common.hpp"
#include "pointraft/loss.hpp"
#include "pointraft/net.hpp"

using namespace pointraft;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  auto d = fs::temp_directory_path() / "pointraft_net_tests";
  fs::create_directories(d);
  return d;
}

// small full-architecture config for fast tests
NetConfig tiny_config() {
  NetConfig c;
  c.input_points = 16;
  c.sa1 = {0.5, 0.5, 8, {3, 8, 8, 12}};
  c.sa2 = {0.25, 1.0, 8, {15, 12, 12, 16}};
  c.global_mlp = {19, 16, 24, 32};
  c.height_dim = 6;
  c.head_hidden = {16, 8};
  return c;
}

PointCloud centered_cloud(Rng& rng, std::size_t n, double scale = 0.1) {
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i)
    c.pts.push_back({rng.uniform(-scale, scale), rng.uniform(-scale, scale),
                     rng.uniform(-scale, scale)});
  return center(c).cloud;
}

// selection-style reference: repeatedly extract the nearest unused in-radius
// source point, so it cannot share sorting code with the implementation
std::vector<std::vector<int>> ball_query_oracle(const std::vector<Vec3>& ctr,
                                                const std::vector<Vec3>& src,
                                                double radius, int cap) {
  std::vector<std::vector<int>> out(ctr.size());
  for (std::size_t i = 0; i < ctr.size(); ++i) {
    std::vector<bool> used(src.size(), false);
    for (int k = 0; k < cap; ++k) {
      int best = -1;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < src.size(); ++j) {
        if (used[j]) continue;
        const double d2 = squared_dist(ctr[i], src[j]);
        if (d2 <= radius * radius && d2 < bd) {
          bd = d2;
          best = int(j);
        }
      }
      if (best < 0) break;
      used[std::size_t(best)] = true;
      out[i].push_back(best);
    }
  }
  return out;
}

template <class S>
std::vector<S> flatten(ModelParams<S>& p) {
  std::vector<S> out;
  for (const auto& a : param_arrays(p, true))
    out.insert(out.end(), a.data, a.data + a.size());
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// ball query

TEST(BallQuery, MatchesExhaustiveOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 2 + rng.index(63);
    const std::size_t m = 1 + rng.index(16);
    std::vector<Vec3> src, ctr;
    for (std::size_t i = 0; i < n; ++i)
      src.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    for (std::size_t i = 0; i < m; ++i)
      ctr.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    const double radius = rng.uniform(0.1, 1.5);
    const int cap = 1 + int(rng.index(8));
    EXPECT_EQ(ball_query(ctr, src, radius, cap),
              ball_query_oracle(ctr, src, radius, cap));
  }
}

TEST(BallQuery, CentroidIncludesItselfFirst) {
  std::vector<Vec3> src{{0, 0, 0}, {0.05, 0, 0}, {1, 1, 1}};
  auto groups = ball_query({src[1]}, src, 0.2, 64);
  ASSERT_FALSE(groups[0].empty());
  EXPECT_EQ(groups[0][0], 1);  // self at distance zero comes first
}

TEST(BallQuery, FarCentroidGetsEmptyList) {
  std::vector<Vec3> src{{0, 0, 0}, {0.1, 0, 0}};
  auto groups = ball_query({Vec3{5, 5, 5}}, src, 0.2, 64);
  EXPECT_TRUE(groups[0].empty());
}

TEST(BallQuery, CapKeepsNearestAndWholeCloudWhenRadiusCovers) {
  // radius larger than the object: candidate set is the whole cloud
  Rng rng(3);
  std::vector<Vec3> src;
  for (int i = 0; i < 30; ++i)
    src.push_back({rng.uniform(-0.04, 0.04), rng.uniform(-0.04, 0.04),
                   rng.uniform(-0.02, 0.02)});
  auto all = ball_query({src[0]}, src, 0.2, 64);
  EXPECT_EQ(all[0].size(), src.size());

  auto capped = ball_query({src[0]}, src, 0.2, 5);
  ASSERT_EQ(capped[0].size(), 5u);
  // capped list must be the 5 nearest, i.e. a prefix of the full ordering
  for (int k = 0; k < 5; ++k) EXPECT_EQ(capped[0][k], all[0][k]);
}

// ---------------------------------------------------------------------------
// parameter init

TEST(NetInit, SameSeedIsBitwiseIdentical) {
  auto a = init_params<float>(42, tiny_config());
  auto b = init_params<float>(42, tiny_config());
  EXPECT_EQ(flatten(a), flatten(b));
}

TEST(NetInit, DifferentSeedsDiffer) {
  auto a = init_params<float>(1, tiny_config());
  auto b = init_params<float>(2, tiny_config());
  EXPECT_NE(flatten(a), flatten(b));
}

TEST(NetInit, WeightsFiniteAndInsideUnitBallBiasesZero) {
  auto p = init_params<double>(7, NetConfig{});
  detail::visit_stages(p, [](const char*, std::vector<LinearParams<double>>& ls) {
    for (const auto& l : ls) {
      for (Eigen::Index i = 0; i < l.W.size(); ++i) {
        ASSERT_TRUE(std::isfinite(l.W.data()[i]));
        ASSERT_LT(std::abs(l.W.data()[i]), 1.0);
      }
      ASSERT_TRUE((l.b.array() == 0).all());
    }
  });
}

TEST(NetInit, ConfigValidationRejectsBadShapes) {
  NetConfig c = tiny_config();
  c.sa2.mlp_widths[0] = 14;  // must be sa1 output + 3 = 15
  EXPECT_THROW(make_params<float>(c), std::invalid_argument);
  c = tiny_config();
  c.sa1.sample_ratio = 0.0;
  EXPECT_THROW(make_params<float>(c), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// forward

TEST(NetForward, TraceShapesAtPaperWidths) {
  Rng rng(5);
  auto cloud = centered_cloud(rng, 1024, 0.08);
  auto net = Net<float>::init(1, NetConfig{});
  auto t = net.forward(cloud, 0.05, Mode::eval);
  EXPECT_EQ(t.p1_points.size(), 512u);
  EXPECT_EQ(t.p1_features.rows(), 512);
  EXPECT_EQ(t.p1_features.cols(), 128);
  EXPECT_EQ(t.p2_points.size(), 128u);
  EXPECT_EQ(t.p2_features.rows(), 128);
  EXPECT_EQ(t.p2_features.cols(), 256);
  EXPECT_EQ(t.global_feature.size(), 1024);
  EXPECT_EQ(t.height_feature.size(), 32);
  EXPECT_TRUE(std::isfinite(t.prediction));
}

TEST(NetForward, GlobalFeatureIsElementwiseMaxOfPointFeatures) {
  Rng rng(6);
  auto cloud = centered_cloud(rng, 64, 0.08);
  auto net = Net<float>::init(2, tiny_config());
  auto t = net.forward(cloud, 0.03, Mode::eval);
  const auto& last = t.global.layers.back().out;
  for (Eigen::Index c = 0; c < last.cols(); ++c)
    EXPECT_EQ(t.global_feature(c), last.col(c).maxCoeff());
}

TEST(NetForward, HeadZeroedFinalBiasPassesThrough) {
  Rng rng(8);
  auto cloud = centered_cloud(rng, 32, 0.05);
  auto net = Net<float>::init(3, tiny_config());
  for (auto& l : net.params().head) {
    l.W.setZero();
    l.b.setZero();
  }
  net.params().head.back().b(0) = 42.5f;
  EXPECT_EQ(net.forward(cloud, 0.02, Mode::eval).prediction, 42.5);
  EXPECT_EQ(net.forward(centered_cloud(rng, 64, 0.02), 0.07, Mode::eval).prediction,
            42.5);
}

TEST(NetForward, EvalIsPermutationInvariant) {
  Rng rng(9);
  auto cloud = centered_cloud(rng, 200, 0.07);
  auto net = Net<float>::init(4, NetConfig{});
  const double base = net.forward(cloud, 0.04, Mode::eval).prediction;
  Rng shuffler(10);
  PointCloud perm = cloud;
  for (int i = 0; i < 25; ++i) {
    shuffler.shuffle(perm.pts);
    const double p = net.forward(perm, 0.04, Mode::eval).prediction;
    ASSERT_LE(std::abs(p - base), 1e-12);
  }
}

TEST(NetForward, TranslationAbsorbedByCenteringExactly) {
  // coordinates and offsets on a 2^-10 grid: centering arithmetic is exact,
  // so the centered clouds are bitwise equal and so are the predictions
  Rng rng(12);
  PointCloud raw;
  for (int i = 0; i < 16; ++i)
    raw.pts.push_back({double(int(rng.index(1024)) - 512) / 1024.0,
                       double(int(rng.index(1024)) - 512) / 1024.0,
                       double(int(rng.index(1024)) - 512) / 1024.0});
  PointCloud moved = raw;
  for (auto& p : moved.pts) {
    p.x += 0.25;
    p.y += -0.125;
    p.z += 0.5;
  }
  auto net = Net<float>::init(5, tiny_config());
  const double a = net.forward(center(raw).cloud, 0.05, Mode::eval).prediction;
  const double b = net.forward(center(moved).cloud, 0.05, Mode::eval).prediction;
  EXPECT_EQ(a, b);
}

TEST(NetForward, HeightChangesOnlyHeightBranch) {
  Rng rng(13);
  auto cloud = centered_cloud(rng, 48, 0.06);
  auto net = Net<float>::init(6, tiny_config());
  auto t1 = net.forward(cloud, 0.02, Mode::eval);
  auto t2 = net.forward(cloud, 0.09, Mode::eval);
  EXPECT_EQ(t1.p1_features, t2.p1_features);
  EXPECT_EQ(t1.p2_features, t2.p2_features);
  EXPECT_EQ(t1.global_feature, t2.global_feature);
  EXPECT_NE(t1.height_feature, t2.height_feature);
  EXPECT_NE(t1.prediction, t2.prediction);
}

TEST(NetForward, DropoutActiveOnlyInTrainMode) {
  Rng rng(14);
  auto cloud = centered_cloud(rng, 32, 0.05);
  auto net = Net<float>::init(7, tiny_config());
  Rng d1(100), d2(101);
  const double t1 = net.forward(cloud, 0.03, Mode::train, &d1).prediction;
  const double t2 = net.forward(cloud, 0.03, Mode::train, &d2).prediction;
  EXPECT_NE(t1, t2);  // different masks
  const double e1 = net.forward(cloud, 0.03, Mode::eval).prediction;
  const double e2 = net.forward(cloud, 0.03, Mode::eval).prediction;
  EXPECT_EQ(e1, e2);
}

TEST(NetForward, InputContractErrors) {
  Rng rng(15);
  auto net = Net<float>::init(8, tiny_config());
  auto ok = centered_cloud(rng, 16, 0.05);

  auto tiny = centered_cloud(rng, 7, 0.05);
  EXPECT_THROW(net.forward(tiny, 0.01, Mode::eval), DataError);

  EXPECT_THROW(net.forward(ok, 0.01, Mode::eval, nullptr, 32), DataError);
  EXPECT_NO_THROW(net.forward(ok, 0.01, Mode::eval, nullptr, 16));

  PointCloud off = ok;
  for (auto& p : off.pts) p.x += 0.01;  // centroid norm 0.01 > 1e-6
  EXPECT_THROW(net.forward(off, 0.01, Mode::eval), DataError);

  EXPECT_THROW(net.forward(ok, -0.5, Mode::eval), DataError);
}

// ---------------------------------------------------------------------------
// gradients (behavioural; numeric accuracy is covered by the fd checks)

TEST(NetGradients, ZeroLossBatchHasExactlyZeroGradients) {
  Rng rng(16);
  auto cloud = centered_cloud(rng, 16, 0.05);
  auto net = Net<double>::init(9, tiny_config());
  const double pred = net.forward(cloud, 0.02, Mode::eval).prediction;
  std::vector<TrainSample> batch{{cloud, 0.02, pred}};
  double mean_loss = 1.0;
  auto g = net.gradients(batch, make_loss(LossKind::smooth_l1), Mode::eval, 0,
                         &mean_loss);
  EXPECT_EQ(mean_loss, 0.0);
  for (const auto& a : grad_arrays(g))
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a.data[i], 0.0);
}

TEST(NetGradients, DuplicatingBatchLeavesMeanGradientUnchanged) {
  Rng rng(17);
  auto c1 = centered_cloud(rng, 16, 0.05);
  auto c2 = centered_cloud(rng, 24, 0.05);
  auto net = Net<double>::init(10, tiny_config());
  std::vector<TrainSample> once{{c1, 0.02, 150.0}, {c2, 0.04, 300.0}};
  std::vector<TrainSample> twice{once[0], once[1], once[0], once[1]};
  auto ga = net.gradients(once, make_loss(LossKind::smooth_l1), Mode::eval, 0);
  auto gb = net.gradients(twice, make_loss(LossKind::smooth_l1), Mode::eval, 0);
  auto ra = grad_arrays(ga);
  auto rb = grad_arrays(gb);
  ASSERT_EQ(ra.size(), rb.size());
  for (std::size_t k = 0; k < ra.size(); ++k)
    for (std::size_t i = 0; i < ra[k].size(); ++i) {
      const double denom = std::max({std::abs(ra[k].data[i]),
                                     std::abs(rb[k].data[i]), 1e-6});
      ASSERT_LE(std::abs(ra[k].data[i] - rb[k].data[i]) / denom, 1e-12)
          << ra[k].name << "[" << i << "]";
    }
}

TEST(NetGradients, NonFiniteLossIsNumericError) {
  Rng rng(18);
  auto cloud = centered_cloud(rng, 16, 0.05);
  auto net = Net<float>::init(11, tiny_config());
  std::vector<TrainSample> batch{{cloud, 0.02, 100.0}};
  LossFn bad = [](double, double) {
    return std::pair<double, double>{std::numeric_limits<double>::infinity(), 0.0};
  };
  EXPECT_THROW(net.gradients(batch, bad, Mode::eval, 0), NumericError);
}

TEST(NetGradients, GradArraysAlignWithTrainableParams) {
  auto p = init_params<float>(1, tiny_config());
  auto g = make_grads(p);
  auto pa = param_arrays(p, false);
  auto ga = grad_arrays(g);
  ASSERT_EQ(pa.size(), ga.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, ga[i].name);
    EXPECT_EQ(pa[i].dims, ga[i].dims);
  }
}

// ---------------------------------------------------------------------------
// losses

TEST(Loss, SmoothL1PinnedValues) {
  EXPECT_DOUBLE_EQ(smooth_l1(10, 0, 20).first, 2.5);
  EXPECT_DOUBLE_EQ(smooth_l1(20, 0, 20).first, 10.0);
  EXPECT_DOUBLE_EQ(smooth_l1(50, 0, 20).first, 40.0);
  EXPECT_DOUBLE_EQ(smooth_l1(-10, 0, 20).first, 2.5);
  EXPECT_DOUBLE_EQ(smooth_l1(0, 0, 20).first, 0.0);
}

TEST(Loss, SmoothL1DerivativeContinuousAtBeta) {
  const double beta = 20.0;
  for (double target : {0.0, 55.0}) {
    const double inside = smooth_l1(target + beta - 1e-9, target, beta).second;
    const double outside = smooth_l1(target + beta + 1e-9, target, beta).second;
    EXPECT_NEAR(inside, outside, 1e-6);
    const double nin = smooth_l1(target - beta + 1e-9, target, beta).second;
    const double nout = smooth_l1(target - beta - 1e-9, target, beta).second;
    EXPECT_NEAR(nin, nout, 1e-6);
  }
}

TEST(Loss, DerivativesMatchFiniteDifferences) {
  Rng rng(19);
  for (int i = 0; i < 200; ++i) {
    const double p = rng.uniform(-80, 80);
    const double t = rng.uniform(-80, 80);
    const double h = 1e-6;
    for (auto kind : {LossKind::smooth_l1, LossKind::mse, LossKind::l1}) {
      auto fn = make_loss(kind);
      if (kind != LossKind::mse && std::abs(std::abs(p - t) - 20.0) < 1e-3)
        continue;  // kink neighbourhoods
      if (std::abs(p - t) < 1e-3) continue;
      const double fd = (fn(p + h, t).first - fn(p - h, t).first) / (2 * h);
      EXPECT_NEAR(fn(p, t).second, fd, 1e-5);
    }
  }
}

TEST(Loss, ParseNamesRoundTrip) {
  EXPECT_EQ(parse_loss("smooth_l1"), LossKind::smooth_l1);
  EXPECT_EQ(parse_loss("mse"), LossKind::mse);
  EXPECT_EQ(parse_loss("l1"), LossKind::l1);
  EXPECT_THROW(parse_loss("huber"), std::invalid_argument);
  EXPECT_EQ(loss_name(LossKind::smooth_l1), "smooth_l1");
}

// ---------------------------------------------------------------------------
// checkpoints

TEST(CheckpointIo, RoundTripIsBitwiseAndPredictionsMatch) {
  Rng rng(20);
  auto cloud = centered_cloud(rng, 32, 0.05);
  NetConfig cfg = tiny_config();
  auto net = Net<float>::init(12, cfg);
  // make running stats non-trivial so buffers are exercised too
  for (auto& l : net.params().sa1) {
    if (!l.has_bn) continue;
    l.running_mean.setConstant(0.25f);
    l.running_var.setConstant(0.5f);
  }
  const double before = net.forward(cloud, 0.03, Mode::eval).prediction;

  auto path = (scratch_dir() / "round.ckpt").string();
  save_checkpoint(net.params(), cfg, path, {{"note", 1}});
  auto ck = load_checkpoint(path);
  EXPECT_TRUE(ck.config == cfg);
  EXPECT_EQ(ck.extra.at("note"), 1);
  EXPECT_EQ(flatten(ck.params), flatten(net.params()));

  Net<float> loaded(ck.config, ck.params);
  EXPECT_EQ(loaded.forward(cloud, 0.03, Mode::eval).prediction, before);
}

TEST(CheckpointIo, AblationConfigRoundTripsFieldByField) {
  NetConfig cfg;
  cfg.input_points = 512;
  cfg.height_dim = 8;
  cfg.dropout = 0.0;
  cfg.batch_norm = false;
  auto p = init_params<float>(3, cfg);
  auto path = (scratch_dir() / "ablate.ckpt").string();
  save_checkpoint(p, cfg, path);
  auto ck = load_checkpoint(path);
  EXPECT_EQ(ck.config.input_points, 512);
  EXPECT_EQ(ck.config.height_dim, 8);
  EXPECT_EQ(ck.config.dropout, 0.0);
  EXPECT_EQ(ck.config.batch_norm, false);
  EXPECT_TRUE(ck.config == cfg);
}

TEST(CheckpointIo, RejectsGarbageTruncationVersionAndShapeMismatch) {
  auto dir = scratch_dir();
  NetConfig cfg = tiny_config();
  auto p = init_params<float>(4, cfg);
  auto path = (dir / "victim.ckpt").string();
  save_checkpoint(p, cfg, path);

  {  // not a checkpoint
    auto bad = (dir / "bad.ckpt").string();
    std::ofstream(bad) << "definitely not binary";
    EXPECT_THROW(load_checkpoint(bad), DataError);
  }
  {  // truncated
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    auto trunc = (dir / "trunc.ckpt").string();
    std::ofstream(trunc, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    EXPECT_THROW(load_checkpoint(trunc), DataError);
  }
  {  // future version
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    bytes[4] = 99;
    auto vers = (dir / "vers.ckpt").string();
    std::ofstream(vers, std::ios::binary) << bytes;
    EXPECT_THROW(load_checkpoint(vers), DataError);
  }
  {  // declared shapes disagree with stored arrays (same-length json patch)
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    const std::string needle = "\"head_hidden\":[16,8]";
    auto pos = bytes.find(needle);
    ASSERT_NE(pos, std::string::npos);
    bytes[pos + needle.size() - 5] = '3';  // 16 -> 13
    auto shp = (dir / "shape.ckpt").string();
    std::ofstream(shp, std::ios::binary) << bytes;
    EXPECT_THROW(load_checkpoint(shp), DataError);
  }
}
