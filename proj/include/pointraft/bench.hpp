#pragma once

// Throughput benchmark over the full inference path: load, cluster filter,
// farthest-point sampling, height estimate, centering, forward pass.  Warmup
// repetitions are excluded from the statistics, predictions are checked to be
// identical across repetitions, and timing never includes report writing.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "pointraft/dataset.hpp"
#include "pointraft/metrics.hpp"
#include "pointraft/net.hpp"
#include "pointraft/train.hpp"

namespace pointraft {

// published single-cloud GPU latency for this pipeline, shown as a reference
// line next to our CPU numbers
constexpr double kReferenceGpuLatencyMs = 6.3;

struct StageMeansMs {
  double load = 0.0, filter = 0.0, fps = 0.0, height = 0.0, center = 0.0, forward = 0.0;
};

struct BenchResult {
  LatencyStats latency;  // single-threaded per-cloud wall times
  StageMeansMs stages;   // mean per-stage breakdown, same runs
  std::size_t n_clouds = 0;
  int repetitions = 0;
  bool predictions_identical = true;
  std::vector<double> per_cloud_ms;      // mean over timed repetitions, per cloud
  std::vector<double> predictions;       // from the final repetition
  double parallel_clouds_per_s = 0.0;    // 0 unless parallel mode was requested
  int parallel_workers = 0;
};

namespace detail {

inline double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
      .count();
}

}  // namespace detail

// benchmarks every cloud of every record; cfg supplies input_points and the
// cluster-filter settings so results match the training pipeline exactly
template <class S>
inline BenchResult benchmark_throughput(const Net<S>& net,
                                        const std::vector<TuberRecord>& records,
                                        const TrainConfig& cfg, int repetitions,
                                        int warmup = 1, int parallel_workers = 0) {
  if (records.empty()) throw std::invalid_argument("benchmark: no records");
  if (repetitions < 1) throw std::invalid_argument("benchmark: repetitions must be >= 1");
  std::vector<std::pair<const TuberRecord*, const std::string*>> jobs;
  for (const TuberRecord& r : records)
    for (const std::string& p : r.cloud_paths) jobs.emplace_back(&r, &p);

  BenchResult res;
  res.n_clouds = jobs.size();
  res.repetitions = repetitions;
  res.per_cloud_ms.assign(jobs.size(), 0.0);
  std::vector<double> prev_preds;

  for (int rep = 0; rep < warmup + repetitions; ++rep) {
    const bool timed = rep >= warmup;
    std::vector<double> preds(jobs.size());
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      PointCloud raw = load_cloud(*jobs[i].second);
      const double t_load = detail::ms_since(t0);

      const auto t1 = std::chrono::steady_clock::now();
      PointCloud kept = filter_clusters(raw, cfg.filter_eps, cfg.filter_min_pts);
      const double t_filter = detail::ms_since(t1);

      const auto t2 = std::chrono::steady_clock::now();
      PointCloud sampled = fps(kept, std::size_t(cfg.input_points));
      const double t_fps = detail::ms_since(t2);

      const auto t3 = std::chrono::steady_clock::now();
      const double h = estimate_height(sampled, jobs[i].first->camera_belt_distance_m);
      const double t_height = detail::ms_since(t3);

      const auto t4 = std::chrono::steady_clock::now();
      CenterResult centered = center(sampled);
      const double t_center = detail::ms_since(t4);

      const auto t5 = std::chrono::steady_clock::now();
      preds[i] = net.forward(centered.cloud, h, Mode::eval).prediction;
      const double t_forward = detail::ms_since(t5);

      if (timed) {
        res.per_cloud_ms[i] +=
            (t_load + t_filter + t_fps + t_height + t_center + t_forward) /
            double(repetitions);
        res.stages.load += t_load;
        res.stages.filter += t_filter;
        res.stages.fps += t_fps;
        res.stages.height += t_height;
        res.stages.center += t_center;
        res.stages.forward += t_forward;
      }
    }
    if (!prev_preds.empty() && preds != prev_preds) res.predictions_identical = false;
    prev_preds = std::move(preds);
  }
  res.predictions = std::move(prev_preds);

  const double denom = double(jobs.size()) * double(repetitions);
  res.stages.load /= denom;
  res.stages.filter /= denom;
  res.stages.fps /= denom;
  res.stages.height /= denom;
  res.stages.center /= denom;
  res.stages.forward /= denom;

  std::vector<double> sorted = res.per_cloud_ms;
  std::sort(sorted.begin(), sorted.end());
  double total = 0.0;
  for (double v : sorted) total += v;
  res.latency.mean_ms = total / double(sorted.size());
  const std::size_t n = sorted.size();
  res.latency.median_ms =
      n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  const std::size_t k95 = std::size_t(std::ceil(0.95 * double(n)));  // nearest rank
  res.latency.p95_ms = sorted[std::max<std::size_t>(k95, 1) - 1];
  res.latency.clouds_per_s = res.latency.mean_ms > 0 ? 1000.0 / res.latency.mean_ms : 0.0;

  if (parallel_workers > 1) {
    res.parallel_workers = parallel_workers;
    std::vector<double> ppreds(jobs.size());
    const auto t0 = std::chrono::steady_clock::now();
    parallel_for(jobs.size(), parallel_workers, [&](std::size_t i) {
      PointCloud raw = load_cloud(*jobs[i].second);
      PointCloud kept = filter_clusters(raw, cfg.filter_eps, cfg.filter_min_pts);
      PointCloud sampled = fps(kept, std::size_t(cfg.input_points));
      const double h = estimate_height(sampled, jobs[i].first->camera_belt_distance_m);
      ppreds[i] = net.forward(center(sampled).cloud, h, Mode::eval).prediction;
    });
    const double wall_ms = detail::ms_since(t0);
    if (ppreds != res.predictions) res.predictions_identical = false;
    res.parallel_clouds_per_s = wall_ms > 0 ? 1000.0 * double(jobs.size()) / wall_ms : 0.0;
  }
  return res;
}

inline LatencyStats latency_of(const BenchResult& b) { return b.latency; }

}  // namespace pointraft
