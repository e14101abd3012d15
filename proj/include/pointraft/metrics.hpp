#pragma once

// Error metrics, cumulative error curves and grouped evaluation reports.
// All accumulation happens in sorted order, so every number here is invariant
// to the order samples arrive in.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "pointraft/common.hpp"

namespace pointraft {

struct Metrics {
  double mae = 0.0;   // grams
  double rmse = 0.0;  // grams
  double r2 = std::numeric_limits<double>::quiet_NaN();
  double bias = 0.0;  // grams, mean(pred - gt)
  bool r2_defined = false;  // false when the targets have zero variance
  std::size_t n = 0;
};

inline Metrics compute_metrics(const std::vector<double>& preds,
                               const std::vector<double>& gts) {
  if (preds.empty()) throw std::invalid_argument("compute_metrics: empty input");
  if (preds.size() != gts.size())
    throw std::invalid_argument("compute_metrics: size mismatch");
  const std::size_t n = preds.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (gts[a] != gts[b]) return gts[a] < gts[b];
    return preds[a] < preds[b];
  });

  double abs_sum = 0.0, sq_sum = 0.0, err_sum = 0.0, gt_sum = 0.0;
  for (std::size_t k : order) {
    const double e = preds[k] - gts[k];
    if (!std::isfinite(e)) throw NumericError("compute_metrics: non-finite value");
    abs_sum += std::abs(e);
    sq_sum += e * e;
    err_sum += e;
    gt_sum += gts[k];
  }
  Metrics m;
  m.n = n;
  m.mae = abs_sum / double(n);
  m.rmse = std::sqrt(sq_sum / double(n));
  m.bias = err_sum / double(n);
  const double gt_mean = gt_sum / double(n);
  double ss_tot = 0.0;
  for (std::size_t k : order) {
    const double d = gts[k] - gt_mean;
    ss_tot += d * d;
  }
  if (ss_tot > 0.0) {
    m.r2 = 1.0 - sq_sum / ss_tot;
    m.r2_defined = true;
  }
  return m;
}

// fraction of absolute errors within each threshold (inclusive)
inline std::vector<double> cumulative_ratios(const std::vector<double>& abs_errors,
                                             const std::vector<double>& thresholds =
                                                 {10, 20, 30, 40, 50}) {
  if (abs_errors.empty()) throw std::invalid_argument("cumulative_ratios: empty input");
  std::vector<double> out;
  out.reserve(thresholds.size());
  for (double t : thresholds) {
    std::size_t within = 0;
    for (double e : abs_errors)
      if (e <= t) ++within;
    out.push_back(double(within) / double(abs_errors.size()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// grouped reports

// one scored cloud with the metadata the report groups by
struct EvalItem {
  double pred = 0.0;
  double gt = 0.0;
  std::string tuber_id;
  std::string cultivar;
  int season = 0;
  double elongation = 0.0;
  std::string path;
};

// joins predictions with any sample type exposing the needed fields
template <class Sample>
inline std::vector<EvalItem> make_eval_items(const std::vector<Sample>& samples,
                                             const std::vector<double>& preds) {
  if (samples.size() != preds.size())
    throw std::invalid_argument("make_eval_items: prediction count mismatch");
  std::vector<EvalItem> out(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out[i].pred = preds[i];
    out[i].gt = samples[i].target;
    out[i].tuber_id = samples[i].tuber_id;
    out[i].cultivar = samples[i].cultivar;
    out[i].season = samples[i].season;
    out[i].elongation = samples[i].elongation;
    out[i].path = samples[i].path;
  }
  return out;
}

struct GroupReport {
  std::string key;
  Metrics metrics;
  double mean_elongation = 0.0;
  std::size_t n_clouds = 0, n_tubers = 0;
};

struct LatencyStats {
  double mean_ms = 0.0, median_ms = 0.0, p95_ms = 0.0;
  double clouds_per_s = 0.0;
};

struct EvalReport {
  Metrics per_cloud;  // each view is one sample
  Metrics per_tuber;  // supplementary: predictions averaged over views first
  std::size_t n_clouds = 0, n_tubers = 0;
  std::vector<double> thresholds = {10, 20, 30, 40, 50};
  std::vector<double> cumulative;  // fraction within each threshold
  std::vector<GroupReport> by_cultivar, by_season;
  bool has_latency = false;
  LatencyStats latency;
};

namespace detail {

template <class KeyFn>
inline std::vector<GroupReport> group_by(const std::vector<EvalItem>& items, KeyFn&& key) {
  std::vector<std::string> keys;
  std::map<std::string, std::vector<const EvalItem*>> groups;
  for (const EvalItem& it : items) {
    const std::string k = key(it);
    auto [pos, fresh] = groups.emplace(k, std::vector<const EvalItem*>{});
    if (fresh) keys.push_back(k);
    pos->second.push_back(&it);
  }
  std::vector<GroupReport> out;
  for (const std::string& k : keys) {
    const auto& members = groups[k];
    GroupReport g;
    g.key = k;
    std::vector<double> p, t;
    std::vector<std::string> ids;
    std::vector<double> elo;
    for (const EvalItem* it : members) {
      p.push_back(it->pred);
      t.push_back(it->gt);
      ids.push_back(it->tuber_id);
      elo.push_back(it->elongation);
    }
    g.metrics = compute_metrics(p, t);
    g.n_clouds = members.size();
    std::sort(ids.begin(), ids.end());
    g.n_tubers = std::size_t(std::unique(ids.begin(), ids.end()) - ids.begin());
    std::sort(elo.begin(), elo.end());
    g.mean_elongation = std::accumulate(elo.begin(), elo.end(), 0.0) / double(elo.size());
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace detail

inline EvalReport grouped_report(const std::vector<EvalItem>& items) {
  if (items.empty()) throw std::invalid_argument("grouped_report: no items");
  EvalReport rep;
  std::vector<double> p, t, abs_err;
  for (const EvalItem& it : items) {
    p.push_back(it.pred);
    t.push_back(it.gt);
    abs_err.push_back(std::abs(it.pred - it.gt));
  }
  rep.per_cloud = compute_metrics(p, t);
  rep.n_clouds = items.size();
  rep.cumulative = cumulative_ratios(abs_err, rep.thresholds);

  // per-tuber: mean prediction over the tuber's views against its weight
  std::map<std::string, std::pair<std::vector<double>, double>> tubers;
  std::vector<std::string> tuber_order;
  for (const EvalItem& it : items) {
    auto [pos, fresh] = tubers.emplace(it.tuber_id,
                                       std::pair<std::vector<double>, double>{{}, it.gt});
    if (fresh) tuber_order.push_back(it.tuber_id);
    pos->second.first.push_back(it.pred);
  }
  std::vector<double> tp, tt;
  for (const std::string& id : tuber_order) {
    auto& [preds_of, gt] = tubers[id];
    std::sort(preds_of.begin(), preds_of.end());
    tp.push_back(std::accumulate(preds_of.begin(), preds_of.end(), 0.0) /
                 double(preds_of.size()));
    tt.push_back(gt);
  }
  rep.per_tuber = compute_metrics(tp, tt);
  rep.n_tubers = tuber_order.size();

  rep.by_cultivar = detail::group_by(items, [](const EvalItem& it) { return it.cultivar; });
  rep.by_season =
      detail::group_by(items, [](const EvalItem& it) { return std::to_string(it.season); });
  return rep;
}

// ---------------------------------------------------------------------------
// serialization

inline void to_json(nlohmann::json& j, const Metrics& m) {
  j = nlohmann::json{{"mae_g", m.mae},
                     {"rmse_g", m.rmse},
                     {"bias_g", m.bias},
                     {"n", m.n}};
  if (m.r2_defined)
    j["r2"] = m.r2;
  else
    j["r2"] = nullptr;  // undefined: zero-variance targets
}

inline void to_json(nlohmann::json& j, const GroupReport& g) {
  j = nlohmann::json{{"key", g.key},
                     {"metrics", g.metrics},
                     {"mean_elongation", g.mean_elongation},
                     {"n_clouds", g.n_clouds},
                     {"n_tubers", g.n_tubers}};
}

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"per_cloud", r.per_cloud},
                     {"per_tuber", r.per_tuber},
                     {"n_clouds", r.n_clouds},
                     {"n_tubers", r.n_tubers},
                     {"thresholds_g", r.thresholds},
                     {"cumulative_ratios", r.cumulative},
                     {"by_cultivar", r.by_cultivar},
                     {"by_season", r.by_season}};
  if (r.has_latency)
    j["latency"] = nlohmann::json{{"mean_ms", r.latency.mean_ms},
                                  {"median_ms", r.latency.median_ms},
                                  {"p95_ms", r.latency.p95_ms},
                                  {"clouds_per_s", r.latency.clouds_per_s}};
}

namespace detail {

inline std::string csv_num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace detail

// one row per scope (overall, per-tuber, each cultivar, each season)
inline std::string report_to_csv(const EvalReport& r) {
  std::string s = "scope,key,n_clouds,n_tubers,mae_g,rmse_g,r2,bias_g,mean_elongation\n";
  auto row = [&](const std::string& scope, const std::string& key, const Metrics& m,
                 std::size_t nc, std::size_t nt, double elo, bool has_elo) {
    s += scope + "," + key + "," + std::to_string(nc) + "," + std::to_string(nt) + "," +
         detail::csv_num(m.mae) + "," + detail::csv_num(m.rmse) + "," +
         (m.r2_defined ? detail::csv_num(m.r2) : std::string("nan")) + "," +
         detail::csv_num(m.bias) + "," + (has_elo ? detail::csv_num(elo) : std::string()) +
         "\n";
  };
  row("overall", "", r.per_cloud, r.n_clouds, r.n_tubers, 0, false);
  row("per_tuber", "", r.per_tuber, r.n_clouds, r.n_tubers, 0, false);
  for (const GroupReport& g : r.by_cultivar)
    row("cultivar", g.key, g.metrics, g.n_clouds, g.n_tubers, g.mean_elongation, true);
  for (const GroupReport& g : r.by_season)
    row("season", g.key, g.metrics, g.n_clouds, g.n_tubers, g.mean_elongation, true);
  return s;
}

inline std::string curve_to_csv(const EvalReport& r) {
  std::string s = "threshold_g,fraction_within\n";
  for (std::size_t i = 0; i < r.thresholds.size(); ++i)
    s += detail::csv_num(r.thresholds[i]) + "," + detail::csv_num(r.cumulative[i]) + "\n";
  return s;
}

inline std::string scatter_to_csv(const std::vector<EvalItem>& items) {
  std::string s = "path,tuber_id,cultivar,season,gt_g,pred_g,abs_error_g\n";
  for (const EvalItem& it : items)
    s += it.path + "," + it.tuber_id + "," + it.cultivar + "," + std::to_string(it.season) +
         "," + detail::csv_num(it.gt) + "," + detail::csv_num(it.pred) + "," +
         detail::csv_num(std::abs(it.pred - it.gt)) + "\n";
  return s;
}

inline void write_text_file(const std::string& path, const std::string& body) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write: " + path);
  f << body;
  if (!f.good()) throw DataError("failed writing: " + path);
}

}  // namespace pointraft
