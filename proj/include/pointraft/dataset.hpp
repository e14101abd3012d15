#pragma once

// Tuber records, manifest CSV io, stratified splitting and train-time
// samplers.  A record is one physical tuber; its clouds are separate files
// listed in the manifest one row per cloud.  Splits operate on tubers, never
// on individual clouds, so no tuber leaks across train/val/test.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pointraft/common.hpp"

namespace pointraft {

struct TuberRecord {
  std::string tuber_id;
  double weight_g = 0.0;
  std::string cultivar;
  int season = 0;
  double camera_belt_distance_m = 0.0;
  std::vector<std::string> cloud_paths;
};

inline void validate_record(const TuberRecord& r) {
  if (r.tuber_id.empty()) throw DataError("record with empty tuber_id");
  if (!(r.weight_g > 0.0) || !std::isfinite(r.weight_g))
    throw DataError("tuber '" + r.tuber_id + "': weight_g must be positive, got " +
                    std::to_string(r.weight_g));
  if (!(r.camera_belt_distance_m > 0.0) || !std::isfinite(r.camera_belt_distance_m))
    throw DataError("tuber '" + r.tuber_id + "': camera_belt_distance_m must be positive");
  if (r.cloud_paths.empty())
    throw DataError("tuber '" + r.tuber_id + "': no cloud paths");
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

// Manifest CSV: header tuber_id,weight_g,cultivar,season,camera_belt_distance_m,cloud_path
// with one row per point cloud.  Rows of the same tuber must agree on all
// per-tuber fields.  Relative cloud paths resolve against the manifest's
// directory.  Returns tubers in order of first appearance.
inline std::vector<TuberRecord> load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest: " + path);
  const std::filesystem::path base = std::filesystem::path(path).parent_path();

  std::string line;
  if (!std::getline(f, line)) throw DataError("empty manifest: " + path);
  const std::vector<std::string> header = detail::split_csv_line(line);
  const std::vector<std::string> expect = {"tuber_id", "weight_g", "cultivar",
                                           "season", "camera_belt_distance_m", "cloud_path"};
  if (header != expect)
    throw DataError("manifest '" + path +
                    "': bad header, expected tuber_id,weight_g,cultivar,season,"
                    "camera_belt_distance_m,cloud_path");

  std::vector<TuberRecord> records;
  std::map<std::string, std::size_t> slot;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const std::vector<std::string> cols = detail::split_csv_line(line);
    if (cols.size() != 6)
      throw DataError("manifest '" + path + "' line " + std::to_string(lineno) +
                      ": expected 6 columns, got " + std::to_string(cols.size()));
    TuberRecord row;
    row.tuber_id = cols[0];
    try {
      row.weight_g = std::stod(cols[1]);
      row.season = std::stoi(cols[3]);
      row.camera_belt_distance_m = std::stod(cols[4]);
    } catch (const std::exception&) {
      throw DataError("manifest '" + path + "' line " + std::to_string(lineno) +
                      ": unparsable numeric field");
    }
    row.cultivar = cols[2];
    std::filesystem::path cp(cols[5]);
    if (cp.empty())
      throw DataError("manifest '" + path + "' line " + std::to_string(lineno) +
                      ": empty cloud_path");
    if (cp.is_relative()) cp = base / cp;
    row.cloud_paths = {cp.string()};

    auto it = slot.find(row.tuber_id);
    if (it == slot.end()) {
      slot.emplace(row.tuber_id, records.size());
      records.push_back(row);
    } else {
      TuberRecord& rec = records[it->second];
      if (rec.weight_g != row.weight_g || rec.cultivar != row.cultivar ||
          rec.season != row.season ||
          rec.camera_belt_distance_m != row.camera_belt_distance_m)
        throw DataError("manifest '" + path + "' line " + std::to_string(lineno) +
                        ": tuber '" + row.tuber_id + "' has inconsistent metadata");
      rec.cloud_paths.push_back(row.cloud_paths.front());
    }
  }
  if (records.empty()) throw DataError("manifest has no data rows: " + path);
  for (const TuberRecord& r : records) validate_record(r);
  return records;
}

inline void save_manifest(const std::vector<TuberRecord>& records, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write manifest: " + path);
  f << "tuber_id,weight_g,cultivar,season,camera_belt_distance_m,cloud_path\n";
  char buf[64];
  for (const TuberRecord& r : records) {
    validate_record(r);
    for (const std::string& cp : r.cloud_paths) {
      std::snprintf(buf, sizeof buf, "%.10g", r.weight_g);
      f << r.tuber_id << ',' << buf << ',' << r.cultivar << ',' << r.season << ',';
      std::snprintf(buf, sizeof buf, "%.10g", r.camera_belt_distance_m);
      f << buf << ',' << cp << '\n';
    }
  }
  if (!f.good()) throw DataError("failed writing manifest: " + path);
}

// ---------------------------------------------------------------------------
// Stratified split.

struct SplitSpec {
  // weight bins used as strata; bin i is [edges[i], edges[i+1])
  std::vector<double> bin_edges = {16, 51, 74, 98, 121, 150, 185, 224, 262, 325, 625};
  std::array<double, 3> fractions = {0.6, 0.2, 0.2};  // train, val, test
  std::uint64_t seed = 0;
};

struct SplitResult {
  std::vector<TuberRecord> train, val, test;
  std::vector<std::string> warnings;
};

namespace detail {

// index of the bin containing w, bins are left-inclusive
inline std::size_t bin_of(double w, const std::vector<double>& edges) {
  if (!(w >= edges.front()) || !(w < edges.back()))
    throw DataError("weight " + std::to_string(w) + " g outside bin range [" +
                    std::to_string(edges.front()) + ", " + std::to_string(edges.back()) + ")");
  const auto it = std::upper_bound(edges.begin(), edges.end(), w);
  return std::size_t(it - edges.begin()) - 1;
}

// largest-remainder apportionment of `total` seats over quotas[i] = share[i],
// ties broken by ascending index; caps[i] bounds each entry when nonempty
inline std::vector<std::size_t> largest_remainder(const std::vector<double>& share,
                                                  std::size_t total,
                                                  const std::vector<std::size_t>& caps) {
  const std::size_t n = share.size();
  std::vector<std::size_t> out(n);
  std::vector<double> frac(n);
  std::size_t given = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double q = std::max(0.0, share[i]);
    std::size_t fl = std::size_t(std::floor(q));
    if (!caps.empty()) fl = std::min(fl, caps[i]);
    out[i] = fl;
    frac[i] = q - std::floor(q);
    given += fl;
  }
  if (given > total) throw std::logic_error("apportionment overflow");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  std::size_t left = total - given;
  while (left > 0) {
    bool progressed = false;
    for (std::size_t k = 0; k < n && left > 0; ++k) {
      const std::size_t i = order[k];
      if (!caps.empty() && out[i] >= caps[i]) continue;
      ++out[i];
      --left;
      progressed = true;
    }
    if (!progressed) throw std::logic_error("apportionment has no capacity left");
  }
  return out;
}

}  // namespace detail

// Stratified three-way split on tubers.  Global split sizes are fixed first by
// largest remainder over fractions * N (ties favouring train, then val), then
// train and val counts are apportioned across weight bins by largest
// remainder, pinned to the global totals; test takes each bin's remainder.
// With the 859-tuber occupancy (83..88 per bin) and fractions 60/20/20 this
// yields exactly 515/172/172.  Within a bin, membership is decided by a
// seeded shuffle.
inline SplitResult stratified_split(const std::vector<TuberRecord>& records,
                                    const SplitSpec& spec) {
  if (records.empty()) throw DataError("cannot split an empty record set");
  if (spec.bin_edges.size() < 2 ||
      !std::is_sorted(spec.bin_edges.begin(), spec.bin_edges.end()) ||
      std::adjacent_find(spec.bin_edges.begin(), spec.bin_edges.end()) != spec.bin_edges.end())
    throw std::invalid_argument("bin_edges must be strictly increasing, >= 2 entries");
  double fsum = 0.0;
  for (double fr : spec.fractions) {
    if (fr < 0.0) throw std::invalid_argument("split fractions must be nonnegative");
    fsum += fr;
  }
  if (std::abs(fsum - 1.0) > 1e-9)
    throw std::invalid_argument("split fractions must sum to 1");

  std::set<std::string> ids;
  for (const TuberRecord& r : records)
    if (!ids.insert(r.tuber_id).second)
      throw DataError("duplicate tuber_id in split input: " + r.tuber_id);

  const std::size_t nbins = spec.bin_edges.size() - 1;
  const std::size_t n = records.size();

  // stage 1: global totals, ties broken in train, val, test order
  std::vector<std::size_t> totals =
      detail::largest_remainder({spec.fractions[0] * double(n), spec.fractions[1] * double(n),
                                 spec.fractions[2] * double(n)},
                                n, {});

  // bin membership, shuffled per bin on a derived stream
  std::vector<std::vector<std::size_t>> bins(nbins);
  for (std::size_t i = 0; i < n; ++i)
    bins[detail::bin_of(records[i].weight_g, spec.bin_edges)].push_back(i);
  Rng root(spec.seed);
  for (std::size_t b = 0; b < nbins; ++b) {
    Rng r = root.child(0x7370006c6974ULL, b);  // per-bin shuffle stream
    r.shuffle(bins[b]);
  }

  std::vector<double> share_train(nbins), share_val(nbins);
  std::vector<std::size_t> cap_train(nbins);
  for (std::size_t b = 0; b < nbins; ++b) {
    share_train[b] = spec.fractions[0] * double(bins[b].size());
    cap_train[b] = bins[b].size();
  }
  // stage 2: per-bin train counts pinned to the global train total
  std::vector<std::size_t> tr = detail::largest_remainder(share_train, totals[0], cap_train);
  std::vector<std::size_t> cap_val(nbins);
  for (std::size_t b = 0; b < nbins; ++b) {
    share_val[b] = spec.fractions[1] * double(bins[b].size());
    cap_val[b] = bins[b].size() - tr[b];
  }
  std::vector<std::size_t> va = detail::largest_remainder(share_val, totals[1], cap_val);

  SplitResult res;
  for (std::size_t b = 0; b < nbins; ++b) {
    for (std::size_t k = 0; k < bins[b].size(); ++k) {
      const TuberRecord& rec = records[bins[b][k]];
      if (k < tr[b])
        res.train.push_back(rec);
      else if (k < tr[b] + va[b])
        res.val.push_back(rec);
      else
        res.test.push_back(rec);
    }
  }
  if (res.train.empty()) res.warnings.push_back("train split is empty");
  if (res.val.empty()) res.warnings.push_back("val split is empty");
  if (res.test.empty()) res.warnings.push_back("test split is empty");
  if (n == 1)
    res.warnings.push_back("single tuber: assigned to train, val/test empty");
  return res;
}

// ---------------------------------------------------------------------------
// Split persistence: one tuber_id per line.  Splits never copy cloud data.

inline void write_id_list(const std::vector<TuberRecord>& records, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write id list: " + path);
  for (const TuberRecord& r : records) f << r.tuber_id << '\n';
  if (!f.good()) throw DataError("failed writing id list: " + path);
}

inline std::vector<std::string> read_id_list(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open id list: " + path);
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

// records for the given ids, in id-list order; unknown ids are data errors
inline std::vector<TuberRecord> select_records(const std::vector<TuberRecord>& records,
                                               const std::vector<std::string>& ids) {
  std::map<std::string, const TuberRecord*> by_id;
  for (const TuberRecord& r : records) by_id.emplace(r.tuber_id, &r);
  std::vector<TuberRecord> out;
  out.reserve(ids.size());
  std::set<std::string> seen;
  for (const std::string& id : ids) {
    if (!seen.insert(id).second) throw DataError("duplicate id in id list: " + id);
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("id not present in manifest: " + id);
    out.push_back(*it->second);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Imbalance-correcting sampler.  Weights are discretized into coarse classes
// (50 g steps, last class open-ended) and each item is drawn with probability
// proportional to the inverse of its class count, with replacement.

inline const std::vector<double>& sampler_class_edges() {
  static const std::vector<double> edges = {0,   50,  100, 150, 200, 250,
                                            300, 350, 400, 450,
                                            std::numeric_limits<double>::infinity()};
  return edges;
}

class WeightedSampler {
 public:
  WeightedSampler(const std::vector<double>& weights_g, const std::vector<double>& edges) {
    if (weights_g.empty()) throw std::invalid_argument("sampler needs at least one item");
    std::vector<std::size_t> cls(weights_g.size());
    std::vector<std::size_t> count(edges.size() - 1, 0);
    for (std::size_t i = 0; i < weights_g.size(); ++i) {
      cls[i] = detail::bin_of(weights_g[i], edges);
      ++count[cls[i]];
    }
    // p(item) proportional to 1 / count(class); empty classes never referenced
    double total = 0.0;
    std::vector<double> p(weights_g.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = 1.0 / double(count[cls[i]]);
      total += p[i];
    }
    cdf_.resize(p.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      acc += p[i] / total;
      cdf_[i] = acc;
    }
    cdf_.back() = 1.0;  // guard against rounding shortfall
  }

  explicit WeightedSampler(const std::vector<double>& weights_g)
      : WeightedSampler(weights_g, sampler_class_edges()) {}

  std::size_t draw(Rng& rng) const {
    const double u = rng.uniform01();
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    return std::min(std::size_t(it - cdf_.begin()), cdf_.size() - 1);
  }

  const std::vector<double>& cdf() const { return cdf_; }

 private:
  std::vector<double> cdf_;
};

}  // namespace pointraft
