#pragma once

// PointRAFT network: two set-abstraction levels, a global max-pooled shape
// descriptor, an object-height embedding, and a scalar regression head.
//
// The net is templated on the compute scalar: float for training/inference,
// double for finite-difference gradient checks. Point geometry (FPS, ball
// query, relative offsets) is always computed in double on the input cloud, so
// sampling decisions are identical across scalar types and invariant to input
// point order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pointraft/cloud.hpp"
#include "pointraft/common.hpp"

namespace pointraft {

template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

enum class Mode { train, eval };

// ---------------------------------------------------------------------------
// configuration

struct SALevelConfig {
  double sample_ratio = 0.5;   // fraction of input points kept as centroids
  double radius = 0.2;         // grouping radius, meters
  int max_neighbors = 64;      // per-group cap, nearest-first
  std::vector<int> mlp_widths; // widths[0] = input feature dim + 3

  bool operator==(const SALevelConfig&) const = default;
};

struct NetConfig {
  int input_points = 1024;     // enforced only when forward() is given it
  SALevelConfig sa1{0.5, 0.2, 64, {3, 64, 64, 128}};
  SALevelConfig sa2{0.25, 0.4, 64, {131, 128, 128, 256}};
  std::vector<int> global_mlp{259, 256, 512, 1024};
  int height_dim = 32;              // 0 disables the height branch
  std::vector<int> head_hidden{512, 256};
  bool batch_norm = true;           // normalization in the three shared MLPs
  double dropout = 0.5;             // after each hidden head layer, train only
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  std::vector<int> height_widths() const {
    return height_dim > 0 ? std::vector<int>{1, height_dim, height_dim}
                          : std::vector<int>{};
  }
  std::vector<int> head_widths() const {
    std::vector<int> w{global_mlp.back() + height_dim};
    w.insert(w.end(), head_hidden.begin(), head_hidden.end());
    w.push_back(1);
    return w;
  }

  bool operator==(const NetConfig&) const = default;
};

inline void validate(const SALevelConfig& c, const std::string& tag, int feat_in) {
  if (!(c.sample_ratio > 0.0 && c.sample_ratio <= 1.0))
    throw std::invalid_argument(tag + ": sample_ratio must be in (0, 1]");
  if (!(c.radius > 0.0)) throw std::invalid_argument(tag + ": radius must be > 0");
  if (c.max_neighbors < 1)
    throw std::invalid_argument(tag + ": max_neighbors must be >= 1");
  if (c.mlp_widths.size() < 2)
    throw std::invalid_argument(tag + ": mlp needs at least one layer");
  for (int w : c.mlp_widths)
    if (w < 1) throw std::invalid_argument(tag + ": mlp widths must be >= 1");
  if (c.mlp_widths.front() != feat_in + 3)
    throw std::invalid_argument(tag + ": mlp input width must be feature dim + 3");
}

inline void validate(const NetConfig& c) {
  if (c.input_points < 8)
    throw std::invalid_argument("net: input_points must be >= 8");
  validate(c.sa1, "sa1", 0);
  validate(c.sa2, "sa2", c.sa1.mlp_widths.back());
  if (c.global_mlp.size() < 2 || c.global_mlp.front() != c.sa2.mlp_widths.back() + 3)
    throw std::invalid_argument("net: global mlp input width must be sa2 output + 3");
  for (int w : c.global_mlp)
    if (w < 1) throw std::invalid_argument("net: global mlp widths must be >= 1");
  if (c.height_dim < 0) throw std::invalid_argument("net: height_dim must be >= 0");
  for (int w : c.head_hidden)
    if (w < 1) throw std::invalid_argument("net: head widths must be >= 1");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0))
    throw std::invalid_argument("net: dropout must be in [0, 1)");
  if (!(c.bn_eps > 0.0)) throw std::invalid_argument("net: bn_eps must be > 0");
  if (!(c.bn_momentum > 0.0 && c.bn_momentum <= 1.0))
    throw std::invalid_argument("net: bn_momentum must be in (0, 1]");
}

inline void to_json(nlohmann::json& j, const SALevelConfig& c) {
  j = {{"sample_ratio", c.sample_ratio},
       {"radius_m", c.radius},
       {"max_neighbors", c.max_neighbors},
       {"mlp", c.mlp_widths}};
}

inline void from_json(const nlohmann::json& j, SALevelConfig& c) {
  j.at("sample_ratio").get_to(c.sample_ratio);
  j.at("radius_m").get_to(c.radius);
  j.at("max_neighbors").get_to(c.max_neighbors);
  j.at("mlp").get_to(c.mlp_widths);
}

inline void to_json(nlohmann::json& j, const NetConfig& c) {
  j = {{"input_points", c.input_points},
       {"sa1", c.sa1},
       {"sa2", c.sa2},
       {"global_mlp", c.global_mlp},
       {"height_dim", c.height_dim},
       {"head_hidden", c.head_hidden},
       {"batch_norm", c.batch_norm},
       {"dropout", c.dropout},
       {"bn_eps", c.bn_eps},
       {"bn_momentum", c.bn_momentum}};
}

inline void from_json(const nlohmann::json& j, NetConfig& c) {
  j.at("input_points").get_to(c.input_points);
  j.at("sa1").get_to(c.sa1);
  j.at("sa2").get_to(c.sa2);
  j.at("global_mlp").get_to(c.global_mlp);
  j.at("height_dim").get_to(c.height_dim);
  j.at("head_hidden").get_to(c.head_hidden);
  j.at("batch_norm").get_to(c.batch_norm);
  j.at("dropout").get_to(c.dropout);
  j.at("bn_eps").get_to(c.bn_eps);
  j.at("bn_momentum").get_to(c.bn_momentum);
}

// ---------------------------------------------------------------------------
// parameters

template <class S>
struct LinearParams {
  MatX<S> W;  // out x in
  VecX<S> b;
  bool has_bn = false;
  VecX<S> gamma, beta;               // trainable affine
  VecX<S> running_mean, running_var; // buffers, updated outside forward
};

template <class S>
struct LinearGrads {
  MatX<S> W;
  VecX<S> b, gamma, beta;
};

template <class S>
struct ModelParams {
  std::vector<LinearParams<S>> sa1, sa2, global, height, head;
};

template <class S>
struct ModelGrads {
  std::vector<LinearGrads<S>> sa1, sa2, global, height, head;
};

namespace detail {

// stage order is the canonical parameter order everywhere: init draws,
// optimizer state, checkpoint layout.
template <class Model, class Fn>
void visit_stages(Model& m, Fn&& fn) {
  fn("sa1", m.sa1);
  fn("sa2", m.sa2);
  fn("global", m.global);
  fn("height", m.height);
  fn("head", m.head);
}

}  // namespace detail

template <class S>
ModelParams<S> make_params(const NetConfig& c) {
  validate(c);
  ModelParams<S> p;
  auto build = [&](const std::vector<int>& widths, bool bn,
                   std::vector<LinearParams<S>>& out) {
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      LinearParams<S> lp;
      lp.W = MatX<S>::Zero(widths[l + 1], widths[l]);
      lp.b = VecX<S>::Zero(widths[l + 1]);
      lp.has_bn = bn;
      if (bn) {
        lp.gamma = VecX<S>::Ones(widths[l + 1]);
        lp.beta = VecX<S>::Zero(widths[l + 1]);
        lp.running_mean = VecX<S>::Zero(widths[l + 1]);
        lp.running_var = VecX<S>::Ones(widths[l + 1]);
      }
      out.push_back(std::move(lp));
    }
  };
  build(c.sa1.mlp_widths, c.batch_norm, p.sa1);
  build(c.sa2.mlp_widths, c.batch_norm, p.sa2);
  build(c.global_mlp, c.batch_norm, p.global);
  if (c.height_dim > 0) build(c.height_widths(), false, p.height);
  build(c.head_widths(), false, p.head);
  return p;
}

template <class S>
ModelGrads<S> make_grads(const ModelParams<S>& p) {
  ModelGrads<S> g;
  auto build = [](const std::vector<LinearParams<S>>& in,
                  std::vector<LinearGrads<S>>& out) {
    for (const auto& lp : in) {
      LinearGrads<S> lg;
      lg.W = MatX<S>::Zero(lp.W.rows(), lp.W.cols());
      lg.b = VecX<S>::Zero(lp.b.size());
      if (lp.has_bn) {
        lg.gamma = VecX<S>::Zero(lp.gamma.size());
        lg.beta = VecX<S>::Zero(lp.beta.size());
      }
      out.push_back(std::move(lg));
    }
  };
  build(p.sa1, g.sa1);
  build(p.sa2, g.sa2);
  build(p.global, g.global);
  build(p.height, g.height);
  build(p.head, g.head);
  return g;
}

// a += b, stage by stage; reduction helper for per-sample contributions
template <class S>
void add_grads(ModelGrads<S>& a, const ModelGrads<S>& b) {
  auto add = [](std::vector<LinearGrads<S>>& x,
                const std::vector<LinearGrads<S>>& y) {
    for (std::size_t l = 0; l < x.size(); ++l) {
      x[l].W += y[l].W;
      x[l].b += y[l].b;
      if (x[l].gamma.size() > 0) {
        x[l].gamma += y[l].gamma;
        x[l].beta += y[l].beta;
      }
    }
  };
  add(a.sa1, b.sa1);
  add(a.sa2, b.sa2);
  add(a.global, b.global);
  add(a.height, b.height);
  add(a.head, b.head);
}

// weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), open interval so |w| < 1 holds
// even at fan_in 1; biases zero. Draw order is the canonical stage order.
template <class S>
ModelParams<S> init_params(std::uint64_t seed, const NetConfig& c) {
  ModelParams<S> p = make_params<S>(c);
  Rng rng = Rng(seed).child(0x706172616d73ULL);  // dedicated init stream
  detail::visit_stages(p, [&](const char*, std::vector<LinearParams<S>>& layers) {
    for (auto& lp : layers) {
      const double bound = 1.0 / std::sqrt(double(lp.W.cols()));
      for (Eigen::Index r = 0; r < lp.W.rows(); ++r)
        for (Eigen::Index cc = 0; cc < lp.W.cols(); ++cc)
          lp.W(r, cc) = S(rng.uniform_open(-bound, bound));
    }
  });
  return p;
}

// flat views over parameter storage, in canonical order; used by the optimizer
// (trainable only) and the checkpoint writer (trainable + buffers).
template <class S>
struct ArrayRef {
  std::string name;
  S* data;
  std::vector<std::int64_t> dims;
  std::size_t size() const {
    std::size_t n = 1;
    for (auto d : dims) n *= std::size_t(d);
    return n;
  }
};

template <class S>
std::vector<ArrayRef<S>> param_arrays(ModelParams<S>& p, bool with_buffers) {
  std::vector<ArrayRef<S>> out;
  detail::visit_stages(p, [&](const char* stage, std::vector<LinearParams<S>>& layers) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& lp = layers[l];
      const std::string base = std::string(stage) + "." + std::to_string(l) + ".";
      out.push_back({base + "weight", lp.W.data(), {lp.W.rows(), lp.W.cols()}});
      out.push_back({base + "bias", lp.b.data(), {lp.b.size()}});
      if (lp.has_bn) {
        out.push_back({base + "gamma", lp.gamma.data(), {lp.gamma.size()}});
        out.push_back({base + "beta", lp.beta.data(), {lp.beta.size()}});
        if (with_buffers) {
          out.push_back({base + "running_mean", lp.running_mean.data(),
                         {lp.running_mean.size()}});
          out.push_back({base + "running_var", lp.running_var.data(),
                         {lp.running_var.size()}});
        }
      }
    }
  });
  return out;
}

template <class S>
std::vector<ArrayRef<S>> grad_arrays(ModelGrads<S>& g) {
  std::vector<ArrayRef<S>> out;
  detail::visit_stages(g, [&](const char* stage, std::vector<LinearGrads<S>>& layers) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& lg = layers[l];
      const std::string base = std::string(stage) + "." + std::to_string(l) + ".";
      out.push_back({base + "weight", lg.W.data(), {lg.W.rows(), lg.W.cols()}});
      out.push_back({base + "bias", lg.b.data(), {lg.b.size()}});
      if (lg.gamma.size() > 0) {
        out.push_back({base + "gamma", lg.gamma.data(), {lg.gamma.size()}});
        out.push_back({base + "beta", lg.beta.data(), {lg.beta.size()}});
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// ball query

// Neighbors of each centroid within radius, nearest first (squared distance,
// then source index on ties), capped at max_neighbors. Distances in double.
inline std::vector<std::vector<int>> ball_query(const std::vector<Vec3>& centroids,
                                                const std::vector<Vec3>& source,
                                                double radius, int max_neighbors) {
  if (centroids.empty() || source.empty())
    throw std::invalid_argument("ball_query: empty centroid or source set");
  if (!(radius > 0.0) || max_neighbors < 1)
    throw std::invalid_argument("ball_query: radius and max_neighbors must be positive");
  const double r2 = radius * radius;
  std::vector<std::vector<int>> out(centroids.size());
  std::vector<std::pair<double, int>> cand;
  for (std::size_t i = 0; i < centroids.size(); ++i) {
    cand.clear();
    for (std::size_t j = 0; j < source.size(); ++j) {
      const double d2 = squared_dist(centroids[i], source[j]);
      if (d2 <= r2) cand.emplace_back(d2, int(j));
    }
    // only the nearest max_neighbors need ordering; (d2, index) pairs are
    // distinct so partial selection matches a full sort on the kept prefix
    if (int(cand.size()) > max_neighbors) {
      std::nth_element(cand.begin(), cand.begin() + max_neighbors, cand.end());
      cand.resize(std::size_t(max_neighbors));
    }
    std::sort(cand.begin(), cand.end());
    out[i].reserve(cand.size());
    for (const auto& [d2, j] : cand) out[i].push_back(j);
  }
  return out;
}

// ---------------------------------------------------------------------------
// forward trace

template <class S>
struct LayerCache {
  MatX<S> out;      // post-activation (post-dropout for hidden head layers)
  MatX<S> z;        // raw linear output (no bias) when bn is active; centered
                    // and xhat stay implicit: xhat = (z - mu0) * invstd
  VecX<S> mu0;      // normalization shift applied to z (batch mean of z in
                    // train mode, running_mean - b in eval mode)
  VecX<S> invstd;   // 1/sqrt(var + eps) actually used
  VecX<S> mu, var;  // per-cloud batch stats (train-mode bn only)
  MatX<S> dropout;  // inverted mask scales (train-mode head hidden layers)
};

template <class S>
struct StageCache {
  MatX<S> x0;                        // stacked stage input rows
  std::vector<LayerCache<S>> layers;
  std::vector<int> argmax;           // pooled (group, channel) -> winning row
  std::vector<int> row_src;          // stacked row -> source point index
  std::vector<std::pair<int, int>> spans;  // per-group [begin, end) row range
};

template <class S>
struct ForwardTrace {
  std::vector<Vec3> p1_points, p2_points;
  MatX<S> p1_features, p2_features;   // M1 x 128, M2 x 256 at paper widths
  VecX<S> global_feature;             // 1024 at paper widths
  VecX<S> height_feature;             // 32 at paper widths (empty if disabled)
  double prediction = 0.0;            // grams

  Mode mode = Mode::eval;
  StageCache<S> sa1, sa2, global, height, head;
};

// ---------------------------------------------------------------------------
// shared mlp plumbing

namespace detail {

// One shared-MLP stack over stacked rows. ReLU after every layer except the
// last when relu_last is false. Train-mode bn normalizes with per-cloud
// statistics over the stacked rows; otherwise running statistics are frozen
// in. dropout_p > 0 adds inverted-scale masks after hidden-layer activations.
template <class S>
const MatX<S>& run_mlp(const std::vector<LinearParams<S>>& layers, const MatX<S>& x0,
                       bool bn, bool relu_last, double dropout_p, Mode mode,
                       Rng* rng, double bn_eps, std::vector<LayerCache<S>>& caches) {
  caches.clear();
  caches.resize(layers.size());
  const MatX<S>* cur = &x0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LinearParams<S>& L = layers[l];
    LayerCache<S>& cc = caches[l];
    MatX<S> z = (*cur) * L.W.transpose();
    const bool relu = relu_last || l + 1 < layers.size();
    if (bn) {
      // Normalization makes the bias a pure column shift, so it folds into
      // the mean and never touches the stacked rows. z is kept raw for the
      // backward pass; normalize+affine+relu collapse into one fused pass
      // out = z * scale + shift with per-column vectors.
      if (mode == Mode::train) {
        cc.mu0 = z.colwise().mean().transpose();
        cc.mu = cc.mu0 + L.b;  // stats of z + b, as the running buffers expect
        VecX<S> sumsq = VecX<S>::Zero(z.cols());
        for (Eigen::Index r = 0; r < z.rows(); ++r)
          sumsq.array() +=
              (z.row(r).transpose() - cc.mu0).array().square();
        cc.var = sumsq / S(z.rows());
        cc.invstd = (cc.var.array() + S(bn_eps)).rsqrt().matrix();
      } else {
        cc.mu0 = L.running_mean - L.b;
        cc.invstd = (L.running_var.array() + S(bn_eps)).rsqrt().matrix();
      }
      const VecX<S> scale = cc.invstd.cwiseProduct(L.gamma);
      const VecX<S> shift = L.beta - cc.mu0.cwiseProduct(scale);
      cc.z = std::move(z);
      if (relu)
        cc.out = ((cc.z.array().rowwise() * scale.transpose().array())
                      .rowwise() +
                  shift.transpose().array())
                     .cwiseMax(S(0))
                     .matrix();
      else
        cc.out = ((cc.z.array().rowwise() * scale.transpose().array())
                      .rowwise() +
                  shift.transpose().array())
                     .matrix();
    } else {
      if (relu)
        z = (z.rowwise() + L.b.transpose()).cwiseMax(S(0));
      else
        z.rowwise() += L.b.transpose();
      cc.out = std::move(z);
    }
    if (relu && dropout_p > 0.0 && mode == Mode::train) {
      if (!rng)
        throw std::invalid_argument("train-mode dropout requires an rng");
      cc.dropout.resize(cc.out.rows(), cc.out.cols());
      const S keep = S(1.0 / (1.0 - dropout_p));
      for (Eigen::Index r = 0; r < cc.out.rows(); ++r)
        for (Eigen::Index c = 0; c < cc.out.cols(); ++c)
          cc.dropout(r, c) = rng->uniform01() < dropout_p ? S(0) : keep;
      cc.out.array() *= cc.dropout.array();
    }
    cur = &cc.out;
  }
  return caches.back().out;
}

// Exact reverse of run_mlp. dy is the gradient at the stack output; returns
// the gradient at x0 and accumulates parameter gradients.
template <class S>
MatX<S> backward_mlp(const std::vector<LinearParams<S>>& layers,
                     const std::vector<LayerCache<S>>& caches, const MatX<S>& x0,
                     bool bn, bool relu_last, Mode mode, MatX<S> dy,
                     std::vector<LinearGrads<S>>& grads) {
  for (int l = int(layers.size()) - 1; l >= 0; --l) {
    const LinearParams<S>& L = layers[std::size_t(l)];
    const LayerCache<S>& cc = caches[std::size_t(l)];
    const MatX<S>& xin = l == 0 ? x0 : caches[std::size_t(l) - 1].out;
    const bool relu = relu_last || std::size_t(l) + 1 < layers.size();
    if (cc.dropout.size() > 0) dy.array() *= cc.dropout.array();
    if (bn) {
      // Everything the bn backward needs reduces to two column sums of the
      // incoming gradient, taken in one sweep fused with the relu mask. The
      // gradient then becomes dz in place via one fma pass per row:
      //   dz = dy*A + z*B + C  with per-column vectors A, B, C.
      LinearGrads<S>& lg = grads[std::size_t(l)];
      const Eigen::Index n = dy.rows();
      VecX<S> bsum = VecX<S>::Zero(dy.cols());  // sum_i dy
      VecX<S> dyz = VecX<S>::Zero(dy.cols());   // sum_i dy .* z
      for (Eigen::Index r = 0; r < n; ++r) {
        auto dyr = dy.row(r).array();
        if (relu) dyr *= (cc.out.row(r).array() > S(0)).template cast<S>();
        bsum.array() += dyr.transpose();
        dyz.array() += (dyr * cc.z.row(r).array()).transpose();
      }
      // sum dy .* xhat, with xhat = (z - mu0) * invstd left implicit
      const VecX<S> gsum = dyz - cc.mu0.cwiseProduct(bsum);
      lg.gamma += gsum.cwiseProduct(cc.invstd);
      lg.beta += bsum;
      const VecX<S> A = L.gamma.cwiseProduct(cc.invstd);
      if (mode == Mode::train) {
        // d/dz of per-cloud standardization with biased variance
        const S invn = S(1) / S(n);
        const VecX<S> k = gsum.cwiseProduct(cc.invstd)
                              .cwiseProduct(cc.invstd)
                              .cwiseProduct(L.gamma) *
                          invn;
        const VecX<S> B = -k.cwiseProduct(cc.invstd);
        const VecX<S> C =
            (cc.mu0.cwiseProduct(k) - L.gamma.cwiseProduct(bsum) * invn)
                .cwiseProduct(cc.invstd);
        for (Eigen::Index r = 0; r < n; ++r)
          dy.row(r).array() = dy.row(r).array() * A.transpose().array() +
                              cc.z.row(r).array() * B.transpose().array() +
                              C.transpose().array();
        // column sums of dz follow from the same vectors, no extra pass
        lg.b += A.cwiseProduct(bsum) +
                (B.cwiseProduct(cc.mu0) + C) * S(n);
      } else {
        dy.array().rowwise() *= A.transpose().array();
        lg.b += A.cwiseProduct(bsum);
      }
    } else {
      if (relu)
        dy.array() *= (cc.out.array() > S(0)).template cast<S>();
      grads[std::size_t(l)].b += dy.colwise().sum().transpose();
    }
    grads[std::size_t(l)].W.noalias() += dy.transpose() * xin;
    MatX<S> dnext(dy.rows(), L.W.cols());
    dnext.noalias() = dy * L.W;
    dy = std::move(dnext);
  }
  return dy;
}

// Column-wise max over each group's row span; ties keep the lowest row so the
// backward routing is reproducible.
template <class S>
void pool_groups(const MatX<S>& y, const std::vector<std::pair<int, int>>& spans,
                 MatX<S>& pooled, std::vector<int>& argmax) {
  const int cols = int(y.cols());
  pooled.resize(Eigen::Index(spans.size()), cols);
  argmax.assign(spans.size() * std::size_t(cols), -1);
  for (std::size_t g = 0; g < spans.size(); ++g) {
    const auto [a, b] = spans[g];
    // sweep rows, not columns: y is row-major, so the inner loop stays on one
    // contiguous row while the running max lives in cache
    pooled.row(Eigen::Index(g)) = y.row(a);
    int* arg = &argmax[g * std::size_t(cols)];
    std::fill(arg, arg + cols, a);
    for (int r = a + 1; r < b; ++r) {
      const S* src = &y(r, 0);
      S* best = &pooled(Eigen::Index(g), 0);
      for (int c = 0; c < cols; ++c) {
        if (src[c] > best[c]) {
          best[c] = src[c];
          arg[c] = r;
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// bn running statistics

// Sum of per-cloud batch statistics for every bn layer, accumulated in sample
// order so the end-of-batch running-stat update is deterministic.
template <class S>
struct BnBatchStats {
  struct Layer {
    VecX<S> mu, var;
  };
  std::vector<Layer> sa1, sa2, global;
  std::size_t count = 0;

  void add(const ForwardTrace<S>& t) {
    auto acc = [](const StageCache<S>& cache, std::vector<Layer>& dst) {
      if (dst.empty()) {
        for (const auto& lc : cache.layers) {
          if (lc.mu.size() == 0) return;
          dst.push_back({lc.mu, lc.var});
        }
        return;
      }
      for (std::size_t l = 0; l < cache.layers.size(); ++l) {
        dst[l].mu += cache.layers[l].mu;
        dst[l].var += cache.layers[l].var;
      }
    };
    acc(t.sa1, sa1);
    acc(t.sa2, sa2);
    acc(t.global, global);
    ++count;
  }

  // fold another accumulator in; used to reduce per-sample slots in order
  void merge(const BnBatchStats& o) {
    if (o.count == 0) return;
    auto fold = [](std::vector<Layer>& dst, const std::vector<Layer>& src) {
      if (dst.empty()) {
        dst = src;
        return;
      }
      for (std::size_t l = 0; l < src.size(); ++l) {
        dst[l].mu += src[l].mu;
        dst[l].var += src[l].var;
      }
    };
    fold(sa1, o.sa1);
    fold(sa2, o.sa2);
    fold(global, o.global);
    count += o.count;
  }
};

// ---------------------------------------------------------------------------
// the net

struct TrainSample {
  PointCloud cloud;  // preprocessed: filtered, sampled, centered
  double height = 0.0;
  double target = 0.0;  // grams
};

// loss(pred, target) -> {value, d value / d pred}
using LossFn = std::function<std::pair<double, double>(double, double)>;

template <class S>
class Net {
 public:
  Net(NetConfig cfg, ModelParams<S> params)
      : cfg_(std::move(cfg)), params_(std::move(params)) {
    validate(cfg_);
  }

  static Net init(std::uint64_t seed, const NetConfig& cfg) {
    return Net(cfg, init_params<S>(seed, cfg));
  }

  const NetConfig& config() const { return cfg_; }
  ModelParams<S>& params() { return params_; }
  const ModelParams<S>& params() const { return params_; }

  // expected_points > 0 enforces an exact input size (strict mode). rng is
  // required only for train-mode dropout.
  ForwardTrace<S> forward(const PointCloud& cloud, double height, Mode mode,
                          Rng* rng = nullptr, long expected_points = -1) const {
    if (cloud.size() < 8)
      throw DataError("forward: need at least 8 points, got " +
                      std::to_string(cloud.size()));
    if (expected_points > 0 && long(cloud.size()) != expected_points)
      throw DataError("forward: expected " + std::to_string(expected_points) +
                      " points, got " + std::to_string(cloud.size()));
    const Vec3 ctr = centroid(cloud);
    if (ctr.norm() > 1e-6)
      throw DataError("forward: cloud is not centered (centroid norm " +
                      std::to_string(ctr.norm()) + ")");
    if (height < 0.0) throw DataError("forward: negative height");

    ForwardTrace<S> t;
    t.mode = mode;

    MatX<S> no_feats(0, 0);
    sa_stage(cloud.pts, no_feats, cfg_.sa1, params_.sa1, mode, t.p1_points,
             t.p1_features, t.sa1);
    sa_stage(t.p1_points, t.p1_features, cfg_.sa2, params_.sa2, mode, t.p2_points,
             t.p2_features, t.sa2);

    // global descriptor: [features | coords] per sampled point, max over points
    const int m2 = int(t.p2_points.size());
    const int c2 = int(t.p2_features.cols());
    t.global.x0.resize(m2, c2 + 3);
    for (int i = 0; i < m2; ++i) {
      t.global.x0.row(i).head(c2) = t.p2_features.row(i);
      t.global.x0(i, c2 + 0) = S(t.p2_points[std::size_t(i)].x);
      t.global.x0(i, c2 + 1) = S(t.p2_points[std::size_t(i)].y);
      t.global.x0(i, c2 + 2) = S(t.p2_points[std::size_t(i)].z);
    }
    const MatX<S>& gy =
        detail::run_mlp(params_.global, t.global.x0, cfg_.batch_norm, true, 0.0,
                        mode, nullptr, cfg_.bn_eps, t.global.layers);
    t.global.spans = {{0, m2}};
    MatX<S> pooled;
    detail::pool_groups(gy, t.global.spans, pooled, t.global.argmax);
    t.global_feature = pooled.row(0).transpose();

    // height embedding
    if (cfg_.height_dim > 0) {
      t.height.x0.resize(1, 1);
      t.height.x0(0, 0) = S(height);
      const MatX<S>& hy = detail::run_mlp(params_.height, t.height.x0, false, true,
                                          0.0, mode, nullptr, cfg_.bn_eps,
                                          t.height.layers);
      t.height_feature = hy.row(0).transpose();
    }

    // regression head on [global | height]
    const int g = int(t.global_feature.size());
    const int h = int(t.height_feature.size());
    t.head.x0.resize(1, g + h);
    t.head.x0.row(0).head(g) = t.global_feature.transpose();
    if (h > 0) t.head.x0.row(0).tail(h) = t.height_feature.transpose();
    const MatX<S>& out =
        detail::run_mlp(params_.head, t.head.x0, false, false, cfg_.dropout, mode,
                        rng, cfg_.bn_eps, t.head.layers);
    t.prediction = double(out(0, 0));
    return t;
  }

  // Accumulates d loss / d params for one traced forward into g. dpred is the
  // upstream gradient at the prediction (already scaled for batch reduction).
  void backward(const ForwardTrace<S>& t, double dpred, ModelGrads<S>& g) const {
    MatX<S> dy(1, 1);
    dy(0, 0) = S(dpred);
    MatX<S> dhead = detail::backward_mlp(params_.head, t.head.layers, t.head.x0,
                                         false, false, t.mode, std::move(dy), g.head);
    const int gdim = int(t.global_feature.size());
    const int hdim = int(t.height_feature.size());
    if (hdim > 0) {
      MatX<S> dh = dhead.rightCols(hdim);
      detail::backward_mlp(params_.height, t.height.layers, t.height.x0, false,
                           true, t.mode, std::move(dh), g.height);
    }

    const int m2 = int(t.p2_points.size());
    MatX<S> dgy = MatX<S>::Zero(m2, gdim);
    for (int c = 0; c < gdim; ++c)
      dgy(t.global.argmax[std::size_t(c)], c) = dhead(0, c);
    MatX<S> dgx =
        detail::backward_mlp(params_.global, t.global.layers, t.global.x0,
                             cfg_.batch_norm, true, t.mode, std::move(dgy), g.global);

    const int c2 = int(t.p2_features.cols());
    MatX<S> df2 = dgx.leftCols(c2);
    MatX<S> df1 = sa_backward(params_.sa2, t.sa2, t.mode, df2,
                              int(t.p1_points.size()),
                              int(t.p1_features.cols()), g.sa2);
    sa_backward(params_.sa1, t.sa1, t.mode, df1, 0, 0, g.sa1);
  }

  // dropout-mask stream for batch element i; masks depend only on (seed, i),
  // never on batch composition or parameters
  static Rng sample_rng(std::uint64_t mask_seed, std::size_t i) {
    return Rng(mask_seed).child(0x64726f70ULL, i);
  }

  // Mean-batch-loss gradients. Per-sample dropout masks come from substreams
  // of mask_seed, so batch composition does not perturb other samples' masks.
  // Each sample's contribution lands in its own zeroed slot and the slots are
  // reduced in batch order, so every worker count gives bit-identical grads.
  ModelGrads<S> gradients(const std::vector<TrainSample>& batch, const LossFn& loss,
                          Mode mode, std::uint64_t mask_seed,
                          double* mean_loss = nullptr,
                          BnBatchStats<S>* bn_stats = nullptr,
                          int workers = 1) const {
    if (batch.empty()) throw std::invalid_argument("gradients: empty batch");
    const std::size_t n = batch.size();
    const double inv_b = 1.0 / double(n);
    const bool want_stats = bn_stats && mode == Mode::train && cfg_.batch_norm;
    ModelGrads<S> g = make_grads(params_);
    double total = 0.0;

    auto one = [&](std::size_t i, ModelGrads<S>& slot, BnBatchStats<S>* st,
                   double& lv_out) {
      Rng rng = sample_rng(mask_seed, i);
      ForwardTrace<S> t = forward(batch[i].cloud, batch[i].height, mode, &rng);
      const auto [lv, dl] = loss(t.prediction, batch[i].target);
      if (!std::isfinite(lv) || !std::isfinite(dl))
        throw NumericError("gradients: non-finite loss");
      lv_out = lv;
      slot = make_grads(params_);
      backward(t, dl * inv_b, slot);
      if (st) st->add(t);
    };

    if (workers <= 1 || n <= 1) {
      ModelGrads<S> slot;
      for (std::size_t i = 0; i < n; ++i) {
        BnBatchStats<S> st;
        double lv = 0.0;
        one(i, slot, want_stats ? &st : nullptr, lv);
        add_grads(g, slot);
        total += lv;
        if (want_stats) bn_stats->merge(st);
      }
    } else {
      std::vector<ModelGrads<S>> slots(n);
      std::vector<BnBatchStats<S>> stat_slots(want_stats ? n : 0);
      std::vector<double> losses(n, 0.0);
      parallel_for(n, workers, [&](std::size_t i) {
        one(i, slots[i], want_stats ? &stat_slots[i] : nullptr, losses[i]);
      });
      for (std::size_t i = 0; i < n; ++i) {
        add_grads(g, slots[i]);
        slots[i] = ModelGrads<S>();  // free as we go
        total += losses[i];
        if (want_stats) bn_stats->merge(stat_slots[i]);
      }
    }
    if (mean_loss) *mean_loss = total * inv_b;
    return g;
  }

  // EMA update of bn running statistics from batch-averaged per-cloud stats.
  void update_running_stats(const BnBatchStats<S>& stats) {
    if (stats.count == 0) return;
    const S m = S(cfg_.bn_momentum);
    const S inv_n = S(1) / S(stats.count);
    auto upd = [&](std::vector<LinearParams<S>>& layers,
                   const std::vector<typename BnBatchStats<S>::Layer>& acc) {
      for (std::size_t l = 0; l < layers.size(); ++l) {
        layers[l].running_mean =
            (S(1) - m) * layers[l].running_mean + m * acc[l].mu * inv_n;
        layers[l].running_var =
            (S(1) - m) * layers[l].running_var + m * acc[l].var * inv_n;
      }
    };
    upd(params_.sa1, stats.sa1);
    upd(params_.sa2, stats.sa2);
    upd(params_.global, stats.global);
  }

 private:
  // One set-abstraction level: FPS centroids, radius grouping, shared MLP on
  // [neighbor features | relative offset], per-group channel max.
  void sa_stage(const std::vector<Vec3>& pts, const MatX<S>& feats,
                const SALevelConfig& lvl, const std::vector<LinearParams<S>>& mlp,
                Mode mode, std::vector<Vec3>& out_pts, MatX<S>& out_feats,
                StageCache<S>& cache) const {
    const std::size_t k = pts.size();
    const std::size_t m = std::max<std::size_t>(
        1, std::size_t(std::llround(lvl.sample_ratio * double(k))));
    const auto idx =
        detail::fps_core([&](std::size_t i) { return pts[i]; }, k, m);
    out_pts.clear();
    out_pts.reserve(idx.size());
    for (auto i : idx) out_pts.push_back(pts[i]);

    auto groups = ball_query(out_pts, pts, lvl.radius, lvl.max_neighbors);
    for (std::size_t g = 0; g < groups.size(); ++g)
      if (groups[g].empty()) groups[g].push_back(int(idx[g]));  // self fallback

    const int c_in = int(feats.cols());
    std::size_t rows = 0;
    for (const auto& g : groups) rows += g.size();
    cache.x0.resize(Eigen::Index(rows), c_in + 3);
    cache.row_src.resize(rows);
    cache.spans.resize(groups.size());
    Eigen::Index r = 0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      cache.spans[g] = {int(r), int(r + Eigen::Index(groups[g].size()))};
      const Vec3& ctr = out_pts[g];
      for (int j : groups[g]) {
        if (c_in > 0) cache.x0.row(r).head(c_in) = feats.row(j);
        const Vec3& q = pts[std::size_t(j)];
        cache.x0(r, c_in + 0) = S(q.x - ctr.x);
        cache.x0(r, c_in + 1) = S(q.y - ctr.y);
        cache.x0(r, c_in + 2) = S(q.z - ctr.z);
        cache.row_src[std::size_t(r)] = j;
        ++r;
      }
    }
    const MatX<S>& y = detail::run_mlp(mlp, cache.x0, cfg_.batch_norm, true, 0.0,
                                       mode, nullptr, cfg_.bn_eps, cache.layers);
    detail::pool_groups(y, cache.spans, out_feats, cache.argmax);
  }

  // dpooled is the gradient at the stage's pooled output; returns gradients
  // w.r.t. the source features (n_src x c_in), empty when the stage had none.
  MatX<S> sa_backward(const std::vector<LinearParams<S>>& mlp,
                      const StageCache<S>& cache, Mode mode, const MatX<S>& dpooled,
                      int n_src, int c_in, std::vector<LinearGrads<S>>& grads) const {
    const int cols = int(dpooled.cols());
    MatX<S> dy = MatX<S>::Zero(cache.x0.rows(), cols);
    for (std::size_t g = 0; g < cache.spans.size(); ++g)
      for (int c = 0; c < cols; ++c)
        dy(cache.argmax[g * std::size_t(cols) + std::size_t(c)], c) +=
            dpooled(Eigen::Index(g), c);
    MatX<S> dx0 = detail::backward_mlp(mlp, cache.layers, cache.x0,
                                       cfg_.batch_norm, true, mode, std::move(dy),
                                       grads);
    if (c_in == 0) return MatX<S>(0, 0);
    MatX<S> df = MatX<S>::Zero(n_src, c_in);
    for (Eigen::Index rr = 0; rr < dx0.rows(); ++rr)
      df.row(cache.row_src[std::size_t(rr)]) += dx0.row(rr).head(c_in);
    return df;
  }

  NetConfig cfg_;
  ModelParams<S> params_;
};

}  // namespace pointraft
