#pragma once

// Training loop: preprocessing cache, imbalance-aware batching, Adam with an
// exponential learning-rate schedule, per-epoch validation, CSV logging and
// best/final checkpoints.  Everything random derives from TrainConfig::seed
// through named child streams, so two runs with the same seed produce
// bit-identical checkpoints.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "pointraft/augment.hpp"
#include "pointraft/checkpoint.hpp"
#include "pointraft/cloud.hpp"
#include "pointraft/common.hpp"
#include "pointraft/dataset.hpp"
#include "pointraft/loss.hpp"
#include "pointraft/net.hpp"
#include "pointraft/optim.hpp"

namespace pointraft {

enum class SamplerKind { imbalanced, uniform };

inline SamplerKind parse_sampler(const std::string& s) {
  if (s == "imbalanced") return SamplerKind::imbalanced;
  if (s == "uniform") return SamplerKind::uniform;
  throw std::invalid_argument("unknown sampler '" + s + "' (imbalanced, uniform)");
}

inline const char* sampler_name(SamplerKind k) {
  return k == SamplerKind::imbalanced ? "imbalanced" : "uniform";
}

struct TrainConfig {
  int input_points = 1024;
  double learning_rate = 1e-3;
  double lr_decay = 0.97;  // lr(epoch) = learning_rate * lr_decay^epoch
  double weight_decay = 1e-4;
  bool decoupled_weight_decay = true;  // false couples wd into the gradient
  int batch_size = 32;
  int epochs = 50;
  LossKind loss = LossKind::smooth_l1;
  double smooth_l1_beta = 20.0;
  bool dropout = true;
  bool augmentation = true;
  SamplerKind sampler = SamplerKind::imbalanced;
  int height_dim = 32;  // 0 trains without the height branch
  bool batch_norm = true;
  std::uint64_t seed = 0;
  int workers = 1;  // preprocessing/validation threads; updates stay sequential
  // cluster filter settings, forwarded to preprocessing
  double filter_eps = 0.01;
  int filter_min_pts = 10;

  void validate() const {
    if (input_points < 8) throw std::invalid_argument("input_points must be >= 8");
    if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be > 0");
    if (!(lr_decay > 0) || lr_decay > 1)
      throw std::invalid_argument("lr_decay must lie in (0, 1]");
    if (weight_decay < 0) throw std::invalid_argument("weight_decay must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (!(smooth_l1_beta > 0)) throw std::invalid_argument("smooth_l1_beta must be > 0");
    if (height_dim < 0) throw std::invalid_argument("height_dim must be >= 0");
    if (workers < 1) throw std::invalid_argument("workers must be >= 1");
    if (!(filter_eps > 0)) throw std::invalid_argument("filter_eps must be > 0");
    if (filter_min_pts < 1) throw std::invalid_argument("filter_min_pts must be >= 1");
  }

  NetConfig net_config() const {
    NetConfig c;
    c.input_points = input_points;
    c.height_dim = height_dim;
    c.batch_norm = batch_norm;
    c.dropout = dropout ? 0.5 : 0.0;
    return c;
  }

  double lr_at(int epoch) const { return learning_rate * std::pow(lr_decay, epoch); }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"input_points", c.input_points},
                     {"learning_rate", c.learning_rate},
                     {"lr_decay", c.lr_decay},
                     {"weight_decay", c.weight_decay},
                     {"decoupled_weight_decay", c.decoupled_weight_decay},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"loss", loss_name(c.loss)},
                     {"smooth_l1_beta", c.smooth_l1_beta},
                     {"dropout", c.dropout},
                     {"augmentation", c.augmentation},
                     {"sampler", sampler_name(c.sampler)},
                     {"height_dim", c.height_dim},
                     {"batch_norm", c.batch_norm},
                     {"seed", c.seed},
                     {"workers", c.workers},
                     {"filter_eps", c.filter_eps},
                     {"filter_min_pts", c.filter_min_pts}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.input_points = j.value("input_points", c.input_points);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.decoupled_weight_decay = j.value("decoupled_weight_decay", c.decoupled_weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  if (j.contains("loss")) c.loss = parse_loss(j.at("loss").get<std::string>());
  c.smooth_l1_beta = j.value("smooth_l1_beta", c.smooth_l1_beta);
  c.dropout = j.value("dropout", c.dropout);
  c.augmentation = j.value("augmentation", c.augmentation);
  if (j.contains("sampler")) c.sampler = parse_sampler(j.at("sampler").get<std::string>());
  c.height_dim = j.value("height_dim", c.height_dim);
  c.batch_norm = j.value("batch_norm", c.batch_norm);
  c.seed = j.value("seed", c.seed);
  c.workers = j.value("workers", c.workers);
  c.filter_eps = j.value("filter_eps", c.filter_eps);
  c.filter_min_pts = j.value("filter_min_pts", c.filter_min_pts);
}

// ---------------------------------------------------------------------------
// shared preprocessing (also used by eval and bench)

// one cloud ready for the network, with the metadata needed for reporting
struct PreparedSample {
  PointCloud cloud;  // filtered, downsampled, centered
  double height = 0.0;
  double target = 0.0;  // grams
  std::string tuber_id;
  std::string cultivar;
  int season = 0;
  std::string path;
  double elongation = 0.0;  // of the filtered cloud's bounding box
};

// load -> cluster filter -> fps to input_points -> height -> center
inline PreparedSample prepare_cloud(const std::string& path, const TuberRecord& rec,
                                    const TrainConfig& cfg) {
  PreparedSample s;
  PointCloud raw = load_cloud(path);
  PointCloud kept = filter_clusters(raw, cfg.filter_eps, cfg.filter_min_pts);
  if (kept.size() < 8)
    throw DataError("cloud '" + path + "': fewer than 8 points after filtering");
  PointCloud sampled = fps(kept, std::size_t(cfg.input_points));
  s.height = estimate_height(sampled, rec.camera_belt_distance_m);
  CenterResult c = center(sampled);
  s.cloud = std::move(c.cloud);
  s.target = rec.weight_g;
  s.tuber_id = rec.tuber_id;
  s.cultivar = rec.cultivar;
  s.season = rec.season;
  s.path = path;
  s.elongation = elongation_factor(oriented_bbox(kept));
  return s;
}

// every cloud of every record, record order then path order
inline std::vector<PreparedSample> prepare_records(const std::vector<TuberRecord>& records,
                                                   const TrainConfig& cfg) {
  std::vector<std::pair<const TuberRecord*, const std::string*>> jobs;
  for (const TuberRecord& r : records) {
    validate_record(r);
    for (const std::string& p : r.cloud_paths) jobs.emplace_back(&r, &p);
  }
  std::vector<PreparedSample> out(jobs.size());
  parallel_for(jobs.size(), cfg.workers,
               [&](std::size_t i) { out[i] = prepare_cloud(*jobs[i].second, *jobs[i].first, cfg); });
  return out;
}

// eval-mode predictions for prepared samples, parallel over samples
template <class S>
inline std::vector<double> predict_samples(const Net<S>& net,
                                           const std::vector<PreparedSample>& samples,
                                           int workers = 1) {
  std::vector<double> preds(samples.size());
  parallel_for(samples.size(), workers, [&](std::size_t i) {
    preds[i] = net.forward(samples[i].cloud, samples[i].height, Mode::eval).prediction;
  });
  return preds;
}

// ---------------------------------------------------------------------------
// training

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_mae = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  int best_epoch = -1;
  double best_val_mae = 0.0;
  std::string best_path, final_path, log_path;
};

namespace detail {

// rng stream salts for the training loop
constexpr std::uint64_t kSaltSampler = 0x73616d70ULL;   // per-epoch draw stream
constexpr std::uint64_t kSaltShuffle = 0x73687566ULL;   // per-epoch order stream
constexpr std::uint64_t kSaltAugment = 0x61756700ULL;   // per-draw transform
constexpr std::uint64_t kSaltMask = 0x6d61736bULL;      // per-batch dropout seed

inline void write_log_csv(const std::string& path, const std::vector<EpochLog>& rows) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write train log: " + path);
  f << "epoch,lr,train_loss,val_loss,val_mae\n";
  char buf[160];
  for (const EpochLog& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g,%.10g\n", r.epoch, r.lr,
                  r.train_loss, r.val_loss, r.val_mae);
    f << buf;
  }
  if (!f.good()) throw DataError("failed writing train log: " + path);
}

}  // namespace detail

// Trains on the given records and writes best.ckpt, final.ckpt and
// train_log.csv under out_dir.  The best checkpoint is the epoch with the
// lowest validation MAE (earliest epoch wins ties).  Non-finite training loss
// aborts with a NumericError naming the epoch.
inline TrainResult train_model(const std::vector<TuberRecord>& train_records,
                               const std::vector<TuberRecord>& val_records,
                               const TrainConfig& cfg, const std::string& out_dir,
                               bool verbose = false) {
  cfg.validate();
  if (train_records.empty()) throw DataError("training set is empty");
  if (val_records.empty()) throw DataError("validation set is empty");
  std::filesystem::create_directories(out_dir);

  // preprocessing runs once; augmentation re-derives from these base clouds
  const std::vector<PreparedSample> base = prepare_records(train_records, cfg);
  const std::vector<PreparedSample> val = prepare_records(val_records, cfg);
  const std::size_t n = base.size();

  Net<float> net = Net<float>::init(cfg.seed, cfg.net_config());
  AdamConfig ac;
  ac.weight_decay = cfg.weight_decay;
  ac.decoupled = cfg.decoupled_weight_decay;
  Adam<float> adam(ac);
  const LossFn loss = make_loss(cfg.loss, cfg.smooth_l1_beta);

  std::vector<double> grams(n);
  for (std::size_t i = 0; i < n; ++i) grams[i] = base[i].target;
  std::unique_ptr<WeightedSampler> sampler;
  if (cfg.sampler == SamplerKind::imbalanced)
    sampler = std::make_unique<WeightedSampler>(grams);

  const Rng root(cfg.seed);
  TrainResult res;
  res.log_path = (std::filesystem::path(out_dir) / "train_log.csv").string();
  res.best_path = (std::filesystem::path(out_dir) / "best.ckpt").string();
  res.final_path = (std::filesystem::path(out_dir) / "final.ckpt").string();
  ModelParams<float> best_params = net.params();
  nlohmann::json cfg_json = cfg;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);

    // epoch order: weighted draws with replacement, or a plain shuffle
    std::vector<std::size_t> order(n);
    if (sampler) {
      Rng r = root.child(detail::kSaltSampler, std::uint64_t(epoch));
      for (std::size_t i = 0; i < n; ++i) order[i] = sampler->draw(r);
    } else {
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      Rng r = root.child(detail::kSaltShuffle, std::uint64_t(epoch));
      r.shuffle(order);
    }

    double loss_sum = 0.0;  // draw-weighted epoch mean
    std::size_t batch_idx = 0;
    for (std::size_t start = 0; start < n; start += std::size_t(cfg.batch_size), ++batch_idx) {
      const std::size_t end = std::min(n, start + std::size_t(cfg.batch_size));
      std::vector<TrainSample> batch(end - start);
      parallel_for(end - start, cfg.workers, [&](std::size_t k) {
        const std::size_t draw = start + k;
        const PreparedSample& src = base[order[draw]];
        TrainSample& t = batch[k];
        if (cfg.augmentation) {
          Rng ar = root.child(detail::kSaltAugment, std::uint64_t(epoch), draw);
          t.cloud = center(augment(src.cloud, ar)).cloud;  // re-center after
        } else {
          t.cloud = src.cloud;
        }
        t.height = src.height;
        t.target = src.target;
      });
      const std::uint64_t mask_seed =
          root.child(detail::kSaltMask, std::uint64_t(epoch), batch_idx).seed();
      double batch_loss = 0.0;
      BnBatchStats<float> stats;
      ModelGrads<float> g;
      try {
        g = net.gradients(batch, loss, Mode::train, mask_seed, &batch_loss,
                          cfg.batch_norm ? &stats : nullptr, cfg.workers);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_idx) + ": " + e.what());
      }
      if (cfg.batch_norm) net.update_running_stats(stats);
      adam.step(net.params(), g, lr);
      loss_sum += batch_loss * double(end - start);
    }

    // validation pass in eval mode
    const std::vector<double> preds = predict_samples(net, val, cfg.workers);
    double vloss = 0.0, vmae = 0.0;
    for (std::size_t i = 0; i < val.size(); ++i) {
      vloss += loss(preds[i], val[i].target).first;
      vmae += std::abs(preds[i] - val[i].target);
    }
    vloss /= double(val.size());
    vmae /= double(val.size());

    EpochLog row{epoch, lr, loss_sum / double(n), vloss, vmae};
    if (!std::isfinite(row.train_loss))
      throw NumericError("epoch " + std::to_string(epoch) + ": non-finite training loss");
    res.log.push_back(row);
    detail::write_log_csv(res.log_path, res.log);  // flushed every epoch
    if (verbose)
      std::fprintf(stderr, "epoch %3d  lr %.6f  train %.4f  val %.4f  val_mae %.3f\n",
                   epoch, lr, row.train_loss, vloss, vmae);

    if (res.best_epoch < 0 || vmae < res.best_val_mae) {
      res.best_epoch = epoch;
      res.best_val_mae = vmae;
      best_params = net.params();
    }
  }

  nlohmann::json extra_best{{"train", cfg_json},
                            {"epoch", res.best_epoch},
                            {"val_mae", res.best_val_mae}};
  save_checkpoint(best_params, net.config(), res.best_path, extra_best);
  nlohmann::json extra_final{{"train", cfg_json},
                             {"epoch", cfg.epochs - 1},
                             {"val_mae", res.log.back().val_mae}};
  save_checkpoint(net.params(), net.config(), res.final_path, extra_final);
  return res;
}

}  // namespace pointraft
