#pragma once

// Optimization loop: composite loss, Adam with bias correction, stepped
// learning-rate decay, deterministic crop scheduling.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "baaf/cloud.hpp"
#include "baaf/common.hpp"
#include "baaf/metrics.hpp"
#include "baaf/model.hpp"
#include "baaf/tensor.hpp"

namespace baaf {

struct TrainConfig {
  int epochs = 100;
  float lr0 = 0.01f;
  float decay = 0.5f;
  int decay_every = 10;
  int batch_size = 1;  // crops per optimizer step (gradient accumulation)
  std::uint64_t seed = 1;
  // Crops sized to the default synthetic scene keep the pyramid depth of
  // training inputs equal to that of full-scene evaluation.
  std::int64_t crop_size = 4096;
  int crops_per_epoch = 4;

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (lr0 <= 0.0f) throw ConfigError("train: lr0 must be positive");
    if (decay <= 0.0f || decay > 1.0f) throw ConfigError("train: decay must be in (0, 1]");
    if (decay_every < 1) throw ConfigError("train: decay_every must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (crop_size < 1) throw ConfigError("train: crop_size must be >= 1");
    if (crops_per_epoch < 1) throw ConfigError("train: crops_per_epoch must be >= 1");
  }
};

/// Stepped decay: lr0 * decay^floor(epoch / decay_every).
inline float lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ValueError("lr_at: negative epoch");
  return cfg.lr0 * static_cast<float>(std::pow(static_cast<double>(cfg.decay), epoch / cfg.decay_every));
}

/// Overall loss: cross-entropy plus the weighted per-level augmentation
/// losses.
inline Tensor total_loss(const Tensor& ce, const std::vector<Tensor>& aug_losses,
                         const std::vector<float>& weights) {
  if (aug_losses.size() != weights.size()) throw ConfigError("total_loss: weight count mismatch");
  Tensor loss = ce;
  for (std::size_t m = 0; m < aug_losses.size(); ++m)
    loss = add(loss, mul_scalar(aug_losses[m], weights[m]));
  return loss;
}

/// Adam with the standard constants (0.9, 0.999, 1e-8) and bias-corrected
/// moments. Parameters with untouched gradients stay put.
class Adam {
 public:
  explicit Adam(ParamStore& params, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f)
      : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& e : params.entries())
      if (e.trainable) slots_.push_back(Slot{e.tensor, std::vector<float>(static_cast<std::size_t>(e.tensor.size()), 0.0f),
                                             std::vector<float>(static_cast<std::size_t>(e.tensor.size()), 0.0f)});
  }

  std::int64_t step_count() const { return step_; }

  void step(float lr) {
    ++step_;
    const float corr1 = 1.0f - static_cast<float>(std::pow(static_cast<double>(beta1_), step_));
    const float corr2 = 1.0f - static_cast<float>(std::pow(static_cast<double>(beta2_), step_));
    for (Slot& s : slots_) {
      const std::vector<float>& g = s.param.grad();
      if (g.empty()) continue;
      float* p = s.param.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        s.m[i] = beta1_ * s.m[i] + (1.0f - beta1_) * g[i];
        s.v[i] = beta2_ * s.v[i] + (1.0f - beta2_) * g[i] * g[i];
        const float m_hat = s.m[i] / corr1;
        const float v_hat = s.v[i] / corr2;
        p[i] -= lr * m_hat / (std::sqrt(v_hat) + eps_);
      }
    }
  }

  void zero_grad() { params_.zero_grad(); }

 private:
  struct Slot {
    Tensor param;
    std::vector<float> m, v;
  };

  ParamStore& params_;
  float beta1_, beta2_, eps_;
  std::int64_t step_ = 0;
  std::vector<Slot> slots_;
};

/// Eval-mode forward over a labeled cloud, scored against its labels.
inline Scores evaluate(const Network& net, const PointCloud& cloud) {
  if (!cloud.has_labels()) throw ValueError("evaluate: cloud has no labels");
  Rng rng(0);
  const ForwardResult res = net.forward(cloud, false, rng);
  ConfusionMatrix cm(net.config().num_classes);
  cm.accumulate(cloud.labels, argmax_rows(res.logits));
  return scores(cm);
}

struct EpochStat {
  int epoch = 0;
  float lr = 0.0f;
  double loss = 0.0;
  double oa = 0.0;
};

struct TrainLog {
  std::vector<EpochStat> epochs;
  std::int64_t optimizer_steps = 0;
};

/// Seeded crop schedule, one pass per epoch in shuffled order; gradients
/// accumulate over batch_size crops per Adam step. Aborts on a non-finite
/// loss with a diagnostic state dump.
inline TrainLog train_loop(Network& net, const PointCloud& scene, const TrainConfig& cfg,
                           std::ostream* log_stream = nullptr) {
  cfg.validate();
  if (!scene.has_labels()) throw ValueError("train: scene has no labels");
  const std::vector<float> weights = net.config().effective_loss_weights();

  Rng master(cfg.seed);
  Rng crop_rng = master.fork(1);
  Rng shuffle_rng = master.fork(2);
  Rng step_rng = master.fork(3);

  std::vector<PointCloud> crops;
  for (int i = 0; i < cfg.crops_per_epoch; ++i)
    crops.push_back(sample_crop(scene, CropSpec{cfg.crop_size, crop_rng.next_u64()}));

  Adam adam(net.params());
  TrainLog log;
  if (log_stream) (*log_stream) << "epoch,lr,loss,oa\n";

  std::vector<std::size_t> order(crops.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const float lr = lr_at(epoch, cfg);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.uniform_int(static_cast<std::int64_t>(i)))]);

    double loss_acc = 0.0;
    std::int64_t correct = 0, seen = 0;
    int pending = 0;
    adam.zero_grad();
    for (std::size_t idx = 0; idx < order.size(); ++idx) {
      const PointCloud& crop = crops[order[idx]];
      Rng fwd_rng = step_rng.fork(step_rng.next_u64());
      const ForwardResult res = net.forward(crop, true, fwd_rng);
      const Tensor ce = cross_entropy(res.logits, crop.labels);
      Tensor loss = total_loss(ce, res.aug_losses, weights);
      const float loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        std::ostringstream dump;
        dump << "train: non-finite loss at epoch " << epoch + 1 << ", crop " << idx << ", lr " << lr
             << "; ce=" << ce.item();
        for (std::size_t m = 0; m < res.aug_losses.size(); ++m)
          dump << " aug" << m + 1 << "=" << res.aug_losses[m].item();
        throw ValueError(dump.str());
      }
      loss_acc += loss_value;
      const std::vector<std::int32_t> pred = argmax_rows(res.logits);
      for (std::size_t p = 0; p < pred.size(); ++p) {
        correct += pred[p] == crop.labels[p] ? 1 : 0;
        ++seen;
      }
      if (cfg.batch_size > 1) loss = mul_scalar(loss, 1.0f / static_cast<float>(cfg.batch_size));
      backward(loss);
      if (++pending == cfg.batch_size || idx + 1 == order.size()) {
        adam.step(lr);
        adam.zero_grad();
        pending = 0;
      }
    }

    EpochStat stat;
    stat.epoch = epoch + 1;
    stat.lr = lr;
    stat.loss = loss_acc / static_cast<double>(order.size());
    stat.oa = static_cast<double>(correct) / static_cast<double>(seen);
    log.epochs.push_back(stat);
    if (log_stream) {
      (*log_stream) << stat.epoch << ',' << stat.lr << ',' << std::setprecision(8) << stat.loss << ','
                    << stat.oa << '\n';
      log_stream->flush();
    }
  }
  log.optimizer_steps = adam.step_count();
  return log;
}

}  // namespace baaf
