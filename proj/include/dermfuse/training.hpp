#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dermfuse/dataset.hpp"
#include "dermfuse/evaluation.hpp"
#include "dermfuse/image.hpp"
#include "dermfuse/model.hpp"
#include "dermfuse/optim.hpp"
#include "dermfuse/rng.hpp"
#include "dermfuse/tensor.hpp"

namespace dermfuse {

enum class WeightMode { inverse_frequency, uniform };

inline WeightMode weight_mode_from_string(const std::string& s) {
  if (s == "inverse_frequency") return WeightMode::inverse_frequency;
  if (s == "uniform") return WeightMode::uniform;
  throw ConfigError("unknown weight mode: " + s);
}

inline std::string to_string(WeightMode m) {
  return m == WeightMode::inverse_frequency ? "inverse_frequency" : "uniform";
}

// The cross-entropy has two readings: the literal printed form, which also
// charges an unweighted log(1 - p) term on the non-target classes, and the
// standard weighted categorical form. Both are provided.
enum class CeForm { as_written, categorical };

inline CeForm ce_form_from_string(const std::string& s) {
  if (s == "as_written") return CeForm::as_written;
  if (s == "categorical") return CeForm::categorical;
  throw ConfigError("unknown cross-entropy form: " + s);
}

inline std::string to_string(CeForm f) {
  return f == CeForm::as_written ? "as_written" : "categorical";
}

struct LossConfig {
  double alpha = 0.5;  // classification term
  double beta = 1.0;   // upscaling term
  WeightMode weight_mode = WeightMode::inverse_frequency;
  CeForm ce_form = CeForm::as_written;

  void validate() const {
    if (alpha < 0.0 || beta < 0.0) throw ConfigError("loss: alpha and beta must be >= 0");
    if (alpha == 0.0 && beta == 0.0) throw ConfigError("loss: alpha and beta cannot both be 0");
  }
};

struct TrainConfig {
  int epochs = 70;
  int batch_size = 32;
  double base_lr = 0.01;
  int step_size = 15;
  double gamma = 0.1;
  std::uint64_t seed = 0;
  SrMethod sr_method = SrMethod::bilinear;
  AugmentConfig augment;

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    OptimizerState st{base_lr, step_size, gamma, 0};
    st.validate();
    augment.validate();
  }
};

// w_i = N / (K * n_i): the weighted mean of w over the class distribution is
// exactly 1, which keeps the loss scale comparable to the unweighted one.
inline std::vector<double> class_weights(const std::vector<std::int64_t>& counts, WeightMode mode) {
  if (counts.empty()) throw ConfigError("class_weights: no classes");
  std::vector<double> w(counts.size(), 1.0);
  if (mode == WeightMode::uniform) return w;
  std::int64_t total = 0;
  for (auto c : counts) {
    if (c <= 0) throw ConfigError("class_weights: every class needs at least one sample");
    total += c;
  }
  const double k = static_cast<double>(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    w[i] = static_cast<double>(total) / (k * static_cast<double>(counts[i]));
  }
  return w;
}

// Weighted cross-entropy over softmax probabilities (batch mean). The log
// arguments are clamped at 1e-12.
template <typename T>
Tensor<T> weighted_ce(const Tensor<T>& probs, const Tensor<T>& onehot,
                      const std::vector<double>& weights, CeForm form) {
  if (probs.ndim() != 2 || probs.shape() != onehot.shape()) {
    throw ShapeError("weighted_ce: probs " + shape_str(probs.shape()) + " vs labels " +
                     shape_str(onehot.shape()));
  }
  const std::int64_t n = probs.dim(0), k = probs.dim(1);
  if (static_cast<std::int64_t>(weights.size()) != k) {
    throw ShapeError("weighted_ce: got " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(k) + " classes");
  }

  Tensor<T> wy({n, k});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < k; ++j) {
      wy.values()[i * k + j] =
          static_cast<T>(weights[static_cast<std::size_t>(j)]) * onehot.values()[i * k + j];
    }
  }

  Tensor<T> term = mul(wy, log_clamped(probs));
  if (form == CeForm::as_written) {
    Tensor<T> one_minus_y({n, k});
    for (std::int64_t i = 0; i < n * k; ++i) {
      one_minus_y.values()[i] = T(1) - onehot.values()[i];
    }
    Tensor<T> ones = Tensor<T>::full({n, k}, T(1));
    Tensor<T> complement = mul(one_minus_y, log_clamped(sub(ones, probs)));
    term = add(term, complement);
  }
  return scale(sum(term), -1.0 / static_cast<double>(n));
}

// Mean squared error between the generated and the predicted upscale.
template <typename T>
Tensor<T> sr_loss(const Tensor<T>& target, const Tensor<T>& predicted) {
  if (target.shape() != predicted.shape()) {
    throw ShapeError("sr_loss: target " + shape_str(target.shape()) + " vs prediction " +
                     shape_str(predicted.shape()));
  }
  Tensor<T> diff = sub(predicted, target);
  return scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(target.numel()));
}

template <typename T>
Tensor<T> final_loss(const Tensor<T>& l_wce, const Tensor<T>& l_sr, const LossConfig& cfg) {
  cfg.validate();
  if (!std::isfinite(static_cast<double>(l_wce.item())) ||
      !std::isfinite(static_cast<double>(l_sr.item()))) {
    throw NumericError("final_loss: non-finite component");
  }
  return add(scale(l_wce, cfg.alpha), scale(l_sr, cfg.beta));
}

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double loss_wce = 0.0;
  double loss_sr = 0.0;
  double loss_final = 0.0;
  std::int64_t samples = 0;
};

namespace detail {

// The upscale target follows the augmented image. Interpolated targets are
// recomputed from the augmented pixels; file-based targets can only mirror
// the flips, so scale jitter is pinned to 1 for that method.
inline AugmentConfig effective_augment(const TrainConfig& cfg) {
  AugmentConfig out = cfg.augment;
  if (cfg.sr_method == SrMethod::file) {
    out.scale_lo = 1.0;
    out.scale_hi = 1.0;
  }
  return out;
}

inline Image training_sr_target(const DataItem& item, const Image& augmented,
                                const AugmentOps& ops, SrMethod method, int factor) {
  if (method == SrMethod::file) {
    if (!item.has_sr_target) {
      throw StateError("sr target: sample '" + item.sample_id + "' has no loaded target file");
    }
    Image t = item.sr_file_target;
    if (ops.hflip) t = hflip(t);
    if (ops.vflip) t = vflip(t);
    return t;
  }
  return sr_target(augmented, method, factor);
}

}  // namespace detail

// One seeded pass over the training partition: augment, build the upscale
// target from the augmented image, forward, combined loss, backward, SGD
// step at the scheduled learning rate.
template <typename T>
EpochStats train_epoch(ModelBundle<T>& bundle, const PipelineData& data, const LossConfig& loss_cfg,
                       const TrainConfig& train_cfg, int epoch) {
  loss_cfg.validate();
  train_cfg.validate();
  if (data.train_idx.empty()) throw ContractError("train_epoch: empty training partition");

  const auto weights = class_weights(data.train_class_counts, loss_cfg.weight_mode);
  const AugmentConfig aug_cfg = detail::effective_augment(train_cfg);
  OptimizerState opt{train_cfg.base_lr, train_cfg.step_size, train_cfg.gamma, epoch};
  auto params = bundle.trainable_parameters();

  std::vector<std::size_t> order = data.train_idx;
  Rng shuffle_rng(mix_seed(train_cfg.seed, 0x65706f6368ull, static_cast<std::uint64_t>(epoch)));
  shuffle_rng.shuffle(order.begin(), order.end());

  EpochStats stats;
  stats.epoch = epoch;
  stats.lr = lr_at_epoch(opt, epoch);
  const int k = bundle.config.n_classes;
  std::size_t batch_index = 0;
  for (std::size_t start = 0; start < order.size();
       start += static_cast<std::size_t>(train_cfg.batch_size), ++batch_index) {
    const std::size_t bs =
        std::min(static_cast<std::size_t>(train_cfg.batch_size), order.size() - start);
    try {
      std::vector<Image> augmented(bs);
      std::vector<Image> targets(bs);
      std::vector<const Image*> image_ptrs(bs);
      std::vector<const Image*> target_ptrs(bs);
      std::vector<const EncodedMeta*> metas(bs);
      std::vector<int> labels(bs);
      for (std::size_t i = 0; i < bs; ++i) {
        const std::size_t item_idx = order[start + i];
        const DataItem& item = data.items[item_idx];
        Rng sample_rng(mix_seed(train_cfg.seed, static_cast<std::uint64_t>(epoch),
                                static_cast<std::uint64_t>(item_idx)));
        AugmentOps ops;
        augmented[i] = augment(item.image, aug_cfg, sample_rng, &ops);
        targets[i] = detail::training_sr_target(item, augmented[i], ops, train_cfg.sr_method,
                                                bundle.config.sr_factor);
        image_ptrs[i] = &augmented[i];
        target_ptrs[i] = &targets[i];
        metas[i] = &item.meta;
        labels[i] = item.label;
      }
      Tensor<T> x = image_batch<T>(image_ptrs);
      Tensor<T> m = bundle.config.image_only ? Tensor<T>() : meta_batch<T>(metas);
      Tensor<T> y = onehot_batch<T>(labels, k);
      Tensor<T> sr_t = image_batch<T>(target_ptrs);

      auto out = forward(bundle, x, m);
      Tensor<T> probs = softmax(out.logits);
      Tensor<T> l_wce = weighted_ce(probs, y, weights, loss_cfg.ce_form);
      Tensor<T> l_sr = sr_loss(sr_t, out.sr_pred);
      Tensor<T> l_final = final_loss(l_wce, l_sr, loss_cfg);

      stats.loss_wce += static_cast<double>(l_wce.item()) * static_cast<double>(bs);
      stats.loss_sr += static_cast<double>(l_sr.item()) * static_cast<double>(bs);
      stats.loss_final += static_cast<double>(l_final.item()) * static_cast<double>(bs);
      stats.samples += static_cast<std::int64_t>(bs);

      backward(l_final);
      sgd_step(params, opt);
    } catch (const NumericError& e) {
      Tape<T>::get().clear();
      throw NumericError("epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(batch_index) + ": " + e.what());
    }
  }
  stats.loss_wce /= static_cast<double>(stats.samples);
  stats.loss_sr /= static_cast<double>(stats.samples);
  stats.loss_final /= static_cast<double>(stats.samples);
  return stats;
}

template <typename T>
struct FitHooks {
  // called after every epoch with the history row and the live model
  std::function<void(int, const nlohmann::json&, const ModelBundle<T>&)> on_epoch;
};

template <typename T>
struct FitResult {
  ModelBundle<T> best;
  int best_epoch = -1;
  double best_val_bacc = -1.0;
  std::vector<nlohmann::json> history;
};

// Runs the configured number of epochs and keeps the checkpoint with the
// best validation balanced accuracy.
template <typename T>
FitResult<T> fit(ModelBundle<T>& bundle, const PipelineData& data, const LossConfig& loss_cfg,
                 const TrainConfig& train_cfg, const FitHooks<T>* hooks = nullptr) {
  loss_cfg.validate();
  train_cfg.validate();
  if (data.train_idx.empty() || data.val_idx.empty()) {
    throw ContractError("fit: train and val partitions must both be non-empty");
  }
  FitResult<T> result;
  result.best = bundle.clone();
  for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    EpochStats stats = train_epoch(bundle, data, loss_cfg, train_cfg, epoch);
    auto [val_bacc, val_acc] = validate_metrics(bundle, data, data.val_idx, train_cfg.batch_size);
    nlohmann::json row{{"epoch", epoch},          {"lr", stats.lr},
                       {"loss_wce", stats.loss_wce}, {"loss_sr", stats.loss_sr},
                       {"loss_final", stats.loss_final}, {"val_bacc", val_bacc},
                       {"val_acc", val_acc}};
    result.history.push_back(row);
    if (val_bacc > result.best_val_bacc) {
      result.best_val_bacc = val_bacc;
      result.best_epoch = epoch;
      result.best = bundle.clone();
    }
    if (hooks && hooks->on_epoch) hooks->on_epoch(epoch, row, bundle);
  }
  return result;
}

}  // namespace dermfuse
