#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "xattnres/backbone.hpp"
#include "xattnres/data.hpp"
#include "xattnres/metrics.hpp"
#include "xattnres/tensor.hpp"

namespace xattnres {

struct LossWeights {
  double ce_weight = 0.3;
  double dice_weight = 0.7;
  double dice_smooth = 1.0;

  void validate() const;
};

/// Mean per-pixel cross-entropy of softmaxed logits [B,K,H,W] against labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const LabelMap& targets);

/// 1 - mean over classes of (2 sum(p g) + s) / (sum p + sum g + s), with
/// soft probabilities p = softmax(logits) and one-hot targets g, pooled over
/// the batch. Background is included.
template <typename T>
Tensor<T> soft_dice_loss(const Tensor<T>& logits, const LabelMap& targets, T smooth);

/// ce_weight * CE + dice_weight * DiceLoss.
template <typename T>
Tensor<T> combined_loss(const Tensor<T>& logits, const LabelMap& targets, const LossWeights& weights);

struct OptimizerSettings {
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// AdamW with decoupled weight decay:
/// p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, OptimizerSettings settings);

  /// Requires every registered parameter to carry a grad buffer. Grads are
  /// left untouched.
  void step();
  void zero_grad();

  const OptimizerSettings& settings() const { return settings_; }
  std::uint64_t step_count() const { return step_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  /// Restores state saved by a checkpoint; sizes must match.
  void restore(std::uint64_t step, std::vector<std::vector<T>> m, std::vector<std::vector<T>> v);

 private:
  std::vector<Tensor<T>> params_;
  OptimizerSettings settings_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
};

/// A lossless geometric transform: quarter turns (clockwise) followed by
/// optional horizontal and vertical flips.
struct AugmentTransform {
  int quarter_turns = 0;
  bool flip_horizontal = false;
  bool flip_vertical = false;
};

AugmentTransform sample_transform(std::mt19937_64& rng, bool allow_quarter_turns);
Image apply_transform(const Image& image, const AugmentTransform& t);
LabelMap apply_transform(const LabelMap& mask, const AugmentTransform& t);
/// Applies one random transform to both the image and its mask.
Sample augment(const Sample& sample, std::mt19937_64& rng);

struct TrainingSettings {
  int epochs = 30;
  int batch_size = 4;
  OptimizerSettings optimizer;
  LossWeights loss;
  bool augment = true;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_dice = 0.0;  // foreground mean
  double val_dice_all_classes = 0.0;
};

template <typename T>
struct TrainResult {
  Backbone<T> model;
  std::vector<EpochRecord> history;
  int best_epoch = 0;  // 0 = initial parameters
  double best_val_dice = 0.0;
};

/// Builds [B,C,H,W] images and [B,H,W] labels from dataset samples.
template <typename T>
std::pair<Tensor<T>, LabelMap> make_batch(const Dataset& dataset, std::span<const std::size_t> indices);
template <typename T>
std::pair<Tensor<T>, LabelMap> make_batch(std::span<const Sample> samples);

/// Channel argmax of logits [B,K,H,W]; ties resolve to the lower class.
template <typename T>
LabelMap argmax_labels(const Tensor<T>& logits);

template <typename T>
MetricsReport evaluate(const Backbone<T>& model, const Dataset& dataset, std::span<const std::size_t> indices,
                       int batch_size = 8);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains on the train split, tracks validation foreground Dice each epoch
/// and returns the model holding the best-Dice parameters (earliest epoch
/// on ties).
template <typename T>
TrainResult<T> train(const BackboneConfig& config, const TrainingSettings& settings, const Dataset& dataset,
                     const EpochCallback& on_epoch = {});

/// Parameter values as plain buffers, in named_parameters() order.
template <typename T>
std::vector<std::vector<T>> snapshot_parameters(const Backbone<T>& model);
template <typename T>
void restore_parameters(Backbone<T>& model, const std::vector<std::vector<T>>& values);

}  // namespace xattnres
