#include "xattnres/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "xattnres/ops.hpp"

namespace xattnres {

void LossWeights::validate() const {
  if (ce_weight < 0.0 || dice_weight < 0.0) throw ConfigError("loss weights must be non-negative");
  if (dice_smooth < 0.0) throw ConfigError("dice smoothing must be non-negative");
}

void TrainingSettings::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (optimizer.learning_rate < 0.0 || optimizer.weight_decay < 0.0) {
    throw ConfigError("learning rate and weight decay must be non-negative");
  }
  if (optimizer.beta1 < 0.0 || optimizer.beta1 >= 1.0 || optimizer.beta2 < 0.0 || optimizer.beta2 >= 1.0) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  loss.validate();
}

namespace {

template <typename T>
void check_targets(const Tensor<T>& logits, const LabelMap& targets, const char* op) {
  require_feature_map(logits, op);
  if (logits.dim(0) != targets.batch || logits.dim(2) != targets.height || logits.dim(3) != targets.width) {
    throw ShapeError(std::string(op) + ": logits " + shape_to_string(logits.shape()) + " do not match labels " +
                     std::to_string(targets.batch) + "x" + std::to_string(targets.height) + "x" +
                     std::to_string(targets.width));
  }
  const auto classes = logits.dim(1);
  for (auto v : targets.labels) {
    if (v >= classes) {
      throw DataError(std::string(op) + ": label " + std::to_string(v) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

// Soft Dice on probabilities [B,K,H,W].
template <typename T>
Tensor<T> dice_from_probabilities(const Tensor<T>& probs, const LabelMap& targets, T smooth) {
  const std::size_t B = probs.dim(0), K = probs.dim(1), plane = probs.dim(2) * probs.dim(3);
  std::vector<double> inter(K, 0.0), psum(K, 0.0), gsum(K, 0.0);
  const auto p = probs.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < K; ++c) {
      const T* pc = p.data() + (b * K + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const bool g = targets.labels[b * plane + i] == c;
        psum[c] += pc[i];
        if (g) {
          inter[c] += pc[i];
          gsum[c] += 1.0;
        }
      }
    }
  }
  double score = 0.0;
  for (std::size_t c = 0; c < K; ++c) score += (2.0 * inter[c] + smooth) / (psum[c] + gsum[c] + smooth);
  const double loss = 1.0 - score / static_cast<double>(K);
  std::vector<std::uint8_t> labels = targets.labels;
  return detail::make_result<T>(
      {1}, {static_cast<T>(loss)}, "soft_dice", {probs},
      [B, K, plane, smooth, inter = std::move(inter), psum = std::move(psum), gsum = std::move(gsum),
       labels = std::move(labels)](detail::Node<T>& self) {
        auto g = self.inputs[0]->grad_buffer();
        const double up = self.grad[0];
        for (std::size_t c = 0; c < K; ++c) {
          const double num = 2.0 * inter[c] + smooth;
          const double den = psum[c] + gsum[c] + smooth;
          const double on = -up * (2.0 * den - num) / (den * den) / static_cast<double>(K);
          const double off = -up * (-num) / (den * den) / static_cast<double>(K);
          for (std::size_t b = 0; b < B; ++b) {
            T* gc = g.data() + (b * K + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) gc[i] += static_cast<T>(labels[b * plane + i] == c ? on : off);
          }
        }
      });
}

template <typename V>
std::vector<V> transform_plane(std::span<const V> src, std::size_t h, std::size_t w, const AugmentTransform& t,
                               std::size_t& out_h, std::size_t& out_w) {
  std::vector<V> cur(src.begin(), src.end());
  std::size_t ch = h, cw = w;
  const int turns = ((t.quarter_turns % 4) + 4) % 4;
  for (int k = 0; k < turns; ++k) {
    // Clockwise: out(y, x) = in(H - 1 - x, y), out is W x H.
    std::vector<V> next(cur.size());
    for (std::size_t y = 0; y < cw; ++y)
      for (std::size_t x = 0; x < ch; ++x) next[y * ch + x] = cur[(ch - 1 - x) * cw + y];
    cur.swap(next);
    std::swap(ch, cw);
  }
  if (t.flip_horizontal) {
    for (std::size_t y = 0; y < ch; ++y) std::reverse(cur.begin() + static_cast<std::ptrdiff_t>(y * cw),
                                                      cur.begin() + static_cast<std::ptrdiff_t>((y + 1) * cw));
  }
  if (t.flip_vertical) {
    for (std::size_t y = 0; y < ch / 2; ++y) {
      std::swap_ranges(cur.begin() + static_cast<std::ptrdiff_t>(y * cw),
                       cur.begin() + static_cast<std::ptrdiff_t>((y + 1) * cw),
                       cur.begin() + static_cast<std::ptrdiff_t>((ch - 1 - y) * cw));
    }
  }
  out_h = ch;
  out_w = cw;
  return cur;
}

// Training allocates and frees many large activation buffers per step. Keeping
// them on the heap instead of fresh mmap regions avoids repeated page faults.
void keep_large_buffers_on_heap() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
  }();
  (void)once;
#endif
}

}  // namespace

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const LabelMap& targets) {
  check_targets(logits, targets, "cross_entropy");
  const std::size_t B = logits.dim(0), K = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  const auto z = logits.data();
  std::vector<T> probs(z.size());
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < plane; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < K; ++c) mx = std::max(mx, double(z[(b * K + c) * plane + i]));
      double s = 0.0;
      for (std::size_t c = 0; c < K; ++c) s += std::exp(double(z[(b * K + c) * plane + i]) - mx);
      const double lse = mx + std::log(s);
      for (std::size_t c = 0; c < K; ++c) {
        probs[(b * K + c) * plane + i] = static_cast<T>(std::exp(double(z[(b * K + c) * plane + i]) - lse));
      }
      total += lse - double(z[(b * K + targets.labels[b * plane + i]) * plane + i]);
    }
  }
  const double n = static_cast<double>(B * plane);
  std::vector<std::uint8_t> labels = targets.labels;
  return detail::make_result<T>(
      {1}, {static_cast<T>(total / n)}, "cross_entropy", {logits},
      [B, K, plane, n, probs = std::move(probs), labels = std::move(labels)](detail::Node<T>& self) {
        auto g = self.inputs[0]->grad_buffer();
        const T scale_factor = static_cast<T>(double(self.grad[0]) / n);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t c = 0; c < K; ++c) {
            const std::size_t off = (b * K + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              const T onehot = labels[b * plane + i] == c ? T(1) : T(0);
              g[off + i] += scale_factor * (probs[off + i] - onehot);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> soft_dice_loss(const Tensor<T>& logits, const LabelMap& targets, T smooth) {
  check_targets(logits, targets, "soft_dice_loss");
  return dice_from_probabilities(softmax_axis(logits, 1), targets, smooth);
}

template <typename T>
Tensor<T> combined_loss(const Tensor<T>& logits, const LabelMap& targets, const LossWeights& weights) {
  weights.validate();
  auto ce = cross_entropy(logits, targets);
  auto dl = soft_dice_loss(logits, targets, static_cast<T>(weights.dice_smooth));
  return add(scale(ce, static_cast<T>(weights.ce_weight)), scale(dl, static_cast<T>(weights.dice_weight)));
}

template <typename T>
AdamW<T>::AdamW(std::vector<Tensor<T>> params, OptimizerSettings settings)
    : params_(std::move(params)), settings_(settings) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), T(0));
    v_.emplace_back(p.numel(), T(0));
  }
}

template <typename T>
void AdamW<T>::step() {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (!params_[k].has_grad()) {
      throw ContractError("AdamW: parameter " + std::to_string(k) + " has no gradient (call zero_grad first)");
    }
  }
  ++step_;
  const double lr = settings_.learning_rate, wd = settings_.weight_decay;
  const double b1 = settings_.beta1, b2 = settings_.beta2, eps = settings_.epsilon;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto p = params_[k].mutable_data();
    const auto g = params_[k].grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = b1 * double(m[i]) + (1.0 - b1) * gi;
      const double vi = b2 * double(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = lr * (mi / c1) / (std::sqrt(vi / c2) + eps) + lr * wd * double(p[i]);
      p[i] = static_cast<T>(double(p[i]) - update);
    }
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) {
    auto g = p.mutable_grad();
    std::fill(g.begin(), g.end(), T(0));
  }
}

template <typename T>
void AdamW<T>::restore(std::uint64_t step, std::vector<std::vector<T>> m, std::vector<std::vector<T>> v) {
  if (m.size() != params_.size() || v.size() != params_.size()) throw ShapeError("optimizer state size mismatch");
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (m[k].size() != params_[k].numel() || v[k].size() != params_[k].numel()) {
      throw ShapeError("optimizer moment size mismatch for parameter " + std::to_string(k));
    }
  }
  step_ = step;
  m_ = std::move(m);
  v_ = std::move(v);
}

AugmentTransform sample_transform(std::mt19937_64& rng, bool allow_quarter_turns) {
  AugmentTransform t;
  const auto bits = rng();
  t.quarter_turns = allow_quarter_turns ? static_cast<int>(bits & 3u) : static_cast<int>(bits & 2u);
  t.flip_horizontal = (bits >> 2) & 1u;
  t.flip_vertical = (bits >> 3) & 1u;
  return t;
}

Image apply_transform(const Image& image, const AugmentTransform& t) {
  Image out;
  out.channels = image.channels;
  const std::size_t plane = image.height * image.width;
  for (std::size_t c = 0; c < image.channels; ++c) {
    std::span<const float> src(image.pixels.data() + c * plane, plane);
    auto p = transform_plane(src, image.height, image.width, t, out.height, out.width);
    out.pixels.insert(out.pixels.end(), p.begin(), p.end());
  }
  return out;
}

LabelMap apply_transform(const LabelMap& mask, const AugmentTransform& t) {
  LabelMap out;
  out.batch = mask.batch;
  out.labels.clear();
  const std::size_t plane = mask.height * mask.width;
  for (std::size_t b = 0; b < mask.batch; ++b) {
    std::span<const std::uint8_t> src(mask.labels.data() + b * plane, plane);
    auto p = transform_plane(src, mask.height, mask.width, t, out.height, out.width);
    out.labels.insert(out.labels.end(), p.begin(), p.end());
  }
  return out;
}

Sample augment(const Sample& sample, std::mt19937_64& rng) {
  const auto t = sample_transform(rng, sample.image.height == sample.image.width);
  return {apply_transform(sample.image, t), apply_transform(sample.mask, t)};
}

template <typename T>
std::pair<Tensor<T>, LabelMap> make_batch(std::span<const Sample> samples) {
  if (samples.empty()) throw ShapeError("empty batch");
  const auto& first = samples.front().image;
  const std::size_t plane = first.height * first.width;
  std::vector<T> pixels;
  pixels.reserve(samples.size() * first.channels * plane);
  LabelMap labels(samples.size(), first.height, first.width);
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const auto& s = samples[b];
    if (s.image.channels != first.channels || s.image.height != first.height || s.image.width != first.width) {
      throw ShapeError("batch samples differ in shape");
    }
    for (float v : s.image.pixels) pixels.push_back(static_cast<T>(v));
    std::copy(s.mask.labels.begin(), s.mask.labels.end(), labels.labels.begin() + static_cast<std::ptrdiff_t>(b * plane));
  }
  auto images = Tensor<T>::from_data({samples.size(), first.channels, first.height, first.width}, std::move(pixels));
  return {std::move(images), std::move(labels)};
}

template <typename T>
std::pair<Tensor<T>, LabelMap> make_batch(const Dataset& dataset, std::span<const std::size_t> indices) {
  std::vector<Sample> samples;
  samples.reserve(indices.size());
  for (auto i : indices) samples.push_back(dataset.samples.at(i));
  return make_batch<T>(std::span<const Sample>(samples));
}

template <typename T>
LabelMap argmax_labels(const Tensor<T>& logits) {
  require_feature_map(logits, "argmax_labels");
  const std::size_t B = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  LabelMap out(B, H, W);
  const auto z = logits.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < H * W; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < K; ++c) {
        if (z[(b * K + c) * H * W + i] > z[(b * K + best) * H * W + i]) best = c;
      }
      out.labels[b * H * W + i] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

template <typename T>
MetricsReport evaluate(const Backbone<T>& model, const Dataset& dataset, std::span<const std::size_t> indices,
                       int batch_size) {
  NoGradGuard no_grad;
  MetricsAccumulator acc(dataset.num_classes);
  const auto step = static_cast<std::size_t>(std::max(1, batch_size));
  for (std::size_t start = 0; start < indices.size(); start += step) {
    const auto chunk = indices.subspan(start, std::min(step, indices.size() - start));
    auto [images, labels] = make_batch<T>(dataset, chunk);
    const auto out = model.forward(images);
    acc.add(argmax_labels(out.logits), labels);
  }
  return acc.finish();
}

template <typename T>
std::vector<std::vector<T>> snapshot_parameters(const Backbone<T>& model) {
  std::vector<std::vector<T>> out;
  for (const auto& [name, t] : model.named_parameters()) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

template <typename T>
void restore_parameters(Backbone<T>& model, const std::vector<std::vector<T>>& values) {
  auto params = model.named_parameters();
  if (params.size() != values.size()) throw ShapeError("parameter snapshot has the wrong number of tensors");
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto dst = params[k].second.mutable_data();
    if (dst.size() != values[k].size()) throw ShapeError("parameter snapshot size mismatch for " + params[k].first);
    std::copy(values[k].begin(), values[k].end(), dst.begin());
  }
}

template <typename T>
TrainResult<T> train(const BackboneConfig& config, const TrainingSettings& settings, const Dataset& dataset,
                     const EpochCallback& on_epoch) {
  settings.validate();
  if (dataset.splits.train.empty()) throw ConfigError("training split is empty");
  if (dataset.splits.val.empty()) throw ConfigError("validation split is empty");
  if (config.num_classes != dataset.num_classes) {
    throw ConfigError("model has " + std::to_string(config.num_classes) + " classes, dataset has " +
                      std::to_string(dataset.num_classes));
  }
  keep_large_buffers_on_heap();
  TrainResult<T> result{Backbone<T>(config), {}, 0, 0.0};
  auto& model = result.model;
  AdamW<T> optimizer(model.parameters(), settings.optimizer);
  optimizer.zero_grad();
  std::mt19937_64 rng(settings.seed);
  std::vector<std::vector<T>> best;
  double best_dice = -1.0;

  std::vector<std::size_t> order = dataset.splits.train;
  const auto batch = static_cast<std::size_t>(settings.batch_size);
  for (int epoch = 1; epoch <= settings.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      std::vector<Sample> samples;
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = dataset.samples[order[i]];
        samples.push_back(settings.augment ? augment(s, rng) : s);
      }
      auto [images, labels] = make_batch<T>(std::span<const Sample>(samples));
      const auto out = model.forward(images);
      const auto loss = combined_loss(out.logits, labels, settings.loss);
      loss_total += static_cast<double>(loss.item());
      ++batches;
      backward(loss);
      optimizer.step();
      optimizer.zero_grad();
    }
    const auto report = evaluate(model, dataset, dataset.splits.val);
    EpochRecord rec{epoch, loss_total / static_cast<double>(batches), report.mean_dice, report.mean_dice_all_classes};
    result.history.push_back(rec);
    if (rec.val_dice > best_dice) {
      best_dice = rec.val_dice;
      result.best_epoch = epoch;
      best = snapshot_parameters(model);
    }
    if (on_epoch) on_epoch(rec);
  }
  if (!best.empty()) {
    restore_parameters(model, best);
    result.best_val_dice = best_dice;
  }
  model.zero_grad();
  return result;
}

#define XATTNRES_INSTANTIATE_TRAINING(T)                                                                       \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, const LabelMap&);                                       \
  template Tensor<T> soft_dice_loss<T>(const Tensor<T>&, const LabelMap&, T);                                   \
  template Tensor<T> combined_loss<T>(const Tensor<T>&, const LabelMap&, const LossWeights&);                   \
  template class AdamW<T>;                                                                                      \
  template std::pair<Tensor<T>, LabelMap> make_batch<T>(const Dataset&, std::span<const std::size_t>);          \
  template std::pair<Tensor<T>, LabelMap> make_batch<T>(std::span<const Sample>);                               \
  template LabelMap argmax_labels<T>(const Tensor<T>&);                                                         \
  template MetricsReport evaluate<T>(const Backbone<T>&, const Dataset&, std::span<const std::size_t>, int);    \
  template TrainResult<T> train<T>(const BackboneConfig&, const TrainingSettings&, const Dataset&,              \
                                   const EpochCallback&);                                                       \
  template std::vector<std::vector<T>> snapshot_parameters<T>(const Backbone<T>&);                              \
  template void restore_parameters<T>(Backbone<T>&, const std::vector<std::vector<T>>&);

XATTNRES_INSTANTIATE_TRAINING(float)
XATTNRES_INSTANTIATE_TRAINING(double)

}  // namespace xattnres
