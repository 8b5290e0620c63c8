#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "xattnres/tensor.hpp"

namespace xattnres {

enum class StageSide { Encoder, Decoder, Current };

/// Identifies the stage that produced a feature map. Indices are 1-based in
/// production order on each side; `Current` marks the feature being routed.
struct StageTag {
  StageSide side = StageSide::Encoder;
  int index = 0;

  friend bool operator==(const StageTag&, const StageTag&) = default;
  friend auto operator<=>(const StageTag&, const StageTag&) = default;
};

std::string to_string(StageSide side);
std::string to_string(const StageTag& tag);

/// Ordered stage outputs of one forward pass.
template <typename T>
class HistoryPool {
 public:
  void clear();
  /// Throws ContractError if `tag` was already appended in this pass.
  void append(Tensor<T> feature, StageTag tag);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Tensor<T>>& entries() const { return entries_; }
  const std::vector<StageTag>& tags() const { return tags_; }

 private:
  std::vector<Tensor<T>> entries_;
  std::vector<StageTag> tags_;
};

/// A source the unit may read from: its tag and its channel count.
struct SourceSpec {
  StageTag tag;
  std::size_t channels = 0;
};

/// Learned parameters of one routing site: a pseudo-query, an RMSNorm gain,
/// and a bias-free 1x1 projection for each possible source whose channel
/// count differs from the site's. Sources with matching channels pass
/// through unprojected.
template <typename T>
class XAttnResUnit {
 public:
  XAttnResUnit(std::string site, std::size_t channels, const std::vector<SourceSpec>& sources,
               T rms_epsilon = T(1e-6));

  const std::string& site() const { return site_; }
  std::size_t channels() const { return channels_; }
  T rms_epsilon() const { return rms_epsilon_; }
  void set_rms_epsilon(T eps) { rms_epsilon_ = eps; }

  Tensor<T>& pseudo_query() { return pseudo_query_; }
  const Tensor<T>& pseudo_query() const { return pseudo_query_; }
  Tensor<T>& rms_gain() { return rms_gain_; }
  const Tensor<T>& rms_gain() const { return rms_gain_; }

  /// Projection weights [C, C_src, 1, 1] for `tag`, or nullptr when the
  /// source is channel-matched.
  const Tensor<T>* projection(const StageTag& tag) const;
  Tensor<T>* projection(const StageTag& tag);
  const std::map<StageTag, Tensor<T>>& projections() const { return projections_; }
  std::map<StageTag, Tensor<T>>& projections() { return projections_; }

  /// Named parameters in a stable order.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;
  std::size_t parameter_count() const;

 private:
  std::string site_;
  std::size_t channels_;
  T rms_epsilon_;
  Tensor<T> pseudo_query_;
  Tensor<T> rms_gain_;
  std::map<StageTag, Tensor<T>> projections_;
};

/// Per-position attention weights of one attend call.
struct AttentionTrace {
  std::string site;
  std::size_t entries = 0;  // K + 1
  std::size_t height = 0;
  std::size_t width = 0;
  /// Batch-averaged weights laid out [entries, height, width].
  std::vector<double> weights;
  /// Optional per-sample weights laid out [batch, entries, height, width].
  std::vector<double> per_sample;
  std::size_t batch = 0;
  /// Tag of each entry; the last one is the current feature.
  std::vector<StageTag> source_tags;

  double weight(std::size_t entry, std::size_t y, std::size_t x) const {
    return weights[(entry * height + y) * width + x];
  }
  /// Spatial mean of one entry's weights.
  double mean_weight(std::size_t entry) const;
  double min_weight(std::size_t entry) const;
  double max_weight(std::size_t entry) const;
  /// max - min of the per-entry mean weights; 0 for uniform routing.
  double uniformity_score() const;
};

template <typename T>
struct AttendResult {
  Tensor<T> output;
  AttentionTrace trace;
};

/// Resizes `h` to the target resolution (adaptive max pool along axes that
/// shrink, then bilinear along axes that grow) and projects to the unit's channel count if the
/// channel counts differ. Returns `h` itself when nothing needs to change.
template <typename T>
Tensor<T> align_feature(const Tensor<T>& h, const StageTag& tag, const XAttnResUnit<T>& unit, std::size_t target_h,
                        std::size_t target_w);

/// Routes `x` through pseudo-query attention over the aligned history.
/// Values are V = [align(h_1); ...; align(h_K); x]; keys are the
/// channel-RMS-normalized values; weights are a softmax over the K+1 entries
/// at every (batch, position); the output is the weighted sum of V.
template <typename T>
AttendResult<T> attend(const HistoryPool<T>& pool, const Tensor<T>& x, const XAttnResUnit<T>& unit,
                       bool per_sample_trace = false);

/// Reference implementation of attend written as plain scalar loops. Used
/// only for differential testing; records no graph.
template <typename T>
Tensor<T> naive_attend_oracle(const HistoryPool<T>& pool, const Tensor<T>& x, const XAttnResUnit<T>& unit);

/// CSV export of traces: site,source_side,source_index,mean_weight,min_weight,max_weight.
std::string traces_to_csv(const std::vector<AttentionTrace>& traces);
void write_traces_csv(const std::vector<AttentionTrace>& traces, const std::string& path);

}  // namespace xattnres
