#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xattnres/attention.hpp"
#include "xattnres/tensor.hpp"

namespace xattnres {

/// How information travels from the encoder to the decoder.
enum class Routing {
  SkipOnly,  // plain U-Net concatenation skips
  NoSkip,    // skips removed, nothing added
  Replace,   // skips removed, XAttnRes routing only
  Both,      // skips kept, XAttnRes routing added
};

/// Which stages receive a routing site (only meaningful for Replace/Both).
enum class Position { None, EncoderOnly, DecoderOnly, Full };

/// Pseudo-query initialization.
enum class InitScheme { ZeroInit, RandomNormal, KaimingUniform, XavierUniform };

/// Dataflow order of the Both routing at decoder stages.
enum class BothOrder { AttendThenConcat, ConcatThenAttend };

std::string to_string(Routing r);
std::string to_string(Position p);
std::string to_string(InitScheme s);
std::string to_string(BothOrder o);
Routing parse_routing(std::string_view text);
Position parse_position(std::string_view text);
InitScheme parse_init_scheme(std::string_view text);
BothOrder parse_both_order(std::string_view text);

struct BackboneConfig {
  int stages = 3;
  int base_channels = 8;
  int in_channels = 1;
  int num_classes = 4;
  Routing routing = Routing::SkipOnly;
  Position position = Position::Full;
  InitScheme init_scheme = InitScheme::ZeroInit;
  BothOrder both_order = BothOrder::AttendThenConcat;
  std::uint64_t seed = 0;

  /// Throws ConfigError for S < 2 or non-positive widths.
  void validate() const;
  /// Output channels of encoder stage `stage` (1-based): base * 2^(stage-1).
  std::size_t stage_channels(int stage) const;
  bool uses_skip() const { return routing == Routing::SkipOnly || routing == Routing::Both; }
  bool has_encoder_sites() const;
  bool has_decoder_sites() const;
};

/// Closed-form XAttnRes parameter overhead of a configuration:
/// sum over sites of C + C + sum over channel-mismatched sources of C * C_src.
std::size_t closed_form_overhead(const BackboneConfig& config);

struct ParameterCount {
  std::size_t total = 0;
  std::size_t xattnres_overhead = 0;
};

template <typename T>
struct ConvLayer {
  Tensor<T> weight;
  Tensor<T> bias;
};

/// Two same-padded 3x3 convolutions, each followed by a rectifier.
template <typename T>
struct StageBlock {
  ConvLayer<T> first;
  ConvLayer<T> second;

  Tensor<T> forward(const Tensor<T>& x) const;
};

struct ForwardOptions {
  bool per_sample_trace = false;
  /// Treat every routing site as the empty-pool identity.
  bool bypass_attention = false;
};

template <typename T>
struct ForwardArtifacts {
  Tensor<T> logits;
  std::vector<AttentionTrace> traces;
  /// Pool contents seen by each executed site, in execution order.
  std::vector<std::vector<StageTag>> pool_at_site;
};

template <typename T>
class Backbone {
 public:
  explicit Backbone(BackboneConfig config);

  const BackboneConfig& config() const { return config_; }

  /// images: [B, in_channels, H, W] with H and W divisible by 2^(S-1).
  ForwardArtifacts<T> forward(const Tensor<T>& images, const ForwardOptions& options = {}) const;

  /// Every learnable tensor with a stable, unique name.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;
  std::vector<Tensor<T>> parameters() const;
  ParameterCount parameter_count() const;
  void zero_grad();

  std::size_t unit_count() const;
  /// Units in execution order (encoder sites first).
  std::vector<const XAttnResUnit<T>*> units() const;
  std::vector<XAttnResUnit<T>*> units();

 private:
  void initialize();

  BackboneConfig config_;
  std::vector<StageBlock<T>> encoders_;  // S blocks; the last one is the bottleneck
  std::vector<StageBlock<T>> decoders_;  // S-1 blocks in production order
  ConvLayer<T> head_;
  std::vector<std::optional<XAttnResUnit<T>>> encoder_units_;
  std::vector<std::optional<XAttnResUnit<T>>> decoder_units_;
};

extern template class Backbone<float>;
extern template class Backbone<double>;

}  // namespace xattnres
