#include "xattnres/backbone.hpp"

#include <cmath>
#include <random>

#include "xattnres/ops.hpp"

namespace xattnres {

namespace {

template <typename E>
struct EnumName {
  E value;
  const char* name;
};

constexpr EnumName<Routing> kRoutingNames[] = {
    {Routing::SkipOnly, "skip-only"}, {Routing::NoSkip, "no-skip"}, {Routing::Replace, "replace"}, {Routing::Both, "both"}};
constexpr EnumName<Position> kPositionNames[] = {{Position::None, "none"},
                                                 {Position::EncoderOnly, "encoder-only"},
                                                 {Position::DecoderOnly, "decoder-only"},
                                                 {Position::Full, "full"}};
constexpr EnumName<InitScheme> kInitNames[] = {{InitScheme::ZeroInit, "zero"},
                                               {InitScheme::RandomNormal, "random-normal"},
                                               {InitScheme::KaimingUniform, "kaiming-uniform"},
                                               {InitScheme::XavierUniform, "xavier-uniform"}};
constexpr EnumName<BothOrder> kBothOrderNames[] = {{BothOrder::AttendThenConcat, "attend-then-concat"},
                                                   {BothOrder::ConcatThenAttend, "concat-then-attend"}};

template <typename E, std::size_t N>
std::string name_of(const EnumName<E> (&table)[N], E value) {
  for (const auto& e : table) {
    if (e.value == value) return e.name;
  }
  return "unknown";
}

template <typename E, std::size_t N>
E parse_enum(const EnumName<E> (&table)[N], std::string_view text, const char* what) {
  for (const auto& e : table) {
    if (text == e.name) return e.value;
  }
  std::string options;
  for (const auto& e : table) options += std::string(options.empty() ? "" : ", ") + e.name;
  throw ConfigError("unknown " + std::string(what) + " '" + std::string(text) + "' (expected one of: " + options + ")");
}

// Separate streams keep the convolution weights independent of how many
// routing units a configuration has.
constexpr std::uint64_t kUnitStreamSalt = 0x9E3779B97F4A7C15ULL;

}  // namespace

std::string to_string(Routing r) { return name_of(kRoutingNames, r); }
std::string to_string(Position p) { return name_of(kPositionNames, p); }
std::string to_string(InitScheme s) { return name_of(kInitNames, s); }
std::string to_string(BothOrder o) { return name_of(kBothOrderNames, o); }
Routing parse_routing(std::string_view text) { return parse_enum(kRoutingNames, text, "routing"); }
Position parse_position(std::string_view text) { return parse_enum(kPositionNames, text, "position"); }
InitScheme parse_init_scheme(std::string_view text) { return parse_enum(kInitNames, text, "init scheme"); }
BothOrder parse_both_order(std::string_view text) { return parse_enum(kBothOrderNames, text, "both order"); }

void BackboneConfig::validate() const {
  if (stages < 2) throw ConfigError("stages must be >= 2, got " + std::to_string(stages));
  if (base_channels < 1) throw ConfigError("base_channels must be >= 1, got " + std::to_string(base_channels));
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1, got " + std::to_string(in_channels));
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1, got " + std::to_string(num_classes));
  if (stages > 12) throw ConfigError("stages must be <= 12, got " + std::to_string(stages));
}

std::size_t BackboneConfig::stage_channels(int stage) const {
  return static_cast<std::size_t>(base_channels) << (stage - 1);
}

bool BackboneConfig::has_encoder_sites() const {
  return (routing == Routing::Replace || routing == Routing::Both) &&
         (position == Position::EncoderOnly || position == Position::Full);
}

bool BackboneConfig::has_decoder_sites() const {
  return (routing == Routing::Replace || routing == Routing::Both) &&
         (position == Position::DecoderOnly || position == Position::Full);
}

std::size_t closed_form_overhead(const BackboneConfig& cfg) {
  cfg.validate();
  const auto S = static_cast<std::size_t>(cfg.stages);
  const auto base = static_cast<std::size_t>(cfg.base_channels);
  auto width = [base](std::size_t stage) { return base * (std::size_t{1} << (stage - 1)); };
  std::size_t total = 0;
  auto site = [&total](std::size_t c, const std::vector<std::size_t>& sources) {
    total += 2 * c;
    for (auto cs : sources) {
      if (cs != c) total += c * cs;
    }
  };
  if (cfg.has_encoder_sites()) {
    for (std::size_t i = 1; i <= S; ++i) {
      const std::size_t c = i == 1 ? static_cast<std::size_t>(cfg.in_channels) : width(i - 1);
      std::vector<std::size_t> sources;
      for (std::size_t k = 1; k < i; ++k) sources.push_back(width(k));
      site(c, sources);
    }
  }
  if (cfg.has_decoder_sites()) {
    for (std::size_t d = 1; d < S; ++d) {
      const std::size_t stage = S - d;  // resolution level this decoder stage works at
      std::size_t c = width(stage + 1);
      if (cfg.routing == Routing::Both && cfg.both_order == BothOrder::ConcatThenAttend) c += width(stage);
      std::vector<std::size_t> sources;
      for (std::size_t k = 1; k <= S; ++k) sources.push_back(width(k));
      for (std::size_t k = 1; k < d; ++k) sources.push_back(width(S - k));
      site(c, sources);
    }
  }
  return total;
}

template <typename T>
Tensor<T> StageBlock<T>::forward(const Tensor<T>& x) const {
  auto h = relu(conv2d(x, first.weight, first.bias, Padding::Same));
  return relu(conv2d(h, second.weight, second.bias, Padding::Same));
}

template <typename T>
Backbone<T>::Backbone(BackboneConfig config) : config_(config) {
  config_.validate();
  const int S = config_.stages;

  auto conv = [](std::size_t in_c, std::size_t out_c, std::size_t k) {
    return ConvLayer<T>{Tensor<T>::zeros({out_c, in_c, k, k}, true), Tensor<T>::zeros({out_c}, true)};
  };
  auto block = [&](std::size_t in_c, std::size_t out_c) { return StageBlock<T>{conv(in_c, out_c, 3), conv(out_c, out_c, 3)}; };

  for (int i = 1; i <= S; ++i) {
    const std::size_t in_c = i == 1 ? static_cast<std::size_t>(config_.in_channels) : config_.stage_channels(i - 1);
    encoders_.push_back(block(in_c, config_.stage_channels(i)));
  }
  for (int d = 1; d < S; ++d) {
    const int stage = S - d;
    std::size_t in_c = config_.stage_channels(stage + 1);
    if (config_.uses_skip()) in_c += config_.stage_channels(stage);
    decoders_.push_back(block(in_c, config_.stage_channels(stage)));
  }
  head_ = conv(config_.stage_channels(1), static_cast<std::size_t>(config_.num_classes), 1);

  encoder_units_.resize(static_cast<std::size_t>(S));
  decoder_units_.resize(static_cast<std::size_t>(S - 1));
  if (config_.has_encoder_sites()) {
    for (int i = 1; i <= S; ++i) {
      const std::size_t c = i == 1 ? static_cast<std::size_t>(config_.in_channels) : config_.stage_channels(i - 1);
      std::vector<SourceSpec> sources;
      for (int k = 1; k < i; ++k) sources.push_back({{StageSide::Encoder, k}, config_.stage_channels(k)});
      encoder_units_[static_cast<std::size_t>(i - 1)].emplace("xattn.enc" + std::to_string(i), c, sources);
    }
  }
  if (config_.has_decoder_sites()) {
    for (int d = 1; d < S; ++d) {
      const int stage = S - d;
      std::size_t c = config_.stage_channels(stage + 1);
      if (config_.routing == Routing::Both && config_.both_order == BothOrder::ConcatThenAttend) {
        c += config_.stage_channels(stage);
      }
      std::vector<SourceSpec> sources;
      for (int k = 1; k <= S; ++k) sources.push_back({{StageSide::Encoder, k}, config_.stage_channels(k)});
      for (int k = 1; k < d; ++k) sources.push_back({{StageSide::Decoder, k}, config_.stage_channels(S - k)});
      decoder_units_[static_cast<std::size_t>(d - 1)].emplace("xattn.dec" + std::to_string(d), c, sources);
    }
  }
  initialize();
}

template <typename T>
void Backbone<T>::initialize() {
  std::mt19937_64 conv_rng(config_.seed);
  auto he_normal = [&conv_rng](Tensor<T>& w) {
    const double fan_in = static_cast<double>(w.dim(1) * w.dim(2) * w.dim(3));
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (auto& v : w.mutable_data()) v = static_cast<T>(dist(conv_rng));
  };
  for (auto& b : encoders_) {
    he_normal(b.first.weight);
    he_normal(b.second.weight);
  }
  for (auto& b : decoders_) {
    he_normal(b.first.weight);
    he_normal(b.second.weight);
  }
  he_normal(head_.weight);

  std::mt19937_64 unit_rng(config_.seed ^ kUnitStreamSalt);
  auto uniform_fill = [&unit_rng](Tensor<T>& t, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.mutable_data()) v = static_cast<T>(dist(unit_rng));
  };
  for (auto* unit : units()) {
    auto& q = unit->pseudo_query();
    const double c = static_cast<double>(unit->channels());
    // The pseudo-query is treated as a [C, 1] weight: fan_in = 1, fan_out = C.
    switch (config_.init_scheme) {
      case InitScheme::ZeroInit:
        std::fill(q.mutable_data().begin(), q.mutable_data().end(), T(0));
        break;
      case InitScheme::RandomNormal: {
        std::normal_distribution<double> dist(0.0, 0.02);
        for (auto& v : q.mutable_data()) v = static_cast<T>(dist(unit_rng));
        break;
      }
      case InitScheme::KaimingUniform:
        uniform_fill(q, std::sqrt(6.0 / 1.0));
        break;
      case InitScheme::XavierUniform:
        uniform_fill(q, std::sqrt(6.0 / (1.0 + c)));
        break;
    }
    for (auto& [tag, w] : unit->projections()) uniform_fill(w, std::sqrt(3.0 / static_cast<double>(w.dim(1))));
  }
}

template <typename T>
ForwardArtifacts<T> Backbone<T>::forward(const Tensor<T>& images, const ForwardOptions& options) const {
  require_feature_map(images, "backbone input");
  const int S = config_.stages;
  if (images.dim(1) != static_cast<std::size_t>(config_.in_channels)) {
    throw ShapeError("backbone expects " + std::to_string(config_.in_channels) + " input channels, got " +
                     shape_to_string(images.shape()));
  }
  const std::size_t factor = std::size_t{1} << (S - 1);
  if (images.dim(2) % factor != 0 || images.dim(3) % factor != 0) {
    throw ContractError("input size " + std::to_string(images.dim(2)) + "x" + std::to_string(images.dim(3)) +
                        " is not divisible by " + std::to_string(factor));
  }

  ForwardArtifacts<T> artifacts;
  HistoryPool<T> pool;
  auto route = [&](const std::optional<XAttnResUnit<T>>& unit, const Tensor<T>& x) {
    if (!unit || options.bypass_attention) return x;
    artifacts.pool_at_site.push_back(pool.tags());
    auto result = attend(pool, x, *unit, options.per_sample_trace);
    artifacts.traces.push_back(std::move(result.trace));
    return result.output;
  };

  std::vector<Tensor<T>> skips;
  Tensor<T> x = images;
  for (int i = 1; i <= S; ++i) {
    if (i > 1) x = adaptive_max_pool(x, x.dim(2) / 2, x.dim(3) / 2);
    x = route(encoder_units_[static_cast<std::size_t>(i - 1)], x);
    x = encoders_[static_cast<std::size_t>(i - 1)].forward(x);
    pool.append(x, {StageSide::Encoder, i});
    skips.push_back(x);
  }
  for (int d = 1; d < S; ++d) {
    const auto& skip = skips[static_cast<std::size_t>(S - d - 1)];
    x = bilinear_resize(x, skip.dim(2), skip.dim(3));
    const auto& unit = decoder_units_[static_cast<std::size_t>(d - 1)];
    if (config_.routing == Routing::Both && config_.both_order == BothOrder::ConcatThenAttend) {
      x = route(unit, concat_channels(x, skip));
    } else {
      x = route(unit, x);
      if (config_.uses_skip()) x = concat_channels(x, skip);
    }
    x = decoders_[static_cast<std::size_t>(d - 1)].forward(x);
    pool.append(x, {StageSide::Decoder, d});
  }
  artifacts.logits = conv2d(x, head_.weight, head_.bias, Padding::Same);
  return artifacts;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Backbone<T>::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  auto add_block = [&out](const std::string& prefix, const StageBlock<T>& b) {
    out.emplace_back(prefix + ".conv1.weight", b.first.weight);
    out.emplace_back(prefix + ".conv1.bias", b.first.bias);
    out.emplace_back(prefix + ".conv2.weight", b.second.weight);
    out.emplace_back(prefix + ".conv2.bias", b.second.bias);
  };
  for (std::size_t i = 0; i < encoders_.size(); ++i) add_block("enc" + std::to_string(i + 1), encoders_[i]);
  for (std::size_t d = 0; d < decoders_.size(); ++d) add_block("dec" + std::to_string(d + 1), decoders_[d]);
  out.emplace_back("head.weight", head_.weight);
  out.emplace_back("head.bias", head_.bias);
  for (const auto* unit : units()) {
    for (auto& p : unit->named_parameters()) out.push_back(std::move(p));
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> Backbone<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

template <typename T>
ParameterCount Backbone<T>::parameter_count() const {
  ParameterCount count;
  for (const auto& [name, t] : named_parameters()) count.total += t.numel();
  for (const auto* unit : units()) count.xattnres_overhead += unit->parameter_count();
  return count;
}

template <typename T>
void Backbone<T>::zero_grad() {
  for (auto& t : parameters()) t.zero_grad();
}

template <typename T>
std::size_t Backbone<T>::unit_count() const {
  return units().size();
}

template <typename T>
std::vector<const XAttnResUnit<T>*> Backbone<T>::units() const {
  std::vector<const XAttnResUnit<T>*> out;
  for (const auto& u : encoder_units_) {
    if (u) out.push_back(&*u);
  }
  for (const auto& u : decoder_units_) {
    if (u) out.push_back(&*u);
  }
  return out;
}

template <typename T>
std::vector<XAttnResUnit<T>*> Backbone<T>::units() {
  std::vector<XAttnResUnit<T>*> out;
  for (auto& u : encoder_units_) {
    if (u) out.push_back(&*u);
  }
  for (auto& u : decoder_units_) {
    if (u) out.push_back(&*u);
  }
  return out;
}

template struct StageBlock<float>;
template struct StageBlock<double>;
template class Backbone<float>;
template class Backbone<double>;

}  // namespace xattnres
