#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xattnres/backbone.hpp"
#include "xattnres/training.hpp"

namespace xattnres {

/// Binary layout (little-endian):
///   "XARS" | u8 version | u8 scalar bytes | u16 reserved
///   u32 len | model config text
///   u32 count | count x (u32 name len | name | u32 rank | u64 dims[rank] | raw values)
///   u8 has_optimizer [| u64 step | count x (m values | v values)]
inline constexpr std::uint8_t kCheckpointVersion = 1;

template <typename T>
struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<std::vector<T>> first_moments;
  std::vector<std::vector<T>> second_moments;
};

template <typename T>
struct CheckpointContents {
  BackboneConfig config;
  std::vector<std::pair<std::string, std::vector<std::size_t>>> shapes;
  std::vector<std::vector<T>> values;
  std::optional<OptimizerState<T>> optimizer;
};

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const Backbone<T>& model, const AdamW<T>* optimizer = nullptr);

/// Parses and validates the whole buffer; throws DataError on any defect.
template <typename T>
CheckpointContents<T> decode_checkpoint(std::span<const std::uint8_t> bytes);

template <typename T>
void save_checkpoint(const Backbone<T>& model, const AdamW<T>* optimizer, const std::string& path);

/// Copies stored values into `model` (and `optimizer` if given and stored).
/// Nothing is modified unless every name and shape matches.
template <typename T>
void restore_checkpoint(const CheckpointContents<T>& contents, Backbone<T>& model, AdamW<T>* optimizer = nullptr);

/// Rebuilds the model from the echoed configuration and restores it.
template <typename T>
Backbone<T> load_checkpoint(const std::string& path, std::optional<OptimizerState<T>>* optimizer = nullptr);

}  // namespace xattnres
