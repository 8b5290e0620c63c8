#include "xattnres/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "xattnres/config.hpp"
#include "xattnres/data.hpp"
#include "xattnres/errors.hpp"

namespace xattnres {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'X', 'A', 'R', 'S'};

class Writer {
 public:
  template <typename V>
  void put(V v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(V));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

  template <typename V>
  V get(const char* what) {
    need(sizeof(V), what);
    V v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string get_string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  template <typename T>
  std::vector<T> get_values(std::size_t count, const char* what) {
    if (count > (bytes_.size() - pos_) / sizeof(T)) fail(std::string("truncated ") + what);
    std::vector<T> v(count);
    std::memcpy(v.data(), bytes_.data() + pos_, count * sizeof(T));
    pos_ += count * sizeof(T);
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t position() const { return pos_; }
  [[noreturn]] void fail(const std::string& what) const {
    throw DataError("checkpoint: " + what + " at byte " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) fail(std::string("truncated ") + what);
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const Backbone<T>& model, const AdamW<T>* optimizer) {
  Writer w;
  w.put_bytes(kMagic, 4);
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint8_t>(sizeof(T)));
  w.put(std::uint16_t{0});
  w.put_string(backbone_config_text(model.config()));
  const auto params = model.named_parameters();
  w.put(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    w.put_string(name);
    w.put(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.put(static_cast<std::uint64_t>(d));
    w.put_bytes(t.data().data(), t.numel() * sizeof(T));
  }
  w.put(static_cast<std::uint8_t>(optimizer ? 1 : 0));
  if (optimizer) {
    if (optimizer->first_moments().size() != params.size()) {
      throw ContractError("optimizer does not track the model's parameters");
    }
    w.put(static_cast<std::uint64_t>(optimizer->step_count()));
    for (std::size_t k = 0; k < params.size(); ++k) {
      w.put_bytes(optimizer->first_moments()[k].data(), optimizer->first_moments()[k].size() * sizeof(T));
      w.put_bytes(optimizer->second_moments()[k].data(), optimizer->second_moments()[k].size() * sizeof(T));
    }
  }
  return std::move(w.bytes);
}

template <typename T>
CheckpointContents<T> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  char magic[4];
  for (auto& c : magic) c = static_cast<char>(r.get<std::uint8_t>("magic"));
  if (std::memcmp(magic, kMagic, 4) != 0) throw DataError("checkpoint: bad magic, not an XARS file");
  const auto version = r.get<std::uint8_t>("version");
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  const auto width = r.get<std::uint8_t>("scalar width");
  if (width != sizeof(T)) {
    throw DataError("checkpoint: stored " + std::to_string(width) + "-byte scalars, reader expects " +
                    std::to_string(sizeof(T)));
  }
  (void)r.get<std::uint16_t>("reserved");

  CheckpointContents<T> out;
  try {
    out.config = parse_backbone_config_text(r.get_string("config"));
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint: bad config echo: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>("parameter count");
  for (std::uint32_t k = 0; k < count; ++k) {
    auto name = r.get_string("parameter name");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) r.fail("implausible rank " + std::to_string(rank) + " for " + name);
    std::vector<std::size_t> shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>("dim")));
    out.values.push_back(r.template get_values<T>(shape_numel(shape), "parameter values"));
    out.shapes.emplace_back(std::move(name), std::move(shape));
  }
  const auto has_opt = r.get<std::uint8_t>("optimizer flag");
  if (has_opt > 1) r.fail("bad optimizer flag");
  if (has_opt) {
    OptimizerState<T> s;
    s.step = r.get<std::uint64_t>("optimizer step");
    for (const auto& [name, shape] : out.shapes) {
      s.first_moments.push_back(r.template get_values<T>(shape_numel(shape), "first moments"));
      s.second_moments.push_back(r.template get_values<T>(shape_numel(shape), "second moments"));
    }
    out.optimizer = std::move(s);
  }
  if (!r.done()) r.fail("trailing bytes");
  return out;
}

template <typename T>
void save_checkpoint(const Backbone<T>& model, const AdamW<T>* optimizer, const std::string& path) {
  const auto bytes = encode_checkpoint(model, optimizer);
  write_file_atomic(path, bytes);
}

template <typename T>
void restore_checkpoint(const CheckpointContents<T>& contents, Backbone<T>& model, AdamW<T>* optimizer) {
  auto params = model.named_parameters();
  if (params.size() != contents.shapes.size()) {
    throw ShapeError("checkpoint holds " + std::to_string(contents.shapes.size()) + " tensors, model has " +
                     std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& [name, shape] = contents.shapes[k];
    if (params[k].first != name) {
      throw ShapeError("checkpoint tensor " + std::to_string(k) + " is '" + name + "', model expects '" +
                       params[k].first + "'");
    }
    if (params[k].second.shape() != shape) {
      throw ShapeError("shape mismatch for '" + name + "': checkpoint " + shape_to_string(shape) + ", model " +
                       shape_to_string(params[k].second.shape()));
    }
  }
  restore_parameters(model, contents.values);
  if (optimizer && contents.optimizer) {
    optimizer->restore(contents.optimizer->step, contents.optimizer->first_moments, contents.optimizer->second_moments);
  }
}

template <typename T>
Backbone<T> load_checkpoint(const std::string& path, std::optional<OptimizerState<T>>* optimizer) {
  const auto bytes = read_file(path);
  auto contents = decode_checkpoint<T>(bytes);
  Backbone<T> model(contents.config);
  restore_checkpoint(contents, model);
  if (optimizer) *optimizer = std::move(contents.optimizer);
  return model;
}

#define XATTNRES_INSTANTIATE_CHECKPOINT(T)                                                               \
  template std::vector<std::uint8_t> encode_checkpoint<T>(const Backbone<T>&, const AdamW<T>*);         \
  template CheckpointContents<T> decode_checkpoint<T>(std::span<const std::uint8_t>);                   \
  template void save_checkpoint<T>(const Backbone<T>&, const AdamW<T>*, const std::string&);            \
  template void restore_checkpoint<T>(const CheckpointContents<T>&, Backbone<T>&, AdamW<T>*);           \
  template Backbone<T> load_checkpoint<T>(const std::string&, std::optional<OptimizerState<T>>*);

XATTNRES_INSTANTIATE_CHECKPOINT(float)
XATTNRES_INSTANTIATE_CHECKPOINT(double)

}  // namespace xattnres
