#include "xattnres/config.hpp"

#include <charconv>
#include <sstream>

#include "xattnres/errors.hpp"

namespace xattnres {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::string normalize_key(std::string_view key) {
  std::string out(key);
  for (auto& c : out) {
    if (c == '-') c = '_';
  }
  return out;
}

template <typename Int>
Int parse_int(std::string_view key, std::string_view value) {
  Int out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end) {
    throw ConfigError("invalid integer for '" + std::string(key) + "': '" + std::string(value) + "'");
  }
  return out;
}

double parse_double(std::string_view key, std::string_view value) {
  const std::string text(value);
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) {
    throw ConfigError("invalid number for '" + std::string(key) + "': '" + text + "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw ConfigError("invalid boolean for '" + std::string(key) + "': '" + std::string(value) + "'");
}

template <typename F>
auto parse_enum(std::string_view key, std::string_view value, F parse) {
  try {
    return parse(value);
  } catch (const ConfigError& e) {
    throw ConfigError("invalid value for '" + std::string(key) + "': " + e.what());
  }
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string join_seeds(const std::vector<std::uint64_t>& seeds) {
  std::string out;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(seeds[i]);
  }
  return out;
}

const std::vector<std::string> kModelKeys = {"stages",  "base_channels", "in_channels", "num_classes", "routing",
                                             "position", "init",         "both_order",  "model_seed"};

}  // namespace

ExperimentConfig::ExperimentConfig() {
  // Desk-scale defaults; see README for the reasoning behind the step size.
  training.optimizer.learning_rate = 2e-3;
}

void ExperimentConfig::validate() const {
  model.validate();
  training.validate();
  if (data_dir.empty()) synthetic.validate();
  if (synthetic.num_classes != model.num_classes && data_dir.empty()) {
    throw ConfigError("num_classes (" + std::to_string(model.num_classes) + ") differs from synthetic_classes (" +
                      std::to_string(synthetic.num_classes) + ")");
  }
  if (seeds.empty()) throw ConfigError("seeds must list at least one seed");
  if (run_id.empty()) throw ConfigError("run_id must not be empty");
}

ExperimentConfig ExperimentConfig::with_seed(std::uint64_t s) const {
  ExperimentConfig c = *this;
  c.seed = s;
  c.model.seed = s;
  c.training.seed = s;
  return c;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "stages",          "base_channels",    "in_channels",  "num_classes",     "routing",
      "position",        "init",             "both_order",   "seed",            "seeds",
      "epochs",          "batch_size",       "learning_rate", "weight_decay",   "beta1",
      "beta2",           "adam_epsilon",     "ce_weight",    "dice_weight",     "dice_smooth",
      "augment",         "synthetic_count",  "synthetic_height", "synthetic_width", "synthetic_classes",
      "synthetic_min_shapes", "synthetic_max_shapes", "synthetic_noise", "data_seed", "data_dir",
      "split_seed",      "out_dir",          "run_id"};
  return keys;
}

void apply_setting(ExperimentConfig& c, std::string_view raw_key, std::string_view raw_value) {
  const std::string key = normalize_key(trim(raw_key));
  const std::string_view v = trim(raw_value);
  if (key == "stages") c.model.stages = parse_int<int>(key, v);
  else if (key == "base_channels") c.model.base_channels = parse_int<int>(key, v);
  else if (key == "in_channels") c.model.in_channels = parse_int<int>(key, v);
  else if (key == "num_classes") c.model.num_classes = parse_int<int>(key, v);
  else if (key == "routing") c.model.routing = parse_enum(key, v, parse_routing);
  else if (key == "position") c.model.position = parse_enum(key, v, parse_position);
  else if (key == "init") c.model.init_scheme = parse_enum(key, v, parse_init_scheme);
  else if (key == "both_order") c.model.both_order = parse_enum(key, v, parse_both_order);
  else if (key == "seed") c = c.with_seed(parse_int<std::uint64_t>(key, v));
  else if (key == "seeds") c.seeds = parse_seed_list(v);
  else if (key == "epochs") c.training.epochs = parse_int<int>(key, v);
  else if (key == "batch_size") c.training.batch_size = parse_int<int>(key, v);
  else if (key == "learning_rate") c.training.optimizer.learning_rate = parse_double(key, v);
  else if (key == "weight_decay") c.training.optimizer.weight_decay = parse_double(key, v);
  else if (key == "beta1") c.training.optimizer.beta1 = parse_double(key, v);
  else if (key == "beta2") c.training.optimizer.beta2 = parse_double(key, v);
  else if (key == "adam_epsilon") c.training.optimizer.epsilon = parse_double(key, v);
  else if (key == "ce_weight") c.training.loss.ce_weight = parse_double(key, v);
  else if (key == "dice_weight") c.training.loss.dice_weight = parse_double(key, v);
  else if (key == "dice_smooth") c.training.loss.dice_smooth = parse_double(key, v);
  else if (key == "augment") c.training.augment = parse_bool(key, v);
  else if (key == "synthetic_count") c.synthetic.count = parse_int<std::size_t>(key, v);
  else if (key == "synthetic_height") c.synthetic.height = parse_int<std::size_t>(key, v);
  else if (key == "synthetic_width") c.synthetic.width = parse_int<std::size_t>(key, v);
  else if (key == "synthetic_classes") c.synthetic.num_classes = parse_int<int>(key, v);
  else if (key == "synthetic_min_shapes") c.synthetic.min_shapes = parse_int<int>(key, v);
  else if (key == "synthetic_max_shapes") c.synthetic.max_shapes = parse_int<int>(key, v);
  else if (key == "synthetic_noise") c.synthetic.noise_std = parse_double(key, v);
  else if (key == "data_seed") c.synthetic.seed = parse_int<std::uint64_t>(key, v);
  else if (key == "data_dir") c.data_dir = std::string(v);
  else if (key == "split_seed") c.split_seed = parse_int<std::uint64_t>(key, v);
  else if (key == "out_dir") c.out_dir = std::string(v);
  else if (key == "run_id") c.run_id = std::string(v);
  else throw ConfigError("unknown config key '" + key + "'");
}

ExperimentConfig parse_config_text(std::string_view text) {
  ExperimentConfig c;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value', got '" + std::string(line) + "'");
    }
    try {
      apply_setting(c, line.substr(0, eq), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  const auto bytes = read_file(path);
  return parse_config_text(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

std::string to_config_text(const ExperimentConfig& c) {
  std::ostringstream os;
  os << "stages = " << c.model.stages << '\n'
     << "base_channels = " << c.model.base_channels << '\n'
     << "in_channels = " << c.model.in_channels << '\n'
     << "num_classes = " << c.model.num_classes << '\n'
     << "routing = " << to_string(c.model.routing) << '\n'
     << "position = " << to_string(c.model.position) << '\n'
     << "init = " << to_string(c.model.init_scheme) << '\n'
     << "both_order = " << to_string(c.model.both_order) << '\n'
     << "seed = " << c.seed << '\n'
     << "seeds = " << join_seeds(c.seeds) << '\n'
     << "epochs = " << c.training.epochs << '\n'
     << "batch_size = " << c.training.batch_size << '\n'
     << "learning_rate = " << format_double(c.training.optimizer.learning_rate) << '\n'
     << "weight_decay = " << format_double(c.training.optimizer.weight_decay) << '\n'
     << "beta1 = " << format_double(c.training.optimizer.beta1) << '\n'
     << "beta2 = " << format_double(c.training.optimizer.beta2) << '\n'
     << "adam_epsilon = " << format_double(c.training.optimizer.epsilon) << '\n'
     << "ce_weight = " << format_double(c.training.loss.ce_weight) << '\n'
     << "dice_weight = " << format_double(c.training.loss.dice_weight) << '\n'
     << "dice_smooth = " << format_double(c.training.loss.dice_smooth) << '\n'
     << "augment = " << (c.training.augment ? "true" : "false") << '\n'
     << "synthetic_count = " << c.synthetic.count << '\n'
     << "synthetic_height = " << c.synthetic.height << '\n'
     << "synthetic_width = " << c.synthetic.width << '\n'
     << "synthetic_classes = " << c.synthetic.num_classes << '\n'
     << "synthetic_min_shapes = " << c.synthetic.min_shapes << '\n'
     << "synthetic_max_shapes = " << c.synthetic.max_shapes << '\n'
     << "synthetic_noise = " << format_double(c.synthetic.noise_std) << '\n'
     << "data_seed = " << c.synthetic.seed << '\n'
     << "data_dir = " << c.data_dir << '\n'
     << "split_seed = " << c.split_seed << '\n'
     << "out_dir = " << c.out_dir << '\n'
     << "run_id = " << c.run_id << '\n';
  return os.str();
}

std::string backbone_config_text(const BackboneConfig& m) {
  std::ostringstream os;
  os << "stages = " << m.stages << '\n'
     << "base_channels = " << m.base_channels << '\n'
     << "in_channels = " << m.in_channels << '\n'
     << "num_classes = " << m.num_classes << '\n'
     << "routing = " << to_string(m.routing) << '\n'
     << "position = " << to_string(m.position) << '\n'
     << "init = " << to_string(m.init_scheme) << '\n'
     << "both_order = " << to_string(m.both_order) << '\n'
     << "model_seed = " << m.seed << '\n';
  return os.str();
}

BackboneConfig parse_backbone_config_text(std::string_view text) {
  BackboneConfig m;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) throw ConfigError("malformed model config line '" + std::string(t) + "'");
    const std::string key = normalize_key(trim(t.substr(0, eq)));
    const auto v = trim(t.substr(eq + 1));
    if (key == "stages") m.stages = parse_int<int>(key, v);
    else if (key == "base_channels") m.base_channels = parse_int<int>(key, v);
    else if (key == "in_channels") m.in_channels = parse_int<int>(key, v);
    else if (key == "num_classes") m.num_classes = parse_int<int>(key, v);
    else if (key == "routing") m.routing = parse_enum(key, v, parse_routing);
    else if (key == "position") m.position = parse_enum(key, v, parse_position);
    else if (key == "init") m.init_scheme = parse_enum(key, v, parse_init_scheme);
    else if (key == "both_order") m.both_order = parse_enum(key, v, parse_both_order);
    else if (key == "model_seed") m.seed = parse_int<std::uint64_t>(key, v);
    else throw ConfigError("unknown model config key '" + key + "'");
  }
  m.validate();
  return m;
}

std::vector<std::uint64_t> parse_seed_list(std::string_view text) {
  std::vector<std::uint64_t> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const auto item = trim(text.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
    if (!item.empty()) {
      // "a-b" expands to the inclusive range.
      if (const auto dash = item.find('-'); dash != std::string_view::npos && dash > 0) {
        const auto lo = parse_int<std::uint64_t>("seeds", trim(item.substr(0, dash)));
        const auto hi = parse_int<std::uint64_t>("seeds", trim(item.substr(dash + 1)));
        if (hi < lo) throw ConfigError("seed range '" + std::string(item) + "' is decreasing");
        if (hi - lo > 10000) throw ConfigError("seed range '" + std::string(item) + "' is too long");
        for (auto s = lo; s <= hi; ++s) out.push_back(s);
      } else {
        out.push_back(parse_int<std::uint64_t>("seeds", item));
      }
    }
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  if (out.empty()) throw ConfigError("seed list '" + std::string(text) + "' is empty");
  return out;
}

}  // namespace xattnres
