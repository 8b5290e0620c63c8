#include <filesystem>

#include "doctest.h"
#include "xattnres/checkpoint.hpp"
#include "xattnres/ops.hpp"

using namespace xattnres;
namespace fs = std::filesystem;

namespace {

BackboneConfig model_config() {
  BackboneConfig c;
  c.stages = 2;
  c.base_channels = 4;
  c.num_classes = 3;
  c.routing = Routing::Both;
  c.init_scheme = InitScheme::RandomNormal;
  c.seed = 21;
  return c;
}

// One optimizer step so the moments are non-trivial.
void take_step(Backbone<float>& model, AdamW<float>& opt) {
  opt.zero_grad();
  auto x = Tensor<float>::full({1, 1, 8, 8}, 0.5f);
  backward(sum(model.forward(x).logits));
  opt.step();
}

}  // namespace

TEST_CASE("encode then decode reproduces parameters and optimizer state") {
  Backbone<float> model(model_config());
  AdamW<float> opt(model.parameters(), OptimizerSettings{});
  take_step(model, opt);
  const auto bytes = encode_checkpoint(model, &opt);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "XARS");
  CHECK(bytes[4] == kCheckpointVersion);
  CHECK(bytes[5] == sizeof(float));

  const auto c = decode_checkpoint<float>(bytes);
  CHECK(c.config.routing == Routing::Both);
  CHECK(c.config.seed == 21);
  CHECK(c.values == snapshot_parameters(model));
  REQUIRE(c.optimizer.has_value());
  CHECK(c.optimizer->step == 1);
  CHECK(c.optimizer->first_moments == opt.first_moments());
  CHECK(c.optimizer->second_moments == opt.second_moments());

  auto other_cfg = model_config();
  other_cfg.seed = 1;
  Backbone<float> other(other_cfg);
  AdamW<float> other_opt(other.parameters(), OptimizerSettings{});
  restore_checkpoint(c, other, &other_opt);
  CHECK(snapshot_parameters(other) == snapshot_parameters(model));
  CHECK(other_opt.step_count() == 1);
  const auto again = decode_checkpoint<float>(encode_checkpoint(other, &other_opt));
  CHECK(again.values == c.values);
  CHECK(again.optimizer->second_moments == c.optimizer->second_moments);
}

TEST_CASE("save and load round-trip through a file") {
  const auto path = (fs::temp_directory_path() / "xattnres_test_roundtrip.xars").string();
  Backbone<float> model(model_config());
  save_checkpoint<float>(model, nullptr, path);
  std::optional<OptimizerState<float>> state;
  const auto loaded = load_checkpoint<float>(path, &state);
  CHECK_FALSE(state.has_value());
  CHECK(loaded.config().base_channels == 4);
  CHECK(snapshot_parameters(loaded) == snapshot_parameters(model));
  auto x = Tensor<float>::full({1, 1, 8, 8}, 0.25f);
  const auto a = model.forward(x).logits;
  const auto b = loaded.forward(x).logits;
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
  fs::remove(path);
}

TEST_CASE("a model with a different layout is rejected without modification") {
  Backbone<float> model(model_config());
  const auto c = decode_checkpoint<float>(encode_checkpoint(model));
  auto wider = model_config();
  wider.base_channels = 6;
  Backbone<float> target(wider);
  const auto before = snapshot_parameters(target);
  CHECK_THROWS_AS(restore_checkpoint(c, target), ShapeError);
  CHECK(snapshot_parameters(target) == before);
  auto plain = model_config();
  plain.routing = Routing::SkipOnly;
  Backbone<float> fewer(plain);
  CHECK_THROWS_AS(restore_checkpoint(c, fewer), ShapeError);
}

TEST_CASE("corrupt buffers are data errors") {
  Backbone<float> model(model_config());
  const auto good = encode_checkpoint(model);
  auto bad_magic = good;
  bad_magic[0] = 'Y';
  CHECK_THROWS_AS(decode_checkpoint<float>(bad_magic), DataError);
  auto bad_version = good;
  bad_version[4] = 99;
  CHECK_THROWS_AS(decode_checkpoint<float>(bad_version), DataError);
  CHECK_THROWS_AS(decode_checkpoint<double>(good), DataError);
  auto truncated = good;
  truncated.resize(good.size() - 3);
  CHECK_THROWS_AS(decode_checkpoint<float>(truncated), DataError);
  auto trailing = good;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint<float>(trailing), DataError);
  CHECK_THROWS_AS(decode_checkpoint<float>(std::vector<std::uint8_t>{}), DataError);
}

TEST_CASE("double precision checkpoints") {
  BackboneConfig c = model_config();
  Backbone<double> model(c);
  const auto back = decode_checkpoint<double>(encode_checkpoint(model));
  CHECK(back.values == snapshot_parameters(model));
}
