#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cordseg/config.hpp"

using namespace cordseg;
namespace fs = std::filesystem;

namespace {

ErrorKind kind_of(const std::function<void()> &f) {
  try {
    f();
  } catch (const Error &e) {
    return e.kind();
  }
  FAIL("no error");
  return ErrorKind::IoFailure;
}

} // namespace

TEST_CASE("config defaults carry the training table") {
  const PipelineConfig c;
  CHECK((c.preprocess.target_spacing == Spacing3(1, 1, 2)).all());
  CHECK((c.preprocess.crop_shape == Index3(512, 256, 32)).all());
  CHECK((c.patches.patch_size == Index3(128, 128, 32)).all());
  CHECK((c.patches.stride == Index3(64, 64, 32)).all());
  CHECK(c.localizer_train.lr0 == 1e-3);
  CHECK(c.localizer_train.batch_size == 1);
  CHECK(c.segmenter_train.batch_size == 8);
  CHECK(c.localizer_train.max_epochs == 200);
  CHECK(c.localizer_train.patience == 50);
  CHECK(c.postprocess.threshold == 0.5);
  CHECK(PipelineConfig::desk().segmenter_train.max_epochs == 50);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config round trip") {
  PipelineConfig c = PipelineConfig::desk();
  c.seed = 17;
  c.paths.data_dir = "/x/y";
  c.loss.denominator = DiceDenominator::Linear;
  c.postprocess.min_volume_mm3[2] = 321.5;
  c.split.force_train.clear();
  c.localize.margin_mm = {5, 6, 7};
  c.augment_enabled = false;

  const nlohmann::json j = c;
  CHECK(j.at("schema") == kConfigSchema);
  PipelineConfig back;
  from_json(j, back);
  CHECK(back == c);
  CHECK(nlohmann::json(back) == j);

  const fs::path p = fs::temp_directory_path() / "cordseg_cfg_test.json";
  save_config(c, p);
  const PipelineConfig again = load_config(p);
  CHECK(again == c);
  fs::remove(p);

  PipelineConfig partial;
  from_json(nlohmann::json{{"seed", 3}}, partial);
  CHECK(partial.seed == 3);
  CHECK(partial.preprocess == PipelineConfig().preprocess);
}

TEST_CASE("config rejects bad input") {
  PipelineConfig c;
  CHECK(kind_of([&] { from_json(nlohmann::json{{"sed", 1}}, c); }) == ErrorKind::InvalidConfig);
  CHECK(kind_of([&] { from_json(nlohmann::json{{"schema", "other/9"}}, c); }) == ErrorKind::InvalidConfig);
  CHECK(kind_of([&] { from_json(nlohmann::json{{"patches", {{"stride", {1, 2}}}}}, c); }) ==
        ErrorKind::InvalidConfig);
  CHECK(kind_of([&] { from_json(nlohmann::json{{"postprocess", {{"threshold", 1.5}}}}, c); }) ==
        ErrorKind::InvalidConfig);
  CHECK(kind_of([&] { from_json(nlohmann::json{{"localizer_train", {{"lr", 1}}}}, c); }) ==
        ErrorKind::InvalidConfig);
  CHECK(kind_of([&] { from_json(nlohmann::json{{"seed", "zero"}}, c); }) == ErrorKind::InvalidConfig);
  CHECK(kind_of([&] { from_json(nlohmann::json{{"segmenter_model", {{"in_channels", 1}}}}, c); }) ==
        ErrorKind::InvalidConfig);
  CHECK(kind_of([&] { load_config("/nonexistent/cfg.json"); }) == ErrorKind::FileNotFound);
  CHECK(c == PipelineConfig()); // failed parses leave the target untouched
}

TEST_CASE("master seed drives every stream") {
  PipelineConfig a, b;
  a.apply_seed(5);
  b.apply_seed(5);
  CHECK(a == b);
  b.apply_seed(6);
  CHECK_FALSE(a.split.seed == b.split.seed);
  CHECK_FALSE(a.localizer_model.seed == b.localizer_model.seed);
  CHECK_FALSE(a.segmenter_train.seed == b.segmenter_train.seed);
  CHECK_FALSE(a.localizer_model.seed == a.segmenter_model.seed);
}
