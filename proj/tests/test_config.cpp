// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#include "gd/config.hpp"

#include <doctest.h>

#include <string>

#include "gd/bytes.hpp"
#include "gd/errors.hpp"
#include "test_util.hpp"

using namespace gd;

namespace {

// doctest's Contains helper is unavailable in the vendored header; assert
// substring presence by hand.
template <class E>
void expect_throw_with(const std::string& text, const std::string& needle) {
  bool threw = false;
  try {
    config_from_toml(text, "cfg");
  } catch (const E& e) {
    threw = true;
    CHECK_MESSAGE(std::string(e.what()).find(needle) != std::string::npos,
                  "message was: ", e.what());
  }
  CHECK(threw);
}

}  // namespace

TEST_SUITE("config") {

TEST_CASE("defaults emit and reparse to a fixed point") {
  PipelineConfig cfg;
  std::string text = config_to_toml(cfg);
  PipelineConfig back = config_from_toml(text);
  CHECK(config_to_toml(back) == text);
  CHECK(back.version == 1);
  CHECK(back.threads == 1);
  CHECK(back.views.mode == "sd_front");
  CHECK(back.volume.dims == 150);
  CHECK(back.render.samples_per_ray == 64);
  CHECK(back.refine.iterations == 400);
  CHECK(back.mesh.resolution == 96);
  CHECK(back.providers.score == "analytic");
  CHECK(back.metrics.views == 120);
  CHECK(back.metrics.captions.size() == 1);
}

TEST_CASE("hand-written file with comments reaches the same fixed point") {
  std::string text =
      "# run settings\n"
      "version = 1\n"
      "seed = 42   # trailing comment\n"
      "\n"
      "[render]\n"
      "width = 32\n"
      "height = 32\n"
      "sharpness = 80     # int literal for a float knob\n"
      "stratified = true\n"
      "\n"
      "[metrics]\n"
      "captions = [\"a red chair\", \"a #2 pencil\"]\n"
      "correct = 1\n";
  PipelineConfig cfg = config_from_toml(text, "hand.toml");
  CHECK(cfg.seed == 42);
  CHECK(cfg.render.width == 32);
  CHECK(cfg.render.sharpness == 80.0);
  CHECK(cfg.render.stratified == true);
  REQUIRE(cfg.metrics.captions.size() == 2);
  CHECK(cfg.metrics.captions[1] == "a #2 pencil");
  CHECK(cfg.metrics.correct == 1);

  std::string once = config_to_toml(cfg);
  std::string twice = config_to_toml(config_from_toml(once));
  CHECK(once == twice);
}

TEST_CASE("string escapes survive a round trip") {
  PipelineConfig cfg;
  cfg.metrics.captions = {"quote \" backslash \\ newline \n tab \t done"};
  PipelineConfig back = config_from_toml(config_to_toml(cfg));
  REQUIRE(back.metrics.captions.size() == 1);
  CHECK(back.metrics.captions[0] == cfg.metrics.captions[0]);
}

TEST_CASE("seed spans the full unsigned 64-bit range") {
  PipelineConfig cfg;
  cfg.seed = 18446744073709551615ull;
  PipelineConfig back = config_from_toml(config_to_toml(cfg));
  CHECK(back.seed == 18446744073709551615ull);
  expect_throw_with<ConfigError>("version = 1\nseed = -3\n", "non-negative");
}

TEST_CASE("version is mandatory and pinned") {
  expect_throw_with<ConfigError>("seed = 3\n", "version");
  expect_throw_with<ConfigError>("version = 2\n", "version must be 1");
}

TEST_CASE("unknown keys and sections are named in the error") {
  expect_throw_with<ConfigError>("version = 1\nsneed = 3\n",
                                 "unknown key 'sneed'");
  expect_throw_with<ConfigError>("version = 1\n[views]\nmod = \"x\"\n",
                                 "unknown key 'views.mod'");
  expect_throw_with<ConfigError>("version = 1\n[viewz]\n",
                                 "unknown section 'viewz'");
  expect_throw_with<ConfigError>("version = 1\nseed = 1\nseed = 2\n",
                                 "duplicate key 'seed'");
}

TEST_CASE("syntax errors carry the file name and line number") {
  expect_throw_with<FormatError>("version = 1\nthreads\n", "cfg:2:");
  expect_throw_with<FormatError>("version = 1\n[render\nwidth = 4\n",
                                 "cfg:2:");
  expect_throw_with<FormatError>("version = 1\n[views]\nmode = \"open\n",
                                 "unterminated string");
  expect_throw_with<FormatError>("version = 1\nthreads = 1x\n",
                                 "invalid integer");
  expect_throw_with<FormatError>(
      "version = 1\n[metrics]\ncaptions = [\"a\",]\n", "trailing comma");
  expect_throw_with<FormatError>("version = 1\n[metrics]\ncaptions = [1]\n",
                                 "quoted strings");
  expect_throw_with<FormatError>("version = 1\n[render]\nnear = 1e999\n",
                                 "non-finite");
}

TEST_CASE("type mismatches name the key") {
  expect_throw_with<ConfigError>("version = 1\n[views]\ncount = \"four\"\n",
                                 "'views.count' expects an integer");
  expect_throw_with<ConfigError>("version = 1\n[views]\ncount = 2.5\n",
                                 "'views.count' expects an integer");
  expect_throw_with<ConfigError>("version = 1\n[render]\nstratified = 1\n",
                                 "expects a boolean");
  expect_throw_with<ConfigError>("version = 1\n[views]\nmode = 3\n",
                                 "expects a string");
}

TEST_CASE("semantic validation rejects bad ranges") {
  expect_throw_with<ConfigError>("version = 1\nthreads = 0\n", "threads");
  expect_throw_with<ConfigError>("version = 1\n[views]\nmode = \"both\"\n",
                                 "views.mode");
  expect_throw_with<ConfigError>(
      "version = 1\n[render]\nnear = 5.0\nfar = 4.0\n", "near < far");
  expect_throw_with<ConfigError>(
      "version = 1\n[refine]\nramp_fraction = 1.5\n", "ramp_fraction");
  expect_throw_with<ConfigError>("version = 1\n[metrics]\ncorrect = 5\n",
                                 "correct");
  expect_throw_with<ConfigError>("version = 1\n[metrics]\ncaptions = []\n",
                                 "captions");
  expect_throw_with<ConfigError>(
      "version = 1\n[volume]\nextractor = \"vgg\"\n", "volume.extractor");
  expect_throw_with<ConfigError>(
      "version = 1\n[providers]\nscore = \"oracle\"\n", "providers.score");
}

TEST_CASE("save and load round-trip through a file") {
  gdtest::TempDir dir;
  PipelineConfig cfg;
  cfg.seed = 9;
  cfg.render.width = 16;
  cfg.render.height = 16;
  save_config(dir.file("run.toml"), cfg);
  PipelineConfig back = load_config(dir.file("run.toml"));
  CHECK(config_to_toml(back) == config_to_toml(cfg));

  CHECK_THROWS_AS(load_config(dir.file("absent.toml")), FormatError);
  // Parse errors from files carry the path.
  atomic_write_file(dir.file("bad.toml"), "version = 1\noops\n");
  try {
    load_config(dir.file("bad.toml"));
    CHECK(false);
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("bad.toml:2:") != std::string::npos);
  }
}

TEST_CASE("config hash tracks values, not formatting") {
  PipelineConfig a;
  std::string reordered =
      "# noise\nseed = 0\nversion = 1\n\n[render]\nwidth = 64\n";
  PipelineConfig b = config_from_toml(reordered);
  CHECK(config_hash(a) == config_hash(b));

  PipelineConfig c;
  c.render.width = 32;
  CHECK(config_hash(a) != config_hash(c));
}

}  // TEST_SUITE
