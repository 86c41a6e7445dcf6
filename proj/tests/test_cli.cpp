#include <doctest.h>

#include <filesystem>
#include <map>
#include <sstream>

#include "visreview/cli.hpp"
#include "visreview/config.hpp"
#include "visreview/serialize.hpp"
#include "test_util.hpp"

using namespace vr;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

const char* kTinyConfig = R"({
  "dataset": {"n_classes": 2, "per_score": 4, "augment": 1},
  "model": {
    "higher": {"stages": [{"filters": 4, "kernel": 3, "stride": 2}, {"filters": 8, "kernel": 3, "stride": 1}],
               "hidden": [8, 4]},
    "extractor": {"stages": [{"filters": 4, "kernel": 3, "stride": 2}, {"filters": 8, "kernel": 3, "stride": 1}],
                  "hidden": [8, 6]},
    "lower": {"encoder_hidden": 6, "decoder_hidden": 6, "attention_dim": 4}
  },
  "train": {"epochs": 1, "batch_size": 8},
  "seed": 3
})";

// relative path -> contents, for every regular file under `dir`
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = read_file(e.path());
  }
  return files;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST_CASE("gen-config emits a config that parses back to itself") {
  for (const char* preset : {"desk", "paper"}) {
    const Run r = run({"gen-config", "--preset", preset});
    REQUIRE(r.code == 0);
    const RunConfig cfg = parse_config(r.out);
    CHECK(config_json(cfg).dump(2) + "\n" == r.out);
  }
  const RunConfig desk = parse_config(run({"gen-config"}).out);
  CHECK(desk.dataset.n_classes == 23);
  CHECK(desk.train.adam.learning_rate == 1e-3);
  CHECK(desk.train.batch_size == 16);
  const RunConfig paper = parse_config(run({"gen-config", "--preset", "paper"}).out);
  CHECK(paper.window == 64);
  CHECK(paper.stride == 32);
  CHECK(paper.train.batch_size == 128);
  CHECK(paper.dataset.image_size == 224);
  CHECK(run({"gen-config", "--preset", "huge"}).code == kExitConfig);
}

TEST_CASE("config parsing rejects bad input") {
  CHECK(parse_config("{}").dataset.n_classes == 23);
  CHECK(parse_config(R"({"train": {"epochs": 3}})").train.epochs == 3);
  for (const char* text : {R"({"dataset": {"classes": 4}})", R"({"train": {"epochs": "3"}})",
                           R"({"train": {"epochs": -1}})", R"({"model": {"extra_class": 1}})",
                           R"({"dataset": {"n_classes": 1}})", R"({"train": {"batch_size": 0}})",
                           R"({"metrics": {"gamma": -2}})", R"({"model": {"tiling": {"window": 40}}})",
                           R"({"seed": 1,)", R"([1, 2])"}) {
    CAPTURE(text);
    CHECK(code_of([&] { parse_config(text); }) == ErrorCode::InvalidConfig);
  }
  CHECK(code_of([] { load_config("/nonexistent/visreview.json"); }) == ErrorCode::InvalidConfig);
}

TEST_CASE("exit codes") {
  vrtest::TempDir dir("cli_codes");
  const std::string pack = (dir.path() / "pack").string();
  const std::string config = (dir.path() / "tiny.json").string();
  write_file(config, kTinyConfig);

  SUBCASE("unknown flag writes nothing") {
    CHECK(run({"gen-data", "--config", config, "--out", pack, "--bogus"}).code == kExitConfig);
    CHECK(run({"frobnicate"}).code == kExitConfig);
    CHECK(run({}).code == kExitConfig);
    CHECK_FALSE(fs::exists(pack));
  }
  SUBCASE("bad config") {
    write_file(config, R"({"dataset": {"colour": true}})");
    const Run r = run({"gen-data", "--config", config, "--out", pack});
    CHECK(r.code == kExitConfig);
    CHECK(r.err.find("colour") != std::string::npos);
    CHECK_FALSE(fs::exists(pack));
  }
  SUBCASE("missing or damaged pack") {
    CHECK(run({"train", "--config", config, "--data", pack, "--target", "higher", "--out",
               (dir.path() / "ckpt").string()})
              .code == kExitData);
    REQUIRE(run({"gen-data", "--config", config, "--out", pack}).code == 0);
    const std::string images = read_file(fs::path(pack) / "images.bin");
    write_file(fs::path(pack) / "images.bin", images.substr(0, images.size() / 2));
    CHECK(run({"train", "--config", config, "--data", pack, "--target", "higher", "--out",
               (dir.path() / "ckpt").string()})
              .code == kExitData);
  }
  SUBCASE("bad target") {
    REQUIRE(run({"gen-data", "--config", config, "--out", pack}).code == 0);
    for (const char* target : {"lower:2", "middle"}) {
      CHECK(run({"train", "--config", config, "--data", pack, "--target", target, "--out",
                 (dir.path() / "ckpt").string()})
                .code == kExitConfig);
    }
  }
  SUBCASE("pack does not match the config") {
    REQUIRE(run({"gen-data", "--config", config, "--out", pack}).code == 0);
    write_file(config, R"({"dataset": {"n_classes": 3, "per_score": 4, "augment": 1}})");
    CHECK(run({"train", "--config", config, "--data", pack, "--target", "higher", "--out",
               (dir.path() / "ckpt").string()})
              .code == kExitConfig);
  }
  SUBCASE("locked output directory") {
    fs::create_directories(pack);
    write_file(fs::path(pack) / ".lock", "");
    const Run r = run({"gen-data", "--config", config, "--out", pack});
    CHECK(r.code == kExitConfig);
    CHECK(r.err.find("locked") != std::string::npos);
    CHECK_FALSE(fs::exists(fs::path(pack) / "manifest.json"));
  }
  SUBCASE("missing report") {
    CHECK(run({"report", "--in", (dir.path() / "nothing").string()}).code == kExitData);
  }

  CHECK(exit_code_for(ErrorCode::CorruptManifest) == kExitData);
  CHECK(exit_code_for(ErrorCode::IoError) == kExitData);
  CHECK(exit_code_for(ErrorCode::InvalidConfig) == kExitConfig);
  CHECK(kExitCheck == 4);
}

TEST_CASE("grad-check subcommand") {
  const Run r = run({"grad-check", "--seeds", "1", "--seed", "11", "--coordinates", "2"});
  CHECK(r.code == 0);
  CHECK(r.out.find("FAIL") == std::string::npos);
  CHECK(r.out.find("all gradient checks passed") != std::string::npos);
}

TEST_CASE("runs are byte-identical and leave their inputs alone") {
  vrtest::TempDir a("cli_a"), b("cli_b");
  for (const auto* dir : {&a, &b}) {
    const fs::path root = dir->path();
    const std::string config = (root / "tiny.json").string(), pack = (root / "pack").string();
    write_file(config, kTinyConfig);
    REQUIRE(run({"gen-data", "--config", config, "--out", pack}).code == 0);
    const auto pack_files = snapshot(pack);
    for (const char* target : {"higher", "lowers", "lower:1", "flat"}) {
      const Run r = run({"train", "--config", config, "--data", pack, "--target", target, "--out",
                         (root / "ckpt").string()});
      REQUIRE(r.code == 0);
      CHECK(r.err.find(std::string(target) + " epoch 1 train") != std::string::npos);
    }
    const auto ckpt_files = snapshot(root / "ckpt");
    REQUIRE(run({"eval", "--config", config, "--data", pack, "--ckpt-dir", (root / "ckpt").string(), "--out",
                 (root / "eval").string()})
                .code == 0);
    REQUIRE(run({"ablate", "--config", config, "--data", pack, "--out", (root / "ablate").string()}).code == 0);
    CHECK(snapshot(pack) == pack_files);
    CHECK(snapshot(root / "ckpt") == ckpt_files);
    const Run shown = run({"report", "--in", (root / "ablate").string()});
    CHECK(shown.code == 0);
    CHECK(shown.out.find("Single-level (no hierarchy)") != std::string::npos);
    CHECK_FALSE(fs::exists(root / "ablate" / ".lock"));
  }

  const auto first = snapshot(a.path()), second = snapshot(b.path());
  CHECK(first.size() == second.size());
  for (const auto& [name, contents] : first) {
    CAPTURE(name);
    REQUIRE(second.count(name) == 1);
    CHECK(second.at(name) == contents);
  }
  for (const char* name : {"eval/report.json", "eval/report.csv", "eval/classes.csv", "ablate/report.json",
                           "ablate/checkpoints/flat/header.json", "ckpt/higher/header.json"}) {
    CAPTURE(name);
    CHECK(first.count(name) == 1);
  }
}
