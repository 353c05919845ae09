#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cosy/cli.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cosy::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("cosy_test_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE_MESSAGE(in, "missing " << p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// A run small enough to go end to end in seconds.
fs::path tiny_config(const fs::path& dir) {
  const nlohmann::json j = {
      {"corpus", {{"n_well", 6}, {"n_weak", 10}, {"n_val", 4}, {"n_test", 3}, {"max_frames", 48}}},
      {"model", {{"n_queries", 4}, {"d_model", 16}, {"n_layers", 1}, {"n_heads", 2}, {"d_ff", 32}, {"d_proj", 8}}},
      {"stage1", {{"epochs", 4}, {"batch_size", 4}}},
      {"stage3", {{"epochs", 1}, {"batch_size", 4}}},
      {"stage4", {{"epochs", 1}, {"batch_size", 4}}},
      {"generator",
       {{"t_max", 20}, {"d_time", 8}, {"d_conf", 4}, {"d_text", 8}, {"text_layers", 1}, {"text_heads", 2},
        {"unet_channels", 4}, {"vae_channels", 4}}},
      {"generator_training", {{"vae_steps", 2}, {"diffusion_steps", 2}, {"batch_size", 2}}},
      {"sampling", {{"steps", 4}}},
  };
  const auto path = dir / "tiny.json";
  std::ofstream(path) << j.dump(2);
  return path;
}

const std::vector<std::string> kArtifacts = {
    "config.json",          "stats.json",           "quantizer.json",        "manifests/high.jsonl",
    "manifests/low.jsonl",  "manifests/pairs.jsonl", "manifests/refined.jsonl", "stage1/checkpoint",
    "stage3/checkpoint",    "stage4/checkpoint",    "generator/checkpoint",
};

}  // namespace

TEST_CASE("usage errors exit 1") {
  CHECK(cli({}).code == 1);
  CHECK(cli({"frobnicate"}).code == 1);
  CHECK(cli({"train"}).code == 1);
  CHECK(cli({"train", "--stage", "2"}).code == 1);
  CHECK(cli({"train", "--stage", "1", "--bogus"}).code == 1);
  CHECK(cli({"generate", "--caption", "a dog barks", "--level", "5"}).code == 1);
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("data problems exit 2 and name what is missing") {
  const auto dir = scratch("missing");
  const std::string run = (dir / "run").string();
  auto r = cli({"--run-dir", run, "stats"});
  CHECK(r.code == 2);
  CHECK(r.err.find("config.json") != std::string::npos);

  REQUIRE(cli({"--run-dir", run, "init", "--config", tiny_config(dir).string()}).code == 0);
  r = cli({"--run-dir", run, "generate", "--caption", "a dog barks"});
  CHECK(r.code == 2);
  CHECK(r.err.find(fs::path("generator/checkpoint").string()) != std::string::npos);
  CHECK(cli({"--run-dir", run, "filter"}).code == 2);
  CHECK(cli({"--run-dir", run, "quantize"}).code == 2);
  CHECK(cli({"--run-dir", run, "train", "--stage", "3"}).code == 2);
  CHECK(cli({"--run-dir", run, "eval-captions", "--stage", "1"}).code == 2);

  // Re-running init with the same config is a no-op; a different one is refused.
  CHECK(cli({"--run-dir", run, "init", "--config", tiny_config(dir).string()}).code == 0);
  CHECK(cli({"--run-dir", run, "init", "--config", tiny_config(dir).string(), "--seed", "8"}).code != 0);

  std::ofstream(dir / "bad.json") << R"({"stage1": {"epoch": 3}})";
  CHECK(cli({"--run-dir", (dir / "other").string(), "init", "--config", (dir / "bad.json").string()}).code == 1);
  fs::remove_all(dir);
}

TEST_CASE("the pipeline subcommand equals the manual chain byte for byte") {
  const auto dir = scratch("chain");
  const auto cfg = tiny_config(dir).string();
  const std::string manual = (dir / "manual").string();
  const std::string piped = (dir / "piped").string();

  const std::vector<std::vector<std::string>> chain = {
      {"init", "--config", cfg},
      {"train", "--stage", "1"},
      {"eval-captions", "--stage", "1"},
      {"filter"},
      {"train", "--stage", "3"},
      {"pairs"},
      {"train", "--stage", "4"},
      {"eval-captions", "--stage", "4"},
      {"refine"},
      {"gen-train"},
      {"eval-confidence", "--stage", "4"},
  };
  for (auto args : chain) {
    args.insert(args.begin(), {"--run-dir", manual});
    const auto r = cli(args);
    INFO(args[2] << ": " << r.err);
    REQUIRE(r.code == 0);
  }
  REQUIRE(cli({"--run-dir", piped, "pipeline", "--config", cfg}).code == 0);
  for (const auto& a : kArtifacts) {
    INFO(a);
    CHECK(slurp(fs::path(manual) / a) == slurp(fs::path(piped) / a));
  }

  const auto state = nlohmann::json::parse(slurp(fs::path(piped) / "state.json"));
  CHECK(state.at("stage") == "GEN_TRAIN");
  const auto summary = nlohmann::json::parse(slurp(fs::path(piped) / "reports" / "pipeline.json"));
  CHECK(summary.contains("test_bleu4"));

  // Default level is 4 and the sidecar records the request.
  auto r = cli({"--run-dir", manual, "generate", "--caption", "a dog barks then a bell rings", "--seed", "3"});
  REQUIRE(r.code == 0);
  fs::path out;
  for (const auto& e : fs::directory_iterator(fs::path(manual) / "generated"))
    if (e.path().extension() == ".bin") out = e.path();
  REQUIRE_FALSE(out.empty());
  const auto side = nlohmann::json::parse(slurp(out.string() + ".json"));
  CHECK(side.at("level") == 4);
  CHECK(side.at("seed") == 3);
  CHECK(side.at("caption") == "a dog barks then a bell rings");

  const std::string a = (dir / "a.bin").string(), b = (dir / "b.bin").string();
  REQUIRE(cli({"--run-dir", manual, "generate", "--caption", "a dog barks", "--level", "0", "--out", a}).code == 0);
  REQUIRE(cli({"--run-dir", manual, "generate", "--caption", "a dog barks", "--level", "0", "--out", b}).code == 0);
  CHECK(slurp(a) == slurp(b));

  // Rewinding to S1 is legal; skipping from there to S4 is not, even with
  // every file S4 reads still on disk.
  const std::string s1 = slurp(fs::path(manual) / "stage1/checkpoint");
  REQUIRE(cli({"--run-dir", manual, "train", "--stage", "1"}).code == 0);
  CHECK(slurp(fs::path(manual) / "stage1/checkpoint") == s1);
  r = cli({"--run-dir", manual, "train", "--stage", "4"});
  CHECK(r.code == 2);
  CHECK(r.err.find("S1") != std::string::npos);
  fs::remove_all(dir);
}
