#pragma once

// Run directory layout and the stage runners behind every CLI subcommand.
//
//   runs/<run-id>/
//     config.json  state.json  stats.json  quantizer.json
//     features/             toy clip matrices
//     manifests/            well, weak, val, test, high, low, pairs, refined (.jsonl)
//     stage{1,3,4}/         checkpoint (+ resume while training)
//     generator/checkpoint
//     reports/              caption and confidence reports
//     generated/            sampled mels + JSON sidecars

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cosy/config.hpp"
#include "cosy/evolve.hpp"
#include "cosy/metrics.hpp"

namespace cosy::pipeline {

struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path state() const { return root / "state.json"; }
  std::filesystem::path stats() const { return root / "stats.json"; }
  std::filesystem::path quantizer() const { return root / "quantizer.json"; }
  std::filesystem::path manifest(const std::string& name) const { return root / "manifests" / (name + ".jsonl"); }
  std::filesystem::path stage_dir(int stage) const { return root / ("stage" + std::to_string(stage)); }
  std::filesystem::path checkpoint(int stage) const { return stage_dir(stage) / "checkpoint"; }
  std::filesystem::path resume(int stage) const { return stage_dir(stage) / "resume"; }
  std::filesystem::path generator_checkpoint() const { return root / "generator" / "checkpoint"; }
  std::filesystem::path reports() const { return root / "reports"; }
  std::filesystem::path generated() const { return root / "generated"; }
};

struct RunState {
  evolve::Stage stage = evolve::Stage::kInit;
  std::vector<std::string> history;  // every stage entered, in order

  nlohmann::json to_json() const;
  static RunState from_json(const nlohmann::json& j);
};

RunState load_state(const RunLayout& run);  // INIT when absent
void save_state(const RunLayout& run, const RunState& s);

// Everything a stage runner needs; `log` receives one line per milestone.
struct Context {
  RunLayout run;
  RunConfig config;
  std::ostream* log = nullptr;
  std::optional<std::size_t> stop_after;  // interrupt training after this many steps
};

// Writes config.json, the toy corpus (well/weak/val/test manifests) and an
// INIT state. Refuses to overwrite a different existing config.
void init_run(const Context& ctx);
// Loads config.json from the run directory.
Context open_run(const std::filesystem::path& root, std::ostream* log);

// Training stage 1, 3 or 4 (stage 1 also writes stats.json). Returns the
// training report; report.completed is false when interrupted.
TrainReport train(const Context& ctx, int stage);
evolve::ConfidenceStats stats(const Context& ctx);
evolve::FilterResult filter(const Context& ctx);
std::vector<evolve::PreferencePair> pairs(const Context& ctx);
corpus::Manifest refine(const Context& ctx);  // refine + quantize
evolve::Quantizer quantize(const Context& ctx);
gen::GenTrainReport gen_train(const Context& ctx);

struct GenerateRequest {
  std::string caption;
  int level = 4;
  gen::SampleOptions options;
  std::filesystem::path out;  // empty: generated/<slug>_L<level>_s<seed>.bin
};
std::filesystem::path generate(const Context& ctx, const GenerateRequest& request);

// Greedy captions for a split against the records' captions.
metrics::MetricReport eval_captions(const Context& ctx, int stage, const std::string& split);
metrics::DistributionReport eval_confidence(const Context& ctx, int stage, const std::string& split);

// init (when needed) then S1 -> S2 -> S3 -> S4 -> REFINE -> GEN_TRAIN, with
// stage-1 and stage-3 caption evaluations on the test split. Returns the
// summary also written to reports/pipeline.json.
nlohmann::json run_pipeline(Context& ctx);

}  // namespace cosy::pipeline
