#pragma once

// Run configuration: one JSON document with a default for every field.
// Unknown keys are rejected at every level so typos fail loudly.

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "cosy/capteller.hpp"
#include "cosy/corpus.hpp"
#include "cosy/evolve.hpp"
#include "cosy/generator.hpp"
#include "cosy/objectives.hpp"
#include "cosy/trainer.hpp"

namespace cosy {

struct RunConfig {
  std::uint64_t seed = 7;
  corpus::ToyCorpusConfig corpus;  // corpus.seed is ignored; the run seed is used
  CapTellerConfig model;           // vocab_size 0 means "the toy vocabulary"
  StageSchedule stage1;
  StageSchedule stage3;
  StageSchedule stage4;
  DPOConfig dpo;
  evolve::PairOptions pairs;  // pairs.seed is ignored; derived from the run seed
  std::size_t refine_beam = 3;
  gen::GeneratorConfig generator;  // vocab_size 0 means "the toy vocabulary"
  gen::GenTrainSchedule generator_training;
  gen::SampleOptions sampling;  // sampling.seed is the default for `generate`

  RunConfig();

  // Fills vocabulary sizes and checks every section.
  void finalize();
  const StageSchedule& schedule(int stage) const;
  StageSchedule& schedule(int stage);

  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys throw std::invalid_argument.
  static RunConfig from_json(const nlohmann::json& j);
};

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& c, const std::filesystem::path& path);

// Seeds for every random process in a run, derived from the run seed.
namespace seeds {
std::uint64_t corpus(const RunConfig& c);
std::uint64_t model_init(const RunConfig& c);
std::uint64_t training(const RunConfig& c, int stage);
std::uint64_t pairs(const RunConfig& c);
std::uint64_t generator_init(const RunConfig& c);
std::uint64_t generator_training(const RunConfig& c);
}  // namespace seeds

}  // namespace cosy
