#pragma once

// Resumable captioner training for one stage.
//
// Batch composition is a pure function of (seed, stage, epoch), so the global
// step count alone locates the run; a resume file holds the parameters, the
// optimizer moments and that count.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "cosy/capteller.hpp"
#include "cosy/objectives.hpp"
#include "cosy/params.hpp"

namespace cosy {

struct StageSchedule {
  std::size_t epochs = 40;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::size_t batch_size = 16;
  std::size_t dpo_batch = 4;
  std::size_t checkpoint_every = 50;  // steps between resume files; 0 disables

  void validate() const;
};

struct TrainOptions {
  int stage = 1;
  StageSchedule schedule;
  std::uint64_t seed = 0;
  DPOConfig dpo;
  // Where the resume file lives; empty disables resuming.
  std::filesystem::path resume_path;
  // Stop (after writing a resume file) once this many global steps are done.
  std::optional<std::size_t> stop_after;
};

struct TrainReport {
  std::size_t steps = 0;
  std::size_t steps_per_epoch = 0;
  bool completed = false;
  bool resumed = false;
  std::vector<double> epoch_losses;  // mean loss per finished epoch run in this call
};

// Contiguous batches of an epoch's permutation; a trailing single item joins
// the previous batch so every batch has at least two.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    int stage, std::size_t epoch);

// Trains `model` in place. At stage 4 `pairs` and `reference` are required;
// a step then adds the DPO loss over the next dpo_batch pairs (cycling), so
// captioner and preference batches interleave 1:1.
TrainReport train_stage(CapTeller& model, const std::vector<BatchItem>& data,
                        const std::vector<PreferenceExample>* pairs, const CapTeller* reference,
                        const TrainOptions& options);

}  // namespace cosy
