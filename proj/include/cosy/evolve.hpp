#pragma once

// Self-evolving data curation: validation statistics, mu - sigma filtering of
// the weak corpus, preference pairs from ranked candidate captions, corpus
// refinement, confidence quantisation, and the stage state machine.
//
// Every operation has an arithmetic kernel over plain scores (what the tests
// pin down) and a model-driven wrapper that produces those scores.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cosy/capteller.hpp"
#include "cosy/corpus.hpp"

namespace cosy::evolve {

// ------------------------------------------------------------------ stats

struct ConfidenceStats {
  double mu = 0.0;
  double sigma = 0.0;  // population standard deviation
  std::size_t n = 0;
  std::string source_split = "val";

  nlohmann::json to_json() const;
  static ConfidenceStats from_json(const nlohmann::json& j);
};

ConfidenceStats stats_from_scores(std::span<const double> scores);
// Scores every record against its own caption. Throws DataError when the
// manifest has fewer than two records.
ConfidenceStats compute_stats(const CapTeller& model, const corpus::Manifest& val);

void save_stats(const ConfidenceStats& s, const std::filesystem::path& path);
ConfidenceStats load_stats(const std::filesystem::path& path);

// Scores each record's own caption, in manifest order.
std::vector<double> score_manifest(const CapTeller& model, const corpus::Manifest& m);

// ----------------------------------------------------------------- filter

// Strictly above mu - sigma.
bool is_high_confidence(double score, const ConfidenceStats& stats);

struct FilterResult {
  corpus::Manifest high;
  corpus::Manifest low;
};

FilterResult filter_by_scores(const corpus::Manifest& weak, std::span<const double> scores,
                              const ConfidenceStats& stats);
FilterResult filter_weak(const CapTeller& model, const corpus::Manifest& weak, const ConfidenceStats& stats);

// ------------------------------------------------------------------ pairs

struct PreferencePair {
  std::string record_id;
  TokenSequence y_w;
  TokenSequence y_l;
  double conf_w = 0.0;
  double conf_l = 0.0;

  bool operator==(const PreferencePair&) const = default;
};

struct Candidate {
  TokenSequence caption;
  double confidence = 0.0;
};

// Ranks candidates by descending confidence (stable, so earlier candidates
// win ties), then pairs each of the top two with each of the bottom two and
// keeps pairs with distinct captions, conf_w > conf_l and a margin of at
// least 2 sigma. Identical (y_w, y_l) pairs are emitted once.
std::vector<PreferencePair> pairs_from_candidates(const std::string& record_id, std::span<const Candidate> candidates,
                                                  double sigma);

struct PairOptions {
  std::size_t n_samples = 5;
  double top_p = 0.9;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

// Candidate i for a record is nucleus-sampled with a seed derived from
// (seed, record id, i); the record's own caption is the last candidate.
// Samples that end immediately (empty captions) are dropped.
std::vector<Candidate> candidates_for(const CapTeller& model, const corpus::Manifest& m,
                                      const corpus::CorpusRecord& r, const PairOptions& options);
std::vector<PreferencePair> build_preference_pairs(const CapTeller& model, const corpus::Manifest& m,
                                                   const ConfidenceStats& stats, const PairOptions& options);

// JSONL: one {"record_id", "y_w", "y_l", "conf_w", "conf_l"} object per line,
// captions as text.
void save_pairs(const std::vector<PreferencePair>& pairs, const std::filesystem::path& path);
std::vector<PreferencePair> load_pairs(const std::filesystem::path& path);

// ----------------------------------------------------------------- refine

// Keeps the original caption unless the synthetic one scores strictly
// higher; the output confidence is the larger of the two.
corpus::CorpusRecord refine_record(const corpus::CorpusRecord& original, const std::string& synthetic_caption,
                                   double conf_original, double conf_synthetic);
corpus::Manifest refine_corpus(const CapTeller& model, const corpus::Manifest& m, std::size_t beam_width = 3);

// -------------------------------------------------------------- quantiser

struct Quantizer {
  std::array<double, 4> boundaries{};

  // Number of boundaries at or below `score`: 0..4.
  int level(double score) const;
  nlohmann::json to_json() const;
  static Quantizer from_json(const nlohmann::json& j);
};

// Boundaries at the 20/40/60/80% order statistics (midway between adjacent
// sorted scores). Throws DataError with fewer than 5 distinct values.
Quantizer build_quantizer(std::span<const double> scores);
Quantizer build_quantizer(const corpus::Manifest& refined);
corpus::Manifest apply_levels(const corpus::Manifest& m, const Quantizer& q);

void save_quantizer(const Quantizer& q, const std::filesystem::path& path);
Quantizer load_quantizer(const std::filesystem::path& path);

// ---------------------------------------------------------- stage machine

enum class Stage { kInit, kS1, kS2, kS3, kS4, kRefine, kGenTrain };
std::string to_string(Stage s);
Stage parse_stage(const std::string& s);

// Legal moves: to the next stage in the chain, or back onto a stage already
// reached (re-running it and invalidating everything after it).
bool is_legal_transition(Stage from, Stage to);

class StageMachine {
 public:
  explicit StageMachine(Stage current = Stage::kInit) : current_(current) {}
  Stage current() const { return current_; }
  // Throws std::logic_error naming both stages on an illegal move.
  void transition(Stage to);

 private:
  Stage current_;
};

}  // namespace cosy::evolve
