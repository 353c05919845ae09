#pragma once

// Corpus records, manifests, and the synthetic toy corpus.
//
// A toy clip is a T x 32 feature matrix built from a sum of fixed event
// templates plus Gaussian noise. Its clean caption lists the events in onset
// order ("a dog barks then a bell rings"), so caption correctness is
// checkable against the generator.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cosy/tensor.hpp"
#include "cosy/tokenizer.hpp"

namespace cosy::corpus {

inline constexpr std::size_t kFeatureBins = 32;
inline constexpr std::size_t kNumEvents = 16;
inline constexpr std::size_t kMaxCaptionWords = 24;
inline constexpr int kNumLevels = 5;

enum class Source { kWellLabeled, kWeakLabeled, kSyntheticCaption };
enum class Split { kTrain, kVal, kTest };

std::string to_string(Source s);
std::string to_string(Split s);
Source parse_source(const std::string& s);
Split parse_split(const std::string& s);

struct CorpusRecord {
  std::string id;
  std::string features_path;
  std::string caption;
  std::optional<std::vector<int>> tags;
  std::optional<double> confidence;
  std::optional<int> level;
  Source source = Source::kWellLabeled;

  bool operator==(const CorpusRecord&) const = default;
};

struct Manifest {
  std::vector<CorpusRecord> records;
  Split split = Split::kTrain;
  std::string stage_provenance;
  // Directory that relative features_path values are resolved against. Not
  // serialised; load_manifest sets it to the manifest's own directory.
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const CorpusRecord& r) const;
  Tensor load_features(const CorpusRecord& r) const;

  bool operator==(const Manifest& o) const {
    return records == o.records && split == o.split && stage_provenance == o.stage_provenance;
  }
};

// Throws DataError describing the first violated record invariant.
void validate_record(const CorpusRecord& r);

Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

// ----------------------------------------------------------------- toy data

const Vocabulary& toy_vocabulary();

struct EventSpec {
  const char* noun;
  const char* verb;
};
std::span<const EventSpec> event_specs();
std::string event_phrase(int event);
std::string compose_caption(std::span<const int> events_in_order);

enum class Corruption { kDeletion, kSubstitution, kReordering, kMixed };
std::string to_string(Corruption c);
Corruption parse_corruption(const std::string& s);

struct ToyCorpusConfig {
  std::uint64_t seed = 7;
  std::size_t n_well = 16;
  std::size_t n_weak = 64;
  std::size_t n_val = 16;
  std::size_t n_test = 16;
  double p_corrupt = 0.5;
  Corruption corruption = Corruption::kMixed;
  std::uint64_t template_seed = 1234;
  double noise_std = 0.05;
  std::size_t min_frames = 32;
  std::size_t max_frames = 128;
  std::size_t min_events = 2;
  std::size_t max_events = 3;
};

// Ground truth behind one synthetic clip.
struct ToyClip {
  std::string id;
  Tensor features;               // T x 32
  std::vector<int> events;       // onset order
  std::string clean_caption;
  std::string caption;           // possibly corrupted
  std::optional<std::vector<int>> tags;
};

// One fixed template per event: L_k x 32 rows (frames x bins).
std::vector<Tensor> event_templates(std::uint64_t template_seed);

enum class ClipKind { kWell, kWeak, kVal, kTest };

// Deterministic in (config, kind, index); independent of p_corrupt except
// for the caption itself.
ToyClip make_toy_clip(const ToyCorpusConfig& config, ClipKind kind, std::size_t index);

// Writes feature files to <run_dir>/features/ and returns manifests whose
// base_dir is <run_dir>/manifests. The pair is (well-labelled train, weak).
std::pair<Manifest, Manifest> generate_toy_corpus(const ToyCorpusConfig& config, const std::filesystem::path& run_dir);
Manifest generate_toy_split(const ToyCorpusConfig& config, ClipKind kind, std::size_t count,
                            const std::filesystem::path& run_dir);

// Generator-side view of a clip: 16 x 64 (bins x frames), adjacent bins
// averaged and frames linearly resampled.
inline constexpr std::size_t kMelBins = 16;
inline constexpr std::size_t kMelFrames = 64;
Tensor to_mel(const Tensor& features);

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace cosy::corpus
