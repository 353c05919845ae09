#pragma once

// Caption metrics (BLEU@4, ROUGE-L) and confidence-distribution analysis.

#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cosy/tokenizer.hpp"

namespace cosy::metrics {

// Sentence BLEU@4: geometric mean of clipped 1..4-gram precisions times the
// brevity penalty against the reference length closest to the candidate
// (shorter wins ties). No smoothing: 0 when any precision is 0. Throws
// std::invalid_argument on an empty candidate or no references.
double bleu4(std::span<const int> candidate, std::span<const TokenSequence> references);

// LCS F-measure with beta = 1.2, maximised over references.
double rouge_l(std::span<const int> candidate, std::span<const TokenSequence> references);

inline constexpr double kRougeBeta = 1.2;
inline constexpr std::size_t kDensityGridPoints = 101;

struct MetricReport {
  double bleu4 = 0.0;    // mean sentence score
  double rouge_l = 0.0;  // mean sentence score
  std::size_t n_pairs = 0;

  nlohmann::json to_json() const;
};

// Candidates and their reference lists, index-aligned.
MetricReport evaluate_captions(std::span<const TokenSequence> candidates,
                               std::span<const std::vector<TokenSequence>> references);

struct DistributionReport {
  std::vector<double> normalized_scores;
  double std = 0.0;        // population STD of the normalised scores
  double bandwidth = 0.0;  // Silverman's rule on the normalised scores
  std::vector<std::pair<double, double>> density_grid;  // (x, density), x over [0, 1]

  nlohmann::json to_json() const;
};

// Min-max normalises to [0, 1], then a reflected Gaussian KDE on a 101-point
// grid. Throws std::invalid_argument with fewer than two scores or when all
// scores are equal.
DistributionReport confidence_distribution(std::span<const double> scores);

// Trapezoid rule over the grid.
double integrate_density(const std::vector<std::pair<double, double>>& grid);

void write_metric_report(const MetricReport& r, const std::filesystem::path& path);
// <path> gets the JSON report; <path>.density.tsv the two-column grid.
void write_distribution_report(const DistributionReport& r, const std::filesystem::path& path);

}  // namespace cosy::metrics
