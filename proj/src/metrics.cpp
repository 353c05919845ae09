#include "cosy/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <stdexcept>

#include "cosy/errors.hpp"

namespace cosy::metrics {

namespace {

using NGram = std::vector<int>;

std::map<NGram, std::size_t> ngram_counts(std::span<const int> s, std::size_t n) {
  std::map<NGram, std::size_t> counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[NGram(s.begin() + i, s.begin() + i + n)];
  return counts;
}

void check_inputs(std::span<const int> candidate, std::span<const TokenSequence> references, const char* who) {
  if (candidate.empty()) throw std::invalid_argument(std::string(who) + ": empty candidate");
  if (references.empty()) throw std::invalid_argument(std::string(who) + ": no references");
}

std::size_t lcs_length(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

}  // namespace

double bleu4(std::span<const int> candidate, std::span<const TokenSequence> references) {
  check_inputs(candidate, references, "bleu4");
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto cand = ngram_counts(candidate, n);
    std::size_t total = 0, clipped = 0;
    for (const auto& [gram, count] : cand) {
      total += count;
      std::size_t max_ref = 0;
      for (const auto& ref : references) {
        const auto rc = ngram_counts(ref, n);
        const auto it = rc.find(gram);
        if (it != rc.end()) max_ref = std::max(max_ref, it->second);
      }
      clipped += std::min(count, max_ref);
    }
    if (clipped == 0) return 0.0;
    log_sum += std::log(static_cast<double>(clipped) / static_cast<double>(total));
  }
  const double c = static_cast<double>(candidate.size());
  std::size_t r = references.front().size();
  for (const auto& ref : references) {
    const auto d = [&](std::size_t len) { return std::abs(static_cast<double>(len) - c); };
    if (d(ref.size()) < d(r) || (d(ref.size()) == d(r) && ref.size() < r)) r = ref.size();
  }
  const double bp = c > static_cast<double>(r) ? 1.0 : std::exp(1.0 - static_cast<double>(r) / c);
  return bp * std::exp(log_sum / 4.0);
}

double rouge_l(std::span<const int> candidate, std::span<const TokenSequence> references) {
  check_inputs(candidate, references, "rouge_l");
  double best = 0.0;
  const double b2 = kRougeBeta * kRougeBeta;
  for (const auto& ref : references) {
    if (ref.empty()) continue;
    const auto lcs = static_cast<double>(lcs_length(candidate, ref));
    if (lcs == 0.0) continue;
    const double p = lcs / static_cast<double>(candidate.size());
    const double r = lcs / static_cast<double>(ref.size());
    best = std::max(best, (1.0 + b2) * p * r / (r + b2 * p));
  }
  return best;
}

nlohmann::json MetricReport::to_json() const {
  return {{"bleu4", bleu4}, {"rouge_l", rouge_l}, {"n_pairs", n_pairs}};
}

MetricReport evaluate_captions(std::span<const TokenSequence> candidates,
                               std::span<const std::vector<TokenSequence>> references) {
  if (candidates.size() != references.size())
    throw std::invalid_argument("evaluate_captions: candidate and reference counts differ");
  if (candidates.empty()) throw std::invalid_argument("evaluate_captions: nothing to evaluate");
  MetricReport r;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    // An empty hypothesis scores zero rather than aborting the evaluation.
    if (!candidates[i].empty()) {
      r.bleu4 += bleu4(candidates[i], references[i]);
      r.rouge_l += rouge_l(candidates[i], references[i]);
    }
  }
  r.n_pairs = candidates.size();
  r.bleu4 /= static_cast<double>(r.n_pairs);
  r.rouge_l /= static_cast<double>(r.n_pairs);
  return r;
}

nlohmann::json DistributionReport::to_json() const {
  return {{"std", std}, {"bandwidth", bandwidth}, {"n", normalized_scores.size()},
          {"normalized_scores", normalized_scores}};
}

DistributionReport confidence_distribution(std::span<const double> scores) {
  if (scores.size() < 2) throw std::invalid_argument("confidence_distribution: need at least two scores");
  const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) throw std::invalid_argument("confidence_distribution: all scores are equal");

  DistributionReport r;
  const double n = static_cast<double>(scores.size());
  for (double s : scores) r.normalized_scores.push_back(s == hi ? 1.0 : (s - lo) / (hi - lo));
  double mean = 0.0;
  for (double x : r.normalized_scores) mean += x;
  mean /= n;
  double ss = 0.0;
  for (double x : r.normalized_scores) ss += (x - mean) * (x - mean);
  r.std = std::sqrt(ss / n);

  // Silverman: 0.9 min(s, IQR / 1.34) n^(-1/5), s the sample STD.
  std::vector<double> sorted = r.normalized_scores;
  std::sort(sorted.begin(), sorted.end());
  auto quantile = [&](double q) {
    const double pos = q * (n - 1.0);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - static_cast<double>(i);
    return i + 1 < sorted.size() ? sorted[i] + frac * (sorted[i + 1] - sorted[i]) : sorted[i];
  };
  const double s = std::sqrt(ss / (n - 1.0));
  const double iqr = quantile(0.75) - quantile(0.25);
  const double spread = iqr > 0.0 ? std::min(s, iqr / 1.34) : s;
  r.bandwidth = 0.9 * spread * std::pow(n, -0.2);

  // Reflection at 0 and 1 keeps the kernel mass inside the unit interval.
  const double h = r.bandwidth;
  const double norm = 1.0 / (n * h * std::sqrt(2.0 * std::numbers::pi));
  auto phi = [&](double u) { return std::exp(-0.5 * u * u); };
  for (std::size_t g = 0; g < kDensityGridPoints; ++g) {
    const double x = static_cast<double>(g) / static_cast<double>(kDensityGridPoints - 1);
    double acc = 0.0;
    for (double xi : r.normalized_scores)
      acc += phi((x - xi) / h) + phi((x + xi) / h) + phi((x - (2.0 - xi)) / h);
    r.density_grid.emplace_back(x, norm * acc);
  }
  return r;
}

double integrate_density(const std::vector<std::pair<double, double>>& grid) {
  double area = 0.0;
  for (std::size_t i = 1; i < grid.size(); ++i)
    area += 0.5 * (grid[i].second + grid[i - 1].second) * (grid[i].first - grid[i - 1].first);
  return area;
}

void write_metric_report(const MetricReport& r, const std::filesystem::path& path) {
  write_text(path, r.to_json().dump(2) + "\n");
}

void write_distribution_report(const DistributionReport& r, const std::filesystem::path& path) {
  write_text(path, r.to_json().dump(2) + "\n");
  std::string tsv = "x\tdensity\n";
  char line[64];
  for (const auto& [x, d] : r.density_grid) {
    std::snprintf(line, sizeof line, "%.2f\t%.9g\n", x, d);
    tsv += line;
  }
  write_text(path.string() + ".density.tsv", tsv);
}

}  // namespace cosy::metrics
