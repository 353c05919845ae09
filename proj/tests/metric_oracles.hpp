#pragma once

// Brute-force caption-metric oracles. Test-only and deliberately naive:
// n-gram counts by direct scanning, LCS by enumerating subsequences.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cosy/corpus.hpp"
#include "cosy/tokenizer.hpp"

namespace cosy::testing {

inline bool same_ngram(const TokenSequence& a, std::size_t i, const TokenSequence& b, std::size_t j, std::size_t n) {
  for (std::size_t k = 0; k < n; ++k)
    if (a[i + k] != b[j + k]) return false;
  return true;
}

inline std::size_t occurrences(const TokenSequence& hay, const TokenSequence& needle_src, std::size_t at, std::size_t n) {
  std::size_t c = 0;
  for (std::size_t j = 0; j + n <= hay.size(); ++j)
    if (same_ngram(hay, j, needle_src, at, n)) ++c;
  return c;
}

inline double brute_bleu4(const TokenSequence& cand, const std::vector<TokenSequence>& refs) {
  double product = 1.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    if (cand.size() < n) return 0.0;
    // Each candidate position contributes min(count_c, max_ref) / count_c of
    // its n-gram, which sums to the clipped count per distinct n-gram.
    double clipped = 0.0;
    const double total = static_cast<double>(cand.size() - n + 1);
    for (std::size_t i = 0; i + n <= cand.size(); ++i) {
      const std::size_t cc = occurrences(cand, cand, i, n);
      std::size_t mr = 0;
      for (const auto& r : refs) mr = std::max(mr, occurrences(r, cand, i, n));
      clipped += static_cast<double>(std::min(cc, mr)) / static_cast<double>(cc);
    }
    clipped = std::round(clipped);
    if (clipped == 0.0) return 0.0;
    product *= clipped / total;
  }
  const double c = static_cast<double>(cand.size());
  double best_len = -1.0, best_gap = 1e300;
  for (const auto& r : refs) {
    const double len = static_cast<double>(r.size()), gap = std::abs(len - c);
    if (gap < best_gap || (gap == best_gap && len < best_len)) {
      best_gap = gap;
      best_len = len;
    }
  }
  const double bp = c > best_len ? 1.0 : std::exp(1.0 - best_len / c);
  return bp * std::pow(product, 0.25);
}

inline bool is_subsequence(const TokenSequence& sub, const TokenSequence& s) {
  std::size_t j = 0;
  for (std::size_t i = 0; i < s.size() && j < sub.size(); ++i)
    if (s[i] == sub[j]) ++j;
  return j == sub.size();
}

// Longest subsequence of `a` (all 2^|a| subsets) that is also one of `b`.
inline std::size_t brute_lcs(const TokenSequence& a, const TokenSequence& b) {
  std::size_t best = 0;
  for (std::uint32_t mask = 0; mask < (1u << a.size()); ++mask) {
    TokenSequence sub;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (mask & (1u << i)) sub.push_back(a[i]);
    if (sub.size() > best && is_subsequence(sub, b)) best = sub.size();
  }
  return best;
}

inline double brute_rouge_l(const TokenSequence& cand, const std::vector<TokenSequence>& refs) {
  double best = 0.0;
  for (const auto& r : refs) {
    const double lcs = static_cast<double>(brute_lcs(cand, r));
    if (lcs == 0.0) continue;
    const double p = lcs / static_cast<double>(cand.size()), rec = lcs / static_cast<double>(r.size());
    const double beta2 = 1.44;
    best = std::max(best, (1.0 + beta2) * p * rec / (rec + beta2 * p));
  }
  return best;
}

struct CaptionPair {
  TokenSequence candidate;
  std::vector<TokenSequence> references;
};

// Toy captions from random event lists; the candidate is a lightly mutated
// reference so scores spread over (0, 1]. Candidates stay under 20 words to
// keep the subsequence enumeration cheap.
inline std::vector<CaptionPair> random_caption_pairs(std::size_t count, std::uint64_t seed) {
  const auto& vocab = corpus::toy_vocabulary();
  std::mt19937_64 rng(seed);
  auto random_caption = [&](std::size_t max_events) {
    std::uniform_int_distribution<int> ev(0, static_cast<int>(corpus::kNumEvents) - 1);
    std::uniform_int_distribution<std::size_t> ne(1, max_events);
    std::vector<int> events(ne(rng));
    for (auto& e : events) e = ev(rng);
    return vocab.encode(corpus::compose_caption(events));
  };
  std::uniform_int_distribution<int> word(kNumSpecialTokens, static_cast<int>(vocab.size()) - 1);
  std::vector<CaptionPair> out;
  while (out.size() < count) {
    CaptionPair p;
    std::uniform_int_distribution<std::size_t> nref(1, 3);
    const std::size_t k = nref(rng);
    for (std::size_t r = 0; r < k; ++r) p.references.push_back(random_caption(3));
    const std::uint64_t mode = rng() % 3;
    if (mode == 0) {
      p.candidate = random_caption(3);
    } else {
      p.candidate = p.references[rng() % k];
      const std::size_t edits = 1 + rng() % 3;
      for (std::size_t e = 0; e < edits && !p.candidate.empty(); ++e) {
        const std::size_t at = rng() % p.candidate.size();
        switch (rng() % 3) {
          case 0: p.candidate[at] = word(rng); break;
          case 1: p.candidate.erase(p.candidate.begin() + static_cast<long>(at)); break;
          default: p.candidate.insert(p.candidate.begin() + static_cast<long>(at), word(rng)); break;
        }
      }
    }
    if (p.candidate.empty() || p.candidate.size() > 19) continue;
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace cosy::testing
