#include "cosy/evolve.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

#include "cosy/errors.hpp"

namespace cosy::evolve {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

void write_json_file(const nlohmann::json& j, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw DataError("cannot write " + path.string());
    out << j.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing file " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

double score_record(const CapTeller& model, const corpus::Manifest& m, const corpus::CorpusRecord& r) {
  return model.confidence(m.load_features(r), corpus::toy_vocabulary().encode(r.caption));
}

}  // namespace

// ------------------------------------------------------------------ stats

nlohmann::json ConfidenceStats::to_json() const {
  return {{"mu", mu}, {"sigma", sigma}, {"n", n}, {"source_split", source_split}};
}

ConfidenceStats ConfidenceStats::from_json(const nlohmann::json& j) {
  try {
    ConfidenceStats s;
    s.mu = j.at("mu").get<double>();
    s.sigma = j.at("sigma").get<double>();
    s.n = j.at("n").get<std::size_t>();
    s.source_split = j.at("source_split").get<std::string>();
    if (s.sigma < 0.0 || s.n < 2 || !std::isfinite(s.mu) || !std::isfinite(s.sigma))
      throw DataError("invalid confidence statistics");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed confidence statistics: ") + e.what());
  }
}

ConfidenceStats stats_from_scores(std::span<const double> scores) {
  if (scores.size() < 2)
    throw DataError("confidence statistics need at least 2 scores, got " + std::to_string(scores.size()));
  ConfidenceStats s;
  s.n = scores.size();
  s.mu = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(s.n);
  double ss = 0.0;
  for (double x : scores) ss += (x - s.mu) * (x - s.mu);
  s.sigma = std::sqrt(ss / static_cast<double>(s.n));
  return s;
}

std::vector<double> score_manifest(const CapTeller& model, const corpus::Manifest& m) {
  std::vector<double> out;
  out.reserve(m.records.size());
  for (const auto& r : m.records) out.push_back(score_record(model, m, r));
  return out;
}

ConfidenceStats compute_stats(const CapTeller& model, const corpus::Manifest& val) {
  if (val.records.empty()) throw DataError("validation manifest is empty");
  auto s = stats_from_scores(score_manifest(model, val));
  s.source_split = corpus::to_string(val.split);
  return s;
}

void save_stats(const ConfidenceStats& s, const std::filesystem::path& path) { write_json_file(s.to_json(), path); }

ConfidenceStats load_stats(const std::filesystem::path& path) { return ConfidenceStats::from_json(read_json_file(path)); }

// ----------------------------------------------------------------- filter

bool is_high_confidence(double score, const ConfidenceStats& stats) { return score > stats.mu - stats.sigma; }

FilterResult filter_by_scores(const corpus::Manifest& weak, std::span<const double> scores,
                              const ConfidenceStats& stats) {
  if (scores.size() != weak.records.size()) throw std::invalid_argument("filter: one score per record required");
  FilterResult out;
  for (auto* m : {&out.high, &out.low}) {
    m->split = weak.split;
    m->base_dir = weak.base_dir;
  }
  out.high.stage_provenance = "S2:high";
  out.low.stage_provenance = "S2:low";
  for (std::size_t i = 0; i < scores.size(); ++i) {
    auto r = weak.records[i];
    r.confidence = std::clamp(scores[i], -1.0, 1.0);
    (is_high_confidence(scores[i], stats) ? out.high : out.low).records.push_back(std::move(r));
  }
  return out;
}

FilterResult filter_weak(const CapTeller& model, const corpus::Manifest& weak, const ConfidenceStats& stats) {
  return filter_by_scores(weak, score_manifest(model, weak), stats);
}

// ------------------------------------------------------------------ pairs

std::vector<PreferencePair> pairs_from_candidates(const std::string& record_id, std::span<const Candidate> candidates,
                                                  double sigma) {
  if (candidates.size() < 4) throw std::invalid_argument("preference pairs need at least 4 candidates");
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return candidates[a].confidence > candidates[b].confidence;
  });
  const std::size_t n = order.size();
  std::vector<PreferencePair> out;
  std::set<std::pair<TokenSequence, TokenSequence>> seen;
  for (std::size_t wi : {order[0], order[1]})
    for (std::size_t li : {order[n - 2], order[n - 1]}) {
      const auto& w = candidates[wi];
      const auto& l = candidates[li];
      if (w.caption == l.caption || !(w.confidence > l.confidence)) continue;
      if (w.confidence - l.confidence < 2.0 * sigma) continue;
      if (!seen.insert({w.caption, l.caption}).second) continue;
      out.push_back({record_id, w.caption, l.caption, w.confidence, l.confidence});
    }
  return out;
}

std::vector<Candidate> candidates_for(const CapTeller& model, const corpus::Manifest& m,
                                      const corpus::CorpusRecord& r, const PairOptions& options) {
  const auto& vocab = corpus::toy_vocabulary();
  const Tensor features = m.load_features(r);
  std::vector<Candidate> out;
  ad::NoGradScope ng;
  const auto queries = model.encode_audio(features);
  const std::uint64_t base = corpus::mix_seed(options.seed, fnv1a(r.id));
  auto score = [&](const TokenSequence& words) { return model.atc_similarity(queries, words).item(); };
  for (std::size_t k = 0; k < options.n_samples; ++k) {
    auto words = model.generate_from_queries(
        queries, DecodeOptions::nucleus(corpus::mix_seed(base, k), options.top_p, options.temperature));
    if (words.empty()) continue;  // an immediate EOS is not a caption
    const double c = score(words);
    out.push_back({std::move(words), c});
  }
  auto truth = vocab.encode(r.caption);
  const double c = score(truth);
  out.push_back({std::move(truth), c});
  return out;
}

std::vector<PreferencePair> build_preference_pairs(const CapTeller& model, const corpus::Manifest& m,
                                                   const ConfidenceStats& stats, const PairOptions& options) {
  if (options.n_samples < 3)
    throw std::invalid_argument("preference pairs need N >= 3 sampled captions, got " + std::to_string(options.n_samples));
  std::vector<PreferencePair> out;
  for (const auto& r : m.records) {
    auto cands = candidates_for(model, m, r, options);
    if (cands.size() < 4) continue;
    auto p = pairs_from_candidates(r.id, cands, stats.sigma);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

void save_pairs(const std::vector<PreferencePair>& pairs, const std::filesystem::path& path) {
  const auto& vocab = corpus::toy_vocabulary();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& p : pairs) {
      nlohmann::ordered_json j;
      j["record_id"] = p.record_id;
      j["y_w"] = vocab.decode(p.y_w);
      j["y_l"] = vocab.decode(p.y_l);
      j["conf_w"] = p.conf_w;
      j["conf_l"] = p.conf_l;
      out << j.dump() << '\n';
    }
  }
  std::filesystem::rename(tmp, path);
}

std::vector<PreferencePair> load_pairs(const std::filesystem::path& path) {
  const auto& vocab = corpus::toy_vocabulary();
  std::ifstream in(path);
  if (!in) throw DataError("missing pairs file " + path.string());
  std::vector<PreferencePair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    PreferencePair p;
    try {
      auto j = nlohmann::json::parse(line);
      for (const auto& [k, v] : j.items())
        if (k != "record_id" && k != "y_w" && k != "y_l" && k != "conf_w" && k != "conf_l")
          throw DataError(where + "unknown key '" + k + "'");
      p.record_id = j.at("record_id").get<std::string>();
      p.y_w = vocab.encode(j.at("y_w").get<std::string>());
      p.y_l = vocab.encode(j.at("y_l").get<std::string>());
      p.conf_w = j.at("conf_w").get<double>();
      p.conf_l = j.at("conf_l").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + e.what());
    }
    if (p.y_w.empty() || p.y_l.empty() || p.y_w == p.y_l) throw DataError(where + "pair captions must differ and be non-empty");
    out.push_back(std::move(p));
  }
  return out;
}

// ----------------------------------------------------------------- refine

corpus::CorpusRecord refine_record(const corpus::CorpusRecord& original, const std::string& synthetic_caption,
                                   double conf_original, double conf_synthetic) {
  corpus::CorpusRecord out = original;
  const bool take = !synthetic_caption.empty() && synthetic_caption != original.caption &&
                    conf_synthetic > conf_original;
  if (take) {
    out.caption = synthetic_caption;
    out.source = corpus::Source::kSyntheticCaption;
  }
  out.confidence = std::clamp(std::max(conf_original, take ? conf_synthetic : conf_original), -1.0, 1.0);
  out.level.reset();
  return out;
}

corpus::Manifest refine_corpus(const CapTeller& model, const corpus::Manifest& m, std::size_t beam_width) {
  const auto& vocab = corpus::toy_vocabulary();
  corpus::Manifest out;
  out.split = m.split;
  out.base_dir = m.base_dir;
  out.stage_provenance = "REFINE";
  ad::NoGradScope ng;
  for (const auto& r : m.records) {
    const auto queries = model.encode_audio(m.load_features(r));
    const double conf_orig = model.atc_similarity(queries, vocab.encode(r.caption)).item();
    const auto syn = model.generate_from_queries(queries, DecodeOptions::beam(beam_width));
    const double conf_syn = syn.empty() ? conf_orig : model.atc_similarity(queries, syn).item();
    out.records.push_back(refine_record(r, vocab.decode(syn), conf_orig, conf_syn));
  }
  return out;
}

// -------------------------------------------------------------- quantiser

int Quantizer::level(double score) const {
  return static_cast<int>(std::upper_bound(boundaries.begin(), boundaries.end(), score) - boundaries.begin());
}

nlohmann::json Quantizer::to_json() const {
  return {{"boundaries", boundaries}, {"levels", corpus::kNumLevels}};
}

Quantizer Quantizer::from_json(const nlohmann::json& j) {
  Quantizer q;
  try {
    auto b = j.at("boundaries").get<std::vector<double>>();
    if (b.size() != 4) throw DataError("quantizer needs 4 boundaries");
    std::copy(b.begin(), b.end(), q.boundaries.begin());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed quantizer: ") + e.what());
  }
  for (std::size_t i = 1; i < 4; ++i)
    if (!(q.boundaries[i] > q.boundaries[i - 1])) throw DataError("quantizer boundaries are not strictly ascending");
  return q;
}

Quantizer build_quantizer(std::span<const double> scores) {
  std::vector<double> s(scores.begin(), scores.end());
  std::sort(s.begin(), s.end());
  std::set<double> uniq(s.begin(), s.end());
  if (uniq.size() < 5)
    throw DataError("quantizer needs at least 5 distinct confidence values, got " + std::to_string(uniq.size()));
  const std::size_t n = s.size();
  Quantizer q;
  for (std::size_t k = 1; k <= 4; ++k) {
    const std::size_t hi = k * n / 5;  // first index of level k
    const double b = hi == 0 ? s[0] : 0.5 * (s[hi - 1] + s[hi]);
    q.boundaries[k - 1] = b;
  }
  for (std::size_t i = 1; i < 4; ++i)
    if (!(q.boundaries[i] > q.boundaries[i - 1])) q.boundaries[i] = std::nextafter(q.boundaries[i - 1], 2.0);
  return q;
}

Quantizer build_quantizer(const corpus::Manifest& refined) {
  std::vector<double> scores;
  for (const auto& r : refined.records) {
    if (!r.confidence) throw DataError("record '" + r.id + "' has no confidence to quantise");
    scores.push_back(*r.confidence);
  }
  return build_quantizer(scores);
}

corpus::Manifest apply_levels(const corpus::Manifest& m, const Quantizer& q) {
  corpus::Manifest out = m;
  for (auto& r : out.records) {
    if (!r.confidence) throw DataError("record '" + r.id + "' has no confidence to quantise");
    r.level = q.level(*r.confidence);
  }
  return out;
}

void save_quantizer(const Quantizer& q, const std::filesystem::path& path) { write_json_file(q.to_json(), path); }

Quantizer load_quantizer(const std::filesystem::path& path) { return Quantizer::from_json(read_json_file(path)); }

// ---------------------------------------------------------- stage machine

std::string to_string(Stage s) {
  switch (s) {
    case Stage::kInit: return "INIT";
    case Stage::kS1: return "S1";
    case Stage::kS2: return "S2";
    case Stage::kS3: return "S3";
    case Stage::kS4: return "S4";
    case Stage::kRefine: return "REFINE";
    case Stage::kGenTrain: return "GEN_TRAIN";
  }
  return "?";
}

Stage parse_stage(const std::string& s) {
  for (Stage st : {Stage::kInit, Stage::kS1, Stage::kS2, Stage::kS3, Stage::kS4, Stage::kRefine, Stage::kGenTrain})
    if (to_string(st) == s) return st;
  throw DataError("unknown stage '" + s + "'");
}

bool is_legal_transition(Stage from, Stage to) {
  const int f = static_cast<int>(from), t = static_cast<int>(to);
  return t == f + 1 || (to != Stage::kInit && t <= f);
}

void StageMachine::transition(Stage to) {
  if (!is_legal_transition(current_, to))
    throw std::logic_error("illegal stage transition " + to_string(current_) + " -> " + to_string(to));
  current_ = to;
}

}  // namespace cosy::evolve
