#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "cosy/errors.hpp"
#include "cosy/evolve.hpp"

using namespace cosy;
using namespace cosy::evolve;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cosy_evolve_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

corpus::Manifest manifest_with_ids(std::size_t n) {
  corpus::Manifest m;
  for (std::size_t i = 0; i < n; ++i) {
    corpus::CorpusRecord r;
    r.id = "r" + std::to_string(i);
    r.features_path = "x.bin";
    r.caption = "a dog barks";
    r.source = corpus::Source::kWeakLabeled;
    m.records.push_back(r);
  }
  return m;
}

CapTeller random_model(std::uint64_t seed) {
  CapTellerConfig c;
  c.vocab_size = corpus::toy_vocabulary().size();
  c.n_layers = 2;
  return CapTeller(c, seed);
}

// Independent re-ranking: sort (confidence, index) pairs with a full
// comparator, then enumerate winner x loser combinations.
std::vector<PreferencePair> brute_force_pairs(const std::vector<Candidate>& c, double sigma) {
  std::vector<std::pair<double, std::size_t>> ranked;
  for (std::size_t i = 0; i < c.size(); ++i) ranked.push_back({c[i].confidence, i});
  std::sort(ranked.begin(), ranked.end(), [](auto a, auto b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  const std::size_t n = ranked.size();
  std::vector<PreferencePair> out;
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = n - 2; b < n; ++b) {
      const auto& w = c[ranked[a].second];
      const auto& l = c[ranked[b].second];
      if (w.caption == l.caption || w.confidence <= l.confidence || w.confidence - l.confidence < 2 * sigma) continue;
      bool dup = false;
      for (const auto& p : out) dup |= p.y_w == w.caption && p.y_l == l.caption;
      if (!dup) out.push_back({"x", w.caption, l.caption, w.confidence, l.confidence});
    }
  return out;
}

}  // namespace

TEST_CASE("stats arithmetic") {
  std::vector<double> same{0.5, 0.5};
  auto s = stats_from_scores(same);
  CHECK(s.mu == 0.5);
  CHECK(s.sigma == 0.0);
  std::vector<double> three{0.2, 0.4, 0.6};
  s = stats_from_scores(three);
  CHECK(s.mu == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(s.sigma == doctest::Approx(std::sqrt(0.08 / 3.0)).epsilon(1e-12));
  CHECK(std::abs(s.sigma - 0.1633) < 1e-4);
  std::vector<double> perm{0.6, 0.2, 0.4};
  auto p = stats_from_scores(perm);
  CHECK(p.mu == doctest::Approx(s.mu).epsilon(1e-15));
  CHECK(p.sigma == doctest::Approx(s.sigma).epsilon(1e-15));
  std::vector<double> one{0.1};
  CHECK_THROWS_AS(stats_from_scores(one), DataError);
}

TEST_CASE("stats json round trip") {
  auto dir = scratch("stats");
  ConfidenceStats s{0.25, 0.125, 7, "val"};
  save_stats(s, dir / "stats.json");
  auto back = load_stats(dir / "stats.json");
  CHECK(back.mu == s.mu);
  CHECK(back.sigma == s.sigma);
  CHECK(back.n == s.n);
  CHECK_THROWS_AS(load_stats(dir / "none.json"), DataError);
}

TEST_CASE("mu - sigma threshold") {
  ConfidenceStats st{0.6, 0.2, 10, "val"};
  auto m = manifest_with_ids(3);
  std::vector<double> scores{0.9, 0.5, 0.2};
  auto r = filter_by_scores(m, scores, st);
  REQUIRE(r.high.records.size() == 2);
  REQUIRE(r.low.records.size() == 1);
  CHECK(*r.high.records[0].confidence == 0.9);
  CHECK(*r.high.records[1].confidence == 0.5);
  CHECK(*r.low.records[0].confidence == 0.2);

  ConfidenceStats flat{0.4, 0.0, 3, "val"};
  std::vector<double> eq{0.4, 0.4, 0.4};
  auto r2 = filter_by_scores(m, eq, flat);
  CHECK(r2.high.records.empty());
  CHECK(r2.low.records.size() == 3);
}

TEST_CASE("filter partitions the input") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  auto m = manifest_with_ids(200);
  std::vector<double> scores(200);
  for (auto& s : scores) s = u(rng);
  auto st = stats_from_scores(scores);
  auto r = filter_by_scores(m, scores, st);
  std::set<std::string> hi, lo;
  for (const auto& x : r.high.records) hi.insert(x.id);
  for (const auto& x : r.low.records) lo.insert(x.id);
  CHECK(hi.size() + lo.size() == 200);
  for (const auto& id : hi) CHECK(lo.count(id) == 0);
}

TEST_CASE("kept fraction under Gaussian scores is Phi(1)") {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> nd(0.3, 0.1);
  auto m = manifest_with_ids(10000);
  std::vector<double> scores(10000);
  for (auto& s : scores) s = nd(rng);
  auto st = stats_from_scores(scores);
  auto r = filter_by_scores(m, scores, st);
  const double kept = static_cast<double>(r.high.records.size()) / 10000.0;
  const double phi1 = 0.5 * std::erfc(-1.0 / std::sqrt(2.0));
  CHECK(std::abs(kept - phi1) <= 0.02);
}

TEST_CASE("preference pairs from four ranked candidates") {
  std::vector<Candidate> c{{{5}, 0.9}, {{6}, 0.8}, {{7}, 0.3}, {{8}, 0.1}};
  auto pairs = pairs_from_candidates("id", c, 0.2);
  REQUIRE(pairs.size() == 4);
  std::vector<double> margins;
  for (const auto& p : pairs) {
    margins.push_back(p.conf_w - p.conf_l);
    CHECK(p.conf_w - p.conf_l >= 0.4);
  }
  std::sort(margins.begin(), margins.end());
  const std::vector<double> expect{0.5, 0.6, 0.7, 0.8};
  for (std::size_t i = 0; i < 4; ++i) CHECK(margins[i] == doctest::Approx(expect[i]).epsilon(1e-12));

  std::vector<Candidate> same{{{5}, 0.9}, {{5}, 0.8}, {{5}, 0.3}, {{5}, 0.1}};
  CHECK(pairs_from_candidates("id", same, 0.0).empty());
  CHECK_THROWS(pairs_from_candidates("id", std::vector<Candidate>(3), 0.1));
}

TEST_CASE("preference pairs agree with a brute-force re-ranking") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  std::uniform_int_distribution<int> tok(5, 8);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<Candidate> c(6);
    for (auto& x : c) {
      x.caption = {tok(rng), tok(rng)};
      // coarse grid so ties occur
      x.confidence = std::round(u(rng) * 4) / 4;
    }
    const double sigma = std::abs(u(rng)) * 0.3;
    auto got = pairs_from_candidates("x", c, sigma);
    auto want = brute_force_pairs(c, sigma);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].y_w == want[i].y_w);
      CHECK(got[i].y_l == want[i].y_l);
      CHECK(got[i].conf_w - got[i].conf_l >= 2 * sigma);
      CHECK(got[i].conf_w > got[i].conf_l);
    }
  }
}

TEST_CASE("model-driven pairs, refinement and the quantiser on a tiny corpus") {
  auto dir = scratch("model");
  corpus::ToyCorpusConfig cc;
  auto weak = corpus::generate_toy_split(cc, corpus::ClipKind::kWeak, 6, dir);
  auto model = random_model(3);
  ConfidenceStats st{0.0, 0.01, 6, "val"};

  PairOptions po;
  po.n_samples = 2;
  CHECK_THROWS(build_preference_pairs(model, weak, st, po));
  po.n_samples = 5;
  po.seed = 11;
  auto pairs = build_preference_pairs(model, weak, st, po);
  CHECK(pairs == build_preference_pairs(model, weak, st, po));
  for (const auto& p : pairs) {
    CHECK(p.y_w != p.y_l);
    CHECK(p.conf_w - p.conf_l >= 2 * st.sigma);
    const auto* rec = &weak.records.front();
    for (const auto& r : weak.records)
      if (r.id == p.record_id) rec = &r;
    auto cands = candidates_for(model, weak, *rec, po);
    auto oracle = brute_force_pairs(cands, st.sigma);
    bool found = false;
    for (const auto& o : oracle) found |= o.y_w == p.y_w && o.y_l == p.y_l;
    CHECK(found);
  }
  save_pairs(pairs, dir / "pairs.jsonl");
  auto back = load_pairs(dir / "pairs.jsonl");
  REQUIRE(back.size() == pairs.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].y_w == pairs[i].y_w);
    CHECK(back[i].conf_w == pairs[i].conf_w);
  }

  auto refined = refine_corpus(model, weak);
  REQUIRE(refined.records.size() == weak.records.size());
  auto original_scores = score_manifest(model, weak);
  for (std::size_t i = 0; i < refined.records.size(); ++i) {
    const auto& r = refined.records[i];
    CHECK(*r.confidence >= original_scores[i]);
    const auto features = weak.load_features(weak.records[i]);
    const auto words = model.generate(features, DecodeOptions::beam(3));
    const double syn = words.empty() ? original_scores[i] : model.confidence(features, words);
    CHECK(*r.confidence == std::max(original_scores[i], syn));
  }
}

TEST_CASE("refinement decisions") {
  corpus::CorpusRecord r;
  r.id = "a";
  r.features_path = "x.bin";
  r.caption = "a dog barks";
  r.source = corpus::Source::kWeakLabeled;
  auto keep = refine_record(r, "a cat meows", 0.8, 0.6);
  CHECK(keep.caption == "a dog barks");
  CHECK(*keep.confidence == 0.8);
  CHECK(keep.source == corpus::Source::kWeakLabeled);
  auto tie = refine_record(r, "a dog barks", 0.5, 0.9);
  CHECK(tie.caption == "a dog barks");
  CHECK(tie.source == corpus::Source::kWeakLabeled);
  auto equal = refine_record(r, "a cat meows", 0.5, 0.5);
  CHECK(equal.caption == "a dog barks");
  auto take = refine_record(r, "a cat meows", 0.2, 0.7);
  CHECK(take.caption == "a cat meows");
  CHECK(*take.confidence == 0.7);
  CHECK(take.source == corpus::Source::kSyntheticCaption);
}

TEST_CASE("quantiser percentiles, monotonicity and clamping") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> s(100);
  for (auto& x : s) x = u(rng);
  auto q = build_quantizer(s);
  for (std::size_t i = 1; i < 4; ++i) CHECK(q.boundaries[i] > q.boundaries[i - 1]);
  std::array<int, 5> counts{};
  for (double x : s) ++counts[static_cast<std::size_t>(q.level(x))];
  for (int c : counts) CHECK(std::abs(c - 20) <= 2);
  for (int i = 0; i < 1000; ++i) {
    double a = u(rng) * 2 - 1, b = u(rng) * 2 - 1;
    if (a > b) std::swap(a, b);
    CHECK(q.level(a) <= q.level(b));
  }
  CHECK(q.level(-1.0) == 0);
  CHECK(q.level(1.0) == 4);
  auto back = Quantizer::from_json(q.to_json());
  CHECK(back.boundaries == q.boundaries);

  std::vector<double> few{0.1, 0.2, 0.2, 0.3, 0.4, 0.1};
  CHECK_THROWS_AS(build_quantizer(few), DataError);
}

TEST_CASE("quantiser levels on small corpora stay balanced") {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> nd(0.2, 0.3);
  for (std::size_t n : {80u, 96u, 113u}) {
    std::vector<double> s(n);
    for (auto& x : s) x = std::clamp(nd(rng), -1.0, 1.0);
    auto q = build_quantizer(s);
    std::array<int, 5> counts{};
    for (double x : s) ++counts[static_cast<std::size_t>(q.level(x))];
    for (int c : counts) CHECK(std::abs(c - static_cast<double>(n) / 5.0) <= 0.05 * static_cast<double>(n));
  }
}

TEST_CASE("stage machine accepts only the chain") {
  StageMachine sm;
  for (Stage s : {Stage::kS1, Stage::kS2, Stage::kS3, Stage::kS4, Stage::kRefine, Stage::kGenTrain}) sm.transition(s);
  CHECK(sm.current() == Stage::kGenTrain);
  sm.transition(Stage::kS3);
  CHECK(sm.current() == Stage::kS3);

  StageMachine fresh;
  try {
    fresh.transition(Stage::kS3);
    FAIL("expected an illegal transition");
  } catch (const std::logic_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("INIT") != std::string::npos);
    CHECK(msg.find("S3") != std::string::npos);
  }
  CHECK_FALSE(is_legal_transition(Stage::kS1, Stage::kS4));
  CHECK_FALSE(is_legal_transition(Stage::kS2, Stage::kInit));
  CHECK(parse_stage("GEN_TRAIN") == Stage::kGenTrain);
  CHECK_THROWS_AS(parse_stage("S9"), DataError);
}
