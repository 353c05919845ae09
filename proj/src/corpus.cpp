#include "cosy/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cosy/binio.hpp"
#include "cosy/errors.hpp"

namespace cosy::corpus {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr EventSpec kEvents[kNumEvents] = {
    {"dog", "barks"},    {"cat", "meows"},    {"bird", "chirps"},  {"car", "passes"},
    {"bell", "rings"},   {"door", "slams"},   {"baby", "cries"},   {"man", "speaks"},
    {"woman", "laughs"}, {"stream", "flows"}, {"wind", "blows"},   {"engine", "idles"},
    {"horn", "honks"},   {"clock", "ticks"},  {"drum", "beats"},   {"crowd", "cheers"},
};

constexpr const char* kManifestFormat = "cosyaudio.manifest";
constexpr int kManifestVersion = 1;

std::string kind_prefix(ClipKind k) {
  switch (k) {
    case ClipKind::kWell: return "well";
    case ClipKind::kWeak: return "weak";
    case ClipKind::kVal: return "val";
    case ClipKind::kTest: return "test";
  }
  return "clip";
}

std::string format_id(ClipKind k, std::size_t index) {
  std::ostringstream s;
  s << kind_prefix(k) << '-';
  s.width(5);
  s.fill('0');
  s << index;
  return s.str();
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finaliser over a combined state
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::string to_string(Source s) {
  switch (s) {
    case Source::kWellLabeled: return "well_labeled";
    case Source::kWeakLabeled: return "weak_labeled";
    case Source::kSyntheticCaption: return "synthetic_caption";
  }
  return "";
}

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "";
}

Source parse_source(const std::string& s) {
  if (s == "well_labeled") return Source::kWellLabeled;
  if (s == "weak_labeled") return Source::kWeakLabeled;
  if (s == "synthetic_caption") return Source::kSyntheticCaption;
  throw DataError("unknown source '" + s + "'");
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw DataError("unknown split '" + s + "'");
}

std::string to_string(Corruption c) {
  switch (c) {
    case Corruption::kDeletion: return "deletion";
    case Corruption::kSubstitution: return "substitution";
    case Corruption::kReordering: return "reordering";
    case Corruption::kMixed: return "mixed";
  }
  return "";
}

Corruption parse_corruption(const std::string& s) {
  if (s == "deletion") return Corruption::kDeletion;
  if (s == "substitution") return Corruption::kSubstitution;
  if (s == "reordering") return Corruption::kReordering;
  if (s == "mixed") return Corruption::kMixed;
  throw DataError("unknown corruption '" + s + "'");
}

// ---------------------------------------------------------------- records

fs::path Manifest::resolve(const CorpusRecord& r) const {
  const fs::path p(r.features_path);
  return p.is_absolute() ? p : (base_dir / p).lexically_normal();
}

Tensor Manifest::load_features(const CorpusRecord& r) const { return read_matrix_file(resolve(r)); }

void validate_record(const CorpusRecord& r) {
  if (r.id.empty()) throw DataError("record has empty id");
  if (r.features_path.empty()) throw DataError("record " + r.id + ": empty features_path");
  const std::size_t n = count_words(r.caption);
  if (n < 1 || n > kMaxCaptionWords)
    throw DataError("record " + r.id + ": caption has " + std::to_string(n) + " tokens, expected 1.." +
                    std::to_string(kMaxCaptionWords));
  if (r.confidence && !(*r.confidence >= -1.0 && *r.confidence <= 1.0))
    throw DataError("record " + r.id + ": confidence " + std::to_string(*r.confidence) + " outside [-1, 1]");
  if (r.level && (*r.level < 0 || *r.level >= kNumLevels))
    throw DataError("record " + r.id + ": level " + std::to_string(*r.level) + " outside [0, 4]");
  if (r.tags) {
    std::set<int> seen;
    for (int t : *r.tags) {
      if (t < 0 || static_cast<std::size_t>(t) >= kNumEvents)
        throw DataError("record " + r.id + ": tag " + std::to_string(t) + " outside event vocabulary");
      if (!seen.insert(t).second) throw DataError("record " + r.id + ": repeated tag " + std::to_string(t));
    }
  }
}

void save_manifest(const Manifest& manifest, const fs::path& path) {
  std::set<std::string> ids;
  for (const auto& r : manifest.records) {
    validate_record(r);
    if (!ids.insert(r.id).second) throw DataError("duplicate id '" + r.id + "'");
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + path.string());
  ojson header;
  header["format"] = kManifestFormat;
  header["version"] = kManifestVersion;
  header["split"] = to_string(manifest.split);
  header["stage_provenance"] = manifest.stage_provenance;
  header["count"] = manifest.records.size();
  out << header.dump() << '\n';
  for (const auto& r : manifest.records) {
    ojson j;
    j["id"] = r.id;
    j["features_path"] = r.features_path;
    j["caption"] = r.caption;
    if (r.tags) {
      std::vector<int> sorted = *r.tags;
      std::sort(sorted.begin(), sorted.end());
      j["tags"] = sorted;
    }
    if (r.confidence) j["confidence"] = *r.confidence;
    if (r.level) j["level"] = *r.level;
    j["source"] = to_string(r.source);
    out << j.dump() << '\n';
  }
  if (!out) throw DataError("write failed for " + path.string());
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing manifest " + path.string());
  Manifest m;
  m.base_dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) {
    throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + what);
  };
  if (!std::getline(in, line)) {
    lineno = 1;
    fail("missing header line");
  }
  lineno = 1;
  std::size_t expected = 0;
  try {
    const auto h = nlohmann::json::parse(line);
    if (h.value("format", "") != kManifestFormat) fail("not a manifest header");
    if (h.value("version", 0) != kManifestVersion) fail("unsupported manifest version");
    m.split = parse_split(h.at("split").get<std::string>());
    m.stage_provenance = h.at("stage_provenance").get<std::string>();
    expected = h.at("count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("malformed header: ") + e.what());
  }
  std::set<std::string> ids;
  static const std::set<std::string> kKeys = {"id", "features_path", "caption", "tags", "confidence", "level", "source"};
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    CorpusRecord r;
    std::string source, problem;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object()) {
        problem = "record is not an object";
      } else {
        for (const auto& [k, v] : j.items())
          if (!kKeys.count(k)) problem = "unknown key '" + k + "'";
        r.id = j.at("id").get<std::string>();
        r.features_path = j.at("features_path").get<std::string>();
        r.caption = j.at("caption").get<std::string>();
        if (j.contains("tags")) r.tags = j.at("tags").get<std::vector<int>>();
        if (j.contains("confidence")) r.confidence = j.at("confidence").get<double>();
        if (j.contains("level")) r.level = j.at("level").get<int>();
        source = j.at("source").get<std::string>();
      }
    } catch (const nlohmann::json::exception& e) {
      problem = std::string("malformed record: ") + e.what();
    }
    if (!problem.empty()) fail(problem);
    try {
      r.source = parse_source(source);
    } catch (const DataError& e) {
      fail(e.what());
    }
    try {
      validate_record(r);
    } catch (const DataError& e) {
      fail(e.what());
    }
    if (!ids.insert(r.id).second) fail("duplicate id '" + r.id + "'");
    if (!fs::exists(m.resolve(r))) fail("features_path not found: " + m.resolve(r).string());
    m.records.push_back(std::move(r));
  }
  if (m.records.size() != expected)
    throw DataError(path.string() + ": header declares " + std::to_string(expected) + " records, found " +
                    std::to_string(m.records.size()));
  return m;
}

// --------------------------------------------------------------- toy data

std::span<const EventSpec> event_specs() { return kEvents; }

std::string event_phrase(int event) {
  const auto& e = kEvents[static_cast<std::size_t>(event)];
  return std::string("a ") + e.noun + " " + e.verb;
}

std::string compose_caption(std::span<const int> events_in_order) {
  std::string out;
  for (std::size_t i = 0; i < events_in_order.size(); ++i) {
    if (i) out += " then ";
    out += event_phrase(events_in_order[i]);
  }
  return out;
}

const Vocabulary& toy_vocabulary() {
  static const Vocabulary vocab = [] {
    std::set<std::string> words{"a", "then"};
    for (const auto& e : kEvents) {
      words.insert(e.noun);
      words.insert(e.verb);
    }
    return Vocabulary(std::vector<std::string>(words.begin(), words.end()));
  }();
  return vocab;
}

std::vector<Tensor> event_templates(std::uint64_t template_seed) {
  std::mt19937_64 rng(template_seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < kNumEvents; ++k) {
    const std::size_t len = 10 + static_cast<std::size_t>(u01(rng) * 9.0);
    std::vector<double> profile(kFeatureBins, 0.0);
    const double center = 2.0 * static_cast<double>(k) + 0.5 + u01(rng);
    const double width = 1.0 + 1.5 * u01(rng);
    const double center2 = u01(rng) * (kFeatureBins - 1);
    const double amp2 = 0.3 + 0.5 * u01(rng);
    for (std::size_t f = 0; f < kFeatureBins; ++f) {
      const double x = static_cast<double>(f);
      profile[f] = std::exp(-0.5 * std::pow((x - center) / width, 2)) +
                   amp2 * std::exp(-0.5 * std::pow((x - center2) / 1.5, 2));
    }
    const double mod = 1.0 + std::floor(u01(rng) * 3.0);
    const double phase = 2.0 * std::numbers::pi * u01(rng);
    Tensor patch({len, kFeatureBins});
    for (std::size_t t = 0; t < len; ++t) {
      const double pos = (static_cast<double>(t) + 0.5) / static_cast<double>(len);
      const double hann = std::sin(std::numbers::pi * pos);
      const double env = hann * (0.6 + 0.4 * std::cos(2.0 * std::numbers::pi * mod * pos + phase));
      for (std::size_t f = 0; f < kFeatureBins; ++f) patch.at(t, f) = profile[f] * env;
    }
    out.push_back(std::move(patch));
  }
  return out;
}

ToyClip make_toy_clip(const ToyCorpusConfig& config, ClipKind kind, std::size_t index) {
  static thread_local std::uint64_t cached_seed = 0;
  static thread_local std::vector<Tensor> cached;
  if (cached.empty() || cached_seed != config.template_seed) {
    cached = event_templates(config.template_seed);
    cached_seed = config.template_seed;
  }
  const auto& templates = cached;
  const auto kind_tag = static_cast<std::uint64_t>(kind);
  std::mt19937_64 rng(mix_seed(mix_seed(config.seed, kind_tag), index));
  std::mt19937_64 crng(mix_seed(mix_seed(config.seed, kind_tag + 100), index));

  ToyClip clip;
  clip.id = format_id(kind, index);
  std::uniform_int_distribution<std::size_t> frames(config.min_frames, config.max_frames);
  std::uniform_int_distribution<std::size_t> n_events(config.min_events, config.max_events);
  const std::size_t T = frames(rng);
  const std::size_t n = n_events(rng);

  std::vector<int> pool(kNumEvents);
  for (std::size_t i = 0; i < kNumEvents; ++i) pool[i] = static_cast<int>(i);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, kNumEvents - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  clip.events.assign(pool.begin(), pool.begin() + static_cast<long>(n));

  Tensor feat({T, kFeatureBins});
  std::normal_distribution<double> noise(0.0, config.noise_std);
  std::uniform_real_distribution<double> amp(0.8, 1.2);
  const std::size_t seg = T / n;
  for (std::size_t j = 0; j < n; ++j) {
    std::uniform_int_distribution<std::size_t> jitter(0, seg / 3);
    const std::size_t onset = j * seg + jitter(rng);
    const double a = amp(rng);
    const Tensor& tpl = templates[static_cast<std::size_t>(clip.events[j])];
    for (std::size_t t = 0; t < tpl.rows() && onset + t < T; ++t)
      for (std::size_t f = 0; f < kFeatureBins; ++f) feat.at(onset + t, f) += a * tpl.at(t, f);
  }
  for (double& v : feat.vec()) v += noise(rng);
  for (double& v : feat.vec()) v = static_cast<double>(static_cast<float>(v));
  clip.features = std::move(feat);
  clip.clean_caption = compose_caption(clip.events);
  clip.caption = clip.clean_caption;

  // Corruption draws are made unconditionally so that p_corrupt only selects
  // among them and never shifts the stream.
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double u_corrupt = u01(crng);
  const auto u_kind = static_cast<int>(crng() % 3);
  const auto u_pos = static_cast<std::size_t>(crng() % 1024);
  const auto u_sub = static_cast<std::size_t>(crng() % 1024);
  const double u_tag = u01(crng);

  std::vector<int> sorted_tags = clip.events;
  std::sort(sorted_tags.begin(), sorted_tags.end());

  if (kind == ClipKind::kWeak) {
    if (u_tag < 0.5) clip.tags = sorted_tags;
    if (u_corrupt < config.p_corrupt) {
      Corruption c = config.corruption;
      if (c == Corruption::kMixed) c = static_cast<Corruption>(u_kind);
      std::vector<int> ev = clip.events;
      switch (c) {
        case Corruption::kDeletion:
          ev.erase(ev.begin() + static_cast<long>(u_pos % n));
          break;
        case Corruption::kSubstitution: {
          std::vector<int> others;
          for (int e = 0; e < static_cast<int>(kNumEvents); ++e)
            if (std::find(ev.begin(), ev.end(), e) == ev.end()) others.push_back(e);
          ev[u_pos % n] = others[u_sub % others.size()];
          break;
        }
        case Corruption::kReordering: {
          const std::size_t p = u_pos % (n - 1);
          std::swap(ev[p], ev[p + 1]);
          break;
        }
        case Corruption::kMixed: break;
      }
      clip.caption = compose_caption(ev);
    }
  } else {
    clip.tags = sorted_tags;
  }
  return clip;
}

Manifest generate_toy_split(const ToyCorpusConfig& config, ClipKind kind, std::size_t count, const fs::path& run_dir) {
  if (config.min_events < 2 || config.max_events < config.min_events || config.max_events > 6)
    throw std::invalid_argument("toy corpus: events per clip must satisfy 2 <= min <= max <= 6");
  if (config.min_frames < 1 || config.max_frames < config.min_frames)
    throw std::invalid_argument("toy corpus: bad frame range");
  Manifest m;
  m.base_dir = run_dir / "manifests";
  m.split = kind == ClipKind::kVal ? Split::kVal : kind == ClipKind::kTest ? Split::kTest : Split::kTrain;
  m.stage_provenance = "toy:" + kind_prefix(kind);
  for (std::size_t i = 0; i < count; ++i) {
    ToyClip clip = make_toy_clip(config, kind, i);
    const std::string rel = "features/" + clip.id + ".bin";
    write_matrix_file(run_dir / rel, clip.features);
    CorpusRecord r;
    r.id = clip.id;
    r.features_path = "../" + rel;
    r.caption = clip.caption;
    r.tags = clip.tags;
    r.source = kind == ClipKind::kWeak ? Source::kWeakLabeled : Source::kWellLabeled;
    m.records.push_back(std::move(r));
  }
  return m;
}

std::pair<Manifest, Manifest> generate_toy_corpus(const ToyCorpusConfig& config, const fs::path& run_dir) {
  if (config.n_well < 1 || config.n_weak < 1) throw std::invalid_argument("toy corpus needs n_well, n_weak >= 1");
  return {generate_toy_split(config, ClipKind::kWell, config.n_well, run_dir),
          generate_toy_split(config, ClipKind::kWeak, config.n_weak, run_dir)};
}

Tensor to_mel(const Tensor& features) {
  const std::size_t T = features.rows();
  if (T == 0 || features.cols() != kFeatureBins) throw std::invalid_argument("to_mel: expects T x 32 features");
  Tensor mel({kMelBins, kMelFrames});
  for (std::size_t t = 0; t < kMelFrames; ++t) {
    const double pos = T == 1 ? 0.0 : static_cast<double>(t) * static_cast<double>(T - 1) / (kMelFrames - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, T - 1);
    const double w = pos - static_cast<double>(lo);
    for (std::size_t f = 0; f < kMelBins; ++f) {
      const double a = 0.5 * (features.at(lo, 2 * f) + features.at(lo, 2 * f + 1));
      const double b = 0.5 * (features.at(hi, 2 * f) + features.at(hi, 2 * f + 1));
      mel.at(f, t) = (1.0 - w) * a + w * b;
    }
  }
  return mel;
}

}  // namespace cosy::corpus
