#include "cosy/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

#include "cosy/errors.hpp"

namespace cosy {

namespace {

using json = nlohmann::json;

// Reads known keys from one JSON object and rejects the rest.
class Fields {
 public:
  Fields(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw std::invalid_argument("config: '" + section_ + "' must be an object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    known_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw std::invalid_argument("config: bad value for '" + path(key) + "': " + e.what());
    }
  }

  const json* section(const std::string& key) {
    known_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const std::string& key) const { return section_.empty() ? key : section_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!known_.count(k)) throw std::invalid_argument("config: unknown key '" + path(k) + "'");
  }

 private:
  const json& j_;
  std::string section_;
  std::set<std::string> known_;
};

json corpus_json(const corpus::ToyCorpusConfig& c) {
  return {{"n_well", c.n_well},         {"n_weak", c.n_weak},
          {"n_val", c.n_val},           {"n_test", c.n_test},
          {"p_corrupt", c.p_corrupt},   {"corruption", corpus::to_string(c.corruption)},
          {"template_seed", c.template_seed}, {"noise_std", c.noise_std},
          {"min_frames", c.min_frames}, {"max_frames", c.max_frames},
          {"min_events", c.min_events}, {"max_events", c.max_events}};
}

void read_corpus(const json& j, corpus::ToyCorpusConfig& c) {
  Fields f(j, "corpus");
  f.get("n_well", c.n_well);
  f.get("n_weak", c.n_weak);
  f.get("n_val", c.n_val);
  f.get("n_test", c.n_test);
  f.get("p_corrupt", c.p_corrupt);
  std::string corruption = corpus::to_string(c.corruption);
  f.get("corruption", corruption);
  try {
    c.corruption = corpus::parse_corruption(corruption);
  } catch (const DataError& e) {
    throw std::invalid_argument(std::string("config: corpus.corruption: ") + e.what());
  }
  f.get("template_seed", c.template_seed);
  f.get("noise_std", c.noise_std);
  f.get("min_frames", c.min_frames);
  f.get("max_frames", c.max_frames);
  f.get("min_events", c.min_events);
  f.get("max_events", c.max_events);
  f.finish();
}

json schedule_json(const StageSchedule& s) {
  return {{"epochs", s.epochs},          {"lr", s.lr},
          {"weight_decay", s.weight_decay}, {"batch_size", s.batch_size},
          {"dpo_batch", s.dpo_batch},    {"checkpoint_every", s.checkpoint_every}};
}

void read_schedule(const json& j, const std::string& name, StageSchedule& s) {
  Fields f(j, name);
  f.get("epochs", s.epochs);
  f.get("lr", s.lr);
  f.get("weight_decay", s.weight_decay);
  f.get("batch_size", s.batch_size);
  f.get("dpo_batch", s.dpo_batch);
  f.get("checkpoint_every", s.checkpoint_every);
  f.finish();
}

json gen_training_json(const gen::GenTrainSchedule& s) {
  return {{"vae_steps", s.vae_steps},
          {"vae_lr", s.vae_lr},
          {"diffusion_steps", s.diffusion_steps},
          {"diffusion_lr", s.diffusion_lr},
          {"batch_size", s.batch_size}};
}

void read_gen_training(const json& j, gen::GenTrainSchedule& s) {
  Fields f(j, "generator_training");
  f.get("vae_steps", s.vae_steps);
  f.get("vae_lr", s.vae_lr);
  f.get("diffusion_steps", s.diffusion_steps);
  f.get("diffusion_lr", s.diffusion_lr);
  f.get("batch_size", s.batch_size);
  f.finish();
}

}  // namespace

RunConfig::RunConfig() {
  stage1.epochs = 300;
  stage1.lr = 1e-3;
  stage3.epochs = 60;
  stage3.lr = 5e-4;
  stage4.epochs = 20;
  stage4.lr = 1e-4;
}

void RunConfig::finalize() {
  const std::size_t vocab = corpus::toy_vocabulary().size();
  if (model.vocab_size == 0) model.vocab_size = vocab;
  if (generator.vocab_size == 0) generator.vocab_size = vocab;
  if (model.vocab_size != vocab || generator.vocab_size != vocab)
    throw std::invalid_argument("config: vocab_size must match the toy vocabulary (" + std::to_string(vocab) + ")");
  model.validate();
  generator.validate();
  stage1.validate();
  stage3.validate();
  stage4.validate();
  dpo.validate();
  if (pairs.n_samples < 3) throw std::invalid_argument("config: pairs.n_samples must be >= 3");
  if (!(pairs.top_p > 0.0 && pairs.top_p <= 1.0)) throw std::invalid_argument("config: pairs.top_p must be in (0, 1]");
  if (!(pairs.temperature > 0.0)) throw std::invalid_argument("config: pairs.temperature must be > 0");
  if (refine_beam < 1) throw std::invalid_argument("config: refine_beam must be >= 1");
  if (corpus.n_well < 2 || corpus.n_val < 2 || corpus.n_test < 1)
    throw std::invalid_argument("config: corpus needs n_well >= 2, n_val >= 2, n_test >= 1");
  if (sampling.steps < 1 || sampling.steps > generator.t_max)
    throw std::invalid_argument("config: sampling.steps must be in [1, generator.t_max]");
}

const StageSchedule& RunConfig::schedule(int stage) const {
  switch (stage) {
    case 1: return stage1;
    case 3: return stage3;
    case 4: return stage4;
    default: throw std::invalid_argument("training stage must be 1, 3 or 4, got " + std::to_string(stage));
  }
}

StageSchedule& RunConfig::schedule(int stage) {
  return const_cast<StageSchedule&>(static_cast<const RunConfig&>(*this).schedule(stage));
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["corpus"] = corpus_json(corpus);
  j["model"] = model.to_json();
  j["stage1"] = schedule_json(stage1);
  j["stage3"] = schedule_json(stage3);
  j["stage4"] = schedule_json(stage4);
  j["dpo"] = {{"beta", dpo.beta}};
  j["pairs"] = {{"n_samples", pairs.n_samples}, {"top_p", pairs.top_p}, {"temperature", pairs.temperature}};
  j["refine_beam"] = refine_beam;
  j["generator"] = generator.to_json();
  j["generator_training"] = gen_training_json(generator_training);
  j["sampling"] = {{"steps", sampling.steps}, {"guidance_scale", sampling.guidance_scale}, {"seed", sampling.seed}};
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  Fields f(j, "");
  f.get("seed", c.seed);
  if (const auto* s = f.section("corpus")) read_corpus(*s, c.corpus);
  if (const auto* s = f.section("model")) {
    // CapTellerConfig/GeneratorConfig parse whole objects; merge onto defaults.
    json merged = c.model.to_json();
    for (const auto& [k, v] : s->items()) merged[k] = v;
    c.model = CapTellerConfig::from_json(merged);
  }
  if (const auto* s = f.section("stage1")) read_schedule(*s, "stage1", c.stage1);
  if (const auto* s = f.section("stage3")) read_schedule(*s, "stage3", c.stage3);
  if (const auto* s = f.section("stage4")) read_schedule(*s, "stage4", c.stage4);
  if (const auto* s = f.section("dpo")) {
    Fields d(*s, "dpo");
    d.get("beta", c.dpo.beta);
    d.finish();
  }
  if (const auto* s = f.section("pairs")) {
    Fields p(*s, "pairs");
    p.get("n_samples", c.pairs.n_samples);
    p.get("top_p", c.pairs.top_p);
    p.get("temperature", c.pairs.temperature);
    p.finish();
  }
  f.get("refine_beam", c.refine_beam);
  if (const auto* s = f.section("generator")) {
    json merged = c.generator.to_json();
    for (const auto& [k, v] : s->items()) merged[k] = v;
    c.generator = gen::GeneratorConfig::from_json(merged);
  }
  if (const auto* s = f.section("generator_training")) read_gen_training(*s, c.generator_training);
  if (const auto* s = f.section("sampling")) {
    Fields p(*s, "sampling");
    p.get("steps", c.sampling.steps);
    p.get("guidance_scale", c.sampling.guidance_scale);
    p.get("seed", c.sampling.seed);
    p.finish();
  }
  f.finish();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": not valid JSON: " + e.what());
  }
  RunConfig c = RunConfig::from_json(j);
  c.finalize();
  return c;
}

void save_run_config(const RunConfig& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << c.to_json().dump(2) << '\n';
}

namespace seeds {
std::uint64_t corpus(const RunConfig& c) { return c.seed; }
std::uint64_t model_init(const RunConfig& c) { return corpus::mix_seed(c.seed, 0x6d6f64656cULL); }
std::uint64_t training(const RunConfig& c, int stage) {
  return corpus::mix_seed(c.seed, 0x747261696e00ULL + static_cast<std::uint64_t>(stage));
}
std::uint64_t pairs(const RunConfig& c) { return corpus::mix_seed(c.seed, 0x7061697273ULL); }
std::uint64_t generator_init(const RunConfig& c) { return corpus::mix_seed(c.seed, 0x67656e696e6974ULL); }
std::uint64_t generator_training(const RunConfig& c) { return corpus::mix_seed(c.seed, 0x67656e747261ULL); }
}  // namespace seeds

}  // namespace cosy
