#include "cosy/pipeline.hpp"

#include <cctype>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "cosy/errors.hpp"

namespace cosy::pipeline {

namespace fs = std::filesystem;
using evolve::Stage;

namespace {

void say(const Context& ctx, const std::string& line) {
  if (ctx.log) *ctx.log << line << std::endl;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void require(const fs::path& p, const std::string& what, const std::string& hint) {
  if (!fs::exists(p)) throw DataError("missing " + what + " " + p.string() + " (run `" + hint + "` first)");
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// Moves the state machine into `to`, persisting the new state.
void enter(const Context& ctx, Stage to) {
  RunState s = load_state(ctx.run);
  evolve::StageMachine m(s.stage);
  m.transition(to);
  s.stage = to;
  s.history.push_back(evolve::to_string(to));
  save_state(ctx.run, s);
}

// Subcommands that belong to a stage without entering it need that stage reached.
void require_reached(const Context& ctx, Stage at_least, const std::string& what) {
  const Stage cur = load_state(ctx.run).stage;
  if (static_cast<int>(cur) < static_cast<int>(at_least))
    throw DataError(what + " needs stage " + evolve::to_string(at_least) + " or later; the run is at " +
                    evolve::to_string(cur));
}

corpus::Manifest load(const Context& ctx, const std::string& name, const std::string& hint) {
  const auto path = ctx.run.manifest(name);
  require(path, "manifest", hint);
  return corpus::load_manifest(path);
}

std::vector<BatchItem> batch_items(const corpus::Manifest& m) {
  const auto& vocab = corpus::toy_vocabulary();
  std::vector<BatchItem> out;
  out.reserve(m.records.size());
  for (const auto& r : m.records) out.push_back({m.load_features(r), vocab.encode(r.caption), r.tags});
  return out;
}

corpus::Manifest concat(const corpus::Manifest& a, const corpus::Manifest& b, const std::string& provenance) {
  corpus::Manifest m = a;
  m.records.insert(m.records.end(), b.records.begin(), b.records.end());
  m.stage_provenance = provenance;
  return m;
}

CapTeller load_model(const Context& ctx, int stage) {
  const auto path = ctx.run.checkpoint(stage);
  require(path, "stage-" + std::to_string(stage) + " checkpoint", "train --stage " + std::to_string(stage));
  return load_capteller(path);
}

std::string slug(const std::string& caption) {
  std::string out;
  for (char c : caption) {
    if (std::isalnum(static_cast<unsigned char>(c))) out += c;
    else if (!out.empty() && out.back() != '-') out += '-';
  }
  while (!out.empty() && out.back() == '-') out.pop_back();
  if (out.size() > 48) out.resize(48);
  return out.empty() ? "caption" : out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

// ------------------------------------------------------------------ state

nlohmann::json RunState::to_json() const { return {{"stage", evolve::to_string(stage)}, {"history", history}}; }

RunState RunState::from_json(const nlohmann::json& j) {
  RunState s;
  s.stage = evolve::parse_stage(j.at("stage").get<std::string>());
  s.history = j.value("history", std::vector<std::string>{});
  return s;
}

RunState load_state(const RunLayout& run) {
  if (!fs::exists(run.state())) return {};
  std::ifstream in(run.state());
  try {
    return RunState::from_json(nlohmann::json::parse(in));
  } catch (const std::exception& e) {
    throw DataError(run.state().string() + ": bad run state: " + e.what());
  }
}

void save_state(const RunLayout& run, const RunState& s) { write_json(run.state(), s.to_json()); }

// ------------------------------------------------------------------- init

void init_run(const Context& ctx) {
  const auto& run = ctx.run;
  if (fs::exists(run.config())) {
    const RunConfig existing = load_run_config(run.config());
    if (existing.to_json() != ctx.config.to_json())
      throw DataError(run.config().string() + " already holds a different configuration; use a new run directory");
  }
  save_run_config(ctx.config, run.config());
  corpus::ToyCorpusConfig cc = ctx.config.corpus;
  cc.seed = seeds::corpus(ctx.config);
  auto [well, weak] = corpus::generate_toy_corpus(cc, run.root);
  corpus::save_manifest(well, run.manifest("well"));
  corpus::save_manifest(weak, run.manifest("weak"));
  corpus::save_manifest(corpus::generate_toy_split(cc, corpus::ClipKind::kVal, cc.n_val, run.root), run.manifest("val"));
  corpus::save_manifest(corpus::generate_toy_split(cc, corpus::ClipKind::kTest, cc.n_test, run.root),
                        run.manifest("test"));
  if (!fs::exists(run.state())) save_state(run, {});
  say(ctx, "init: " + std::to_string(well.records.size()) + " well, " + std::to_string(weak.records.size()) +
               " weak, " + std::to_string(cc.n_val) + " val, " + std::to_string(cc.n_test) + " test clips in " +
               run.root.string());
}

Context open_run(const fs::path& root, std::ostream* log) {
  Context ctx;
  ctx.run.root = root;
  ctx.log = log;
  ctx.config = load_run_config(ctx.run.config());
  return ctx;
}

// ---------------------------------------------------------------- training

TrainReport train(const Context& ctx, int stage) {
  const RunConfig& cfg = ctx.config;
  const StageSchedule& schedule = cfg.schedule(stage);
  const Stage target = stage == 1 ? Stage::kS1 : stage == 3 ? Stage::kS3 : Stage::kS4;

  // Inputs are checked before the state moves.
  std::vector<BatchItem> data;
  std::optional<CapTeller> model, reference;
  std::vector<PreferenceExample> prefs;
  if (stage == 1) {
    data = batch_items(load(ctx, "well", "init"));
    require(ctx.run.manifest("val"), "manifest", "init");
    model.emplace(cfg.model, seeds::model_init(cfg));
  } else {
    const auto well = load(ctx, "well", "init");
    const auto high = load(ctx, "high", "filter");
    data = batch_items(concat(well, high, "S3:train"));
    model.emplace(load_model(ctx, stage == 3 ? 1 : 3));
    if (stage == 4) {
      reference.emplace(load_model(ctx, 3));
      const auto low = load(ctx, "low", "filter");
      require(ctx.run.manifest("pairs"), "preference pairs", "pairs");
      const auto pairs = evolve::load_pairs(ctx.run.manifest("pairs"));
      if (pairs.empty())
        throw DataError("no preference pairs in " + ctx.run.manifest("pairs").string() + "; stage 4 needs at least one");
      std::map<std::string, const corpus::CorpusRecord*> by_id;
      for (const auto& r : low.records) by_id[r.id] = &r;
      for (const auto& p : pairs) {
        const auto it = by_id.find(p.record_id);
        if (it == by_id.end()) throw DataError("pair record " + p.record_id + " is not in the low manifest");
        prefs.push_back({low.load_features(*it->second), p.y_w, p.y_l});
      }
    }
  }
  if (data.size() < 2) throw DataError("stage " + std::to_string(stage) + " needs at least two training records");
  enter(ctx, target);

  TrainOptions o;
  o.stage = stage;
  o.schedule = schedule;
  o.seed = seeds::training(cfg, stage);
  o.dpo = cfg.dpo;
  o.resume_path = ctx.run.resume(stage);
  o.stop_after = ctx.stop_after;
  fs::create_directories(ctx.run.stage_dir(stage));

  say(ctx, "train stage " + std::to_string(stage) + ": " + std::to_string(data.size()) + " records" +
               (stage == 4 ? ", " + std::to_string(prefs.size()) + " preference pairs" : "") + ", " +
               std::to_string(schedule.epochs) + " epochs");
  const auto t0 = std::chrono::steady_clock::now();
  const TrainReport report = train_stage(*model, data, stage == 4 ? &prefs : nullptr,
                                         reference ? &*reference : nullptr, o);
  if (!report.completed) {
    say(ctx, "train stage " + std::to_string(stage) + ": interrupted after " + std::to_string(report.steps) +
                 " steps; rerun to resume");
    return report;
  }
  save_capteller(*model, ctx.run.checkpoint(stage), evolve::to_string(target));
  say(ctx, "train stage " + std::to_string(stage) + ": " + std::to_string(report.steps) + " steps, final epoch loss " +
               (report.epoch_losses.empty() ? std::string("n/a") : fixed(report.epoch_losses.back())) + " (" +
               fixed(seconds_since(t0), 1) + " s)");
  if (stage == 1) stats(ctx);
  return report;
}

evolve::ConfidenceStats stats(const Context& ctx) {
  require_reached(ctx, Stage::kS1, "stats");
  const CapTeller model = load_model(ctx, 1);
  const auto s = evolve::compute_stats(model, load(ctx, "val", "init"));
  evolve::save_stats(s, ctx.run.stats());
  say(ctx, "stats: mu " + fixed(s.mu) + ", sigma " + fixed(s.sigma) + " over " + std::to_string(s.n) + " val clips");
  return s;
}

evolve::FilterResult filter(const Context& ctx) {
  require(ctx.run.stats(), "confidence statistics", "stats");
  const auto s = evolve::load_stats(ctx.run.stats());
  const CapTeller model = load_model(ctx, 1);
  const auto weak = load(ctx, "weak", "init");
  enter(ctx, Stage::kS2);
  auto result = evolve::filter_weak(model, weak, s);
  corpus::save_manifest(result.high, ctx.run.manifest("high"));
  corpus::save_manifest(result.low, ctx.run.manifest("low"));
  say(ctx, "filter: " + std::to_string(result.high.records.size()) + " high, " +
               std::to_string(result.low.records.size()) + " low (threshold " + fixed(s.mu - s.sigma) + ")");
  return result;
}

std::vector<evolve::PreferencePair> pairs(const Context& ctx) {
  require_reached(ctx, Stage::kS3, "pairs");
  require(ctx.run.stats(), "confidence statistics", "stats");
  const auto s = evolve::load_stats(ctx.run.stats());
  const CapTeller model = load_model(ctx, 3);
  const auto low = load(ctx, "low", "filter");
  evolve::PairOptions o = ctx.config.pairs;
  o.seed = seeds::pairs(ctx.config);
  auto p = evolve::build_preference_pairs(model, low, s, o);
  evolve::save_pairs(p, ctx.run.manifest("pairs"));
  say(ctx, "pairs: " + std::to_string(p.size()) + " preference pairs from " + std::to_string(low.records.size()) +
               " low-confidence clips");
  return p;
}

corpus::Manifest refine(const Context& ctx) {
  const CapTeller model = load_model(ctx, 4);
  const auto all = concat(load(ctx, "well", "init"), load(ctx, "weak", "init"), "REFINE:input");
  enter(ctx, Stage::kRefine);
  auto refined = evolve::refine_corpus(model, all, ctx.config.refine_beam);
  corpus::save_manifest(refined, ctx.run.manifest("refined"));
  std::size_t synthetic = 0;
  for (const auto& r : refined.records) synthetic += r.source == corpus::Source::kSyntheticCaption;
  say(ctx, "refine: " + std::to_string(refined.records.size()) + " records, " + std::to_string(synthetic) +
               " synthetic captions kept");
  quantize(ctx);
  return corpus::load_manifest(ctx.run.manifest("refined"));
}

evolve::Quantizer quantize(const Context& ctx) {
  require_reached(ctx, Stage::kRefine, "quantize");
  const auto refined = load(ctx, "refined", "refine");
  const auto q = evolve::build_quantizer(refined);
  evolve::save_quantizer(q, ctx.run.quantizer());
  corpus::save_manifest(evolve::apply_levels(refined, q), ctx.run.manifest("refined"));
  say(ctx, "quantize: boundaries " + fixed(q.boundaries[0]) + " " + fixed(q.boundaries[1]) + " " +
               fixed(q.boundaries[2]) + " " + fixed(q.boundaries[3]));
  return q;
}

gen::GenTrainReport gen_train(const Context& ctx) {
  const auto refined = load(ctx, "refined", "refine");
  const auto& vocab = corpus::toy_vocabulary();
  std::vector<gen::TrainExample> data;
  for (const auto& r : refined.records) {
    if (!r.level) throw DataError("refined record " + r.id + " has no confidence level (run `quantize` first)");
    data.push_back({corpus::to_mel(refined.load_features(r)), vocab.encode(r.caption), *r.level});
  }
  enter(ctx, Stage::kGenTrain);
  gen::Generator g(ctx.config.generator, seeds::generator_init(ctx.config));
  gen::GenTrainSchedule s = ctx.config.generator_training;
  s.seed = seeds::generator_training(ctx.config);
  say(ctx, "gen-train: " + std::to_string(data.size()) + " examples, " + std::to_string(s.vae_steps) + " VAE + " +
               std::to_string(s.diffusion_steps) + " diffusion steps");
  const auto t0 = std::chrono::steady_clock::now();
  const auto report = gen::train_generator(g, data, s);
  fs::create_directories(ctx.run.generator_checkpoint().parent_path());
  gen::save_generator(g, ctx.run.generator_checkpoint());
  write_json(ctx.run.reports() / "generator.json", {{"vae_mse", report.vae_mse},
                                                    {"diffusion_loss_before", report.diffusion_loss_before},
                                                    {"diffusion_loss_after", report.diffusion_loss_after},
                                                    {"latent_scale", g.latent_scale()},
                                                    {"n_examples", data.size()}});
  say(ctx, "gen-train: VAE MSE " + fixed(report.vae_mse, 5) + ", diffusion loss " +
               fixed(report.diffusion_loss_before) + " -> " + fixed(report.diffusion_loss_after) + " (" +
               fixed(seconds_since(t0), 1) + " s)");
  return report;
}

fs::path generate(const Context& ctx, const GenerateRequest& request) {
  if (request.level < 0 || request.level >= corpus::kNumLevels)
    throw std::invalid_argument("--level must be in [0, 4], got " + std::to_string(request.level));
  if (request.caption.empty()) throw std::invalid_argument("--caption must not be empty");
  const auto ckpt = ctx.run.generator_checkpoint();
  require(ckpt, "generator checkpoint", "gen-train");
  const gen::Generator g = gen::load_generator(ckpt);
  const auto tokens = corpus::toy_vocabulary().encode(request.caption);
  const Tensor mel = g.sample(tokens, request.level, request.options);
  fs::path out = request.out;
  if (out.empty())
    out = ctx.run.generated() /
          (slug(request.caption) + "_L" + std::to_string(request.level) + "_s" + std::to_string(request.options.seed) + ".bin");
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  gen::write_generated(mel, request.caption, request.level, request.options, out);
  say(ctx, "generate: wrote " + out.string());
  return out;
}

metrics::MetricReport eval_captions(const Context& ctx, int stage, const std::string& split) {
  const CapTeller model = load_model(ctx, stage);
  const auto m = load(ctx, split, "init");
  const auto& vocab = corpus::toy_vocabulary();
  std::vector<TokenSequence> cands;
  std::vector<std::vector<TokenSequence>> refs;
  for (const auto& r : m.records) {
    cands.push_back(model.generate(m.load_features(r), DecodeOptions::greedy()));
    refs.push_back({vocab.encode(r.caption)});
  }
  const auto report = metrics::evaluate_captions(cands, refs);
  metrics::write_metric_report(report, ctx.run.reports() /
                                           ("captions_stage" + std::to_string(stage) + "_" + split + ".json"));
  say(ctx, "eval-captions stage " + std::to_string(stage) + " on " + split + ": BLEU@4 " + fixed(report.bleu4) +
               ", ROUGE-L " + fixed(report.rouge_l) + " over " + std::to_string(report.n_pairs) + " clips");
  return report;
}

metrics::DistributionReport eval_confidence(const Context& ctx, int stage, const std::string& split) {
  const CapTeller model = load_model(ctx, stage);
  const auto m = load(ctx, split, "init");
  const auto scores = evolve::score_manifest(model, m);
  const auto report = metrics::confidence_distribution(scores);
  metrics::write_distribution_report(report, ctx.run.reports() /
                                                 ("confidence_stage" + std::to_string(stage) + "_" + split + ".json"));
  say(ctx, "eval-confidence stage " + std::to_string(stage) + " on " + split + ": normalised STD " +
               fixed(report.std) + " over " + std::to_string(scores.size()) + " clips");
  return report;
}

// ---------------------------------------------------------------- pipeline

nlohmann::json run_pipeline(Context& ctx) {
  const auto t0 = std::chrono::steady_clock::now();
  init_run(ctx);
  // A rerun starts over from stage 1.
  for (int stage : {1, 3, 4}) {
    std::error_code ec;
    fs::remove(ctx.run.resume(stage), ec);
  }
  nlohmann::ordered_json summary, seconds;
  auto timed = [&](const char* name, auto&& step) {
    const auto start = std::chrono::steady_clock::now();
    auto result = step();
    seconds[name] = seconds_since(start);
    return result;
  };
  timed("train_stage1", [&] { return train(ctx, 1); });
  const auto s1 = eval_captions(ctx, 1, "test");
  const auto f = timed("filter", [&] { return filter(ctx); });
  timed("train_stage3", [&] { return train(ctx, 3); });
  const auto s3 = eval_captions(ctx, 3, "test");
  const auto p = timed("pairs", [&] { return pairs(ctx); });
  timed("train_stage4", [&] { return train(ctx, 4); });
  const auto s4 = eval_captions(ctx, 4, "test");
  const auto refined = timed("refine", [&] { return refine(ctx); });
  const auto g = timed("gen_train", [&] { return gen_train(ctx); });
  const auto conf = eval_confidence(ctx, 4, "test");

  const auto st = evolve::load_stats(ctx.run.stats());
  summary["stats"] = st.to_json();
  summary["n_high"] = f.high.records.size();
  summary["n_low"] = f.low.records.size();
  summary["n_pairs"] = p.size();
  summary["n_refined"] = refined.records.size();
  summary["test_bleu4"] = {{"stage1", s1.bleu4}, {"stage3", s3.bleu4}, {"stage4", s4.bleu4}};
  summary["test_rouge_l"] = {{"stage1", s1.rouge_l}, {"stage3", s3.rouge_l}, {"stage4", s4.rouge_l}};
  summary["generator"] = {{"vae_mse", g.vae_mse},
                          {"diffusion_loss_before", g.diffusion_loss_before},
                          {"diffusion_loss_after", g.diffusion_loss_after}};
  summary["test_confidence_std"] = conf.std;
  seconds["total"] = seconds_since(t0);
  summary["seconds"] = seconds;
  write_json(ctx.run.reports() / "pipeline.json", summary);
  say(ctx, "pipeline: complete in " + fixed(seconds_since(t0), 1) + " s");
  return summary;
}

}  // namespace cosy::pipeline
