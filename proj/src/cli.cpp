#include "cosy/cli.hpp"

#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "cosy/errors.hpp"
#include "cosy/pipeline.hpp"

namespace cosy {

namespace {

struct Flags {
  std::string run_dir = "runs/toy";
  std::string config_file;
  std::optional<std::uint64_t> seed;

  int stage = 0;
  std::optional<std::size_t> epochs, batch_size, stop_after;
  std::optional<double> lr;

  std::optional<std::size_t> n_samples;

  std::string caption;
  int level = 4;
  std::optional<std::uint64_t> sample_seed;
  std::optional<std::size_t> steps;
  std::optional<double> guidance;
  std::string out;

  std::string split = "test";
};

RunConfig initial_config(const Flags& f) {
  RunConfig c = f.config_file.empty() ? RunConfig() : load_run_config(f.config_file);
  if (f.seed) c.seed = *f.seed;
  c.finalize();
  return c;
}

pipeline::Context open(const Flags& f, std::ostream& out) {
  auto ctx = pipeline::open_run(f.run_dir, &out);
  if (f.seed) ctx.config.seed = *f.seed;
  return ctx;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"cosyaudio: confidence-aware audio captioning and generation at desk scale", "cosyaudio"};
  app.require_subcommand(1);
  Flags f;
  app.add_option("--run-dir", f.run_dir, "Run directory (default runs/toy)");

  auto* init = app.add_subcommand("init", "Write the config and the toy corpus");
  init->add_option("--config", f.config_file, "Start from this config file instead of the defaults");
  init->add_option("--seed", f.seed, "Run seed");

  auto* train = app.add_subcommand("train", "Train the captioner for one stage");
  train->add_option("--stage", f.stage, "Stage: 1, 3 or 4")->required()->check(CLI::IsMember({1, 3, 4}));
  train->add_option("--epochs", f.epochs, "Override the stage's epochs")->check(CLI::PositiveNumber);
  train->add_option("--lr", f.lr, "Override the stage's learning rate")->check(CLI::PositiveNumber);
  train->add_option("--batch-size", f.batch_size, "Override the stage's batch size")->check(CLI::Range(2, 1 << 20));
  train->add_option("--stop-after", f.stop_after, "Interrupt after this many steps (resumable)");

  auto* stats = app.add_subcommand("stats", "Confidence statistics on the val split (stage-1 model)");
  auto* filter = app.add_subcommand("filter", "Split the weak corpus at mu - sigma");
  auto* pairs = app.add_subcommand("pairs", "Build preference pairs from the low-confidence clips");
  pairs->add_option("--n-samples", f.n_samples, "Sampled captions per clip")->check(CLI::Range(3, 1000));
  auto* refine = app.add_subcommand("refine", "Refine all captions with the stage-4 model, then quantize");
  auto* quantize = app.add_subcommand("quantize", "Rebuild confidence levels for the refined corpus");
  auto* gentrain = app.add_subcommand("gen-train", "Train the quality-aware generator on the refined corpus");

  auto* generate = app.add_subcommand("generate", "Sample a mel feature for a caption");
  generate->add_option("--caption", f.caption, "Caption text")->required();
  generate->add_option("--level", f.level, "Confidence level 0..4 (default 4)")->check(CLI::Range(0, 4));
  generate->add_option("--seed", f.sample_seed, "Sampling seed");
  generate->add_option("--steps", f.steps, "Sampling steps")->check(CLI::PositiveNumber);
  generate->add_option("--guidance", f.guidance, "Classifier-free guidance scale");
  generate->add_option("--out", f.out, "Output matrix path (sidecar at <out>.json)");

  auto* evalcap = app.add_subcommand("eval-captions", "BLEU@4 / ROUGE-L of greedy captions");
  evalcap->add_option("--stage", f.stage, "Model stage: 1, 3 or 4")->required()->check(CLI::IsMember({1, 3, 4}));
  evalcap->add_option("--split", f.split, "Manifest to evaluate (default test)");
  auto* evalconf = app.add_subcommand("eval-confidence", "Normalised confidence distribution and KDE");
  evalconf->add_option("--stage", f.stage, "Model stage: 1, 3 or 4")->required()->check(CLI::IsMember({1, 3, 4}));
  evalconf->add_option("--split", f.split, "Manifest to score (default test)");

  auto* pipe = app.add_subcommand("pipeline", "init (if needed) and run S1 through GEN_TRAIN");
  pipe->add_option("--config", f.config_file, "Start from this config file instead of the defaults");
  pipe->add_option("--seed", f.seed, "Run seed");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (init->parsed()) {
      pipeline::Context ctx;
      ctx.run.root = f.run_dir;
      ctx.log = &out;
      ctx.config = initial_config(f);
      pipeline::init_run(ctx);
    } else if (train->parsed()) {
      auto ctx = open(f, out);
      auto& s = ctx.config.schedule(f.stage);
      if (f.epochs) s.epochs = *f.epochs;
      if (f.lr) s.lr = *f.lr;
      if (f.batch_size) s.batch_size = *f.batch_size;
      ctx.stop_after = f.stop_after;
      pipeline::train(ctx, f.stage);
    } else if (stats->parsed()) {
      pipeline::stats(open(f, out));
    } else if (filter->parsed()) {
      pipeline::filter(open(f, out));
    } else if (pairs->parsed()) {
      auto ctx = open(f, out);
      if (f.n_samples) ctx.config.pairs.n_samples = *f.n_samples;
      pipeline::pairs(ctx);
    } else if (refine->parsed()) {
      pipeline::refine(open(f, out));
    } else if (quantize->parsed()) {
      pipeline::quantize(open(f, out));
    } else if (gentrain->parsed()) {
      pipeline::gen_train(open(f, out));
    } else if (generate->parsed()) {
      auto ctx = open(f, out);
      pipeline::GenerateRequest req;
      req.caption = f.caption;
      req.level = f.level;
      req.options = ctx.config.sampling;
      if (f.sample_seed) req.options.seed = *f.sample_seed;
      if (f.steps) req.options.steps = *f.steps;
      if (f.guidance) req.options.guidance_scale = *f.guidance;
      req.out = f.out;
      pipeline::generate(ctx, req);
    } else if (evalcap->parsed()) {
      pipeline::eval_captions(open(f, out), f.stage, f.split);
    } else if (evalconf->parsed()) {
      pipeline::eval_confidence(open(f, out), f.stage, f.split);
    } else if (pipe->parsed()) {
      pipeline::Context ctx;
      ctx.run.root = f.run_dir;
      ctx.log = &out;
      ctx.config = initial_config(f);
      pipeline::run_pipeline(ctx);
    }
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace cosy
