#include <doctest.h>

#include <filesystem>
#include <random>
#include <set>

#include "cosy/corpus.hpp"
#include "cosy/errors.hpp"
#include "cosy/trainer.hpp"

using namespace cosy;
namespace fs = std::filesystem;

namespace {

CapTellerConfig mini_config() {
  CapTellerConfig c;
  c.n_queries = 4;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  c.d_proj = 8;
  c.vocab_size = corpus::toy_vocabulary().size();
  return c;
}

std::vector<BatchItem> toy_data(std::size_t n) {
  corpus::ToyCorpusConfig cc;
  cc.min_frames = 24;
  cc.max_frames = 32;
  std::vector<BatchItem> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto clip = corpus::make_toy_clip(cc, corpus::ClipKind::kWell, i);
    out.push_back({clip.features, corpus::toy_vocabulary().encode(clip.caption), clip.tags});
  }
  return out;
}

std::vector<PreferenceExample> toy_pairs(const std::vector<BatchItem>& data) {
  std::vector<PreferenceExample> out;
  for (std::size_t i = 0; i + 1 < data.size(); ++i) out.push_back({data[i].features, data[i].caption, data[i + 1].caption});
  return out;
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("cosy_test_trainer_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

TrainOptions options(int stage, const fs::path& resume) {
  TrainOptions o;
  o.stage = stage;
  o.schedule.epochs = 3;
  o.schedule.batch_size = 3;
  o.schedule.dpo_batch = 2;
  o.schedule.checkpoint_every = 2;
  o.seed = 99;
  o.resume_path = resume;
  return o;
}

}  // namespace

TEST_CASE("epoch batches cover a permutation and never hold a single item") {
  for (std::size_t n : {2u, 5u, 7u, 16u}) {
    for (std::size_t bs : {2u, 3u, 16u}) {
      const auto batches = epoch_batches(n, bs, 5, 1, 0);
      std::multiset<std::size_t> seen;
      for (const auto& b : batches) {
        CHECK(b.size() >= 2);
        CHECK(b.size() <= bs + 1);
        seen.insert(b.begin(), b.end());
      }
      CHECK(seen.size() == n);
      CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == n);
      CHECK(batches == epoch_batches(n, bs, 5, 1, 0));
    }
  }
  CHECK(epoch_batches(16, 4, 5, 1, 0) != epoch_batches(16, 4, 5, 1, 1));
  CHECK(epoch_batches(16, 4, 5, 1, 0) != epoch_batches(16, 4, 5, 3, 0));
}

TEST_CASE("interrupted stage-1 and stage-3 training resume to the uninterrupted result bitwise") {
  const auto data = toy_data(7);
  for (int stage : {1, 3}) {
    CAPTURE(stage);
    const auto dir = scratch("s" + std::to_string(stage));

    CapTeller straight(mini_config(), 4);
    auto full = train_stage(straight, data, nullptr, nullptr, options(stage, {}));
    CHECK(full.completed);
    CHECK(full.steps == 3 * full.steps_per_epoch);
    CHECK(full.epoch_losses.size() == 3);

    // One step past the first epoch boundary.
    CapTeller resumed(mini_config(), 4);
    auto opt = options(stage, dir / "resume");
    opt.stop_after = full.steps_per_epoch + 1;
    auto first = train_stage(resumed, data, nullptr, nullptr, opt);
    CHECK_FALSE(first.completed);
    CHECK(first.steps == full.steps_per_epoch + 1);
    CHECK(fs::exists(dir / "resume"));

    // A fresh process: new model object, same initial seed, state from disk.
    CapTeller again(mini_config(), 4);
    opt.stop_after.reset();
    auto second = train_stage(again, data, nullptr, nullptr, opt);
    CHECK(second.completed);
    CHECK(second.resumed);
    CHECK(second.steps == full.steps);
    CHECK(again.params().fingerprint() == straight.params().fingerprint());
    CHECK(again.params().fingerprint() != CapTeller(mini_config(), 4).params().fingerprint());
    fs::remove_all(dir);
  }
}

TEST_CASE("interrupted stage-4 training resumes bitwise and leaves the reference alone") {
  const auto data = toy_data(6);
  const auto pairs = toy_pairs(data);
  const auto dir = scratch("s4");
  CapTeller reference(mini_config(), 8);
  const auto ref_print = reference.params().fingerprint();

  CapTeller straight = reference.clone();
  train_stage(straight, data, &pairs, &reference, options(4, {}));

  CapTeller resumed = reference.clone();
  auto opt = options(4, dir / "resume");
  opt.stop_after = 1;
  CHECK_FALSE(train_stage(resumed, data, &pairs, &reference, opt).completed);
  CapTeller again = reference.clone();
  opt.stop_after.reset();
  CHECK(train_stage(again, data, &pairs, &reference, opt).resumed);
  CHECK(again.params().fingerprint() == straight.params().fingerprint());
  CHECK(reference.params().fingerprint() == ref_print);
  CHECK(straight.params().fingerprint() != ref_print);

  CHECK_THROWS(train_stage(straight, data, nullptr, nullptr, options(4, {})));
  fs::remove_all(dir);
}

TEST_CASE("stage-1 training lowers the loss on a small corpus") {
  const auto data = toy_data(6);
  CapTeller model(mini_config(), 2);
  auto opt = options(1, {});
  opt.schedule.epochs = 25;
  opt.schedule.lr = 3e-3;
  const auto report = train_stage(model, data, nullptr, nullptr, opt);
  REQUIRE(report.epoch_losses.size() == 25);
  CHECK(report.epoch_losses.back() < 0.8 * report.epoch_losses.front());
}

TEST_CASE("schedule validation") {
  StageSchedule s;
  CHECK_NOTHROW(s.validate());
  s.epochs = 0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = StageSchedule{};
  s.lr = -1.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = StageSchedule{};
  s.batch_size = 1;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}
