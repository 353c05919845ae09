#include <doctest.h>

#include <cmath>
#include <random>

#include "cosy/corpus.hpp"
#include "cosy/objectives.hpp"
#include "gradcheck.hpp"

using namespace cosy;
using cosy::testing::check_gradients;
using cosy::testing::leaves_of;

namespace {

CapTellerConfig mini_config() {
  CapTellerConfig c;
  c.n_queries = 4;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.d_proj = 8;
  c.vocab_size = corpus::toy_vocabulary().size();
  return c;
}

Batch mini_batch(std::size_t b, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> word(kNumSpecialTokens, static_cast<int>(corpus::toy_vocabulary().size()) - 1);
  std::uniform_int_distribution<int> ev(0, 15);
  Batch batch;
  for (std::size_t i = 0; i < b; ++i) {
    BatchItem item;
    item.features = init_normal({6 + i, 32}, 1.0, rng);
    item.caption.resize(3 + i % 3);
    for (auto& w : item.caption) w = word(rng);
    if (i % 2 == 0) item.tags = std::vector<int>{ev(rng), ev(rng)};
    batch.push_back(std::move(item));
  }
  return batch;
}

const double kLn2 = std::log(2.0);

}  // namespace

TEST_CASE("matching loss closed forms") {
  auto zero = ad::constant(Tensor({4, 2}));
  CHECK(matching_loss(zero, std::vector<int>{1, 1, 0, 0}).item() == doctest::Approx(kLn2).epsilon(1e-12));
  Tensor sep({2, 2}, std::vector<double>{-20, 20, 20, -20});
  CHECK(matching_loss(ad::constant(sep), std::vector<int>{1, 0}).item() < 1e-6);
  CHECK_THROWS(matching_loss(zero, std::vector<int>{1, 2, 0, 0}));
}

TEST_CASE("contrastive loss closed forms") {
  for (std::size_t b : {2u, 5u, 16u}) {
    Tensor eq({b, b}, 0.3);
    CHECK(std::abs(contrastive_loss(ad::constant(eq)).item() - std::log(static_cast<double>(b))) <= 1e-6);
  }
  Tensor sat({4, 4}, -50.0);
  for (std::size_t i = 0; i < 4; ++i) sat.at(i, i) = 50.0;
  CHECK(contrastive_loss(ad::constant(sat)).item() < 1e-6);
  CHECK_THROWS(contrastive_loss(ad::constant(Tensor({1, 1}))));
}

TEST_CASE("event loss closed forms") {
  Tensor two({1, 2}, std::vector<double>{1, 0});
  CHECK(event_loss(ad::constant(Tensor({1, 2})), two).item() == doctest::Approx(kLn2).epsilon(1e-12));
  Tensor perfect({1, 2}, std::vector<double>{20, -20});
  CHECK(event_loss(ad::constant(perfect), two).item() < 1e-6);
}

TEST_CASE("caption loss on uniform logits is ln|V|") {
  Tensor logits({7, 256});
  std::vector<int> t{3, 9, 200, 17, 5, 255, 0};
  CHECK(std::abs(ad::mean(ad::token_nll(ad::constant(logits), t)).item() - std::log(256.0)) <= 1e-6);

  CapTeller m(mini_config(), 1);
  m.params().get("aac.lm.w").node()->value.fill(0.0);
  m.params().get("aac.lm.b").node()->value.fill(0.0);
  const double expect = std::log(static_cast<double>(m.config().vocab_size));
  CHECK(std::abs(loss_aac(m, mini_batch(3, 2)).item() - expect) <= 1e-6);
}

TEST_CASE("DPO kernel values") {
  CHECK(dpo_loss_value(0.0, 0.05) == doctest::Approx(kLn2).epsilon(1e-12));
  // -log sigmoid(0.5) written out from the definition of the logistic
  CHECK(dpo_loss_value(10.0, 0.05) == doctest::Approx(std::log(1.0 + std::exp(-0.5))).epsilon(1e-12));
  CHECK(dpo_loss_value(10.0, 0.05) == doctest::Approx(0.4741).epsilon(1e-4));
  double prev = 1e9;
  for (double gap = -200; gap <= 200; gap += 10) {
    const double v = dpo_loss_value(gap, 0.05);
    CHECK(v < prev);
    CHECK(v > 0.0);
    prev = v;
  }
  CHECK(dpo_loss(ad::constant(Tensor::scalar(10.0)), 0.05).item() == doctest::Approx(dpo_loss_value(10.0, 0.05)));
}

TEST_CASE("log-ratio reward on hand-built categoricals") {
  // reference puts 0.1 on each target token, policy 0.2: reward = 3 ln 2
  auto logits_for = [](double p_target) {
    Tensor t({3, 2});
    for (std::size_t r = 0; r < 3; ++r) {
      t.at(r, 0) = std::log(p_target);
      t.at(r, 1) = std::log(1.0 - p_target);
    }
    return ad::constant(t);
  };
  const std::vector<int> y{0, 0, 0};
  const double lp_pol = -ad::sum(ad::token_nll(logits_for(0.2), y)).item();
  const double lp_ref = -ad::sum(ad::token_nll(logits_for(0.1), y)).item();
  CHECK(lp_pol - lp_ref == doctest::Approx(std::log(8.0)).epsilon(1e-12));
}

TEST_CASE("model-level reward and DPO at policy == reference") {
  CapTeller policy(mini_config(), 3);
  auto ref = policy.clone();
  auto batch = mini_batch(2, 4);
  CHECK(implicit_reward(policy, ref, batch[0].features, batch[0].caption).item() == 0.0);
  PreferenceExample pair{batch[0].features, batch[0].caption, batch[1].caption};
  CHECK(loss_dpo(policy, ref, pair, DPOConfig{}).item() == doctest::Approx(kLn2).epsilon(1e-12));

  // raising pi_policy(y|x) raises the reward
  auto& b = policy.params().get("aac.lm.b").node()->value;
  const double before = implicit_reward(policy, ref, batch[0].features, batch[0].caption).item();
  b[static_cast<std::size_t>(batch[0].caption[0])] += 0.5;
  const double after = implicit_reward(policy, ref, batch[0].features, batch[0].caption).item();
  CHECK(after > before);

  CHECK_THROWS(loss_dpo(policy, ref, PreferenceExample{batch[0].features, batch[0].caption, batch[0].caption},
                        DPOConfig{}));
}

TEST_CASE("DPO gradients never reach the reference") {
  CapTeller policy(mini_config(), 5);
  auto ref = policy.clone();
  auto batch = mini_batch(2, 6);
  const auto ref_sum = ref.params().fingerprint();
  PreferenceExample pair{batch[0].features, batch[0].caption, batch[1].caption};
  {
    ad::Tape tape;
    ad::GradScope scope(tape);
    tape.backward(loss_dpo(policy, ref, pair, DPOConfig{}));
  }
  for (const auto& e : ref.params().entries()) CHECK(e.var.grad().empty());
  bool any_policy_grad = false;
  for (const auto& e : policy.params().entries()) any_policy_grad |= !e.var.grad().empty();
  CHECK(any_policy_grad);
  CHECK(ref.params().fingerprint() == ref_sum);
}

TEST_CASE("AEC loss ignores untagged records") {
  CapTeller m(mini_config(), 7);
  auto batch = mini_batch(3, 8);
  for (auto& item : batch) item.tags.reset();
  ad::Tape tape;
  ad::GradScope scope(tape);
  auto l = loss_aec(m, batch);
  CHECK(l.item() == 0.0);
  CHECK_FALSE(l.requires_grad());
  batch[0].tags = std::vector<int>{16};
  CHECK_THROWS(loss_aec(m, batch));
}

TEST_CASE("contrastive and matching losses need two items") {
  CapTeller m(mini_config(), 9);
  auto batch = mini_batch(1, 10);
  CHECK_THROWS(loss_atm(m, batch));
  CHECK_THROWS(loss_atc(m, batch));
}

TEST_CASE("loss gradients match finite differences on a miniature model") {
  CapTeller m(mini_config(), 11);
  auto batch = mini_batch(3, 12);
  auto leaves = leaves_of(m.params());
  auto ref = m.clone();
  // move the policy away from the reference so the DPO gap is non-trivial
  std::mt19937_64 rng(13);
  std::normal_distribution<double> nd(0.0, 0.05);
  for (auto& e : m.params().entries())
    for (auto& v : e.var.mutable_value().vec()) v += nd(rng);
  PreferenceExample pair{batch[0].features, batch[0].caption, batch[1].caption};

  struct Case {
    const char* name;
    std::function<ad::Var()> loss;
  };
  const std::vector<Case> cases{
      {"atm", [&] { return loss_atm(m, batch); }},
      {"atc", [&] { return loss_atc(m, batch); }},
      {"aec", [&] { return loss_aec(m, batch); }},
      {"aac", [&] { return loss_aac(m, batch); }},
      {"dpo", [&] { return loss_dpo(m, ref, pair, DPOConfig{0.5}); }},
  };
  for (const auto& c : cases) {
    auto r = check_gradients(leaves, c.loss, 1e-4, 2, 17);
    INFO(c.name << ": " << r.worst);
    CHECK(r.max_rel_error <= 1e-3);
  }
}

TEST_CASE("stage loss composition") {
  CapTeller m(mini_config(), 14);
  auto ref = m.clone();
  auto batch = mini_batch(4, 15);
  const DPOConfig dpo;
  const double s1 = loss_stage(m, batch, nullptr, 1, nullptr, dpo).item();
  const double s3 = loss_stage(m, batch, nullptr, 3, nullptr, dpo).item();
  CHECK(s1 == s3);
  const double parts = loss_atm(m, batch).item() + loss_atc(m, batch).item() + loss_aec(m, batch).item() +
                       loss_aac(m, batch).item();
  CHECK(std::abs(parts - s1) <= 1e-9);
  const double additive = s1 - loss_aac(m, batch).item();
  CHECK(std::abs(additive - (loss_atm(m, batch).item() + loss_atc(m, batch).item() + loss_aec(m, batch).item())) <=
        1e-9);

  std::vector<PreferenceExample> pairs{{batch[0].features, batch[0].caption, batch[1].caption},
                                       {batch[2].features, batch[2].caption, batch[3].caption}};
  const double s4 = loss_stage(m, batch, &pairs, 4, &ref, dpo).item();
  CHECK(std::abs(s4 - (s3 + kLn2)) <= 1e-9);

  CHECK_THROWS(loss_stage(m, batch, &pairs, 1, &ref, dpo));
  CHECK_THROWS(loss_stage(m, batch, nullptr, 4, &ref, dpo));
  std::vector<PreferenceExample> none;
  CHECK_THROWS(loss_stage(m, batch, &none, 4, &ref, dpo));
  CHECK_THROWS(loss_stage(m, batch, nullptr, 2, nullptr, dpo));
}

TEST_CASE("losses are finite and non-negative on random batches") {
  CapTeller m(mini_config(), 16);
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto parts = captioner_losses(m, mini_batch(4, 100 + s));
    for (const auto& v : {parts.atm, parts.atc, parts.aec, parts.aac}) {
      CHECK(std::isfinite(v.item()));
      CHECK(v.item() >= 0.0);
    }
  }
}
