#pragma once

// Training losses for the captioner and the preference fine-tuning stage.
//
// Each loss comes in two layers: a kernel over already-computed logits or
// similarities (closed forms are checked against these), and a model-level
// function that runs the forward passes for a batch.

#include <optional>
#include <span>
#include <vector>

#include "cosy/autograd.hpp"
#include "cosy/capteller.hpp"

namespace cosy {

struct BatchItem {
  Tensor features;
  TokenSequence caption;
  std::optional<std::vector<int>> tags;  // event ids; absent when unlabelled
};
using Batch = std::vector<BatchItem>;

struct DPOConfig {
  double beta = 0.05;
  void validate() const;
};

// A preference example in model terms: same clip, winner and loser captions.
struct PreferenceExample {
  Tensor features;
  TokenSequence winner;
  TokenSequence loser;
};

// ---- kernels ----

// logits[n x 2], labels in {0, 1}; mean two-class cross-entropy.
ad::Var matching_loss(const ad::Var& logits, std::span<const int> labels);
// similarity[B x B] already divided by the temperature, positives on the
// diagonal; mean of the audio->text and text->audio InfoNCE terms.
ad::Var contrastive_loss(const ad::Var& scaled_similarity);
// logits[n x K] against 0/1 targets, averaged over all entries.
ad::Var event_loss(const ad::Var& logits, const Tensor& targets);
// -log sigmoid(beta * gap).
ad::Var dpo_loss(const ad::Var& reward_gap, double beta);
double dpo_loss_value(double reward_gap, double beta);

// ---- model level ----

struct CaptionerLosses {
  ad::Var atm, atc, aec, aac;
  ad::Var total() const;
};

ad::Var loss_atm(const CapTeller& model, const Batch& batch);
ad::Var loss_atc(const CapTeller& model, const Batch& batch);
ad::Var loss_aec(const CapTeller& model, const Batch& batch);
ad::Var loss_aac(const CapTeller& model, const Batch& batch);
// All four terms sharing one audio encoding per item.
CaptionerLosses captioner_losses(const CapTeller& model, const Batch& batch);

// log pi_policy(y|x) - log pi_ref(y|x), sequence log-probabilities summed over
// tokens. The reference side never records gradients.
ad::Var implicit_reward(const CapTeller& policy, const CapTeller& reference, const Tensor& features,
                        std::span<const int> caption);
ad::Var loss_dpo(const CapTeller& policy, const CapTeller& reference, const PreferenceExample& pair,
                 const DPOConfig& config);

// Stage 1 and 3: sum of the four captioner losses. Stage 4: that sum plus the
// mean DPO loss over `pairs`, which must then be non-null and non-empty, and
// must be null otherwise. `reference` is required at stage 4.
ad::Var loss_stage(const CapTeller& model, const Batch& batch, const std::vector<PreferenceExample>* pairs, int stage,
                   const CapTeller* reference, const DPOConfig& config);

}  // namespace cosy
