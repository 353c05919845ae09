#include "cosy/objectives.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace cosy {

namespace {

void require_pairs_batch(const Batch& batch, const char* what) {
  if (batch.size() < 2)
    throw std::invalid_argument(std::string(what) + ": batch of " + std::to_string(batch.size()) +
                                " items; in-batch negatives need at least 2");
}

std::vector<ad::Var> encode_all(const CapTeller& model, const Batch& batch) {
  std::vector<ad::Var> out;
  out.reserve(batch.size());
  for (const auto& item : batch) out.push_back(model.encode_audio(item.features));
  return out;
}

// B x B matrix of max-over-queries cosine between audio i and caption j.
ad::Var similarity_matrix(const CapTeller& model, const std::vector<ad::Var>& queries, const Batch& batch) {
  std::vector<ad::Var> texts;
  texts.reserve(batch.size());
  for (const auto& item : batch) texts.push_back(model.atc_text_unit(item.caption));
  auto text = ad::transpose(ad::concat0(texts));
  std::vector<ad::Var> rows;
  rows.reserve(queries.size());
  for (const auto& q : queries) {
    auto per_query = ad::matmul(model.atc_query_units(q), text);  // n_queries x B
    rows.push_back(ad::reshape(ad::row_max(ad::transpose(per_query)), {1, batch.size()}));
  }
  return ad::concat0(rows);
}

ad::Var scaled_by_temperature(const CapTeller& model, const ad::Var& sim) {
  return ad::scale_by(sim, ad::exp(ad::scale(model.log_temperature(), -1.0)));
}

ad::Var atm_from(const CapTeller& model, const std::vector<ad::Var>& queries, const Batch& batch, const Tensor& sim) {
  const std::size_t b = batch.size();
  std::vector<ad::Var> logits;
  std::vector<int> labels;
  for (std::size_t i = 0; i < b; ++i) {
    logits.push_back(model.atm_logits(queries[i], batch[i].caption));
    labels.push_back(1);
  }
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t neg = b;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < b; ++j) {
      if (batch[j].caption == batch[i].caption) continue;
      if (sim.at(i, j) > best) {
        best = sim.at(i, j);
        neg = j;
      }
    }
    if (neg == b) continue;
    logits.push_back(model.atm_logits(queries[i], batch[neg].caption));
    labels.push_back(0);
  }
  return matching_loss(ad::concat0(logits), labels);
}

ad::Var aec_from(const CapTeller& model, const std::vector<ad::Var>& queries, const Batch& batch) {
  const std::size_t k = model.config().n_events;
  std::vector<ad::Var> logits;
  std::vector<double> targets;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!batch[i].tags) continue;
    std::vector<double> row(k, 0.0);
    for (int t : *batch[i].tags) {
      if (t < 0 || static_cast<std::size_t>(t) >= k)
        throw std::invalid_argument("loss_aec: tag id " + std::to_string(t) + " outside [0, " + std::to_string(k) + ")");
      row[static_cast<std::size_t>(t)] = 1.0;
    }
    targets.insert(targets.end(), row.begin(), row.end());
    logits.push_back(model.aec_logits(queries[i]));
  }
  if (logits.empty()) return ad::constant(Tensor::scalar(0.0));
  return event_loss(ad::concat0(logits), Tensor({logits.size(), k}, std::move(targets)));
}

ad::Var aac_from(const CapTeller& model, const std::vector<ad::Var>& queries, const Batch& batch) {
  std::vector<ad::Var> logits;
  std::vector<int> targets;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& words = batch[i].caption;
    if (words.empty()) throw std::invalid_argument("loss_aac: empty caption");
    logits.push_back(model.caption_logits(queries[i], decoder_input(words)));
    auto t = decoder_target(words);
    targets.insert(targets.end(), t.begin(), t.end());
  }
  if (logits.empty()) throw std::invalid_argument("loss_aac: empty batch");
  return ad::mean(ad::token_nll(ad::concat0(logits), targets));
}

}  // namespace

void DPOConfig::validate() const {
  if (!(beta > 0.0)) throw std::invalid_argument("DPO beta must be positive");
}

ad::Var matching_loss(const ad::Var& logits, std::span<const int> labels) {
  if (logits.value().rows() != labels.size() || logits.value().cols() != 2)
    throw std::invalid_argument("matching_loss: expected n x 2 logits with n labels");
  for (int l : labels)
    if (l != 0 && l != 1) throw std::invalid_argument("matching_loss: labels must be 0 or 1");
  return ad::mean(ad::token_nll(logits, labels));
}

ad::Var contrastive_loss(const ad::Var& scaled_similarity) {
  const std::size_t b = scaled_similarity.value().rows();
  if (b < 2 || scaled_similarity.value().cols() != b)
    throw std::invalid_argument("contrastive_loss: expected a square matrix with at least 2 rows");
  std::vector<int> diag(b);
  for (std::size_t i = 0; i < b; ++i) diag[i] = static_cast<int>(i);
  auto a2t = ad::mean(ad::token_nll(scaled_similarity, diag));
  auto t2a = ad::mean(ad::token_nll(ad::transpose(scaled_similarity), diag));
  return ad::scale(ad::add(a2t, t2a), 0.5);
}

ad::Var event_loss(const ad::Var& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) throw std::invalid_argument("event_loss: shape mismatch");
  return ad::mean(ad::bce_with_logits(logits, targets));
}

ad::Var dpo_loss(const ad::Var& reward_gap, double beta) {
  return ad::scale(ad::log_sigmoid(ad::scale(reward_gap, beta)), -1.0);
}

double dpo_loss_value(double reward_gap, double beta) {
  const double x = beta * reward_gap;
  // -log sigmoid(x) = log(1 + e^{-x}), evaluated without overflow.
  return x >= 0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
}

ad::Var CaptionerLosses::total() const { return ad::add(ad::add(atm, atc), ad::add(aec, aac)); }

ad::Var loss_atm(const CapTeller& model, const Batch& batch) {
  require_pairs_batch(batch, "loss_atm");
  auto queries = encode_all(model, batch);
  Tensor sim;
  {
    ad::NoGradScope ng;
    sim = similarity_matrix(model, queries, batch).value();
  }
  return atm_from(model, queries, batch, sim);
}

ad::Var loss_atc(const CapTeller& model, const Batch& batch) {
  require_pairs_batch(batch, "loss_atc");
  auto queries = encode_all(model, batch);
  return contrastive_loss(scaled_by_temperature(model, similarity_matrix(model, queries, batch)));
}

ad::Var loss_aec(const CapTeller& model, const Batch& batch) { return aec_from(model, encode_all(model, batch), batch); }

ad::Var loss_aac(const CapTeller& model, const Batch& batch) { return aac_from(model, encode_all(model, batch), batch); }

CaptionerLosses captioner_losses(const CapTeller& model, const Batch& batch) {
  require_pairs_batch(batch, "captioner_losses");
  auto queries = encode_all(model, batch);
  auto sim = similarity_matrix(model, queries, batch);
  CaptionerLosses out;
  out.atc = contrastive_loss(scaled_by_temperature(model, sim));
  out.atm = atm_from(model, queries, batch, sim.value());
  out.aec = aec_from(model, queries, batch);
  out.aac = aac_from(model, queries, batch);
  return out;
}

ad::Var implicit_reward(const CapTeller& policy, const CapTeller& reference, const Tensor& features,
                        std::span<const int> caption) {
  double ref;
  {
    ad::NoGradScope ng;
    ref = reference.sequence_log_prob(reference.encode_audio(features), caption).item();
  }
  return ad::add_scalar(policy.sequence_log_prob(policy.encode_audio(features), caption), -ref);
}

ad::Var loss_dpo(const CapTeller& policy, const CapTeller& reference, const PreferenceExample& pair,
                 const DPOConfig& config) {
  config.validate();
  if (pair.winner == pair.loser) throw std::invalid_argument("loss_dpo: winner and loser captions are identical");
  double ref_w, ref_l;
  {
    ad::NoGradScope ng;
    auto rq = reference.encode_audio(pair.features);
    ref_w = reference.sequence_log_prob(rq, pair.winner).item();
    ref_l = reference.sequence_log_prob(rq, pair.loser).item();
  }
  auto q = policy.encode_audio(pair.features);
  auto gap = ad::sub(policy.sequence_log_prob(q, pair.winner), policy.sequence_log_prob(q, pair.loser));
  return dpo_loss(ad::add_scalar(gap, ref_l - ref_w), config.beta);
}

ad::Var loss_stage(const CapTeller& model, const Batch& batch, const std::vector<PreferenceExample>* pairs, int stage,
                   const CapTeller* reference, const DPOConfig& config) {
  if (stage != 1 && stage != 3 && stage != 4)
    throw std::invalid_argument("loss_stage: stage " + std::to_string(stage) + " has no training objective");
  if (stage != 4 && pairs) throw std::invalid_argument("loss_stage: preference pairs are only used at stage 4");
  if (stage == 4 && (!pairs || pairs->empty()))
    throw std::invalid_argument("loss_stage: stage 4 needs preference pairs");
  if (stage == 4 && !reference) throw std::invalid_argument("loss_stage: stage 4 needs a reference model");
  auto total = captioner_losses(model, batch).total();
  if (stage != 4) return total;
  std::vector<ad::Var> terms;
  for (const auto& p : *pairs) terms.push_back(loss_dpo(model, *reference, p, config));
  auto dpo = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) dpo = ad::add(dpo, terms[i]);
  return ad::add(total, ad::scale(dpo, 1.0 / static_cast<double>(terms.size())));
}

}  // namespace cosy
