#pragma once

// Audio captioner and caption assessor built around a small set of learnable
// queries.
//
// encode_audio runs the queries through blocks of {query self-attention,
// cross-attention to audio frames, feed-forward}; the result (a QuerySet) is
// independent of any text. The task heads then run a shared self-attention
// stack over [queries | text] under one of four masks:
//
//   ATM  everything sees everything (matching classifier)
//   ATC  block diagonal: queries see queries, text sees text (contrastive)
//   AEC  same as ATC (event classifier reads the queries only)
//   AAC  queries bidirectional; text token t sees all queries and text <= t

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cosy/autograd.hpp"
#include "cosy/params.hpp"
#include "cosy/tokenizer.hpp"

namespace cosy {

enum class MaskMode { kATM, kATC, kAEC, kAAC };
std::string to_string(MaskMode m);

ad::AttentionMask build_mask(MaskMode mode, std::size_t n_queries, std::size_t text_len);

struct CapTellerConfig {
  std::size_t audio_dim = 32;
  std::size_t n_queries = 8;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t d_proj = 32;
  std::size_t vocab_size = 0;
  std::size_t n_events = 16;
  std::size_t max_text = 26;
  std::size_t max_frames = 128;
  double init_temperature = 0.07;

  void validate() const;
  nlohmann::json to_json() const;
  static CapTellerConfig from_json(const nlohmann::json& j);
};

inline constexpr std::size_t kMaxDecodePrefix = 25;

// Row-normalised projections feeding the contrastive similarity.
struct ContrastiveFeatures {
  ad::Var queries;  // n_queries x d_proj, unit rows
  ad::Var text;     // 1 x d_proj, unit row
};

// max_i <queries_i, text>; both inputs already unit-normalised.
ad::Var max_query_similarity(const ad::Var& query_units, const ad::Var& text_unit);

struct DecodeOptions {
  enum class Mode { kGreedy, kBeam, kNucleus };
  Mode mode = Mode::kGreedy;
  std::size_t beam_width = 3;
  double top_p = 0.9;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  static DecodeOptions greedy() { return {}; }
  static DecodeOptions beam(std::size_t width) { return {Mode::kBeam, width, 0.9, 1.0, 0}; }
  static DecodeOptions nucleus(std::uint64_t seed, double p = 0.9, double temp = 1.0) {
    return {Mode::kNucleus, 3, p, temp, seed};
  }
};

class CapTeller {
 public:
  CapTeller(CapTellerConfig config, std::uint64_t seed);
  CapTeller(const CapTeller&) = delete;
  CapTeller& operator=(const CapTeller&) = delete;
  CapTeller(CapTeller&&) = default;
  CapTeller& operator=(CapTeller&&) = default;

  const CapTellerConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  CapTeller clone() const;

  // features: T x audio_dim. Frames at index >= valid_frames are padding and
  // are never attended. Returns the QuerySet (n_queries x d_model).
  ad::Var encode_audio(const Tensor& features, std::optional<std::size_t> valid_frames = std::nullopt) const;

  // Shared self-attention stack over [queries | text]; returns all rows.
  ad::Var joint(const ad::Var& queries, std::span<const int> text, MaskMode mode) const;
  // Same stack over text alone (no query rows at all).
  ad::Var text_only(std::span<const int> text, bool causal) const;

  // Task heads; `words` are caption word ids without framing tokens.
  ad::Var atm_logits(const ad::Var& queries, std::span<const int> words) const;       // 1 x 2
  ContrastiveFeatures atc_features(const ad::Var& queries, std::span<const int> words) const;
  ad::Var atc_similarity(const ad::Var& queries, std::span<const int> words) const;   // scalar
  // The two halves of atc_features computed separately, which the
  // block-diagonal mask makes exact; lets a batch score B x B pairs with B
  // passes per side.
  ad::Var atc_query_units(const ad::Var& queries) const;       // n_queries x d_proj
  ad::Var atc_text_unit(std::span<const int> words) const;     // 1 x d_proj
  ad::Var aec_logits(const ad::Var& queries) const;                                   // 1 x n_events
  // Next-token logits for every position of a decoder input ([BOS, words...]).
  ad::Var caption_logits(const ad::Var& queries, std::span<const int> decoder_in) const;  // L x V
  // Logits for the token following `prefix`, which must start with BOS.
  ad::Var decode_step(const ad::Var& queries, std::span<const int> prefix) const;         // V
  // Sum of log-probabilities of words followed by EOS.
  ad::Var sequence_log_prob(const ad::Var& queries, std::span<const int> words) const;

  ad::Var log_temperature() const { return log_temp_; }
  double temperature() const;

  double confidence(const Tensor& features, std::span<const int> words) const;
  TokenSequence generate(const Tensor& features, const DecodeOptions& options) const;
  TokenSequence generate_from_queries(const ad::Var& queries, const DecodeOptions& options) const;

 private:
  struct Attn {
    ad::Var wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct Norm {
    ad::Var g, b;
  };
  struct Ffn {
    ad::Var w1, b1, w2, b2;
  };
  struct QueryBlock {
    Norm ln_self, ln_cross, ln_ffn;
    Attn self_attn, cross_attn;
    Ffn ffn;
  };
  struct JointBlock {
    Norm ln_attn, ln_ffn;
    Attn attn;
    Ffn ffn;
  };

  Attn make_attn(const std::string& prefix, std::mt19937_64& rng);
  Norm make_norm(const std::string& prefix);
  Ffn make_ffn(const std::string& prefix, std::mt19937_64& rng);
  ad::Var run_attn(const Attn& a, const ad::Var& x, const ad::Var& ctx, const ad::AttentionMask* mask) const;
  ad::Var run_ffn(const Ffn& f, const ad::Var& x) const;
  ad::Var norm(const Norm& n, const ad::Var& x) const;
  ad::Var embed_text(std::span<const int> ids) const;
  ad::Var run_joint(ad::Var x, const ad::AttentionMask* mask) const;

  CapTellerConfig config_;
  ParameterSet params_;
  ad::Var audio_in_w_, audio_in_b_, audio_pos_;
  Norm audio_norm_;
  ad::Var query_table_;
  std::vector<QueryBlock> query_blocks_;
  Norm query_out_;
  ad::Var tok_emb_, pos_emb_;
  std::vector<JointBlock> joint_blocks_;
  Norm joint_out_;
  ad::Var atm_w_, atm_b_;
  ad::Var proj_w_, proj_b_, log_temp_;
  ad::Var aec_w1_, aec_b1_, aec_w2_, aec_b2_, aec_w3_, aec_b3_;
  ad::Var lm_w_, lm_b_;
};

// Single-archive checkpoint: every parameter under its stable name, the
// model config, and a training-stage tag.
void save_capteller(const CapTeller& model, const std::filesystem::path& path, const std::string& stage_tag,
                    const nlohmann::json& extra = nlohmann::json::object());
// Throws DataError when the file is missing, malformed or mismatched.
CapTeller load_capteller(const std::filesystem::path& path);
std::string checkpoint_stage_tag(const std::filesystem::path& path);

}  // namespace cosy
