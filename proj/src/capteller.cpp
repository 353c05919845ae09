#include "cosy/capteller.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "cosy/errors.hpp"

namespace cosy {

namespace {

constexpr double kInitStd = 0.02;

Tensor sinusoidal_table(std::size_t n, std::size_t d) {
  Tensor t({n, d});
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      t.at(p, i) = std::sin(static_cast<double>(p) * freq);
      if (i + 1 < d) t.at(p, i + 1) = std::cos(static_cast<double>(p) * freq);
    }
  round_to_float32(t);
  return t;
}

// Tokens the decoder may emit: EOS and real words.
bool generatable(int token) { return token == kEos || token >= kNumSpecialTokens; }

std::vector<double> log_softmax_generatable(const Tensor& logits, double temperature) {
  const std::size_t v = logits.size();
  std::vector<double> out(v, -std::numeric_limits<double>::infinity());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < v; ++i)
    if (generatable(static_cast<int>(i))) mx = std::max(mx, logits[i] / temperature);
  double z = 0.0;
  for (std::size_t i = 0; i < v; ++i)
    if (generatable(static_cast<int>(i))) z += std::exp(logits[i] / temperature - mx);
  const double lz = mx + std::log(z);
  for (std::size_t i = 0; i < v; ++i)
    if (generatable(static_cast<int>(i))) out[i] = logits[i] / temperature - lz;
  return out;
}

std::size_t first_argmax(const std::vector<double>& x) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < x.size(); ++i)
    if (x[i] > x[best]) best = i;
  return best;
}

}  // namespace

std::string to_string(MaskMode m) {
  switch (m) {
    case MaskMode::kATM: return "ATM";
    case MaskMode::kATC: return "ATC";
    case MaskMode::kAEC: return "AEC";
    case MaskMode::kAAC: return "AAC";
  }
  return "?";
}

ad::AttentionMask build_mask(MaskMode mode, std::size_t n_queries, std::size_t text_len) {
  const std::size_t n = n_queries + text_len;
  auto m = ad::AttentionMask::full(n, n);
  if (mode == MaskMode::kATM) return m;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const bool qi = i < n_queries, qj = j < n_queries;
      bool allow;
      if (mode == MaskMode::kAAC)
        allow = qi ? qj : (qj || j <= i);
      else
        allow = qi == qj;
      m.set(i, j, allow);
    }
  return m;
}

void CapTellerConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("CapTellerConfig: ") + what);
  };
  need(audio_dim >= 1, "audio_dim must be >= 1");
  need(n_queries >= 1, "n_queries must be >= 1");
  need(n_heads >= 1 && d_model % n_heads == 0, "d_model must be divisible by n_heads");
  need(n_layers >= 1, "n_layers must be >= 1");
  need(d_ff >= 1 && d_proj >= 1, "d_ff and d_proj must be >= 1");
  need(vocab_size > static_cast<std::size_t>(kNumSpecialTokens), "vocab_size must exceed the special tokens");
  need(n_events >= 1, "n_events must be >= 1");
  need(max_text >= kMaxDecodePrefix, "max_text must cover the longest decoder prefix");
  need(max_frames >= 1, "max_frames must be >= 1");
  need(init_temperature > 0.0, "init_temperature must be positive");
}

nlohmann::json CapTellerConfig::to_json() const {
  return {{"audio_dim", audio_dim}, {"n_queries", n_queries}, {"d_model", d_model},
          {"n_layers", n_layers},   {"n_heads", n_heads},     {"d_ff", d_ff},
          {"d_proj", d_proj},       {"vocab_size", vocab_size}, {"n_events", n_events},
          {"max_text", max_text},   {"max_frames", max_frames}, {"init_temperature", init_temperature}};
}

CapTellerConfig CapTellerConfig::from_json(const nlohmann::json& j) {
  CapTellerConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "audio_dim") c.audio_dim = value.get<std::size_t>();
    else if (key == "n_queries") c.n_queries = value.get<std::size_t>();
    else if (key == "d_model") c.d_model = value.get<std::size_t>();
    else if (key == "n_layers") c.n_layers = value.get<std::size_t>();
    else if (key == "n_heads") c.n_heads = value.get<std::size_t>();
    else if (key == "d_ff") c.d_ff = value.get<std::size_t>();
    else if (key == "d_proj") c.d_proj = value.get<std::size_t>();
    else if (key == "vocab_size") c.vocab_size = value.get<std::size_t>();
    else if (key == "n_events") c.n_events = value.get<std::size_t>();
    else if (key == "max_text") c.max_text = value.get<std::size_t>();
    else if (key == "max_frames") c.max_frames = value.get<std::size_t>();
    else if (key == "init_temperature") c.init_temperature = value.get<double>();
    else throw std::invalid_argument("CapTellerConfig: unknown key '" + key + "'");
  }
  return c;
}

ad::Var max_query_similarity(const ad::Var& query_units, const ad::Var& text_unit) {
  return ad::max_all(ad::matmul(query_units, ad::transpose(text_unit)));
}

CapTeller::CapTeller(CapTellerConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d_model;

  audio_in_w_ = params_.add("audio.in.w", init_normal({config_.audio_dim, d}, kInitStd, rng));
  audio_in_b_ = params_.add("audio.in.b", init_constant({d}, 0.0));
  audio_pos_ = ad::constant(sinusoidal_table(config_.max_frames, d));
  audio_norm_ = make_norm("audio.ln");

  query_table_ = params_.add("query.table", init_normal({config_.n_queries, d}, 1.0, rng));
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "query." + std::to_string(l) + ".";
    QueryBlock b;
    b.ln_self = make_norm(p + "ln_self");
    b.self_attn = make_attn(p + "self", rng);
    b.ln_cross = make_norm(p + "ln_cross");
    b.cross_attn = make_attn(p + "cross", rng);
    b.ln_ffn = make_norm(p + "ln_ffn");
    b.ffn = make_ffn(p + "ffn", rng);
    query_blocks_.push_back(std::move(b));
  }
  query_out_ = make_norm("query.ln_out");

  tok_emb_ = params_.add("text.tok", init_normal({config_.vocab_size, d}, kInitStd, rng));
  pos_emb_ = params_.add("text.pos", init_normal({config_.max_text, d}, kInitStd, rng));
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "joint." + std::to_string(l) + ".";
    JointBlock b;
    b.ln_attn = make_norm(p + "ln_attn");
    b.attn = make_attn(p + "attn", rng);
    b.ln_ffn = make_norm(p + "ln_ffn");
    b.ffn = make_ffn(p + "ffn", rng);
    joint_blocks_.push_back(std::move(b));
  }
  joint_out_ = make_norm("joint.ln_out");

  atm_w_ = params_.add("atm.w", init_normal({d, 2}, kInitStd, rng));
  atm_b_ = params_.add("atm.b", init_constant({2}, 0.0));
  proj_w_ = params_.add("atc.proj.w", init_normal({d, config_.d_proj}, kInitStd, rng));
  proj_b_ = params_.add("atc.proj.b", init_constant({config_.d_proj}, 0.0));
  log_temp_ = params_.add("atc.log_temp", init_constant({1}, std::log(config_.init_temperature)));
  aec_w1_ = params_.add("aec.fc1.w", init_normal({d, d}, kInitStd, rng));
  aec_b1_ = params_.add("aec.fc1.b", init_constant({d}, 0.0));
  aec_w2_ = params_.add("aec.fc2.w", init_normal({d, d}, kInitStd, rng));
  aec_b2_ = params_.add("aec.fc2.b", init_constant({d}, 0.0));
  aec_w3_ = params_.add("aec.fc3.w", init_normal({d, config_.n_events}, kInitStd, rng));
  aec_b3_ = params_.add("aec.fc3.b", init_constant({config_.n_events}, 0.0));
  lm_w_ = params_.add("aac.lm.w", init_normal({d, config_.vocab_size}, kInitStd, rng));
  lm_b_ = params_.add("aac.lm.b", init_constant({config_.vocab_size}, 0.0));
}

CapTeller CapTeller::clone() const {
  CapTeller copy(config_, 0);
  copy.params_.assign_values(params_);
  return copy;
}

CapTeller::Attn CapTeller::make_attn(const std::string& prefix, std::mt19937_64& rng) {
  const std::size_t d = config_.d_model;
  Attn a;
  a.wq = params_.add(prefix + ".wq", init_normal({d, d}, kInitStd, rng));
  a.bq = params_.add(prefix + ".bq", init_constant({d}, 0.0));
  a.wk = params_.add(prefix + ".wk", init_normal({d, d}, kInitStd, rng));
  a.bk = params_.add(prefix + ".bk", init_constant({d}, 0.0));
  a.wv = params_.add(prefix + ".wv", init_normal({d, d}, kInitStd, rng));
  a.bv = params_.add(prefix + ".bv", init_constant({d}, 0.0));
  a.wo = params_.add(prefix + ".wo", init_normal({d, d}, kInitStd, rng));
  a.bo = params_.add(prefix + ".bo", init_constant({d}, 0.0));
  return a;
}

CapTeller::Norm CapTeller::make_norm(const std::string& prefix) {
  Norm n;
  n.g = params_.add(prefix + ".g", init_constant({config_.d_model}, 1.0));
  n.b = params_.add(prefix + ".b", init_constant({config_.d_model}, 0.0));
  return n;
}

CapTeller::Ffn CapTeller::make_ffn(const std::string& prefix, std::mt19937_64& rng) {
  Ffn f;
  f.w1 = params_.add(prefix + ".w1", init_normal({config_.d_model, config_.d_ff}, kInitStd, rng));
  f.b1 = params_.add(prefix + ".b1", init_constant({config_.d_ff}, 0.0));
  f.w2 = params_.add(prefix + ".w2", init_normal({config_.d_ff, config_.d_model}, kInitStd, rng));
  f.b2 = params_.add(prefix + ".b2", init_constant({config_.d_model}, 0.0));
  return f;
}

ad::Var CapTeller::run_attn(const Attn& a, const ad::Var& x, const ad::Var& ctx,
                            const ad::AttentionMask* mask) const {
  auto q = ad::linear(x, a.wq, a.bq);
  auto k = ad::linear(ctx, a.wk, a.bk);
  auto v = ad::linear(ctx, a.wv, a.bv);
  return ad::linear(ad::attention(q, k, v, config_.n_heads, mask), a.wo, a.bo);
}

ad::Var CapTeller::run_ffn(const Ffn& f, const ad::Var& x) const {
  return ad::linear(ad::gelu(ad::linear(x, f.w1, f.b1)), f.w2, f.b2);
}

ad::Var CapTeller::norm(const Norm& n, const ad::Var& x) const { return ad::layer_norm(x, n.g, n.b); }

ad::Var CapTeller::encode_audio(const Tensor& features, std::optional<std::size_t> valid_frames) const {
  if (features.rank() != 2 || features.dim(1) != config_.audio_dim)
    throw std::invalid_argument("encode_audio: expected T x " + std::to_string(config_.audio_dim) +
                                " features, got " + shape_string(features.shape()));
  const std::size_t t = features.dim(0);
  if (t == 0) throw std::invalid_argument("encode_audio: no frames");
  if (t > config_.max_frames)
    throw std::invalid_argument("encode_audio: " + std::to_string(t) + " frames exceeds max_frames " +
                                std::to_string(config_.max_frames));
  if (!features.all_finite()) throw std::invalid_argument("encode_audio: non-finite features");
  const std::size_t valid = valid_frames.value_or(t);
  if (valid == 0 || valid > t) throw std::invalid_argument("encode_audio: valid_frames out of range");

  auto a = ad::linear(ad::constant(features), audio_in_w_, audio_in_b_);
  a = norm(audio_norm_, ad::add(a, ad::slice0(audio_pos_, 0, t)));
  ad::AttentionMask pad;
  if (valid < t) {
    pad = ad::AttentionMask::full(config_.n_queries, t);
    for (std::size_t i = 0; i < config_.n_queries; ++i)
      for (std::size_t j = valid; j < t; ++j) pad.set(i, j, false);
  }
  const ad::AttentionMask* cross_mask = valid < t ? &pad : nullptr;

  ad::Var q = query_table_;
  for (const auto& b : query_blocks_) {
    auto h = norm(b.ln_self, q);
    q = ad::add(q, run_attn(b.self_attn, h, h, nullptr));
    q = ad::add(q, run_attn(b.cross_attn, norm(b.ln_cross, q), a, cross_mask));
    q = ad::add(q, run_ffn(b.ffn, norm(b.ln_ffn, q)));
  }
  return norm(query_out_, q);
}

ad::Var CapTeller::embed_text(std::span<const int> ids) const {
  if (ids.empty()) throw std::invalid_argument("text input is empty");
  if (ids.size() > config_.max_text)
    throw std::invalid_argument("text of " + std::to_string(ids.size()) + " tokens exceeds max_text " +
                                std::to_string(config_.max_text));
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size)
      throw std::invalid_argument("token id " + std::to_string(id) + " outside the vocabulary");
  return ad::add(ad::embedding(tok_emb_, ids), ad::slice0(pos_emb_, 0, ids.size()));
}

ad::Var CapTeller::run_joint(ad::Var x, const ad::AttentionMask* mask) const {
  for (const auto& b : joint_blocks_) {
    auto h = norm(b.ln_attn, x);
    x = ad::add(x, run_attn(b.attn, h, h, mask));
    x = ad::add(x, run_ffn(b.ffn, norm(b.ln_ffn, x)));
  }
  return norm(joint_out_, x);
}

ad::Var CapTeller::joint(const ad::Var& queries, std::span<const int> text, MaskMode mode) const {
  const std::size_t nq = queries.shape().at(0);
  auto mask = build_mask(mode, nq, text.size());
  return run_joint(ad::concat0({queries, embed_text(text)}), &mask);
}

ad::Var CapTeller::text_only(std::span<const int> text, bool causal) const {
  if (!causal) return run_joint(embed_text(text), nullptr);
  auto mask = build_mask(MaskMode::kAAC, 0, text.size());
  return run_joint(embed_text(text), &mask);
}

ad::Var CapTeller::atm_logits(const ad::Var& queries, std::span<const int> words) const {
  const std::size_t nq = queries.shape().at(0);
  auto out = joint(queries, encoder_text(words), MaskMode::kATM);
  return ad::mean_rows(ad::linear(ad::slice0(out, 0, nq), atm_w_, atm_b_));
}

ContrastiveFeatures CapTeller::atc_features(const ad::Var& queries, std::span<const int> words) const {
  const std::size_t nq = queries.shape().at(0);
  auto out = joint(queries, encoder_text(words), MaskMode::kATC);
  auto proj = ad::linear(ad::concat0({ad::slice0(out, 0, nq), ad::slice0(out, nq, nq + 1)}), proj_w_, proj_b_);
  auto unit = ad::l2_normalize_rows(proj);
  return {ad::slice0(unit, 0, nq), ad::slice0(unit, nq, nq + 1)};
}

ad::Var CapTeller::atc_similarity(const ad::Var& queries, std::span<const int> words) const {
  auto f = atc_features(queries, words);
  return max_query_similarity(f.queries, f.text);
}

ad::Var CapTeller::atc_query_units(const ad::Var& queries) const {
  return ad::l2_normalize_rows(ad::linear(run_joint(queries, nullptr), proj_w_, proj_b_));
}

ad::Var CapTeller::atc_text_unit(std::span<const int> words) const {
  auto out = text_only(encoder_text(words), false);
  return ad::l2_normalize_rows(ad::linear(ad::slice0(out, 0, 1), proj_w_, proj_b_));
}

ad::Var CapTeller::aec_logits(const ad::Var& queries) const {
  auto h = ad::relu(ad::linear(ad::mean_rows(queries), aec_w1_, aec_b1_));
  h = ad::relu(ad::linear(h, aec_w2_, aec_b2_));
  return ad::linear(h, aec_w3_, aec_b3_);
}

ad::Var CapTeller::caption_logits(const ad::Var& queries, std::span<const int> decoder_in) const {
  const std::size_t nq = queries.shape().at(0);
  auto out = joint(queries, decoder_in, MaskMode::kAAC);
  return ad::linear(ad::slice0(out, nq, nq + decoder_in.size()), lm_w_, lm_b_);
}

ad::Var CapTeller::decode_step(const ad::Var& queries, std::span<const int> prefix) const {
  if (prefix.empty() || prefix.front() != kBos) throw std::invalid_argument("decode_step: prefix must start with BOS");
  if (prefix.size() > kMaxDecodePrefix)
    throw std::invalid_argument("decode_step: prefix of " + std::to_string(prefix.size()) + " tokens exceeds " +
                                std::to_string(kMaxDecodePrefix));
  auto logits = caption_logits(queries, prefix);
  return ad::reshape(ad::slice0(logits, prefix.size() - 1, prefix.size()), {config_.vocab_size});
}

ad::Var CapTeller::sequence_log_prob(const ad::Var& queries, std::span<const int> words) const {
  auto logits = caption_logits(queries, decoder_input(words));
  return ad::scale(ad::sum(ad::token_nll(logits, decoder_target(words))), -1.0);
}

double CapTeller::temperature() const { return std::exp(log_temp_.value()[0]); }

double CapTeller::confidence(const Tensor& features, std::span<const int> words) const {
  ad::NoGradScope ng;
  return atc_similarity(encode_audio(features), words).item();
}

TokenSequence CapTeller::generate(const Tensor& features, const DecodeOptions& options) const {
  ad::NoGradScope ng;
  return generate_from_queries(encode_audio(features), options);
}

TokenSequence CapTeller::generate_from_queries(const ad::Var& queries, const DecodeOptions& options) const {
  ad::NoGradScope ng;
  constexpr std::size_t kMaxWords = kMaxDecodePrefix - 1;
  auto step_logp = [&](const TokenSequence& words, double temperature) {
    std::vector<int> prefix = decoder_input(words);
    return log_softmax_generatable(decode_step(queries, prefix).value(), temperature);
  };

  if (options.mode == DecodeOptions::Mode::kGreedy) {
    TokenSequence words;
    while (words.size() < kMaxWords) {
      const int next = static_cast<int>(first_argmax(step_logp(words, 1.0)));
      if (next == kEos) break;
      words.push_back(next);
    }
    return words;
  }

  if (options.mode == DecodeOptions::Mode::kNucleus) {
    if (!(options.top_p > 0.0 && options.top_p <= 1.0) || !(options.temperature > 0.0))
      throw std::invalid_argument("nucleus sampling needs 0 < top_p <= 1 and temperature > 0");
    std::mt19937_64 rng(options.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    TokenSequence words;
    while (words.size() < kMaxWords) {
      const auto logp = step_logp(words, options.temperature);
      std::vector<std::size_t> order(logp.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logp[a] > logp[b]; });
      std::vector<double> probs;
      double mass = 0.0;
      for (std::size_t idx : order) {
        const double p = std::exp(logp[idx]);
        if (p <= 0.0) break;
        probs.push_back(p);
        mass += p;
        if (mass >= options.top_p) break;
      }
      const double u = unif(rng) * mass;
      double acc = 0.0;
      std::size_t pick = probs.size() - 1;
      for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) {
          pick = i;
          break;
        }
      }
      const int next = static_cast<int>(order[pick]);
      if (next == kEos) break;
      words.push_back(next);
    }
    return words;
  }

  const std::size_t width = options.beam_width;
  if (width == 0) throw std::invalid_argument("beam width must be >= 1");
  struct Hyp {
    TokenSequence words;
    double score;
  };
  struct Cand {
    std::size_t beam;
    int token;
    double logp;
    double score;
  };
  std::vector<Hyp> alive{{{}, 0.0}};
  std::vector<Hyp> finished;
  while (!alive.empty()) {
    std::vector<Cand> cands;
    for (std::size_t b = 0; b < alive.size(); ++b) {
      if (alive[b].words.size() >= kMaxWords) {
        finished.push_back(alive[b]);
        continue;
      }
      const auto logp = step_logp(alive[b].words, 1.0);
      for (std::size_t tok = 0; tok < logp.size(); ++tok)
        if (std::isfinite(logp[tok])) cands.push_back({b, static_cast<int>(tok), logp[tok], alive[b].score + logp[tok]});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) {
      if (x.score != y.score) return x.score > y.score;
      if (x.beam != y.beam) return x.beam < y.beam;
      return x.logp > y.logp;
    });
    std::vector<Hyp> next;
    for (std::size_t i = 0; i < cands.size() && i < width; ++i) {
      Hyp h{alive[cands[i].beam].words, cands[i].score};
      if (cands[i].token == kEos)
        finished.push_back(std::move(h));
      else {
        h.words.push_back(cands[i].token);
        next.push_back(std::move(h));
      }
    }
    alive = std::move(next);
    if (!finished.empty() && !alive.empty()) {
      double best_done = -std::numeric_limits<double>::infinity();
      for (const auto& h : finished) best_done = std::max(best_done, h.score);
      double best_alive = -std::numeric_limits<double>::infinity();
      for (const auto& h : alive) best_alive = std::max(best_alive, h.score);
      // Scores only decrease as hypotheses grow.
      if (best_done >= best_alive) break;
    }
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i)
    if (finished[i].score > finished[best].score) best = i;
  return finished[best].words;
}

void save_capteller(const CapTeller& model, const std::filesystem::path& path, const std::string& stage_tag,
                    const nlohmann::json& extra) {
  Archive a;
  a.meta = extra;
  a.meta["kind"] = "capteller";
  a.meta["config"] = model.config().to_json();
  a.meta["stage"] = stage_tag;
  store_parameters(a, model.params());
  a.save(path);
}

CapTeller load_capteller(const std::filesystem::path& path) {
  Archive a = Archive::load(path);
  if (a.meta.value("kind", "") != "capteller") throw DataError(path.string() + " is not a captioner checkpoint");
  CapTellerConfig config;
  try {
    config = CapTellerConfig::from_json(a.meta.at("config"));
    config.validate();
  } catch (const std::exception& e) {
    throw DataError(path.string() + ": bad model config: " + e.what());
  }
  CapTeller model(config, 0);
  restore_parameters(a, model.params());
  return model;
}

std::string checkpoint_stage_tag(const std::filesystem::path& path) {
  return Archive::load(path).meta.value("stage", "");
}

}  // namespace cosy
