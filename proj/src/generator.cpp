#include "cosy/generator.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "cosy/binio.hpp"
#include "cosy/corpus.hpp"
#include "cosy/errors.hpp"

namespace cosy::gen {

namespace {

Tensor standard_normal(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = nd(rng);
  return t;
}

const Shape kLatentShape{kLatentChannels, kLatentBins, kLatentFrames};

}  // namespace

// --------------------------------------------------------------- config

void GeneratorConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("GeneratorConfig: ") + what);
  };
  need(vocab_size > static_cast<std::size_t>(kNumSpecialTokens), "vocab_size must exceed the special tokens");
  need(t_max >= 1, "t_max must be >= 1");
  need(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0, "need 0 < beta_start < beta_end < 1");
  need(d_time >= 2 && d_time % 2 == 0, "d_time must be even");
  need(d_conf >= 1 && n_levels >= 1, "d_conf and n_levels must be >= 1");
  need(text_heads >= 1 && d_text % text_heads == 0, "d_text must be divisible by text_heads");
  need(unet_channels >= 2 && (2 * unet_channels) % text_heads == 0, "unet_channels incompatible with heads");
  need(vae_channels >= 2 && vae_channels % 2 == 0, "vae_channels must be even");
  need(kl_weight >= 0.0, "kl_weight must be >= 0");
  need(cfg_dropout >= 0.0 && cfg_dropout < 1.0, "cfg_dropout must be in [0, 1)");
}

nlohmann::json GeneratorConfig::to_json() const {
  return {{"vocab_size", vocab_size},   {"t_max", t_max},         {"beta_start", beta_start},
          {"beta_end", beta_end},       {"d_time", d_time},       {"d_conf", d_conf},
          {"n_levels", n_levels},       {"d_text", d_text},       {"text_layers", text_layers},
          {"text_heads", text_heads},   {"max_text", max_text},   {"unet_channels", unet_channels},
          {"vae_channels", vae_channels}, {"kl_weight", kl_weight}, {"cfg_dropout", cfg_dropout}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k == "vocab_size") c.vocab_size = v.get<std::size_t>();
    else if (k == "t_max") c.t_max = v.get<std::size_t>();
    else if (k == "beta_start") c.beta_start = v.get<double>();
    else if (k == "beta_end") c.beta_end = v.get<double>();
    else if (k == "d_time") c.d_time = v.get<std::size_t>();
    else if (k == "d_conf") c.d_conf = v.get<std::size_t>();
    else if (k == "n_levels") c.n_levels = v.get<std::size_t>();
    else if (k == "d_text") c.d_text = v.get<std::size_t>();
    else if (k == "text_layers") c.text_layers = v.get<std::size_t>();
    else if (k == "text_heads") c.text_heads = v.get<std::size_t>();
    else if (k == "max_text") c.max_text = v.get<std::size_t>();
    else if (k == "unet_channels") c.unet_channels = v.get<std::size_t>();
    else if (k == "vae_channels") c.vae_channels = v.get<std::size_t>();
    else if (k == "kl_weight") c.kl_weight = v.get<double>();
    else if (k == "cfg_dropout") c.cfg_dropout = v.get<double>();
    else throw std::invalid_argument("GeneratorConfig: unknown key '" + k + "'");
  }
  return c;
}

// ------------------------------------------------------------- schedule

Schedule::Schedule(std::size_t t_max, double beta_start, double beta_end) {
  if (t_max == 0) throw std::invalid_argument("schedule needs t_max >= 1");
  betas_.resize(t_max);
  alpha_bars_.resize(t_max + 1);
  alpha_bars_[0] = 1.0;
  for (std::size_t i = 0; i < t_max; ++i) {
    betas_[i] = t_max == 1 ? beta_start
                           : beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(t_max - 1);
    alpha_bars_[i + 1] = alpha_bars_[i] * (1.0 - betas_[i]);
  }
}

double Schedule::beta(std::size_t t) const {
  if (t < 1 || t > betas_.size()) throw std::out_of_range("beta index " + std::to_string(t) + " outside [1, t_max]");
  return betas_[t - 1];
}

double Schedule::alpha_bar(std::size_t t) const {
  if (t >= alpha_bars_.size()) throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, t_max]");
  return alpha_bars_[t];
}

Tensor diffuse_forward(const Tensor& z0, std::size_t t, const Tensor& noise, const Schedule& schedule) {
  if (z0.shape() != noise.shape()) throw std::invalid_argument("diffuse_forward: noise shape mismatch");
  const double ab = schedule.alpha_bar(t);
  if (t == 0) return z0;
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out(z0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * noise[i];
  return out;
}

ad::Var diffuse_forward(const ad::Var& z0, std::size_t t, const Tensor& noise, const Schedule& schedule) {
  if (z0.shape() != noise.shape()) throw std::invalid_argument("diffuse_forward: noise shape mismatch");
  const double ab = schedule.alpha_bar(t);
  if (t == 0) return z0;
  Tensor scaled = noise;
  for (auto& v : scaled.vec()) v *= std::sqrt(1.0 - ab);
  return ad::add(ad::scale(z0, std::sqrt(ab)), ad::constant(std::move(scaled)));
}

Tensor timestep_embedding(double t, std::size_t d) {
  Tensor e({d});
  const std::size_t half = d / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e[i] = std::sin(t * freq);
    e[half + i] = std::cos(t * freq);
  }
  return e;
}

// ---------------------------------------------------------------- model

Generator::Conv Generator::make_conv(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t out,
                                     std::size_t k, std::mt19937_64& rng, bool zero) {
  Conv c;
  const double sd = 1.0 / std::sqrt(static_cast<double>(in * k * k));
  c.w = ps.add(name + ".w", zero ? init_constant({out, in, k, k}, 0.0) : init_normal({out, in, k, k}, sd, rng));
  c.b = ps.add(name + ".b", init_constant({out}, 0.0));
  return c;
}

Generator::Res Generator::make_res(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
  Res r;
  r.c1 = make_conv(diff_params_, name + ".c1", in, out, 3, rng);
  r.c2 = make_conv(diff_params_, name + ".c2", out, out, 3, rng);
  r.emb_w = diff_params_.add(name + ".emb.w", init_normal({config_.d_time, out}, 0.02, rng));
  r.emb_b = diff_params_.add(name + ".emb.b", init_constant({out}, 0.0));
  r.has_skip = in != out;
  if (r.has_skip) r.skip = make_conv(diff_params_, name + ".skip", in, out, 1, rng);
  return r;
}

Generator::Generator(GeneratorConfig config, std::uint64_t seed)
    : config_(config), schedule_(config.t_max, config.beta_start, config.beta_end) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t vc = config_.vae_channels;
  enc_in_ = make_conv(vae_params_, "enc.in", 1, vc / 2, 3, rng);
  enc_d1_ = make_conv(vae_params_, "enc.down1", vc / 2, vc, 3, rng);
  enc_d2_ = make_conv(vae_params_, "enc.down2", vc, vc, 3, rng);
  enc_out_ = make_conv(vae_params_, "enc.out", vc, 2 * kLatentChannels, 3, rng);
  dec_in_ = make_conv(vae_params_, "dec.in", kLatentChannels, vc, 3, rng);
  dec_u1_ = make_conv(vae_params_, "dec.up1", vc, vc, 3, rng);
  dec_u2_ = make_conv(vae_params_, "dec.up2", vc, vc / 2, 3, rng);
  dec_out_ = make_conv(vae_params_, "dec.out", vc / 2, 1, 3, rng);

  const std::size_t dt = config_.d_text;
  tok_emb_ = diff_params_.add("text.tok", init_normal({config_.vocab_size, dt}, 0.02, rng));
  pos_emb_ = diff_params_.add("text.pos", init_normal({config_.max_text, dt}, 0.02, rng));
  null_state_ = diff_params_.add("text.null", init_normal({1, dt}, 0.02, rng));
  auto norm = [&](const std::string& n, std::size_t d) {
    return Norm{diff_params_.add(n + ".g", init_constant({d}, 1.0)), diff_params_.add(n + ".b", init_constant({d}, 0.0))};
  };
  for (std::size_t l = 0; l < config_.text_layers; ++l) {
    const std::string p = "text." + std::to_string(l);
    Block b;
    b.ln1 = norm(p + ".ln1", dt);
    b.wq = diff_params_.add(p + ".wq", init_normal({dt, dt}, 0.02, rng));
    b.bq = diff_params_.add(p + ".bq", init_constant({dt}, 0.0));
    b.wk = diff_params_.add(p + ".wk", init_normal({dt, dt}, 0.02, rng));
    b.bk = diff_params_.add(p + ".bk", init_constant({dt}, 0.0));
    b.wv = diff_params_.add(p + ".wv", init_normal({dt, dt}, 0.02, rng));
    b.bv = diff_params_.add(p + ".bv", init_constant({dt}, 0.0));
    b.wo = diff_params_.add(p + ".wo", init_normal({dt, dt}, 0.02, rng));
    b.bo = diff_params_.add(p + ".bo", init_constant({dt}, 0.0));
    b.ln2 = norm(p + ".ln2", dt);
    b.f1 = diff_params_.add(p + ".f1", init_normal({dt, 2 * dt}, 0.02, rng));
    b.fb1 = diff_params_.add(p + ".fb1", init_constant({2 * dt}, 0.0));
    b.f2 = diff_params_.add(p + ".f2", init_normal({2 * dt, dt}, 0.02, rng));
    b.fb2 = diff_params_.add(p + ".fb2", init_constant({dt}, 0.0));
    text_blocks_.push_back(std::move(b));
  }
  text_out_ = norm("text.ln_out", dt);

  const std::size_t de = config_.d_time;
  conf_table_ = diff_params_.add("cond.confidence", init_normal({config_.n_levels, config_.d_conf}, 1.0, rng));
  emb_w1_ = diff_params_.add("cond.proj.w", init_normal({de + config_.d_conf, de}, 1.0 / std::sqrt(static_cast<double>(de + config_.d_conf)), rng));
  emb_b1_ = diff_params_.add("cond.proj.b", init_constant({de}, 0.0));
  emb_w2_ = diff_params_.add("cond.mlp.w", init_normal({de, de}, 1.0 / std::sqrt(static_cast<double>(de)), rng));
  emb_b2_ = diff_params_.add("cond.mlp.b", init_constant({de}, 0.0));

  const std::size_t c = config_.unet_channels;
  in_conv_ = make_conv(diff_params_, "unet.in", kLatentChannels, c, 3, rng);
  res_d1_ = make_res("unet.down1.res", c, c, rng);
  down1_ = make_conv(diff_params_, "unet.down1.conv", c, c, 3, rng);
  res_d2_ = make_res("unet.down2.res", c, 2 * c, rng);
  down2_ = make_conv(diff_params_, "unet.down2.conv", 2 * c, 2 * c, 3, rng);
  res_m1_ = make_res("unet.mid.res1", 2 * c, 2 * c, rng);
  xattn_ln_ = norm("unet.mid.xattn.ln", 2 * c);
  xq_w_ = diff_params_.add("unet.mid.xattn.wq", init_normal({2 * c, 2 * c}, 0.02, rng));
  xq_b_ = diff_params_.add("unet.mid.xattn.bq", init_constant({2 * c}, 0.0));
  xk_w_ = diff_params_.add("unet.mid.xattn.wk", init_normal({dt, 2 * c}, 0.02, rng));
  xk_b_ = diff_params_.add("unet.mid.xattn.bk", init_constant({2 * c}, 0.0));
  xv_w_ = diff_params_.add("unet.mid.xattn.wv", init_normal({dt, 2 * c}, 0.02, rng));
  xv_b_ = diff_params_.add("unet.mid.xattn.bv", init_constant({2 * c}, 0.0));
  xo_w_ = diff_params_.add("unet.mid.xattn.wo", init_normal({2 * c, 2 * c}, 0.02, rng));
  xo_b_ = diff_params_.add("unet.mid.xattn.bo", init_constant({2 * c}, 0.0));
  res_m2_ = make_res("unet.mid.res2", 2 * c, 2 * c, rng);
  res_u2_ = make_res("unet.up2.res", 4 * c, 2 * c, rng);
  up_conv_ = make_conv(diff_params_, "unet.up1.conv", 2 * c, c, 3, rng);
  res_u1_ = make_res("unet.up1.res", 2 * c, c, rng);
  out_conv_ = make_conv(diff_params_, "unet.out", c, kLatentChannels, 3, rng, true);
}

ad::Var Generator::conv(const Conv& c, const ad::Var& x, std::size_t stride) const {
  return ad::conv2d(x, c.w, c.b, stride, c.w.shape()[2] / 2);
}

ad::Var Generator::res(const Res& r, const ad::Var& x, const ad::Var& emb) const {
  const std::size_t out = r.c1.w.shape()[0];
  auto h = conv(r.c1, ad::silu(x));
  auto e = ad::linear(ad::reshape(ad::silu(emb), {1, config_.d_time}), r.emb_w, r.emb_b);
  h = ad::add_channel(h, ad::reshape(e, {out}));
  h = conv(r.c2, ad::silu(h));
  return ad::add(r.has_skip ? conv(r.skip, x) : x, h);
}

void Generator::check_level(int level) const {
  if (level < 0 || static_cast<std::size_t>(level) >= config_.n_levels)
    throw std::invalid_argument("confidence level " + std::to_string(level) + " outside [0, " +
                                std::to_string(config_.n_levels - 1) + "]");
}

Posterior Generator::vae_encode(const Tensor& mel) const {
  if (mel.shape() != Shape{kMelBins, kMelFrames})
    throw std::invalid_argument("vae_encode: expected 16 x 64 mel, got " + shape_string(mel.shape()));
  auto x = ad::constant(mel.reshaped({1, kMelBins, kMelFrames}));
  auto h = ad::silu(conv(enc_in_, x));
  h = ad::silu(conv(enc_d1_, h, 2));
  h = ad::silu(conv(enc_d2_, h, 2));
  h = conv(enc_out_, h);
  return {ad::slice0(h, 0, kLatentChannels), ad::slice0(h, kLatentChannels, 2 * kLatentChannels)};
}

ad::Var Generator::vae_decode(const ad::Var& z) const {
  if (z.shape() != kLatentShape) throw std::invalid_argument("vae_decode: expected 4 x 4 x 16 latent, got " + shape_string(z.shape()));
  auto h = ad::silu(conv(dec_in_, z));
  h = ad::silu(conv(dec_u1_, ad::upsample_nearest2x(h)));
  h = ad::silu(conv(dec_u2_, ad::upsample_nearest2x(h)));
  return ad::reshape(conv(dec_out_, h), {kMelBins, kMelFrames});
}

ad::Var Generator::vae_loss(const Tensor& mel, std::mt19937_64* rng) const {
  auto post = vae_encode(mel);
  ad::Var z = post.mean;
  if (rng) {
    auto eps = ad::constant(standard_normal(kLatentShape, *rng));
    z = ad::add(post.mean, ad::mul(ad::exp(ad::scale(post.logvar, 0.5)), eps));
  }
  auto recon = ad::mse(vae_decode(z), ad::constant(mel));
  return ad::add(recon, ad::scale(ad::kl_standard_normal(post.mean, post.logvar), config_.kl_weight));
}

ad::Var Generator::encode_text(std::span<const int> caption) const {
  if (caption.empty()) throw std::invalid_argument("generator caption is empty");
  if (caption.size() > config_.max_text) throw std::invalid_argument("generator caption too long");
  for (int id : caption)
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size)
      throw std::invalid_argument("token id " + std::to_string(id) + " outside the vocabulary");
  auto x = ad::add(ad::embedding(tok_emb_, caption), ad::slice0(pos_emb_, 0, caption.size()));
  for (const auto& b : text_blocks_) {
    auto h = ad::layer_norm(x, b.ln1.g, b.ln1.b);
    auto a = ad::attention(ad::linear(h, b.wq, b.bq), ad::linear(h, b.wk, b.bk), ad::linear(h, b.wv, b.bv),
                           config_.text_heads, nullptr);
    x = ad::add(x, ad::linear(a, b.wo, b.bo));
    h = ad::layer_norm(x, b.ln2.g, b.ln2.b);
    x = ad::add(x, ad::linear(ad::gelu(ad::linear(h, b.f1, b.fb1)), b.f2, b.fb2));
  }
  return ad::layer_norm(x, text_out_.g, text_out_.b);
}

ad::Var Generator::null_text() const { return null_state_; }

ad::Var Generator::time_confidence_embedding(std::size_t t, int level) const {
  check_level(level);
  auto temb = ad::constant(timestep_embedding(static_cast<double>(t), config_.d_time));
  const auto row = static_cast<std::size_t>(level);
  auto cemb = ad::reshape(ad::slice0(conf_table_, row, row + 1), {config_.d_conf});
  auto cat = ad::reshape(ad::concat0({temb, cemb}), {1, config_.d_time + config_.d_conf});
  auto e = ad::silu(ad::linear(cat, emb_w1_, emb_b1_));
  return ad::reshape(ad::linear(e, emb_w2_, emb_b2_), {config_.d_time});
}

ad::Var Generator::predict_noise(const ad::Var& z_t, std::size_t t, const ad::Var& text_states, int level) const {
  if (z_t.shape() != kLatentShape) throw std::invalid_argument("predict_noise: expected 4 x 4 x 16 latent, got " + shape_string(z_t.shape()));
  if (t > config_.t_max) throw std::out_of_range("predict_noise: timestep beyond t_max");
  const std::size_t c2 = 2 * config_.unet_channels;
  auto emb = time_confidence_embedding(t, level);
  auto h0 = conv(in_conv_, z_t);
  auto h1 = res(res_d1_, h0, emb);
  auto h2 = res(res_d2_, conv(down1_, h1, 2), emb);
  auto m = res(res_m1_, conv(down2_, h2, 2), emb);

  const Shape mid_shape = m.shape();
  const std::size_t positions = mid_shape[1] * mid_shape[2];
  auto tokens = ad::transpose(ad::reshape(m, {c2, positions}));
  auto q = ad::linear(ad::layer_norm(tokens, xattn_ln_.g, xattn_ln_.b), xq_w_, xq_b_);
  auto a = ad::attention(q, ad::linear(text_states, xk_w_, xk_b_), ad::linear(text_states, xv_w_, xv_b_),
                         config_.text_heads, nullptr);
  a = ad::linear(a, xo_w_, xo_b_);
  m = ad::add(m, ad::reshape(ad::transpose(a), mid_shape));
  m = res(res_m2_, m, emb);

  auto u2 = res(res_u2_, ad::concat0({ad::upsample_nearest2x(m), h2}), emb);
  auto u1 = ad::upsample_nearest2x(conv(up_conv_, u2));
  u1 = res(res_u1_, ad::concat0({u1, h1}), emb);
  return conv(out_conv_, ad::silu(u1));
}

ad::Var Generator::predict_noise(const Tensor& z_t, std::size_t t, std::span<const int> caption, int level) const {
  return predict_noise(ad::constant(z_t), t, encode_text(caption), level);
}

Tensor Generator::clean_latent(const Tensor& mel) const {
  ad::NoGradScope ng;
  Tensor z = vae_encode(mel).mean.value();
  for (auto& v : z.vec()) v *= latent_scale_;
  return z;
}

std::vector<LatentExample> Generator::to_latents(std::span<const TrainExample> data) const {
  std::vector<LatentExample> out;
  out.reserve(data.size());
  for (const auto& e : data) {
    check_level(e.level);
    out.push_back({clean_latent(e.mel), e.caption, e.level});
  }
  return out;
}

ad::Var Generator::diffusion_loss(std::span<const LatentExample> batch, std::mt19937_64& rng) const {
  if (batch.empty()) throw std::invalid_argument("diffusion_loss: empty batch");
  std::uniform_int_distribution<std::size_t> tdist(1, config_.t_max);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ad::Var total;
  for (const auto& e : batch) {
    const std::size_t t = tdist(rng);
    Tensor noise = standard_normal(kLatentShape, rng);
    const bool drop = u(rng) < config_.cfg_dropout;
    auto text = drop ? null_text() : encode_text(e.caption);
    auto z_t = ad::constant(diffuse_forward(e.z0, t, noise, schedule_));
    auto l = ad::mse(predict_noise(z_t, t, text, e.level), ad::constant(std::move(noise)));
    total = total.defined() ? ad::add(total, l) : l;
  }
  return ad::scale(total, 1.0 / static_cast<double>(batch.size()));
}

Tensor Generator::sample(std::span<const int> caption, int level, const SampleOptions& options) const {
  check_level(level);
  if (options.steps < 1 || options.steps > config_.t_max)
    throw std::invalid_argument("sampling steps must be in [1, " + std::to_string(config_.t_max) + "]");
  ad::NoGradScope ng;
  const auto cond = encode_text(caption);
  const bool guided = options.guidance_scale != 1.0;
  const auto uncond = null_text();

  std::vector<std::size_t> taus(options.steps + 1, 0);
  for (std::size_t i = 1; i <= options.steps; ++i)
    taus[i] = static_cast<std::size_t>(std::llround(static_cast<double>(i * config_.t_max) / static_cast<double>(options.steps)));

  std::mt19937_64 rng(options.seed);
  Tensor x = standard_normal(kLatentShape, rng);
  for (std::size_t i = options.steps; i >= 1; --i) {
    const std::size_t t = taus[i];
    const double ab = schedule_.alpha_bar(t), ab_prev = schedule_.alpha_bar(taus[i - 1]);
    const double beta = 1.0 - ab / ab_prev;
    Tensor eps = predict_noise(ad::constant(x), t, cond, level).value();
    if (guided) {
      const Tensor eu = predict_noise(ad::constant(x), t, uncond, level).value();
      for (std::size_t k = 0; k < eps.size(); ++k) eps[k] = eu[k] + options.guidance_scale * (eps[k] - eu[k]);
    }
    const double c = beta / std::sqrt(1.0 - ab), inv = 1.0 / std::sqrt(1.0 - beta);
    for (std::size_t k = 0; k < x.size(); ++k) x[k] = inv * (x[k] - c * eps[k]);
    if (i > 1) {
      const double sd = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
      Tensor z = standard_normal(kLatentShape, rng);
      for (std::size_t k = 0; k < x.size(); ++k) x[k] += sd * z[k];
    }
  }
  for (auto& v : x.vec()) v /= latent_scale_;
  return vae_decode(ad::constant(x)).value();
}

// ------------------------------------------------------------- training

double evaluation_loss(const Generator& g, std::span<const LatentExample> data, std::uint64_t seed,
                       std::size_t draws_per_example) {
  ad::NoGradScope ng;
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto text = g.encode_text(data[i].caption);
    for (std::size_t d = 0; d < draws_per_example; ++d) {
      std::mt19937_64 rng(corpus::mix_seed(corpus::mix_seed(seed, i), d));
      std::uniform_int_distribution<std::size_t> tdist(1, g.config().t_max);
      const std::size_t t = tdist(rng);
      Tensor noise = standard_normal(kLatentShape, rng);
      auto z_t = ad::constant(diffuse_forward(data[i].z0, t, noise, g.schedule()));
      total += ad::mse(g.predict_noise(z_t, t, text, data[i].level), ad::constant(noise)).item();
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

GenTrainReport train_generator(Generator& g, std::span<const TrainExample> data, const GenTrainSchedule& schedule) {
  if (data.empty()) throw std::invalid_argument("generator training needs at least one example");
  if (schedule.batch_size < 1) throw std::invalid_argument("generator batch_size must be >= 1");
  std::mt19937_64 rng(corpus::mix_seed(schedule.seed, 0x67656eULL));
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  const std::size_t bs = std::min(schedule.batch_size, data.size());

  AdamConfig vc;
  vc.lr = schedule.vae_lr;
  AdamW vae_opt(vc);
  for (std::size_t step = 0; step < schedule.vae_steps; ++step) {
    g.vae_params().zero_grad();
    ad::Tape tape;
    {
      ad::GradScope scope(tape);
      ad::Var total;
      for (std::size_t b = 0; b < bs; ++b) {
        auto l = g.vae_loss(data[pick(rng)].mel, &rng);
        total = total.defined() ? ad::add(total, l) : l;
      }
      tape.backward(ad::scale(total, 1.0 / static_cast<double>(bs)));
    }
    vae_opt.step(g.vae_params());
  }

  // Unit-variance latents for the diffusion model.
  g.set_latent_scale(1.0);
  double sum = 0.0, sq = 0.0;
  std::size_t count = 0;
  for (const auto& e : data)
    for (double v : g.clean_latent(e.mel).vec()) {
      sum += v;
      sq += v * v;
      ++count;
    }
  const double mean = sum / static_cast<double>(count);
  const double sd = std::sqrt(std::max(sq / static_cast<double>(count) - mean * mean, 1e-12));
  g.set_latent_scale(static_cast<double>(static_cast<float>(1.0 / sd)));

  GenTrainReport report;
  {
    ad::NoGradScope ng;
    double mse = 0.0;
    for (const auto& e : data) mse += ad::mse(g.vae_decode(g.vae_encode(e.mel).mean), ad::constant(e.mel)).item();
    report.vae_mse = mse / static_cast<double>(data.size());
  }

  const auto latents = g.to_latents(data);
  const std::uint64_t eval_seed = corpus::mix_seed(schedule.seed, 0x6576616cULL);
  report.diffusion_loss_before = evaluation_loss(g, latents, eval_seed);
  AdamConfig dc;
  dc.lr = schedule.diffusion_lr;
  AdamW diff_opt(dc);
  std::uniform_int_distribution<std::size_t> pick_latent(0, latents.size() - 1);
  for (std::size_t step = 0; step < schedule.diffusion_steps; ++step) {
    std::vector<LatentExample> batch;
    for (std::size_t b = 0; b < bs; ++b) batch.push_back(latents[pick_latent(rng)]);
    g.diffusion_params().zero_grad();
    ad::Tape tape;
    {
      ad::GradScope scope(tape);
      tape.backward(g.diffusion_loss(batch, rng));
    }
    diff_opt.step(g.diffusion_params());
  }
  report.diffusion_loss_after = evaluation_loss(g, latents, eval_seed);
  return report;
}

// ------------------------------------------------------------------ io

void save_generator(const Generator& g, const std::filesystem::path& path) {
  Archive a;
  a.meta["kind"] = "generator";
  a.meta["config"] = g.config().to_json();
  a.meta["latent_scale"] = g.latent_scale();
  a.meta["stage"] = "GEN_TRAIN";
  store_parameters(a, g.vae_params(), "vae/");
  store_parameters(a, g.diffusion_params(), "diffusion/");
  a.save(path);
}

Generator load_generator(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("missing generator checkpoint " + path.string());
  Archive a = Archive::load(path);
  if (a.meta.value("kind", "") != "generator") throw DataError(path.string() + " is not a generator checkpoint");
  GeneratorConfig config;
  try {
    config = GeneratorConfig::from_json(a.meta.at("config"));
    config.validate();
  } catch (const std::exception& e) {
    throw DataError(path.string() + ": bad generator config: " + e.what());
  }
  Generator g(config, 0);
  restore_parameters(a, g.vae_params(), "vae/");
  restore_parameters(a, g.diffusion_params(), "diffusion/");
  g.set_latent_scale(a.meta.value("latent_scale", 1.0));
  return g;
}

void write_generated(const Tensor& mel, const std::string& caption, int level, const SampleOptions& options,
                     const std::filesystem::path& path) {
  write_matrix_file(path, mel);
  nlohmann::ordered_json side;
  side["caption"] = caption;
  side["level"] = level;
  side["seed"] = options.seed;
  side["steps"] = options.steps;
  side["guidance_scale"] = options.guidance_scale;
  std::ofstream out(path.string() + ".json");
  if (!out) throw DataError("cannot write sidecar for " + path.string());
  out << side.dump(2) << '\n';
}

}  // namespace cosy::gen
