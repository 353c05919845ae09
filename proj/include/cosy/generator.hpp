#pragma once

// Quality-aware latent diffusion over 16 x 64 mel-like features.
//
//   VAE       1 x 16 x 64  <->  4 x 4 x 16 latent (two stride-2 stages)
//   schedule  linear beta 1e-4 .. 0.02 over T_max steps, alpha_bar(0) = 1
//   denoiser  U-Net: 2 down / 2 up stages with a text cross-attention
//             bottleneck; every residual block receives
//             proj([time embedding | confidence-level embedding])
//   text      small transformer encoder with a learned null state for
//             classifier-free guidance

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cosy/autograd.hpp"
#include "cosy/params.hpp"
#include "cosy/tokenizer.hpp"

namespace cosy::gen {

inline constexpr std::size_t kMelBins = 16;
inline constexpr std::size_t kMelFrames = 64;
inline constexpr std::size_t kLatentChannels = 4;
inline constexpr std::size_t kLatentBins = 4;
inline constexpr std::size_t kLatentFrames = 16;

struct GeneratorConfig {
  std::size_t vocab_size = 0;
  std::size_t t_max = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t d_time = 64;
  std::size_t d_conf = 64;
  std::size_t n_levels = 5;
  std::size_t d_text = 64;
  std::size_t text_layers = 2;
  std::size_t text_heads = 4;
  std::size_t max_text = 26;
  std::size_t unet_channels = 32;
  std::size_t vae_channels = 16;
  double kl_weight = 1e-6;
  double cfg_dropout = 0.1;

  void validate() const;
  nlohmann::json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);
};

// ------------------------------------------------------------- schedule

class Schedule {
 public:
  Schedule(std::size_t t_max, double beta_start, double beta_end);
  std::size_t t_max() const { return betas_.size(); }
  // Indexed 1..t_max.
  double beta(std::size_t t) const;
  double alpha(std::size_t t) const { return 1.0 - beta(t); }
  // Indexed 0..t_max; alpha_bar(0) = 1.
  double alpha_bar(std::size_t t) const;

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

// sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) noise. Throws on t > t_max.
Tensor diffuse_forward(const Tensor& z0, std::size_t t, const Tensor& noise, const Schedule& schedule);
ad::Var diffuse_forward(const ad::Var& z0, std::size_t t, const Tensor& noise, const Schedule& schedule);

// Sinusoidal embedding of a (possibly fractional) timestep, width d.
Tensor timestep_embedding(double t, std::size_t d);

// ------------------------------------------------------------------ model

struct Posterior {
  ad::Var mean;    // 4 x 4 x 16
  ad::Var logvar;  // 4 x 4 x 16
};

struct TrainExample {
  Tensor mel;  // 16 x 64
  TokenSequence caption;
  int level = 4;
};

struct LatentExample {
  Tensor z0;  // scaled clean latent
  TokenSequence caption;
  int level = 4;
};

struct SampleOptions {
  std::size_t steps = 50;
  double guidance_scale = 3.0;
  std::uint64_t seed = 0;
};

class Generator {
 public:
  Generator(GeneratorConfig config, std::uint64_t seed);
  Generator(const Generator&) = delete;
  Generator& operator=(const Generator&) = delete;
  Generator(Generator&&) = default;
  Generator& operator=(Generator&&) = default;

  const GeneratorConfig& config() const { return config_; }
  const Schedule& schedule() const { return schedule_; }
  ParameterSet& vae_params() { return vae_params_; }
  ParameterSet& diffusion_params() { return diff_params_; }
  const ParameterSet& vae_params() const { return vae_params_; }
  const ParameterSet& diffusion_params() const { return diff_params_; }

  double latent_scale() const { return latent_scale_; }
  void set_latent_scale(double s) { latent_scale_ = s; }

  // ---- VAE ----
  Posterior vae_encode(const Tensor& mel) const;
  ad::Var vae_decode(const ad::Var& z) const;  // -> 16 x 64
  // Reconstruction MSE plus kl_weight * KL. With `rng` the decoder sees a
  // reparameterised posterior sample, otherwise the posterior mean.
  ad::Var vae_loss(const Tensor& mel, std::mt19937_64* rng = nullptr) const;

  // ---- conditioning ----
  ad::Var encode_text(std::span<const int> caption) const;  // L x d_text
  ad::Var null_text() const;                                // 1 x d_text
  ad::Var time_confidence_embedding(std::size_t t, int level) const;  // d_time

  // ---- denoiser ----
  ad::Var predict_noise(const ad::Var& z_t, std::size_t t, const ad::Var& text_states, int level) const;
  ad::Var predict_noise(const Tensor& z_t, std::size_t t, std::span<const int> caption, int level) const;

  // Scaled VAE posterior mean: the clean latent the diffusion model sees.
  Tensor clean_latent(const Tensor& mel) const;
  std::vector<LatentExample> to_latents(std::span<const TrainExample> data) const;
  // Mean noise-prediction MSE over the batch with t ~ U[1, t_max], standard
  // normal noise and, with probability cfg_dropout, the null text condition.
  ad::Var diffusion_loss(std::span<const LatentExample> batch, std::mt19937_64& rng) const;

  // Ancestral sampling over `steps` evenly respaced timesteps with
  // classifier-free guidance; guidance_scale == 1 skips the unconditional
  // pass. Returns a 16 x 64 mel.
  Tensor sample(std::span<const int> caption, int level, const SampleOptions& options) const;

 private:
  struct Conv {
    ad::Var w, b;
  };
  struct Res {
    Conv c1, c2, skip;
    ad::Var emb_w, emb_b;
    bool has_skip = false;
  };
  struct Norm {
    ad::Var g, b;
  };
  struct Block {
    Norm ln1, ln2;
    ad::Var wq, bq, wk, bk, wv, bv, wo, bo, f1, fb1, f2, fb2;
  };

  Conv make_conv(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                 std::mt19937_64& rng, bool zero = false);
  Res make_res(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng);
  ad::Var conv(const Conv& c, const ad::Var& x, std::size_t stride = 1) const;
  ad::Var res(const Res& r, const ad::Var& x, const ad::Var& emb) const;
  void check_level(int level) const;

  GeneratorConfig config_;
  Schedule schedule_;
  ParameterSet vae_params_, diff_params_;
  double latent_scale_ = 1.0;

  // VAE
  Conv enc_in_, enc_d1_, enc_d2_, enc_out_, dec_in_, dec_u1_, dec_u2_, dec_out_;
  // text
  ad::Var tok_emb_, pos_emb_, null_state_;
  std::vector<Block> text_blocks_;
  Norm text_out_;
  // time + confidence
  ad::Var conf_table_, emb_w1_, emb_b1_, emb_w2_, emb_b2_;
  // U-Net
  Conv in_conv_, down1_, down2_, up_conv_, out_conv_;
  Res res_d1_, res_d2_, res_m1_, res_m2_, res_u2_, res_u1_;
  Norm xattn_ln_;
  ad::Var xq_w_, xq_b_, xk_w_, xk_b_, xv_w_, xv_b_, xo_w_, xo_b_;
};

// Steps per phase and learning rates for generator training.
struct GenTrainSchedule {
  std::size_t vae_steps = 1500;
  double vae_lr = 2e-3;
  std::size_t diffusion_steps = 2000;
  double diffusion_lr = 1e-3;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
};

struct GenTrainReport {
  double vae_mse = 0.0;            // reconstruction MSE of decode(mean) at the end
  double diffusion_loss_before = 0.0;
  double diffusion_loss_after = 0.0;  // fixed evaluation draws, same before and after
};

// Mean noise-prediction loss over fixed (t, noise, condition) draws derived
// from `seed`; used to compare a model before and after training.
double evaluation_loss(const Generator& g, std::span<const LatentExample> data, std::uint64_t seed,
                       std::size_t draws_per_example = 8);

GenTrainReport train_generator(Generator& g, std::span<const TrainExample> data, const GenTrainSchedule& schedule);

void save_generator(const Generator& g, const std::filesystem::path& path);
// Throws DataError naming the path when the checkpoint is missing or invalid.
Generator load_generator(const std::filesystem::path& path);

// Mel matrix in the binary container plus a JSON sidecar
// {caption, level, seed, steps, guidance_scale} at <path>.json.
void write_generated(const Tensor& mel, const std::string& caption, int level, const SampleOptions& options,
                     const std::filesystem::path& path);

}  // namespace cosy::gen
