#include "cosy/trainer.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "cosy/corpus.hpp"
#include "cosy/errors.hpp"

namespace cosy {

namespace {

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng() % i]);
  return p;
}

std::uint64_t epoch_seed(std::uint64_t seed, int stage, std::size_t epoch, std::uint64_t stream) {
  return corpus::mix_seed(corpus::mix_seed(corpus::mix_seed(seed, static_cast<std::uint64_t>(stage)), epoch), stream);
}

nlohmann::json resume_identity(const TrainOptions& o, std::size_t n_data, std::size_t n_pairs) {
  return {{"stage", o.stage},
          {"seed", o.seed},
          {"n_data", n_data},
          {"n_pairs", n_pairs},
          {"epochs", o.schedule.epochs},
          {"lr", o.schedule.lr},
          {"weight_decay", o.schedule.weight_decay},
          {"batch_size", o.schedule.batch_size},
          {"dpo_batch", o.schedule.dpo_batch},
          {"beta", o.dpo.beta}};
}

}  // namespace

void StageSchedule::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 2) throw std::invalid_argument("batch_size must be >= 2");
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
  if (dpo_batch < 1) throw std::invalid_argument("dpo_batch must be >= 1");
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    int stage, std::size_t epoch) {
  auto perm = permutation(n, epoch_seed(seed, stage, epoch, 0));
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size)
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(i),
                     perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

TrainReport train_stage(CapTeller& model, const std::vector<BatchItem>& data,
                        const std::vector<PreferenceExample>* pairs, const CapTeller* reference,
                        const TrainOptions& options) {
  options.schedule.validate();
  options.dpo.validate();
  if (data.size() < 2) throw std::invalid_argument("training needs at least 2 records, got " + std::to_string(data.size()));
  const bool dpo = options.stage == 4;
  if (dpo && (!pairs || pairs->empty() || !reference))
    throw std::invalid_argument("stage 4 training needs preference pairs and a reference model");
  const std::size_t n_pairs = dpo ? pairs->size() : 0;

  const std::size_t per_epoch = epoch_batches(data.size(), options.schedule.batch_size, options.seed, options.stage, 0).size();
  const std::size_t total = per_epoch * options.schedule.epochs;

  AdamConfig ac;
  ac.lr = options.schedule.lr;
  ac.weight_decay = options.schedule.weight_decay;
  AdamW opt(ac);
  TrainReport report;
  report.steps_per_epoch = per_epoch;

  const auto identity = resume_identity(options, data.size(), n_pairs);
  std::size_t step = 0;
  if (!options.resume_path.empty() && std::filesystem::exists(options.resume_path)) {
    Archive a = Archive::load(options.resume_path);
    if (a.meta.value("identity", nlohmann::json()) != identity)
      throw DataError("resume file " + options.resume_path.string() + " belongs to a different training run");
    restore_parameters(a, model.params(), "param/");
    restore_optimizer(a, opt, "adam/");
    step = a.meta.at("step").get<std::size_t>();
    report.resumed = true;
  }

  auto write_resume = [&] {
    if (options.resume_path.empty()) return;
    Archive a;
    a.meta["identity"] = identity;
    a.meta["step"] = step;
    a.meta["total_steps"] = total;
    store_parameters(a, model.params(), "param/");
    store_optimizer(a, opt, "adam/");
    a.save(options.resume_path);
  };

  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> pair_order;
  std::size_t loaded_epoch = static_cast<std::size_t>(-1);
  double epoch_sum = 0.0;
  std::size_t epoch_count = 0;

  while (step < total) {
    if (options.stop_after && step >= *options.stop_after) {
      write_resume();
      report.steps = step;
      return report;
    }
    const std::size_t epoch = step / per_epoch, within = step % per_epoch;
    if (epoch != loaded_epoch) {
      batches = epoch_batches(data.size(), options.schedule.batch_size, options.seed, options.stage, epoch);
      if (dpo) pair_order = permutation(n_pairs, epoch_seed(options.seed, options.stage, epoch, 1));
      loaded_epoch = epoch;
    }
    Batch batch;
    for (std::size_t i : batches[within]) batch.push_back(data[i]);
    std::vector<PreferenceExample> chunk;
    if (dpo)
      for (std::size_t k = 0; k < options.schedule.dpo_batch && k < n_pairs; ++k)
        chunk.push_back((*pairs)[pair_order[(within * options.schedule.dpo_batch + k) % n_pairs]]);

    model.params().zero_grad();
    double loss_value;
    {
      ad::Tape tape;
      ad::GradScope scope(tape);
      auto loss = loss_stage(model, batch, dpo ? &chunk : nullptr, options.stage, reference, options.dpo);
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) throw std::runtime_error("non-finite training loss at step " + std::to_string(step));
      tape.backward(loss);
    }
    opt.step(model.params());
    ++step;
    epoch_sum += loss_value;
    ++epoch_count;
    if (step % per_epoch == 0) {
      report.epoch_losses.push_back(epoch_sum / static_cast<double>(epoch_count));
      epoch_sum = 0.0;
      epoch_count = 0;
    }
    if (options.schedule.checkpoint_every && step % options.schedule.checkpoint_every == 0 && step < total)
      write_resume();
  }
  if (!options.resume_path.empty()) std::filesystem::remove(options.resume_path);
  report.steps = step;
  report.completed = true;
  return report;
}

}  // namespace cosy
