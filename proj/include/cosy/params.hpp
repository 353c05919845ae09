#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cosy/autograd.hpp"

namespace cosy {

// Rounds every element to the nearest float32. Parameters and optimizer
// state are kept float32-representable so checkpoints restore them exactly.
void round_to_float32(Tensor& t);

// Named, ordered collection of trainable leaves.
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    ad::Var var;
  };

  ad::Var add(const std::string& name, Tensor init);
  const ad::Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t scalar_count() const;

  void zero_grad();
  // Copies values by name; shapes must match.
  void assign_values(const ParameterSet& other);
  // FNV-1a over the raw bytes of every value, in registration order.
  std::uint64_t fingerprint() const;

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// Initialisers draw from `rng` and round to float32.
Tensor init_normal(Shape shape, double stddev, std::mt19937_64& rng);
Tensor init_constant(Shape shape, double value);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables
};

class AdamW {
 public:
  explicit AdamW(AdamConfig config = {}) : config_(config) {}

  void step(ParameterSet& params);
  std::uint64_t steps_taken() const { return step_; }
  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

  std::map<std::string, Tensor>& first_moments() { return m_; }
  std::map<std::string, Tensor>& second_moments() { return v_; }
  void set_steps_taken(std::uint64_t s) { step_ = s; }

 private:
  AdamConfig config_;
  std::uint64_t step_ = 0;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
};

// Single-file archive of named tensors. Each tensor is stored in the binary
// matrix container (uint32 rows, uint32 cols, float32 row-major payload) and
// a JSON manifest records names, full shapes, and byte offsets, plus free-form
// metadata.
struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;

  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);
};

void store_parameters(Archive& archive, const ParameterSet& params, const std::string& prefix = "");
// Throws DataError if a tensor is missing or has the wrong shape.
void restore_parameters(const Archive& archive, ParameterSet& params, const std::string& prefix = "");
void store_optimizer(Archive& archive, AdamW& opt, const std::string& prefix);
void restore_optimizer(const Archive& archive, AdamW& opt, const std::string& prefix);

}  // namespace cosy
