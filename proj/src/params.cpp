#include "cosy/params.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cosy/binio.hpp"
#include "cosy/errors.hpp"

namespace cosy {

void round_to_float32(Tensor& t) {
  for (double& v : t.vec()) v = static_cast<double>(static_cast<float>(v));
}

ad::Var ParameterSet::add(const std::string& name, Tensor init) {
  if (index_.count(name)) throw std::logic_error("duplicate parameter name " + name);
  round_to_float32(init);
  ad::Var v(std::move(init), true);
  index_[name] = entries_.size();
  entries_.push_back({name, v});
  return v;
}

const ad::Var& ParameterSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return entries_[it->second].var;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.var.value().size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) e.var.zero_grad();
}

void ParameterSet::assign_values(const ParameterSet& other) {
  for (auto& e : entries_) {
    const ad::Var& src = other.get(e.name);
    if (src.shape() != e.var.shape()) throw std::invalid_argument("assign_values: shape mismatch for " + e.name);
    e.var.mutable_value() = src.value();
  }
}

std::uint64_t ParameterSet::fingerprint() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& e : entries_) {
    for (char c : e.name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
    for (double v : e.var.value().vec()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof(double));
      for (unsigned char b : bytes) h = (h ^ b) * 1099511628211ull;
    }
  }
  return h;
}

Tensor init_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.vec()) v = dist(rng);
  round_to_float32(t);
  return t;
}

Tensor init_constant(Shape shape, double value) {
  Tensor t(std::move(shape), value);
  round_to_float32(t);
  return t;
}

void AdamW::step(ParameterSet& params) {
  ++step_;
  double scale = 1.0;
  if (config_.grad_clip > 0) {
    double sq = 0.0;
    for (const auto& e : params.entries())
      for (double g : e.var.grad().vec()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > config_.grad_clip) scale = config_.grad_clip / norm;
  }
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (auto& e : params.entries()) {
    Tensor& p = e.var.mutable_value();
    const Tensor& g = e.var.grad();
    auto [mit, m_new] = m_.try_emplace(e.name, p.shape());
    auto [vit, v_new] = v_.try_emplace(e.name, p.shape());
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i] * scale;
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      p[i] -= config_.lr * (mh / (std::sqrt(vh) + config_.eps) + config_.weight_decay * p[i]);
    }
    round_to_float32(p);
    round_to_float32(m);
    round_to_float32(v);
  }
}

// ------------------------------------------------------------------ archive

namespace {
constexpr char kMagic[8] = {'C', 'O', 'S', 'Y', 'A', 'R', 'C', '1'};
}

void Archive::save(const std::filesystem::path& path) const {
  std::ostringstream blobs(std::ios::binary);
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    const auto offset = static_cast<std::uint64_t>(blobs.tellp());
    write_matrix(blobs, t);
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
  }
  nlohmann::json manifest = {{"meta", meta}, {"tensors", index}};
  const std::string header = manifest.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write archive " + path.string());
    out.write(kMagic, sizeof(kMagic));
    const std::uint64_t len = header.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    const std::string payload = blobs.str();
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw DataError("write failed for archive " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing checkpoint " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw DataError("not a tensor archive: " + path.string());
  if (!in.read(reinterpret_cast<char*>(&len), sizeof(len))) throw DataError("truncated archive " + path.string());
  std::string header(len, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(len))) throw DataError("truncated archive " + path.string());
  Archive a;
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt archive manifest in " + path.string() + ": " + e.what());
  }
  a.meta = manifest.at("meta");
  const auto base = in.tellg();
  for (const auto& entry : manifest.at("tensors")) {
    in.seekg(base + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    Tensor t = read_matrix(in);
    a.tensors[entry.at("name").get<std::string>()] = t.reshaped(entry.at("shape").get<Shape>());
  }
  return a;
}

void store_parameters(Archive& archive, const ParameterSet& params, const std::string& prefix) {
  for (const auto& e : params.entries()) archive.tensors[prefix + e.name] = e.var.value();
}

void restore_parameters(const Archive& archive, ParameterSet& params, const std::string& prefix) {
  for (auto& e : params.entries()) {
    auto it = archive.tensors.find(prefix + e.name);
    if (it == archive.tensors.end()) throw DataError("checkpoint lacks tensor " + prefix + e.name);
    if (it->second.shape() != e.var.shape())
      throw DataError("checkpoint tensor " + prefix + e.name + " has shape " + shape_string(it->second.shape()) +
                      ", expected " + shape_string(e.var.shape()));
    e.var.mutable_value() = it->second;
  }
}

void store_optimizer(Archive& archive, AdamW& opt, const std::string& prefix) {
  for (const auto& [name, t] : opt.first_moments()) archive.tensors[prefix + "m/" + name] = t;
  for (const auto& [name, t] : opt.second_moments()) archive.tensors[prefix + "v/" + name] = t;
  archive.meta[prefix + "steps"] = opt.steps_taken();
}

void restore_optimizer(const Archive& archive, AdamW& opt, const std::string& prefix) {
  opt.first_moments().clear();
  opt.second_moments().clear();
  const std::string mp = prefix + "m/", vp = prefix + "v/";
  for (const auto& [name, t] : archive.tensors) {
    if (name.rfind(mp, 0) == 0) opt.first_moments()[name.substr(mp.size())] = t;
    if (name.rfind(vp, 0) == 0) opt.second_moments()[name.substr(vp.size())] = t;
  }
  opt.set_steps_taken(archive.meta.value(prefix + "steps", std::uint64_t{0}));
}

}  // namespace cosy
