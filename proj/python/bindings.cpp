#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "cosy/capteller.hpp"
#include "cosy/cli.hpp"
#include "cosy/corpus.hpp"
#include "cosy/errors.hpp"
#include "cosy/evolve.hpp"
#include "cosy/generator.hpp"
#include "cosy/metrics.hpp"

namespace py = pybind11;
using namespace cosy;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_numpy(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.vec().begin(), t.vec().end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

corpus::ClipKind parse_kind(const std::string& s) {
  if (s == "well") return corpus::ClipKind::kWell;
  if (s == "weak") return corpus::ClipKind::kWeak;
  if (s == "val") return corpus::ClipKind::kVal;
  if (s == "test") return corpus::ClipKind::kTest;
  throw std::invalid_argument("kind must be well, weak, val or test");
}

template <class T>
py::object optional(const std::optional<T>& v) {
  return v ? py::cast(*v) : py::none();
}

py::dict record_dict(const corpus::CorpusRecord& r) {
  py::dict d;
  d["id"] = r.id;
  d["features_path"] = r.features_path;
  d["caption"] = r.caption;
  d["tags"] = optional(r.tags);
  d["confidence"] = optional(r.confidence);
  d["level"] = optional(r.level);
  d["source"] = corpus::to_string(r.source);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "cosyaudio: confidence-aware captioning and quality-aware generation";
  py::register_exception<DataError>(m, "DataError");

  // ---- vocabulary and toy corpus
  m.def("encode", [](const std::string& caption) { return corpus::toy_vocabulary().encode(caption); },
        py::arg("caption"));
  m.def("decode", [](const TokenSequence& ids) { return corpus::toy_vocabulary().decode(ids); }, py::arg("ids"));
  m.def("vocabulary_size", [] { return corpus::toy_vocabulary().size(); });
  m.def(
      "toy_clip",
      [](const std::string& kind, std::size_t index, std::uint64_t seed, double p_corrupt, const std::string& corruption) {
        corpus::ToyCorpusConfig c;
        c.seed = seed;
        c.p_corrupt = p_corrupt;
        c.corruption = corpus::parse_corruption(corruption);
        const auto clip = corpus::make_toy_clip(c, parse_kind(kind), index);
        py::dict d;
        d["id"] = clip.id;
        d["features"] = to_numpy(clip.features);
        d["events"] = clip.events;
        d["clean_caption"] = clip.clean_caption;
        d["caption"] = clip.caption;
        d["tags"] = optional(clip.tags);
        return d;
      },
      py::arg("kind"), py::arg("index"), py::arg("seed") = 7, py::arg("p_corrupt") = 0.5,
      py::arg("corruption") = "mixed");
  m.def("to_mel", [](const Array& f) { return to_numpy(corpus::to_mel(from_numpy(f))); }, py::arg("features"));
  m.def(
      "load_manifest",
      [](const std::string& path) {
        py::list records;
        for (const auto& r : corpus::load_manifest(path).records) records.append(record_dict(r));
        return records;
      },
      py::arg("path"));

  // ---- metrics
  m.def("bleu4", [](const TokenSequence& c, const std::vector<TokenSequence>& refs) { return metrics::bleu4(c, refs); },
        py::arg("candidate"), py::arg("references"));
  m.def("rouge_l",
        [](const TokenSequence& c, const std::vector<TokenSequence>& refs) { return metrics::rouge_l(c, refs); },
        py::arg("candidate"), py::arg("references"));
  m.def(
      "confidence_distribution",
      [](const std::vector<double>& scores) {
        const auto r = metrics::confidence_distribution(scores);
        py::dict d;
        d["normalized_scores"] = r.normalized_scores;
        d["std"] = r.std;
        d["bandwidth"] = r.bandwidth;
        d["density_grid"] = r.density_grid;
        return d;
      },
      py::arg("scores"));

  // ---- curation kernels
  m.def(
      "filter_stats",
      [](const std::vector<double>& scores) {
        const auto s = evolve::stats_from_scores(scores);
        return py::make_tuple(s.mu, s.sigma);
      },
      py::arg("scores"), "(mu, sigma) with sigma the population standard deviation.");
  m.def(
      "preference_pairs",
      [](const std::vector<std::pair<TokenSequence, double>>& candidates, double sigma) {
        std::vector<evolve::Candidate> c;
        for (const auto& [caption, conf] : candidates) c.push_back({caption, conf});
        py::list out;
        for (const auto& p : evolve::pairs_from_candidates("", c, sigma))
          out.append(py::make_tuple(p.y_w, p.y_l, p.conf_w, p.conf_l));
        return out;
      },
      py::arg("candidates"), py::arg("sigma"));
  m.def(
      "quantizer_boundaries",
      [](const std::vector<double>& scores) {
        const auto q = evolve::build_quantizer(scores);
        return std::vector<double>(q.boundaries.begin(), q.boundaries.end());
      },
      py::arg("scores"));

  // ---- models
  py::class_<CapTeller>(m, "CapTeller")
      .def_static("load", [](const std::string& path) { return load_capteller(path); }, py::arg("path"))
      .def(
          "confidence",
          [](const CapTeller& model, const Array& f, const std::string& caption) {
            return model.confidence(from_numpy(f), corpus::toy_vocabulary().encode(caption));
          },
          py::arg("features"), py::arg("caption"))
      .def(
          "caption",
          [](const CapTeller& model, const Array& f, std::size_t beam) {
            const auto opts = beam <= 1 ? DecodeOptions::greedy() : DecodeOptions::beam(beam);
            return corpus::toy_vocabulary().decode(model.generate(from_numpy(f), opts));
          },
          py::arg("features"), py::arg("beam") = 1);

  py::class_<gen::Generator>(m, "Generator")
      .def_static("load", [](const std::string& path) { return gen::load_generator(path); }, py::arg("path"))
      .def(
          "sample",
          [](const gen::Generator& g, const std::string& caption, int level, std::size_t steps, double guidance,
             std::uint64_t seed) {
            gen::SampleOptions o;
            o.steps = steps;
            o.guidance_scale = guidance;
            o.seed = seed;
            return to_numpy(g.sample(corpus::toy_vocabulary().encode(caption), level, o));
          },
          py::arg("caption"), py::arg("level") = 4, py::arg("steps") = 50, py::arg("guidance") = 3.0,
          py::arg("seed") = 0);

  // ---- CLI
  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = run_cli(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs one cosyaudio subcommand; returns (exit_code, stdout, stderr).");
}
