#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "peftcap/dataset.hpp"
#include "peftcap/errors.hpp"
#include "peftcap/experiment.hpp"
#include "peftcap/features.hpp"
#include "peftcap/freeze.hpp"
#include "peftcap/metrics.hpp"

namespace py = pybind11;
using namespace peftcap;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  const auto src = t.data();
  std::copy(src.begin(), src.end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from_data(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

std::vector<metrics::EvalItem> items_of(const std::vector<std::string>& candidates,
                                        const std::vector<std::vector<std::string>>& references) {
  if (candidates.size() != references.size())
    throw DataError("got " + std::to_string(candidates.size()) + " candidates for " +
                    std::to_string(references.size()) + " reference sets");
  std::vector<metrics::EvalItem> items(candidates.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    items[i].candidate = metrics::tokens_of(candidates[i]);
    for (const auto& r : references[i]) items[i].references.push_back(metrics::tokens_of(r));
  }
  return items;
}

py::dict sample_dict(const data::Sample& s) {
  py::dict d;
  d["id"] = s.id;
  d["domain"] = data::to_string(s.domain);
  d["category"] = s.category;
  d["captions"] = s.captions;
  d["split"] = data::to_string(s.split);
  d["image"] = to_numpy(s.image);
  py::list elements;
  for (const auto& e : s.elements)
    elements.append(py::make_tuple(e.kind, e.row, e.col, e.width, e.height));
  d["elements"] = elements;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Parameter-efficient caption fine-tuning: metrics, audits, data and features";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("strategy_names", &strategy_names, "Names of every strategy cell, in table order");
  m.def("display_name", &display_name);
  m.def(
      "audit_paper", [](const std::string& name) { return audit_paper_scale(make_strategy(name, StrategyHyper::paper())); },
      py::arg("strategy"), "Trainable percent of the full-scale model");
  m.def(
      "audit_toy",
      [](const std::string& name, std::size_t vocab) {
        auto config = RunConfig::default_model();
        config.vocab_size = vocab;
        return audit_strategy(config, make_strategy(name, StrategyHyper::toy())).percent;
      },
      py::arg("strategy"), py::arg("vocab_size"), "Trainable percent of the desk-scale transfer model");

  m.def(
      "bleu4",
      [](const std::vector<std::string>& c, const std::vector<std::vector<std::string>>& r) {
        return metrics::bleu4(items_of(c, r));
      },
      py::arg("candidates"), py::arg("references"));
  m.def(
      "cider",
      [](const std::vector<std::string>& c, const std::vector<std::vector<std::string>>& r, double sigma) {
        return metrics::cider(items_of(c, r), sigma);
      },
      py::arg("candidates"), py::arg("references"), py::arg("sigma") = 6.0);

  m.def(
      "generate_corpus",
      [](std::uint64_t seed, std::size_t n, const std::string& domain) {
        auto corpus = data::generate_corpus(seed, n, data::domain_from_string(domain));
        data::split(corpus, {0.8, 0.1, 0.1}, seed);
        py::list out;
        for (const auto& s : corpus) out.append(sample_dict(s));
        return out;
      },
      py::arg("seed"), py::arg("n"), py::arg("domain") = "screen");

  m.def(
      "high_freq_extract",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& image, double tau, bool keep_high) {
        return to_numpy(features::high_freq_extract(from_numpy(image), tau, keep_high));
      },
      py::arg("image"), py::arg("tau") = 0.25, py::arg("keep_high") = true);
  m.def(
      "grayscale",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& image) {
        return to_numpy(features::grayscale(from_numpy(image)));
      },
      py::arg("image"));
}
