#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "varformer/bayes_linear.hpp"
#include "varformer/config.hpp"
#include "varformer/data.hpp"
#include "varformer/decode.hpp"
#include "varformer/errors.hpp"
#include "varformer/losses.hpp"
#include "varformer/metrics.hpp"
#include "varformer/ops.hpp"
#include "varformer/tensor.hpp"
#include "varformer/trainer.hpp"

namespace py = pybind11;
using namespace varformer;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor from_array(const Array& a, bool requires_grad) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  std::vector<double> values(a.data(), a.data() + a.size());
  return requires_grad ? Tensor::parameter(std::move(shape), std::move(values))
                       : Tensor(std::move(shape), std::move(values));
}

py::array_t<double> to_array(const Shape& shape, std::span<const double> values) {
  std::vector<py::ssize_t> dims(shape.begin(), shape.end());
  py::array_t<double> out(dims);
  std::copy(values.begin(), values.end(), out.mutable_data());
  return out;
}

// Keeps a tape active between __enter__ and __exit__.
struct PyTape {
  Tape tape;
  std::unique_ptr<TapeScope> scope;
};

template <class Json>
py::object json_to_py(const Json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json py_to_json(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Variational transformer speech recognizer core";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<InfeasibleAlignmentError>(m, "InfeasibleAlignmentError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_IOError);

  py::class_<Tensor>(m, "Tensor")
      .def(py::init([](const Array& a, bool requires_grad) { return from_array(a, requires_grad); }), py::arg("values"),
           py::arg("requires_grad") = false)
      .def_property_readonly("shape", [](const Tensor& t) { return t.shape(); })
      .def_property_readonly("requires_grad", &Tensor::requires_grad)
      .def("numpy", [](const Tensor& t) { return to_array(t.shape(), t.data()); })
      .def("item", &Tensor::item)
      .def("grad", [](const Tensor& t) -> py::object {
        if (!t.has_grad()) return py::none();
        return to_array(t.shape(), t.grad());
      })
      .def("zero_grad", &Tensor::zero_grad)
      .def("detach", &Tensor::detach)
      .def("__repr__", [](const Tensor& t) { return "Tensor(shape=" + shape_str(t.shape()) + ")"; });

  py::class_<PyTape>(m, "Tape")
      .def(py::init<>())
      .def("__enter__", [](PyTape& t) -> PyTape& {
        t.scope = std::make_unique<TapeScope>(t.tape);
        return t;
      }, py::return_value_policy::reference)
      .def("__exit__", [](PyTape& t, const py::object&, const py::object&, const py::object&) { t.scope.reset(); })
      .def("backward", [](PyTape& t, const Tensor& loss) { t.tape.backward(loss); })
      .def("__len__", [](const PyTape& t) { return t.tape.size(); });

  auto o = m.def_submodule("ops", "Differentiable tensor operations");
  o.def("matmul", &ops::matmul);
  o.def("transpose", &ops::transpose);
  o.def("add", &ops::add);
  o.def("sub", &ops::sub);
  o.def("mul", &ops::mul);
  o.def("scale", &ops::scale);
  o.def("relu", &ops::relu);
  o.def("softplus", &ops::softplus);
  o.def("log", &ops::log);
  o.def("exp", &ops::exp);
  o.def("sqrt", &ops::sqrt);
  o.def("sum", &ops::sum);
  o.def("mean", &ops::mean);
  o.def("softmax", &ops::softmax, py::arg("x"), py::arg("axis"));
  o.def("log_softmax", &ops::log_softmax);
  o.def("layer_norm", &ops::layer_norm, py::arg("x"), py::arg("gain"), py::arg("bias"), py::arg("eps") = 1e-5);

  py::enum_<KlMode>(m, "KlMode").value("STANDARD", KlMode::kStandard).value("VERBATIM", KlMode::kVerbatim);
  m.def("sigma_from_rho", &sigma_from_rho);
  m.def("kl_gaussian", &kl_gaussian, py::arg("mu_q"), py::arg("sigma_q"), py::arg("mu_p") = 0.0,
        py::arg("sigma_p") = 1.0, py::arg("mode") = KlMode::kStandard);

  py::class_<GaussianVariationalLayer>(m, "BayesLinear")
      .def(py::init<Tensor, Tensor, Tensor, Tensor>(), py::arg("w_mu"), py::arg("w_rho"), py::arg("b_mu"),
           py::arg("b_rho"))
      .def_readwrite("kl_mode", &GaussianVariationalLayer::kl_mode)
      .def_property_readonly("d_in", &GaussianVariationalLayer::d_in)
      .def_property_readonly("d_out", &GaussianVariationalLayer::d_out)
      .def("kl", &GaussianVariationalLayer::kl)
      .def("forward_lrt", [](const GaussianVariationalLayer& l, const Tensor& x, const Tensor& eps) {
        return l.forward_lrt(x, eps, nullptr);
      }, py::arg("x"), py::arg("eps"))
      .def("forward_deterministic", &GaussianVariationalLayer::forward_deterministic);

  m.def("ctc_loss", [](const Tensor& log_probs, const std::vector<int>& targets) {
    return ctc_loss(log_probs, targets);
  }, py::arg("log_probs"), py::arg("targets"));
  m.def("cross_entropy", [](const Tensor& logits, const std::vector<int>& targets, const std::vector<std::uint8_t>& mask) {
    return cross_entropy(logits, targets, mask);
  }, py::arg("logits"), py::arg("targets"), py::arg("mask") = std::vector<std::uint8_t>{});
  py::enum_<MinibatchForm>(m, "MinibatchForm")
      .value("EPOCH_SHIFT", MinibatchForm::kEpochShift)
      .value("BLUNDELL", MinibatchForm::kBlundell);
  m.def("minibatch_weight", &minibatch_weight, py::arg("e"), py::arg("n_e"), py::arg("form") = MinibatchForm::kEpochShift);

  py::class_<Hypothesis>(m, "Hypothesis")
      .def_readonly("tokens", &Hypothesis::tokens)
      .def_readonly("log_prob", &Hypothesis::log_prob)
      .def_readonly("finished", &Hypothesis::finished);
  auto options = [](std::size_t width, std::size_t max_len, int sos, int eos, bool length_normalize) {
    return BeamOptions{width, max_len, sos, eos, length_normalize};
  };
  m.def("greedy_decode", [options](const StepScorer& scorer, std::size_t max_len, int sos, int eos) {
    return greedy_decode(scorer, options(1, max_len, sos, eos, false));
  }, py::arg("scorer"), py::arg("max_len") = 64, py::arg("sos") = kSos, py::arg("eos") = kEos);
  m.def("beam_search", [options](const StepScorer& scorer, std::size_t width, std::size_t max_len, int sos, int eos,
                                 bool length_normalize) {
    return beam_search(scorer, options(width, max_len, sos, eos, length_normalize));
  }, py::arg("scorer"), py::arg("width") = 10, py::arg("max_len") = 64, py::arg("sos") = kSos,
        py::arg("eos") = kEos, py::arg("length_normalize") = false);

  m.def("edit_distance", [](const std::vector<int>& a, const std::vector<int>& b) { return edit_distance(a, b); });
  m.def("wer", &wer, py::arg("references"), py::arg("hypotheses"));
  m.def("cer", &cer, py::arg("references"), py::arg("hypotheses"));

  py::class_<Vocab>(m, "Vocab")
      .def_static("characters", &Vocab::characters, py::arg("n_content") = 12)
      .def_property_readonly("tokens", &Vocab::tokens)
      .def_property_readonly("blank", &Vocab::blank)
      .def("__len__", &Vocab::size)
      .def("render", [](const Vocab& v, const std::vector<int>& ids) { return v.render(ids); });

  py::class_<Sample>(m, "Sample")
      .def_readonly("targets", &Sample::targets)
      .def_property_readonly("features", [](const Sample& s) {
        return to_array({s.frames, s.feature_dim}, s.features);
      });
  py::class_<SynthConfig>(m, "SynthConfig")
      .def(py::init<>())
      .def_readwrite("feature_dim", &SynthConfig::feature_dim)
      .def_readwrite("content_tokens", &SynthConfig::content_tokens)
      .def_readwrite("min_tokens", &SynthConfig::min_tokens)
      .def_readwrite("max_tokens", &SynthConfig::max_tokens)
      .def_readwrite("min_span", &SynthConfig::min_span)
      .def_readwrite("max_span", &SynthConfig::max_span)
      .def_readwrite("noise", &SynthConfig::noise)
      .def_readwrite("samples", &SynthConfig::samples);
  m.def("generate_synthetic", [](const SynthConfig& cfg, std::uint64_t seed) {
    return generate_synthetic(cfg, seed).samples;
  }, py::arg("config"), py::arg("seed"));

  m.def("default_config", [] { return json_to_py(to_json(TrainConfig{})); });
  m.def("run_training", [](const py::dict& overrides, std::optional<unsigned> stop_after, bool evaluate_at_end) {
    TrainConfig cfg = train_config_from_json(py_to_json(overrides));
    cfg.validate();
    RunOptions opts;
    opts.stop_after = stop_after;
    opts.evaluate_at_end = evaluate_at_end;
    RunSummary summary;
    {
      py::gil_scoped_release release;
      summary = run_training(cfg, opts);
    }
    nlohmann::ordered_json out;
    out["epochs"] = nlohmann::ordered_json::array();
    for (const auto& e : summary.epochs) out["epochs"].push_back(e.to_json());
    out["eval"] = summary.eval ? summary.eval->to_json() : nlohmann::ordered_json(nullptr);
    out["seconds"] = summary.seconds;
    return json_to_py(out);
  }, py::arg("config"), py::arg("stop_after") = std::nullopt, py::arg("evaluate_at_end") = true,
        "Trains with the given config overrides; writes artifacts into config['out_dir'].");
}
