#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "dpmem/baselines.hpp"
#include "dpmem/checkpoint.hpp"
#include "dpmem/cli.hpp"
#include "dpmem/corpus.hpp"
#include "dpmem/dpm.hpp"
#include "dpmem/eval.hpp"
#include "dpmem/lora.hpp"
#include "dpmem/model.hpp"

namespace py = pybind11;
using namespace dpmem;
using json = nlohmann::json;

namespace {

using Model = model::Model<float>;

py::array_t<float> to_array(const numerics::Tensor<float>& t) {
  const auto& shape = t.shape();
  std::vector<py::ssize_t> dims(shape.begin(), shape.end());
  py::array_t<float> out(dims);
  const auto data = t.data();
  std::copy(data.begin(), data.end(), out.mutable_data());
  return out;
}

py::dict one_shot_dict(const baselines::OneShotResult& r) {
  py::dict d;
  d["predicted"] = r.predicted;
  d["distribution"] = r.distribution;
  d["forward_length"] = r.forward_length;
  d["truncated"] = r.truncated;
  return d;
}

py::dict dpm_dict(const dpm::DpmResult& r) {
  py::dict d;
  d["predicted"] = r.predicted;
  d["distribution"] = r.trace.final_distribution;
  d["update_count"] = r.trace.update_count;
  d["forward_lengths"] = r.trace.forward_lengths();
  std::vector<double> losses;
  for (const auto& s : r.trace.steps) losses.push_back(s.loss);
  d["losses"] = losses;
  d["cost"] = eval::cost_counter(r.trace);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Dynamic Parameter Memory for long spoken dialogues";

  py::register_exception<model::WindowExceeded>(m, "WindowExceeded", PyExc_ValueError);
  py::register_exception<dpm::WindowViolation>(m, "WindowViolation", PyExc_ValueError);
  py::register_exception<checkpoint::CheckpointError>(m, "CheckpointError", PyExc_IOError);

  py::class_<corpus::DialogueSample>(m, "DialogueSample")
      .def(py::init([](std::vector<std::vector<corpus::Code>> sentences, std::vector<std::size_t> emotions,
                       std::uint64_t dialogue_id) {
             corpus::DialogueSample d;
             d.sentences = std::move(sentences);
             d.emotions = std::move(emotions);
             d.dialogue_id = dialogue_id;
             return d;
           }),
           py::arg("sentences"), py::arg("emotions"), py::arg("dialogue_id") = 0)
      .def_readwrite("dialogue_id", &corpus::DialogueSample::dialogue_id)
      .def_readwrite("seed", &corpus::DialogueSample::seed)
      .def_readwrite("sentences", &corpus::DialogueSample::sentences)
      .def_readwrite("emotions", &corpus::DialogueSample::emotions)
      .def_property_readonly("final_emotion", &corpus::DialogueSample::final_emotion)
      .def("__len__", &corpus::DialogueSample::num_sentences)
      .def(py::self == py::self);

  py::class_<model::Vocabulary>(m, "Vocabulary")
      .def(py::init([](std::size_t text_stub, std::size_t codebook, std::size_t emotions) {
             return model::Vocabulary{text_stub, codebook, emotions};
           }),
           py::arg("text_stub_size") = 0, py::arg("codebook_size") = 256, py::arg("num_emotions") = 4)
      .def_readonly("text_stub_size", &model::Vocabulary::text_stub_size)
      .def_readonly("codebook_size", &model::Vocabulary::codebook_size)
      .def_readonly("num_emotions", &model::Vocabulary::num_emotions)
      .def_property_readonly("total", &model::Vocabulary::total)
      .def("audio_id", &model::Vocabulary::audio_id)
      .def_property_readonly("audio_end_id", &model::Vocabulary::audio_end_id)
      .def("emotion_id", &model::Vocabulary::emotion_id);

  m.def(
      "_generate_corpus",
      [](const std::string& config) {
        return corpus::generate_corpus(corpus::generator_config_from_json(json::parse(config)));
      },
      py::arg("config"));
  m.def("_default_generator_config", [] { return corpus::to_json(corpus::GeneratorConfig{}).dump(); });
  m.def(
      "read_corpus", [](const std::string& path) { return corpus::read_corpus(path).dialogues; }, py::arg("path"));
  m.def(
      "inference_stream",
      [](const corpus::DialogueSample& d, const model::Vocabulary& v, bool keep_emotion_ids) {
        return corpus::inference_stream(d, v, {.keep_emotion_ids = keep_emotion_ids}).tokens;
      },
      py::arg("dialogue"), py::arg("vocabulary"), py::arg("keep_emotion_ids") = true);

  py::class_<Model>(m, "Model")
      .def(py::init([](const std::string& config) { return Model(model::model_config_from_json(json::parse(config))); }),
           py::arg("config"))
      .def_property_readonly("n_limit", &Model::n_limit)
      .def_property_readonly("vocabulary", &Model::vocabulary)
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def("_config", [](const Model& self) { return model::to_json(self.config()).dump(); })
      .def(
          "forward",
          [](const Model& self, const std::vector<model::TokenId>& tokens) { return to_array(self.forward(tokens)); },
          py::arg("tokens"))
      .def("frozen_state_digest", [](const Model& self) { return lora::frozen_state_digest(self); })
      .def("save", [](const Model& self, const std::string& path) { checkpoint::save_model(path, self); });

  m.def(
      "load_model", [](const std::string& path) { return checkpoint::load_model<float>(path); }, py::arg("path"));

  m.def(
      "one_shot_infer",
      [](const Model& model, const corpus::DialogueSample& d, std::optional<std::size_t> truncate_to,
         const std::string& side, bool keep_emotion_ids) {
        baselines::OneShotOptions o;
        o.truncate_to = truncate_to;
        o.side = baselines::parse_truncate_side(side);
        o.keep_emotion_ids = keep_emotion_ids;
        return one_shot_dict(baselines::one_shot_infer(model, d, o));
      },
      py::arg("model"), py::arg("dialogue"), py::arg("truncate_to") = py::none(), py::arg("side") = "tail",
      py::arg("keep_emotion_ids") = true);

  m.def(
      "_dpm_infer",
      [](Model& model, const corpus::DialogueSample& d, const std::string& config) {
        return dpm_dict(dpm::dpm_infer(model, d, dpm::dpm_config_from_json(json::parse(config))));
      },
      py::arg("model"), py::arg("dialogue"), py::arg("config"));
  m.def("_default_dpm_config", [] { return dpm::to_json(dpm::DpmConfig{}).dump(); });

  m.def(
      "window_check",
      [](std::size_t n_limit, std::size_t n_max, std::size_t n_r) {
        const auto c = dpm::window_check(n_limit, n_max, n_r);
        return py::make_tuple(c.ok, c.message());
      },
      py::arg("n_limit"), py::arg("n_max"), py::arg("n_r"));

  m.def(
      "metrics",
      [](const std::vector<std::vector<std::uint64_t>>& rows) {
        const auto r = eval::metrics(eval::ConfusionMatrix::from_rows(rows));
        py::dict d;
        d["wa"] = r.wa;
        d["ua"] = r.ua;
        d["wf1"] = r.wf1;
        return d;
      },
      py::arg("confusion"));
  m.def(
      "cost_counter",
      [](const std::vector<std::size_t>& lengths) { return eval::cost_counter(lengths); },
      py::arg("forward_lengths"));
  m.def(
      "_run_complexity_bench",
      [](const std::string& config) {
        return eval::to_json(eval::run_complexity_bench(eval::bench_config_from_json(json::parse(config)))).dump();
      },
      py::arg("config"));
  m.def("_ablation_preset", [] { return eval::to_json(eval::ablation_preset()).dump(); });
  m.def("_context_preset", [] { return eval::to_json(eval::context_preset()).dump(); });

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));
}
