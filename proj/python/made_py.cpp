#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "made/data.hpp"
#include "made/error.hpp"
#include "made/losses.hpp"
#include "made/metrics.hpp"
#include "made/train.hpp"

namespace py = pybind11;
using namespace made;
namespace fs = std::filesystem;

namespace {

using Pair = std::pair<double, double>;

py::object to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json from_py(const py::handle& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

std::vector<metrics::RankedPrediction> rankings_from_py(const py::list& rankings) {
  std::vector<metrics::RankedPrediction> out;
  for (const auto& r : rankings) out.push_back(metrics::prediction_from_json(from_py(r)));
  return out;
}

metrics::GroundTruthMap gts_from_py(const std::map<std::string, std::pair<std::string, Pair>>& g) {
  metrics::GroundTruthMap out;
  for (const auto& [q, v] : g) out[q] = {v.first, {v.second.first, v.second.second}};
  return out;
}

py::array_t<float> tokens_to_numpy(const Tensor<float>& t) {
  py::array_t<float> a({t.rows(), t.cols()});
  std::copy(t.data().begin(), t.data().end(), a.mutable_data());
  return a;
}

Tensor<float> tokens_from_numpy(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw DimensionError("features must be a 2-D array");
  Tensor<float> t(Shape{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1))});
  std::copy(a.data(), a.data() + a.size(), t.storage().begin());
  return t;
}

py::dict manifest_to_py(const data::Manifest& m) {
  py::list entries;
  for (const auto& e : m.entries) {
    py::dict d;
    d["video_id"] = e.video_id;
    d["track_id"] = e.track_id;
    d["moment_start"] = e.moment_start;
    d["moment_width"] = e.moment_width;
    d["video_duration"] = e.video_duration;
    d["track_duration"] = e.track_duration;
    entries.append(d);
  }
  py::dict out;
  out["split"] = m.split;
  out["d_max"] = m.d_max;
  out["candidates"] = m.candidates;
  out["entries"] = entries;
  return out;
}

data::Manifest manifest_from_py(const py::dict& d) {
  data::Manifest m;
  m.split = d["split"].cast<std::string>();
  m.d_max = d["d_max"].cast<double>();
  m.candidates = d["candidates"].cast<std::vector<std::string>>();
  for (const auto& e : d["entries"].cast<py::list>()) {
    const auto ed = e.cast<py::dict>();
    m.entries.push_back({ed["video_id"].cast<std::string>(), ed["track_id"].cast<std::string>(),
                         ed["moment_start"].cast<double>(), ed["moment_width"].cast<double>(),
                         ed["video_duration"].cast<double>(), ed["track_duration"].cast<double>()});
  }
  return m;
}

// A trained model loaded from a checkpoint.
class Model {
 public:
  explicit Model(const std::string& ckpt)
      : ckpt_(train::load_checkpoint(ckpt)), model_(train::model_from_checkpoint(ckpt_)) {}

  double d_max() const { return ckpt_.d_max; }

  py::object predict(const std::string& video, const std::vector<std::string>& tracks,
                     std::size_t topk) {
    std::vector<train::Candidate> cands;
    for (const auto& t : tracks) cands.push_back({fs::path(t).stem().string(), data::read_features(t)});
    const auto p = train::predict(model_, ckpt_.d_max, fs::path(video).stem().string(),
                                  data::read_features(video), cands, topk);
    return to_py(metrics::prediction_to_json(p));
  }

  py::object evaluate(const std::string& root, const std::string& split, const std::string& mode) {
    const data::Manifest m = data::read_manifest((fs::path(root) / (split + ".jsonl")).string());
    data::FeatureStore store;
    store.load(root, m);
    train::EvalOptions opts;
    opts.batch_size = ckpt_.config.batch_size;
    opts.moment_topk = ckpt_.config.moment_topk;
    return to_py(train::evaluate(model_, m, store, ckpt_.d_max, mode, opts).to_json());
  }

 private:
  train::Checkpoint ckpt_;
  MadeModel<float> model_;
};

}  // namespace

PYBIND11_MODULE(made, m) {
  m.doc() = "Video-to-music moment grounding: metrics, feature I/O and inference";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());

  m.def("iou", [](Pair a, Pair b) {
    return metrics::iou_1d({a.first, a.second}, {b.first, b.second});
  }, py::arg("a"), py::arg("b"), "IoU of two (start, end) intervals");
  m.def("giou", [](Pair a, Pair b) {
    return loss::giou_1d({a.first, a.second}, {b.first, b.second});
  }, py::arg("a"), py::arg("b"), "Generalized IoU of two (center, width) spans");
  m.def("normalize_moment", [](double start, double width, double d_max, double track) {
    const auto n = data::normalize_moment(start, width, d_max, track);
    return Pair{n.center, n.width};
  }, py::arg("start"), py::arg("width"), py::arg("d_max"), py::arg("track_duration") = 0.0);
  m.def("denormalize_moment", [](double c, double w, double d_max, double track) {
    const auto i = data::denormalize_moment(c, w, d_max, track);
    return Pair{i.start, i.end};
  }, py::arg("center"), py::arg("width"), py::arg("d_max"), py::arg("track_duration"));
  m.def("segment_count", &data::segment_count, py::arg("duration"), py::arg("window") = 10.0,
        py::arg("hop") = 5.0);

  m.def("recall_at_k", [](const py::list& r, const std::map<std::string, std::pair<std::string, Pair>>& g,
                          std::size_t k) {
    return metrics::recall_at_k(rankings_from_py(r), gts_from_py(g), k);
  }, py::arg("rankings"), py::arg("ground_truth"), py::arg("k"));
  m.def("moment_recall_at_k", [](const py::list& r,
                                 const std::map<std::string, std::pair<std::string, Pair>>& g,
                                 std::size_t k, double thr) {
    return metrics::moment_recall_at_k(rankings_from_py(r), gts_from_py(g), k, thr);
  }, py::arg("rankings"), py::arg("ground_truth"), py::arg("k"),
        py::arg("iou_threshold") = metrics::kMomentIouThreshold);
  m.def("msg_report", [](const py::list& r, const std::map<std::string, std::pair<std::string, Pair>>& g) {
    return to_py(metrics::msg_report(rankings_from_py(r), gts_from_py(g)).to_json());
  }, py::arg("rankings"), py::arg("ground_truth"));
  m.def("smg_report", [](const std::map<std::string, Pair>& p,
                         const std::map<std::string, std::pair<std::string, Pair>>& g) {
    std::map<std::string, metrics::Interval> preds;
    for (const auto& [q, v] : p) preds[q] = {v.first, v.second};
    return to_py(metrics::smg_report(preds, gts_from_py(g)).to_json());
  }, py::arg("moments"), py::arg("ground_truth"));

  m.def("read_features", [](const std::string& path) {
    const auto s = data::read_features(path);
    return py::make_tuple(tokens_to_numpy(s.tokens), s.duration_sec);
  }, py::arg("path"), "Returns (tokens, duration_sec)");
  m.def("write_features", [](const std::string& path,
                             const py::array_t<float, py::array::c_style | py::array::forcecast>& a,
                             float duration) { data::write_features(path, tokens_from_numpy(a), duration); },
        py::arg("path"), py::arg("tokens"), py::arg("duration_sec"));
  m.def("read_manifest", [](const std::string& p) { return manifest_to_py(data::read_manifest(p)); },
        py::arg("path"));
  m.def("write_manifest", [](const std::string& p, const py::dict& d) {
    data::write_manifest(p, manifest_from_py(d));
  }, py::arg("path"), py::arg("manifest"));
  m.def("gen_synth", [](const std::string& out, const py::dict& cfg) {
    const auto c = from_py(cfg).get<data::SynthConfig>();
    c.validate();
    data::write_dataset(out, data::synth_generate(c));
  }, py::arg("out"), py::arg("config") = py::dict());

  py::class_<Model>(m, "Model")
      .def(py::init<const std::string&>(), py::arg("checkpoint"))
      .def_property_readonly("d_max", &Model::d_max)
      .def("predict", &Model::predict, py::arg("video"), py::arg("tracks"), py::arg("topk") = 0,
           "Ranks feature files for one query video")
      .def("evaluate", &Model::evaluate, py::arg("data_root"), py::arg("split") = "test",
           py::arg("mode") = "msg");
}
