#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "openvad/eval.hpp"
#include "openvad/metrics.hpp"
#include "openvad/train.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace openvad;

// Structured values cross the boundary as JSON text; the Python package
// decodes them into dicts and lists.

namespace {

Config config_from(const std::string& overrides) {
  return validate_config(overrides.empty() ? Config{} : Config::from_json(Json::parse(overrides)));
}

std::string generate(const fs::path& out, const std::string& spec_json) {
  SyntheticSpec spec;
  if (!spec_json.empty()) {
    const Json j = Json::parse(spec_json);
    // Reuse the CLI field names.
    for (const auto& [k, v] : j.items()) {
      if (k == "num_categories") spec.num_categories = v.get<int>();
      else if (k == "train_videos") spec.train_videos = v.get<int>();
      else if (k == "val_videos") spec.val_videos = v.get<int>();
      else if (k == "test_videos") spec.test_videos = v.get<int>();
      else if (k == "abnormal_ratio") spec.abnormal_ratio = v.get<double>();
      else if (k == "embed_dim") spec.embed_dim = v.get<int>();
      else if (k == "min_length") spec.min_length = v.get<int>();
      else if (k == "max_length") spec.max_length = v.get<int>();
      else if (k == "min_anomaly_fraction") spec.min_anomaly_fraction = v.get<double>();
      else if (k == "max_anomaly_fraction") spec.max_anomaly_fraction = v.get<double>();
      else if (k == "noise") spec.noise = v.get<double>();
      else if (k == "stride_frames") spec.stride_frames = v.get<std::uint32_t>();
      else if (k == "fps") spec.fps = v.get<double>();
      else if (k == "seed") spec.seed = v.get<std::uint64_t>();
      else throw ValidationError("unknown dataset field '" + k + "'");
    }
  }
  spec.validate();
  const SyntheticDataset ds = generate_synthetic_dataset(spec);
  write_dataset(out, ds);
  const SplitCounts c = count_splits(ds.records);
  return Json{{"videos", ds.records.size()}, {"train", c.train}, {"val", c.val}, {"test", c.test}}.dump();
}

std::string knn(const fs::path& dir, int n) {
  const auto manifest = load_manifest(manifest_path(dir));
  const PrototypeTable table = load_prototypes(prototypes_path(dir));
  const FeatureRepository repo(features_dir(dir), table.embed_dim);
  const KnnIndex index = build_knn_index(repo, manifest, n);
  save_json(dir / "knn.json", index.to_json());
  return index.to_json().dump();
}

std::string train(const fs::path& dir, const fs::path& out, const std::string& overrides) {
  const Config cfg = config_from(overrides);
  FitResult r;
  {
    py::gil_scoped_release release;
    r = fit_directory(dir, cfg, FitOptions{out, nullptr, false});
  }
  Json history = Json::array();
  for (const auto& s : r.history) history.push_back(s.total);
  return Json{{"steps", r.steps},
              {"best_epoch", r.best_epoch},
              {"best_metric", std::isfinite(r.best_metric) ? Json(r.best_metric) : Json(nullptr)},
              {"loss_total", history}}
      .dump();
}

std::string score(const fs::path& checkpoint, const fs::path& dir, const std::string& video_id,
                  const std::string& definition_json) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const TextEncoder encoder = TextEncoder::toy(load_prototypes(prototypes_path(dir)));
  const AnomalyDefinition def =
      definition_json.empty() ? load_definition(definition_path(dir)) : AnomalyDefinition::from_json(Json::parse(definition_json));
  const PrototypeTable table = load_prototypes(prototypes_path(dir));
  const FeatureRepository repo(features_dir(dir), table.embed_dim);
  const ScoreResult s = score_video(ck.model, encoder, repo.read(video_id), def);
  std::vector<double> frames(s.y_bin.data(), s.y_bin.data() + s.y_bin.size());
  for (double& x : frames) x = 1.0 / (1.0 + std::exp(-x));
  std::vector<double> probs(s.video_class_probs.data(), s.video_class_probs.data() + s.video_class_probs.size());
  return Json{{"video_id", video_id}, {"frame_scores", frames}, {"video_class_probs", probs}}.dump();
}

std::string evaluate(const fs::path& checkpoint, const fs::path& dir, const std::string& split,
                     const std::string& subsets_json) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const TextEncoder encoder = TextEncoder::toy(load_prototypes(prototypes_path(dir)));
  EvalTarget target{dir.filename().string(), load_split_videos(dir, parse_split(split)),
                    load_definition(definition_path(dir)), DetectionMetric::kAuc, std::nullopt};
  if (subsets_json.empty()) return evaluate_protocol1(ck.model, encoder, {target}).to_json().dump();
  std::vector<SubsetDefinition> subsets;
  for (const auto& s : Json::parse(subsets_json)) subsets.push_back(SubsetDefinition::from_json(s));
  return evaluate_protocol2(ck.model, encoder, target, subsets).to_json().dump();
}

}  // namespace

PYBIND11_MODULE(_openvad, m) {
  m.doc() = "Native core of the openvad package";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<NotFoundError>(m, "NotFoundError", PyExc_FileNotFoundError);
  py::register_exception<CorruptionError>(m, "CorruptionError", PyExc_IOError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("default_config", [] { return Config{}.to_json().dump(); });
  m.def("resolve_config", [](const std::string& overrides) { return config_from(overrides).to_json().dump(); },
        py::arg("overrides"));
  m.def("generate_dataset", &generate, py::arg("out_dir"), py::arg("spec_json") = "");
  m.def("build_knn", &knn, py::arg("dataset_dir"), py::arg("n"));
  m.def("train", &train, py::arg("dataset_dir"), py::arg("out_dir"), py::arg("config_json") = "");
  m.def("score", &score, py::arg("checkpoint"), py::arg("dataset_dir"), py::arg("video_id"),
        py::arg("definition_json") = "");
  m.def("evaluate", &evaluate, py::arg("checkpoint"), py::arg("dataset_dir"), py::arg("split") = "val",
        py::arg("subsets_json") = "");

  m.def(
      "roc_auc",
      [](const std::vector<double>& s, const std::vector<std::uint8_t>& y) { return roc_auc(s, y); },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "average_precision",
      [](const std::vector<double>& s, const std::vector<std::uint8_t>& y) { return average_precision(s, y); },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "multiclass_metrics",
      [](const std::vector<int>& p, const std::vector<int>& t) {
        const MulticlassMetrics r = multiclass_metrics(p, t);
        return py::make_tuple(r.accuracy, r.macro_f1);
      },
      py::arg("predicted"), py::arg("truth"));
  m.def(
      "check_shared_conditional",
      [](const std::vector<int>& mapping, const std::vector<std::vector<double>>& d1,
         const std::vector<std::vector<double>>& d2, int ny) {
        auto to_mat = [](const std::vector<std::vector<double>>& rows) {
          if (rows.empty()) throw ValidationError("domain needs at least one row");
          Mat out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
          for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != rows[0].size()) throw ValidationError("domain rows differ in length");
            for (std::size_t j = 0; j < rows[i].size(); ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
          }
          return out;
        };
        return check_shared_conditional(mapping, to_mat(d1), to_mat(d2), ny).identical;
      },
      py::arg("mapping"), py::arg("d1"), py::arg("d2"), py::arg("ny"));
}
