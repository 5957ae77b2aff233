#include "openvad/eval.hpp"

#include <algorithm>
#include <cmath>

#include "openvad/metrics.hpp"

namespace openvad {

namespace {

Json metric_json(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

bool has_both(const std::vector<std::uint8_t>& labels) {
  const bool pos = std::any_of(labels.begin(), labels.end(), [](auto x) { return x != 0; });
  const bool neg = std::any_of(labels.begin(), labels.end(), [](auto x) { return x == 0; });
  return pos && neg;
}

}  // namespace

Json SubsetDefinition::to_json() const { return Json{{"name", name}, {"classes", classes}}; }

SubsetDefinition SubsetDefinition::from_json(const Json& j) {
  if (!j.is_object()) throw ValidationError("subset must be a JSON object");
  SubsetDefinition s;
  if (j.contains("name")) {
    if (!j.at("name").is_string()) throw ValidationError("subset name must be a string");
    s.name = j.at("name").get<std::string>();
  }
  if (!j.contains("classes") || !j.at("classes").is_array()) throw ValidationError("subset.classes must be an array");
  for (const auto& c : j.at("classes")) {
    if (!c.is_string()) throw ValidationError("subset classes must be strings");
    s.classes.push_back(c.get<std::string>());
  }
  return s;
}

std::vector<SubsetDefinition> load_subsets(const std::filesystem::path& path) {
  const Json j = load_json(path);
  const Json& list = j.is_object() && j.contains("subsets") ? j.at("subsets") : j;
  if (!list.is_array()) throw ValidationError(path.string() + ": expected an array of subsets");
  std::vector<SubsetDefinition> out;
  for (const auto& s : list) out.push_back(SubsetDefinition::from_json(s));
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].name.empty()) out[i].name = "subset" + std::to_string(i);
  }
  return out;
}

std::set<std::string> abnormal_classes(const std::vector<VideoRecord>& records) {
  std::set<std::string> out;
  for (const auto& r : records) {
    if (!r.is_normal()) out.insert(r.label);
  }
  return out;
}

void validate_subset(const SubsetDefinition& subset, const std::set<std::string>& inventory) {
  if (subset.classes.empty()) throw ValidationError("subset '" + subset.name + "' includes no classes");
  std::set<std::string> seen;
  for (const auto& c : subset.classes) {
    if (c == kNormalLabel) throw ValidationError("subset '" + subset.name + "' lists the normal class");
    if (!inventory.contains(c)) throw ValidationError("subset '" + subset.name + "' references unknown class '" + c + "'");
    if (!seen.insert(c).second) throw ValidationError("subset '" + subset.name + "' repeats class '" + c + "'");
  }
}

std::vector<VideoRecord> relabel_for_subset(const std::vector<VideoRecord>& records, const SubsetDefinition& subset) {
  validate_subset(subset, abnormal_classes(records));
  const std::set<std::string> included(subset.classes.begin(), subset.classes.end());
  std::vector<VideoRecord> out = records;
  for (auto& r : out) {
    if (r.is_normal() || included.contains(r.label)) continue;
    r.label = std::string(kNormalLabel);
    r.description.reset();
    if (r.frame_labels) std::fill(r.frame_labels->begin(), r.frame_labels->end(), 0);
  }
  return out;
}

AnomalyDefinition restrict_definition(const AnomalyDefinition& full, const SubsetDefinition& subset) {
  std::vector<ClassEntry> entries;
  int normal = -1;
  for (const auto& c : subset.classes) {
    if (!full.index_of(c)) throw ValidationError("subset class '" + c + "' is not in the definition");
  }
  for (int i = 0; i < full.size(); ++i) {
    const ClassEntry& e = full.entry(i);
    const bool keep = i == full.normal_index() ||
                      std::find(subset.classes.begin(), subset.classes.end(), e.class_id) != subset.classes.end();
    if (!keep) continue;
    if (i == full.normal_index()) normal = static_cast<int>(entries.size());
    entries.push_back(e);
  }
  return AnomalyDefinition(std::move(entries), normal);
}

std::string_view to_string(DetectionMetric m) { return m == DetectionMetric::kAp ? "ap" : "auc"; }

DetectionMetric parse_detection_metric(std::string_view s) {
  if (s == "auc") return DetectionMetric::kAuc;
  if (s == "ap") return DetectionMetric::kAp;
  throw ValidationError("unknown metric '" + std::string(s) + "' (expected auc or ap)");
}

Json DatasetReport::to_json() const {
  return Json{{"name", name},
              {"metric", std::string(to_string(metric))},
              {"detection", metric_json(detection)},
              {"auc", metric_json(auc)},
              {"ap", metric_json(ap)},
              {"accuracy", metric_json(accuracy)},
              {"macro_f1", metric_json(macro_f1)},
              {"normalized", normalized},
              {"videos", videos},
              {"frames", frames}};
}

Json EvalReport::to_json() const {
  Json j = Json::object();
  Json ds = Json::array();
  for (const auto& d : datasets) ds.push_back(d.to_json());
  j["datasets"] = std::move(ds);
  if (!subsets.empty()) {
    Json ss = Json::array();
    for (const auto& s : subsets) {
      ss.push_back({{"name", s.subset.name}, {"classes", s.subset.classes}, {"auc", metric_json(s.auc)}, {"ap", metric_json(s.ap)}});
    }
    j["subsets"] = std::move(ss);
    j["drift_k"] = subsets.size();
    j["drift_mean_auc"] = metric_json(drift_mean_auc);
    j["drift_mean_ap"] = metric_json(drift_mean_ap);
  }
  return j;
}

Json score_dump_line(const VideoScores& s, const std::string& definition_name) {
  return Json{{"video_id", s.video_id},
              {"frame_scores", s.step_scores},
              {"class_probs", s.class_probs},
              {"definition_name", definition_name}};
}

std::vector<VideoScores> score_videos(const Model& model, const TextEncoder& encoder,
                                      const std::vector<TrainingVideo>& videos, const AnomalyDefinition& definition) {
  std::vector<VideoScores> out;
  out.reserve(videos.size());
  for (const auto& v : videos) {
    const ScoreResult r = score_video(model, encoder, v.features, definition);
    VideoScores s;
    s.video_id = v.record.video_id;
    s.step_scores.resize(static_cast<std::size_t>(r.y_bin.size()));
    for (Eigen::Index t = 0; t < r.y_bin.size(); ++t) s.step_scores[static_cast<std::size_t>(t)] = sigmoid(r.y_bin(t));
    s.class_probs.assign(r.video_class_probs.data(), r.video_class_probs.data() + r.video_class_probs.size());
    out.push_back(std::move(s));
  }
  return out;
}

FramePairs frame_pairs(const std::vector<TrainingVideo>& videos, const std::vector<VideoScores>& scores) {
  if (videos.size() != scores.size()) throw ValidationError("frame_pairs: videos and scores differ in count");
  FramePairs out;
  for (std::size_t i = 0; i < videos.size(); ++i) {
    const TrainingVideo& v = videos[i];
    if (!v.record.frame_labels) {
      out.complete = false;
      continue;
    }
    const auto& labels = *v.record.frame_labels;
    const auto& steps = scores[i].step_scores;
    const std::size_t stride = v.features.stride_frames;
    if (labels.size() == steps.size()) {
      out.scores.insert(out.scores.end(), steps.begin(), steps.end());
    } else if (labels.size() > (steps.size() - 1) * stride && labels.size() <= steps.size() * stride) {
      const auto frames = expand_to_frames(steps, static_cast<int>(stride), static_cast<int>(labels.size()));
      out.scores.insert(out.scores.end(), frames.begin(), frames.end());
    } else {
      throw ValidationError("video '" + v.record.video_id + "' has " + std::to_string(labels.size()) +
                            " frame labels for " + std::to_string(steps.size()) + " feature steps");
    }
    out.labels.insert(out.labels.end(), labels.begin(), labels.end());
  }
  return out;
}

DatasetReport evaluate_dataset(const Model& model, const TextEncoder& encoder, const EvalTarget& target,
                               std::ostream* dump) {
  DatasetReport rep;
  rep.name = target.name;
  rep.metric = target.metric;
  rep.videos = static_cast<int>(target.videos.size());
  if (target.videos.empty()) throw ValidationError("evaluation set '" + target.name + "' is empty");
  const auto scores = score_videos(model, encoder, target.videos, target.definition);
  if (dump) {
    for (const auto& s : scores) *dump << score_dump_line(s, target.name).dump() << '\n';
  }

  FramePairs pairs = frame_pairs(target.videos, scores);
  rep.frames = static_cast<long long>(pairs.labels.size());
  const bool anomaly_only =
      target.anomaly_only.value_or(std::all_of(target.videos.begin(), target.videos.end(),
                                               [](const TrainingVideo& v) { return !v.record.is_normal(); }));
  if (!pairs.complete) {
    log_warning("evaluation set '" + target.name + "' has videos without frame labels; detection metrics skipped");
  } else if (!has_both(pairs.labels)) {
    log_warning("evaluation set '" + target.name + "' has single-class frame labels; detection metrics skipped");
  } else {
    if (anomaly_only) {
      pairs.scores = minmax_normalize(pairs.scores);
      rep.normalized = true;
    }
    rep.auc = roc_auc(pairs.scores, pairs.labels);
    rep.ap = average_precision(pairs.scores, pairs.labels);
    rep.detection = target.metric == DetectionMetric::kAp ? rep.ap : rep.auc;
  }

  std::vector<int> predicted, truth;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto idx = target.definition.index_of(target.videos[i].record.label);
    if (!idx) continue;
    const auto& p = scores[i].class_probs;
    predicted.push_back(static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()));
    truth.push_back(*idx);
  }
  if (!truth.empty()) {
    const MulticlassMetrics m = multiclass_metrics(predicted, truth);
    rep.accuracy = m.accuracy;
    rep.macro_f1 = m.macro_f1;
  }
  return rep;
}

EvalReport evaluate_protocol1(const Model& model, const TextEncoder& encoder, const std::vector<EvalTarget>& targets,
                              std::ostream* dump) {
  if (targets.empty()) throw ValidationError("protocol 1 needs at least one evaluation set");
  EvalReport r;
  for (const auto& t : targets) r.datasets.push_back(evaluate_dataset(model, encoder, t, dump));
  return r;
}

EvalReport evaluate_protocol2(const Model& model, const TextEncoder& encoder, const EvalTarget& target,
                              const std::vector<SubsetDefinition>& subsets, std::ostream* dump) {
  if (subsets.empty()) throw ValidationError("protocol 2 needs at least one subset");
  std::vector<VideoRecord> records;
  for (const auto& v : target.videos) records.push_back(v.record);
  const auto inventory = abnormal_classes(records);
  EvalReport r;
  double sum_auc = 0.0, sum_ap = 0.0;
  for (const auto& subset : subsets) {
    validate_subset(subset, inventory);
    const AnomalyDefinition def = restrict_definition(target.definition, subset);
    const auto relabeled = relabel_for_subset(records, subset);
    std::vector<TrainingVideo> videos = target.videos;
    for (std::size_t i = 0; i < videos.size(); ++i) videos[i].record = relabeled[i];
    const auto scores = score_videos(model, encoder, videos, def);
    if (dump) {
      for (const auto& s : scores) *dump << score_dump_line(s, subset.name).dump() << '\n';
    }
    const FramePairs pairs = frame_pairs(videos, scores);
    if (!pairs.complete || !has_both(pairs.labels)) {
      throw ValidationError("subset '" + subset.name + "' leaves no usable frame labels");
    }
    SubsetReport s;
    s.subset = subset;
    s.auc = roc_auc(pairs.scores, pairs.labels);
    s.ap = average_precision(pairs.scores, pairs.labels);
    sum_auc += s.auc;
    sum_ap += s.ap;
    r.subsets.push_back(std::move(s));
  }
  r.drift_mean_auc = sum_auc / static_cast<double>(subsets.size());
  r.drift_mean_ap = sum_ap / static_cast<double>(subsets.size());
  return r;
}

JointTable::JointTable(int nv_, int nz_, int ny_) : nv(nv_), nz(nz_), ny(ny_) {
  if (nv < 1 || nz < 1 || ny < 1) throw ValidationError("joint table dimensions must be positive");
  mass.assign(static_cast<std::size_t>(nv) * nz * ny, 0.0);
}

double& JointTable::at(int v, int z, int y) { return mass[(static_cast<std::size_t>(v) * nz + z) * ny + y]; }
double JointTable::at(int v, int z, int y) const { return mass[(static_cast<std::size_t>(v) * nz + z) * ny + y]; }

JointTable joint_from_mapping(const std::vector<int>& mapping, const Mat& domain, int ny) {
  const int nv = static_cast<int>(domain.rows());
  const int nz = static_cast<int>(domain.cols());
  if (static_cast<int>(mapping.size()) != nv * nz) throw ValidationError("mapping must have one label per (v, z)");
  JointTable t(nv, nz, ny);
  for (int v = 0; v < nv; ++v) {
    for (int z = 0; z < nz; ++z) {
      const int y = mapping[static_cast<std::size_t>(v * nz + z)];
      if (y < 0 || y >= ny) throw ValidationError("mapping label out of range");
      if (!(domain(v, z) >= 0.0)) throw ValidationError("domain mass must be non-negative");
      t.at(v, z, y) = domain(v, z);
    }
  }
  return t;
}

ConditionalReport compare_conditionals(const JointTable& d1, const JointTable& d2, double tolerance) {
  if (d1.nv != d2.nv || d1.nz != d2.nz || d1.ny != d2.ny) throw ValidationError("joint tables differ in shape");
  ConditionalReport r;
  for (int v = 0; v < d1.nv; ++v) {
    for (int z = 0; z < d1.nz; ++z) {
      double m1 = 0.0, m2 = 0.0;
      for (int y = 0; y < d1.ny; ++y) {
        m1 += d1.at(v, z, y);
        m2 += d2.at(v, z, y);
      }
      if (!(m1 > 0.0) || !(m2 > 0.0)) {
        r.skipped.emplace_back(v, z);
        continue;
      }
      ++r.compared;
      for (int y = 0; y < d1.ny; ++y) {
        const double diff = std::abs(d1.at(v, z, y) / m1 - d2.at(v, z, y) / m2);
        r.max_abs_difference = std::max(r.max_abs_difference, diff);
      }
    }
  }
  r.identical = r.max_abs_difference <= tolerance;
  return r;
}

ConditionalReport check_shared_conditional(const std::vector<int>& mapping, const Mat& d1, const Mat& d2, int ny,
                                      double tolerance) {
  if (d1.rows() != d2.rows() || d1.cols() != d2.cols()) throw ValidationError("domains differ in support");
  return compare_conditionals(joint_from_mapping(mapping, d1, ny), joint_from_mapping(mapping, d2, ny), tolerance);
}

std::vector<TrainingVideo> load_split_videos(const std::filesystem::path& dataset_dir, Split split) {
  const auto manifest = load_manifest(manifest_path(dataset_dir));
  const PrototypeTable table = load_prototypes(prototypes_path(dataset_dir));
  const FeatureRepository repo(features_dir(dataset_dir), table.embed_dim);
  std::vector<TrainingVideo> out;
  for (const auto& r : manifest) {
    if (r.split == split) out.push_back({r, repo.read(r.video_id)});
  }
  return out;
}

}  // namespace openvad
