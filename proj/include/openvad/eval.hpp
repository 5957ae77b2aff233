#pragma once

#include <filesystem>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "openvad/core.hpp"
#include "openvad/model.hpp"
#include "openvad/synthesis.hpp"
#include "openvad/text_encoder.hpp"

namespace openvad {

/// Classes treated as abnormal under Protocol 2; every other class counts as normal.
struct SubsetDefinition {
  std::string name;
  std::vector<std::string> classes;

  Json to_json() const;
  static SubsetDefinition from_json(const Json& j);
};

/// Accepts either a JSON array of subsets or {"subsets": [...]}.
std::vector<SubsetDefinition> load_subsets(const std::filesystem::path& path);

/// Abnormal class ids appearing in a manifest.
std::set<std::string> abnormal_classes(const std::vector<VideoRecord>& records);

/// Throws ValidationError when the subset is empty or names a class outside
/// the inventory.
void validate_subset(const SubsetDefinition& subset, const std::set<std::string>& inventory);

/// Videos of excluded abnormal classes become normal with all-zero frame
/// labels; everything else is unchanged.
std::vector<VideoRecord> relabel_for_subset(const std::vector<VideoRecord>& records, const SubsetDefinition& subset);

/// Keeps the included classes and the normal entry, in their original order.
AnomalyDefinition restrict_definition(const AnomalyDefinition& full, const SubsetDefinition& subset);

enum class DetectionMetric { kAuc, kAp };
std::string_view to_string(DetectionMetric m);
DetectionMetric parse_detection_metric(std::string_view s);

/// One test set scored with its own definition.
struct EvalTarget {
  std::string name;
  std::vector<TrainingVideo> videos;
  AnomalyDefinition definition;
  DetectionMetric metric = DetectionMetric::kAuc;
  /// Min-max normalize scores over the whole set before the detection metric.
  /// Unset = decide from the data (every video abnormal).
  std::optional<bool> anomaly_only;
};

struct DatasetReport {
  std::string name;
  DetectionMetric metric = DetectionMetric::kAuc;
  double detection = std::numeric_limits<double>::quiet_NaN();  // the declared metric
  double auc = std::numeric_limits<double>::quiet_NaN();
  double ap = std::numeric_limits<double>::quiet_NaN();
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  double macro_f1 = std::numeric_limits<double>::quiet_NaN();
  bool normalized = false;
  int videos = 0;
  long long frames = 0;

  Json to_json() const;
};

struct SubsetReport {
  SubsetDefinition subset;
  double auc = std::numeric_limits<double>::quiet_NaN();
  double ap = std::numeric_limits<double>::quiet_NaN();
};

struct EvalReport {
  std::vector<DatasetReport> datasets;
  std::vector<SubsetReport> subsets;
  double drift_mean_auc = std::numeric_limits<double>::quiet_NaN();
  double drift_mean_ap = std::numeric_limits<double>::quiet_NaN();

  Json to_json() const;
};

/// Per-step scores sigma(y_bin) and class probabilities of one video.
struct VideoScores {
  std::string video_id;
  std::vector<double> step_scores;
  std::vector<double> class_probs;
};

/// Score dump line {video_id, frame_scores, class_probs, definition_name}.
Json score_dump_line(const VideoScores& s, const std::string& definition_name);

/// Concatenated per-frame scores and labels. Frame labels with one entry per
/// feature step are used as they are; longer label vectors are treated as raw
/// frames and each step score is repeated over its stride.
struct FramePairs {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  bool complete = true;  // false when some video had no frame labels
};
FramePairs frame_pairs(const std::vector<TrainingVideo>& videos, const std::vector<VideoScores>& scores);

std::vector<VideoScores> score_videos(const Model& model, const TextEncoder& encoder,
                                      const std::vector<TrainingVideo>& videos, const AnomalyDefinition& definition);

DatasetReport evaluate_dataset(const Model& model, const TextEncoder& encoder, const EvalTarget& target,
                               std::ostream* dump = nullptr);

EvalReport evaluate_protocol1(const Model& model, const TextEncoder& encoder, const std::vector<EvalTarget>& targets,
                              std::ostream* dump = nullptr);

/// drift@k: for each subset, score with the restricted definition, relabel
/// and compute AUC and AP; the report carries per-subset values and means.
EvalReport evaluate_protocol2(const Model& model, const TextEncoder& encoder, const EvalTarget& target,
                              const std::vector<SubsetDefinition>& subsets, std::ostream* dump = nullptr);

// ---------------------------------------------------------------------------
// Conditional invariance check over finite domains.

/// Joint mass over V x Z x Y, stored densely.
struct JointTable {
  int nv = 0;
  int nz = 0;
  int ny = 0;
  std::vector<double> mass;

  JointTable() = default;
  JointTable(int nv_, int nz_, int ny_);
  double& at(int v, int z, int y);
  double at(int v, int z, int y) const;
};

/// P(v, z, y) = d(v, z) * [F(v, z) = y], with F given as a row-major nv x nz
/// table of labels in [0, ny) and d as an nv x nz matrix of non-negative mass.
JointTable joint_from_mapping(const std::vector<int>& mapping, const Mat& domain, int ny);

struct ConditionalReport {
  bool identical = true;
  int compared = 0;
  std::vector<std::pair<int, int>> skipped;  // (v, z) pairs without mass in a domain
  double max_abs_difference = 0.0;
};

/// Compares P_d1(Y | V = v, Z = z) with P_d2(Y | V = v, Z = z) on every pair
/// with positive mass in both tables.
ConditionalReport compare_conditionals(const JointTable& d1, const JointTable& d2, double tolerance = 1e-12);
ConditionalReport check_shared_conditional(const std::vector<int>& mapping, const Mat& d1, const Mat& d2, int ny,
                                      double tolerance = 1e-12);

/// Loads the given split of a dataset directory as evaluation videos.
std::vector<TrainingVideo> load_split_videos(const std::filesystem::path& dataset_dir, Split split);

}  // namespace openvad
