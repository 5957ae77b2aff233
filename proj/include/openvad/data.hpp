#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "openvad/core.hpp"

namespace openvad {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Manifests

/// Reads a JSONL manifest. Malformed lines raise ValidationError with the
/// 1-based line number in the message.
std::vector<VideoRecord> load_manifest(const fs::path& path);
void save_manifest(const fs::path& path, const std::vector<VideoRecord>& records);

struct SplitCounts {
  int train = 0;
  int val = 0;
  int test = 0;
};
SplitCounts count_splits(const std::vector<VideoRecord>& records);

std::vector<VideoRecord> filter_split(const std::vector<VideoRecord>& records, Split split);

// ---------------------------------------------------------------------------
// Feature files
//
// Layout (little-endian):
//   char[4] "FSEQ", u32 version = 1, u32 L, u32 E, f32 fps, u32 stride_frames,
//   then L*E f32 in row-major order.

inline constexpr std::uint32_t kFeatureFileVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 24;

void write_feature_file(const fs::path& path, const FeatureSequence& seq);
FeatureSequence read_feature_file(const fs::path& path, std::string video_id);

/// A directory of feature files, one per video: <root>/<video_id>.fseq.
class FeatureRepository {
 public:
  /// Opens (or creates) the directory and indexes the files already present.
  FeatureRepository(fs::path root, int embed_dim);

  const fs::path& root() const { return root_; }
  int embed_dim() const { return embed_dim_; }
  bool contains(const std::string& video_id) const { return index_.contains(video_id); }
  std::vector<std::string> ids() const;
  std::size_t size() const { return index_.size(); }

  /// Throws NotFoundError for unknown ids, CorruptionError for bad files.
  FeatureSequence read(const std::string& video_id) const;
  /// Single writer. Rejects non-finite data and width mismatches.
  void write(const FeatureSequence& seq);

 private:
  fs::path root_;
  int embed_dim_;
  std::map<std::string, fs::path> index_;
};

/// Checks every record resolves to a feature file and that frame_labels have
/// one entry per feature step.
void validate_manifest_against_repository(const std::vector<VideoRecord>& records,
                                          const FeatureRepository& repo);

/// Row floor(L / 2) of the sequence.
Vec central_step_feature(const FeatureSequence& seq);

// ---------------------------------------------------------------------------
// Synthetic benchmark

struct PrototypeEntry {
  std::string class_id;
  std::string name;
  Vec vector;  // unit norm, length E
};

/// Category prototypes used to plant anomalies, plus the normal background.
struct PrototypeTable {
  int embed_dim = 0;
  PrototypeEntry background;  // class_id "normal"
  std::vector<PrototypeEntry> classes;

  const PrototypeEntry* find_id(std::string_view class_id) const;
  const PrototypeEntry* find_name(std::string_view name) const;
  /// Taxonomy definition: every class (prompt = name) followed by the normal entry.
  AnomalyDefinition taxonomy_definition(std::string normal_prompt = std::string(kDefaultNormalPrompt)) const;

  Json to_json() const;
  static PrototypeTable from_json(const Json& j);
};

struct SyntheticSpec {
  int num_categories = 5;
  int train_videos = 200;
  int val_videos = 50;
  int test_videos = 0;
  double abnormal_ratio = 0.5;  // share of abnormal videos in each split
  int embed_dim = 32;
  int min_length = 20;
  int max_length = 60;
  double min_anomaly_fraction = 0.2;
  double max_anomaly_fraction = 0.6;
  double noise = 0.05;
  std::uint32_t stride_frames = 8;
  double fps = 30.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticDataset {
  std::vector<VideoRecord> records;
  std::vector<FeatureSequence> features;  // aligned with records
  PrototypeTable prototypes;
};

/// Deterministic in spec.seed.
SyntheticDataset generate_synthetic_dataset(const SyntheticSpec& spec);

/// Writes manifest.jsonl, features/, prototypes.json and definition.json.
void write_dataset(const fs::path& dir, const SyntheticDataset& ds);

inline fs::path manifest_path(const fs::path& dir) { return dir / "manifest.jsonl"; }
inline fs::path features_dir(const fs::path& dir) { return dir / "features"; }
inline fs::path prototypes_path(const fs::path& dir) { return dir / "prototypes.json"; }
inline fs::path definition_path(const fs::path& dir) { return dir / "definition.json"; }

PrototypeTable load_prototypes(const fs::path& path);
AnomalyDefinition load_definition(const fs::path& path);
void save_json(const fs::path& path, const Json& j);
Json load_json(const fs::path& path);

// ---------------------------------------------------------------------------
// Nearest normal neighbours

struct KnnIndex {
  std::map<std::string, std::vector<std::string>> neighbors;
  bool truncated = false;

  const std::vector<std::string>& at(const std::string& video_id) const;
  Json to_json() const;
  static KnnIndex from_json(const Json& j);
};

/// For every training video, the n most cosine-similar normal training videos
/// (central-step features), nearest first, ties by ascending id. Never lists a
/// video as its own neighbour.
KnnIndex build_knn_index(const std::vector<VideoRecord>& manifest,
                         const std::unordered_map<std::string, Vec>& central_features, int n);
KnnIndex build_knn_index(const FeatureRepository& repo, const std::vector<VideoRecord>& manifest, int n);

}  // namespace openvad
