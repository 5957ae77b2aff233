#pragma once

#include <span>
#include <unordered_map>
#include <utility>

#include "openvad/core.hpp"
#include "openvad/data.hpp"

namespace openvad {

struct TrainingVideo {
  VideoRecord record;
  FeatureSequence features;
};

/// Training videos split into the normal set and the abnormal set.
class VideoPool {
 public:
  VideoPool() = default;
  explicit VideoPool(std::vector<TrainingVideo> videos);

  const std::vector<TrainingVideo>& normal() const { return normal_; }
  const std::vector<TrainingVideo>& abnormal() const { return abnormal_; }
  const TrainingVideo& get(const std::string& video_id) const;

 private:
  std::vector<TrainingVideo> normal_;
  std::vector<TrainingVideo> abnormal_;
  std::unordered_map<std::string, std::pair<bool, std::size_t>> lookup_;
};

/// Loads the train split of a manifest from a repository.
VideoPool load_training_pool(const std::vector<VideoRecord>& manifest, const FeatureRepository& repo);

struct SynthesizedSample {
  Mat features;                          // L_total x E
  std::vector<std::uint8_t> pseudo_label;  // L_total
  int video_label = 0;                   // 1 when the anchor is abnormal
  std::string anchor_id;
  std::string anchor_label;              // class id of the anchor, or "normal"
  std::optional<std::string> anchor_description;
  int segment_count = 1;                 // m
  int anchor_slot = 1;                   // j, 1-based
  std::vector<std::pair<int, int>> segments;  // [start, end) per slot
  std::vector<std::string> sources;      // video id per slot

  int length() const { return static_cast<int>(features.rows()); }
  Json provenance_json() const;
};

/// Concatenates slot sequences in order; the anchor occupies anchor_slot
/// (1-based) and is the only slot that can carry positive pseudo-labels.
SynthesizedSample assemble_sample(const TrainingVideo& anchor, std::span<const TrainingVideo* const> fillers,
                                  int anchor_slot);

/// One draw of the dynamic video synthesis procedure.
SynthesizedSample synthesize(const VideoPool& pool, const KnnIndex& knn, const Config& cfg, Rng& rng);

struct SynthesisStatistics {
  double fraction_multi_segment = 0.0;   // share with m > 1
  double fraction_abnormal_anchor = 0.0;
  double mean_length = 0.0;
};

SynthesisStatistics synthesis_statistics(std::span<const SynthesizedSample> samples);

}  // namespace openvad
