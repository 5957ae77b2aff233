#include "openvad/synthesis.hpp"

namespace openvad {

VideoPool::VideoPool(std::vector<TrainingVideo> videos) {
  for (auto& v : videos) {
    const bool normal = v.record.is_normal();
    auto& bucket = normal ? normal_ : abnormal_;
    if (lookup_.contains(v.record.video_id)) {
      throw ValidationError("duplicate training video '" + v.record.video_id + "'");
    }
    lookup_[v.record.video_id] = {normal, bucket.size()};
    bucket.push_back(std::move(v));
  }
}

const TrainingVideo& VideoPool::get(const std::string& video_id) const {
  auto it = lookup_.find(video_id);
  if (it == lookup_.end()) throw NotFoundError("video '" + video_id + "' is not in the training pool");
  const auto& bucket = it->second.first ? normal_ : abnormal_;
  return bucket[it->second.second];
}

VideoPool load_training_pool(const std::vector<VideoRecord>& manifest, const FeatureRepository& repo) {
  std::vector<TrainingVideo> videos;
  for (const auto& r : manifest) {
    if (r.split != Split::kTrain) continue;
    videos.push_back({r, repo.read(r.video_id)});
  }
  return VideoPool(std::move(videos));
}

Json SynthesizedSample::provenance_json() const {
  Json segs = Json::array();
  for (std::size_t i = 0; i < segments.size(); ++i) {
    segs.push_back({{"source", sources[i]}, {"start", segments[i].first}, {"end", segments[i].second}});
  }
  return Json{{"anchor_id", anchor_id},
              {"anchor_label", anchor_label},
              {"video_label", video_label},
              {"segment_count", segment_count},
              {"anchor_slot", anchor_slot},
              {"length", length()},
              {"segments", segs}};
}

SynthesizedSample assemble_sample(const TrainingVideo& anchor, std::span<const TrainingVideo* const> fillers,
                                  int anchor_slot) {
  const int m = static_cast<int>(fillers.size()) + 1;
  if (anchor_slot < 1 || anchor_slot > m) throw ValidationError("anchor slot out of range");
  std::vector<const TrainingVideo*> slots;
  slots.reserve(static_cast<std::size_t>(m));
  std::size_t next_filler = 0;
  for (int s = 1; s <= m; ++s) slots.push_back(s == anchor_slot ? &anchor : fillers[next_filler++]);

  SynthesizedSample out;
  out.anchor_id = anchor.record.video_id;
  out.anchor_label = anchor.record.label;
  out.anchor_description = anchor.record.description;
  out.video_label = anchor.record.is_normal() ? 0 : 1;
  out.segment_count = m;
  out.anchor_slot = anchor_slot;

  int total = 0;
  const int width = anchor.features.width();
  for (const TrainingVideo* v : slots) {
    if (v->features.width() != width) throw ValidationError("synthesis: feature width mismatch");
    total += v->features.length();
  }
  out.features.resize(total, width);
  out.pseudo_label.assign(static_cast<std::size_t>(total), 0);
  int at = 0;
  for (int s = 1; s <= m; ++s) {
    const TrainingVideo* v = slots[static_cast<std::size_t>(s - 1)];
    const int len = v->features.length();
    out.features.middleRows(at, len) = v->features.features;
    if (s == anchor_slot && out.video_label == 1) {
      std::fill(out.pseudo_label.begin() + at, out.pseudo_label.begin() + at + len, 1);
    }
    out.segments.emplace_back(at, at + len);
    out.sources.push_back(v->record.video_id);
    at += len;
  }
  return out;
}

SynthesizedSample synthesize(const VideoPool& pool, const KnnIndex& knn, const Config& cfg, Rng& rng) {
  if (pool.normal().empty() || pool.abnormal().empty()) {
    throw ValidationError("synthesis needs non-empty normal and abnormal sets");
  }
  const double p1 = rng.uniform();
  const double p2 = rng.uniform();
  const int m = p1 > cfg.theta ? 1 : static_cast<int>(rng.randint(1, cfg.delta_m));
  const auto& source = p2 > cfg.alpha ? pool.abnormal() : pool.normal();
  const TrainingVideo& anchor =
      source[static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(source.size()) - 1))];
  const int j = static_cast<int>(rng.randint(1, m));

  const auto& neighbours = knn.at(anchor.record.video_id);
  if (m > 1 && neighbours.empty()) {
    throw ValidationError("anchor '" + anchor.record.video_id + "' has no normal neighbours to synthesize with");
  }
  std::vector<const TrainingVideo*> fillers;
  fillers.reserve(static_cast<std::size_t>(m - 1));
  for (int s = 0; s < m - 1; ++s) {
    const auto& id = neighbours[static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(neighbours.size()) - 1))];
    fillers.push_back(&pool.get(id));
  }
  return assemble_sample(anchor, fillers, j);
}

SynthesisStatistics synthesis_statistics(std::span<const SynthesizedSample> samples) {
  if (samples.empty()) throw ValidationError("synthesis_statistics: no samples");
  SynthesisStatistics s;
  std::size_t multi = 0, abnormal = 0;
  double length = 0.0;
  for (const auto& x : samples) {
    if (x.segment_count > 1) ++multi;
    if (x.video_label == 1) ++abnormal;
    length += x.length();
  }
  const double n = static_cast<double>(samples.size());
  s.fraction_multi_segment = static_cast<double>(multi) / n;
  s.fraction_abnormal_anchor = static_cast<double>(abnormal) / n;
  s.mean_length = length / n;
  return s;
}

}  // namespace openvad
