#include "openvad/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace openvad {

// ---------------------------------------------------------------------------
// Manifests

std::vector<VideoRecord> load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open manifest " + path.string());
  std::vector<VideoRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(VideoRecord::from_json(Json::parse(line)));
    } catch (const Json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  std::map<std::string, int> seen;
  for (const auto& r : records) {
    if (++seen[r.video_id] > 1) throw ValidationError("duplicate video_id '" + r.video_id + "' in manifest");
  }
  const SplitCounts c = count_splits(records);
  log_info("manifest " + path.filename().string() + ": " + std::to_string(records.size()) + " records (train " +
           std::to_string(c.train) + ", val " + std::to_string(c.val) + ", test " + std::to_string(c.test) + ")");
  return records;
}

void save_manifest(const fs::path& path, const std::vector<VideoRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write manifest " + path.string());
  for (const auto& r : records) out << r.to_json().dump() << '\n';
}

SplitCounts count_splits(const std::vector<VideoRecord>& records) {
  SplitCounts c;
  for (const auto& r : records) {
    switch (r.split) {
      case Split::kTrain: ++c.train; break;
      case Split::kVal: ++c.val; break;
      case Split::kTest: ++c.test; break;
    }
  }
  return c;
}

std::vector<VideoRecord> filter_split(const std::vector<VideoRecord>& records, Split split) {
  std::vector<VideoRecord> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature files

namespace {

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

void write_feature_file(const fs::path& path, const FeatureSequence& seq) {
  seq.validate();
  std::string buf;
  buf.reserve(kFeatureHeaderBytes + static_cast<std::size_t>(seq.features.size()) * 4);
  buf.append("FSEQ", 4);
  put_u32(buf, kFeatureFileVersion);
  put_u32(buf, static_cast<std::uint32_t>(seq.length()));
  put_u32(buf, static_cast<std::uint32_t>(seq.width()));
  put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(seq.fps)));
  put_u32(buf, seq.stride_frames);
  for (Eigen::Index r = 0; r < seq.features.rows(); ++r) {
    for (Eigen::Index c = 0; c < seq.features.cols(); ++c) {
      put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(seq.features(r, c))));
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write feature file " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

FeatureSequence read_feature_file(const fs::path& path, std::string video_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open feature file " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < kFeatureHeaderBytes) throw CorruptionError(path.string() + ": truncated header");
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  if (std::string_view(buf.data(), 4) != "FSEQ") throw CorruptionError(path.string() + ": bad magic");
  const std::uint32_t version = get_u32(p + 4);
  if (version != kFeatureFileVersion) {
    throw CorruptionError(path.string() + ": unsupported version " + std::to_string(version));
  }
  const std::uint32_t length = get_u32(p + 8);
  const std::uint32_t width = get_u32(p + 12);
  const float fps = std::bit_cast<float>(get_u32(p + 16));
  const std::uint32_t stride = get_u32(p + 20);
  const std::size_t expected = kFeatureHeaderBytes + static_cast<std::size_t>(length) * width * 4;
  if (buf.size() != expected) {
    throw CorruptionError(path.string() + ": declared " + std::to_string(length) + "x" + std::to_string(width) +
                          " but payload holds " + std::to_string((buf.size() - kFeatureHeaderBytes) / 4) +
                          " values");
  }
  FeatureSequence seq;
  seq.video_id = std::move(video_id);
  seq.fps = fps;
  seq.stride_frames = stride;
  seq.features.resize(length, width);
  const unsigned char* q = p + kFeatureHeaderBytes;
  for (std::uint32_t r = 0; r < length; ++r) {
    for (std::uint32_t c = 0; c < width; ++c, q += 4) seq.features(r, c) = std::bit_cast<float>(get_u32(q));
  }
  try {
    seq.validate();
  } catch (const ValidationError& e) {
    throw CorruptionError(path.string() + ": " + e.what());
  }
  return seq;
}

FeatureRepository::FeatureRepository(fs::path root, int embed_dim) : root_(std::move(root)), embed_dim_(embed_dim) {
  if (embed_dim_ < 1) throw ValidationError("embedding width must be positive");
  fs::create_directories(root_);
  for (const auto& entry : fs::directory_iterator(root_)) {
    if (entry.is_regular_file() && entry.path().extension() == ".fseq") {
      index_[entry.path().stem().string()] = entry.path();
    }
  }
}

std::vector<std::string> FeatureRepository::ids() const {
  std::vector<std::string> out;
  out.reserve(index_.size());
  for (const auto& [id, _] : index_) out.push_back(id);
  return out;
}

FeatureSequence FeatureRepository::read(const std::string& video_id) const {
  auto it = index_.find(video_id);
  if (it == index_.end()) throw NotFoundError("no features for video '" + video_id + "'");
  FeatureSequence seq = read_feature_file(it->second, video_id);
  if (seq.width() != embed_dim_) {
    throw CorruptionError("features of '" + video_id + "' have width " + std::to_string(seq.width()) +
                          ", repository expects " + std::to_string(embed_dim_));
  }
  return seq;
}

void FeatureRepository::write(const FeatureSequence& seq) {
  seq.validate(embed_dim_);
  VideoRecord probe;
  probe.video_id = seq.video_id;
  probe.label = std::string(kNormalLabel);
  probe.split = Split::kTest;
  probe.validate();  // id character check
  const fs::path path = root_ / (seq.video_id + ".fseq");
  write_feature_file(path, seq);
  index_[seq.video_id] = path;
}

void validate_manifest_against_repository(const std::vector<VideoRecord>& records, const FeatureRepository& repo) {
  for (const auto& r : records) {
    if (!repo.contains(r.video_id)) throw NotFoundError("manifest video '" + r.video_id + "' has no feature file");
    if (r.frame_labels) {
      const FeatureSequence seq = repo.read(r.video_id);
      if (static_cast<int>(r.frame_labels->size()) != seq.length()) {
        throw ValidationError("frame_labels of '" + r.video_id + "' have length " +
                              std::to_string(r.frame_labels->size()) + ", features have L=" +
                              std::to_string(seq.length()));
      }
    }
  }
}

Vec central_step_feature(const FeatureSequence& seq) {
  if (seq.length() < 1) throw ValidationError("central_step_feature: empty sequence");
  return seq.features.row(seq.length() / 2).transpose();
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

const PrototypeEntry* PrototypeTable::find_id(std::string_view class_id) const {
  if (class_id == background.class_id) return &background;
  for (const auto& c : classes) {
    if (c.class_id == class_id) return &c;
  }
  return nullptr;
}

const PrototypeEntry* PrototypeTable::find_name(std::string_view name) const {
  if (name == background.name) return &background;
  for (const auto& c : classes) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

AnomalyDefinition PrototypeTable::taxonomy_definition(std::string normal_prompt) const {
  std::vector<ClassEntry> entries;
  for (const auto& c : classes) entries.push_back({c.class_id, c.name, std::nullopt});
  entries.push_back({std::string(kNormalLabel), std::move(normal_prompt), std::nullopt});
  const int normal = static_cast<int>(entries.size()) - 1;
  return AnomalyDefinition(std::move(entries), normal);
}

namespace {

Json entry_json(const PrototypeEntry& e) {
  std::vector<double> v(e.vector.data(), e.vector.data() + e.vector.size());
  return Json{{"class_id", e.class_id}, {"name", e.name}, {"vector", v}};
}

PrototypeEntry entry_from_json(const Json& j, int dim) {
  PrototypeEntry e;
  e.class_id = j.at("class_id").get<std::string>();
  e.name = j.at("name").get<std::string>();
  const auto v = j.at("vector").get<std::vector<double>>();
  if (static_cast<int>(v.size()) != dim) throw ValidationError("prototype '" + e.class_id + "' has the wrong width");
  e.vector = Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
  return e;
}

}  // namespace

Json PrototypeTable::to_json() const {
  Json classes_json = Json::array();
  for (const auto& c : classes) classes_json.push_back(entry_json(c));
  return Json{{"embed_dim", embed_dim}, {"background", entry_json(background)}, {"classes", classes_json}};
}

PrototypeTable PrototypeTable::from_json(const Json& j) {
  try {
    PrototypeTable t;
    t.embed_dim = j.at("embed_dim").get<int>();
    t.background = entry_from_json(j.at("background"), t.embed_dim);
    for (const auto& c : j.at("classes")) t.classes.push_back(entry_from_json(c, t.embed_dim));
    return t;
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed prototype table: ") + e.what());
  }
}

void SyntheticSpec::validate() const {
  if (num_categories < 1) throw ValidationError("num_categories must be >= 1");
  if (train_videos < 0 || val_videos < 0 || test_videos < 0) throw ValidationError("video counts must be >= 0");
  if (!(abnormal_ratio >= 0.0 && abnormal_ratio <= 1.0)) throw ValidationError("abnormal_ratio must lie in [0, 1]");
  if (embed_dim < 1) throw ValidationError("embed_dim must be >= 1");
  if (min_length < 4) throw ValidationError("min_length must be >= 4");
  if (max_length < min_length) throw ValidationError("max_length must be >= min_length");
  if (!(min_anomaly_fraction > 0.0 && min_anomaly_fraction < 1.0)) {
    throw ValidationError("min_anomaly_fraction must lie in (0, 1)");
  }
  if (!(max_anomaly_fraction > 0.0 && max_anomaly_fraction < 1.0)) {
    throw ValidationError("max_anomaly_fraction must lie in (0, 1)");
  }
  if (max_anomaly_fraction < min_anomaly_fraction) {
    throw ValidationError("max_anomaly_fraction must be >= min_anomaly_fraction");
  }
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw ValidationError("noise must be >= 0");
  if (stride_frames < 1) throw ValidationError("stride_frames must be >= 1");
  if (!(fps > 0.0)) throw ValidationError("fps must be > 0");
}

namespace {

constexpr std::array<const char*, 15> kCategoryNames = {
    "fighting", "explosion", "robbery",  "arson", "shooting", "vandalism", "burglary", "assault",
    "abuse",    "accident",  "stealing", "riot",  "fire",     "falling",   "shoplifting"};
constexpr std::array<const char*, 5> kAdjectives = {"sudden", "violent", "brief", "chaotic", "unexpected"};
constexpr std::array<const char*, 6> kPlaces = {"street", "station", "store", "lot", "corridor", "entrance"};
constexpr std::array<const char*, 3> kTimes = {"night", "morning", "evening"};

Vec random_unit(Rng& rng, int dim) {
  Vec v(dim);
  do {
    for (int i = 0; i < dim; ++i) v(i) = rng.normal();
  } while (v.norm() == 0.0);
  return v / v.norm();
}

template <std::size_t N>
const char* pick(Rng& rng, const std::array<const char*, N>& words) {
  return words[static_cast<std::size_t>(rng.randint(0, static_cast<std::int64_t>(N) - 1))];
}

std::string describe(Rng& rng, const std::string& name) {
  std::ostringstream s;
  switch (rng.randint(0, 3)) {
    case 0: s << "a " << pick(rng, kAdjectives) << ' ' << name << " happens near the " << pick(rng, kPlaces); break;
    case 1: s << "people witness " << name << " in the " << pick(rng, kPlaces); break;
    case 2: s << "footage of " << name << " at the " << pick(rng, kPlaces) << " during the " << pick(rng, kTimes); break;
    default: s << pick(rng, kAdjectives) << ' ' << name << " involving someone by the " << pick(rng, kPlaces); break;
  }
  return s.str();
}

}  // namespace

SyntheticDataset generate_synthetic_dataset(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticDataset ds;
  PrototypeTable& protos = ds.prototypes;
  protos.embed_dim = spec.embed_dim;
  {
    Rng rng = make_substream(spec.seed, "synthetic.prototypes", 0);
    protos.background = {std::string(kNormalLabel), std::string(kNormalLabel), random_unit(rng, spec.embed_dim)};
    for (int c = 0; c < spec.num_categories; ++c) {
      std::string name = c < static_cast<int>(kCategoryNames.size()) ? kCategoryNames[static_cast<std::size_t>(c)]
                                                                     : "anomaly" + std::to_string(c);
      protos.classes.push_back({"c" + std::to_string(c), std::move(name), random_unit(rng, spec.embed_dim)});
    }
  }
  const Vec& b = protos.background.vector;

  const std::array<std::pair<Split, int>, 3> splits = {
      std::pair{Split::kTrain, spec.train_videos}, std::pair{Split::kVal, spec.val_videos},
      std::pair{Split::kTest, spec.test_videos}};
  std::uint64_t video_counter = 0;
  for (const auto& [split, count] : splits) {
    const int num_abnormal = static_cast<int>(std::lround(count * spec.abnormal_ratio));
    std::vector<int> is_abnormal(static_cast<std::size_t>(count), 0);
    std::fill(is_abnormal.begin(), is_abnormal.begin() + num_abnormal, 1);
    Rng order_rng = make_substream(spec.seed, "synthetic.order", static_cast<std::uint64_t>(split));
    for (int i = count - 1; i > 0; --i) {  // Fisher-Yates with the portable randint
      std::swap(is_abnormal[static_cast<std::size_t>(i)],
                is_abnormal[static_cast<std::size_t>(order_rng.randint(0, i))]);
    }
    int abnormal_seen = 0;
    for (int i = 0; i < count; ++i) {
      Rng rng = make_substream(spec.seed, "synthetic.video", video_counter++);
      char id_buf[32];
      std::snprintf(id_buf, sizeof(id_buf), "%s_%04d", std::string(to_string(split)).c_str(), i);
      const int length = static_cast<int>(rng.randint(spec.min_length, spec.max_length));

      FeatureSequence seq;
      seq.video_id = id_buf;
      seq.stride_frames = spec.stride_frames;
      seq.fps = spec.fps;
      seq.features.resize(length, spec.embed_dim);
      for (int t = 0; t < length; ++t) {
        for (int e = 0; e < spec.embed_dim; ++e) seq.features(t, e) = b(e) + spec.noise * rng.normal();
      }

      VideoRecord rec;
      rec.video_id = seq.video_id;
      rec.split = split;
      std::vector<std::uint8_t> labels(static_cast<std::size_t>(length), 0);
      if (is_abnormal[static_cast<std::size_t>(i)]) {
        const int c = abnormal_seen++ % spec.num_categories;
        const PrototypeEntry& proto = protos.classes[static_cast<std::size_t>(c)];
        const double fraction = spec.min_anomaly_fraction == spec.max_anomaly_fraction
                                    ? spec.min_anomaly_fraction
                                    : rng.uniform(spec.min_anomaly_fraction, spec.max_anomaly_fraction);
        const int seg = std::clamp(static_cast<int>(std::lround(fraction * length)), 1, length - 1);
        const int start = static_cast<int>(rng.randint(0, length - seg));
        const Vec planted = (b + proto.vector).normalized();
        for (int t = start; t < start + seg; ++t) {
          for (int e = 0; e < spec.embed_dim; ++e) seq.features(t, e) = planted(e) + spec.noise * rng.normal();
          labels[static_cast<std::size_t>(t)] = 1;
        }
        rec.label = proto.class_id;
        rec.description = describe(rng, proto.name);
      } else {
        rec.label = std::string(kNormalLabel);
      }
      rec.frame_labels = std::move(labels);
      // Round-trip through f32 so in-memory data matches what the files hold.
      seq.features = seq.features.cast<float>().cast<double>();
      ds.records.push_back(std::move(rec));
      ds.features.push_back(std::move(seq));
    }
  }
  return ds;
}

void save_json(const fs::path& path, const Json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw ValidationError(path.string() + ": malformed JSON: " + e.what());
  }
}

void write_dataset(const fs::path& dir, const SyntheticDataset& ds) {
  fs::create_directories(features_dir(dir));
  save_manifest(manifest_path(dir), ds.records);
  FeatureRepository repo(features_dir(dir), ds.prototypes.embed_dim);
  for (const auto& seq : ds.features) repo.write(seq);
  save_json(prototypes_path(dir), ds.prototypes.to_json());
  save_json(definition_path(dir), ds.prototypes.taxonomy_definition().to_json());
}

PrototypeTable load_prototypes(const fs::path& path) { return PrototypeTable::from_json(load_json(path)); }

AnomalyDefinition load_definition(const fs::path& path) { return AnomalyDefinition::from_json(load_json(path)); }

// ---------------------------------------------------------------------------
// Nearest normal neighbours

const std::vector<std::string>& KnnIndex::at(const std::string& video_id) const {
  auto it = neighbors.find(video_id);
  if (it == neighbors.end()) throw NotFoundError("video '" + video_id + "' is not in the neighbour index");
  return it->second;
}

Json KnnIndex::to_json() const {
  Json j = Json::object();
  for (const auto& [id, list] : neighbors) j[id] = list;
  return j;
}

KnnIndex KnnIndex::from_json(const Json& j) {
  if (!j.is_object()) throw ValidationError("neighbour index must be a JSON object");
  KnnIndex k;
  for (const auto& [id, list] : j.items()) {
    if (!list.is_array()) throw ValidationError("neighbour list of '" + id + "' must be an array");
    k.neighbors[id] = list.get<std::vector<std::string>>();
  }
  return k;
}

KnnIndex build_knn_index(const std::vector<VideoRecord>& manifest,
                         const std::unordered_map<std::string, Vec>& central_features, int n) {
  if (n < 1) throw ValidationError("knn n must be >= 1");
  std::vector<const VideoRecord*> train;
  std::vector<std::string> normal_ids;
  for (const auto& r : manifest) {
    if (r.split != Split::kTrain) continue;
    train.push_back(&r);
    if (r.is_normal()) normal_ids.push_back(r.video_id);
  }
  if (normal_ids.empty()) throw ValidationError("cannot build neighbour index: no normal training videos");
  std::sort(normal_ids.begin(), normal_ids.end());

  auto unit = [&](const std::string& id) -> Vec {
    auto it = central_features.find(id);
    if (it == central_features.end()) throw NotFoundError("no central feature for '" + id + "'");
    const double norm = it->second.norm();
    return norm > 0.0 ? Vec(it->second / norm) : Vec(Vec::Zero(it->second.size()));
  };
  std::vector<Vec> normal_units;
  normal_units.reserve(normal_ids.size());
  for (const auto& id : normal_ids) normal_units.push_back(unit(id));

  KnnIndex index;
  for (const VideoRecord* r : train) {
    const Vec q = unit(r->video_id);
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(normal_ids.size());
    for (std::size_t i = 0; i < normal_ids.size(); ++i) {
      if (normal_ids[i] == r->video_id) continue;
      scored.emplace_back(q.dot(normal_units[i]), i);
    }
    // normal_ids is sorted, so the index order doubles as the id tie-break.
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    std::vector<std::string> list;
    for (std::size_t i = 0; i < scored.size() && static_cast<int>(i) < n; ++i) {
      list.push_back(normal_ids[scored[i].second]);
    }
    if (static_cast<int>(list.size()) < n) index.truncated = true;
    index.neighbors[r->video_id] = std::move(list);
  }
  if (index.truncated) {
    log_warning("neighbour lists truncated: requested n=" + std::to_string(n) + " but only " +
                std::to_string(normal_ids.size()) + " normal training videos exist");
  }
  return index;
}

KnnIndex build_knn_index(const FeatureRepository& repo, const std::vector<VideoRecord>& manifest, int n) {
  std::unordered_map<std::string, Vec> central;
  for (const auto& r : manifest) {
    if (r.split == Split::kTrain) central[r.video_id] = central_step_feature(repo.read(r.video_id));
  }
  return build_knn_index(manifest, central, n);
}

}  // namespace openvad
