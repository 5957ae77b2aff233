#include "openvad/core.hpp"

#include <algorithm>
#include <atomic>
#include <limits>
#include <cmath>
#include <iostream>
#include <mutex>
#include <numbers>
#include <set>

namespace openvad {

void FeatureSequence::validate(int expected_width) const {
  if (features.rows() < 1) throw ValidationError("feature sequence '" + video_id + "' is empty");
  if (features.cols() < 1) throw ValidationError("feature sequence '" + video_id + "' has zero width");
  if (expected_width >= 0 && features.cols() != expected_width) {
    throw ValidationError("feature sequence '" + video_id + "' has width " +
                          std::to_string(features.cols()) + ", expected " +
                          std::to_string(expected_width));
  }
  if (!features.allFinite()) throw ValidationError("feature sequence '" + video_id + "' has non-finite entries");
  if (stride_frames == 0) throw ValidationError("stride_frames must be positive");
  if (!(fps > 0.0) || !std::isfinite(fps)) throw ValidationError("fps must be positive");
}

AnomalyDefinition::AnomalyDefinition(std::vector<ClassEntry> entries, int normal_index)
    : entries_(std::move(entries)), normal_index_(normal_index) {
  if (entries_.size() < 2) throw ValidationError("definition needs at least two classes");
  if (normal_index_ < 0 || normal_index_ >= static_cast<int>(entries_.size())) {
    throw ValidationError("normal_index out of range");
  }
  std::set<std::string> seen;
  for (const auto& e : entries_) {
    if (e.class_id.empty()) throw ValidationError("class_id must be non-empty");
    if (!seen.insert(e.class_id).second) throw ValidationError("duplicate class_id '" + e.class_id + "'");
    if (!e.embedding && e.prompt_text.empty()) {
      throw ValidationError("class '" + e.class_id + "' needs prompt_text or an embedding");
    }
    if (e.embedding) {
      if (e.embedding->empty()) throw ValidationError("class '" + e.class_id + "' has an empty embedding");
      for (double v : *e.embedding) {
        if (!std::isfinite(v)) throw ValidationError("class '" + e.class_id + "' has a non-finite embedding");
      }
    }
  }
}

std::optional<int> AnomalyDefinition::index_of(std::string_view class_id) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].class_id == class_id) return static_cast<int>(i);
  }
  return std::nullopt;
}

Json AnomalyDefinition::to_json() const {
  Json classes = Json::array();
  for (const auto& e : entries_) {
    Json c = {{"class_id", e.class_id}, {"prompt_text", e.prompt_text}};
    if (e.embedding) c["embedding"] = *e.embedding;
    classes.push_back(std::move(c));
  }
  return Json{{"classes", std::move(classes)}, {"normal_index", normal_index_}};
}

AnomalyDefinition AnomalyDefinition::from_json(const Json& j) {
  if (!j.is_object()) throw ValidationError("definition must be a JSON object");
  if (!j.contains("classes") || !j.at("classes").is_array()) {
    throw ValidationError("definition.classes must be an array");
  }
  if (!j.contains("normal_index") || !j.at("normal_index").is_number_integer()) {
    throw ValidationError("definition.normal_index must be an integer");
  }
  std::vector<ClassEntry> entries;
  for (const auto& c : j.at("classes")) {
    if (!c.is_object()) throw ValidationError("definition.classes entries must be objects");
    ClassEntry e;
    if (!c.contains("class_id") || !c.at("class_id").is_string()) {
      throw ValidationError("definition class needs a string class_id");
    }
    e.class_id = c.at("class_id").get<std::string>();
    if (c.contains("prompt_text")) {
      if (!c.at("prompt_text").is_string()) throw ValidationError("prompt_text must be a string");
      e.prompt_text = c.at("prompt_text").get<std::string>();
    }
    if (c.contains("embedding") && !c.at("embedding").is_null()) {
      if (!c.at("embedding").is_array()) throw ValidationError("embedding must be an array");
      std::vector<double> v;
      for (const auto& x : c.at("embedding")) {
        if (!x.is_number()) throw ValidationError("embedding entries must be numbers");
        v.push_back(x.get<double>());
      }
      e.embedding = std::move(v);
    }
    entries.push_back(std::move(e));
  }
  return AnomalyDefinition(std::move(entries), j.at("normal_index").get<int>());
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ValidationError("unknown split '" + std::string(s) + "'");
}

void VideoRecord::validate() const {
  if (video_id.empty()) throw ValidationError("video_id must be non-empty");
  for (char ch : video_id) {
    const bool ok = std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.';
    if (!ok) throw ValidationError("video_id '" + video_id + "' contains unsupported characters");
  }
  if (label.empty()) throw ValidationError("video '" + video_id + "' has an empty label");
  if (split == Split::kTrain) {
    if (!is_normal() && (!description || description->empty())) {
      throw ValidationError("abnormal training video '" + video_id + "' has no description");
    }
    if (is_normal() && description) {
      throw ValidationError("normal training video '" + video_id + "' must not carry a description");
    }
  }
  if (frame_labels) {
    for (auto v : *frame_labels) {
      if (v > 1) throw ValidationError("frame_labels of '" + video_id + "' must be 0/1");
    }
  }
}

Json VideoRecord::to_json() const {
  Json j = {{"video_id", video_id}, {"split", std::string(to_string(split))}, {"label", label}};
  if (description) j["description"] = *description;
  if (frame_labels) {
    std::vector<int> fl(frame_labels->begin(), frame_labels->end());
    j["frame_labels"] = fl;
  }
  return j;
}

VideoRecord VideoRecord::from_json(const Json& j) {
  if (!j.is_object()) throw ValidationError("record must be a JSON object");
  VideoRecord r;
  auto str = [&](const char* key) -> std::string {
    if (!j.contains(key) || !j.at(key).is_string()) {
      throw ValidationError(std::string("record field '") + key + "' must be a string");
    }
    return j.at(key).get<std::string>();
  };
  r.video_id = str("video_id");
  r.split = parse_split(str("split"));
  r.label = str("label");
  if (j.contains("description") && !j.at("description").is_null()) {
    if (!j.at("description").is_string()) throw ValidationError("description must be a string");
    r.description = j.at("description").get<std::string>();
  }
  if (j.contains("frame_labels") && !j.at("frame_labels").is_null()) {
    if (!j.at("frame_labels").is_array()) throw ValidationError("frame_labels must be an array");
    std::vector<std::uint8_t> fl;
    for (const auto& v : j.at("frame_labels")) {
      if (!v.is_number_integer()) throw ValidationError("frame_labels entries must be integers");
      const int x = v.get<int>();
      if (x != 0 && x != 1) throw ValidationError("frame_labels entries must be 0 or 1");
      fl.push_back(static_cast<std::uint8_t>(x));
    }
    r.frame_labels = std::move(fl);
  }
  r.validate();
  return r;
}

namespace {

std::string_view to_string(LrSchedule s) { return s == LrSchedule::kCosine ? "cosine" : "constant"; }

LrSchedule parse_schedule(std::string_view s) {
  if (s == "constant") return LrSchedule::kConstant;
  if (s == "cosine") return LrSchedule::kCosine;
  throw ValidationError("lr_schedule must be 'constant' or 'cosine'");
}

}  // namespace

Json Config::to_json() const {
  return Json{{"hidden_size", hidden_size},
              {"encoder_layers", encoder_layers},
              {"fusion_layers", fusion_layers},
              {"conv_kernel", conv_kernel},
              {"tau", tau},
              {"eta", eta},
              {"theta", theta},
              {"alpha", alpha},
              {"delta_m", delta_m},
              {"knn_n", knn_n},
              {"batch_size", batch_size},
              {"learning_rate", learning_rate},
              {"epochs", epochs},
              {"topk_divisor", topk_divisor},
              {"mil_align_temperature", mil_align_temperature},
              {"seed", seed},
              {"use_dvs", use_dvs},
              {"use_neg", use_neg},
              {"language_guided", language_guided},
              {"restrict_dvs_third_term_to_m_gt_1", restrict_dvs_third_term_to_m_gt_1},
              {"weight_decay", weight_decay},
              {"grad_clip_norm", grad_clip_norm},
              {"lr_schedule", std::string(to_string(lr_schedule))}};
}

Config Config::from_json(const Json& j) {
  if (!j.is_object()) throw ValidationError("config must be a flat JSON object");
  Config c;
  for (const auto& [key, v] : j.items()) {
    auto need_int = [&]() -> int {
      if (!v.is_number_integer()) throw ValidationError("config field '" + key + "' must be an integer");
      return v.get<int>();
    };
    auto need_num = [&]() -> double {
      if (!v.is_number()) throw ValidationError("config field '" + key + "' must be a number");
      return v.get<double>();
    };
    auto need_bool = [&]() -> bool {
      if (!v.is_boolean()) throw ValidationError("config field '" + key + "' must be a boolean");
      return v.get<bool>();
    };
    if (key == "hidden_size") c.hidden_size = need_int();
    else if (key == "encoder_layers") c.encoder_layers = need_int();
    else if (key == "fusion_layers") c.fusion_layers = need_int();
    else if (key == "conv_kernel") c.conv_kernel = need_int();
    else if (key == "tau") c.tau = need_num();
    else if (key == "eta") c.eta = need_num();
    else if (key == "theta") c.theta = need_num();
    else if (key == "alpha") c.alpha = need_num();
    else if (key == "delta_m") c.delta_m = need_int();
    else if (key == "knn_n") c.knn_n = need_int();
    else if (key == "batch_size") c.batch_size = need_int();
    else if (key == "learning_rate") c.learning_rate = need_num();
    else if (key == "epochs") c.epochs = need_int();
    else if (key == "topk_divisor") c.topk_divisor = need_int();
    else if (key == "mil_align_temperature") c.mil_align_temperature = need_num();
    else if (key == "seed") {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
        throw ValidationError("config field 'seed' must be a non-negative integer");
      }
      c.seed = v.get<std::uint64_t>();
    } else if (key == "use_dvs") c.use_dvs = need_bool();
    else if (key == "use_neg") c.use_neg = need_bool();
    else if (key == "language_guided") c.language_guided = need_bool();
    else if (key == "restrict_dvs_third_term_to_m_gt_1") c.restrict_dvs_third_term_to_m_gt_1 = need_bool();
    else if (key == "weight_decay") c.weight_decay = need_num();
    else if (key == "grad_clip_norm") c.grad_clip_norm = need_num();
    else if (key == "lr_schedule") {
      if (!v.is_string()) throw ValidationError("config field 'lr_schedule' must be a string");
      c.lr_schedule = parse_schedule(v.get<std::string>());
    } else {
      throw ValidationError("unknown config field '" + key + "'");
    }
  }
  return c;
}

Config validate_config(const Config& c) {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ValidationError("config field '" + field + "' " + why);
  };
  if (c.hidden_size < 2 || c.hidden_size % 2 != 0) fail("hidden_size", "must be a positive even integer");
  const int heads = c.num_heads();
  if (c.hidden_size % heads != 0 || (c.hidden_size / heads) % 2 != 0) {
    fail("hidden_size", "must split into heads of even width");
  }
  if (c.encoder_layers < 0) fail("encoder_layers", "must be >= 0");
  if (c.fusion_layers < 0) fail("fusion_layers", "must be >= 0");
  if (c.conv_kernel < 1 || c.conv_kernel % 2 == 0) fail("conv_kernel", "must be a positive odd integer");
  if (!(c.tau > 0.0) || !std::isfinite(c.tau)) fail("tau", "must be > 0");
  if (!(c.eta > 0.0) || !std::isfinite(c.eta)) fail("eta", "must be > 0");
  if (!(c.theta >= 0.0 && c.theta <= 1.0)) fail("theta", "must lie in [0, 1]");
  if (!(c.alpha >= 0.0 && c.alpha <= 1.0)) fail("alpha", "must lie in [0, 1]");
  if (c.delta_m < 1) fail("delta_m", "must be >= 1");
  if (c.knn_n < 1) fail("knn_n", "must be >= 1");
  if (c.batch_size < 1) fail("batch_size", "must be >= 1");
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate)) fail("learning_rate", "must be >= 0");
  if (c.epochs < 0) fail("epochs", "must be >= 0");
  if (c.topk_divisor < 1) fail("topk_divisor", "must be >= 1");
  if (!(c.mil_align_temperature > 0.0)) fail("mil_align_temperature", "must be > 0");
  if (!(c.weight_decay >= 0.0)) fail("weight_decay", "must be >= 0");
  if (!(c.grad_clip_norm >= 0.0)) fail("grad_clip_norm", "must be >= 0");
  return c;
}

int topk_count(int length, int divisor) {
  if (length <= 0) return 0;
  return std::min(length, length / divisor + 1);
}

double Rng::uniform() {
  // 53 random mantissa bits.
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::int64_t Rng::randint(std::int64_t lo, std::int64_t hi) {
  if (hi < lo) throw ValidationError("randint: empty range");
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<std::int64_t>(engine_());
  // Rejection sampling keeps the draw exactly uniform.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % span;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return lo + static_cast<std::int64_t>(x % span);
}

double Rng::normal() {
  if (cached_normal_) {
    const double v = *cached_normal_;
    cached_normal_.reset();
    return v;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * std::numbers::pi * u2;
  cached_normal_ = r * std::sin(a);
  return r * std::cos(a);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view data, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char ch : data) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Rng make_rng(std::uint64_t seed) { return Rng(splitmix64(seed)); }

Rng make_substream(std::uint64_t seed, std::string_view purpose, std::uint64_t index) {
  const std::uint64_t k = splitmix64(splitmix64(seed) ^ fnv1a64(purpose)) ^ splitmix64(index + 0x632be59bd9b4e019ULL);
  return Rng(splitmix64(k));
}

namespace {
std::atomic<bool> g_quiet{false};
std::mutex g_log_mutex;
}  // namespace

void set_log_quiet(bool quiet) { g_quiet = quiet; }

void log_warning(std::string_view message) {
  if (g_quiet) return;
  std::lock_guard<std::mutex> lock(g_log_mutex);
  std::cerr << "[warn] " << message << '\n';
}

void log_info(std::string_view message) {
  if (g_quiet) return;
  std::lock_guard<std::mutex> lock(g_log_mutex);
  std::cerr << "[info] " << message << '\n';
}

}  // namespace openvad
