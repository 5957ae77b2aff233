#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace openvad {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using Json = nlohmann::json;

// Error taxonomy. Everything thrown by the library derives from Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ValidationError : public Error {
 public:
  using Error::Error;
};
class NotFoundError : public Error {
 public:
  using Error::Error;
};
class CorruptionError : public Error {
 public:
  using Error::Error;
};
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Label used for normal videos in manifests and for the normal class id.
inline constexpr std::string_view kNormalLabel = "normal";
inline constexpr std::string_view kDefaultNormalPrompt = "normal scene with ordinary activities";

/// One video as an L x E matrix of per-step embeddings.
struct FeatureSequence {
  std::string video_id;
  Mat features;                 // L x E
  std::uint32_t stride_frames = 8;
  double fps = 30.0;

  int length() const { return static_cast<int>(features.rows()); }
  int width() const { return static_cast<int>(features.cols()); }
  double duration_seconds() const { return length() * static_cast<double>(stride_frames) / fps; }

  // Throws ValidationError on empty, non-finite or width-mismatched data.
  // expected_width < 0 skips the width check.
  void validate(int expected_width = -1) const;
};

struct ClassEntry {
  std::string class_id;
  std::string prompt_text;
  std::optional<std::vector<double>> embedding;
};

/// The set of classes a user considers (one of them normal) at scoring time.
class AnomalyDefinition {
 public:
  AnomalyDefinition() = default;
  AnomalyDefinition(std::vector<ClassEntry> entries, int normal_index);

  const std::vector<ClassEntry>& entries() const { return entries_; }
  const ClassEntry& entry(int i) const { return entries_.at(static_cast<std::size_t>(i)); }
  int normal_index() const { return normal_index_; }
  int size() const { return static_cast<int>(entries_.size()); }
  std::optional<int> index_of(std::string_view class_id) const;

  Json to_json() const;
  static AnomalyDefinition from_json(const Json& j);

 private:
  std::vector<ClassEntry> entries_;
  int normal_index_ = 0;
};

enum class Split { kTrain, kVal, kTest };
std::string_view to_string(Split s);
Split parse_split(std::string_view s);

/// One manifest row.
struct VideoRecord {
  std::string video_id;
  Split split = Split::kTrain;
  std::string label;  // class id, or kNormalLabel
  std::optional<std::string> description;
  std::optional<std::vector<std::uint8_t>> frame_labels;

  bool is_normal() const { return label == kNormalLabel; }
  void validate() const;
  Json to_json() const;
  static VideoRecord from_json(const Json& j);
};

enum class LrSchedule { kConstant, kCosine };

/// Hyperparameters for the whole pipeline. Serialized as flat JSON.
struct Config {
  int hidden_size = 512;
  int encoder_layers = 2;
  int fusion_layers = 2;
  int conv_kernel = 9;
  double tau = 0.02;
  double eta = 0.02;
  double theta = 0.7;
  double alpha = 0.5;
  int delta_m = 5;
  int knn_n = 200;
  int batch_size = 64;
  double learning_rate = 5e-5;
  int epochs = 40;
  int topk_divisor = 16;
  double mil_align_temperature = 0.07;
  std::uint64_t seed = 0;
  bool use_dvs = true;
  bool use_neg = true;
  bool language_guided = true;
  bool restrict_dvs_third_term_to_m_gt_1 = false;
  double weight_decay = 0.01;
  double grad_clip_norm = 0.0;  // 0 disables clipping
  LrSchedule lr_schedule = LrSchedule::kConstant;

  int num_heads() const { return hidden_size / 64 >= 1 ? hidden_size / 64 : 1; }

  Json to_json() const;
  // Missing keys keep their defaults; unknown keys are rejected.
  static Config from_json(const Json& j);
};

/// Returns c unchanged, or throws ValidationError naming the first bad field.
Config validate_config(const Config& c);

/// Top-k size used by every top-k aggregation: floor(L / divisor) + 1, capped at L.
int topk_count(int length, int divisor);

struct ScoreResult {
  Vec y_bin;               // L, pre-sigmoid
  Mat y_mul;               // L x C
  Vec video_class_probs;   // C
  AnomalyDefinition definition_used;
};

/// Deterministic random stream. Distributions are implemented here rather than
/// with <random> distributions so that draws are identical across standard
/// library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();                              // [0, 1)
  double uniform(double lo, double hi);          // [lo, hi)
  std::int64_t randint(std::int64_t lo, std::int64_t hi);  // inclusive on both ends
  bool bernoulli(double p) { return uniform() < p; }
  double normal();                               // standard normal

 private:
  std::mt19937_64 engine_;
  std::optional<double> cached_normal_;
};

Rng make_rng(std::uint64_t seed);
/// Independent stream keyed by (seed, purpose, index); used for step-keyed and
/// per-worker streams.
Rng make_substream(std::uint64_t seed, std::string_view purpose, std::uint64_t index);

std::uint64_t fnv1a64(std::string_view data, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::uint64_t splitmix64(std::uint64_t x);

void log_warning(std::string_view message);
void log_info(std::string_view message);
/// Silences info and warning output (used by tests and the Python bindings).
void set_log_quiet(bool quiet);

}  // namespace openvad
