#pragma once

#include <filesystem>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "openvad/core.hpp"
#include "openvad/data.hpp"
#include "openvad/losses.hpp"
#include "openvad/model.hpp"
#include "openvad/synthesis.hpp"
#include "openvad/text_encoder.hpp"

namespace openvad {

enum class DefinitionMode { kClassName, kDescription };
std::string_view to_string(DefinitionMode m);

/// One training batch: synthesized samples, the definition they are scored
/// against and per-sample targets.
struct TrainBatch {
  std::vector<SynthesizedSample> samples;
  AnomalyDefinition definition;
  DefinitionMode mode = DefinitionMode::kClassName;
  std::vector<int> class_index;  // target column of y_mul per sample
  std::vector<int> text_index;   // definition row paired with an abnormal sample, -1 for normal
  int max_length = 0;
  std::vector<Mat> features;                     // zero-padded to max_length
  std::vector<std::vector<std::uint8_t>> masks;  // 1 = valid step

  /// Compact description used in logs and numeric-failure dumps.
  Json composition() const;
};

/// Draws batch_size synthesized samples, then flips one fair coin for the
/// definition mode. Class-name mode scores against the taxonomy; description
/// mode scores against the batch's distinct abnormal descriptions plus normal.
TrainBatch sample_batch(const VideoPool& pool, const KnnIndex& knn, const AnomalyDefinition& taxonomy,
                        const Config& cfg, Rng& rng);

/// AdamW with decoupled weight decay applied to every tensor.
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  ParameterSet m;
  ParameterSet v;
  long long t = 0;

  void init(const ParameterSet& params);
  void update(ParameterSet& params, const ParameterSet& grads, double lr, double weight_decay);
};

struct TrainState {
  Model model;
  AdamW optimizer;
  int epoch = 0;        // completed epochs
  long long step = 0;   // completed optimizer steps
  double best_metric = -std::numeric_limits<double>::infinity();
  int best_epoch = -1;

  static TrainState initial(const Config& cfg, int embed_dim);
  void save(const std::filesystem::path& path) const;
  static TrainState load(const std::filesystem::path& path, const Config* expected = nullptr);
};

struct StepResult {
  double total = 0.0;
  double mil = 0.0;
  double align = 0.0;
  double dvs = 0.0;
  double neg = 0.0;
  double grad_norm = 0.0;
};

/// Gradients of total_loss for one batch, accumulated into grads (zeroed first).
/// Loss flags come from cfg; the architecture from the model.
StepResult compute_gradients(const Model& model, const TextEncoder& encoder, const TrainBatch& batch,
                             const Config& cfg, ParameterSet& grads);

/// One optimizer update. Throws NumericError (with the batch composition in
/// the message) when the loss or a gradient is not finite.
StepResult train_step(TrainState& state, const TextEncoder& encoder, const TrainBatch& batch, const Config& cfg,
                      double lr);

/// Learning rate at a given step under the configured schedule.
double learning_rate_at(const Config& cfg, long long step, long long total_steps);

struct ValidationMetrics {
  double frame_auc = std::numeric_limits<double>::quiet_NaN();  // NaN when labels are unavailable
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  int videos = 0;
};

/// Frame AUC at feature-step granularity and video-level classification
/// accuracy against a definition whose class ids match the manifest labels.
ValidationMetrics validate_model(const Model& model, const TextEncoder& encoder,
                                 const std::vector<TrainingVideo>& videos, const AnomalyDefinition& definition);

struct FitOptions {
  std::filesystem::path output_dir;  // empty = keep everything in memory
  std::ostream* log = nullptr;       // JSONL training log
  bool resume = false;               // continue from output_dir/last.ckpt when present
};

struct FitResult {
  Model best_model;
  Model last_model;
  double best_metric = std::numeric_limits<double>::quiet_NaN();
  int best_epoch = -1;
  long long steps = 0;
  std::vector<StepResult> history;
};

/// epochs x ceil(N_train / batch_size) steps. The batch stream for step s is
/// make_substream(seed, "batch", s), so resumed runs see the same batches.
FitResult fit(const VideoPool& pool, const KnnIndex& knn, const std::vector<TrainingVideo>& val_videos,
              const TextEncoder& encoder, const Config& cfg, const FitOptions& options = {});

/// Convenience wrapper reading everything from a dataset directory laid out by
/// write_dataset.
FitResult fit_directory(const std::filesystem::path& dataset_dir, const Config& cfg, const FitOptions& options = {});

}  // namespace openvad
