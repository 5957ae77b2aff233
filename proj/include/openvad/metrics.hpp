#pragma once

#include <span>
#include <vector>

#include "openvad/core.hpp"

namespace openvad {

/// Area under the ROC curve with midrank tie handling, i.e.
/// P(score+ > score-) + 0.5 * P(tie). Throws if only one class is present.
double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Sum over ranks of (R_k - R_{k-1}) * P_k, ranking by descending score and
/// then ascending index. Throws if there are no positives.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct MulticlassMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;  // averaged over classes present in the truth
};
MulticlassMetrics multiclass_metrics(std::span<const int> predicted, std::span<const int> truth);

/// Affine map of the scores onto [0, 1]; constant input maps to all zeros.
std::vector<double> minmax_normalize(std::span<const double> scores);

/// Repeats each feature-step score over its stride_frames source frames. The
/// last score also covers any trailing partial window, so the output always has
/// num_frames entries.
std::vector<double> expand_to_frames(std::span<const double> step_scores, int stride_frames, int num_frames);

}  // namespace openvad
