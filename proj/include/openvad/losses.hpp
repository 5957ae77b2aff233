#pragma once

#include <span>
#include <vector>

#include "openvad/autodiff.hpp"
#include "openvad/core.hpp"

namespace openvad {

// All losses take an optional per-step mask (1 = valid). An empty mask means
// every step is valid. Log arguments are clamped to [1e-8, 1 - 1e-8].

/// Top-k MIL binary cross-entropy on the mean of the k largest sigmoid scores.
ad::Var mil_loss(ad::Var y_bin, int video_label, std::span<const std::uint8_t> mask, int topk_divisor);

/// Cross-entropy of softmax(s / temperature) against class_index, where s_c is
/// the mean of the top-k entries of column c.
ad::Var mil_align_loss(ad::Var y_mul, int class_index, std::span<const std::uint8_t> mask, double temperature,
                       int topk_divisor);

/// Synthesis loss: restricted top-k term for abnormal samples, plain top-k
/// term for normal samples, plus the per-step pseudo-label term (skipped when
/// include_pseudo_term is false).
ad::Var dvs_loss(ad::Var y_bin, std::span<const std::uint8_t> pseudo_label, int video_label,
                 std::span<const std::uint8_t> mask, int topk_divisor, bool include_pseudo_term = true);

struct PosNeg {
  ad::Var pos;  // 1 x H
  ad::Var neg;  // 1 x H
};
/// Score-weighted foreground/background aggregation of v_t with weights
/// softmax(+-y_bin / eta) over valid steps.
PosNeg aggregate_pos_neg(ad::Var v_t, ad::Var y_bin, double eta, std::span<const std::uint8_t> mask);

/// Symmetric contrastive loss with hard negatives. texts holds one row per
/// abnormal sample (B2 x H). Rows of the video matrix are ordered
/// [abnormal_pos | normal_pos | abnormal_neg]. Returns 0 when B2 = 0.
ad::Var contrastive_neg_loss(std::span<const ad::Var> abnormal_pos, std::span<const ad::Var> normal_pos,
                             std::span<const ad::Var> abnormal_neg, ad::Var texts, double tau);

/// Per-sample tensors feeding the batch losses.
struct SampleViews {
  ad::Var y_bin;  // L x 1
  ad::Var y_mul;  // L x C
  ad::Var v_t;    // L x H
  std::vector<std::uint8_t> mask;
  std::vector<std::uint8_t> pseudo_label;
  int video_label = 0;
  int class_index = 0;   // target column of y_mul
  int text_index = -1;   // row of z_t paired with this sample in the contrastive loss (abnormal only)
  int segment_count = 1;
};

struct BatchViews {
  std::vector<SampleViews> samples;
  ad::Var z_t;  // C x H, pre-fusion text features
};

struct LossBreakdown {
  ad::Var total;
  double total_value = 0.0;
  double mil = 0.0;
  double align = 0.0;
  double dvs = 0.0;
  double neg = 0.0;
};

/// Unweighted sum of the four objectives. MIL, MIL-align and synthesis terms
/// are averaged over the batch; the contrastive term is summed as written.
LossBreakdown total_loss(const BatchViews& batch, const Config& cfg);

}  // namespace openvad
