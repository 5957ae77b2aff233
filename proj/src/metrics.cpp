#include "openvad/metrics.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <numeric>

namespace openvad {

namespace {

void check_lengths(std::size_t a, std::size_t b) {
  if (a != b) throw ValidationError("scores and labels differ in length");
  if (a == 0) throw ValidationError("metric over an empty set");
}

}  // namespace

double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_lengths(scores.size(), labels.size());
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double positive_rank_sum = 0.0;
  double n_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]] != 0) {
        positive_rank_sum += midrank;
        n_pos += 1.0;
      }
    }
    i = j + 1;
  }
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) throw ValidationError("roc_auc needs both positive and negative labels");
  return (positive_rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_lengths(scores.size(), labels.size());
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const double total_pos = static_cast<double>(std::count_if(labels.begin(), labels.end(), [](auto v) { return v != 0; }));
  if (total_pos == 0.0) throw ValidationError("average_precision needs at least one positive label");
  double ap = 0.0;
  double tp = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (labels[order[k]] != 0) {
      tp += 1.0;
      ap += (tp / static_cast<double>(k + 1)) / total_pos;
    }
  }
  return ap;
}

MulticlassMetrics multiclass_metrics(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw ValidationError("predicted and true labels differ in length");
  if (truth.empty()) throw ValidationError("multiclass_metrics over an empty set");
  std::map<int, std::array<double, 3>> counts;  // tp, fp, fn
  double correct = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (predicted[i] == truth[i]) {
      correct += 1.0;
      counts[truth[i]][0] += 1.0;
    } else {
      counts[predicted[i]][1] += 1.0;
      counts[truth[i]][2] += 1.0;
    }
  }
  MulticlassMetrics m;
  m.accuracy = correct / static_cast<double>(truth.size());
  double f1_sum = 0.0;
  int classes = 0;
  for (const auto& [cls, c] : counts) {
    const double support = c[0] + c[2];
    if (support == 0.0) continue;  // only predicted, never true
    ++classes;
    const double precision = c[0] + c[1] > 0.0 ? c[0] / (c[0] + c[1]) : 0.0;
    const double recall = c[0] / support;
    f1_sum += precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  }
  m.macro_f1 = f1_sum / classes;
  return m;
}

std::vector<double> minmax_normalize(std::span<const double> scores) {
  std::vector<double> out(scores.begin(), scores.end());
  if (out.empty()) return out;
  const auto [lo, hi] = std::minmax_element(out.begin(), out.end());
  const double a = *lo;
  const double range = *hi - *lo;
  for (double& v : out) v = range > 0.0 ? (v - a) / range : 0.0;
  return out;
}

std::vector<double> expand_to_frames(std::span<const double> step_scores, int stride_frames, int num_frames) {
  if (step_scores.empty()) throw ValidationError("expand_to_frames: no scores");
  if (stride_frames < 1) throw ValidationError("expand_to_frames: stride must be positive");
  std::vector<double> out(static_cast<std::size_t>(std::max(num_frames, 0)));
  const std::size_t last = step_scores.size() - 1;
  for (std::size_t f = 0; f < out.size(); ++f) {
    out[f] = step_scores[std::min(f / static_cast<std::size_t>(stride_frames), last)];
  }
  return out;
}

}  // namespace openvad
