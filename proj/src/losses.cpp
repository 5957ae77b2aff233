#include "openvad/losses.hpp"

namespace openvad {

namespace {

using ad::Var;

constexpr double kLogLo = 1e-8;
constexpr double kLogHi = 1.0 - 1e-8;

std::vector<int> valid_indices(int length, std::span<const std::uint8_t> mask) {
  if (!mask.empty() && static_cast<int>(mask.size()) != length) throw ValidationError("mask length mismatch");
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(length));
  for (int i = 0; i < length; ++i) {
    if (mask.empty() || mask[static_cast<std::size_t>(i)] != 0) idx.push_back(i);
  }
  if (idx.empty()) throw ValidationError("loss needs at least one valid step");
  return idx;
}

Var select_valid(Var x, const std::vector<int>& idx) {
  if (static_cast<int>(idx.size()) == x.rows()) return x;
  return ad::gather_rows(x, idx);
}

Var one_minus(Var x) { return ad::add_scalar(ad::scale(x, -1.0), 1.0); }

Var neg_log(Var x) { return ad::scale(ad::log_clamped(x, kLogLo, kLogHi), -1.0); }

}  // namespace

Var mil_loss(Var y_bin, int video_label, std::span<const std::uint8_t> mask, int topk_divisor) {
  if (y_bin.cols() != 1) throw ValidationError("mil_loss: y_bin must be L x 1");
  if (video_label != 0 && video_label != 1) throw ValidationError("mil_loss: label must be 0 or 1");
  const auto idx = valid_indices(y_bin.rows(), mask);
  const int k = topk_count(static_cast<int>(idx.size()), topk_divisor);
  Var s = ad::topk_mean_cols(ad::sigmoid(select_valid(y_bin, idx)), k);
  return video_label == 1 ? neg_log(s) : neg_log(one_minus(s));
}

Var mil_align_loss(Var y_mul, int class_index, std::span<const std::uint8_t> mask, double temperature,
                   int topk_divisor) {
  if (y_mul.cols() < 2) throw ValidationError("mil_align_loss needs at least two classes");
  if (class_index < 0 || class_index >= y_mul.cols()) throw ValidationError("mil_align_loss: invalid class index");
  if (!(temperature > 0.0)) throw ValidationError("mil_align_loss: temperature must be > 0");
  const auto idx = valid_indices(y_mul.rows(), mask);
  const int k = topk_count(static_cast<int>(idx.size()), topk_divisor);
  Var logits = ad::scale(ad::topk_mean_cols(select_valid(y_mul, idx), k), 1.0 / temperature);
  return ad::logsumexp_rows(logits) - ad::element(logits, 0, class_index);
}

Var dvs_loss(Var y_bin, std::span<const std::uint8_t> pseudo_label, int video_label,
             std::span<const std::uint8_t> mask, int topk_divisor, bool include_pseudo_term) {
  if (y_bin.cols() != 1) throw ValidationError("dvs_loss: y_bin must be L x 1");
  if (static_cast<int>(pseudo_label.size()) != y_bin.rows()) throw ValidationError("dvs_loss: pseudo-label length mismatch");
  if (video_label != 0 && video_label != 1) throw ValidationError("dvs_loss: label must be 0 or 1");
  const auto idx = valid_indices(y_bin.rows(), mask);
  const int valid = static_cast<int>(idx.size());
  const int k = topk_count(valid, topk_divisor);
  Var scores = ad::sigmoid(y_bin);

  std::vector<int> positive;
  for (int i : idx) {
    if (pseudo_label[static_cast<std::size_t>(i)] != 0) positive.push_back(i);
  }

  Var loss;
  if (video_label == 1) {
    if (positive.empty()) throw ValidationError("dvs_loss: abnormal sample has an all-zero pseudo-label");
    const int ka = std::min(k, static_cast<int>(positive.size()));
    loss = neg_log(ad::topk_mean_cols(ad::gather_rows(scores, positive), ka));
  } else {
    loss = neg_log(one_minus(ad::topk_mean_cols(select_valid(scores, idx), k)));
  }
  if (include_pseudo_term && !positive.empty()) {
    Var logs = ad::log_clamped(ad::gather_rows(scores, positive), kLogLo, kLogHi);
    loss = loss + ad::scale(ad::sum(logs), -1.0 / valid);
  }
  return loss;
}

PosNeg aggregate_pos_neg(Var v_t, Var y_bin, double eta, std::span<const std::uint8_t> mask) {
  if (y_bin.cols() != 1 || y_bin.rows() != v_t.rows()) throw ValidationError("aggregate_pos_neg: shape mismatch");
  if (!(eta > 0.0)) throw ValidationError("aggregate_pos_neg: eta must be > 0");
  const auto idx = valid_indices(v_t.rows(), mask);
  Var feats = select_valid(v_t, idx);
  Var scores = ad::transpose(select_valid(y_bin, idx));  // 1 x L
  Var w_pos = ad::softmax_rows(ad::scale(scores, 1.0 / eta));
  Var w_neg = ad::softmax_rows(ad::scale(scores, -1.0 / eta));
  return {ad::matmul(w_pos, feats), ad::matmul(w_neg, feats)};
}

Var contrastive_neg_loss(std::span<const Var> abnormal_pos, std::span<const Var> normal_pos,
                         std::span<const Var> abnormal_neg, Var texts, double tau) {
  const int b2 = static_cast<int>(abnormal_pos.size());
  if (!(tau > 0.0)) throw ValidationError("contrastive_neg_loss: tau must be > 0");
  if (b2 == 0) return texts.tape->constant(Mat::Zero(1, 1));
  if (static_cast<int>(abnormal_neg.size()) != b2 || texts.rows() != b2) {
    throw ValidationError("contrastive_neg_loss: abnormal rows and texts must align");
  }
  std::vector<Var> rows_v;
  rows_v.insert(rows_v.end(), abnormal_pos.begin(), abnormal_pos.end());
  rows_v.insert(rows_v.end(), normal_pos.begin(), normal_pos.end());
  rows_v.insert(rows_v.end(), abnormal_neg.begin(), abnormal_neg.end());
  Var videos = ad::row_normalize(ad::concat_rows(rows_v));       // (B1 + B2) x H
  Var text = ad::row_normalize(texts);                            // B2 x H
  Var logits = ad::scale(ad::matmul_nt(videos, text), 1.0 / tau);  // S / tau
  Var positives = ad::diag(logits);                               // S_ii / tau
  // text -> video: softmax over all video rows for each text column.
  Var t2v = ad::sum(ad::logsumexp_rows(ad::transpose(logits)) - positives);
  // video -> text: the abnormal positive rows against every text.
  Var v2t = ad::sum(ad::logsumexp_rows(ad::rows(logits, 0, b2)) - positives);
  return t2v + v2t;
}

LossBreakdown total_loss(const BatchViews& batch, const Config& cfg) {
  if (batch.samples.empty()) throw ValidationError("total_loss: empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch.samples.size());
  std::vector<Var> mil_terms, align_terms, dvs_terms;
  std::vector<Var> abnormal_pos, normal_pos, abnormal_neg;
  std::vector<int> text_rows;
  for (const SampleViews& s : batch.samples) {
    mil_terms.push_back(mil_loss(s.y_bin, s.video_label, s.mask, cfg.topk_divisor));
    align_terms.push_back(mil_align_loss(s.y_mul, s.class_index, s.mask, cfg.mil_align_temperature, cfg.topk_divisor));
    if (cfg.use_dvs) {
      const bool pseudo_term = !(cfg.restrict_dvs_third_term_to_m_gt_1 && s.segment_count == 1);
      dvs_terms.push_back(dvs_loss(s.y_bin, s.pseudo_label, s.video_label, s.mask, cfg.topk_divisor, pseudo_term));
    }
    if (cfg.use_neg) {
      PosNeg pn = aggregate_pos_neg(s.v_t, s.y_bin, cfg.eta, s.mask);
      if (s.video_label == 1) {
        if (s.text_index < 0) throw ValidationError("total_loss: abnormal sample without a text row");
        abnormal_pos.push_back(pn.pos);
        abnormal_neg.push_back(pn.neg);
        text_rows.push_back(s.text_index);
      } else {
        normal_pos.push_back(pn.pos);
      }
    }
  }
  auto batch_mean = [&](const std::vector<Var>& terms) { return ad::scale(ad::sum(ad::concat_rows(terms)), inv_b); };

  LossBreakdown out;
  Var mil = batch_mean(mil_terms);
  Var align = batch_mean(align_terms);
  Var total = mil + align;
  out.mil = mil.scalar();
  out.align = align.scalar();
  if (cfg.use_dvs) {
    Var dvs = batch_mean(dvs_terms);
    out.dvs = dvs.scalar();
    total = total + dvs;
  }
  if (cfg.use_neg && !abnormal_pos.empty()) {
    Var texts = ad::gather_rows(batch.z_t, text_rows);
    Var neg = contrastive_neg_loss(abnormal_pos, normal_pos, abnormal_neg, texts, cfg.tau);
    out.neg = neg.scalar();
    total = total + neg;
  }
  out.total = total;
  out.total_value = total.scalar();
  return out;
}

}  // namespace openvad
