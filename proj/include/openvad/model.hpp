#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "openvad/autodiff.hpp"
#include "openvad/core.hpp"
#include "openvad/text_encoder.hpp"

namespace openvad {

/// Named dense tensors. Insertion order is the canonical order used for
/// checkpoints, optimizer state and gradient reductions.
class ParameterSet {
 public:
  void add(std::string name, Mat value);
  Mat& at(const std::string& name);
  const Mat& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.contains(name); }
  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Mat& value(std::size_t i) { return values_[i]; }
  const Mat& value(std::size_t i) const { return values_[i]; }
  std::size_t index_of(const std::string& name) const;
  std::size_t scalar_count() const;

  /// Same names and shapes, all zeros.
  ParameterSet zeros_like() const;
  void set_zero();
  bool all_finite() const;

 private:
  std::vector<std::string> names_;
  std::vector<Mat> values_;
  std::map<std::string, std::size_t> index_;
};

/// Parameters placed on a tape for one forward pass.
class BoundParameters {
 public:
  /// grads == nullptr binds every tensor as a constant (inference).
  BoundParameters(ad::Tape& tape, const ParameterSet& params, ParameterSet* grads);
  ad::Var operator[](const std::string& name) const;
  ad::Tape& tape() const { return *tape_; }

 private:
  ad::Tape* tape_;
  const ParameterSet* params_;
  std::vector<ad::Var> vars_;
};

/// Architecture: input projection (shared by both modalities) when the
/// embedding width differs from hidden_size, a pre-norm Transformer temporal
/// encoder with rotary position encoding, co-attention fusion, a gated pair of
/// 1-D convolutional detection heads and a cosine-similarity classification
/// head.
class Model {
 public:
  Model() = default;
  /// Random initialization drawn from make_substream(seed, "model.init", 0).
  Model(const Config& cfg, int embed_dim, std::uint64_t seed);

  const Config& config() const { return cfg_; }
  int embed_dim() const { return embed_dim_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  bool has_input_projection() const { return embed_dim_ != cfg_.hidden_size; }

  /// Shapes only, zero-filled (used when loading checkpoints).
  static Model empty(const Config& cfg, int embed_dim);

 private:
  Config cfg_;
  int embed_dim_ = 0;
  ParameterSet params_;
};

/// Parameter count as a pure function of the configuration.
std::size_t parameter_count(const Config& cfg, int embed_dim);

struct ForwardResult {
  ad::Var v_t;    // L x H, pre-fusion video features
  ad::Var v_u;    // L x H, fused video features
  ad::Var z_t;    // C x H, pre-fusion text features
  ad::Var z_u;    // C x H
  ad::Var y_bin;  // L x 1 logits
  ad::Var y_mul;  // L x C cosine similarities
};

/// Validates a padding mask: ones followed by zeros, at least one valid step.
/// Returns the number of valid steps.
int valid_prefix_length(std::span<const std::uint8_t> mask);

/// Projects raw text embeddings (C x E) into the hidden width.
ad::Var encode_text(const BoundParameters& p, const Model& model, const Mat& text_embeddings);
/// Input projection followed by the temporal encoder. Rows where mask is 0 do
/// not take part in attention and come out as zeros. Empty mask = all valid.
ad::Var encode_video(const BoundParameters& p, const Model& model, const Mat& features,
                     std::span<const std::uint8_t> mask = {});
struct Fused {
  ad::Var video;
  ad::Var text;
};
Fused fuse(const BoundParameters& p, const Model& model, ad::Var v_t, ad::Var z_t);
/// Gated mixture sigmoid(g) * conv_post(v_u) + (1 - sigmoid(g)) * conv_pre(v_t).
ad::Var detect(const BoundParameters& p, const Model& model, ad::Var v_t, ad::Var v_u);
/// Language-agnostic pathway only.
ad::Var detect_pre(const BoundParameters& p, const Model& model, ad::Var v_t);
ad::Var classify(const BoundParameters& p, ad::Var v_u, ad::Var z_u);

/// 1-D convolution over time with replicate padding; weight is (K*H) x 1.
ad::Var conv1d_replicate(ad::Var x, ad::Var weight, ad::Var bias, int kernel);

ForwardResult forward(const BoundParameters& p, const Model& model, const Mat& features,
                      const Mat& text_embeddings, std::span<const std::uint8_t> mask = {});
/// Same, with text features already encoded (shared across a batch).
ForwardResult forward_with_text(const BoundParameters& p, const Model& model, const Mat& features, ad::Var z_t,
                                std::span<const std::uint8_t> mask = {});

/// Softmax over [max_t y_mul(t, c) for abnormal c, min_t y_mul(t, normal)].
Vec video_class_probs(const Mat& y_mul, const AnomalyDefinition& definition);

/// Inference convenience wrapper.
ScoreResult score_video(const Model& model, const TextEncoder& encoder, const FeatureSequence& seq,
                        const AnomalyDefinition& definition);

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: char[4] "OVCK", u32 version, u64 config hash, u32 header length,
// JSON header {config, embed_dim, params: [{name, rows, cols, offset}], extra},
// then little-endian f32 payload (offsets in floats).

std::uint64_t config_hash(const Config& cfg, int embed_dim);

struct Checkpoint {
  Model model;
  std::uint64_t hash = 0;
  Json extra = Json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Model& model, const Json& extra = Json::object(),
                     const ParameterSet* extra_tensors = nullptr, const std::string& extra_prefix = "");
/// expected == nullptr accepts whatever configuration the file declares.
/// Otherwise a hash mismatch throws ValidationError unless force is set.
Checkpoint load_checkpoint(const std::filesystem::path& path, const Config* expected = nullptr,
                           int expected_embed_dim = -1, bool force = false);
/// Tensors stored under a prefix (e.g. optimizer moments).
ParameterSet load_checkpoint_tensors(const std::filesystem::path& path, const std::string& prefix);

}  // namespace openvad
