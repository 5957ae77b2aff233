#include "openvad/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace openvad {

// ---------------------------------------------------------------------------
// ParameterSet

void ParameterSet::add(std::string name, Mat value) {
  if (index_.contains(name)) throw ValidationError("duplicate parameter '" + name + "'");
  index_[name] = names_.size();
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

std::size_t ParameterSet::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw NotFoundError("unknown parameter '" + name + "'");
  return it->second;
}

Mat& ParameterSet::at(const std::string& name) { return values_[index_of(name)]; }
const Mat& ParameterSet::at(const std::string& name) const { return values_[index_of(name)]; }

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

ParameterSet ParameterSet::zeros_like() const {
  ParameterSet z;
  for (std::size_t i = 0; i < names_.size(); ++i) z.add(names_[i], Mat::Zero(values_[i].rows(), values_[i].cols()));
  return z;
}

void ParameterSet::set_zero() {
  for (auto& v : values_) v.setZero();
}

bool ParameterSet::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](const Mat& m) { return m.allFinite(); });
}

BoundParameters::BoundParameters(ad::Tape& tape, const ParameterSet& params, ParameterSet* grads)
    : tape_(&tape), params_(&params) {
  vars_.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    vars_.push_back(tape.param(params.value(i), grads ? &grads->value(i) : nullptr));
  }
}

ad::Var BoundParameters::operator[](const std::string& name) const { return vars_[params_->index_of(name)]; }

// ---------------------------------------------------------------------------
// Layout and initialization

namespace {

enum class Init { kFanIn, kSmall, kZero, kOne, kInput };

using ShapeVisitor = std::function<void(const std::string& name, int rows, int cols, Init init)>;

void visit_layout(const Config& cfg, int embed_dim, const ShapeVisitor& visit) {
  const int h = cfg.hidden_size;
  const int ff = 4 * h;
  if (embed_dim != h) {
    visit("input.weight", embed_dim, h, Init::kInput);
    visit("input.bias", 1, h, Init::kZero);
  }
  auto norm = [&](const std::string& prefix) {
    visit(prefix + ".gamma", 1, h, Init::kOne);
    visit(prefix + ".beta", 1, h, Init::kZero);
  };
  auto attn = [&](const std::string& prefix) {
    visit(prefix + ".wq", h, h, Init::kFanIn);
    visit(prefix + ".wk", h, h, Init::kFanIn);
    visit(prefix + ".wv", h, h, Init::kFanIn);
    visit(prefix + ".wo", h, h, Init::kSmall);
  };
  auto ffn = [&](const std::string& prefix) {
    visit(prefix + ".w1", h, ff, Init::kFanIn);
    visit(prefix + ".b1", 1, ff, Init::kZero);
    visit(prefix + ".w2", ff, h, Init::kSmall);
    visit(prefix + ".b2", 1, h, Init::kZero);
  };
  for (int l = 0; l < cfg.encoder_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    norm(p + ".ln_attn");
    attn(p + ".attn");
    norm(p + ".ln_ffn");
    ffn(p + ".ffn");
  }
  for (int l = 0; l < cfg.fusion_layers; ++l) {
    for (const char* branch : {"video", "text"}) {
      const std::string p = "fusion." + std::to_string(l) + "." + branch;
      norm(p + ".ln_query");
      norm(p + ".ln_context");
      attn(p + ".attn");
      norm(p + ".ln_ffn");
      ffn(p + ".ffn");
    }
  }
  visit("detect.pre.weight", cfg.conv_kernel * h, 1, Init::kFanIn);
  visit("detect.pre.bias", 1, 1, Init::kZero);
  visit("detect.post.weight", cfg.conv_kernel * h, 1, Init::kFanIn);
  visit("detect.post.bias", 1, 1, Init::kZero);
  visit("detect.gate", 1, 1, Init::kZero);
  visit("classify.video_proj", h, h, Init::kFanIn);
  visit("classify.text_proj", h, h, Init::kFanIn);
}

constexpr double kSmallInitStd = 0.02;

}  // namespace

std::size_t parameter_count(const Config& cfg, int embed_dim) {
  std::size_t n = 0;
  visit_layout(cfg, embed_dim, [&](const std::string&, int r, int c, Init) { n += static_cast<std::size_t>(r) * c; });
  return n;
}

Model Model::empty(const Config& cfg, int embed_dim) {
  validate_config(cfg);
  if (embed_dim < 1) throw ValidationError("embedding width must be positive");
  Model m;
  m.cfg_ = cfg;
  m.embed_dim_ = embed_dim;
  visit_layout(cfg, embed_dim, [&](const std::string& name, int r, int c, Init) { m.params_.add(name, Mat::Zero(r, c)); });
  return m;
}

Model::Model(const Config& cfg, int embed_dim, std::uint64_t seed) : Model(empty(cfg, embed_dim)) {
  Rng rng = make_substream(seed, "model.init", 0);
  visit_layout(cfg, embed_dim, [&](const std::string& name, int r, int c, Init init) {
    Mat& w = params_.at(name);
    double std = 0.0;
    switch (init) {
      case Init::kZero: return;
      case Init::kOne: w.setOnes(); return;
      case Init::kInput:
      case Init::kFanIn: std = 1.0 / std::sqrt(static_cast<double>(r)); break;
      case Init::kSmall: std = kSmallInitStd; break;
    }
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = std * rng.normal();
    (void)c;
  });
  // Both classification projections start identical so that the two
  // modalities share one similarity geometry at initialization.
  params_.at("classify.text_proj") = params_.at("classify.video_proj");
}

// ---------------------------------------------------------------------------
// Building blocks

namespace {

using ad::Var;

Var linear(const BoundParameters& p, Var x, const std::string& w) { return ad::matmul(x, p[w]); }

Var attention(const BoundParameters& p, const std::string& prefix, Var query, Var context, int heads, bool rotary) {
  Var q = linear(p, query, prefix + ".wq");
  Var k = linear(p, context, prefix + ".wk");
  Var v = linear(p, context, prefix + ".wv");
  if (rotary) {
    q = ad::rope(q, heads);
    k = ad::rope(k, heads);
  }
  const int width = q.cols();
  const int d = width / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var qh = ad::cols(q, h * d, d);
    Var kh = ad::cols(k, h * d, d);
    Var vh = ad::cols(v, h * d, d);
    Var weights = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt_d));
    outs.push_back(ad::matmul(weights, vh));
  }
  return linear(p, ad::concat_cols(outs), prefix + ".wo");
}

Var feed_forward(const BoundParameters& p, const std::string& prefix, Var x) {
  Var h = ad::gelu(ad::add_row(linear(p, x, prefix + ".w1"), p[prefix + ".b1"]));
  return ad::add_row(linear(p, h, prefix + ".w2"), p[prefix + ".b2"]);
}

Var norm(const BoundParameters& p, const std::string& prefix, Var x) {
  return ad::layer_norm(x, p[prefix + ".gamma"], p[prefix + ".beta"]);
}

Var project_input(const BoundParameters& p, const Model& model, Var x) {
  if (!model.has_input_projection()) return x;
  return ad::add_row(ad::matmul(x, p["input.weight"]), p["input.bias"]);
}

Var pad_rows(Var x, int total_rows) {
  if (x.rows() == total_rows) return x;
  ad::Tape& t = *x.tape;
  Var zeros = t.constant(Mat::Zero(total_rows - x.rows(), x.cols()));
  std::vector<Var> parts{x, zeros};
  return ad::concat_rows(parts);
}

}  // namespace

int valid_prefix_length(std::span<const std::uint8_t> mask) {
  int n = 0;
  while (n < static_cast<int>(mask.size()) && mask[static_cast<std::size_t>(n)] != 0) ++n;
  for (std::size_t i = static_cast<std::size_t>(n); i < mask.size(); ++i) {
    if (mask[i] != 0) throw ValidationError("padding mask must be a run of ones followed by zeros");
  }
  if (n == 0) throw ValidationError("padding mask has no valid steps");
  return n;
}

Var encode_text(const BoundParameters& p, const Model& model, const Mat& text_embeddings) {
  if (text_embeddings.cols() != model.embed_dim()) throw ValidationError("text embedding width mismatch");
  if (text_embeddings.rows() < 1) throw ValidationError("definition has no classes");
  return project_input(p, model, p.tape().constant(text_embeddings));
}

namespace {

Var encode_video_valid(const BoundParameters& p, const Model& model, const Mat& features) {
  const Config& cfg = model.config();
  Var x = project_input(p, model, p.tape().constant(features));
  for (int l = 0; l < cfg.encoder_layers; ++l) {
    const std::string prefix = "encoder." + std::to_string(l);
    Var h = norm(p, prefix + ".ln_attn", x);
    x = x + attention(p, prefix + ".attn", h, h, cfg.num_heads(), /*rotary=*/true);
    x = x + feed_forward(p, prefix + ".ffn", norm(p, prefix + ".ln_ffn", x));
  }
  return x;
}

int checked_valid_length(const Mat& features, std::span<const std::uint8_t> mask, int embed_dim) {
  if (features.rows() < 1) throw ValidationError("video has no feature steps");
  if (features.cols() != embed_dim) throw ValidationError("video feature width mismatch");
  if (!features.allFinite()) throw ValidationError("video features contain non-finite values");
  if (mask.empty()) return static_cast<int>(features.rows());
  if (static_cast<Eigen::Index>(mask.size()) != features.rows()) throw ValidationError("mask length mismatch");
  return valid_prefix_length(mask);
}

}  // namespace

Var encode_video(const BoundParameters& p, const Model& model, const Mat& features, std::span<const std::uint8_t> mask) {
  const int n = checked_valid_length(features, mask, model.embed_dim());
  Var out = encode_video_valid(p, model, features.topRows(n));
  return pad_rows(out, static_cast<int>(features.rows()));
}

Fused fuse(const BoundParameters& p, const Model& model, Var v_t, Var z_t) {
  const Config& cfg = model.config();
  if (v_t.cols() != cfg.hidden_size || z_t.cols() != cfg.hidden_size) throw ValidationError("fuse: width mismatch");
  Var v = v_t;
  Var z = z_t;
  for (int l = 0; l < cfg.fusion_layers; ++l) {
    const std::string pv = "fusion." + std::to_string(l) + ".video";
    const std::string pt = "fusion." + std::to_string(l) + ".text";
    Var v_next = v + attention(p, pv + ".attn", norm(p, pv + ".ln_query", v), norm(p, pv + ".ln_context", z),
                               cfg.num_heads(), false);
    v_next = v_next + feed_forward(p, pv + ".ffn", norm(p, pv + ".ln_ffn", v_next));
    Var z_next = z + attention(p, pt + ".attn", norm(p, pt + ".ln_query", z), norm(p, pt + ".ln_context", v),
                               cfg.num_heads(), false);
    z_next = z_next + feed_forward(p, pt + ".ffn", norm(p, pt + ".ln_ffn", z_next));
    v = v_next;
    z = z_next;
  }
  return {v, z};
}

Var conv1d_replicate(Var x, Var weight, Var bias, int kernel) {
  const int length = x.rows();
  const int width = x.cols();
  if (weight.rows() != kernel * width || weight.cols() != 1) throw ValidationError("conv1d: weight shape mismatch");
  const int pad = kernel / 2;
  std::vector<Var> taps;
  taps.reserve(static_cast<std::size_t>(kernel));
  for (int o = 0; o < kernel; ++o) {
    std::vector<int> idx(static_cast<std::size_t>(length));
    for (int t = 0; t < length; ++t) idx[static_cast<std::size_t>(t)] = std::clamp(t + o - pad, 0, length - 1);
    taps.push_back(ad::gather_rows(x, std::move(idx)));
  }
  return ad::add_row(ad::matmul(ad::concat_cols(taps), weight), bias);
}

Var detect_pre(const BoundParameters& p, const Model& model, Var v_t) {
  return conv1d_replicate(v_t, p["detect.pre.weight"], p["detect.pre.bias"], model.config().conv_kernel);
}

Var detect(const BoundParameters& p, const Model& model, Var v_t, Var v_u) {
  if (v_t.rows() != v_u.rows()) throw ValidationError("detect: length mismatch");
  const int k = model.config().conv_kernel;
  Var pre = conv1d_replicate(v_t, p["detect.pre.weight"], p["detect.pre.bias"], k);
  Var post = conv1d_replicate(v_u, p["detect.post.weight"], p["detect.post.bias"], k);
  Var gate = ad::sigmoid(p["detect.gate"]);
  Var rest = ad::add_scalar(ad::scale(gate, -1.0), 1.0);
  return ad::mul_scalar(post, gate) + ad::mul_scalar(pre, rest);
}

Var classify(const BoundParameters& p, Var v_u, Var z_u) {
  Var a = ad::row_normalize(ad::matmul(v_u, p["classify.video_proj"]));
  Var b = ad::row_normalize(ad::matmul(z_u, p["classify.text_proj"]));
  return ad::matmul_nt(a, b);
}

ForwardResult forward(const BoundParameters& p, const Model& model, const Mat& features, const Mat& text_embeddings,
                      std::span<const std::uint8_t> mask) {
  return forward_with_text(p, model, features, encode_text(p, model, text_embeddings), mask);
}

ForwardResult forward_with_text(const BoundParameters& p, const Model& model, const Mat& features, Var z_t,
                                std::span<const std::uint8_t> mask) {
  const int total = static_cast<int>(features.rows());
  const int n = checked_valid_length(features, mask, model.embed_dim());
  ForwardResult r;
  Var v_t = encode_video_valid(p, model, features.topRows(n));
  r.z_t = z_t;
  Fused fused = fuse(p, model, v_t, r.z_t);
  Var y_bin = model.config().language_guided ? detect(p, model, v_t, fused.video) : detect_pre(p, model, v_t);
  Var y_mul = classify(p, fused.video, fused.text);
  r.v_t = pad_rows(v_t, total);
  r.v_u = pad_rows(fused.video, total);
  r.z_u = fused.text;
  r.y_bin = pad_rows(y_bin, total);
  r.y_mul = pad_rows(y_mul, total);
  return r;
}

Vec video_class_probs(const Mat& y_mul, const AnomalyDefinition& definition) {
  const int c = definition.size();
  if (c < 2) throw ValidationError("video_class_probs needs at least two classes");
  if (y_mul.cols() != c || y_mul.rows() < 1) throw ValidationError("video_class_probs: shape mismatch");
  Vec logits(c);
  for (int j = 0; j < c; ++j) {
    logits(j) = j == definition.normal_index() ? y_mul.col(j).minCoeff() : y_mul.col(j).maxCoeff();
  }
  const double m = logits.maxCoeff();
  Vec e = (logits.array() - m).exp();
  return e / e.sum();
}

ScoreResult score_video(const Model& model, const TextEncoder& encoder, const FeatureSequence& seq,
                        const AnomalyDefinition& definition) {
  if (encoder.embed_dim() != model.embed_dim()) throw ValidationError("text encoder width does not match the model");
  const Mat text = encoder.embed(definition);
  ad::Tape tape;
  BoundParameters p(tape, model.params(), nullptr);
  ForwardResult f = forward(p, model, seq.features, text);
  ScoreResult r;
  r.y_bin = f.y_bin.value().col(0);
  r.y_mul = f.y_mul.value();
  r.video_class_probs = video_class_probs(r.y_mul, definition);
  r.definition_used = definition;
  return r;
}

}  // namespace openvad
