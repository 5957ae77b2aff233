#include "openvad/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "openvad/metrics.hpp"

namespace openvad {

std::string_view to_string(DefinitionMode m) { return m == DefinitionMode::kDescription ? "description" : "class_name"; }

Json TrainBatch::composition() const {
  Json samples_json = Json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Json s = samples[i].provenance_json();
    s["class_index"] = class_index[i];
    s["text_index"] = text_index[i];
    samples_json.push_back(std::move(s));
  }
  return Json{{"mode", std::string(to_string(mode))},
              {"classes", definition.size()},
              {"max_length", max_length},
              {"samples", std::move(samples_json)}};
}

TrainBatch sample_batch(const VideoPool& pool, const KnnIndex& knn, const AnomalyDefinition& taxonomy,
                        const Config& cfg, Rng& rng) {
  if (pool.abnormal().empty() || pool.normal().empty()) {
    throw ValidationError("training needs at least one abnormal and one normal video");
  }
  TrainBatch b;
  b.samples.reserve(static_cast<std::size_t>(cfg.batch_size));
  for (int i = 0; i < cfg.batch_size; ++i) b.samples.push_back(synthesize(pool, knn, cfg, rng));
  b.mode = rng.bernoulli(0.5) ? DefinitionMode::kDescription : DefinitionMode::kClassName;

  if (b.mode == DefinitionMode::kClassName) {
    b.definition = taxonomy;
    for (const auto& s : b.samples) {
      const auto idx = s.video_label == 1 ? taxonomy.index_of(s.anchor_label) : std::optional<int>(taxonomy.normal_index());
      if (!idx) throw ValidationError("training label '" + s.anchor_label + "' is not in the class taxonomy");
      b.class_index.push_back(*idx);
      b.text_index.push_back(s.video_label == 1 ? *idx : -1);
    }
  } else {
    // Identical descriptions (the same anchor drawn twice) share one entry.
    std::vector<ClassEntry> entries;
    std::map<std::string, int> row_of;
    for (const auto& s : b.samples) {
      if (s.video_label != 1) continue;
      const std::string& text = *s.anchor_description;
      if (row_of.try_emplace(text, static_cast<int>(entries.size())).second) {
        entries.push_back({"d" + std::to_string(entries.size()), text, std::nullopt});
      }
    }
    const int normal = static_cast<int>(entries.size());
    const ClassEntry& tax_normal = taxonomy.entry(taxonomy.normal_index());
    entries.push_back({tax_normal.class_id, tax_normal.prompt_text, tax_normal.embedding});
    if (entries.size() < 2) {
      // No abnormal sample in this batch: a lone normal entry is not a valid
      // definition, so fall back to the taxonomy.
      b.mode = DefinitionMode::kClassName;
      b.definition = taxonomy;
      for (std::size_t i = 0; i < b.samples.size(); ++i) {
        b.class_index.push_back(taxonomy.normal_index());
        b.text_index.push_back(-1);
      }
    } else {
      b.definition = AnomalyDefinition(std::move(entries), normal);
      for (const auto& s : b.samples) {
        const int idx = s.video_label == 1 ? row_of.at(*s.anchor_description) : normal;
        b.class_index.push_back(idx);
        b.text_index.push_back(s.video_label == 1 ? idx : -1);
      }
    }
  }

  for (const auto& s : b.samples) b.max_length = std::max(b.max_length, s.length());
  for (const auto& s : b.samples) {
    Mat padded = Mat::Zero(b.max_length, s.features.cols());
    padded.topRows(s.length()) = s.features;
    b.features.push_back(std::move(padded));
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(b.max_length), 0);
    std::fill(mask.begin(), mask.begin() + s.length(), 1);
    b.masks.push_back(std::move(mask));
  }
  return b;
}

void AdamW::init(const ParameterSet& params) {
  m = params.zeros_like();
  v = params.zeros_like();
  t = 0;
}

void AdamW::update(ParameterSet& params, const ParameterSet& grads, double lr, double weight_decay) {
  if (m.size() != params.size()) init(params);
  ++t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat& p = params.value(i);
    const Mat& g = grads.value(i);
    Mat& mi = m.value(i);
    Mat& vi = v.value(i);
    mi = beta1 * mi + (1.0 - beta1) * g;
    vi = beta2 * vi + (1.0 - beta2) * g.cwiseProduct(g);
    const auto step = (mi.array() / c1) / ((vi.array() / c2).sqrt() + eps);
    p.array() -= lr * (step + weight_decay * p.array());
  }
}

TrainState TrainState::initial(const Config& cfg, int embed_dim) {
  TrainState s;
  s.model = Model(cfg, embed_dim, cfg.seed);
  s.optimizer.init(s.model.params());
  return s;
}

namespace {

constexpr const char* kMomentPrefix = "adam.";

double json_metric(double v) { return std::isfinite(v) ? v : -1.0; }

}  // namespace

void TrainState::save(const std::filesystem::path& path) const {
  ParameterSet moments;
  for (std::size_t i = 0; i < optimizer.m.size(); ++i) moments.add("m." + optimizer.m.name(i), optimizer.m.value(i));
  for (std::size_t i = 0; i < optimizer.v.size(); ++i) moments.add("v." + optimizer.v.name(i), optimizer.v.value(i));
  const Json extra = {{"epoch", epoch},
                      {"step", step},
                      {"adam_t", optimizer.t},
                      {"best_metric", std::isfinite(best_metric) ? Json(best_metric) : Json(nullptr)},
                      {"best_epoch", best_epoch}};
  save_checkpoint(path, model, extra, &moments, kMomentPrefix);
}

TrainState TrainState::load(const std::filesystem::path& path, const Config* expected) {
  Checkpoint ck = load_checkpoint(path, expected);
  TrainState s;
  s.model = std::move(ck.model);
  s.optimizer.init(s.model.params());
  const ParameterSet moments = load_checkpoint_tensors(path, kMomentPrefix);
  for (std::size_t i = 0; i < s.model.params().size(); ++i) {
    const std::string& name = s.model.params().name(i);
    if (moments.contains("m." + name)) s.optimizer.m.value(i) = moments.at("m." + name);
    if (moments.contains("v." + name)) s.optimizer.v.value(i) = moments.at("v." + name);
  }
  const Json& e = ck.extra;
  s.epoch = e.value("epoch", 0);
  s.step = e.value("step", 0LL);
  s.optimizer.t = e.value("adam_t", s.step);
  if (e.contains("best_metric") && e.at("best_metric").is_number()) s.best_metric = e.at("best_metric").get<double>();
  s.best_epoch = e.value("best_epoch", -1);
  return s;
}

StepResult compute_gradients(const Model& model, const TextEncoder& encoder, const TrainBatch& batch,
                             const Config& cfg, ParameterSet& grads) {
  grads.set_zero();
  ad::Tape tape;
  BoundParameters p(tape, model.params(), &grads);
  BatchViews views;
  views.z_t = encode_text(p, model, encoder.embed(batch.definition));
  for (std::size_t i = 0; i < batch.samples.size(); ++i) {
    const SynthesizedSample& s = batch.samples[i];
    ForwardResult f = forward_with_text(p, model, batch.features[i], views.z_t, batch.masks[i]);
    SampleViews sv;
    sv.y_bin = f.y_bin;
    sv.y_mul = f.y_mul;
    sv.v_t = f.v_t;
    sv.mask = batch.masks[i];
    sv.pseudo_label = s.pseudo_label;
    sv.pseudo_label.resize(static_cast<std::size_t>(batch.max_length), 0);
    sv.video_label = s.video_label;
    sv.class_index = batch.class_index[i];
    sv.text_index = batch.text_index[i];
    sv.segment_count = s.segment_count;
    views.samples.push_back(std::move(sv));
  }
  LossBreakdown loss = total_loss(views, cfg);
  StepResult r{loss.total_value, loss.mil, loss.align, loss.dvs, loss.neg, 0.0};
  if (!std::isfinite(r.total)) return r;
  tape.backward(loss.total);
  double sq = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) sq += grads.value(i).squaredNorm();
  r.grad_norm = std::sqrt(sq);
  return r;
}

StepResult train_step(TrainState& state, const TextEncoder& encoder, const TrainBatch& batch, const Config& cfg,
                      double lr) {
  ParameterSet grads = state.model.params().zeros_like();
  StepResult r = compute_gradients(state.model, encoder, batch, cfg, grads);
  if (!std::isfinite(r.total) || !std::isfinite(r.grad_norm)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << state.step << " (total=" << r.total << ", mil=" << r.mil
        << ", align=" << r.align << ", dvs=" << r.dvs << ", neg=" << r.neg << ", grad_norm=" << r.grad_norm
        << "); batch: " << batch.composition().dump();
    throw NumericError(msg.str());
  }
  if (cfg.grad_clip_norm > 0.0 && r.grad_norm > cfg.grad_clip_norm) {
    const double scale = cfg.grad_clip_norm / r.grad_norm;
    for (std::size_t i = 0; i < grads.size(); ++i) grads.value(i) *= scale;
  }
  state.optimizer.update(state.model.params(), grads, lr, cfg.weight_decay);
  ++state.step;
  return r;
}

double learning_rate_at(const Config& cfg, long long step, long long total_steps) {
  if (cfg.lr_schedule == LrSchedule::kConstant || total_steps <= 0) return cfg.learning_rate;
  const double progress = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

ValidationMetrics validate_model(const Model& model, const TextEncoder& encoder,
                                 const std::vector<TrainingVideo>& videos, const AnomalyDefinition& definition) {
  ValidationMetrics out;
  out.videos = static_cast<int>(videos.size());
  if (videos.empty()) return out;
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  bool all_labeled = true;
  std::vector<int> predicted, truth;
  for (const auto& v : videos) {
    const ScoreResult r = score_video(model, encoder, v.features, definition);
    if (v.record.frame_labels && static_cast<int>(v.record.frame_labels->size()) == v.features.length()) {
      for (int t = 0; t < v.features.length(); ++t) scores.push_back(1.0 / (1.0 + std::exp(-r.y_bin(t))));
      labels.insert(labels.end(), v.record.frame_labels->begin(), v.record.frame_labels->end());
    } else {
      all_labeled = false;
    }
    const auto idx = definition.index_of(v.record.label);
    if (idx) {
      Eigen::Index best = 0;
      r.video_class_probs.maxCoeff(&best);
      predicted.push_back(static_cast<int>(best));
      truth.push_back(*idx);
    }
  }
  const bool both = std::any_of(labels.begin(), labels.end(), [](auto x) { return x != 0; }) &&
                    std::any_of(labels.begin(), labels.end(), [](auto x) { return x == 0; });
  if (all_labeled && both) out.frame_auc = roc_auc(scores, labels);
  if (!truth.empty()) out.accuracy = multiclass_metrics(predicted, truth).accuracy;
  return out;
}

FitResult fit(const VideoPool& pool, const KnnIndex& knn, const std::vector<TrainingVideo>& val_videos,
              const TextEncoder& encoder, const Config& cfg_in, const FitOptions& options) {
  const Config cfg = validate_config(cfg_in);
  if (pool.abnormal().empty() || pool.normal().empty()) {
    throw ValidationError("training needs at least one abnormal and one normal video");
  }
  const int embed_dim = pool.normal().front().features.width();
  if (embed_dim != encoder.embed_dim()) throw ValidationError("text encoder width does not match the features");
  const AnomalyDefinition taxonomy = encoder.prototypes().classes.empty()
                                         ? throw ValidationError("training needs a class taxonomy")
                                         : encoder.prototypes().taxonomy_definition();
  const long long n_train = static_cast<long long>(pool.normal().size() + pool.abnormal().size());
  const long long steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  const long long total_steps = steps_per_epoch * cfg.epochs;

  const bool persist = !options.output_dir.empty();
  if (persist) std::filesystem::create_directories(options.output_dir);
  const auto last_path = options.output_dir / "last.ckpt";
  const auto best_path = options.output_dir / "best.ckpt";

  TrainState state;
  FitResult result;
  if (options.resume && persist && std::filesystem::exists(last_path)) {
    state = TrainState::load(last_path, &cfg);
    log_info("resuming from step " + std::to_string(state.step));
    result.best_model = std::filesystem::exists(best_path) ? load_checkpoint(best_path).model : state.model;
  } else {
    state = TrainState::initial(cfg, embed_dim);
    result.best_model = state.model;
  }
  result.best_metric = state.best_metric;
  result.best_epoch = state.best_epoch;

  for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    StepResult sum;
    for (long long k = 0; k < steps_per_epoch; ++k) {
      const long long step = state.step;
      Rng rng = make_substream(cfg.seed, "batch", static_cast<std::uint64_t>(step));
      TrainBatch batch = sample_batch(pool, knn, taxonomy, cfg, rng);
      const StepResult r = train_step(state, encoder, batch, cfg, learning_rate_at(cfg, step, total_steps));
      result.history.push_back(r);
      sum.total += r.total;
      sum.mil += r.mil;
      sum.align += r.align;
      sum.dvs += r.dvs;
      sum.neg += r.neg;
      if (options.log) {
        const Json line = {{"step", step},        {"epoch", epoch},         {"loss_total", r.total},
                           {"loss_mil", r.mil},   {"loss_align", r.align}, {"loss_dvs", r.dvs},
                           {"loss_neg", r.neg},   {"mode", std::string(to_string(batch.mode))}};
        *options.log << line.dump() << '\n';
      }
    }
    state.epoch = epoch + 1;
    const ValidationMetrics val = validate_model(state.model, encoder, val_videos, taxonomy);
    const bool improved = std::isfinite(val.frame_auc) ? val.frame_auc > state.best_metric || state.best_epoch < 0
                                                        : true;
    if (improved) {
      state.best_metric = std::isfinite(val.frame_auc) ? val.frame_auc : state.best_metric;
      state.best_epoch = state.epoch;
      result.best_model = state.model;
      if (persist) {
        save_checkpoint(best_path, state.model,
                        Json{{"epoch", state.epoch}, {"val_frame_auc", json_metric(val.frame_auc)},
                             {"val_accuracy", json_metric(val.accuracy)}});
      }
    }
    if (persist) state.save(last_path);
    const double inv = 1.0 / static_cast<double>(steps_per_epoch);
    const Json summary = {{"summary", true},
                          {"epoch", epoch},
                          {"step", state.step},
                          {"loss_total", sum.total * inv},
                          {"loss_mil", sum.mil * inv},
                          {"loss_align", sum.align * inv},
                          {"loss_dvs", sum.dvs * inv},
                          {"loss_neg", sum.neg * inv},
                          {"val_frame_auc", std::isfinite(val.frame_auc) ? Json(val.frame_auc) : Json(nullptr)},
                          {"val_accuracy", std::isfinite(val.accuracy) ? Json(val.accuracy) : Json(nullptr)},
                          {"best_epoch", state.best_epoch}};
    if (options.log) {
      *options.log << summary.dump() << '\n';
      options.log->flush();
    }
    log_info(summary.dump());
  }

  if (persist && cfg.epochs == 0) {
    save_checkpoint(best_path, state.model, Json{{"epoch", 0}});
    state.save(last_path);
  }
  result.last_model = state.model;
  result.best_metric = state.best_metric;
  result.best_epoch = state.best_epoch;
  result.steps = state.step;
  return result;
}

FitResult fit_directory(const std::filesystem::path& dataset_dir, const Config& cfg, const FitOptions& options) {
  const auto manifest = load_manifest(manifest_path(dataset_dir));
  const PrototypeTable table = load_prototypes(prototypes_path(dataset_dir));
  const FeatureRepository repo(features_dir(dataset_dir), table.embed_dim);
  validate_manifest_against_repository(manifest, repo);
  const VideoPool pool = load_training_pool(manifest, repo);
  const auto knn_file = dataset_dir / "knn.json";
  const KnnIndex knn = std::filesystem::exists(knn_file) ? KnnIndex::from_json(load_json(knn_file))
                                                         : build_knn_index(repo, manifest, cfg.knn_n);
  std::vector<TrainingVideo> val;
  for (const auto& r : manifest) {
    if (r.split == Split::kVal) val.push_back({r, repo.read(r.video_id)});
  }
  return fit(pool, knn, val, TextEncoder::toy(table), cfg, options);
}

}  // namespace openvad
