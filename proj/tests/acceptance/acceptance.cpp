// Acceptance suite: prints one PASS/FAIL line per criterion and exits non-zero
// when any criterion fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "openvad/eval.hpp"
#include "openvad/losses.hpp"
#include "openvad/metrics.hpp"
#include "openvad/train.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace openvad;
using Clock = std::chrono::steady_clock;

namespace {

// Tolerances and thresholds.
constexpr double kGradientTol = 1e-3;
constexpr double kGradientSeconds = 120.0;
constexpr double kMetricTol = 1e-9;
constexpr double kF1Tol = 1e-12;
constexpr int kSynthesisDraws = 10000;
constexpr double kReferenceMinutes = 15.0;
constexpr double kMinValAuc = 0.85;
constexpr double kMinValAccuracy = 0.70;
constexpr double kMinDriftAuc = 0.75;
constexpr double kDefinitionEffect = 1e-6;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

struct SmallProblem {
  SyntheticDataset ds;
  VideoPool pool;
  KnnIndex knn;
  TextEncoder encoder;
  AnomalyDefinition taxonomy;
};

KnnIndex knn_for(const SyntheticDataset& ds, int n) {
  std::unordered_map<std::string, Vec> central;
  for (std::size_t i = 0; i < ds.records.size(); ++i) central[ds.records[i].video_id] = central_step_feature(ds.features[i]);
  return build_knn_index(ds.records, central, n);
}

SmallProblem small_problem() {
  SyntheticSpec spec = testing::small_spec();  // 3 classes, L in [6, 12], E = 8
  SmallProblem p{generate_synthetic_dataset(spec), {}, {}, TextEncoder::external(1), {}};
  p.pool = VideoPool(testing::split_videos(p.ds, Split::kTrain));
  p.knn = knn_for(p.ds, 10);
  p.encoder = TextEncoder::toy(p.ds.prototypes);
  p.taxonomy = p.ds.prototypes.taxonomy_definition();
  return p;
}

void gradient_suite(Outcome& o) {
  const auto t0 = Clock::now();
  Rng r = make_rng(2024);
  using testing::gradient_error;
  using testing::random_mat;
  using ad::Tape;
  using ad::Var;
  double worst = 0.0;
  auto track = [&](double e, const std::string& name) {
    worst = std::max(worst, e);
    o.require(e <= kGradientTol, name);
  };
  for (int trial = 0; trial < 5; ++trial) {
    const int len = static_cast<int>(r.randint(2, 12));
    const int c = static_cast<int>(r.randint(2, 4));
    const Mat y = random_mat(r, len, 1, 2.0), ym = random_mat(r, len, c);
    std::vector<std::uint8_t> pseudo(static_cast<std::size_t>(len), 0);
    const int start = static_cast<int>(r.randint(0, len - 1));
    for (int i = start; i < len; ++i) pseudo[static_cast<std::size_t>(i)] = 1;
    const std::vector<std::uint8_t> mask;
    for (int label : {0, 1}) {
      track(gradient_error([&](Tape&, const std::vector<Var>& x) { return mil_loss(x[0], label, mask, 16); }, {y}, 1e-6, true),
            "mil_loss");
      track(gradient_error([&](Tape&, const std::vector<Var>& x) { return dvs_loss(x[0], pseudo, label, mask, 16); },
                           {y}, 1e-6, true),
            "dvs_loss");
    }
    track(gradient_error(
              [&](Tape&, const std::vector<Var>& x) {
                return mil_align_loss(x[0], static_cast<int>(trial % c), mask, 0.07, 16);
              },
              {ym}, 1e-6, true),
          "mil_align_loss");
    // Contrastive loss over B1 = 4 samples with B2 = 2 abnormal ones.
    std::vector<Mat> inputs;
    for (int i = 0; i < 6; ++i) inputs.push_back(random_mat(r, 1, 16));
    inputs.push_back(random_mat(r, 2, 16));
    track(gradient_error(
              [&](Tape&, const std::vector<Var>& x) {
                std::vector<Var> ap{x[0], x[1]}, np{x[2], x[3]}, an{x[4], x[5]};
                return contrastive_neg_loss(ap, np, an, x[6], 0.02);
              },
              inputs, 1e-6, true),
          "contrastive_neg_loss");
  }

  // Full forward pass and total loss over real batches of both definition modes.
  const SmallProblem p = small_problem();
  Config cfg = testing::tiny_config();  // hidden 16, B = 4
  int batches = 0;
  std::set<DefinitionMode> modes;
  for (std::uint64_t step = 0; step < 40 && modes.size() < 2; ++step) {
    Rng rng = make_substream(7, "batch", step);
    const TrainBatch batch = sample_batch(p.pool, p.knn, p.taxonomy, cfg, rng);
    if (modes.contains(batch.mode)) continue;
    modes.insert(batch.mode);
    ++batches;
    Model model(cfg, 8, step);
    Rng coords = make_rng(step);
    const double e = testing::parameter_gradient_error(
        model,
        [&](Tape&, const BoundParameters& bp) {
          BatchViews views;
          views.z_t = encode_text(bp, model, p.encoder.embed(batch.definition));
          for (std::size_t i = 0; i < batch.samples.size(); ++i) {
            ForwardResult f = forward_with_text(bp, model, batch.features[i], views.z_t, batch.masks[i]);
            SampleViews sv{f.y_bin, f.y_mul, f.v_t, batch.masks[i], batch.samples[i].pseudo_label,
                           batch.samples[i].video_label, batch.class_index[i], batch.text_index[i],
                           batch.samples[i].segment_count};
            sv.pseudo_label.resize(static_cast<std::size_t>(batch.max_length), 0);
            views.samples.push_back(std::move(sv));
          }
          return total_loss(views, cfg).total;
        },
        24, coords);
    track(e, std::string("total_loss/") + std::string(to_string(batch.mode)));
  }
  const double secs = seconds_since(t0);
  o.require(batches == 2, "both definition modes exercised");
  o.require(secs < kGradientSeconds, "time budget");
  o.detail << " worst_rel_err=" << worst << " seconds=" << secs;
}

// ---------------------------------------------------------------------------

void metric_oracles(Outcome& o) {
  Rng r = make_rng(77);
  double worst_auc = 0.0, worst_ap = 0.0, worst_f1 = 0.0;
  auto instance = [&](int n, std::vector<double>& s, std::vector<std::uint8_t>& y) {
    s.resize(static_cast<std::size_t>(n));
    y.resize(static_cast<std::size_t>(n));
    const bool ties = r.uniform() < 0.5;
    for (int i = 0; i < n; ++i) {
      s[static_cast<std::size_t>(i)] = ties ? std::floor(r.uniform() * 8.0) : r.uniform();
      y[static_cast<std::size_t>(i)] = r.uniform() < 0.3 ? 1 : 0;
    }
    y[0] = 1;
    y[static_cast<std::size_t>(n - 1)] = 0;
  };
  std::vector<double> s;
  std::vector<std::uint8_t> y;
  for (int k = 0; k < 100; ++k) {
    instance(static_cast<int>(r.randint(2, 200)), s, y);
    worst_auc = std::max(worst_auc, std::abs(roc_auc(s, y) - oracle::pairwise_auc(s, y)));
  }
  for (int k = 0; k < 100; ++k) {
    instance(static_cast<int>(r.randint(2, 200)), s, y);
    worst_ap = std::max(worst_ap, std::abs(average_precision(s, y) - oracle::direct_ap(s, y)));
  }
  bool accuracy_exact = true;
  for (int k = 0; k < 100; ++k) {
    const int n = static_cast<int>(r.randint(1, 200));
    const int classes = static_cast<int>(r.randint(2, 6));
    std::vector<int> pred, truth;
    for (int i = 0; i < n; ++i) {
      truth.push_back(static_cast<int>(r.randint(0, classes - 1)));
      pred.push_back(r.uniform() < 0.5 ? truth.back() : static_cast<int>(r.randint(0, classes)));
    }
    const auto want = oracle::confusion_metrics(pred, truth);
    const auto got = multiclass_metrics(pred, truth);
    accuracy_exact = accuracy_exact && want.accuracy == got.accuracy;
    worst_f1 = std::max(worst_f1, std::abs(want.macro_f1 - got.macro_f1));
  }
  o.require(worst_auc <= kMetricTol, "roc_auc");
  o.require(worst_ap <= kMetricTol, "average_precision");
  o.require(accuracy_exact, "accuracy");
  o.require(worst_f1 <= kF1Tol, "macro_f1");
  o.detail << " auc_err=" << worst_auc << " ap_err=" << worst_ap << " f1_err=" << worst_f1;
}

// ---------------------------------------------------------------------------

bool structurally_valid(const SynthesizedSample& s, const VideoPool& pool) {
  if (static_cast<int>(s.segments.size()) != s.segment_count) return false;
  if (s.anchor_slot < 1 || s.anchor_slot > s.segment_count) return false;
  if (static_cast<int>(s.pseudo_label.size()) != s.length()) return false;
  int at = 0;
  for (int slot = 1; slot <= s.segment_count; ++slot) {
    const auto [start, end] = s.segments[static_cast<std::size_t>(slot - 1)];
    if (start != at) return false;
    at = end;
    const TrainingVideo& v = pool.get(s.sources[static_cast<std::size_t>(slot - 1)]);
    if (end - start != v.features.length()) return false;
    if (s.features.middleRows(start, end - start) != v.features.features) return false;
    const bool anchor = slot == s.anchor_slot;
    if (!anchor && !v.record.is_normal()) return false;
    if (anchor && v.record.video_id != s.anchor_id) return false;
    const std::uint8_t want = (anchor && s.video_label == 1) ? 1 : 0;
    for (int t = start; t < end; ++t) {
      if (s.pseudo_label[static_cast<std::size_t>(t)] != want) return false;
    }
  }
  if (at != s.length()) return false;
  if (s.video_label == 1) {
    return std::any_of(s.pseudo_label.begin(), s.pseudo_label.end(), [](auto x) { return x == 1; });
  }
  return true;
}

SyntheticSpec reference_spec() {
  SyntheticSpec spec;  // seed 0, 5 classes, 200 / 50 videos, E = 32, L in [20, 60], noise 0.05
  return spec;
}

void synthesis_statistics_check(Outcome& o) {
  const SyntheticDataset ds = generate_synthetic_dataset(reference_spec());
  const VideoPool pool(testing::split_videos(ds, Split::kTrain));
  const Config cfg;  // theta 0.7, alpha 0.5, delta_m 5
  const KnnIndex knn = knn_for(ds, cfg.knn_n);
  Rng rng = make_rng(123);
  std::vector<SynthesizedSample> samples;
  samples.reserve(kSynthesisDraws);
  int broken = 0;
  for (int i = 0; i < kSynthesisDraws; ++i) {
    samples.push_back(synthesize(pool, knn, cfg, rng));
    if (!structurally_valid(samples.back(), pool)) ++broken;
  }
  const SynthesisStatistics st = synthesis_statistics(samples);
  const double p_multi = cfg.theta * (cfg.delta_m - 1) / cfg.delta_m;
  const double band_multi = 3.0 * std::sqrt(p_multi * (1.0 - p_multi) / kSynthesisDraws);
  const double band_abn = 3.0 * std::sqrt(0.25 / kSynthesisDraws);
  o.require(std::abs(st.fraction_multi_segment - p_multi) <= band_multi, "P(m > 1)");
  o.require(std::abs(st.fraction_abnormal_anchor - 0.5) <= band_abn, "abnormal anchor fraction");
  o.require(broken == 0, "structural invariants");
  o.detail << " p_multi=" << st.fraction_multi_segment << " (target " << p_multi << " +- " << band_multi << ")"
           << " p_abnormal=" << st.fraction_abnormal_anchor << " (+- " << band_abn << ") invalid=" << broken;
}

// ---------------------------------------------------------------------------

struct Reference {
  SyntheticDataset ds;
  std::vector<TrainingVideo> val;
  TextEncoder encoder = TextEncoder::external(1);
  AnomalyDefinition taxonomy;
  Config cfg;
  FitResult fit;
  double seconds = 0.0;
};

Reference reference_run() {
  Reference ref;
  ref.ds = generate_synthetic_dataset(reference_spec());
  ref.val = testing::split_videos(ref.ds, Split::kVal);
  ref.encoder = TextEncoder::toy(ref.ds.prototypes);
  ref.taxonomy = ref.ds.prototypes.taxonomy_definition();
  ref.cfg.hidden_size = 64;
  ref.cfg.epochs = 30;
  ref.cfg.seed = 0;
  const VideoPool pool(testing::split_videos(ref.ds, Split::kTrain));
  const KnnIndex knn = knn_for(ref.ds, ref.cfg.knn_n);
  const auto t0 = Clock::now();
  ref.fit = fit(pool, knn, ref.val, ref.encoder, ref.cfg);
  ref.seconds = seconds_since(t0);
  return ref;
}

void learnability(Outcome& o, const Reference& ref) {
  const ValidationMetrics m = validate_model(ref.fit.best_model, ref.encoder, ref.val, ref.taxonomy);
  o.require(m.frame_auc >= kMinValAuc, "val frame AUC");
  o.require(m.accuracy >= kMinValAccuracy, "val accuracy");
  o.require(ref.seconds <= kReferenceMinutes * 60.0, "time budget");
  o.detail << " val_frame_auc=" << m.frame_auc << " val_accuracy=" << m.accuracy << " best_epoch=" << ref.fit.best_epoch
           << " seconds=" << ref.seconds;
}

void concept_drift(Outcome& o, const Reference& ref) {
  const std::vector<SubsetDefinition> subsets = {
      {"first_pair", {"c0", "c1"}}, {"back_three", {"c2", "c3", "c4"}}, {"single", {"c4"}}};
  const EvalTarget target{"val", ref.val, ref.taxonomy, DetectionMetric::kAuc, std::nullopt};
  const EvalReport rep = evaluate_protocol2(ref.fit.best_model, ref.encoder, target, subsets);
  o.require(rep.drift_mean_auc >= kMinDriftAuc, "drift@3 mean AUC");

  // Relabeling against the per-video case analysis on a 20-video manifest.
  Rng r = make_rng(20);
  const std::vector<std::string> labels = {"normal", "c0", "c1", "c2", "c3", "c4"};
  std::vector<VideoRecord> manifest;
  for (int i = 0; i < 20; ++i) {
    VideoRecord rec;
    rec.video_id = "v" + std::to_string(i);
    rec.split = Split::kTest;
    rec.label = i < 6 ? labels[static_cast<std::size_t>(i)] : labels[static_cast<std::size_t>(r.randint(0, 5))];
    if (rec.label != "normal") rec.description = "scene with " + rec.label;
    if (i % 7 != 3) {
      std::vector<std::uint8_t> f(static_cast<std::size_t>(r.randint(3, 9)), 0);
      if (rec.label != "normal") {
        for (auto& x : f) x = r.uniform() < 0.5 ? 1 : 0;
      }
      rec.frame_labels = f;
    }
    manifest.push_back(rec);
  }
  int mismatches = 0, checked = 0;
  const std::vector<std::vector<std::string>> choices = {
      {"c0"}, {"c1", "c3"}, {"c0", "c2", "c4"}, {"c0", "c1", "c2", "c3", "c4"}};
  for (const auto& inc : choices) {
    const auto out = relabel_for_subset(manifest, SubsetDefinition{"s", inc});
    const std::set<std::string> included(inc.begin(), inc.end());
    for (std::size_t i = 0; i < manifest.size(); ++i) {
      ++checked;
      if (out[i].to_json() != oracle::relabel_case(manifest[i], included).to_json()) ++mismatches;
    }
  }
  o.require(mismatches == 0, "relabel oracle");
  o.detail << " drift_mean_auc=" << rep.drift_mean_auc;
  for (const auto& s : rep.subsets) o.detail << " " << s.subset.name << "=" << s.auc;
  o.detail << " relabel_checked=" << checked << " mismatches=" << mismatches;
}

std::vector<std::vector<double>> frame_scores(const Model& m, const TextEncoder& enc,
                                              const std::vector<TrainingVideo>& videos, const AnomalyDefinition& def) {
  std::vector<std::vector<double>> out;
  for (const auto& v : score_videos(m, enc, videos, def)) out.push_back(v.step_scores);
  return out;
}

void ablation(Outcome& o, const Reference& ref) {
  const AnomalyDefinition described(
      {{"a", "people running from a burning building", std::nullopt},
       {"b", "a crowd gathers around a car", std::nullopt},
       {"normal", "an ordinary quiet street", std::nullopt}},
      2);

  // Reference checkpoint: the definition changes the scores.
  const auto guided_a = frame_scores(ref.fit.best_model, ref.encoder, ref.val, ref.taxonomy);
  const auto guided_b = frame_scores(ref.fit.best_model, ref.encoder, ref.val, described);
  double max_diff = 0.0;
  for (std::size_t i = 0; i < guided_a.size(); ++i) {
    for (std::size_t t = 0; t < guided_a[i].size(); ++t) {
      max_diff = std::max(max_diff, std::abs(guided_a[i][t] - guided_b[i][t]));
    }
  }
  o.require(max_diff > kDefinitionEffect, "guided scores depend on the definition");

  // Same recipe without language guidance, trained briefly.
  Config cfg = ref.cfg;
  cfg.language_guided = false;
  cfg.epochs = 2;
  const VideoPool pool(testing::split_videos(ref.ds, Split::kTrain));
  const FitResult agnostic = fit(pool, knn_for(ref.ds, cfg.knn_n), ref.val, ref.encoder, cfg);
  const auto plain_a = frame_scores(agnostic.last_model, ref.encoder, ref.val, ref.taxonomy);
  const auto plain_b = frame_scores(agnostic.last_model, ref.encoder, ref.val, described);
  o.require(plain_a == plain_b, "agnostic scores are bit-identical");
  o.detail << " guided_max_abs_diff=" << max_diff << " agnostic_identical=" << (plain_a == plain_b ? "yes" : "no");
}

// ---------------------------------------------------------------------------

void shared_conditional(Outcome& o) {
  Rng r = make_rng(1);
  int accepted = 0;
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const int nv = static_cast<int>(r.randint(1, 5)), nz = static_cast<int>(r.randint(1, 4));
    const int ny = static_cast<int>(r.randint(1, 4));
    std::vector<int> mapping(static_cast<std::size_t>(nv * nz));
    for (auto& y : mapping) y = static_cast<int>(r.randint(0, ny - 1));
    Mat d1(nv, nz), d2(nv, nz);
    for (int i = 0; i < nv * nz; ++i) {
      d1.data()[i] = 0.01 + r.uniform();
      d2.data()[i] = 0.01 + r.uniform() * r.uniform();
    }
    d1 /= d1.sum();
    d2 /= d2.sum();
    const ConditionalReport rep = check_shared_conditional(mapping, d1, d2, ny);
    if (rep.identical && rep.compared == nv * nz) ++accepted;
    worst = std::max(worst, rep.max_abs_difference);
  }
  o.require(accepted == 100, "random triples");

  // Negative control: Y given (v, z) is no longer a function in one domain.
  JointTable d1 = joint_from_mapping({0, 1, 2, 1, 0, 2}, Mat::Constant(3, 2, 1.0 / 6.0), 3);
  JointTable d2 = d1;
  d2.at(1, 0, 0) = 0.1;
  const ConditionalReport control = compare_conditionals(d1, d2);
  o.require(!control.identical, "negative control");
  o.detail << " accepted=" << accepted << "/100 max_abs_diff=" << worst
           << " control_identical=" << (control.identical ? "true" : "false");
}

}  // namespace

int main() {
  set_log_quiet(true);
  int failures = 0;
  auto run = [&](const std::string& name, const std::function<void(Outcome&)>& body) {
    Outcome o;
    const auto t0 = Clock::now();
    try {
      body(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " [exception: " << e.what() << "]";
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << o.detail.str() << " (" << seconds_since(t0) << "s)"
              << std::endl;
  };

  run("gradient_suite", gradient_suite);
  run("metric_oracles", metric_oracles);
  run("synthesis_statistics", synthesis_statistics_check);

  std::optional<Reference> ref;
  std::string ref_error;
  try {
    ref = reference_run();
  } catch (const std::exception& e) {
    ref_error = e.what();
  }
  auto with_ref = [&](void (*f)(Outcome&, const Reference&)) {
    return [&, f](Outcome& o) {
      if (!ref) throw std::runtime_error("reference run failed: " + ref_error);
      f(o, *ref);
    };
  };
  run("reference_learnability", with_ref(learnability));
  run("concept_drift", with_ref(concept_drift));
  run("ablation_wiring", with_ref(ablation));
  run("shared_conditional_enumeration", shared_conditional);

  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
