#include <set>
#include <sstream>

#include "doctest.h"
#include "openvad/train.hpp"
#include "support.hpp"

using namespace openvad;

namespace {

struct TrainFixture {
  SyntheticDataset ds;
  VideoPool pool;
  KnnIndex knn;
  TextEncoder encoder;
  std::vector<TrainingVideo> val;
  AnomalyDefinition taxonomy;

  TrainFixture()
      : ds(generate_synthetic_dataset(testing::small_spec())),
        encoder(TextEncoder::toy(ds.prototypes)),
        val(testing::split_videos(ds, Split::kVal)),
        taxonomy(ds.prototypes.taxonomy_definition()) {
    pool = VideoPool(testing::split_videos(ds, Split::kTrain));
    std::unordered_map<std::string, Vec> central;
    for (std::size_t i = 0; i < ds.records.size(); ++i) central[ds.records[i].video_id] = central_step_feature(ds.features[i]);
    knn = build_knn_index(ds.records, central, 10);
  }
};

double params_distance(const ParameterSet& a, const ParameterSet& b) {
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sq += (a.value(i) - b.value(i)).squaredNorm();
  return std::sqrt(sq);
}

int count_lines(const std::string& s) {
  int n = 0;
  std::istringstream in(s);
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

}  // namespace

TEST_CASE("batch definitions") {
  const TrainFixture f;
  Config cfg = testing::tiny_config();
  bool seen_desc = false, seen_class = false;
  for (std::uint64_t step = 0; step < 40; ++step) {
    Rng rng = make_substream(0, "batch", step);
    const TrainBatch b = sample_batch(f.pool, f.knn, f.taxonomy, cfg, rng);
    REQUIRE(b.samples.size() == 4);
    std::set<std::string> descriptions;
    int abnormal = 0;
    for (std::size_t i = 0; i < b.samples.size(); ++i) {
      const auto& s = b.samples[i];
      CHECK(b.features[i].rows() == b.max_length);
      CHECK(static_cast<int>(b.masks[i].size()) == b.max_length);
      if (s.video_label == 1) {
        ++abnormal;
        descriptions.insert(*s.anchor_description);
        CHECK(b.text_index[i] == b.class_index[i]);
        CHECK(b.class_index[i] != b.definition.normal_index());
      } else {
        CHECK(b.text_index[i] == -1);
        CHECK(b.class_index[i] == b.definition.normal_index());
      }
    }
    if (b.mode == DefinitionMode::kDescription) {
      seen_desc = true;
      CHECK(b.definition.size() == static_cast<int>(descriptions.size()) + 1);
      for (std::size_t i = 0; i < b.samples.size(); ++i) {
        if (b.samples[i].video_label == 1) {
          CHECK(b.definition.entry(b.class_index[i]).prompt_text == *b.samples[i].anchor_description);
        }
      }
    } else {
      seen_class = true;
      CHECK(b.definition.to_json() == f.taxonomy.to_json());
      for (std::size_t i = 0; i < b.samples.size(); ++i) {
        if (b.samples[i].video_label == 1) {
          CHECK(b.definition.entry(b.class_index[i]).class_id == b.samples[i].anchor_label);
        }
      }
    }
    (void)abnormal;
  }
  CHECK(seen_desc);
  CHECK(seen_class);
}

TEST_CASE("batch composition is reproducible") {
  const TrainFixture f;
  const Config cfg = testing::tiny_config();
  for (std::uint64_t step = 0; step < 10; ++step) {
    Rng a = make_substream(3, "batch", step), b = make_substream(3, "batch", step);
    CHECK(sample_batch(f.pool, f.knn, f.taxonomy, cfg, a).composition() ==
          sample_batch(f.pool, f.knn, f.taxonomy, cfg, b).composition());
  }
}

TEST_CASE("adamw update") {
  ParameterSet p;
  p.add("w", (Mat(1, 3) << 1.0, -2.0, 0.5).finished());
  ParameterSet g = p.zeros_like();
  g.value(0) << 0.1, 0.2, -0.3;
  AdamW opt;
  opt.init(p);
  const Mat before = p.value(0);
  opt.update(p, g, 0.01, 0.1);
  // First step: the bias-corrected ratio is g / (|g| + eps).
  for (int i = 0; i < 3; ++i) {
    const double gi = g.value(0)(0, i);
    const double expected = before(0, i) - 0.01 * (gi / (std::abs(gi) + 1e-8) + 0.1 * before(0, i));
    CHECK(p.value(0)(0, i) == doctest::Approx(expected).epsilon(1e-12));
  }

  ParameterSet q = p;
  AdamW zero;
  zero.init(q);
  zero.update(q, g, 0.0, 0.01);
  CHECK(q.value(0) == p.value(0));

  // Saturated objective: gradients far below eps barely move the weights.
  ParameterSet s = p;
  ParameterSet tiny = p.zeros_like();
  tiny.value(0).setConstant(1e-14);
  AdamW sat;
  sat.init(s);
  sat.update(s, tiny, 5e-5, 0.0);
  CHECK(params_distance(s, p) < 1e-6);
}

TEST_CASE("train step respects the learning rate") {
  const TrainFixture f;
  const Config cfg = testing::tiny_config();
  TrainState state = TrainState::initial(cfg, 8);
  const ParameterSet start = state.model.params();
  Rng rng = make_substream(0, "batch", 0);
  const TrainBatch batch = sample_batch(f.pool, f.knn, f.taxonomy, cfg, rng);
  const StepResult r = train_step(state, f.encoder, batch, cfg, 0.0);
  CHECK(std::isfinite(r.total));
  CHECK(r.grad_norm > 0.0);
  CHECK(params_distance(state.model.params(), start) == 0.0);
  CHECK(state.step == 1);
  train_step(state, f.encoder, batch, cfg, 1e-3);
  CHECK(params_distance(state.model.params(), start) > 0.0);

  Config cosine = cfg;
  cosine.lr_schedule = LrSchedule::kCosine;
  CHECK(learning_rate_at(cosine, 0, 10) == doctest::Approx(cfg.learning_rate));
  CHECK(learning_rate_at(cosine, 10, 10) == doctest::Approx(0.0));
  CHECK(learning_rate_at(cfg, 7, 10) == cfg.learning_rate);
}

TEST_CASE("full-model gradients match finite differences") {
  const TrainFixture f;
  Config cfg = testing::tiny_config();
  cfg.hidden_size = 8;
  cfg.batch_size = 3;
  cfg.tau = 0.5;
  Rng rng = make_substream(0, "batch", 1);
  const TrainBatch batch = sample_batch(f.pool, f.knn, f.taxonomy, cfg, rng);
  Model model(cfg, 8, 2);
  Rng coords = make_rng(1);
  const double err = testing::parameter_gradient_error(
      model,
      [&](testing::Tape& tape, const BoundParameters& p) {
        BatchViews views;
        views.z_t = encode_text(p, model, f.encoder.embed(batch.definition));
        for (std::size_t i = 0; i < batch.samples.size(); ++i) {
          ForwardResult fr = forward_with_text(p, model, batch.features[i], views.z_t, batch.masks[i]);
          SampleViews sv{fr.y_bin, fr.y_mul, fr.v_t, batch.masks[i], batch.samples[i].pseudo_label,
                         batch.samples[i].video_label, batch.class_index[i], batch.text_index[i],
                         batch.samples[i].segment_count};
          sv.pseudo_label.resize(static_cast<std::size_t>(batch.max_length), 0);
          views.samples.push_back(sv);
        }
        (void)tape;
        return total_loss(views, cfg).total;
      },
      6, coords);
  CHECK(err < 1e-5);
}

TEST_CASE("padding never reaches the loss") {
  const TrainFixture f;
  Config cfg = testing::tiny_config();
  cfg.batch_size = 1;
  const Model model(cfg, 8, 0);
  for (std::uint64_t step = 0; step < 6; ++step) {
    Rng rng = make_substream(1, "batch", step);
    const TrainBatch tight = sample_batch(f.pool, f.knn, f.taxonomy, cfg, rng);
    TrainBatch padded = tight;
    padded.max_length += 5;
    padded.features[0].conservativeResize(padded.max_length, Eigen::NoChange);
    padded.features[0].bottomRows(5).setConstant(3.0);
    padded.masks[0].resize(static_cast<std::size_t>(padded.max_length), 0);
    ParameterSet g1 = model.params().zeros_like(), g2 = model.params().zeros_like();
    const StepResult a = compute_gradients(model, f.encoder, tight, cfg, g1);
    const StepResult b = compute_gradients(model, f.encoder, padded, cfg, g2);
    CHECK(a.total == doctest::Approx(b.total).epsilon(1e-9));
    CHECK(a.mil == doctest::Approx(b.mil).epsilon(1e-9));
    CHECK(a.neg == doctest::Approx(b.neg).epsilon(1e-9));
    CHECK(params_distance(g1, g2) < 1e-7 * (1.0 + a.grad_norm));
  }
}

TEST_CASE("fit bookkeeping and determinism") {
  const TrainFixture f;
  Config cfg = testing::tiny_config();
  cfg.epochs = 2;
  cfg.learning_rate = 1e-3;
  std::ostringstream log1, log2;
  const FitResult a = fit(f.pool, f.knn, f.val, f.encoder, cfg, FitOptions{{}, &log1, false});
  const FitResult b = fit(f.pool, f.knn, f.val, f.encoder, cfg, FitOptions{{}, &log2, false});
  const long long per_epoch = (16 + 3) / 4;
  CHECK(a.steps == 2 * per_epoch);
  CHECK(count_lines(log1.str()) == a.steps + cfg.epochs);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].total == b.history[i].total);
  CHECK(log1.str() == log2.str());
  CHECK(a.best_epoch >= 0);

  std::istringstream lines(log1.str());
  std::string line;
  std::getline(lines, line);
  const Json first = Json::parse(line);
  for (const char* key : {"step", "epoch", "loss_total", "loss_mil", "loss_align", "loss_dvs", "loss_neg", "mode"}) {
    CHECK(first.contains(key));
  }

  cfg.epochs = 0;
  const FitResult none = fit(f.pool, f.knn, f.val, f.encoder, cfg);
  CHECK(none.steps == 0);
  const Model init(cfg, 8, cfg.seed);
  CHECK(params_distance(none.last_model.params(), init.params()) == 0.0);
}

TEST_CASE("resume reproduces an uninterrupted run") {
  const TrainFixture f;
  Config cfg = testing::tiny_config();
  cfg.learning_rate = 1e-3;
  cfg.epochs = 2;
  const FitResult full = fit(f.pool, f.knn, f.val, f.encoder, cfg);

  const auto dir = testing::temp_dir("resume");
  Config first = cfg;
  first.epochs = 1;
  fit(f.pool, f.knn, f.val, f.encoder, first, FitOptions{dir, nullptr, false});
  REQUIRE(std::filesystem::exists(dir / "last.ckpt"));
  const FitResult resumed = fit(f.pool, f.knn, f.val, f.encoder, cfg, FitOptions{dir, nullptr, true});
  CHECK(resumed.steps == full.steps);
  REQUIRE(!resumed.history.empty());
  // Checkpoints store 32-bit floats, so the continuation agrees to rounding.
  CHECK(resumed.history.back().total == doctest::Approx(full.history.back().total).epsilon(1e-4));
  CHECK(std::filesystem::exists(dir / "best.ckpt"));
}

TEST_CASE("non-finite losses abort with the batch composition") {
  const TrainFixture f;
  const Config cfg = testing::tiny_config();
  TrainState state = TrainState::initial(cfg, 8);
  state.model.params().at("detect.pre.bias")(0, 0) = std::nan("");
  Rng rng = make_substream(0, "batch", 0);
  const TrainBatch batch = sample_batch(f.pool, f.knn, f.taxonomy, cfg, rng);
  try {
    train_step(state, f.encoder, batch, cfg, 1e-3);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("batch") != std::string::npos);
  }
}
