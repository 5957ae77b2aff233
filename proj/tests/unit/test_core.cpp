#include <set>

#include "doctest.h"
#include "openvad/core.hpp"

using namespace openvad;

TEST_CASE("rng streams are deterministic and in range") {
  Rng a = make_rng(0), b = make_rng(0);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c = make_rng(0);
  for (int i = 0; i < 1000; ++i) {
    const double u = c.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("rng regression values") {
  // Pinned from one observed run; a change here means every stored dataset
  // and run becomes irreproducible.
  Rng s0 = make_rng(0), s1 = make_rng(1);
  const std::uint64_t a = s0.next_u64();
  const std::uint64_t b = s1.next_u64();
  CHECK(a != b);
  CHECK(a == 0xe472a21d82b9e8c8ULL);
  CHECK(b == 0x884fa46695b1825bULL);
}

TEST_CASE("randint covers the inclusive range uniformly") {
  Rng r = make_rng(3);
  std::vector<int> counts(5, 0);
  const int n = 50000;
  for (int i = 0; i < n; ++i) {
    const auto v = r.randint(1, 5);
    REQUIRE(v >= 1);
    REQUIRE(v <= 5);
    ++counts[static_cast<std::size_t>(v - 1)];
  }
  for (int c : counts) CHECK(std::abs(c - n / 5) < 5 * std::sqrt(n * 0.2 * 0.8));
  CHECK(r.randint(7, 7) == 7);
  CHECK_THROWS_AS(r.randint(2, 1), ValidationError);
}

TEST_CASE("normal draws have unit moments") {
  Rng r = make_rng(11);
  double s = 0.0, s2 = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  CHECK(std::abs(s / n) < 0.02);
  CHECK(std::abs(s2 / n - 1.0) < 0.02);
}

TEST_CASE("substreams differ by purpose and index") {
  std::set<std::uint64_t> firsts;
  for (std::uint64_t i = 0; i < 50; ++i) firsts.insert(make_substream(0, "batch", i).next_u64());
  firsts.insert(make_substream(0, "other", 0).next_u64());
  firsts.insert(make_substream(1, "batch", 0).next_u64());
  CHECK(firsts.size() == 52);
  CHECK(make_substream(5, "x", 2).next_u64() == make_substream(5, "x", 2).next_u64());
}

TEST_CASE("default config is valid and round-trips") {
  const Config c;
  CHECK_NOTHROW(validate_config(c));
  CHECK(c.tau == doctest::Approx(0.02));
  CHECK(c.eta == doctest::Approx(0.02));
  CHECK(c.theta == doctest::Approx(0.7));
  CHECK(c.alpha == doctest::Approx(0.5));
  CHECK(c.delta_m == 5);
  CHECK(c.batch_size == 64);
  CHECK(c.learning_rate == doctest::Approx(5e-5));
  CHECK(c.hidden_size == 512);
  const Config back = Config::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
}

TEST_CASE("config validation names the offending field") {
  Config c;
  c.theta = 1.5;
  try {
    validate_config(c);
    FAIL("theta = 1.5 accepted");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("theta") != std::string::npos);
  }
  c = Config{};
  c.delta_m = 0;
  CHECK_THROWS_AS(validate_config(c), ValidationError);
  c = Config{};
  c.conv_kernel = 4;
  CHECK_THROWS_AS(validate_config(c), ValidationError);
  c = Config{};
  c.tau = 0.0;
  CHECK_THROWS_AS(validate_config(c), ValidationError);
  CHECK_THROWS_AS(Config::from_json(Json{{"no_such_field", 1}}), ValidationError);
  CHECK_THROWS_AS(Config::from_json(Json{{"theta", "high"}}), ValidationError);
  CHECK(Config::from_json(Json{{"hidden_size", 64}}).hidden_size == 64);
}

TEST_CASE("topk count") {
  CHECK(topk_count(32, 16) == 3);
  CHECK(topk_count(15, 16) == 1);
  CHECK(topk_count(16, 16) == 2);
  CHECK(topk_count(1, 16) == 1);
  CHECK(topk_count(2, 1) == 2);  // capped at L
}

TEST_CASE("anomaly definition validation and json") {
  const AnomalyDefinition d({{"fighting", "fighting", std::nullopt}, {"normal", "normal scene", std::nullopt}}, 1);
  CHECK(d.size() == 2);
  CHECK(d.index_of("fighting") == 0);
  CHECK_FALSE(d.index_of("robbery").has_value());
  const AnomalyDefinition back = AnomalyDefinition::from_json(d.to_json());
  CHECK(back.to_json() == d.to_json());

  CHECK_THROWS_AS(AnomalyDefinition({{"a", "x", std::nullopt}}, 0), ValidationError);
  CHECK_THROWS_AS(AnomalyDefinition({{"a", "x", std::nullopt}, {"a", "y", std::nullopt}}, 0), ValidationError);
  CHECK_THROWS_AS(AnomalyDefinition({{"a", "x", std::nullopt}, {"b", "", std::nullopt}}, 0), ValidationError);
  CHECK_THROWS_AS(AnomalyDefinition({{"a", "x", std::nullopt}, {"b", "y", std::nullopt}}, 2), ValidationError);
  CHECK_NOTHROW(AnomalyDefinition({{"a", "", std::vector<double>{1.0, 0.0}}, {"b", "y", std::nullopt}}, 1));
  CHECK_THROWS_AS(AnomalyDefinition::from_json(Json{{"classes", Json::array()}}), ValidationError);
}

TEST_CASE("video record rules") {
  VideoRecord r;
  r.video_id = "v1";
  r.split = Split::kTrain;
  r.label = "fighting";
  CHECK_THROWS_AS(r.validate(), ValidationError);  // abnormal train record needs a description
  r.description = "two people fighting";
  CHECK_NOTHROW(r.validate());
  r.split = Split::kTest;
  r.description.reset();
  CHECK_NOTHROW(r.validate());
  r.video_id = "bad id";
  CHECK_THROWS_AS(r.validate(), ValidationError);

  const Json j = {{"video_id", "v2"}, {"split", "val"}, {"label", "normal"}, {"frame_labels", {0, 0, 1}}};
  const VideoRecord v = VideoRecord::from_json(j);
  CHECK(v.is_normal());
  REQUIRE(v.frame_labels);
  CHECK(v.frame_labels->size() == 3);
  CHECK(v.to_json() == j);
  CHECK_THROWS_AS(VideoRecord::from_json(Json{{"video_id", "v"}, {"split", "dev"}, {"label", "normal"}}), ValidationError);
}

TEST_CASE("feature sequence validation") {
  FeatureSequence s{"v", Mat::Ones(3, 4)};
  CHECK_NOTHROW(s.validate(4));
  CHECK_THROWS_AS(s.validate(5), ValidationError);
  CHECK(s.duration_seconds() == doctest::Approx(3 * 8 / 30.0));
  s.features(1, 1) = std::nan("");
  CHECK_THROWS_AS(s.validate(), ValidationError);
  FeatureSequence empty{"e", Mat(0, 4)};
  CHECK_THROWS_AS(empty.validate(), ValidationError);
}
