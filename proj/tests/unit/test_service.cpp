#include <future>

#include "doctest.h"
#include "openvad/service.hpp"
#include "support.hpp"
// After Eigen: resolver headers pulled in here define a macro named _res.
#include "httplib.h"

using namespace openvad;

namespace {

ServiceState make_state(bool language_guided = true) {
  const SyntheticDataset ds = generate_synthetic_dataset(testing::small_spec());
  Config cfg = testing::tiny_config();
  cfg.language_guided = language_guided;
  ServiceState st;
  st.model = Model(cfg, 8, 0);
  st.encoder = TextEncoder::toy(ds.prototypes);
  st.videos = testing::split_videos(ds, Split::kVal);
  st.config_hash = config_hash(cfg, 8);
  return st;
}

Json request(const std::string& id, const AnomalyDefinition& def) {
  return Json{{"video_id", id}, {"definition", def.to_json()}};
}

AnomalyDefinition binary_definition() {
  return AnomalyDefinition({{"c0", "c0", std::nullopt}, {"normal", "normal scene", std::nullopt}}, 1);
}

AnomalyDefinition other_definition() {
  return AnomalyDefinition(
      {{"x", "crowd running across the plaza", std::nullopt}, {"normal", "quiet empty street", std::nullopt}}, 1);
}

}  // namespace

TEST_CASE("service refuses requests before loading") {
  ScoringService svc;
  CHECK_FALSE(svc.ready());
  CHECK(svc.list_videos().status == 503);
  CHECK(svc.score("{}").status == 503);
  CHECK(svc.labels("x").status == 503);
}

TEST_CASE("service handlers") {
  ScoringService svc;
  ServiceState st = make_state();
  const std::string first = st.videos.front().record.video_id;
  const int first_len = st.videos.front().features.length();
  const std::size_t n = st.videos.size();
  svc.set_state(std::move(st));
  REQUIRE(svc.ready());

  const HttpResponse list = svc.list_videos();
  CHECK(list.status == 200);
  const Json videos = Json::parse(list.body);
  CHECK(videos.size() == n);
  CHECK(videos[0].at("L") == first_len);
  CHECK(videos[0].contains("duration_s"));

  const std::string body = request(first, binary_definition()).dump();
  const HttpResponse a = svc.score(body), b = svc.score(body);
  REQUIRE(a.status == 200);
  CHECK(a.body == b.body);
  const Json j = Json::parse(a.body);
  CHECK(j.at("frame_scores").size() == static_cast<std::size_t>(first_len));
  CHECK(j.at("video_class_probs").size() == 2);
  CHECK(j.at("video_class_probs")[0].get<double>() + j.at("video_class_probs")[1].get<double>() ==
        doctest::Approx(1.0));
  CHECK(j.at("y_mul_summary").size() == 2);
  CHECK(j.at("definition_echo") == binary_definition().to_json());
  CHECK(j.at("config_hash").get<std::string>().size() == 16);
  for (const auto& s : j.at("frame_scores")) {
    CHECK(s.get<double>() > 0.0);
    CHECK(s.get<double>() < 1.0);
  }

  const HttpResponse other = svc.score(request(first, other_definition()).dump());
  REQUIRE(other.status == 200);
  CHECK(Json::parse(other.body).at("frame_scores") != j.at("frame_scores"));

  CHECK(svc.score(request("missing", binary_definition()).dump()).status == 404);
  CHECK(svc.score("not json").status == 400);
  CHECK(svc.score(Json{{"video_id", first}}.dump()).status == 422);
  Json bad = request(first, binary_definition());
  bad["definition"]["normal_index"] = 7;
  CHECK(svc.score(bad.dump()).status == 422);

  const HttpResponse labels = svc.labels(first);
  CHECK(labels.status == 200);
  CHECK(Json::parse(labels.body).size() == static_cast<std::size_t>(first_len));
  CHECK(svc.labels("missing").status == 404);
}

TEST_CASE("unlabeled videos and empty repositories") {
  ScoringService svc;
  ServiceState st = make_state();
  st.videos.front().record.frame_labels.reset();
  const std::string id = st.videos.front().record.video_id;
  svc.set_state(std::move(st));
  CHECK(svc.labels(id).status == 204);

  ScoringService empty;
  ServiceState none = make_state();
  none.videos.clear();
  empty.set_state(std::move(none));
  const HttpResponse r = empty.list_videos();
  CHECK(r.status == 200);
  CHECK(Json::parse(r.body).empty());
}

TEST_CASE("agnostic model ignores the definition") {
  ScoringService svc;
  ServiceState st = make_state(false);
  const std::string id = st.videos.front().record.video_id;
  svc.set_state(std::move(st));
  const Json a = Json::parse(svc.score(request(id, binary_definition()).dump()).body);
  const Json b = Json::parse(svc.score(request(id, other_definition()).dump()).body);
  CHECK(a.at("frame_scores") == b.at("frame_scores"));
}

TEST_CASE("http transport") {
  auto svc = std::make_shared<ScoringService>();
  HttpServer server(svc);
  const int port = server.start("127.0.0.1", 0);
  REQUIRE(port > 0);
  httplib::Client client("127.0.0.1", port);

  auto early = client.Get("/videos");
  REQUIRE(early);
  CHECK(early->status == 503);

  ServiceState st = make_state();
  const std::string id = st.videos.front().record.video_id;
  svc->set_state(std::move(st));

  auto list = client.Get("/videos");
  REQUIRE(list);
  CHECK(list->status == 200);
  CHECK(list->get_header_value("Access-Control-Allow-Origin") == "*");

  const std::string body = request(id, binary_definition()).dump();
  auto a = client.Post("/score", body, "application/json");
  REQUIRE(a);
  CHECK(a->status == 200);
  CHECK(a->body == svc->score(body).body);

  // Concurrent clients see the serial responses.
  std::vector<std::future<std::string>> jobs;
  for (int i = 0; i < 4; ++i) {
    jobs.push_back(std::async(std::launch::async, [&] {
      httplib::Client c("127.0.0.1", port);
      auto r = c.Post("/score", body, "application/json");
      return r ? r->body : std::string();
    }));
  }
  for (auto& j : jobs) CHECK(j.get() == a->body);

  auto missing = client.Post("/score", request("nope", binary_definition()).dump(), "application/json");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  auto labels = client.Get("/videos/" + id + "/labels");
  REQUIRE(labels);
  CHECK(labels->status == 200);
  auto unknown = client.Get("/videos/nope/labels");
  REQUIRE(unknown);
  CHECK(unknown->status == 404);
  auto preflight = client.Options("/score");
  REQUIRE(preflight);
  CHECK(preflight->status == 204);
  server.stop();
}
