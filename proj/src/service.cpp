#include "openvad/service.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "httplib.h"

namespace openvad {

namespace {

HttpResponse json_response(int status, const Json& body) { return {status, body.dump(), "application/json"}; }

HttpResponse error_response(int status, const std::string& message) {
  return json_response(status, Json{{"error", message}});
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

HttpResponse not_ready() { return error_response(503, "repository is still loading"); }

}  // namespace

const TrainingVideo* ServiceState::find(const std::string& video_id) const {
  for (const auto& v : videos) {
    if (v.record.video_id == video_id) return &v;
  }
  return nullptr;
}

ServiceState load_service_state(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset_dir,
                                std::optional<Split> split) {
  ServiceState s;
  Checkpoint ck = load_checkpoint(checkpoint);
  s.config_hash = ck.hash;
  s.model = std::move(ck.model);
  const PrototypeTable table = load_prototypes(prototypes_path(dataset_dir));
  if (table.embed_dim != s.model.embed_dim()) throw ValidationError("checkpoint and dataset differ in embedding width");
  s.encoder = TextEncoder::toy(table);
  const auto manifest = load_manifest(manifest_path(dataset_dir));
  const FeatureRepository repo(features_dir(dataset_dir), table.embed_dim);
  for (const auto& r : manifest) {
    if (split && r.split != *split) continue;
    s.videos.push_back({r, repo.read(r.video_id)});
  }
  return s;
}

void ScoringService::set_state(ServiceState state) {
  auto p = std::make_shared<const ServiceState>(std::move(state));
  std::lock_guard lock(mutex_);
  state_ = std::move(p);
}

std::shared_ptr<const ServiceState> ScoringService::snapshot() const {
  std::lock_guard lock(mutex_);
  return state_;
}

bool ScoringService::ready() const { return snapshot() != nullptr; }

HttpResponse ScoringService::list_videos() const {
  const auto st = snapshot();
  if (!st) return not_ready();
  Json out = Json::array();
  for (const auto& v : st->videos) {
    out.push_back({{"video_id", v.record.video_id},
                   {"L", v.features.length()},
                   {"duration_s", v.features.duration_seconds()},
                   {"has_frame_labels", v.record.frame_labels.has_value()}});
  }
  return json_response(200, out);
}

HttpResponse ScoringService::score(const std::string& request_body) const {
  const auto st = snapshot();
  if (!st) return not_ready();
  Json req;
  try {
    req = Json::parse(request_body);
  } catch (const Json::exception&) {
    return error_response(400, "request body is not valid JSON");
  }
  if (!req.is_object() || !req.contains("video_id") || !req.at("video_id").is_string()) {
    return error_response(422, "request needs a string video_id");
  }
  const std::string id = req.at("video_id").get<std::string>();
  const TrainingVideo* video = st->find(id);
  if (!video) return error_response(404, "unknown video '" + id + "'");
  if (!req.contains("definition")) return error_response(422, "request needs a definition");

  AnomalyDefinition def;
  Mat text;
  try {
    def = AnomalyDefinition::from_json(req.at("definition"));
    text = st->encoder.embed(def);
  } catch (const ValidationError& e) {
    return error_response(422, e.what());
  }
  const ScoreResult r = score_video(st->model, st->encoder, video->features, def);

  std::vector<double> frame_scores(static_cast<std::size_t>(r.y_bin.size()));
  for (std::size_t t = 0; t < frame_scores.size(); ++t) {
    const double x = r.y_bin(static_cast<Eigen::Index>(t));
    frame_scores[t] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  Json summary = Json::array();
  for (int c = 0; c < def.size(); ++c) {
    const auto col = r.y_mul.col(c);
    summary.push_back({{"class_id", def.entry(c).class_id},
                       {"min", col.minCoeff()},
                       {"mean", col.mean()},
                       {"max", col.maxCoeff()}});
  }
  std::vector<double> probs(r.video_class_probs.data(), r.video_class_probs.data() + r.video_class_probs.size());
  const Json out = {{"video_id", id},
                    {"L", video->features.length()},
                    {"stride_frames", video->features.stride_frames},
                    {"fps", video->features.fps},
                    {"frame_scores", frame_scores},
                    {"y_mul_summary", summary},
                    {"video_class_probs", probs},
                    {"definition_echo", def.to_json()},
                    {"config_hash", hex64(st->config_hash)}};
  return json_response(200, out);
}

HttpResponse ScoringService::labels(const std::string& video_id) const {
  const auto st = snapshot();
  if (!st) return not_ready();
  const TrainingVideo* video = st->find(video_id);
  if (!video) return error_response(404, "unknown video '" + video_id + "'");
  if (!video->record.frame_labels) return {204, "", "application/json"};
  std::vector<int> labels(video->record.frame_labels->begin(), video->record.frame_labels->end());
  return json_response(200, Json(labels));
}

struct HttpServer::Impl {
  std::shared_ptr<ScoringService> service;
  httplib::Server server;
  std::thread thread;
};

namespace {

void send(httplib::Response& res, const HttpResponse& r) {
  res.status = r.status;
  if (r.status != 204) res.set_content(r.body, r.content_type);
}

}  // namespace

HttpServer::HttpServer(std::shared_ptr<ScoringService> service) : impl_(std::make_unique<Impl>()) {
  impl_->service = std::move(service);
  auto& srv = impl_->server;
  srv.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  auto svc = impl_->service;
  srv.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  srv.Get("/videos", [svc](const httplib::Request&, httplib::Response& res) { send(res, svc->list_videos()); });
  srv.Get(R"(/videos/([A-Za-z0-9_.\-]+)/labels)", [svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc->labels(req.matches[1]));
  });
  srv.Post("/score", [svc](const httplib::Request& req, httplib::Response& res) { send(res, svc->score(req.body)); });
  srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string message = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      message = e.what();
    } catch (...) {
    }
    send(res, error_response(500, message));
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  auto& srv = impl_->server;
  const int bound = port == 0 ? srv.bind_to_any_port(host) : (srv.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void HttpServer::listen_blocking(const std::string& host, int port) {
  if (!impl_->server.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
}

void HttpServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace openvad
