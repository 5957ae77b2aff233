#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "openvad/core.hpp"
#include "openvad/model.hpp"
#include "openvad/synthesis.hpp"
#include "openvad/text_encoder.hpp"

namespace openvad {

/// Immutable state behind the scoring endpoints.
struct ServiceState {
  Model model;
  TextEncoder encoder = TextEncoder::external(1);
  std::vector<TrainingVideo> videos;
  std::uint64_t config_hash = 0;

  const TrainingVideo* find(const std::string& video_id) const;
};

/// Loads a checkpoint and the videos of one split (or all splits) of a dataset
/// directory.
ServiceState load_service_state(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset_dir,
                                std::optional<Split> split);

struct HttpResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

/// Request handling independent of the transport. Handlers only read the
/// shared state, so any interleaving of requests gives serial results.
class ScoringService {
 public:
  void set_state(ServiceState state);
  bool ready() const;

  HttpResponse list_videos() const;
  HttpResponse score(const std::string& request_body) const;
  HttpResponse labels(const std::string& video_id) const;

 private:
  std::shared_ptr<const ServiceState> snapshot() const;

  mutable std::mutex mutex_;
  std::shared_ptr<const ServiceState> state_;
};

/// HTTP front end (GET /videos, POST /score, GET /videos/{id}/labels) with
/// permissive CORS headers.
class HttpServer {
 public:
  explicit HttpServer(std::shared_ptr<ScoringService> service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Starts listening on a background thread. port 0 picks a free port.
  /// Returns the bound port.
  int start(const std::string& host, int port);
  /// Blocks until stop() is called from another thread or a signal handler.
  void listen_blocking(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace openvad
