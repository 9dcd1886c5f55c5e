#pragma once

#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "ctxlm/decode.hpp"
#include "ctxlm/trainer.hpp"
#include "ctxlm/vocab.hpp"

namespace httplib {
class Server;
}

namespace ctxlm {

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;               ///< 0 picks a free port
  std::size_t workers = 4;       ///< concurrent requests
  std::size_t max_queued = 64;   ///< connections waiting for a worker; 0 = unbounded
  bool cors = false;             ///< Access-Control-Allow-Origin: *
  std::size_t max_tokens_limit = 4096;
};

/// A checkpoint and its vocabulary, immutable once loaded.
struct LoadedModel {
  Checkpoint checkpoint;
  Vocabulary vocab;
  std::string model_id;  ///< e.g. the checkpoint path
};

/// HTTP front end:
///   POST /v1/generate  GuidanceRequest JSON -> generation record
///   GET  /v1/model     configuration summary
///   GET  /v1/health    liveness
/// Errors are {"error": {"status": n, "message": "..."}}.
class Server {
 public:
  explicit Server(ServeOptions opts);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Installs (or replaces) the model; requests without one get 503.
  void load(std::shared_ptr<const LoadedModel> model);

  /// Binds the socket; returns the bound port.
  int bind();
  /// Serves until stop(); bind() must have succeeded.
  void listen();
  /// bind() then serve on a background thread; returns the port.
  int start();
  /// Stops accepting and waits for in-flight requests.
  void stop();

 private:
  std::shared_ptr<const LoadedModel> model() const;
  void routes();

  ServeOptions opts_;
  std::unique_ptr<httplib::Server> http_;
  mutable std::mutex mu_;
  std::shared_ptr<const LoadedModel> model_;
  std::thread thread_;
  int port_ = -1;
};

/// Response body for a generation (what /v1/generate returns).
std::string generation_response(const LoadedModel& m, const GuidanceRequest& r);

}  // namespace ctxlm
