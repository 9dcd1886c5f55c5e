#include "ctxlm/serve.hpp"

#include <httplib.h>

#include "ctxlm/config.hpp"

namespace ctxlm {

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", {{"status", status}, {"message", message}}}});
}

}  // namespace

std::string generation_response(const LoadedModel& m, const GuidanceRequest& r) {
  return to_json(generate(m.checkpoint, m.vocab, r)).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

Server::Server(ServeOptions opts) : opts_(std::move(opts)), http_(std::make_unique<httplib::Server>()) {
  CTXLM_REQUIRE(opts_.workers >= 1, "workers must be >= 1");
  const std::size_t workers = opts_.workers, queued = opts_.max_queued;
  http_->new_task_queue = [workers, queued] { return new httplib::ThreadPool(workers, queued); };
  routes();
}

Server::~Server() { stop(); }

void Server::load(std::shared_ptr<const LoadedModel> model) {
  CTXLM_REQUIRE(!model || model->vocab.size() == model->checkpoint.config.vocab_size,
                "vocabulary does not match the checkpoint");
  std::lock_guard lock(mu_);
  model_ = std::move(model);
}

std::shared_ptr<const LoadedModel> Server::model() const {
  std::lock_guard lock(mu_);
  return model_;
}

void Server::routes() {
  http_->set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
    if (opts_.cors) {
      res.set_header("Access-Control-Allow-Origin", "*");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      if (req.method == "OPTIONS") {
        res.status = 204;
        return httplib::Server::HandlerResponse::Handled;
      }
    }
    return httplib::Server::HandlerResponse::Unhandled;
  });

  http_->Get("/v1/health", [](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}});
  });

  http_->Get("/v1/model", [this](const httplib::Request&, httplib::Response& res) {
    const auto m = model();
    if (!m) {
      send_json(res, 200, {{"loaded", false}});
      return;
    }
    const auto& ck = m->checkpoint;
    send_json(res, 200,
              {{"loaded", true},
               {"model_id", m->model_id},
               {"config", to_json(ck.config)},
               {"parameters", parameter_count(ck.config)},
               {"vocab_size", m->vocab.size()},
               {"vocab_fingerprint", m->vocab.fingerprint()},
               {"step", ck.step},
               {"tokens_consumed", ck.tokens_consumed},
               {"defaults", to_json(GuidanceRequest{})}});
  });

  http_->Post("/v1/generate", [this](const httplib::Request& req, httplib::Response& res) {
    const auto m = model();
    if (!m) return send_error(res, 503, "no model loaded");
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception& e) {
      return send_error(res, 400, std::string("malformed JSON: ") + e.what());
    }
    try {
      const auto r = request_from_json(body);
      CTXLM_REQUIRE(r.max_tokens <= opts_.max_tokens_limit,
                    "max_tokens exceeds the server limit of " + std::to_string(opts_.max_tokens_limit));
      res.status = 200;
      res.set_content(generation_response(*m, r), "application/json");
    } catch (const ValidationError& e) {
      send_error(res, 400, e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  });

  http_->set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return;
    if (res.status == 404)
      send_error(res, 404, "no route for " + req.method + " " + req.path);
    else if (res.status == 405)
      send_error(res, 405, "method not allowed");
  });
}

int Server::bind() {
  if (port_ >= 0) return port_;
  port_ = opts_.port == 0 ? http_->bind_to_any_port(opts_.host) : (http_->bind_to_port(opts_.host, opts_.port) ? opts_.port : -1);
  if (port_ < 0) throw RuntimeFailure("cannot bind " + opts_.host + ":" + std::to_string(opts_.port));
  return port_;
}

void Server::listen() {
  CTXLM_REQUIRE(port_ >= 0, "listen() before bind()");
  http_->listen_after_bind();
}

int Server::start() {
  const int port = bind();
  thread_ = std::thread([this] { http_->listen_after_bind(); });
  http_->wait_until_ready();
  return port;
}

void Server::stop() {
  if (http_) http_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace ctxlm
