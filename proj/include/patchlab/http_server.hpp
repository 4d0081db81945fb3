#pragma once

#include <httplib.h>

#include <memory>
#include <string>
#include <thread>

#include "api.hpp"

namespace patchlab {

/// Serves the JSON API over HTTP on top of a Service.
class HttpServer {
 public:
  explicit HttpServer(Service& svc) : svc_(svc) {
    auto handler = [this](const httplib::Request& req, httplib::Response& res) {
      const auto out = dispatch(svc_, {req.method, req.path, req.body});
      res.status = out.status;
      if (out.status != 204) res.set_content(out.body, out.content_type);
    };
    server_.Get(".*", handler);
    server_.Post(".*", handler);
  }

  ~HttpServer() { stop(); }

  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds `host:port` (port 0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw Error(ErrorCode::io, "cannot bind " + host + ":" + std::to_string(port));
    return bound;
  }

  /// Blocks serving requests until stop().
  void listen() { server_.listen_after_bind(); }

  /// Serves on a background thread.
  void start() {
    thread_ = std::thread([this] { listen(); });
    server_.wait_until_ready();
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

 private:
  Service& svc_;
  httplib::Server server_;
  std::thread thread_;
};

/// Client side of the API, for the simulator and tests.
class HttpClient {
 public:
  HttpClient(const std::string& host, int port) : client_(host, port) {
    client_.set_connection_timeout(5);
    client_.set_read_timeout(60);
  }

  ApiResponse send(const ApiRequest& req) {
    httplib::Result r = req.method == "POST" ? client_.Post(req.path, req.body, "application/json")
                                             : client_.Get(req.path);
    if (!r) throw Error(ErrorCode::io, "HTTP " + req.method + " " + req.path + ": " + httplib::to_string(r.error()));
    return {r->status, r->body, r->get_header_value("Content-Type")};
  }

 private:
  httplib::Client client_;
};

}  // namespace patchlab
