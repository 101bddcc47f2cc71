// SPDX-License-Identifier: Apache-2.0
#include <httplib.h>

#include "attrigraph/json_io.hpp"
#include "attrigraph/service.hpp"

namespace attrigraph {

namespace {

Params params_of(const httplib::Request& req) {
  Params q;
  for (const auto& [k, v] : req.params) q.emplace(k, v);  // first value wins
  return q;
}

void send(httplib::Response& res, const Response& r) {
  res.status = r.status;
  for (const auto& [k, v] : r.headers) res.set_header(k, v);
  res.set_content(r.body, r.content_type);
}

}  // namespace

struct HttpServer::Impl {
  const Service& service;
  httplib::Server server;
  std::string host;
};

HttpServer::HttpServer(const Service& service) : impl_(new Impl{service, {}, {}}) {
  auto& s = impl_->server;
  const Service& svc = service;
  s.Get("/cases", [&svc](const httplib::Request&, httplib::Response& res) { send(res, svc.cases()); });
  s.Get(R"(/case/([^/]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.case_detail(req.matches[1]));
  });
  s.Get("/heatmap", [&svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.heatmap(params_of(req)));
  });
  s.Get("/graph", [&svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.graph(params_of(req)));
  });
  s.Post("/refine", [&svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.refine(req.body));
  });
  s.Get("/analysis", [&svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.analysis(params_of(req)));
  });
  s.Get("/compare", [&svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.compare(params_of(req)));
  });
  s.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return;
    res.set_content(dump_stable(error_json(ErrorKind::input, "no route for " + req.method + " " + req.path)),
                    "application/json");
  });
}

HttpServer::~HttpServer() = default;

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    require(bound > 0, ErrorKind::io, "cannot bind " + host);
    return bound;
  }
  require(impl_->server.bind_to_port(host, port), ErrorKind::io,
          "cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() { impl_->server.stop(); }

}  // namespace attrigraph
