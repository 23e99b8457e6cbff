// Copyright (C) 2026 The segguide Authors
// SPDX-License-Identifier: Apache-2.0

// Eigen must precede httplib: <resolv.h> defines a `_res` macro that
// collides with Eigen parameter names.
#include "segguide/service.hpp"

#include <httplib.h>

namespace segguide {

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

/// Runs a handler, mapping library errors to HTTP status codes.
template <typename F>
void guarded(httplib::Response& res, F&& f) {
    try {
        f();
    } catch (const ValidationError& e) {
        nlohmann::json fields = nlohmann::json::array();
        for (const auto& fe : e.fields()) {
            fields.push_back({{"field", fe.field}, {"message", fe.message}});
        }
        send_json(res, 400, {{"error", "validation"}, {"message", e.what()}, {"fields", fields}});
    } catch (const OrphanClassError& e) {
        send_json(res, 400, {{"error", "orphan_class"}, {"message", e.what()}, {"class_id", e.class_id()}});
    } catch (const NotFoundError& e) {
        send_json(res, 404, {{"error", "not_found"}, {"message", e.what()}});
    } catch (const StateError& e) {
        send_json(res, 409, {{"error", "state"}, {"message", e.what()}});
    } catch (const ConfigError& e) {
        send_json(res, 400, {{"error", "config"}, {"message", e.what()}});
    } catch (const nlohmann::json::exception& e) {
        send_json(res, 400, {{"error", "bad_json"}, {"message", e.what()}});
    } catch (const std::exception& e) {
        send_json(res, 500, {{"error", "internal"}, {"message", e.what()}});
    }
}

std::string sse_frame(const JobEvent& ev) {
    return "id: " + std::to_string(ev.seq) + "\nevent: " + ev.kind + "\ndata: " + ev.data.dump() + "\n\n";
}

}  // namespace

struct HttpServer::Impl {
    explicit Impl(JobService& s) : service(s) {}

    JobService& service;
    httplib::Server server;
};

HttpServer::HttpServer(JobService& service) : impl_(std::make_unique<Impl>(service)) {
    auto& svc = impl_->service;
    auto& s = impl_->server;
    // The library default adds SO_REUSEPORT, which lets a second server
    // bind an occupied port.
    s.set_socket_options([](socket_t sock) {
        int yes = 1;
        setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
    });

    s.Post("/jobs", [&svc](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const auto spec = nlohmann::json::parse(req.body);
            const auto id = svc.submit(spec);
            send_json(res, 201, {{"id", id}, {"status", "pending"}});
        });
    });

    s.Get(R"(/jobs/([A-Za-z0-9_-]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { send_json(res, 200, svc.job(req.matches[1])); });
    });

    s.Get(R"(/jobs/([A-Za-z0-9_-]+)/events)", [&svc](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const std::string id = req.matches[1];
            std::int64_t after = 0;
            if (req.has_param("after")) {
                after = std::stoll(req.get_param_value("after"));
            } else if (req.has_header("Last-Event-ID")) {
                after = std::stoll(req.get_header_value("Last-Event-ID"));
            }
            svc.events(id, after);  // existence check before streaming
            auto cursor = std::make_shared<std::int64_t>(after);
            res.set_header("Cache-Control", "no-cache");
            res.set_chunked_content_provider("text/event-stream", [&svc, id, cursor](std::size_t, httplib::DataSink& sink) {
                for (const auto& ev : svc.events(id, *cursor)) {
                    const auto frame = sse_frame(ev);
                    if (!sink.write(frame.data(), frame.size())) {
                        return false;
                    }
                    *cursor = ev.seq;
                    if (ev.kind == "end") {
                        sink.done();
                        return true;
                    }
                }
                if (svc.stopped()) {
                    sink.done();
                    return true;
                }
                if (!svc.wait_for_events(id, *cursor, std::chrono::milliseconds(500)) && !sink.is_writable()) {
                    return false;
                }
                return true;
            });
        });
    });

    s.Post(R"(/jobs/([A-Za-z0-9_-]+)/select)", [&svc](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const auto body = nlohmann::json::parse(req.body);
            const auto ids = body.at("ids").get<std::vector<std::string>>();
            RefineOverride override;
            if (body.contains("strength")) {
                override.strength = body.at("strength").get<double>();
            }
            if (body.contains("steps")) {
                override.steps = body.at("steps").get<int>();
            }
            svc.select(req.matches[1], ids, override);
            send_json(res, 202, {{"id", std::string(req.matches[1])}, {"status", "stage2_running"}});
        });
    });

    s.Get(R"(/artifacts/([A-Za-z0-9]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const Bytes bytes = svc.artifact(req.matches[1]);
            res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
        });
    });

    s.Get("/vocab", [&svc](const httplib::Request&, httplib::Response& res) {
        res.set_content(svc.vocab().to_json(), "application/json");
    });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
    auto& s = impl_->server;
    if (port == 0) {
        const int bound = s.bind_to_any_port(host);
        if (bound < 0) {
            throw PortInUseError("cannot bind " + host + " to any port");
        }
        return bound;
    }
    if (!s.bind_to_port(host, port)) {
        throw PortInUseError("cannot bind " + host + ":" + std::to_string(port) + " (address in use?)");
    }
    return port;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
    if (impl_ && impl_->server.is_running()) {
        impl_->server.stop();
    }
}

}  // namespace segguide
