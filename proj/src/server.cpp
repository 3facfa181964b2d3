#include "adclick/server.hpp"

#include <fstream>

#include <httplib.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "adclick/image_io.hpp"

namespace adclick::server {

int http_status(ErrorCode code) {
    switch (code) {
        case ErrorCode::UnknownSession:
        case ErrorCode::UnknownImage:
        case ErrorCode::UnknownPrompt:
            return 404;
        case ErrorCode::ImmutableSession:
        case ErrorCode::ZeroClickExport:
        case ErrorCode::UninitializedSession:
            return 409;
        case ErrorCode::ModelNotLoaded:
        case ErrorCode::EncoderUnavailable:
            return 503;
        case ErrorCode::Io:
        case ErrorCode::NonFinite:
        case ErrorCode::Divergence:
        case ErrorCode::CheckpointMismatch:
            return 500;
        default:
            return 400;
    }
}

namespace {

void send_json(httplib::Response& res, const nlohmann::json& body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, ErrorCode code, const std::string& message) {
    send_json(res, {{"error", to_string(code)}, {"message", message}}, http_status(code));
}

template <typename F>
httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
        try {
            f(req, res);
        } catch (const Error& e) {
            send_error(res, e.code(), e.what());
        } catch (const nlohmann::json::exception& e) {
            send_error(res, ErrorCode::Schema, e.what());
        } catch (const std::exception& e) {
            res.status = 500;
            res.set_content(nlohmann::json{{"error", "internal"}, {"message", e.what()}}.dump(), "application/json");
        }
    };
}

nlohmann::json parse_body(const httplib::Request& req) {
    if (req.body.empty()) return nlohmann::json::object();
    try {
        auto j = nlohmann::json::parse(req.body);
        if (!j.is_object()) throw Error(ErrorCode::Schema, "request body must be a JSON object");
        return j;
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::Schema, std::string("request body is not JSON: ") + e.what());
    }
}

nlohmann::json prompt_json(const session::PromptChoice& p) {
    return {{"prompt_key", p.key ? nlohmann::json(p.key->str()) : nlohmann::json(nullptr)}, {"prompt_text", p.text}};
}

nlohmann::json mask_json(const clicks::AnomalyMask& mask) {
    const auto binary = mask.binarize();
    std::size_t fg = 0;
    for (auto v : binary.values()) fg += v ? 1 : 0;
    return {{"width", mask.cols()},
            {"height", mask.rows()},
            {"threshold", mask.threshold},
            {"foreground_pixels", fg},
            {"mask_png", io::base64_encode(io::encode_mask_png(binary))},
            {"overlay_png", io::base64_encode(io::encode_overlay_png(binary))}};
}

nlohmann::json view_json(const session::SessionView& v, bool with_mask) {
    nlohmann::json j = prompt_json(v.prompt);
    j["session_id"] = v.id;
    j["image_id"] = v.image_id;
    j["category"] = v.category;
    j["clicks"] = v.clicks;
    j["click_count"] = v.clicks.size();
    j["status"] = session::to_string(v.status);
    j["exported_path"] = v.exported_path ? nlohmann::json(v.exported_path->string()) : nlohmann::json(nullptr);
    if (with_mask) j.update(mask_json(v.mask));
    return j;
}

}  // namespace

struct HttpService::Impl {
    std::shared_ptr<session::SessionManager> sessions;
    httplib::Server server;
};

HttpService::HttpService(std::shared_ptr<session::SessionManager> sessions) : impl_(std::make_unique<Impl>()) {
    impl_->sessions = std::move(sessions);
    auto mgr = impl_->sessions;
    auto& s = impl_->server;

    s.set_pre_routing_handler([mgr](const httplib::Request&, httplib::Response&) {
        mgr->evict_idle(std::chrono::steady_clock::now());
        return httplib::Server::HandlerResponse::Unhandled;
    });

    s.Get("/api/health", guarded([mgr](const httplib::Request&, httplib::Response& res) {
              const auto& ctx = mgr->context();
              send_json(res, {{"status", "ok"},
                              {"model_loaded", static_cast<bool>(ctx.model)},
                              {"model_fingerprint", ctx.model_fingerprint},
                              {"sessions", mgr->size()}});
          }));

    s.Get("/api/images", guarded([mgr](const httplib::Request&, httplib::Response& res) {
              nlohmann::json list = nlohmann::json::array();
              for (const auto& e : mgr->context().images.entries()) {
                  list.push_back({{"id", e.id},
                                  {"category", e.category},
                                  {"defect_type", e.defect_type},
                                  {"has_mask", e.mask_path.has_value()}});
              }
              send_json(res, {{"images", list}});
          }));

    s.Get("/api/image", guarded([mgr](const httplib::Request& req, httplib::Response& res) {
              if (!req.has_param("id")) throw Error(ErrorCode::InvalidArgument, "missing 'id' query parameter");
              const auto& ctx = mgr->context();
              const auto& entry = ctx.images.find(req.get_param_value("id"));
              cv::Mat rgb = io::load_rgb(entry.path, ctx.image_size);
              cv::Mat bgr;
              cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
              std::vector<unsigned char> png;
              cv::imencode(".png", bgr, png);
              res.set_content(std::string(png.begin(), png.end()), "image/png");
          }));

    s.Get("/api/prompts", guarded([mgr](const httplib::Request& req, httplib::Response& res) {
              const auto& ctx = mgr->context();
              nlohmann::json list = nlohmann::json::array();
              if (ctx.text) {
                  const std::string category = req.has_param("category") ? req.get_param_value("category") : "";
                  for (const auto& [key, phrases] : ctx.text->corpus().entries()) {
                      if (!category.empty() && key.object != category) continue;
                      list.push_back({{"key", key.str()}, {"object", key.object}, {"defect", key.defect}, {"phrases", phrases}});
                  }
              }
              send_json(res, {{"prompts", list}});
          }));

    s.Post("/api/sessions", guarded([mgr](const httplib::Request& req, httplib::Response& res) {
               const auto body = parse_body(req);
               if (!body.contains("image_id")) throw Error(ErrorCode::Schema, "missing field 'image_id'");
               const auto id = mgr->open(body.at("image_id").get<std::string>(), body.value("category", std::string()),
                                         body.value("prompt_key", std::string()));
               send_json(res, view_json(mgr->view(id), true), 201);
           }));

    s.Get("/api/sessions/:id", guarded([mgr](const httplib::Request& req, httplib::Response& res) {
              send_json(res, view_json(mgr->view(req.path_params.at("id")), false));
          }));

    s.Delete("/api/sessions/:id", guarded([mgr](const httplib::Request& req, httplib::Response& res) {
                 mgr->abandon(req.path_params.at("id"));
                 send_json(res, {{"status", "abandoned"}});
             }));

    s.Post("/api/sessions/:id/clicks", guarded([mgr](const httplib::Request& req, httplib::Response& res) {
               const auto body = parse_body(req);
               if (!body.contains("x") || !body.contains("y")) throw Error(ErrorCode::Schema, "click needs 'x' and 'y'");
               if (!body.at("x").is_number_integer() || !body.at("y").is_number_integer()) {
                   throw Error(ErrorCode::Schema, "click coordinates must be integers");
               }
               clicks::Click click;
               click.x = body.at("x").get<int>();
               click.y = body.at("y").get<int>();
               click.polarity = body.value("positive", true) ? clicks::Polarity::Positive : clicks::Polarity::Negative;
               const auto id = req.path_params.at("id");
               const auto result = mgr->submit_click(id, click);
               auto j = view_json(mgr->view(id), false);
               j.update(mask_json(result.mask));
               j["iou"] = result.iou ? nlohmann::json(*result.iou) : nlohmann::json(nullptr);
               send_json(res, j);
           }));

    s.Post("/api/sessions/:id/undo", guarded([mgr](const httplib::Request& req, httplib::Response& res) {
               const auto id = req.path_params.at("id");
               mgr->undo(id);
               send_json(res, view_json(mgr->view(id), true));
           }));

    s.Post("/api/sessions/:id/prompt", guarded([mgr](const httplib::Request& req, httplib::Response& res) {
               const auto body = parse_body(req);
               session::PromptChoice choice;
               if (body.contains("prompt_key")) {
                   choice = mgr->set_prompt(req.path_params.at("id"), body.at("prompt_key").get<std::string>(), false);
               } else if (body.contains("text")) {
                   choice = mgr->set_prompt(req.path_params.at("id"), body.at("text").get<std::string>(), true);
               } else {
                   throw Error(ErrorCode::Schema, "prompt needs 'prompt_key' or 'text'");
               }
               send_json(res, prompt_json(choice));
           }));

    s.Get("/api/sessions/:id/mask", guarded([mgr](const httplib::Request& req, httplib::Response& res) {
              send_json(res, view_json(mgr->view(req.path_params.at("id")), true));
          }));

    s.Post("/api/sessions/:id/export", guarded([mgr](const httplib::Request& req, httplib::Response& res) {
               const auto body = parse_body(req);
               const auto path = mgr->export_label(req.path_params.at("id"), body.value("destination", std::string()));
               auto sidecar = path;
               sidecar.replace_extension(".json");
               send_json(res, {{"path", path.string()}, {"sidecar", sidecar.string()}, {"status", "exported"}});
           }));
}

HttpService::~HttpService() { stop(); }

int HttpService::bind(const std::string& host, int port) {
    if (port == 0) {
        const int bound = impl_->server.bind_to_any_port(host);
        if (bound < 0) throw Error(ErrorCode::Io, "cannot bind " + host);
        return bound;
    }
    if (!impl_->server.bind_to_port(host, port)) throw Error(ErrorCode::Io, "cannot bind " + host + ":" + std::to_string(port));
    return port;
}

void HttpService::listen() { impl_->server.listen_after_bind(); }

void HttpService::stop() {
    if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

void HttpService::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace adclick::server
