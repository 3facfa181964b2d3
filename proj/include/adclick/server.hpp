#pragma once

#include <memory>
#include <string>

#include "adclick/session.hpp"

namespace adclick::server {

/// HTTP status used for an error code.
int http_status(ErrorCode code);

/// JSON/HTTP front end of a SessionManager.
///
///   GET    /api/health
///   GET    /api/images                     list of images
///   GET    /api/image?id=...               image PNG at model resolution
///   GET    /api/prompts[?category=...]     corpus keys and phrases
///   POST   /api/sessions                   {"image_id", "category"?, "prompt_key"?}
///   GET    /api/sessions/{id}              session summary
///   POST   /api/sessions/{id}/clicks       {"x", "y", "positive"}
///   POST   /api/sessions/{id}/undo
///   POST   /api/sessions/{id}/prompt       {"prompt_key"} or {"text"}
///   GET    /api/sessions/{id}/mask         base64 mask PNG and RGBA overlay PNG
///   POST   /api/sessions/{id}/export       {"destination"?}
///   DELETE /api/sessions/{id}
///
/// Errors come back as {"error": "<code>", "message": "..."} with a 4xx/5xx status.
class HttpService {
public:
    explicit HttpService(std::shared_ptr<session::SessionManager> sessions);
    ~HttpService();

    /// Binds to `host`; port 0 picks a free port. Returns the bound port.
    int bind(const std::string& host, int port);
    /// Serves until stop(); call after bind().
    void listen();
    void stop();
    void wait_until_ready() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace adclick::server
