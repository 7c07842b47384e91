#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>

#include <json.hpp>

#include "cvil/density.hpp"
#include "cvil/session.hpp"

namespace httplib {
class Server;
}

namespace cvil {

struct ServiceOptions {
  std::size_t default_preview_limit = 24;
  std::size_t max_preview_limit = 10000;
  // Static UI bundle mounted at "/", when set.
  std::optional<std::filesystem::path> ui_dir;
};

// HTTP status used for an error code in the JSON envelope.
int http_status_for(const std::string& code);

// HTTP/JSON front end over one Session. Every JSON response uses the
// envelope {ok, data | error{code, message}, session_sequence}.
class ApiServer {
 public:
  ApiServer(std::shared_ptr<Session> session, ServiceOptions options = {});
  ~ApiServer();

  ApiServer(const ApiServer&) = delete;
  ApiServer& operator=(const ApiServer&) = delete;

  // Binds without serving; returns the bound port. Port 0 picks a free one.
  // Throws io_error when the address is unavailable.
  int bind(const std::string& host, int port);
  // Serves until stop(); call after bind().
  void listen();
  void stop();
  bool running() const;

  Session& session() noexcept { return *session_; }

 private:
  void install_routes();
  DensityCurve density_for(ClassId c, const SessionSnapshot& snap);

  std::shared_ptr<Session> session_;
  ServiceOptions options_;
  std::unique_ptr<httplib::Server> server_;

  std::mutex cache_mutex_;
  std::uint64_t cache_sequence_ = ~std::uint64_t{0};
  std::map<ClassId, DensityCurve> density_cache_;
};

nlohmann::json to_json(const DensityCurve& curve);

}  // namespace cvil
