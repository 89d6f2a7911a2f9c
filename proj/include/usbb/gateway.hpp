#pragma once

#include <atomic>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "usbb/bridge.hpp"
#include "usbb/error.hpp"

namespace httplib {
class Server;
}

namespace usbb::gateway {

using nlohmann::json;

// Wire projections. Field names are snake_case and stable; optional values
// are always present and null when unset.
json to_json(const fat::VolumeInfo& info);
json to_json(const bridge::PortState& state);
json to_json(const bridge::TransferJob& job);
json to_json(const fat::DirEntry& entry);
json to_json(const bridge::Listing& listing);
json to_json(const bridge::BridgeEvent& event);
json error_body(const Error& e);
std::string iso8601(bridge::TimePoint tp);

int http_status(ErrorCode code);

// Server-push framing of one event ("id:", "event:", "data:" lines).
std::string sse_frame(const bridge::BridgeEvent& event);

/// Which image sits in which port, shared by CLI invocations and `serve`.
class StateFile {
 public:
  struct Entry {
    std::string image;
    bool read_only = false;
  };

  explicit StateFile(std::filesystem::path path) : path_(std::move(path)) {}
  // --state, else $USBBRIDGE_STATE, else ./.usbbridge.json
  static std::filesystem::path default_path();

  const std::filesystem::path& path() const { return path_; }
  std::map<usb::Port, Entry> load() const;
  void set(usb::Port port, std::optional<Entry> entry);

 private:
  std::map<usb::Port, Entry> load_locked() const;
  void save_locked(const std::map<usb::Port, Entry>& entries) const;
  std::filesystem::path path_;
  mutable std::mutex mutex_;
};

// Plugs every image recorded in the state file into the bridge and waits
// for the probes. Images that can no longer be opened are skipped.
void restore(bridge::Bridge& bridge, const StateFile& state,
             const std::vector<usb::Port>& ports = {usb::Port::kA, usb::Port::kB});

struct ApiResponse {
  int status = 200;
  json body;
};

/// Request routing for the HTTP service, usable without a socket.
class ApiService {
 public:
  ApiService(std::shared_ptr<bridge::Bridge> bridge, std::shared_ptr<StateFile> state = nullptr)
      : bridge_(std::move(bridge)), state_(std::move(state)) {}

  ApiResponse handle(const std::string& method, const std::string& path,
                     const std::map<std::string, std::string>& query, const std::string& body);

  json snapshot();
  bridge::Bridge& bridge() { return *bridge_; }

 private:
  ApiResponse route(const std::string& method, const std::vector<std::string>& parts,
                    const std::map<std::string, std::string>& query, const std::string& body);

  std::shared_ptr<bridge::Bridge> bridge_;
  std::shared_ptr<StateFile> state_;
};

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
};

/// HTTP front end over ApiService plus the /v1/events stream.
class HttpServer {
 public:
  explicit HttpServer(std::shared_ptr<ApiService> api);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  // Binds and starts serving on a background thread. Returns the bound port.
  int start(const ServerOptions& options);
  void stop();
  int port() const { return port_; }

 private:
  std::shared_ptr<ApiService> api_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  std::atomic<bool> stopping_{false};
  int port_ = 0;
};

// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,
  kExitNotFound = 3,
  kExitDevice = 4,
  kExitTransfer = 5,
};

int exit_code_for(ErrorCode code, bool transfer);

// Runs the command line. args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace usbb::gateway
