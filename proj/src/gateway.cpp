#include "usbb/gateway.hpp"

#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

#include <httplib.h>

namespace usbb::gateway {

namespace {

json nullable(const std::optional<std::string>& s) { return s ? json(*s) : json(nullptr); }

json nullable_code(const std::optional<ErrorCode>& c) {
  return c ? json(std::string(to_string(*c))) : json(nullptr);
}

json nullable_time(const std::optional<bridge::TimePoint>& tp) {
  return tp ? json(iso8601(*tp)) : json(nullptr);
}

std::string dos_timestamp(std::uint16_t date, std::uint16_t time) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04u-%02u-%02uT%02u:%02u:%02u", 1980u + (date >> 9),
                (date >> 5) & 0x0Fu, date & 0x1Fu, time >> 11, (time >> 5) & 0x3Fu,
                (time & 0x1Fu) * 2);
  return buf;
}

std::vector<std::string> split(const std::string& path) {
  std::vector<std::string> out;
  std::stringstream ss(path);
  std::string part;
  while (std::getline(ss, part, '/')) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

usb::Port port_arg(const std::string& text) {
  auto p = usb::parse_port(text);
  if (!p) throw Error(ErrorCode::kNotFound, "unknown port " + text);
  return *p;
}

json parse_body(const std::string& body) {
  if (body.empty()) return json::object();
  json j = json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw Error(ErrorCode::kInvalidArgument, "body is not a JSON object");
  }
  return j;
}

template <typename T>
T field(const json& j, const char* name, std::optional<T> fallback = std::nullopt) {
  auto it = j.find(name);
  if (it == j.end() || it->is_null()) {
    if (fallback) return *fallback;
    throw Error(ErrorCode::kInvalidArgument, std::string("missing field ") + name);
  }
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::kInvalidArgument, std::string("bad type for field ") + name);
  }
}

ApiResponse error_response(const Error& e) { return {http_status(e.code()), error_body(e)}; }

}  // namespace

std::string iso8601(bridge::TimePoint tp) {
  std::time_t t = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  ::gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json to_json(const fat::VolumeInfo& info) {
  return {
      {"variant", std::string(fat::to_string(info.variant))},
      {"label", info.label},
      {"total_bytes", info.total_bytes},
      {"free_bytes", info.free_bytes},
      {"bytes_per_cluster", info.bytes_per_cluster},
      {"cluster_count", info.cluster_count},
      {"free_clusters", info.free_clusters},
  };
}

json to_json(const bridge::PortState& s) {
  return {
      {"port", std::string(usb::to_string(s.port))},
      {"status", std::string(bridge::to_string(s.status))},
      {"image", s.image.empty() ? json(nullptr) : json(s.image)},
      {"read_only", s.read_only},
      {"vendor", s.vendor.empty() ? json(nullptr) : json(s.vendor)},
      {"product", s.product.empty() ? json(nullptr) : json(s.product)},
      {"volume", s.volume ? to_json(*s.volume) : json(nullptr)},
      {"error", nullable(s.error)},
      {"error_code", nullable_code(s.error_code)},
  };
}

json to_json(const bridge::TransferJob& j) {
  return {
      {"id", j.id},
      {"src_port", std::string(usb::to_string(j.src.port))},
      {"src_path", j.src.path},
      {"dst_port", std::string(usb::to_string(j.dst.port))},
      {"dst_path", j.dst.path},
      {"overwrite", j.overwrite},
      {"recursive", j.recursive},
      {"state", std::string(bridge::to_string(j.state))},
      {"total_bytes", j.total_bytes},
      {"copied_bytes", j.copied_bytes},
      {"total_files", j.total_files},
      {"copied_files", j.copied_files},
      {"error", nullable(j.error)},
      {"error_code", nullable_code(j.error_code)},
      {"started", nullable_time(j.started)},
      {"finished", nullable_time(j.finished)},
  };
}

json to_json(const fat::DirEntry& e) {
  return {
      {"name", e.name()},
      {"type", e.is_directory() ? "dir" : "file"},
      {"size", e.is_directory() ? 0u : e.size_bytes},
      {"modified", dos_timestamp(e.modify_date, e.modify_time)},
  };
}

json to_json(const bridge::Listing& l) {
  json entries = json::array();
  for (const auto& e : l.entries) entries.push_back(to_json(e));
  return {
      {"port", std::string(usb::to_string(l.port))},
      {"path", l.path},
      {"entries", std::move(entries)},
      {"volume", to_json(l.info)},
  };
}

json to_json(const bridge::BridgeEvent& ev) {
  return {
      {"seq", ev.seq},
      {"kind", std::string(bridge::to_string(ev.kind))},
      {"port", ev.port ? to_json(*ev.port) : json(nullptr)},
      {"job", ev.job ? to_json(*ev.job) : json(nullptr)},
  };
}

json error_body(const Error& e) {
  return {{"error", {{"code", std::string(to_string(e.code()))}, {"message", bridge::error_text(e)}}}};
}

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kSamePort:
    case ErrorCode::kNameInvalid:
    case ErrorCode::kIsADirectory:
    case ErrorCode::kNotADirectory:
    case ErrorCode::kSizeOutOfRange:
      return 400;
    case ErrorCode::kNotFound:
    case ErrorCode::kUnknownJob:
      return 404;
    case ErrorCode::kPortOccupied:
    case ErrorCode::kPortEmpty:
    case ErrorCode::kPortNotReady:
    case ErrorCode::kExistsNoOverwrite:
    case ErrorCode::kReadOnlyVolume:
    case ErrorCode::kDirNotEmpty:
      return 409;
    case ErrorCode::kDestFull:
    case ErrorCode::kDiskFull:
      return 507;
    default:
      return 500;
  }
}

std::string sse_frame(const bridge::BridgeEvent& ev) {
  return "id: " + std::to_string(ev.seq) + "\nevent: " + std::string(bridge::to_string(ev.kind)) +
         "\ndata: " + to_json(ev).dump() + "\n\n";
}

// ---------------------------------------------------------------------------
// State file

std::filesystem::path StateFile::default_path() {
  if (const char* env = std::getenv("USBBRIDGE_STATE"); env && *env) return env;
  return ".usbbridge.json";
}

std::map<usb::Port, StateFile::Entry> StateFile::load() const {
  std::lock_guard lock(mutex_);
  return load_locked();
}

std::map<usb::Port, StateFile::Entry> StateFile::load_locked() const {
  std::map<usb::Port, Entry> out;
  std::ifstream in(path_);
  if (!in) return out;
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw Error(ErrorCode::kInvalidArgument, "state file " + path_.string() + " is not valid JSON");
  }
  const json ports = j.value("ports", json::object());
  for (const auto& [name, e] : ports.items()) {
    auto port = usb::parse_port(name);
    if (!port || !e.is_object() || !e.contains("image")) continue;
    out[*port] = Entry{e["image"].get<std::string>(), e.value("read_only", false)};
  }
  return out;
}

void StateFile::set(usb::Port port, std::optional<Entry> entry) {
  std::lock_guard lock(mutex_);
  auto entries = load_locked();
  if (entry) {
    entries[port] = *entry;
  } else {
    entries.erase(port);
  }
  save_locked(entries);
}

void StateFile::save_locked(const std::map<usb::Port, Entry>& entries) const {
  json ports = json::object();
  for (const auto& [port, e] : entries) {
    ports[std::string(usb::to_string(port))] = {{"image", e.image}, {"read_only", e.read_only}};
  }
  auto tmp = path_;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << json{{"ports", ports}}.dump(2) << "\n";
    if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path_, ec);
  if (ec) throw Error(ErrorCode::kIoFailure, "cannot replace " + path_.string() + ": " + ec.message());
}

void restore(bridge::Bridge& bridge, const StateFile& state, const std::vector<usb::Port>& ports) {
  auto entries = state.load();
  std::vector<usb::Port> plugged;
  for (usb::Port p : ports) {
    auto it = entries.find(p);
    if (it == entries.end()) continue;
    try {
      bridge.attach_image(p, it->second.image, it->second.read_only);
      plugged.push_back(p);
    } catch (const Error&) {
      // A missing image reads as an empty port.
    }
  }
  for (usb::Port p : plugged) bridge.wait_settled(p);
}

// ---------------------------------------------------------------------------
// API

json ApiService::snapshot() {
  json ports = json::array();
  for (const auto& s : bridge_->ports()) ports.push_back(to_json(s));
  json jobs = json::array();
  for (const auto& j : bridge_->jobs()) jobs.push_back(to_json(j));
  return {{"ports", std::move(ports)}, {"jobs", std::move(jobs)}};
}

ApiResponse ApiService::handle(const std::string& method, const std::string& path,
                               const std::map<std::string, std::string>& query,
                               const std::string& body) {
  try {
    auto parts = split(path);
    if (parts.empty() || parts[0] != "v1") {
      throw Error(ErrorCode::kNotFound, "no route for " + path);
    }
    parts.erase(parts.begin());
    return route(method, parts, query, body);
  } catch (const Error& e) {
    return error_response(e);
  } catch (const std::exception& e) {
    return error_response(Error(ErrorCode::kIoFailure, e.what()));
  }
}

ApiResponse ApiService::route(const std::string& method, const std::vector<std::string>& p,
                              const std::map<std::string, std::string>& query,
                              const std::string& body) {
  const bool get = method == "GET";
  const bool post = method == "POST";
  const std::size_t n = p.size();

  if (n == 1 && p[0] == "snapshot" && get) return {200, snapshot()};

  if (n >= 1 && p[0] == "ports") {
    if (n == 1 && get) return {200, {{"ports", snapshot()["ports"]}}};
    if (n >= 2) {
      usb::Port port = port_arg(p[1]);
      if (n == 2 && get) return {200, to_json(bridge_->port_state(port))};
      if (n == 3 && post && p[2] == "attach") {
        json req = parse_body(body);
        auto image = field<std::string>(req, "image");
        bool ro = field<bool>(req, "read_only", false);
        std::filesystem::path abs = std::filesystem::absolute(image);
        bridge_->attach_image(port, abs, ro);
        auto state = bridge_->wait_settled(port);
        if (state_) state_->set(port, StateFile::Entry{abs.string(), ro});
        return {200, to_json(state)};
      }
      if (n == 3 && post && p[2] == "detach") {
        auto state = bridge_->detach(port);
        if (state_) state_->set(port, std::nullopt);
        return {200, to_json(state)};
      }
    }
  }

  if (n == 2 && p[0] == "fs" && get) {
    usb::Port port = port_arg(p[1]);
    auto it = query.find("path");
    std::string path = it == query.end() || it->second.empty() ? "/" : it->second;
    return {200, to_json(bridge_->browse(port, path))};
  }

  if (n >= 1 && p[0] == "jobs") {
    if (n == 1 && get) return {200, {{"jobs", snapshot()["jobs"]}}};
    if (n == 1 && post) {
      json req = parse_body(body);
      bridge::CopyRequest r;
      r.src = {port_arg(field<std::string>(req, "src_port")), field<std::string>(req, "src_path")};
      r.dst = {port_arg(field<std::string>(req, "dst_port")), field<std::string>(req, "dst_path")};
      r.overwrite = field<bool>(req, "overwrite", false);
      r.recursive = field<bool>(req, "recursive", false);
      return {202, to_json(bridge_->start_copy(r))};
    }
    if (n == 2 && get) return {200, to_json(bridge_->job_status(p[1]))};
    if (n == 3 && post && p[2] == "cancel") return {200, to_json(bridge_->cancel(p[1]))};
  }

  throw Error(ErrorCode::kNotFound, "no route for " + method + " /v1/" + [&] {
    std::string s;
    for (const auto& part : p) s += (s.empty() ? "" : "/") + part;
    return s;
  }());
}

// ---------------------------------------------------------------------------
// HTTP

HttpServer::HttpServer(std::shared_ptr<ApiService> api)
    : api_(std::move(api)), server_(std::make_unique<httplib::Server>()) {
  server_->set_default_headers({{"Access-Control-Allow-Origin", "*"}});

  server_->Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });

  server_->Get("/v1/events", [this](const httplib::Request&, httplib::Response& res) {
    std::shared_ptr<bridge::Subscription> sub = api_->bridge().subscribe();
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider(
        "text/event-stream",
        [this, sub](std::size_t, httplib::DataSink& sink) {
          if (stopping_) {
            sink.done();
            return true;
          }
          auto ev = sub->next(std::chrono::milliseconds(500));
          if (ev) {
            std::string frame = sse_frame(*ev);
            return sink.write(frame.data(), frame.size());
          }
          if (sub->closed()) {
            // Dropped for falling behind, or the bridge shut down.
            sink.done();
            return true;
          }
          static const std::string ping = ": ping\n\n";
          return sink.write(ping.data(), ping.size());
        },
        [sub](bool) { sub->close(); });
  });

  auto dispatch = [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query(req.params.begin(), req.params.end());
    ApiResponse r = api_->handle(req.method, req.path, query, req.body);
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  server_->Get(R"(/v1/.*)", dispatch);
  server_->Post(R"(/v1/.*)", dispatch);
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const ServerOptions& options) {
  if (options.port == 0) {
    port_ = server_->bind_to_any_port(options.host);
  } else {
    port_ = server_->bind_to_port(options.host, options.port) ? options.port : -1;
  }
  if (port_ <= 0) {
    throw Error(ErrorCode::kIoFailure,
                "cannot listen on " + options.host + ":" + std::to_string(options.port));
  }
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port_;
}

void HttpServer::stop() {
  stopping_ = true;
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace usbb::gateway
