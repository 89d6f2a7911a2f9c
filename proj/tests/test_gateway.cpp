#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "support.hpp"
#include "usbb/gateway.hpp"

using namespace usbb;
using namespace usbb::gateway;
using namespace std::chrono_literals;
using testsupport::TempDir;
using usb::Port;

namespace {

constexpr long long kFixedTime = 1700000000;

fat::Clock fixed_clock() {
  return [] { return std::chrono::system_clock::time_point(std::chrono::seconds(kFixedTime)); };
}

std::uint64_t file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  Bytes raw(std::istreambuf_iterator<char>(in), {});
  return testsupport::fnv1a(raw);
}

struct Cli {
  int status = 0;
  std::string out;
  std::string err;
};

Cli cli(std::vector<std::string> args) {
  ::setenv("USBBRIDGE_FIXED_TIME", std::to_string(kFixedTime).c_str(), 1);
  std::ostringstream out, err;
  Cli r;
  r.status = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::shared_ptr<bridge::Bridge> make_bridge() {
  bridge::BridgeOptions opts;
  opts.clock = fixed_clock();
  return bridge::Bridge::create(std::move(opts));
}

void make_fat(const std::string& path, std::uint64_t sectors, fat::Variant v = fat::Variant::kFat16) {
  std::shared_ptr<blockdev::BlockImage> img = blockdev::BlockImage::create(path, sectors);
  fat::mkfs(img, v, {.sectors_per_cluster = 1}, fixed_clock());
}

void populate(const std::string& path, const std::vector<std::pair<std::string, Bytes>>& files,
              const std::vector<std::string>& dirs = {}) {
  std::shared_ptr<blockdev::BlockImage> img = blockdev::BlockImage::open(path);
  auto vol = fat::mount(img, fixed_clock());
  for (const auto& d : dirs) vol->create_dir(d);
  for (const auto& [p, data] : files) vol->write_file(p, data);
  vol->flush();
}

struct Api {
  std::shared_ptr<ApiService> service;
  explicit Api(std::shared_ptr<StateFile> state = nullptr)
      : service(std::make_shared<ApiService>(make_bridge(), std::move(state))) {}
  ApiResponse get(const std::string& path, std::map<std::string, std::string> query = {}) {
    return service->handle("GET", path, query, "");
  }
  ApiResponse post(const std::string& path, const json& body = json::object()) {
    return service->handle("POST", path, {}, body.dump());
  }
  ApiResponse post_raw(const std::string& path, const std::string& body) {
    return service->handle("POST", path, {}, body);
  }
};

std::string code(const ApiResponse& r) { return r.body["error"]["code"]; }

json wait_job(Api& api, const std::string& id) {
  json last;
  for (int i = 0; i < 2000; ++i) {
    last = api.get("/v1/jobs/" + id).body;
    if (last["state"] == "done" || last["state"] == "failed" || last["state"] == "cancelled") break;
    std::this_thread::sleep_for(5ms);
  }
  return last;
}

std::set<std::string> keys(const json& j) {
  std::set<std::string> out;
  for (const auto& [k, v] : j.items()) out.insert(k);
  return out;
}

}  // namespace

TEST_CASE("projections have a fixed snake_case schema") {
  bridge::PortState empty;
  json p = to_json(empty);
  CHECK(keys(p) == std::set<std::string>{"port", "status", "image", "read_only", "vendor", "product",
                                         "volume", "error", "error_code"});
  CHECK(p["status"] == "empty");
  CHECK(p["image"].is_null());
  CHECK(p["volume"].is_null());

  bridge::TransferJob job;
  job.id = "job-7";
  job.dst.port = Port::kB;
  job.error_code = ErrorCode::kDestFull;
  job.started = std::chrono::system_clock::time_point(std::chrono::seconds(kFixedTime));
  json j = to_json(job);
  CHECK(keys(j) == std::set<std::string>{"id", "src_port", "src_path", "dst_port", "dst_path", "overwrite",
                                         "recursive", "state", "total_bytes", "copied_bytes", "total_files",
                                         "copied_files", "error", "error_code", "started", "finished"});
  CHECK(j["dst_port"] == "B");
  CHECK(j["state"] == "queued");
  CHECK(j["error_code"] == "dest-full");
  CHECK(j["started"] == "2023-11-14T22:13:20Z");
  CHECK(j["finished"].is_null());

  bridge::BridgeEvent ev{42, bridge::EventKind::kJobProgress, std::nullopt, job};
  CHECK(sse_frame(ev) == "id: 42\nevent: job-progress\ndata: " + to_json(ev).dump() + "\n\n");
  CHECK(to_json(ev)["kind"] == "job-progress");
}

TEST_CASE("error codes map onto HTTP statuses") {
  CHECK(http_status(ErrorCode::kInvalidArgument) == 400);
  CHECK(http_status(ErrorCode::kSamePort) == 400);
  CHECK(http_status(ErrorCode::kNotFound) == 404);
  CHECK(http_status(ErrorCode::kUnknownJob) == 404);
  CHECK(http_status(ErrorCode::kPortOccupied) == 409);
  CHECK(http_status(ErrorCode::kExistsNoOverwrite) == 409);
  CHECK(http_status(ErrorCode::kDestFull) == 507);
  CHECK(http_status(ErrorCode::kIoFailed) == 500);
}

TEST_CASE("API: ports, attach and browse") {
  TempDir dir;
  make_fat(dir.file("a.img"), 32768);
  populate(dir.file("a.img"), {{"/readme.txt", Bytes(123, 'r')}}, {"/docs"});
  Api api;

  auto r = api.get("/v1/ports");
  REQUIRE(r.status == 200);
  REQUIRE(r.body["ports"].size() == 2);
  CHECK(r.body["ports"][0]["port"] == "A");
  CHECK(r.body["ports"][0]["status"] == "empty");
  CHECK(r.body["ports"][1]["status"] == "empty");

  r = api.post("/v1/ports/A/attach", {{"image", dir.file("a.img")}});
  CHECK(r.status == 200);
  CHECK(r.body["status"] == "ready");
  CHECK(r.body["volume"]["variant"] == "FAT16");
  r = api.post("/v1/ports/A/attach", {{"image", dir.file("a.img")}});
  CHECK(r.status == 409);
  CHECK(code(r) == "port-occupied");

  r = api.get("/v1/fs/A");
  REQUIRE(r.status == 200);
  REQUIRE(r.body["entries"].size() == 2);
  CHECK(r.body["entries"][0]["name"] == "docs");
  CHECK(r.body["entries"][0]["type"] == "dir");
  CHECK(r.body["entries"][1]["name"] == "readme.txt");
  CHECK(r.body["entries"][1]["size"] == 123);
  CHECK(r.body["entries"][1]["modified"] == "2023-11-14T22:13:20");
  CHECK(r.body["volume"]["free_bytes"] == api.get("/v1/ports/A").body["volume"]["free_bytes"]);
  CHECK(api.get("/v1/fs/A", {{"path", "/docs"}}).body["entries"].empty());

  CHECK(api.get("/v1/fs/A", {{"path", "/missing"}}).status == 404);
  CHECK(api.get("/v1/fs/B").status == 409);
  CHECK(api.get("/v1/fs/C").status == 404);
  CHECK(api.post("/v1/ports/C/attach", {{"image", dir.file("a.img")}}).status == 404);
  CHECK(api.post("/v1/ports/B/attach", {{"image", dir.file("nope.img")}}).status == 404);
  CHECK(api.post_raw("/v1/ports/B/attach", "{not json").status == 400);
  CHECK(api.post("/v1/ports/B/attach", {{"read_only", true}}).status == 400);
  CHECK(api.post("/v1/ports/B/attach", {{"image", 5}}).status == 400);
  CHECK(api.get("/v1/nothing").status == 404);
  CHECK(api.get("/elsewhere").status == 404);
  CHECK(api.post("/v1/ports/B/detach").status == 409);

  r = api.post("/v1/ports/A/detach");
  CHECK(r.status == 200);
  CHECK(r.body["status"] == "empty");
}

TEST_CASE("API: a failed mount is reported on the port") {
  TempDir dir;
  blockdev::BlockImage::create(dir.file("blank.img"), 4096);
  Api api;
  auto r = api.post("/v1/ports/B/attach", {{"image", dir.file("blank.img")}});
  CHECK(r.status == 200);
  CHECK(r.body["status"] == "failed");
  CHECK(r.body["error_code"] == "bad-signature");
  CHECK(r.body["volume"].is_null());
}

TEST_CASE("API: jobs") {
  TempDir dir;
  make_fat(dir.file("a.img"), 32768);
  make_fat(dir.file("b.img"), 8192);
  std::mt19937_64 rng(21);
  populate(dir.file("a.img"), {{"/x.bin", testsupport::random_bytes(rng, 1 << 20)},
                               {"/huge.bin", testsupport::random_bytes(rng, 5 << 20)}});
  Api api;
  api.post("/v1/ports/A/attach", {{"image", dir.file("a.img")}});
  api.post("/v1/ports/B/attach", {{"image", dir.file("b.img")}});

  json req = {{"src_port", "A"}, {"src_path", "/x.bin"}, {"dst_port", "B"}, {"dst_path", "/"}};
  auto r = api.post("/v1/jobs", req);
  REQUIRE(r.status == 202);
  std::string id = r.body["id"];
  CHECK(r.body["dst_path"] == "/x.bin");
  std::uint64_t last = 0;
  json job;
  for (int i = 0; i < 2000; ++i) {
    job = api.get("/v1/jobs/" + id).body;
    CHECK(job["copied_bytes"].get<std::uint64_t>() >= last);
    last = job["copied_bytes"];
    if (job["state"] == "done") break;
    std::this_thread::sleep_for(1ms);
  }
  CHECK(job["state"] == "done");
  CHECK(job["copied_bytes"] == 1048576);

  r = api.post("/v1/jobs", req);
  CHECK(r.status == 409);
  CHECK(code(r) == "exists-no-overwrite");
  req["overwrite"] = true;
  r = api.post("/v1/jobs", req);
  CHECK(r.status == 202);
  CHECK(wait_job(api, r.body["id"])["state"] == "done");

  r = api.post("/v1/jobs", {{"src_port", "A"}, {"src_path", "/huge.bin"}, {"dst_port", "B"}, {"dst_path", "/"}});
  CHECK(r.status == 507);
  CHECK(code(r) == "dest-full");
  r = api.post("/v1/jobs", {{"src_port", "A"}, {"src_path", "/x.bin"}, {"dst_port", "A"}, {"dst_path", "/y"}});
  CHECK(r.status == 400);
  CHECK(code(r) == "same-port");
  r = api.post("/v1/jobs", {{"src_port", "A"}, {"src_path", "/none"}, {"dst_port", "B"}, {"dst_path", "/"}});
  CHECK(r.status == 404);
  CHECK(api.post("/v1/jobs", {{"src_port", "A"}}).status == 400);
  CHECK(api.get("/v1/jobs/job-99").status == 404);
  CHECK(api.post("/v1/jobs/job-99/cancel").status == 404);

  r = api.post("/v1/jobs/" + id + "/cancel");
  CHECK(r.status == 200);
  CHECK(r.body["state"] == "done");
  CHECK(api.get("/v1/jobs").body["jobs"].size() == 2);
  auto snap = api.get("/v1/snapshot").body;
  CHECK(snap["ports"].size() == 2);
  CHECK(snap["jobs"].size() == 2);
}

TEST_CASE("API: snapshots are stable and survive a service restart") {
  TempDir dir;
  make_fat(dir.file("a.img"), 32768);
  make_fat(dir.file("b.img"), 140000, fat::Variant::kFat32);
  populate(dir.file("a.img"), {{"/f.txt", Bytes(4000, 'f')}});
  auto state = std::make_shared<StateFile>(dir.file("state.json"));
  json first;
  {
    Api api(state);
    api.post("/v1/ports/A/attach", {{"image", dir.file("a.img")}});
    api.post("/v1/ports/B/attach", {{"image", dir.file("b.img")}, {"read_only", true}});
    first = api.get("/v1/ports").body;
    CHECK(api.get("/v1/ports").body.dump() == first.dump());
  }
  CHECK(first["ports"][1]["read_only"] == true);
  auto bridge = make_bridge();
  restore(*bridge, *state);
  auto restarted = std::make_shared<ApiService>(bridge, state);
  CHECK(restarted->handle("GET", "/v1/ports", {}, "").body.dump() == first.dump());

  restarted->handle("POST", "/v1/ports/A/detach", {}, "");
  CHECK(state->load().count(Port::kA) == 0);
  CHECK(state->load().at(Port::kB).read_only);
}

TEST_CASE("HTTP: loopback service with event stream") {
  TempDir dir;
  make_fat(dir.file("a.img"), 32768);
  make_fat(dir.file("b.img"), 32768);
  std::mt19937_64 rng(22);
  populate(dir.file("a.img"), {{"/x.bin", testsupport::random_bytes(rng, 1 << 20)}});
  auto api = std::make_shared<ApiService>(make_bridge());
  HttpServer server(api);
  int port = server.start({"127.0.0.1", 0});
  REQUIRE(port > 0);

  httplib::Client c("127.0.0.1", port);
  auto res = c.Get("/v1/ports");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(res->get_header_value("Content-Type") == "application/json");
  auto ports = json::parse(res->body);
  CHECK(ports["ports"][0]["status"] == "empty");
  CHECK(ports["ports"][1]["status"] == "empty");

  // Event stream reader on its own connection.
  std::mutex mu;
  std::vector<json> events;
  std::atomic<bool> finished{false};
  std::thread reader([&] {
    httplib::Client sc("127.0.0.1", port);
    sc.set_read_timeout(10, 0);
    std::string buffer;
    sc.Get("/v1/events", [&](const char* data, std::size_t len) {
      buffer.append(data, len);
      std::size_t end;
      while ((end = buffer.find("\n\n")) != std::string::npos) {
        std::string frame = buffer.substr(0, end);
        buffer.erase(0, end + 2);
        auto pos = frame.find("data: ");
        if (pos == std::string::npos) continue;
        json ev = json::parse(frame.substr(pos + 6));
        std::lock_guard lock(mu);
        events.push_back(ev);
        if (ev["kind"] == "job-finished") finished = true;
      }
      return !finished.load();
    });
  });
  // Give the stream a moment to subscribe before anything happens.
  for (int i = 0; i < 200; ++i) {
    std::this_thread::sleep_for(5ms);
  }

  res = c.Post("/v1/ports/A/attach", json{{"image", dir.file("a.img")}}.dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == 200);
  res = c.Post("/v1/ports/A/attach", json{{"image", dir.file("a.img")}}.dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == 409);
  res = c.Post("/v1/ports/B/attach", json{{"image", dir.file("b.img")}}.dump(), "application/json");
  CHECK(res->status == 200);

  res = c.Post("/v1/jobs",
               json{{"src_port", "A"}, {"src_path", "/x.bin"}, {"dst_port", "B"}, {"dst_path", "/"}}.dump(),
               "application/json");
  REQUIRE(res);
  CHECK(res->status == 202);
  std::string id = json::parse(res->body)["id"];
  std::uint64_t last = 0;
  for (int i = 0; i < 2000; ++i) {
    auto jr = c.Get("/v1/jobs/" + id);
    REQUIRE(jr);
    auto job = json::parse(jr->body);
    CHECK(job["copied_bytes"].get<std::uint64_t>() >= last);
    last = job["copied_bytes"];
    if (job["state"] == "done") break;
    std::this_thread::sleep_for(2ms);
  }
  CHECK(last == 1048576);
  reader.join();

  std::lock_guard lock(mu);
  REQUIRE(events.size() >= 4);
  // Every event exactly once and in order.
  for (std::size_t i = 1; i < events.size(); ++i) {
    CHECK(events[i]["seq"].get<std::uint64_t>() == events[i - 1]["seq"].get<std::uint64_t>() + 1);
  }
  int port_events = 0;
  int finished_events = 0;
  std::uint64_t copied = 0;
  for (const auto& ev : events) {
    if (ev["kind"] == "port-changed") ++port_events;
    if (ev["kind"] == "job-finished") ++finished_events;
    if (!ev["job"].is_null()) {
      CHECK(ev["job"]["copied_bytes"].get<std::uint64_t>() >= copied);
      copied = ev["job"]["copied_bytes"];
    }
  }
  CHECK(port_events == 4);
  CHECK(finished_events == 1);
  CHECK(events.back()["job"]["state"] == "done");

  auto opt = c.Options("/v1/jobs");
  REQUIRE(opt);
  CHECK(opt->status == 204);
  server.stop();
}

TEST_CASE("CLI: the basic flow") {
  TempDir dir;
  auto state = dir.file("state.json");
  auto a = dir.file("a.img");
  auto r = cli({"--state", state, "mkfs", a, "--variant", "fat16", "--size", "16M"});
  CHECK(r.status == 0);
  CHECK(r.out.find("FAT16") != std::string::npos);
  r = cli({"--state", state, "attach", "A", a});
  CHECK(r.status == 0);
  CHECK(r.out.rfind("A: ready FAT16", 0) == 0);
  r = cli({"--state", state, "ls", "A", "/"});
  CHECK(r.status == 0);
  CHECK(r.out.empty());
  r = cli({"--state", state, "attach", "A", a});
  CHECK(r.status == kExitDevice);
  CHECK(r.err.find("port-occupied") != std::string::npos);
  r = cli({"--state", state, "ls", "B"});
  CHECK(r.status == kExitDevice);
  CHECK(r.err.find("port-not-ready") != std::string::npos);
  r = cli({"--state", state, "fsck", a});
  CHECK(r.status == 0);
  CHECK(r.out.find("0 errors, 0 warnings") != std::string::npos);
  r = cli({"--state", state, "detach", "A"});
  CHECK(r.status == 0);
  r = cli({"--state", state, "detach", "A"});
  CHECK(r.status == kExitDevice);
}

TEST_CASE("CLI: usage and lookup errors") {
  TempDir dir;
  auto state = dir.file("state.json");
  CHECK(cli({}).status == kExitUsage);
  CHECK(cli({"frobnicate"}).status == kExitUsage);
  CHECK(cli({"--state", state, "ls", "C"}).status == kExitUsage);
  CHECK(cli({"--state", state, "cp", "A/x", "B:/"}).status == kExitUsage);
  CHECK(cli({"--state", state, "mkfs", dir.file("m.img"), "--variant", "fat12", "--size", "1M"}).status ==
        kExitUsage);
  CHECK(cli({"--state", state, "mkfs", dir.file("m.img"), "--variant", "fat16", "--size", "1000"}).status ==
        kExitUsage);
  auto help = cli({"--help"});
  CHECK(help.status == 0);
  CHECK(help.out.find("attach") != std::string::npos);
  CHECK(cli({"--state", state, "attach", "A", dir.file("none.img")}).status == kExitNotFound);
  CHECK(cli({"--state", state, "fsck", dir.file("none.img")}).status == kExitNotFound);
  CHECK(cli({"--state", state, "mkfs", dir.file("none.img"), "--variant", "fat16"}).status == kExitNotFound);
}

TEST_CASE("CLI: copies report progress and failures") {
  TempDir dir;
  auto state = dir.file("state.json");
  auto a = dir.file("a.img");
  auto b = dir.file("b.img");
  make_fat(a, 32768);
  make_fat(b, 8192);
  std::mt19937_64 rng(23);
  populate(a, {{"/x.bin", testsupport::random_bytes(rng, 300000)},
               {"/big.bin", testsupport::random_bytes(rng, 5 << 20)}});
  REQUIRE(cli({"--state", state, "attach", "A", a}).status == 0);
  REQUIRE(cli({"--state", state, "attach", "B", b}).status == 0);

  auto r = cli({"--state", state, "cp", "A:/x.bin", "B:/x.bin"});
  CHECK(r.status == 0);
  CHECK(r.out.find("job-1 running 65536/300000 bytes") != std::string::npos);
  CHECK(r.out.find("job-1 done 300000/300000 bytes 1/1 files") != std::string::npos);
  r = cli({"--state", state, "cp", "A:/x.bin", "B:/x.bin"});
  CHECK(r.status == kExitTransfer);
  CHECK(r.err.find("exists-no-overwrite") != std::string::npos);
  r = cli({"--state", state, "cp", "A:/big.bin", "B:/big.bin"});
  CHECK(r.status == kExitTransfer);
  CHECK(r.err.find("dest-full") != std::string::npos);
  CHECK(cli({"--state", state, "cp", "A:/nope", "B:/"}).status == kExitNotFound);
  CHECK(cli({"--state", state, "cp", "A:/x.bin", "A:/y"}).status == kExitUsage);

  r = cli({"--state", state, "ls", "B", "/"});
  CHECK(r.out == "-       300000  x.bin\n");
  r = cli({"--state", state, "info", "B"});
  CHECK(r.status == 0);
  CHECK(r.out.find("variant: FAT16\n") != std::string::npos);
  CHECK(cli({"--state", state, "fsck", b}).status == 0);
}

TEST_CASE("CLI and API produce identical images for the same scenario") {
  TempDir dir;
  std::mt19937_64 rng(24);
  std::vector<std::pair<std::string, Bytes>> files;
  for (int i = 0; i < 6; ++i) {
    files.emplace_back("/tree/sub/n" + std::to_string(i) + ".bin", testsupport::random_bytes(rng, rng() % 200000));
  }
  files.emplace_back("/Long Name Document.txt", testsupport::random_bytes(rng, 70000));
  for (const char* side : {"cli", "api"}) {
    std::string s = side;
    auto r = cli({"--state", dir.file("unused.json"), "mkfs", dir.file(s + "-a.img"), "--variant", "fat16",
                  "--size", "16M", "--spc", "4"});
    REQUIRE(r.status == 0);
    r = cli({"--state", dir.file("unused.json"), "mkfs", dir.file(s + "-b.img"), "--variant", "fat32",
             "--size", "40M", "--label", "DEST"});
    REQUIRE(r.status == 0);
    populate(dir.file(s + "-a.img"), files, {"/tree", "/tree/sub"});
  }
  REQUIRE(file_hash(dir.file("cli-a.img")) == file_hash(dir.file("api-a.img")));
  REQUIRE(file_hash(dir.file("cli-b.img")) == file_hash(dir.file("api-b.img")));

  auto state = dir.file("cli.json");
  REQUIRE(cli({"--state", state, "attach", "A", dir.file("cli-a.img")}).status == 0);
  REQUIRE(cli({"--state", state, "attach", "B", dir.file("cli-b.img")}).status == 0);
  CHECK(cli({"--state", state, "cp", "A:/Long Name Document.txt", "B:/"}).status == 0);
  CHECK(cli({"--state", state, "cp", "--recursive", "A:/tree", "B:/"}).status == 0);
  CHECK(cli({"--state", state, "cp", "--overwrite", "A:/tree/sub/n1.bin", "B:/tree/sub/n0.bin"}).status == 0);
  CHECK(cli({"--state", state, "detach", "A"}).status == 0);
  CHECK(cli({"--state", state, "detach", "B"}).status == 0);

  {
    Api api;
    api.post("/v1/ports/A/attach", {{"image", dir.file("api-a.img")}});
    api.post("/v1/ports/B/attach", {{"image", dir.file("api-b.img")}});
    auto run = [&](json req) {
      auto r = api.post("/v1/jobs", req);
      REQUIRE(r.status == 202);
      CHECK(wait_job(api, r.body["id"])["state"] == "done");
    };
    run({{"src_port", "A"}, {"src_path", "/Long Name Document.txt"}, {"dst_port", "B"}, {"dst_path", "/"}});
    run({{"src_port", "A"}, {"src_path", "/tree"}, {"dst_port", "B"}, {"dst_path", "/"}, {"recursive", true}});
    run({{"src_port", "A"},
         {"src_path", "/tree/sub/n1.bin"},
         {"dst_port", "B"},
         {"dst_path", "/tree/sub/n0.bin"},
         {"overwrite", true}});
    api.post("/v1/ports/A/detach");
    api.post("/v1/ports/B/detach");
  }
  CHECK(file_hash(dir.file("cli-a.img")) == file_hash(dir.file("api-a.img")));
  CHECK(file_hash(dir.file("cli-b.img")) == file_hash(dir.file("api-b.img")));
  auto listing = testsupport::reference_list(dir.file("cli-b.img"));
  CHECK(listing["entries"].size() == 9);
}

#ifdef USBB_CLI
TEST_CASE("the usbbridge binary honours exit codes") {
  TempDir dir;
  std::string base = std::string(USBB_CLI) + " --state " + dir.file("s.json") + " ";
  auto r = testsupport::run(base + "mkfs " + dir.file("a.img") + " --variant fat16 --size 16M");
  CHECK(r.status == 0);
  r = testsupport::run(base + "attach A " + dir.file("a.img"));
  CHECK(r.status == 0);
  r = testsupport::run(base + "ls A /");
  CHECK(r.status == 0);
  CHECK(r.output.empty());
  r = testsupport::run(base + "ls");
  CHECK(r.status == 2);
  r = testsupport::run(base + "ls A /missing");
  CHECK(r.status == 3);
}
#endif
