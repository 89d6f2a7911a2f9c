#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <fstream>
#include <future>
#include <iterator>
#include <set>
#include <thread>

#include "support.hpp"
#include "usbb/bridge.hpp"
#include "usbb/error.hpp"
#include "usbb/fatfs.hpp"

using namespace usbb;
using namespace usbb::bridge;
using namespace std::chrono_literals;
using testsupport::error_of;
using testsupport::TempDir;
using usb::Port;

namespace {

fat::Clock fixed_clock() {
  return [] { return std::chrono::system_clock::time_point(std::chrono::seconds(1700000000)); };
}

std::uint64_t file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  Bytes raw(std::istreambuf_iterator<char>(in), {});
  return testsupport::fnv1a(raw);
}

void make_fat(const std::string& path, std::uint64_t sectors, fat::Variant variant = fat::Variant::kFat16,
              std::uint8_t spc = 1) {
  std::shared_ptr<blockdev::BlockImage> img = blockdev::BlockImage::create(path, sectors);
  fat::mkfs(img, variant, {.sectors_per_cluster = spc}, fixed_clock());
}

// Writes files straight into an unattached image.
void populate(const std::string& path, const std::vector<std::pair<std::string, Bytes>>& files,
              const std::vector<std::string>& dirs = {}) {
  std::shared_ptr<blockdev::BlockImage> img = blockdev::BlockImage::open(path);
  auto vol = fat::mount(img, fixed_clock());
  for (const auto& d : dirs) vol->create_dir(d);
  for (const auto& [p, data] : files) vol->write_file(p, data);
  vol->flush();
}

fat::CheckReport fsck(const std::string& path) {
  std::shared_ptr<blockdev::BlockImage> img = blockdev::BlockImage::open(path, true);
  return fat::check(*img);
}

nlohmann::json entry(const nlohmann::json& listing, const std::string& path) {
  for (const auto& e : listing["entries"]) {
    if (e["path"] == path) return e;
  }
  return nullptr;
}

std::set<std::string> subtree(const nlohmann::json& listing, const std::string& prefix) {
  std::set<std::string> out;
  for (const auto& e : listing["entries"]) {
    std::string p = e["path"];
    if (p.rfind(prefix, 0) != 0) continue;
    out.insert(p + "|" + (e["dir"].get<bool>() ? "dir" : std::to_string(e["size"].get<std::uint64_t>()) +
                                                           "|" + e["sha256"].get<std::string>()));
  }
  return out;
}

struct Rig {
  TempDir dir;
  std::string a;
  std::string b;
  std::shared_ptr<Bridge> bridge;

  explicit Rig(BridgeOptions options = {}, std::uint64_t a_sectors = 32768,
               std::uint64_t b_sectors = 32768) {
    a = dir.file("a.img");
    b = dir.file("b.img");
    make_fat(a, a_sectors);
    make_fat(b, b_sectors);
    if (!options.clock) options.clock = fixed_clock();
    bridge = Bridge::create(std::move(options));
  }

  void plug(Port port, bool read_only = false) {
    bridge->attach_image(port, port == Port::kA ? a : b, read_only);
    auto s = bridge->wait_settled(port);
    REQUIRE_MESSAGE(s.status == PortStatus::kReady, s.error.value_or("not ready"));
  }
  void plug_both() {
    plug(Port::kA);
    plug(Port::kB);
  }
  void unplug_both() {
    for (Port p : {Port::kA, Port::kB}) {
      if (bridge->bus().occupied(p)) bridge->detach(p);
    }
  }
};

// A one-shot gate the worker thread can wait on from a hook.
struct Gate {
  std::promise<void> promise;
  std::shared_future<void> future = promise.get_future().share();
  void open() { promise.set_value(); }
  void wait() const { future.wait(); }
};

}  // namespace

TEST_CASE("ports start empty and an attached image settles ready") {
  Rig rig;
  for (const auto& s : rig.bridge->ports()) {
    CHECK(s.status == PortStatus::kEmpty);
    CHECK_FALSE(s.volume);
  }
  auto first = rig.bridge->attach_image(Port::kA, rig.a);
  CHECK(first.status != PortStatus::kEmpty);
  auto s = rig.bridge->wait_settled(Port::kA);
  REQUIRE(s.status == PortStatus::kReady);
  REQUIRE(s.volume);
  CHECK(s.volume->variant == fat::Variant::kFat16);
  CHECK(s.volume->free_bytes == s.volume->total_bytes);
  CHECK(s.image == rig.a);
  CHECK(s.vendor == "USBBRDG");
  CHECK(s.product == "Virtual Flash");
  auto listing = rig.bridge->browse(Port::kA, "/");
  CHECK(listing.entries.empty());
  CHECK(rig.bridge->port_state(Port::kB).status == PortStatus::kEmpty);
}

TEST_CASE("browse errors") {
  Rig rig;
  CHECK(error_of([&] { rig.bridge->browse(Port::kB, "/"); }) == ErrorCode::kPortNotReady);
  rig.plug(Port::kA);
  CHECK(error_of([&] { rig.bridge->browse(Port::kA, "/nope"); }) == ErrorCode::kNotFound);
  CHECK(error_of([&] { rig.bridge->stat(Port::kA, "/nope.txt"); }) == ErrorCode::kNotFound);
}

TEST_CASE("unmountable media leave the port failed with a reason") {
  Rig rig;
  auto ntfs = rig.dir.file("nt.img");
  auto r = testsupport::run(testsupport::reference("ntfs " + ntfs + " 8192"));
  REQUIRE_MESSAGE(r.status == 0, r.output);
  rig.bridge->attach_image(Port::kA, ntfs);
  auto s = rig.bridge->wait_settled(Port::kA);
  CHECK(s.status == PortStatus::kFailed);
  CHECK(s.error_code == ErrorCode::kUnsupportedVariant);
  REQUIRE(s.error);
  CHECK(s.error->rfind("unsupported-variant", 0) == 0);

  auto blank = rig.dir.file("blank.img");
  blockdev::BlockImage::create(blank, 4096);
  rig.bridge->attach_image(Port::kB, blank);
  s = rig.bridge->wait_settled(Port::kB);
  CHECK(s.status == PortStatus::kFailed);
  CHECK(s.error_code == ErrorCode::kBadSignature);

  // A failed port still occupies the connector until it is unplugged.
  CHECK(error_of([&] { rig.bridge->attach_image(Port::kA, rig.a); }) == ErrorCode::kPortOccupied);
  rig.bridge->detach(Port::kA);
  CHECK(rig.bridge->port_state(Port::kA).status == PortStatus::kEmpty);
  rig.plug(Port::kA);
}

TEST_CASE("attach and detach errors") {
  Rig rig;
  CHECK(error_of([&] { rig.bridge->attach_image(Port::kA, rig.dir.file("missing.img")); }) ==
        ErrorCode::kNotFound);
  CHECK(rig.bridge->port_state(Port::kA).status == PortStatus::kEmpty);
  CHECK(error_of([&] { rig.bridge->detach(Port::kA); }) == ErrorCode::kPortEmpty);
  rig.plug(Port::kA);
  CHECK(error_of([&] { rig.bridge->attach_image(Port::kA, rig.b); }) == ErrorCode::kPortOccupied);
  CHECK(rig.bridge->port_state(Port::kA).image == rig.a);
}

TEST_CASE("copying a 1 MiB file") {
  Rig rig;
  std::mt19937_64 rng(11);
  Bytes data = testsupport::random_bytes(rng, 1 << 20);
  populate(rig.a, {{"/big.bin", data}});
  const auto a_before = file_hash(rig.a);
  rig.plug_both();
  auto job = rig.bridge->start_copy({{Port::kA, "/big.bin"}, {Port::kB, "/"}});
  CHECK(job.dst.path == "/big.bin");
  CHECK(job.total_bytes == 1048576);
  CHECK(job.total_files == 1);
  auto done = rig.bridge->wait_job(job.id);
  CHECK(done.state == JobState::kDone);
  CHECK(done.copied_bytes == 1048576);
  CHECK(done.copied_files == 1);
  CHECK(done.started);
  CHECK(done.finished);
  CHECK_FALSE(done.error);
  CHECK(rig.bridge->stat(Port::kB, "/big.bin").size_bytes == 1048576);
  rig.unplug_both();

  auto la = testsupport::reference_list(rig.a);
  auto lb = testsupport::reference_list(rig.b);
  REQUIRE(entry(lb, "/big.bin") != nullptr);
  CHECK(entry(lb, "/big.bin")["sha256"] == entry(la, "/big.bin")["sha256"]);
  CHECK(fsck(rig.a).findings.empty());
  CHECK(fsck(rig.b).findings.empty());
  // Reading from A never writes to it.
  CHECK(file_hash(rig.a) == a_before);
}

TEST_CASE("copy to an explicit file name and into a directory") {
  Rig rig;
  populate(rig.a, {{"/notes.txt", Bytes(5000, 'n')}});
  populate(rig.b, {}, {"/inbox"});
  rig.plug_both();
  auto j1 = rig.bridge->start_copy({{Port::kA, "/notes.txt"}, {Port::kB, "/renamed.txt"}});
  auto j2 = rig.bridge->start_copy({{Port::kA, "/notes.txt"}, {Port::kB, "/inbox"}});
  CHECK(j2.dst.path == "/inbox/notes.txt");
  CHECK(rig.bridge->wait_job(j1.id).state == JobState::kDone);
  CHECK(rig.bridge->wait_job(j2.id).state == JobState::kDone);
  CHECK(rig.bridge->volume(Port::kB)->read_file("/renamed.txt") == Bytes(5000, 'n'));
  CHECK(rig.bridge->volume(Port::kB)->read_file("/inbox/notes.txt") == Bytes(5000, 'n'));
}

TEST_CASE("copy request validation") {
  Rig rig;
  populate(rig.a, {{"/f.txt", Bytes(100, 'f')}}, {"/d"});
  populate(rig.b, {{"/f.txt", Bytes(10, 'x')}}, {"/sub"});
  CHECK(error_of([&] { rig.bridge->start_copy({{Port::kA, "/f.txt"}, {Port::kB, "/"}}); }) ==
        ErrorCode::kPortNotReady);
  rig.plug_both();
  auto b = rig.bridge;
  CHECK(error_of([&] { b->start_copy({{Port::kA, "/f.txt"}, {Port::kA, "/g.txt"}}); }) ==
        ErrorCode::kSamePort);
  CHECK(error_of([&] { b->start_copy({{Port::kA, "/none"}, {Port::kB, "/"}}); }) ==
        ErrorCode::kNotFound);
  CHECK(error_of([&] { b->start_copy({{Port::kA, "/f.txt"}, {Port::kB, "/"}}); }) ==
        ErrorCode::kExistsNoOverwrite);
  CHECK(error_of([&] { b->start_copy({{Port::kA, "/d"}, {Port::kB, "/"}}); }) ==
        ErrorCode::kIsADirectory);
  CHECK(error_of([&] { b->start_copy({{Port::kA, "/"}, {Port::kB, "/"}, false, true}); }) ==
        ErrorCode::kInvalidArgument);
  CHECK(error_of([&] { b->start_copy({{Port::kA, "/f.txt"}, {Port::kB, "/nodir/f.txt"}}); }) ==
        ErrorCode::kNotFound);
  CHECK(b->jobs().empty());
  CHECK(b->volume(Port::kB)->read_file("/f.txt") == Bytes(10, 'x'));

  auto job = b->start_copy({{Port::kA, "/f.txt"}, {Port::kB, "/"}, true});
  CHECK(b->wait_job(job.id).state == JobState::kDone);
  CHECK(b->volume(Port::kB)->read_file("/f.txt") == Bytes(100, 'f'));
  CHECK(error_of([&] { b->job_status("job-999"); }) == ErrorCode::kUnknownJob);
  CHECK(error_of([&] { b->cancel("job-999"); }) == ErrorCode::kUnknownJob);
}

TEST_CASE("read-only destination is refused") {
  Rig rig;
  populate(rig.a, {{"/f.txt", Bytes(100, 'f')}});
  populate(rig.b, {{"/r.txt", Bytes(50, 'r')}});
  rig.plug(Port::kA);
  rig.plug(Port::kB, true);
  CHECK(rig.bridge->port_state(Port::kB).read_only);
  CHECK(error_of([&] { rig.bridge->start_copy({{Port::kA, "/f.txt"}, {Port::kB, "/"}}); }) ==
        ErrorCode::kReadOnlyVolume);
  // Read-only drives are still valid sources.
  auto job = rig.bridge->start_copy({{Port::kB, "/r.txt"}, {Port::kA, "/"}});
  CHECK(rig.bridge->wait_job(job.id).state == JobState::kDone);
  CHECK(rig.bridge->volume(Port::kA)->read_file("/r.txt") == Bytes(50, 'r'));
}

TEST_CASE("insufficient space is detected before any byte moves") {
  Rig rig({}, 32768, 8192);
  std::mt19937_64 rng(3);
  populate(rig.a, {{"/huge.bin", testsupport::random_bytes(rng, 5 << 20)}});
  const auto b_before = file_hash(rig.b);
  rig.plug_both();
  CHECK(error_of([&] { rig.bridge->start_copy({{Port::kA, "/huge.bin"}, {Port::kB, "/"}}); }) ==
        ErrorCode::kDestFull);
  CHECK(rig.bridge->jobs().empty());
  rig.unplug_both();
  CHECK(file_hash(rig.b) == b_before);
}

TEST_CASE("running out of space mid-copy fails cleanly") {
  std::shared_ptr<Bridge> bridge;
  std::atomic<bool> filled{false};
  BridgeOptions opts;
  opts.after_chunk = [&](const TransferJob&) {
    if (filled.exchange(true)) return;
    auto vol = bridge->volume(Port::kB);
    vol->write_file("/filler.bin", Bytes(2 << 20, 0xEE));
  };
  Rig rig(opts, 32768, 8192);
  bridge = rig.bridge;
  std::mt19937_64 rng(4);
  populate(rig.a, {{"/three.bin", testsupport::random_bytes(rng, 3 << 20)}});
  rig.plug_both();
  auto job = rig.bridge->start_copy({{Port::kA, "/three.bin"}, {Port::kB, "/"}});
  auto done = rig.bridge->wait_job(job.id);
  CHECK(done.state == JobState::kFailed);
  CHECK(done.error_code == ErrorCode::kDestFull);
  CHECK(done.copied_files == 0);
  CHECK_FALSE(rig.bridge->volume(Port::kB)->exists("/three.bin"));
  rig.unplug_both();
  auto report = fsck(rig.b);
  CHECK(report.findings.empty());
  auto lb = testsupport::reference_list(rig.b);
  CHECK(entry(lb, "/three.bin") == nullptr);
  CHECK(entry(lb, "/filler.bin") != nullptr);
}

TEST_CASE("recursive copy of a three-level tree") {
  Rig rig;
  std::mt19937_64 rng(5);
  std::vector<std::pair<std::string, Bytes>> files;
  const char* dirs[] = {"/tree", "/tree/level one", "/tree/level one/two"};
  for (int i = 0; i < 20; ++i) {
    std::string path = std::string(dirs[i % 3]) + "/file " + std::to_string(i) + ".dat";
    files.emplace_back(path, testsupport::random_bytes(rng, rng() % 100000));
  }
  files.emplace_back("/tree/empty.txt", Bytes{});
  populate(rig.a, files, {dirs[0], dirs[1], dirs[2], "/tree/void"});
  rig.plug_both();
  auto job = rig.bridge->start_copy({{Port::kA, "/tree"}, {Port::kB, "/"}, false, true});
  CHECK(job.total_files == 21);
  auto done = rig.bridge->wait_job(job.id);
  CHECK(done.state == JobState::kDone);
  CHECK(done.copied_files == 21);
  CHECK(done.copied_bytes == done.total_bytes);
  rig.unplug_both();
  auto want = subtree(testsupport::reference_list(rig.a), "/tree");
  auto got = subtree(testsupport::reference_list(rig.b), "/tree");
  CHECK(want.size() == 25);
  CHECK(got == want);
  CHECK(fsck(rig.b).findings.empty());
}

TEST_CASE("cancelling a queued job") {
  Gate gate;
  BridgeOptions opts;
  std::atomic<bool> held{false};
  opts.after_chunk = [&](const TransferJob& j) {
    if (j.id == "job-1" && !held.exchange(true)) gate.wait();
  };
  Rig rig(opts);
  populate(rig.a, {{"/one.bin", Bytes(300000, 1)}, {"/two.bin", Bytes(300000, 2)}});
  rig.plug_both();
  auto j1 = rig.bridge->start_copy({{Port::kA, "/one.bin"}, {Port::kB, "/"}});
  auto j2 = rig.bridge->start_copy({{Port::kA, "/two.bin"}, {Port::kB, "/"}});
  CHECK(rig.bridge->job_status(j2.id).state == JobState::kQueued);
  auto c = rig.bridge->cancel(j2.id);
  CHECK(c.state == JobState::kCancelled);
  CHECK(c.copied_bytes == 0);
  gate.open();
  CHECK(rig.bridge->wait_job(j1.id).state == JobState::kDone);
  rig.bridge->wait_idle();
  CHECK(rig.bridge->job_status(j2.id).state == JobState::kCancelled);
  CHECK(rig.bridge->job_status(j2.id).copied_bytes == 0);
  CHECK_FALSE(rig.bridge->volume(Port::kB)->exists("/two.bin"));
  // Cancelling a finished job changes nothing.
  CHECK(rig.bridge->cancel(j1.id).state == JobState::kDone);
  CHECK(rig.bridge->volume(Port::kB)->exists("/one.bin"));
}

TEST_CASE("cancelling a running job removes the partial file") {
  std::shared_ptr<Bridge> bridge;
  BridgeOptions opts;
  opts.after_chunk = [&](const TransferJob& j) {
    if (j.copied_bytes == 64 * 1024) bridge->cancel(j.id);
  };
  Rig rig(opts);
  bridge = rig.bridge;
  populate(rig.a, {{"/one.bin", Bytes(1 << 20, 1)}});
  rig.plug_both();
  auto job = rig.bridge->start_copy({{Port::kA, "/one.bin"}, {Port::kB, "/"}});
  auto done = rig.bridge->wait_job(job.id);
  CHECK(done.state == JobState::kCancelled);
  CHECK(done.copied_bytes < (1u << 20));
  CHECK_FALSE(done.error);
  CHECK_FALSE(rig.bridge->volume(Port::kB)->exists("/one.bin"));
  auto info = rig.bridge->volume(Port::kB)->info();
  CHECK(info.free_bytes == info.total_bytes);
  rig.unplug_both();
  CHECK(fsck(rig.b).findings.empty());
}

TEST_CASE("cancelling a recursive job rolls back everything it created") {
  std::shared_ptr<Bridge> bridge;
  BridgeOptions opts;
  opts.after_chunk = [&](const TransferJob& j) {
    if (j.copied_files == 3) bridge->cancel(j.id);
  };
  Rig rig(opts);
  bridge = rig.bridge;
  std::vector<std::pair<std::string, Bytes>> files;
  for (int i = 0; i < 6; ++i) files.emplace_back("/t/s/f" + std::to_string(i), Bytes(70000, 'a' + i));
  populate(rig.a, files, {"/t", "/t/s"});
  populate(rig.b, {{"/keep.txt", Bytes(10, 'k')}});
  rig.plug_both();
  auto job = rig.bridge->start_copy({{Port::kA, "/t"}, {Port::kB, "/"}, false, true});
  CHECK(rig.bridge->wait_job(job.id).state == JobState::kCancelled);
  auto listing = rig.bridge->browse(Port::kB, "/");
  REQUIRE(listing.entries.size() == 1);
  CHECK(listing.entries[0].name() == "keep.txt");
  rig.unplug_both();
  CHECK(fsck(rig.b).findings.empty());
}

TEST_CASE("event stream reports monotonic progress and one terminal event") {
  Rig rig;
  populate(rig.a, {{"/big.bin", Bytes(1 << 20, 7)}});
  rig.plug_both();
  auto sub = rig.bridge->subscribe();
  auto job = rig.bridge->start_copy({{Port::kA, "/big.bin"}, {Port::kB, "/"}});
  std::uint64_t last_bytes = 0;
  std::uint64_t last_seq = 0;
  int finished = 0;
  int progress = 0;
  for (;;) {
    auto ev = sub->next(5s);
    if (!ev) break;
    CHECK(ev->seq > last_seq);
    last_seq = ev->seq;
    if (!ev->job || ev->job->id != job.id) continue;
    CHECK(ev->job->copied_bytes >= last_bytes);
    last_bytes = ev->job->copied_bytes;
    if (ev->kind == EventKind::kJobFinished) {
      ++finished;
      CHECK(ev->job->state == JobState::kDone);
      // Nothing more for this job may follow.
      auto extra = sub->next(200ms);
      CHECK_FALSE(extra);
      break;
    }
    ++progress;
  }
  CHECK(finished == 1);
  CHECK(progress >= 16);
  CHECK(last_bytes == 1048576);
}

TEST_CASE("port changes are published") {
  Rig rig;
  auto sub = rig.bridge->subscribe();
  rig.plug(Port::kA);
  rig.bridge->detach(Port::kA);
  std::vector<PortStatus> seen;
  while (auto ev = sub->next(200ms)) {
    REQUIRE(ev->kind == EventKind::kPortChanged);
    REQUIRE(ev->port);
    CHECK(ev->port->port == Port::kA);
    seen.push_back(ev->port->status);
  }
  REQUIRE(seen.size() == 3);
  CHECK(seen[0] == PortStatus::kProbing);
  CHECK(seen[1] == PortStatus::kReady);
  CHECK(seen[2] == PortStatus::kEmpty);
}

TEST_CASE("a subscriber that stops reading is cut off without stalling transfers") {
  BridgeOptions opts;
  opts.subscriber_queue = 4;
  Rig rig(opts);
  populate(rig.a, {{"/big.bin", Bytes(1 << 20, 7)}});
  rig.plug_both();
  auto stalled = rig.bridge->subscribe();
  auto job = rig.bridge->start_copy({{Port::kA, "/big.bin"}, {Port::kB, "/"}});
  CHECK(rig.bridge->wait_job(job.id).state == JobState::kDone);
  CHECK(stalled->overflowed());
  CHECK(stalled->closed());
  int drained = 0;
  while (stalled->next(10ms)) ++drained;
  CHECK(drained == 4);
  auto fresh = rig.bridge->subscribe();
  CHECK_FALSE(fresh->closed());
}

TEST_CASE("unplugging the source mid-copy fails the job and keeps the destination clean") {
  std::shared_ptr<Bridge> bridge;
  BridgeOptions opts;
  opts.after_chunk = [&](const TransferJob& j) {
    if (j.copied_bytes == 3 * 64 * 1024) bridge->detach(Port::kA);
  };
  Rig rig(opts);
  bridge = rig.bridge;
  populate(rig.a, {{"/big.bin", Bytes(1 << 20, 7)}});
  const auto a_before = file_hash(rig.a);
  rig.plug_both();
  auto job = rig.bridge->start_copy({{Port::kA, "/big.bin"}, {Port::kB, "/"}});
  auto done = rig.bridge->wait_job(job.id);
  CHECK(done.state == JobState::kFailed);
  CHECK(done.error_code == ErrorCode::kDeviceGone);
  CHECK(rig.bridge->port_state(Port::kA).status == PortStatus::kEmpty);
  CHECK_FALSE(rig.bridge->volume(Port::kB)->exists("/big.bin"));
  rig.unplug_both();
  CHECK(fsck(rig.b).findings.empty());
  CHECK(file_hash(rig.a) == a_before);
}

TEST_CASE("unplugging the destination mid-copy leaves no partial file") {
  std::shared_ptr<Bridge> bridge;
  BridgeOptions opts;
  opts.after_chunk = [&](const TransferJob& j) {
    if (j.id == "job-2" && j.copied_bytes == 5 * 64 * 1024) bridge->detach(Port::kB);
  };
  Rig rig(opts);
  bridge = rig.bridge;
  populate(rig.a, {{"/first.bin", Bytes(200000, 1)}, {"/big.bin", Bytes(1 << 20, 7)}});
  rig.plug_both();
  auto j1 = rig.bridge->start_copy({{Port::kA, "/first.bin"}, {Port::kB, "/"}});
  auto j2 = rig.bridge->start_copy({{Port::kA, "/big.bin"}, {Port::kB, "/"}});
  CHECK(rig.bridge->wait_job(j1.id).state == JobState::kDone);
  auto done = rig.bridge->wait_job(j2.id);
  CHECK(done.state == JobState::kFailed);
  CHECK(done.error_code == ErrorCode::kDeviceGone);
  CHECK(fsck(rig.b).findings.empty());
  rig.plug(Port::kB);
  CHECK(rig.bridge->volume(Port::kB)->exists("/first.bin"));
  CHECK_FALSE(rig.bridge->volume(Port::kB)->exists("/big.bin"));
  rig.unplug_both();
  auto lb = testsupport::reference_list(rig.b);
  CHECK(entry(lb, "/big.bin") == nullptr);
  CHECK(entry(lb, "/first.bin")["size"] == 200000);
}

TEST_CASE("jobs touching only the other port are unaffected by an unplug") {
  Rig rig;
  populate(rig.a, {{"/f.bin", Bytes(100000, 3)}});
  rig.plug_both();
  auto job = rig.bridge->start_copy({{Port::kA, "/f.bin"}, {Port::kB, "/"}});
  CHECK(rig.bridge->wait_job(job.id).state == JobState::kDone);
  // A third drive is not possible; re-plugging B does not disturb A.
  rig.bridge->detach(Port::kB);
  rig.plug(Port::kB);
  CHECK(rig.bridge->port_state(Port::kA).status == PortStatus::kReady);
  CHECK(rig.bridge->volume(Port::kA)->read_file("/f.bin") == Bytes(100000, 3));
  CHECK(rig.bridge->volume(Port::kB)->read_file("/f.bin") == Bytes(100000, 3));
}

TEST_CASE("a drive plugged straight into the bus is probed and mounted") {
  Rig rig;
  populate(rig.a, {{"/hello.txt", Bytes(12, 'h')}});
  std::shared_ptr<blockdev::BlockImage> img = blockdev::BlockImage::open(rig.a);
  msc::MscDeviceOptions dopts;
  dopts.vendor = "ACME";
  rig.bridge->bus().attach(Port::kB, std::make_shared<msc::MscDevice>(img, dopts));
  auto s = rig.bridge->wait_settled(Port::kB);
  REQUIRE(s.status == PortStatus::kReady);
  CHECK(s.image.empty());
  CHECK(s.vendor == "ACME");
  CHECK(rig.bridge->browse(Port::kB, "/").entries.size() == 1);
  rig.bridge->bus().detach(Port::kB);
  CHECK(rig.bridge->port_state(Port::kB).status == PortStatus::kEmpty);
}

TEST_CASE("property: random copies preserve content and keep both volumes consistent") {
  Rig rig;
  std::mt19937_64 rng(0xB41D);
  std::vector<std::pair<std::string, Bytes>> files;
  for (int i = 0; i < 12; ++i) {
    files.emplace_back("/src" + std::to_string(i) + ".bin", testsupport::random_bytes(rng, rng() % 300000));
  }
  populate(rig.a, files);
  rig.plug_both();
  std::vector<std::string> ids;
  for (int i = 0; i < 30; ++i) {
    const auto& [path, data] = files[rng() % files.size()];
    std::string dst = "/copy" + std::to_string(i % 10) + ".bin";
    ids.push_back(rig.bridge->start_copy({{Port::kA, path}, {Port::kB, dst}, true}).id);
  }
  rig.bridge->wait_idle();
  for (const auto& id : ids) CHECK(rig.bridge->job_status(id).state == JobState::kDone);
  auto before = rig.bridge->volume(Port::kB)->info();
  rig.unplug_both();
  auto report = fsck(rig.b);
  CHECK(report.findings.empty());
  CHECK(report.free_clusters == before.free_clusters);
  auto la = testsupport::reference_list(rig.a);
  auto lb = testsupport::reference_list(rig.b);
  CHECK(lb["entries"].size() == 10);
  std::set<std::string> hashes;
  for (const auto& e : la["entries"]) hashes.insert(e["sha256"]);
  for (const auto& e : lb["entries"]) CHECK(hashes.count(e["sha256"]) == 1);
}
