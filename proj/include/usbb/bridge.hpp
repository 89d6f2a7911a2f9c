#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "usbb/blockdev.hpp"
#include "usbb/error.hpp"
#include "usbb/fatfs.hpp"
#include "usbb/msc_device.hpp"
#include "usbb/msc_host.hpp"
#include "usbb/usb_bus.hpp"

namespace usbb::bridge {

using TimePoint = std::chrono::system_clock::time_point;

enum class PortStatus { kEmpty, kProbing, kReady, kFailed };
std::string_view to_string(PortStatus status);

struct PortState {
  usb::Port port = usb::Port::kA;
  PortStatus status = PortStatus::kEmpty;
  std::optional<fat::VolumeInfo> volume;  // present iff status == kReady
  std::optional<std::string> error;       // "<code>: <detail>" when failed
  std::optional<ErrorCode> error_code;
  std::string image;  // empty when the device was plugged in directly on the bus
  bool read_only = false;
  std::string vendor;
  std::string product;
};

enum class JobState { kQueued, kRunning, kDone, kFailed, kCancelled };
std::string_view to_string(JobState state);
inline bool is_terminal(JobState s) {
  return s == JobState::kDone || s == JobState::kFailed || s == JobState::kCancelled;
}

struct Location {
  usb::Port port = usb::Port::kA;
  std::string path;
};

struct CopyRequest {
  Location src;
  Location dst;  // a file path, or an existing directory to copy into
  bool overwrite = false;
  bool recursive = false;
};

struct TransferJob {
  std::string id;
  Location src;
  Location dst;  // resolved destination path
  bool overwrite = false;
  bool recursive = false;
  std::uint64_t total_bytes = 0;
  std::uint64_t copied_bytes = 0;
  std::uint32_t total_files = 0;
  std::uint32_t copied_files = 0;
  JobState state = JobState::kQueued;
  std::optional<std::string> error;
  std::optional<ErrorCode> error_code;
  std::optional<TimePoint> started;
  std::optional<TimePoint> finished;
};

enum class EventKind { kPortChanged, kJobProgress, kJobFinished };
std::string_view to_string(EventKind kind);

struct BridgeEvent {
  std::uint64_t seq = 0;
  EventKind kind = EventKind::kPortChanged;
  std::optional<PortState> port;
  std::optional<TransferJob> job;
};

struct Listing {
  usb::Port port = usb::Port::kA;
  std::string path;
  std::vector<fat::DirEntry> entries;
  fat::VolumeInfo info;
};

struct BridgeOptions {
  msc::HostOptions host;
  usb::BusOptions bus;
  msc::MscDeviceOptions device;
  fat::Clock clock;  // defaults to the system clock
  std::size_t chunk_size = 64 * 1024;
  // Events buffered per subscriber before it counts as stalled and is cut off.
  std::size_t subscriber_queue = 4096;
  // Called on the worker thread after every chunk, with no bridge lock held.
  std::function<void(const TransferJob&)> after_chunk;
};

class Bridge;

/// An ordered event stream. A subscriber that falls `subscriber_queue`
/// events behind is closed rather than allowed to hold the others back.
class Subscription {
 public:
  ~Subscription();
  Subscription(const Subscription&) = delete;
  Subscription& operator=(const Subscription&) = delete;

  // Next event, or nullopt on timeout or once closed and drained.
  std::optional<BridgeEvent> next(std::chrono::milliseconds timeout);
  bool closed() const;
  // True when the stream was cut off because the consumer fell behind.
  bool overflowed() const;
  void close();

 private:
  friend class Bridge;
  struct State {
    mutable std::mutex mutex;
    std::condition_variable cv;
    std::deque<BridgeEvent> queue;
    std::size_t capacity = 0;
    bool closed = false;
    bool overflowed = false;
  };
  Subscription(std::weak_ptr<Bridge> bridge, std::shared_ptr<State> state)
      : bridge_(std::move(bridge)), state_(std::move(state)) {}

  std::weak_ptr<Bridge> bridge_;
  std::shared_ptr<State> state_;
};

/// Owns the two-port bus. Plugging a drive in (attach_image, or a device
/// attached straight onto the bus) probes and mounts it in the background;
/// copy jobs run FIFO on a worker thread in 64 KiB chunks.
class Bridge : public std::enable_shared_from_this<Bridge> {
 public:
  static std::shared_ptr<Bridge> create(BridgeOptions options = {});
  ~Bridge();
  Bridge(const Bridge&) = delete;
  Bridge& operator=(const Bridge&) = delete;

  usb::Bus& bus() { return bus_; }
  const BridgeOptions& options() const { return options_; }

  // Opens the image and plugs an emulated drive backed by it into `port`.
  // Returns the probing state; the probe and mount continue in the background.
  PortState attach_image(usb::Port port, const std::filesystem::path& image,
                         bool read_only = false);
  PortState detach(usb::Port port);
  // Blocks until the port is no longer probing.
  PortState wait_settled(usb::Port port,
                         std::chrono::milliseconds timeout = std::chrono::seconds(30));

  PortState port_state(usb::Port port);
  std::vector<PortState> ports();

  Listing browse(usb::Port port, std::string_view path);
  fat::DirEntry stat(usb::Port port, std::string_view path);
  // The mounted volume on a ready port. Throws port-not-ready.
  std::shared_ptr<fat::Volume> volume(usb::Port port);
  // The emulated drive on a port, when the bridge created it.
  std::shared_ptr<msc::MscDevice> device(usb::Port port);

  // Validates the request (ports ready and distinct, source present,
  // destination collision, free space) and queues the job.
  TransferJob start_copy(const CopyRequest& request);
  TransferJob cancel(const std::string& id);
  TransferJob job_status(const std::string& id);
  std::vector<TransferJob> jobs();
  TransferJob wait_job(const std::string& id,
                       std::chrono::milliseconds timeout = std::chrono::seconds(120));
  void wait_idle();

  std::unique_ptr<Subscription> subscribe();

 private:
  struct Slot {
    PortStatus status = PortStatus::kEmpty;
    std::optional<std::string> error;
    std::optional<ErrorCode> error_code;
    std::filesystem::path image;
    bool read_only = false;
    std::shared_ptr<msc::MscDevice> device;
    std::shared_ptr<msc::MscHandle> handle;
    std::shared_ptr<fat::Volume> volume;
    std::uint64_t generation = 0;
  };

  struct PlanItem {
    bool directory = false;
    std::string src;
    std::string dst;
    std::uint64_t size = 0;
  };

  struct Job {
    TransferJob info;
    std::vector<PlanItem> plan;
    bool cancel_requested = false;
    bool port_lost = false;
  };

  explicit Bridge(BridgeOptions options);
  void start();
  void shutdown();

  void on_bus_event(const usb::BusEvent& event);
  void probe(usb::Port port, std::uint64_t generation);
  void run_probes();
  void run_jobs();
  void execute(const std::string& id);
  void copy_file(Job& job, const std::string& id, fat::Volume& src, fat::Volume& dst,
                 const PlanItem& item);
  void progress(const std::string& id, std::uint64_t bytes, bool file_done);
  void check_interrupt(const std::string& id);
  void finish_job(const std::string& id, JobState state, const std::optional<Error>& error);

  PortState project(usb::Port port, const Slot& slot) const;
  PortState snapshot_port(usb::Port port);
  std::shared_ptr<fat::Volume> ready_volume_locked(usb::Port port) const;
  TimePoint now() const;

  void emit(EventKind kind, std::optional<PortState> port, std::optional<TransferJob> job);
  void emit_port(usb::Port port);
  void deliver_locked(const BridgeEvent& ev);
  void unsubscribe(const std::shared_ptr<Subscription::State>& state);
  friend class Subscription;

  BridgeOptions options_;
  usb::Bus bus_;
  int listener_id_ = 0;

  std::mutex mutex_;
  std::condition_variable changed_;
  std::array<Slot, 2> slots_;
  std::map<std::string, std::unique_ptr<Job>> jobs_;
  std::vector<std::string> job_order_;
  std::deque<std::string> queue_;
  std::optional<std::string> running_;
  std::uint64_t next_job_ = 1;
  std::deque<std::pair<usb::Port, std::uint64_t>> probe_queue_;
  bool stopping_ = false;

  std::mutex event_mutex_;
  std::uint64_t next_seq_ = 1;
  std::vector<std::shared_ptr<Subscription::State>> subscribers_;

  std::thread probe_thread_;
  std::thread job_thread_;
};

std::string error_text(const Error& e);

}  // namespace usbb::bridge
