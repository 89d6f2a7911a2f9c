#include "usbb/bridge.hpp"

#include <algorithm>

namespace usbb::bridge {

std::string_view to_string(PortStatus status) {
  switch (status) {
    case PortStatus::kEmpty: return "empty";
    case PortStatus::kProbing: return "probing";
    case PortStatus::kReady: return "ready";
    case PortStatus::kFailed: return "failed";
  }
  return "unknown";
}

std::string_view to_string(JobState state) {
  switch (state) {
    case JobState::kQueued: return "queued";
    case JobState::kRunning: return "running";
    case JobState::kDone: return "done";
    case JobState::kFailed: return "failed";
    case JobState::kCancelled: return "cancelled";
  }
  return "unknown";
}

std::string_view to_string(EventKind kind) {
  switch (kind) {
    case EventKind::kPortChanged: return "port-changed";
    case EventKind::kJobProgress: return "job-progress";
    case EventKind::kJobFinished: return "job-finished";
  }
  return "unknown";
}

std::string error_text(const Error& e) {
  std::string out(to_string(e.code()));
  if (!e.detail().empty()) out += ": " + e.detail();
  return out;
}

namespace {

std::string join(const std::string& dir, const std::string& name) {
  return dir == "/" ? "/" + name : dir + "/" + name;
}

bool is_root(std::string_view path) {
  return !path.empty() && path.find_first_not_of('/') == std::string_view::npos;
}

std::optional<fat::DirEntry> try_stat(fat::Volume& vol, const std::string& path) {
  try {
    return vol.stat(path);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kNotFound) return std::nullopt;
    throw;
  }
}

Error job_error(const Error& e) {
  switch (e.code()) {
    case ErrorCode::kDiskFull: return Error(ErrorCode::kDestFull, e.detail());
    case ErrorCode::kNoSuchDevice: return Error(ErrorCode::kDeviceGone, e.detail());
    default: return e;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Subscription

Subscription::~Subscription() { close(); }

std::optional<BridgeEvent> Subscription::next(std::chrono::milliseconds timeout) {
  std::unique_lock lock(state_->mutex);
  state_->cv.wait_for(lock, timeout, [&] { return !state_->queue.empty() || state_->closed; });
  if (state_->queue.empty()) return std::nullopt;
  BridgeEvent ev = std::move(state_->queue.front());
  state_->queue.pop_front();
  return ev;
}

bool Subscription::closed() const {
  std::lock_guard lock(state_->mutex);
  return state_->closed;
}

bool Subscription::overflowed() const {
  std::lock_guard lock(state_->mutex);
  return state_->overflowed;
}

void Subscription::close() {
  {
    std::lock_guard lock(state_->mutex);
    state_->closed = true;
  }
  state_->cv.notify_all();
  if (auto b = bridge_.lock()) b->unsubscribe(state_);
}

// ---------------------------------------------------------------------------
// Bridge lifecycle

std::shared_ptr<Bridge> Bridge::create(BridgeOptions options) {
  std::shared_ptr<Bridge> b(new Bridge(std::move(options)));
  b->start();
  return b;
}

Bridge::Bridge(BridgeOptions options) : options_(std::move(options)), bus_(options_.bus) {
  if (options_.chunk_size == 0) options_.chunk_size = 64 * 1024;
}

void Bridge::start() {
  listener_id_ = bus_.add_listener([this](const usb::BusEvent& ev) { on_bus_event(ev); });
  probe_thread_ = std::thread([this] { run_probes(); });
  job_thread_ = std::thread([this] { run_jobs(); });
}

Bridge::~Bridge() { shutdown(); }

void Bridge::shutdown() {
  std::vector<std::string> dropped;
  {
    std::lock_guard lock(mutex_);
    if (stopping_) return;
    stopping_ = true;
    if (running_) jobs_[*running_]->cancel_requested = true;
    for (const auto& id : queue_) dropped.push_back(id);
    queue_.clear();
  }
  changed_.notify_all();
  for (const auto& id : dropped) finish_job(id, JobState::kCancelled, std::nullopt);
  if (probe_thread_.joinable()) probe_thread_.join();
  if (job_thread_.joinable()) job_thread_.join();
  bus_.remove_listener(listener_id_);
  std::lock_guard lock(event_mutex_);
  for (auto& s : subscribers_) {
    std::lock_guard sl(s->mutex);
    s->closed = true;
    s->cv.notify_all();
  }
  subscribers_.clear();
}

TimePoint Bridge::now() const {
  return options_.clock ? options_.clock() : std::chrono::system_clock::now();
}

// ---------------------------------------------------------------------------
// Ports

void Bridge::on_bus_event(const usb::BusEvent& event) {
  const std::size_t i = usb::index_of(event.port);
  switch (event.kind) {
    case usb::BusEventKind::kAttach: {
      {
        std::lock_guard lock(mutex_);
        Slot& slot = slots_[i];
        ++slot.generation;
        slot.status = PortStatus::kProbing;
        slot.error.reset();
        slot.error_code.reset();
        probe_queue_.emplace_back(event.port, slot.generation);
      }
      changed_.notify_all();
      emit_port(event.port);
      break;
    }
    case usb::BusEventKind::kDetach: {
      {
        std::lock_guard lock(mutex_);
        Slot& slot = slots_[i];
        std::uint64_t gen = slot.generation + 1;
        slot = Slot{};
        slot.generation = gen;
        if (running_) {
          Job& job = *jobs_[*running_];
          if (job.info.src.port == event.port || job.info.dst.port == event.port) {
            job.port_lost = true;
          }
        }
      }
      changed_.notify_all();
      emit_port(event.port);
      break;
    }
    case usb::BusEventKind::kEnumerated:
      break;
  }
}

void Bridge::run_probes() {
  for (;;) {
    std::pair<usb::Port, std::uint64_t> work;
    {
      std::unique_lock lock(mutex_);
      changed_.wait(lock, [&] { return stopping_ || !probe_queue_.empty(); });
      if (stopping_) return;
      work = probe_queue_.front();
      probe_queue_.pop_front();
    }
    probe(work.first, work.second);
  }
}

void Bridge::probe(usb::Port port, std::uint64_t generation) {
  const std::size_t i = usb::index_of(port);
  {
    std::lock_guard lock(mutex_);
    if (slots_[i].generation != generation) return;
  }
  std::shared_ptr<msc::MscHandle> handle;
  std::shared_ptr<fat::Volume> volume;
  std::optional<Error> failure;
  try {
    handle = msc::MscHandle::probe(bus_, port, options_.host);
    volume = fat::mount(handle, options_.clock);
  } catch (const Error& e) {
    failure = e;
  } catch (const std::exception& e) {
    failure = Error(ErrorCode::kProtocolError, e.what());
  }
  {
    std::lock_guard lock(mutex_);
    Slot& slot = slots_[i];
    if (slot.generation != generation) return;
    if (failure) {
      slot.status = PortStatus::kFailed;
      slot.error = error_text(*failure);
      slot.error_code = failure->code();
    } else {
      slot.status = PortStatus::kReady;
      slot.handle = handle;
      slot.volume = volume;
    }
  }
  changed_.notify_all();
  emit_port(port);
}

PortState Bridge::attach_image(usb::Port port, const std::filesystem::path& image, bool read_only) {
  std::shared_ptr<blockdev::BlockImage> img = blockdev::BlockImage::open(image, read_only);
  auto device = std::make_shared<msc::MscDevice>(img, options_.device);
  const std::size_t i = usb::index_of(port);
  {
    std::lock_guard lock(mutex_);
    if (slots_[i].status != PortStatus::kEmpty || bus_.occupied(port)) {
      throw Error(ErrorCode::kPortOccupied, "port " + std::string(usb::to_string(port)));
    }
    slots_[i].image = image;
    slots_[i].read_only = read_only;
    slots_[i].device = device;
    slots_[i].status = PortStatus::kProbing;
  }
  try {
    bus_.attach(port, device);
  } catch (...) {
    std::lock_guard lock(mutex_);
    if (slots_[i].device == device) {
      std::uint64_t gen = slots_[i].generation;
      slots_[i] = Slot{};
      slots_[i].generation = gen;
    }
    throw;
  }
  return snapshot_port(port);
}

PortState Bridge::detach(usb::Port port) {
  if (!bus_.occupied(port)) {
    throw Error(ErrorCode::kPortEmpty, "port " + std::string(usb::to_string(port)));
  }
  bus_.detach(port);
  return snapshot_port(port);
}

PortState Bridge::wait_settled(usb::Port port, std::chrono::milliseconds timeout) {
  {
    std::unique_lock lock(mutex_);
    const std::size_t i = usb::index_of(port);
    changed_.wait_for(lock, timeout, [&] {
      return slots_[i].status != PortStatus::kProbing || stopping_;
    });
  }
  return snapshot_port(port);
}

PortState Bridge::project(usb::Port port, const Slot& slot) const {
  PortState s;
  s.port = port;
  s.status = slot.status;
  s.error = slot.error;
  s.error_code = slot.error_code;
  s.image = slot.image.string();
  s.read_only = slot.read_only;
  if (slot.handle) {
    s.vendor = slot.handle->vendor();
    s.product = slot.handle->product();
  }
  return s;
}

PortState Bridge::snapshot_port(usb::Port port) {
  std::shared_ptr<fat::Volume> vol;
  PortState s;
  {
    std::lock_guard lock(mutex_);
    const Slot& slot = slots_[usb::index_of(port)];
    s = project(port, slot);
    if (slot.status == PortStatus::kReady) vol = slot.volume;
  }
  if (vol) s.volume = vol->info();
  return s;
}

PortState Bridge::port_state(usb::Port port) { return snapshot_port(port); }

std::vector<PortState> Bridge::ports() {
  std::vector<PortState> out;
  for (usb::Port p : usb::kPorts) out.push_back(snapshot_port(p));
  return out;
}

std::shared_ptr<fat::Volume> Bridge::ready_volume_locked(usb::Port port) const {
  const Slot& slot = slots_[usb::index_of(port)];
  if (slot.status != PortStatus::kReady || !slot.volume) {
    throw Error(ErrorCode::kPortNotReady, "port " + std::string(usb::to_string(port)) + " is " +
                                              std::string(to_string(slot.status)));
  }
  return slot.volume;
}

std::shared_ptr<fat::Volume> Bridge::volume(usb::Port port) {
  std::lock_guard lock(mutex_);
  return ready_volume_locked(port);
}

std::shared_ptr<msc::MscDevice> Bridge::device(usb::Port port) {
  std::lock_guard lock(mutex_);
  return slots_[usb::index_of(port)].device;
}

Listing Bridge::browse(usb::Port port, std::string_view path) {
  auto vol = volume(port);
  Listing l;
  l.port = port;
  l.path = std::string(path);
  l.entries = vol->list_dir(path);
  l.info = vol->info();
  return l;
}

fat::DirEntry Bridge::stat(usb::Port port, std::string_view path) { return volume(port)->stat(path); }

// ---------------------------------------------------------------------------
// Jobs

TransferJob Bridge::start_copy(const CopyRequest& request) {
  if (request.src.port == request.dst.port) {
    throw Error(ErrorCode::kSamePort, "source and destination are both port " +
                                          std::string(usb::to_string(request.src.port)));
  }
  std::shared_ptr<fat::Volume> src;
  std::shared_ptr<fat::Volume> dst;
  {
    std::lock_guard lock(mutex_);
    src = ready_volume_locked(request.src.port);
    dst = ready_volume_locked(request.dst.port);
  }
  if (is_root(request.src.path)) {
    throw Error(ErrorCode::kInvalidArgument, "cannot copy the root directory itself");
  }
  fat::DirEntry src_entry = src->stat(request.src.path);
  if (dst->device().read_only()) {
    throw Error(ErrorCode::kReadOnlyVolume,
                "port " + std::string(usb::to_string(request.dst.port)) + " is write-protected");
  }
  if (src_entry.is_directory() && !request.recursive) {
    throw Error(ErrorCode::kIsADirectory, request.src.path + " (copy directories recursively)");
  }

  std::string target = request.dst.path;
  if (is_root(target)) {
    target = join("/", src_entry.name());
  } else if (auto d = try_stat(*dst, target); d && d->is_directory()) {
    target = join(target, src_entry.name());
  }
  if (std::string parent = target.substr(0, target.find_last_of('/'));
      parent != target && !parent.empty() && !is_root(parent)) {
    auto p = try_stat(*dst, parent);
    if (!p) throw Error(ErrorCode::kNotFound, parent);
    if (!p->is_directory()) throw Error(ErrorCode::kNotADirectory, parent);
  }
  if (auto existing = try_stat(*dst, target)) {
    if (!request.overwrite) throw Error(ErrorCode::kExistsNoOverwrite, target);
    if (existing->is_directory() != src_entry.is_directory()) {
      throw Error(existing->is_directory() ? ErrorCode::kIsADirectory : ErrorCode::kNotADirectory,
                  target);
    }
  }

  auto job = std::make_unique<Job>();
  job->info.src = request.src;
  job->info.dst = Location{request.dst.port, target};
  job->info.overwrite = request.overwrite;
  job->info.recursive = request.recursive;

  std::uint64_t clusters = 0;
  auto add_file = [&](const std::string& s, const std::string& d, std::uint64_t size) {
    job->plan.push_back(PlanItem{false, s, d, size});
    job->info.total_bytes += size;
    ++job->info.total_files;
    clusters += dst->clusters_for(size);
  };
  if (src_entry.is_directory()) {
    std::vector<std::pair<std::string, std::string>> pending{{request.src.path, target}};
    while (!pending.empty()) {
      auto [s, d] = pending.back();
      pending.pop_back();
      job->plan.push_back(PlanItem{true, s, d, 0});
      if (!dst->exists(d)) ++clusters;
      for (const auto& e : src->list_dir(s)) {
        std::string cs = join(s, e.name());
        std::string cd = join(d, e.name());
        if (e.is_directory()) {
          pending.emplace_back(cs, cd);
        } else {
          add_file(cs, cd, e.size_bytes);
        }
      }
    }
    std::stable_partition(job->plan.begin(), job->plan.end(),
                          [](const PlanItem& p) { return p.directory; });
  } else {
    add_file(request.src.path, target, src_entry.size_bytes);
  }
  const std::uint32_t free = dst->free_clusters();
  if (clusters > free) {
    throw Error(ErrorCode::kDestFull, "needs " + std::to_string(clusters) + " clusters, " +
                                          std::to_string(free) + " free");
  }

  std::string id;
  {
    std::lock_guard lock(mutex_);
    if (stopping_) throw Error(ErrorCode::kCancelled, "bridge is shutting down");
    id = "job-" + std::to_string(next_job_++);
    job->info.id = id;
    jobs_.emplace(id, std::move(job));
    job_order_.push_back(id);
  }
  TransferJob queued = job_status(id);
  emit(EventKind::kJobProgress, std::nullopt, queued);
  {
    std::lock_guard lock(mutex_);
    queue_.push_back(id);
  }
  changed_.notify_all();
  return queued;
}

TransferJob Bridge::job_status(const std::string& id) {
  std::lock_guard lock(mutex_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) throw Error(ErrorCode::kUnknownJob, id);
  return it->second->info;
}

std::vector<TransferJob> Bridge::jobs() {
  std::lock_guard lock(mutex_);
  std::vector<TransferJob> out;
  for (const auto& id : job_order_) out.push_back(jobs_.at(id)->info);
  return out;
}

TransferJob Bridge::cancel(const std::string& id) {
  bool dequeued = false;
  {
    std::lock_guard lock(mutex_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) throw Error(ErrorCode::kUnknownJob, id);
    Job& job = *it->second;
    if (job.info.state == JobState::kQueued) {
      queue_.erase(std::remove(queue_.begin(), queue_.end(), id), queue_.end());
      dequeued = true;
    } else if (job.info.state == JobState::kRunning) {
      job.cancel_requested = true;
    }
  }
  if (dequeued) finish_job(id, JobState::kCancelled, std::nullopt);
  return job_status(id);
}

TransferJob Bridge::wait_job(const std::string& id, std::chrono::milliseconds timeout) {
  std::unique_lock lock(mutex_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) throw Error(ErrorCode::kUnknownJob, id);
  Job* job = it->second.get();
  changed_.wait_for(lock, timeout, [&] { return is_terminal(job->info.state); });
  return job->info;
}

void Bridge::wait_idle() {
  std::unique_lock lock(mutex_);
  changed_.wait(lock, [&] { return (queue_.empty() && !running_) || stopping_; });
}

void Bridge::run_jobs() {
  for (;;) {
    std::string id;
    {
      std::unique_lock lock(mutex_);
      changed_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) return;
      id = queue_.front();
      queue_.pop_front();
      running_ = id;
    }
    execute(id);
    {
      std::lock_guard lock(mutex_);
      running_.reset();
    }
    changed_.notify_all();
  }
}

void Bridge::check_interrupt(const std::string& id) {
  std::lock_guard lock(mutex_);
  Job& job = *jobs_.at(id);
  if (job.port_lost) throw Error(ErrorCode::kDeviceGone, "drive removed during transfer");
  if (job.cancel_requested) throw Error(ErrorCode::kCancelled, job.info.id);
}

void Bridge::progress(const std::string& id, std::uint64_t bytes, bool file_done) {
  std::function<void(const TransferJob&)> hook;
  TransferJob snapshot;
  {
    std::lock_guard lock(mutex_);
    Job& job = *jobs_.at(id);
    job.info.copied_bytes += bytes;
    if (file_done) ++job.info.copied_files;
    snapshot = job.info;
    hook = options_.after_chunk;
  }
  emit(EventKind::kJobProgress, std::nullopt, snapshot);
  if (hook && bytes > 0) hook(snapshot);
}

void Bridge::copy_file(Job& job, const std::string& id, fat::Volume& src, fat::Volume& dst,
                       const PlanItem& item) {
  auto reader = src.open_reader(item.src);
  auto writer = dst.open_writer(item.dst, job.info.overwrite);
  Bytes buf(options_.chunk_size);
  std::uint64_t offset = 0;
  const std::uint64_t size = reader->size();
  while (offset < size) {
    check_interrupt(id);
    std::size_t n = reader->read(offset, buf);
    if (n == 0) throw Error(ErrorCode::kCorruptVolume, item.src + ": chain ends before its size");
    writer->append(ByteSpan(buf).first(n));
    offset += n;
    progress(id, n, false);
  }
  check_interrupt(id);
  writer->commit();
  dst.flush();
  progress(id, 0, true);
}

void Bridge::execute(const std::string& id) {
  Job* job = nullptr;
  {
    std::lock_guard lock(mutex_);
    job = jobs_.at(id).get();
    if (job->info.state != JobState::kQueued) return;
    job->info.state = JobState::kRunning;
    job->info.started = now();
  }
  emit(EventKind::kJobProgress, std::nullopt, job_status(id));

  std::shared_ptr<fat::Volume> src;
  std::shared_ptr<fat::Volume> dst;
  // Entries this job brought into existence, for rollback.
  std::vector<std::pair<std::string, bool>> created;
  try {
    {
      std::lock_guard lock(mutex_);
      if (job->port_lost) throw Error(ErrorCode::kDeviceGone, "drive removed before transfer");
      src = ready_volume_locked(job->info.src.port);
      dst = ready_volume_locked(job->info.dst.port);
    }
    for (const PlanItem& item : job->plan) {
      check_interrupt(id);
      if (item.directory) {
        if (!dst->exists(item.dst)) {
          dst->create_dir(item.dst);
          created.emplace_back(item.dst, true);
        }
        continue;
      }
      bool existed = dst->exists(item.dst);
      copy_file(*job, id, *src, *dst, item);
      if (!existed) created.emplace_back(item.dst, false);
    }
    dst->flush();
    finish_job(id, JobState::kDone, std::nullopt);
  } catch (const Error& raw) {
    Error e = job_error(raw);
    bool dst_alive = true;
    {
      std::lock_guard lock(mutex_);
      const Slot& slot = slots_[usb::index_of(job->info.dst.port)];
      dst_alive = dst && slot.volume == dst;
    }
    if (dst_alive) {
      try {
        for (auto it = created.rbegin(); it != created.rend(); ++it) dst->remove(it->first);
        dst->flush();
      } catch (const Error&) {
      }
    }
    if (e.code() == ErrorCode::kCancelled) {
      finish_job(id, JobState::kCancelled, std::nullopt);
    } else {
      finish_job(id, JobState::kFailed, e);
    }
  }
}

void Bridge::finish_job(const std::string& id, JobState state, const std::optional<Error>& error) {
  TransferJob snapshot;
  {
    std::lock_guard lock(mutex_);
    Job& job = *jobs_.at(id);
    if (is_terminal(job.info.state)) return;
    job.info.state = state;
    job.info.finished = now();
    if (error) {
      job.info.error = error_text(*error);
      job.info.error_code = error->code();
    }
    snapshot = job.info;
  }
  changed_.notify_all();
  emit(EventKind::kJobFinished, std::nullopt, snapshot);
}

// ---------------------------------------------------------------------------
// Events

std::unique_ptr<Subscription> Bridge::subscribe() {
  auto state = std::make_shared<Subscription::State>();
  state->capacity = options_.subscriber_queue;
  {
    std::lock_guard lock(event_mutex_);
    subscribers_.push_back(state);
  }
  return std::unique_ptr<Subscription>(new Subscription(weak_from_this(), state));
}

void Bridge::unsubscribe(const std::shared_ptr<Subscription::State>& state) {
  std::lock_guard lock(event_mutex_);
  subscribers_.erase(std::remove(subscribers_.begin(), subscribers_.end(), state),
                     subscribers_.end());
}

void Bridge::deliver_locked(const BridgeEvent& ev) {
  auto it = subscribers_.begin();
  while (it != subscribers_.end()) {
    auto& s = **it;
    bool drop = false;
    {
      std::lock_guard sl(s.mutex);
      if (s.closed) {
        drop = true;
      } else if (s.queue.size() >= s.capacity) {
        s.closed = s.overflowed = true;
        drop = true;
      } else {
        s.queue.push_back(ev);
      }
    }
    s.cv.notify_all();
    it = drop ? subscribers_.erase(it) : it + 1;
  }
}

void Bridge::emit(EventKind kind, std::optional<PortState> port, std::optional<TransferJob> job) {
  std::lock_guard lock(event_mutex_);
  deliver_locked(BridgeEvent{next_seq_++, kind, std::move(port), std::move(job)});
}

void Bridge::emit_port(usb::Port port) {
  // Snapshot under the event lock so port events carry states in order.
  std::lock_guard lock(event_mutex_);
  PortState state = snapshot_port(port);
  deliver_locked(BridgeEvent{next_seq_++, EventKind::kPortChanged, std::move(state), std::nullopt});
}

}  // namespace usbb::bridge
