#include "usbb/msc_host.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>

#include "usbb/error.hpp"

namespace usbb::msc {

std::string_view to_string(HandleState state) {
  switch (state) {
    case HandleState::kProbing: return "probing";
    case HandleState::kReady: return "ready";
    case HandleState::kError: return "error";
    case HandleState::kGone: return "gone";
  }
  return "unknown";
}

namespace {

// Raised inside transact() once reset recovery has been performed; the
// command may be re-issued.
struct TransportFault {
  std::string what;
};

bool is_gone(const Error& e) {
  return e.code() == ErrorCode::kDeviceGone || e.code() == ErrorCode::kNoSuchDevice;
}

std::string trim_ascii(const Bytes& data, std::size_t off, std::size_t len) {
  std::string s;
  for (std::size_t i = off; i < off + len && i < data.size(); ++i) s.push_back(static_cast<char>(data[i]));
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

}  // namespace

std::shared_ptr<MscHandle> MscHandle::probe(usb::Bus& bus, usb::Port port, HostOptions options) {
  if (!bus.occupied(port)) throw Error(ErrorCode::kDeviceGone, "nothing attached to port " + std::string(usb::to_string(port)));
  usb::EnumeratedDevice dev;
  try {
    auto existing = bus.device(port);
    dev = existing ? *existing : bus.enumerate(port);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kPortEmpty) throw Error(ErrorCode::kDeviceGone, e.detail());
    throw;
  }

  const usb::InterfaceDescriptor* msc = nullptr;
  for (const auto& itf : dev.descriptors.configurations.front().interfaces) {
    if (itf.interface_class == kInterfaceClassMassStorage) {
      msc = &itf;
      break;
    }
  }
  if (!msc) throw Error(ErrorCode::kUnsupportedDevice, "no mass-storage interface");
  if (msc->interface_subclass != kSubclassScsiTransparent ||
      msc->interface_protocol != kProtocolBulkOnly) {
    char what[96];
    std::snprintf(what, sizeof what, "interface 0x%02x/0x%02x/0x%02x%s", msc->interface_class,
                  msc->interface_subclass, msc->interface_protocol,
                  msc->interface_subclass == kSubclassAtapi ? " (ATAPI)" : "");
    throw Error(ErrorCode::kUnsupportedDevice, what);
  }
  std::uint8_t bulk_in = 0;
  std::uint8_t bulk_out = 0;
  for (const auto& ep : msc->endpoints) {
    if (ep.type != usb::TransferType::kBulk) continue;
    if (ep.direction() == usb::Direction::kIn && !bulk_in) bulk_in = ep.address;
    if (ep.direction() == usb::Direction::kOut && !bulk_out) bulk_out = ep.address;
  }
  if (!bulk_in || !bulk_out) throw Error(ErrorCode::kUnsupportedDevice, "missing bulk endpoints");

  std::shared_ptr<MscHandle> h(
      new MscHandle(bus, port, std::move(dev), options, msc->number, bulk_in, bulk_out));

  std::lock_guard lock(h->mutex_);
  Outcome inq = h->command(cdb_inquiry(kInquiryLength), kInquiryLength, true);
  if (inq.data.size() < kInquiryLength || (inq.data[0] & 0x1F) != 0x00) {
    throw Error(ErrorCode::kUnsupportedDevice, "not a direct-access block device");
  }
  h->vendor_ = trim_ascii(inq.data, 8, 8);
  h->product_ = trim_ascii(inq.data, 16, 16);

  bool ready = false;
  std::string last;
  for (int attempt = 0; attempt < options.test_unit_ready_attempts && !ready; ++attempt) {
    try {
      h->command(cdb_test_unit_ready(), 0, false);
      ready = true;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kIoFailed) throw;
      last = e.detail();
    }
  }
  if (!ready) {
    h->state_ = HandleState::kError;
    throw Error(ErrorCode::kNotReadyTimeout,
                std::to_string(options.test_unit_ready_attempts) + " attempts, last " + last);
  }

  Outcome cap = h->command(cdb_read_capacity10(), kReadCapacityLength, true);
  if (cap.data.size() != kReadCapacityLength) throw Error(ErrorCode::kIoFailed, "short READ CAPACITY data");
  h->capacity_.last_lba = load_be32(cap.data, 0);
  h->capacity_.block_length = load_be32(cap.data, 4);
  if (h->capacity_.block_length != blockdev::kSectorSize) {
    throw Error(ErrorCode::kUnsupportedDevice,
                "block length " + std::to_string(h->capacity_.block_length));
  }

  try {
    Outcome mode = h->command(cdb_mode_sense6(0x3F, 192), 192, true);
    h->write_protected_ = mode.data.size() >= 3 && (mode.data[2] & 0x80) != 0;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kIoFailed) throw;
  }
  h->state_ = HandleState::kReady;
  return h;
}

MscHandle::MscHandle(usb::Bus& bus, usb::Port port, usb::EnumeratedDevice device,
                     HostOptions options, std::uint8_t interface_number, std::uint8_t bulk_in,
                     std::uint8_t bulk_out)
    : bus_(bus),
      port_(port),
      device_(std::move(device)),
      options_(options),
      interface_number_(interface_number),
      bulk_in_(bulk_in),
      bulk_out_(bulk_out) {}

void MscHandle::gone(const Error& cause) {
  state_ = HandleState::kGone;
  throw Error(ErrorCode::kDeviceGone, cause.detail());
}

void MscHandle::ensure_usable() const {
  if (state_ == HandleState::kGone) {
    throw Error(ErrorCode::kDeviceGone, "port " + std::string(usb::to_string(port_)));
  }
}

void MscHandle::log(const CommandBlockWrapper& cbw, const CommandStatusWrapper& csw, int retries) {
  std::uint32_t lba = 0;
  std::uint32_t count = 0;
  if (cbw.opcode() == opcode::kRead10 || cbw.opcode() == opcode::kWrite10) {
    lba = load_be32(cbw.command_block, 2);
    count = load_be16(cbw.command_block, 7);
  }
  char line[128];
  std::snprintf(line, sizeof line, "%s %u 0x%02x %u %u %u %u %d",
                std::string(usb::to_string(port_)).c_str(), cbw.tag, cbw.opcode(), lba, count,
                static_cast<unsigned>(csw.status), csw.data_residue, retries);
  trace_.emplace_back(line);
}

MscHandle::Outcome MscHandle::transact(const Cdb& cdb, std::uint32_t length, bool data_in,
                                       ByteSpan out) {
  const std::uint8_t addr = device_.address;
  const std::uint32_t tag = next_tag_++;
  CommandBlockWrapper cbw = make_cbw(tag, cdb, length, data_in);
  auto wire = cbw.serialize();
  if (corrupt_next_) {
    corrupt_next_ = false;
    std::fill_n(wire.begin(), 4, 0);
  }

  auto clear_halt = [&](std::uint8_t ep) {
    bus_.control_transfer(addr, usb::clear_endpoint_halt(ep));
  };

  Outcome result;
  try {
    try {
      bus_.bulk_out(addr, bulk_out_, wire);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kEndpointHalted) throw;
      reset_recovery_locked();
      throw TransportFault{"CBW stalled"};
    }

    if (length > 0) {
      try {
        if (data_in) {
          result.data = bus_.bulk_in(addr, bulk_in_, length);
        } else {
          bus_.bulk_out(addr, bulk_out_, out);
        }
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kEndpointHalted) throw;
        clear_halt(data_in ? bulk_in_ : bulk_out_);
      }
    }

    Bytes raw;
    for (int attempt = 0;; ++attempt) {
      try {
        raw = bus_.bulk_in(addr, bulk_in_, kCswLength);
        break;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kEndpointHalted) throw;
        if (attempt > 0) {
          reset_recovery_locked();
          throw TransportFault{"CSW stalled twice"};
        }
        clear_halt(bulk_in_);
        ++result.retries;
      }
    }
    if (raw.size() != kCswLength) {
      reset_recovery_locked();
      throw TransportFault{"CSW of " + std::to_string(raw.size()) + " bytes"};
    }
    result.csw = CommandStatusWrapper::parse(raw);
    if (!result.csw.valid() || result.csw.tag != tag ||
        (result.csw.status != CswStatus::kPhaseError && result.csw.data_residue > length)) {
      reset_recovery_locked();
      throw TransportFault{"CSW not meaningful"};
    }
  } catch (const Error& e) {
    if (is_gone(e)) gone(e);
    throw;
  }
  log(cbw, result.csw, result.retries);
  return result;
}

MscHandle::Outcome MscHandle::command(const Cdb& cdb, std::uint32_t length, bool data_in,
                                      ByteSpan out, SenseState* sense_out) {
  ensure_usable();
  int retries = 0;
  int recoveries_used = 0;
  bool unit_attention_absorbed = false;
  // Rewrite the retries column of the latest attempt.
  auto note_retries = [&] {
    if (retries != 0 && !trace_.empty()) {
      auto& last = trace_.back();
      last = last.substr(0, last.rfind(' ') + 1) + std::to_string(retries);
    }
  };
  for (;;) {
    Outcome o;
    try {
      o = transact(cdb, length, data_in, out);
    } catch (const TransportFault& f) {
      if (recoveries_used < options_.retries_after_recovery) {
        ++recoveries_used;
        ++retries;
        continue;
      }
      state_ = HandleState::kError;
      note_retries();
      throw Error(ErrorCode::kProtocolError, f.what);
    }
    retries += o.retries;
    if (o.csw.status == CswStatus::kPhaseError) {
      reset_recovery_locked();
      if (recoveries_used < options_.retries_after_recovery) {
        ++recoveries_used;
        ++retries;
        continue;
      }
      state_ = HandleState::kError;
      note_retries();
      throw Error(ErrorCode::kProtocolError, "phase error persisted after recovery");
    }
    if (o.csw.status == CswStatus::kFailed) {
      SenseState sense = request_sense_locked();
      if (sense.key == SenseKey::kUnitAttention && !unit_attention_absorbed) {
        unit_attention_absorbed = true;
        ++retries;
        continue;
      }
      if (sense_out) *sense_out = sense;
      throw Error(ErrorCode::kIoFailed, describe(sense));
    }
    o.retries = retries;
    note_retries();
    return o;
  }
}

SenseState MscHandle::request_sense_locked() {
  Outcome o;
  try {
    o = transact(cdb_request_sense(kSenseLength), kSenseLength, true, {});
  } catch (const TransportFault& f) {
    throw Error(ErrorCode::kProtocolError, "REQUEST SENSE: " + f.what);
  }
  if (o.csw.status != CswStatus::kPassed || o.data.size() < 14) {
    throw Error(ErrorCode::kProtocolError, "REQUEST SENSE failed");
  }
  return SenseState{static_cast<SenseKey>(o.data[2] & 0x0F), o.data[12], o.data[13]};
}

void MscHandle::reset_recovery_locked() {
  const std::uint8_t addr = device_.address;
  try {
    bus_.control_transfer(addr, usb::SetupPacket{usb::request_type::kClass |
                                                     usb::request_type::kInterface,
                                                 kRequestBulkOnlyReset, 0, interface_number_, 0});
    bus_.control_transfer(addr, usb::clear_endpoint_halt(bulk_in_));
    bus_.control_transfer(addr, usb::clear_endpoint_halt(bulk_out_));
  } catch (const Error& e) {
    if (is_gone(e)) gone(e);
    state_ = HandleState::kError;
    throw;
  }
  ++recoveries_;
  if (state_ == HandleState::kError) state_ = HandleState::kReady;
}

void MscHandle::reset_recovery() {
  std::lock_guard lock(mutex_);
  ensure_usable();
  reset_recovery_locked();
}

std::uint8_t MscHandle::get_max_lun() {
  std::lock_guard lock(mutex_);
  ensure_usable();
  try {
    Bytes r = bus_.control_transfer(
        device_.address,
        usb::SetupPacket{usb::request_type::kDirIn | usb::request_type::kClass |
                             usb::request_type::kInterface,
                         kRequestGetMaxLun, 0, interface_number_, 1});
    return r.empty() ? 0 : r[0];
  } catch (const Error& e) {
    if (is_gone(e)) gone(e);
    if (e.code() == ErrorCode::kRequestStalled) return 0;
    throw;
  }
}

bool MscHandle::test_unit_ready() {
  std::lock_guard lock(mutex_);
  try {
    command(cdb_test_unit_ready(), 0, false);
    return true;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kIoFailed) return false;
    throw;
  }
}

std::uint64_t MscHandle::sector_count() const {
  std::lock_guard lock(mutex_);
  return capacity_.blocks();
}

bool MscHandle::read_only() const {
  std::lock_guard lock(mutex_);
  return write_protected_;
}

Capacity MscHandle::capacity() const {
  std::lock_guard lock(mutex_);
  return capacity_;
}

HandleState MscHandle::state() const {
  std::lock_guard lock(mutex_);
  return state_;
}

std::uint32_t MscHandle::next_tag() const {
  std::lock_guard lock(mutex_);
  return next_tag_;
}

std::size_t MscHandle::recoveries() const {
  std::lock_guard lock(mutex_);
  return recoveries_;
}

std::vector<std::string> MscHandle::trace() const {
  std::lock_guard lock(mutex_);
  return trace_;
}

void MscHandle::corrupt_next_cbw() {
  std::lock_guard lock(mutex_);
  corrupt_next_ = true;
}

void MscHandle::read(std::uint64_t lba, std::uint32_t count, MutableByteSpan out) {
  if (out.size() != static_cast<std::size_t>(count) * blockdev::kSectorSize) {
    throw Error(ErrorCode::kInvalidArgument, "read buffer size mismatch");
  }
  std::lock_guard lock(mutex_);
  ensure_usable();
  if (lba > capacity_.blocks() || count > capacity_.blocks() - lba) {
    throw Error(ErrorCode::kRangeError, "lba " + std::to_string(lba) + " count " +
                                            std::to_string(count) + " beyond capacity");
  }
  std::uint32_t done = 0;
  while (done < count) {
    std::uint32_t n = std::min(count - done, options_.max_blocks_per_command);
    const std::uint32_t bytes = n * static_cast<std::uint32_t>(blockdev::kSectorSize);
    Outcome o = command(cdb_read10(static_cast<std::uint32_t>(lba + done), static_cast<std::uint16_t>(n)),
                        bytes, true);
    if (o.data.size() != bytes) {
      throw Error(ErrorCode::kIoFailed, "short read: " + std::to_string(o.data.size()) + " of " +
                                            std::to_string(bytes) + " bytes");
    }
    std::memcpy(out.data() + static_cast<std::size_t>(done) * blockdev::kSectorSize, o.data.data(),
                bytes);
    done += n;
  }
}

void MscHandle::write(std::uint64_t lba, std::uint32_t count, ByteSpan data) {
  if (data.size() != static_cast<std::size_t>(count) * blockdev::kSectorSize) {
    throw Error(ErrorCode::kInvalidArgument, "write buffer size mismatch");
  }
  std::lock_guard lock(mutex_);
  ensure_usable();
  if (lba > capacity_.blocks() || count > capacity_.blocks() - lba) {
    throw Error(ErrorCode::kRangeError, "lba " + std::to_string(lba) + " count " +
                                            std::to_string(count) + " beyond capacity");
  }
  std::uint32_t done = 0;
  while (done < count) {
    std::uint32_t n = std::min(count - done, options_.max_blocks_per_command);
    const std::uint32_t bytes = n * static_cast<std::uint32_t>(blockdev::kSectorSize);
    command(cdb_write10(static_cast<std::uint32_t>(lba + done), static_cast<std::uint16_t>(n)), bytes,
            false, data.subspan(static_cast<std::size_t>(done) * blockdev::kSectorSize, bytes));
    done += n;
  }
}

Bytes MscHandle::read_blocks(std::uint64_t lba, std::uint32_t count) {
  Bytes out(static_cast<std::size_t>(count) * blockdev::kSectorSize);
  read(lba, count, out);
  return out;
}

void MscHandle::write_blocks(std::uint64_t lba, std::uint32_t count, ByteSpan data) {
  write(lba, count, data);
}

void MscHandle::flush() {
  std::lock_guard lock(mutex_);
  ensure_usable();
  command(cdb_synchronize_cache10(), 0, false);
}

}  // namespace usbb::msc
