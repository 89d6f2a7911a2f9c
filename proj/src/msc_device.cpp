#include "usbb/msc_device.hpp"

#include <algorithm>
#include <cstdio>

#include "usbb/error.hpp"

namespace usbb::msc {

namespace {

void put_padded(Bytes& out, std::size_t off, const std::string& text, std::size_t width) {
  for (std::size_t i = 0; i < width; ++i) {
    out[off + i] = i < text.size() ? static_cast<std::uint8_t>(text[i]) : ' ';
  }
}

bool is_data_out(std::uint8_t op) { return op == opcode::kWrite10; }

}  // namespace

usb::DescriptorSet MscDevice::make_descriptors(const MscDeviceOptions& options) {
  const std::uint16_t bulk_mps = options.speed == usb::Speed::kHigh ? 512 : 64;
  usb::DescriptorSet set;
  set.device.bcd_usb = 0x0200;
  set.device.max_packet_size0 = 64;
  set.device.vendor_id = options.vendor_id;
  set.device.product_id = options.product_id;
  set.device.bcd_device = 0x0100;
  set.device.manufacturer_index = 1;
  set.device.product_index = 2;
  set.device.serial_index = 3;
  set.device.num_configurations = 1;

  usb::InterfaceDescriptor itf;
  itf.number = 0;
  itf.interface_class = kInterfaceClassMassStorage;
  itf.interface_subclass = options.interface_subclass;
  itf.interface_protocol = kProtocolBulkOnly;
  itf.endpoints = {
      usb::EndpointDescriptor{kBulkInEndpoint, usb::TransferType::kBulk, bulk_mps, 0},
      usb::EndpointDescriptor{kBulkOutEndpoint, usb::TransferType::kBulk, bulk_mps, 0},
  };
  usb::ConfigurationDescriptor cfg;
  cfg.value = 1;
  cfg.attributes = 0x80;
  cfg.max_power = 50;
  cfg.interfaces.push_back(std::move(itf));
  set.configurations.push_back(std::move(cfg));
  return set;
}

namespace {
std::u16string widen(const std::string& s) { return std::u16string(s.begin(), s.end()); }
}  // namespace

MscDevice::MscDevice(std::shared_ptr<blockdev::BlockImage> image, MscDeviceOptions options)
    : usb::UsbFunction(make_descriptors(options),
                       {widen(options.vendor), widen(options.product), options.serial}),
      image_(std::move(image)),
      options_(std::move(options)) {}

void MscDevice::on_attach() {
  std::lock_guard lock(mutex());
  reset_device_state();
  medium_present_ = true;
  unit_attention_ = options_.unit_attention_on_attach;
  stage_ = Stage::kCommand;
  reset_required_ = false;
  sense_ = {};
}

void MscDevice::on_detach() {
  std::lock_guard lock(mutex());
  medium_present_ = false;
  // Unflushed writes do not survive losing power.
  image_->discard_unflushed();
}

void MscDevice::inject(Fault fault) {
  std::lock_guard lock(mutex());
  faults_.push_back(fault);
}

void MscDevice::set_not_ready(bool not_ready) {
  std::lock_guard lock(mutex());
  not_ready_ = not_ready;
}

void MscDevice::detach_medium() {
  std::lock_guard lock(mutex());
  medium_present_ = false;
}

bool MscDevice::medium_present() const {
  std::lock_guard lock(mutex());
  return medium_present_;
}

SenseState MscDevice::sense() const {
  std::lock_guard lock(mutex());
  return sense_;
}

std::size_t MscDevice::commands_seen(std::uint8_t op) const {
  std::lock_guard lock(mutex());
  auto it = opcode_counts_.find(op);
  return it == opcode_counts_.end() ? 0 : it->second;
}

bool MscDevice::awaiting_reset() const {
  std::lock_guard lock(mutex());
  return reset_required_;
}

std::vector<std::string> MscDevice::trace() const {
  std::lock_guard lock(mutex());
  return trace_;
}

bool MscDevice::consume_fault(Fault fault) {
  if (!faults_.empty() && faults_.front() == fault) {
    faults_.pop_front();
    return true;
  }
  return false;
}

ScsiResponse MscDevice::check_condition(SenseKey key, std::uint8_t code, std::uint8_t qualifier) {
  sense_ = SenseState{key, code, qualifier};
  return {CswStatus::kFailed, {}};
}

ScsiResponse MscDevice::execute(ByteSpan cdb, ByteSpan data_out) {
  std::lock_guard lock(mutex());
  if (!cdb.empty()) ++opcode_counts_[cdb[0]];
  return execute_locked(cdb, data_out, 0);
}

ScsiResponse MscDevice::execute_locked(ByteSpan cdb, ByteSpan data_out, std::uint32_t) {
  if (cdb.empty()) return check_condition(SenseKey::kIllegalRequest, asc::kInvalidFieldInCdb);
  const std::uint8_t op = cdb[0];
  if (op == opcode::kRequestSense) return request_sense(cdb);
  if (!medium_present_) return check_condition(SenseKey::kNotReady, asc::kMediumNotPresent);
  if (op == opcode::kInquiry) return inquiry(cdb);

  if (std::find(kImplementedOpcodes.begin(), kImplementedOpcodes.end(), op) ==
      kImplementedOpcodes.end()) {
    return check_condition(SenseKey::kIllegalRequest, asc::kInvalidOpcode);
  }
  if (unit_attention_) {
    unit_attention_ = false;
    return check_condition(SenseKey::kUnitAttention, asc::kNotReadyToReadyChange);
  }
  if (not_ready_) return check_condition(SenseKey::kNotReady, asc::kBecomingReady, 0x01);

  switch (op) {
    case opcode::kTestUnitReady: return {};
    case opcode::kModeSense6: return mode_sense6(cdb);
    case opcode::kReadCapacity10: return read_capacity10();
    case opcode::kRead10: return read10(cdb);
    case opcode::kWrite10: return write10(cdb, data_out);
    case opcode::kSynchronizeCache10:
      try {
        image_->flush();
      } catch (const Error&) {
        return check_condition(SenseKey::kMediumError, asc::kWriteError);
      }
      return {};
    default: return check_condition(SenseKey::kIllegalRequest, asc::kInvalidOpcode);
  }
}

ScsiResponse MscDevice::inquiry(ByteSpan cdb) {
  if (cdb.size() < 6) return check_condition(SenseKey::kIllegalRequest, asc::kInvalidFieldInCdb);
  if (cdb[1] & 0x01) return check_condition(SenseKey::kIllegalRequest, asc::kInvalidFieldInCdb);
  Bytes out(kInquiryLength, 0);
  out[0] = 0x00;  // direct-access block device
  out[1] = 0x80;  // removable
  out[2] = 0x04;  // SPC-2
  out[3] = 0x02;  // response data format
  out[4] = kInquiryLength - 5;
  put_padded(out, 8, options_.vendor, 8);
  put_padded(out, 16, options_.product, 16);
  put_padded(out, 32, options_.revision, 4);
  out.resize(std::min<std::size_t>(out.size(), load_be16(cdb, 3)));
  return {CswStatus::kPassed, std::move(out)};
}

ScsiResponse MscDevice::request_sense(ByteSpan cdb) {
  if (cdb.size() < 6) return check_condition(SenseKey::kIllegalRequest, asc::kInvalidFieldInCdb);
  Bytes out(kSenseLength, 0);
  SenseState reported = sense_;
  if (!medium_present_ && reported.key == SenseKey::kNoSense) {
    reported = SenseState{SenseKey::kNotReady, asc::kMediumNotPresent, 0};
  }
  out[0] = 0x70;  // current error, fixed format
  out[2] = static_cast<std::uint8_t>(reported.key);
  out[7] = kSenseLength - 8;
  out[12] = reported.asc;
  out[13] = reported.ascq;
  out.resize(std::min<std::size_t>(out.size(), cdb[4]));
  sense_ = {};
  return {CswStatus::kPassed, std::move(out)};
}

ScsiResponse MscDevice::mode_sense6(ByteSpan cdb) {
  const std::uint8_t page = cdb[2] & 0x3F;
  if (page != 0x3F && page != 0x08) {
    return check_condition(SenseKey::kIllegalRequest, asc::kInvalidFieldInCdb);
  }
  Bytes out(4, 0);
  out[2] = image_->read_only() ? 0x80 : 0x00;
  if (page == 0x08) {
    // Caching page: write cache enabled, since the image buffers writes.
    Bytes caching(20, 0);
    caching[0] = 0x08;
    caching[1] = 18;
    caching[2] = 0x04;
    out.insert(out.end(), caching.begin(), caching.end());
  }
  out[0] = static_cast<std::uint8_t>(out.size() - 1);
  out.resize(std::min<std::size_t>(out.size(), cdb[4]));
  return {CswStatus::kPassed, std::move(out)};
}

ScsiResponse MscDevice::read_capacity10() {
  Bytes out(kReadCapacityLength, 0);
  std::uint64_t last = image_->sector_count() - 1;
  store_be32(out, 0, static_cast<std::uint32_t>(std::min<std::uint64_t>(last, 0xFFFFFFFFu)));
  store_be32(out, 4, static_cast<std::uint32_t>(blockdev::kSectorSize));
  return {CswStatus::kPassed, std::move(out)};
}

ScsiResponse MscDevice::read10(ByteSpan cdb) {
  const std::uint32_t lba = load_be32(cdb, 2);
  const std::uint16_t count = load_be16(cdb, 7);
  if (count == 0) return {};
  if (static_cast<std::uint64_t>(lba) + count > image_->sector_count()) {
    return check_condition(SenseKey::kIllegalRequest, asc::kLbaOutOfRange);
  }
  Bytes out(static_cast<std::size_t>(count) * blockdev::kSectorSize);
  try {
    image_->read(lba, count, out);
  } catch (const Error&) {
    return check_condition(SenseKey::kMediumError, asc::kUnrecoveredReadError);
  }
  return {CswStatus::kPassed, std::move(out)};
}

ScsiResponse MscDevice::write10(ByteSpan cdb, ByteSpan data) {
  const std::uint32_t lba = load_be32(cdb, 2);
  const std::uint16_t count = load_be16(cdb, 7);
  if (image_->read_only()) return check_condition(SenseKey::kDataProtect, asc::kWriteProtected);
  if (count == 0) return {};
  if (static_cast<std::uint64_t>(lba) + count > image_->sector_count()) {
    return check_condition(SenseKey::kIllegalRequest, asc::kLbaOutOfRange);
  }
  const std::size_t bytes = static_cast<std::size_t>(count) * blockdev::kSectorSize;
  if (data.size() < bytes) return check_condition(SenseKey::kIllegalRequest, asc::kInvalidFieldInCdb);
  try {
    image_->write(lba, count, data.first(bytes));
  } catch (const Error&) {
    return check_condition(SenseKey::kMediumError, asc::kWriteError);
  }
  return {};
}

// ---------------------------------------------------------------------------
// Bulk-Only Transport

void MscDevice::enter_reset_required() {
  reset_required_ = true;
  stage_ = Stage::kCommand;
  data_in_.clear();
  set_halt(kBulkInEndpoint);
  set_halt(kBulkOutEndpoint);
  trace_.push_back("- invalid-cbw");
}

bool MscDevice::can_clear_halt(std::uint8_t) const { return !reset_required_; }

void MscDevice::finish(CswStatus status, std::uint32_t transferred) {
  const CommandBlockWrapper& cbw = pending_.cbw;
  csw_ = CommandStatusWrapper{kCswSignature, cbw.tag, cbw.data_transfer_length - transferred,
                              status};
  stage_ = Stage::kStatus;
  char line[96];
  std::snprintf(line, sizeof line, "%u 0x%02x %u %u %u %u", cbw.tag, cbw.opcode(), pending_.lba,
                pending_.count, static_cast<unsigned>(status), csw_.data_residue);
  trace_.emplace_back(line);
}

void MscDevice::accept_cbw(ByteSpan data) {
  const bool corrupted = consume_fault(Fault::kInvalidCbw);
  if (corrupted || data.size() != kCbwLength) {
    enter_reset_required();
    return;
  }
  CommandBlockWrapper cbw = CommandBlockWrapper::parse(data);
  if (!cbw.valid()) {
    enter_reset_required();
    return;
  }
  ++opcode_counts_[cbw.opcode()];

  pending_ = Pending{};
  pending_.cbw = cbw;
  const std::uint8_t op = cbw.opcode();
  if (op == opcode::kRead10 || op == opcode::kWrite10) {
    pending_.lba = load_be32(cbw.command_block, 2);
    pending_.count = load_be16(cbw.command_block, 7);
  }
  const std::uint32_t host_len = cbw.data_transfer_length;
  const bool host_in = cbw.data_in();
  data_in_.clear();

  // Routes the host's announced data phase (if any) to a no-data outcome.
  auto conclude_without_data = [&](CswStatus status) {
    pending_.phase_error = status == CswStatus::kPhaseError;
    pending_.device_bytes = 0;
    csw_.status = status;
    if (host_len == 0) {
      finish(status, 0);
    } else {
      pending_.fail_before_data = true;
      stage_ = host_in ? Stage::kDataIn : Stage::kDataOut;
    }
  };

  if (consume_fault(Fault::kPhaseError)) {
    conclude_without_data(CswStatus::kPhaseError);
    return;
  }
  if (cbw.lun != 0) {
    check_condition(SenseKey::kIllegalRequest, asc::kLunNotSupported);
    conclude_without_data(CswStatus::kFailed);
    return;
  }

  ByteSpan cdb(cbw.command_block.data(), cbw.cb_length);
  if (is_data_out(op)) {
    const std::uint32_t device_out = pending_.count * static_cast<std::uint32_t>(blockdev::kSectorSize);
    if ((host_len > 0 && host_in) || device_out > host_len) {
      conclude_without_data(CswStatus::kPhaseError);  // cases 3, 10, 13
      return;
    }
    if (host_len == 0) {
      ScsiResponse r = execute_locked(cdb, {}, 0);
      finish(r.status, 0);
      return;
    }
    pending_.device_bytes = device_out;
    stage_ = Stage::kDataOut;
    return;
  }

  ScsiResponse r = execute_locked(cdb, {}, host_in ? host_len : 0);
  if (r.data.size() > (host_in ? host_len : 0)) {
    conclude_without_data(CswStatus::kPhaseError);  // cases 2, 7, 8
    return;
  }
  if (host_len == 0) {
    finish(r.status, 0);
    return;
  }
  if (!host_in) {
    // Host announced data-out for a command that takes none (case 9).
    pending_.fail_before_data = true;
    csw_.status = r.status;
    stage_ = Stage::kDataOut;
    return;
  }
  pending_.device_bytes = static_cast<std::uint32_t>(r.data.size());
  csw_.status = r.status;
  data_in_ = std::move(r.data);
  stage_ = Stage::kDataIn;
}

usb::BulkOutResult MscDevice::on_bulk_out(std::uint8_t, ByteSpan data) {
  switch (stage_) {
    case Stage::kCommand:
      accept_cbw(data);
      return {usb::TransferStatus::kOk, data.size()};
    case Stage::kDataOut: {
      if (pending_.fail_before_data) {
        finish(csw_.status, 0);
      } else if (data.size() < pending_.device_bytes) {
        finish(CswStatus::kPhaseError, 0);
      } else {
        ByteSpan cdb(pending_.cbw.command_block.data(), pending_.cbw.cb_length);
        ScsiResponse r = execute_locked(cdb, data.first(pending_.device_bytes), 0);
        finish(r.status, r.status == CswStatus::kPassed ? pending_.device_bytes : 0);
      }
      return {usb::TransferStatus::kOk, data.size()};
    }
    case Stage::kDataIn:
    case Stage::kStatus:
      // A new CBW while the previous command is still open.
      enter_reset_required();
      return {usb::TransferStatus::kOk, data.size()};
  }
  return {usb::TransferStatus::kStall, 0};
}

usb::BulkInResult MscDevice::on_bulk_in(std::uint8_t, std::size_t max_len) {
  switch (stage_) {
    case Stage::kDataIn: {
      Bytes out = std::move(data_in_);
      data_in_.clear();
      if (out.size() > max_len) out.resize(max_len);
      finish(csw_.status, static_cast<std::uint32_t>(out.size()));
      return {usb::TransferStatus::kOk, std::move(out)};
    }
    case Stage::kStatus: {
      if (consume_fault(Fault::kCswHalt)) {
        set_halt(kBulkInEndpoint);
        return {usb::TransferStatus::kStall, {}};
      }
      auto bytes = csw_.serialize();
      stage_ = Stage::kCommand;
      return {usb::TransferStatus::kOk, Bytes(bytes.begin(), bytes.end())};
    }
    default:
      return {usb::TransferStatus::kOk, {}};
  }
}

usb::ControlResult MscDevice::class_request(const usb::SetupPacket& setup, ByteSpan) {
  const std::uint8_t recipient = setup.request_type & usb::request_type::kRecipientMask;
  if (recipient != usb::request_type::kInterface || setup.index != 0) return usb::stall_control();
  if (setup.request == kRequestBulkOnlyReset && !setup.device_to_host() && setup.value == 0 &&
      setup.length == 0) {
    reset_required_ = false;
    stage_ = Stage::kCommand;
    data_in_.clear();
    trace_.push_back("- reset");
    return {};
  }
  if (setup.request == kRequestGetMaxLun && setup.device_to_host() && setup.value == 0 &&
      setup.length == 1) {
    return {usb::TransferStatus::kOk, Bytes{0}};
  }
  return usb::stall_control();
}

}  // namespace usbb::msc
