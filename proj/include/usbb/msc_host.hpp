#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "usbb/blockdev.hpp"
#include "usbb/error.hpp"
#include "usbb/msc_protocol.hpp"
#include "usbb/usb_bus.hpp"

namespace usbb::msc {

struct HostOptions {
  int test_unit_ready_attempts = 3;
  int retries_after_recovery = 1;
  std::uint32_t max_blocks_per_command = 128;  // 64 KiB
};

struct Capacity {
  std::uint32_t last_lba = 0;
  std::uint32_t block_length = 0;

  std::uint64_t blocks() const { return static_cast<std::uint64_t>(last_lba) + 1; }
};

enum class HandleState { kProbing, kReady, kError, kGone };
std::string_view to_string(HandleState state);

/// Host-side Bulk-Only mass storage driver for one port: enumerates and
/// claims the device, frames SCSI commands as CBW / data / CSW, recovers
/// from stalls and phase errors, and presents the medium as a BlockDevice.
///
/// One command is outstanding at a time; concurrent callers are serialized.
class MscHandle final : public blockdev::BlockDevice {
 public:
  // Enumerates the device on `port` (if not yet enumerated), checks for a
  // mass-storage SCSI/bulk-only interface, then runs INQUIRY, TEST UNIT
  // READY (bounded retries), READ CAPACITY(10) and MODE SENSE(6).
  static std::shared_ptr<MscHandle> probe(usb::Bus& bus, usb::Port port, HostOptions options = {});

  std::uint64_t sector_count() const override;
  bool read_only() const override;
  void read(std::uint64_t lba, std::uint32_t count, MutableByteSpan out) override;
  void write(std::uint64_t lba, std::uint32_t count, ByteSpan data) override;
  // SYNCHRONIZE CACHE(10).
  void flush() override;

  Bytes read_blocks(std::uint64_t lba, std::uint32_t count);
  void write_blocks(std::uint64_t lba, std::uint32_t count, ByteSpan data);
  void reset_recovery();
  std::uint8_t get_max_lun();
  bool test_unit_ready();

  usb::Port port() const { return port_; }
  const usb::EnumeratedDevice& device() const { return device_; }
  Capacity capacity() const;
  HandleState state() const;
  std::uint32_t next_tag() const;
  const std::string& vendor() const { return vendor_; }
  const std::string& product() const { return product_; }
  std::size_t recoveries() const;
  // `port tag opcode lba count status residue retries`
  std::vector<std::string> trace() const;

  // Test hook: corrupt the signature of the next CBW sent on the wire.
  void corrupt_next_cbw();

 private:
  MscHandle(usb::Bus& bus, usb::Port port, usb::EnumeratedDevice device, HostOptions options,
            std::uint8_t interface_number, std::uint8_t bulk_in, std::uint8_t bulk_out);

  struct Outcome {
    CommandStatusWrapper csw;
    Bytes data;
    int retries = 0;
  };

  // One CBW/data/CSW exchange with stall handling; throws on transport
  // failure (invalid CSW, unrecoverable stall) after arranging recovery.
  Outcome transact(const Cdb& cdb, std::uint32_t length, bool data_in, ByteSpan out);
  // transact + phase-error recovery/retry + automatic REQUEST SENSE on
  // failure. Throws Error(kIoFailed) with the sense description.
  Outcome command(const Cdb& cdb, std::uint32_t length, bool data_in, ByteSpan out = {},
                  SenseState* sense_out = nullptr);
  SenseState request_sense_locked();
  void reset_recovery_locked();
  void ensure_usable() const;
  [[noreturn]] void gone(const Error& cause);
  void log(const CommandBlockWrapper& cbw, const CommandStatusWrapper& csw, int retries);

  usb::Bus& bus_;
  usb::Port port_;
  usb::EnumeratedDevice device_;
  HostOptions options_;
  std::uint8_t interface_number_;
  std::uint8_t bulk_in_;
  std::uint8_t bulk_out_;

  mutable std::mutex mutex_;
  HandleState state_ = HandleState::kProbing;
  Capacity capacity_;
  bool write_protected_ = false;
  std::uint32_t next_tag_ = 1;
  std::size_t recoveries_ = 0;
  bool corrupt_next_ = false;
  std::string vendor_;
  std::string product_;
  std::vector<std::string> trace_;
};

}  // namespace usbb::msc
