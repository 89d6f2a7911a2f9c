#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "usbb/bytes.hpp"
#include "usbb/usb_descriptors.hpp"

namespace usbb::usb {

enum class TransferStatus { kOk, kStall };

struct ControlResult {
  TransferStatus status = TransferStatus::kOk;
  Bytes data;
};

struct BulkOutResult {
  TransferStatus status = TransferStatus::kOk;
  std::size_t accepted = 0;
};

struct BulkInResult {
  TransferStatus status = TransferStatus::kOk;
  Bytes data;
};

inline ControlResult stall_control() { return {TransferStatus::kStall, {}}; }

// Device side of the bus. Implementations must tolerate on_detach() being
// called from another thread while a transfer handler runs.
class DeviceModel {
 public:
  virtual ~DeviceModel() = default;

  virtual ControlResult control(const SetupPacket& setup, ByteSpan payload) = 0;
  virtual BulkOutResult bulk_out(std::uint8_t endpoint, ByteSpan data) = 0;
  virtual BulkInResult bulk_in(std::uint8_t endpoint, std::size_t max_len) = 0;

  virtual Speed speed() const { return Speed::kFull; }
  virtual void on_attach() {}
  virtual void on_detach() {}
};

/// Base for device models: answers the chapter-9 standard requests from a
/// DescriptorSet (descriptors, address, configuration, endpoint halt) and
/// forwards class requests and bulk data to the derived model.
///
/// All hooks run with the function's mutex held.
class UsbFunction : public DeviceModel {
 public:
  explicit UsbFunction(DescriptorSet descriptors, std::vector<std::u16string> strings = {});

  ControlResult control(const SetupPacket& setup, ByteSpan payload) final;
  BulkOutResult bulk_out(std::uint8_t endpoint, ByteSpan data) final;
  BulkInResult bulk_in(std::uint8_t endpoint, std::size_t max_len) final;

  const DescriptorSet& descriptors() const { return descriptors_; }
  std::uint8_t address() const;
  std::uint8_t configuration() const;
  bool is_halted(std::uint8_t endpoint) const;

 protected:
  virtual ControlResult class_request(const SetupPacket& setup, ByteSpan payload);
  virtual BulkOutResult on_bulk_out(std::uint8_t endpoint, ByteSpan data) = 0;
  virtual BulkInResult on_bulk_in(std::uint8_t endpoint, std::size_t max_len) = 0;
  // Returning false keeps the endpoint stalled after CLEAR_FEATURE(HALT).
  virtual bool can_clear_halt(std::uint8_t endpoint) const;
  virtual Bytes descriptor_bytes(std::uint8_t type, std::uint8_t index) const;

  void set_halt(std::uint8_t endpoint) { halted_.insert(endpoint); }
  void clear_halt(std::uint8_t endpoint) { halted_.erase(endpoint); }
  void reset_device_state();
  std::mutex& mutex() const { return mutex_; }

 private:
  ControlResult standard_request(const SetupPacket& setup);
  bool has_endpoint(std::uint8_t endpoint) const;

  DescriptorSet descriptors_;
  std::vector<std::u16string> strings_;
  mutable std::mutex mutex_;
  std::uint8_t address_ = 0;
  std::uint8_t configuration_ = 0;
  std::set<std::uint8_t> halted_;
};

struct EnumeratedDevice {
  Port port = Port::kA;
  std::uint8_t address = 0;
  DescriptorSet descriptors;
  Speed speed = Speed::kFull;
};

enum class BusEventKind { kAttach, kDetach, kEnumerated };

struct BusEvent {
  BusEventKind kind = BusEventKind::kAttach;
  Port port = Port::kA;
  std::uint8_t address = 0;
};

enum class TransferKind { kControl, kBulkOut, kBulkIn };

// One entry per transfer, written when it begins and completed when it
// resolves; an entry left incomplete is an orphaned transfer.
struct TransferRecord {
  std::uint64_t id = 0;
  Port port = Port::kA;
  std::uint8_t address = 0;
  TransferKind kind = TransferKind::kControl;
  std::uint8_t endpoint = 0;
  bool completed = false;
  std::string outcome;  // "ok" or an error name
};

struct BusOptions {
  // When set, transfers sleep for their nominal wire time at the device's
  // speed (12 Mbit/s full, 480 Mbit/s high). Off by default.
  bool pace_transfers = false;
  std::size_t transfer_log_capacity = 4096;
};

/// Two root ports, no hubs. Transfers are serialized per port; ports A and B
/// proceed independently. Addresses come from a counter starting at 1 that
/// is never reused for the lifetime of the bus.
class Bus {
 public:
  using Listener = std::function<void(const BusEvent&)>;

  explicit Bus(BusOptions options = {});
  Bus(const Bus&) = delete;
  Bus& operator=(const Bus&) = delete;

  void attach(Port port, std::shared_ptr<DeviceModel> model);
  void detach(Port port);
  EnumeratedDevice enumerate(Port port);

  Bytes control_transfer(std::uint8_t address, const SetupPacket& setup, ByteSpan payload = {});
  std::size_t bulk_out(std::uint8_t address, std::uint8_t endpoint, ByteSpan data);
  Bytes bulk_in(std::uint8_t address, std::uint8_t endpoint, std::size_t max_len);

  bool occupied(Port port) const;
  std::optional<EnumeratedDevice> device(Port port) const;

  // `ts port=A event=attach|detach|enumerated addr=N`
  std::vector<std::string> event_log() const;
  std::vector<TransferRecord> transfer_log() const;
  std::size_t open_transfers() const;

  int add_listener(Listener listener);
  void remove_listener(int id);

 private:
  struct Slot {
    std::shared_ptr<DeviceModel> model;
    std::optional<EnumeratedDevice> enumerated;
    std::uint64_t generation = 0;
  };

  struct Target {
    Port port;
    std::shared_ptr<DeviceModel> model;
    std::uint64_t generation;
    EnumeratedDevice device;
  };

  Target resolve(std::uint8_t address) const;
  ControlResult raw_control(Port port, const std::shared_ptr<DeviceModel>& model,
                            std::uint64_t generation, const SetupPacket& setup, ByteSpan payload);
  std::uint64_t begin_transfer(Port port, std::uint8_t address, TransferKind kind,
                               std::uint8_t endpoint);
  void end_transfer(std::uint64_t id, std::string outcome);
  void check_generation(Port port, std::uint64_t generation) const;
  void log_event(Port port, std::string_view event, std::uint8_t address);
  void notify(const BusEvent& event);
  void pace(Speed speed, std::size_t bytes) const;

  BusOptions options_;
  std::chrono::steady_clock::time_point epoch_;

  mutable std::mutex state_mutex_;
  std::array<Slot, 2> slots_;
  std::uint8_t next_address_ = 1;
  std::vector<std::string> events_;
  std::deque<TransferRecord> transfers_;
  std::uint64_t next_transfer_id_ = 1;
  std::size_t open_transfers_ = 0;

  std::array<std::mutex, 2> port_mutex_;

  mutable std::mutex listener_mutex_;
  std::map<int, Listener> listeners_;
  int next_listener_id_ = 1;
};

}  // namespace usbb::usb
