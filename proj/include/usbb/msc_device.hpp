#pragma once

#include <deque>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "usbb/blockdev.hpp"
#include "usbb/msc_protocol.hpp"
#include "usbb/usb_bus.hpp"

namespace usbb::msc {

struct MscDeviceOptions {
  usb::Speed speed = usb::Speed::kFull;
  std::uint16_t vendor_id = 0x1209;
  std::uint16_t product_id = 0x0001;
  std::uint8_t interface_subclass = kSubclassScsiTransparent;
  std::string vendor = "USBBRDG";
  std::string product = "Virtual Flash";
  std::string revision = "1.00";
  std::u16string serial = u"000000000001";
  // Report UNIT ATTENTION (not-ready-to-ready change) on the first media
  // command after attach, like a freshly plugged stick.
  bool unit_attention_on_attach = true;
};

// One-shot transport faults, consumed in injection order.
enum class Fault {
  kInvalidCbw,  // the next CBW arrives corrupted
  kCswHalt,     // the bulk-in endpoint halts instead of returning the next CSW
  kPhaseError,  // the next command completes with CSW status 2
};

struct ScsiResponse {
  CswStatus status = CswStatus::kPassed;
  Bytes data;
};

/// Emulated USB flash drive: one mass-storage interface (SCSI transparent
/// command set over Bulk-Only Transport) backed by a BlockImage.
///
/// Commands: INQUIRY, TEST UNIT READY, READ CAPACITY(10), READ(10),
/// WRITE(10), REQUEST SENSE, MODE SENSE(6), SYNCHRONIZE CACHE(10).
/// Anything else fails with ILLEGAL REQUEST / invalid opcode.
class MscDevice final : public usb::UsbFunction {
 public:
  static constexpr std::uint8_t kBulkInEndpoint = 0x81;
  static constexpr std::uint8_t kBulkOutEndpoint = 0x02;

  explicit MscDevice(std::shared_ptr<blockdev::BlockImage> image, MscDeviceOptions options = {});

  static usb::DescriptorSet make_descriptors(const MscDeviceOptions& options);

  usb::Speed speed() const override { return options_.speed; }
  void on_attach() override;
  void on_detach() override;

  // SCSI layer without transport framing. data_out carries WRITE(10) data.
  ScsiResponse execute(ByteSpan cdb, ByteSpan data_out = {});

  void inject(Fault fault);
  void set_not_ready(bool not_ready);
  // Ejects the medium: every command then fails with NOT READY.
  void detach_medium();
  bool medium_present() const;

  SenseState sense() const;
  std::size_t commands_seen(std::uint8_t opcode) const;
  bool awaiting_reset() const;
  // `tag opcode lba count status residue`
  std::vector<std::string> trace() const;

  const std::shared_ptr<blockdev::BlockImage>& image() const { return image_; }

 protected:
  usb::ControlResult class_request(const usb::SetupPacket& setup, ByteSpan payload) override;
  usb::BulkOutResult on_bulk_out(std::uint8_t endpoint, ByteSpan data) override;
  usb::BulkInResult on_bulk_in(std::uint8_t endpoint, std::size_t max_len) override;
  bool can_clear_halt(std::uint8_t endpoint) const override;

 private:
  enum class Stage { kCommand, kDataIn, kDataOut, kStatus };

  // A command decoded from a CBW, before or after its data phase.
  struct Pending {
    CommandBlockWrapper cbw;
    std::uint32_t lba = 0;
    std::uint32_t count = 0;
    std::uint32_t device_bytes = 0;  // bytes the device intends to move
    bool fail_before_data = false;
    bool phase_error = false;
  };

  ScsiResponse execute_locked(ByteSpan cdb, ByteSpan data_out, std::uint32_t host_in_length);
  ScsiResponse check_condition(SenseKey key, std::uint8_t code, std::uint8_t qualifier = 0);
  bool consume_fault(Fault fault);
  void accept_cbw(ByteSpan data);
  void finish(CswStatus status, std::uint32_t transferred);
  void enter_reset_required();

  ScsiResponse inquiry(ByteSpan cdb);
  ScsiResponse request_sense(ByteSpan cdb);
  ScsiResponse mode_sense6(ByteSpan cdb);
  ScsiResponse read_capacity10();
  ScsiResponse read10(ByteSpan cdb);
  ScsiResponse write10(ByteSpan cdb, ByteSpan data);

  std::shared_ptr<blockdev::BlockImage> image_;
  MscDeviceOptions options_;

  bool medium_present_ = true;
  bool not_ready_ = false;
  bool unit_attention_ = false;
  SenseState sense_;
  std::deque<Fault> faults_;
  std::map<std::uint8_t, std::size_t> opcode_counts_;

  Stage stage_ = Stage::kCommand;
  bool reset_required_ = false;
  Pending pending_;
  Bytes data_in_;
  CommandStatusWrapper csw_;
  std::vector<std::string> trace_;
};

}  // namespace usbb::msc
