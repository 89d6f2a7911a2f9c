#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "usbb/bytes.hpp"

// Bulk-Only Transport framing and the SCSI transparent command subset shared
// by the emulated drive and the host driver.
namespace usbb::msc {

inline constexpr std::uint32_t kCbwSignature = 0x43425355;  // "USBC"
inline constexpr std::uint32_t kCswSignature = 0x53425355;  // "USBS"
inline constexpr std::size_t kCbwLength = 31;
inline constexpr std::size_t kCswLength = 13;
inline constexpr std::uint8_t kCbwFlagDataIn = 0x80;

inline constexpr std::uint8_t kInterfaceClassMassStorage = 0x08;
inline constexpr std::uint8_t kSubclassScsiTransparent = 0x06;
inline constexpr std::uint8_t kSubclassAtapi = 0x05;
inline constexpr std::uint8_t kProtocolBulkOnly = 0x50;

// Class-specific control requests.
inline constexpr std::uint8_t kRequestBulkOnlyReset = 0xFF;
inline constexpr std::uint8_t kRequestGetMaxLun = 0xFE;

namespace opcode {
inline constexpr std::uint8_t kTestUnitReady = 0x00;
inline constexpr std::uint8_t kRequestSense = 0x03;
inline constexpr std::uint8_t kInquiry = 0x12;
inline constexpr std::uint8_t kModeSense6 = 0x1A;
inline constexpr std::uint8_t kReadCapacity10 = 0x25;
inline constexpr std::uint8_t kRead10 = 0x28;
inline constexpr std::uint8_t kWrite10 = 0x2A;
inline constexpr std::uint8_t kSynchronizeCache10 = 0x35;
}  // namespace opcode

inline constexpr std::array<std::uint8_t, 8> kImplementedOpcodes{
    opcode::kTestUnitReady,  opcode::kRequestSense, opcode::kInquiry, opcode::kModeSense6,
    opcode::kReadCapacity10, opcode::kRead10,       opcode::kWrite10, opcode::kSynchronizeCache10};

enum class CswStatus : std::uint8_t { kPassed = 0, kFailed = 1, kPhaseError = 2 };

enum class SenseKey : std::uint8_t {
  kNoSense = 0x00,
  kNotReady = 0x02,
  kMediumError = 0x03,
  kIllegalRequest = 0x05,
  kUnitAttention = 0x06,
  kDataProtect = 0x07,
};

// Additional sense codes used by the drive.
namespace asc {
inline constexpr std::uint8_t kNone = 0x00;
inline constexpr std::uint8_t kBecomingReady = 0x04;
inline constexpr std::uint8_t kWriteError = 0x0C;
inline constexpr std::uint8_t kUnrecoveredReadError = 0x11;
inline constexpr std::uint8_t kInvalidOpcode = 0x20;
inline constexpr std::uint8_t kLbaOutOfRange = 0x21;
inline constexpr std::uint8_t kInvalidFieldInCdb = 0x24;
inline constexpr std::uint8_t kLunNotSupported = 0x25;
inline constexpr std::uint8_t kWriteProtected = 0x27;
inline constexpr std::uint8_t kNotReadyToReadyChange = 0x28;
inline constexpr std::uint8_t kMediumNotPresent = 0x3A;
}  // namespace asc

struct SenseState {
  SenseKey key = SenseKey::kNoSense;
  std::uint8_t asc = 0;
  std::uint8_t ascq = 0;

  bool operator==(const SenseState&) const = default;
};

std::string to_string(SenseKey key);
std::string describe(const SenseState& sense);

struct CommandBlockWrapper {
  std::uint32_t signature = kCbwSignature;
  std::uint32_t tag = 0;
  std::uint32_t data_transfer_length = 0;
  std::uint8_t flags = 0;
  std::uint8_t lun = 0;
  std::uint8_t cb_length = 0;
  std::array<std::uint8_t, 16> command_block{};

  bool data_in() const { return (flags & kCbwFlagDataIn) != 0; }
  std::uint8_t opcode() const { return command_block[0]; }
  // Signature, reserved bits and cb_length range; the 31-byte length is
  // checked by parse().
  bool valid() const;

  std::array<std::uint8_t, kCbwLength> serialize() const;
  // Throws Error(kInvalidCbw) unless exactly 31 bytes are given.
  static CommandBlockWrapper parse(ByteSpan bytes);

  bool operator==(const CommandBlockWrapper&) const = default;
};

struct CommandStatusWrapper {
  std::uint32_t signature = kCswSignature;
  std::uint32_t tag = 0;
  std::uint32_t data_residue = 0;
  CswStatus status = CswStatus::kPassed;

  bool valid() const;
  std::array<std::uint8_t, kCswLength> serialize() const;
  // Throws Error(kProtocolError) unless exactly 13 bytes are given.
  static CommandStatusWrapper parse(ByteSpan bytes);

  bool operator==(const CommandStatusWrapper&) const = default;
};

// CDB builders. All multi-byte CDB fields are big-endian.
struct Cdb {
  std::array<std::uint8_t, 16> bytes{};
  std::uint8_t length = 6;
};

Cdb cdb_test_unit_ready();
Cdb cdb_request_sense(std::uint8_t allocation_length = 18);
Cdb cdb_inquiry(std::uint16_t allocation_length = 36);
Cdb cdb_mode_sense6(std::uint8_t page_code = 0x3F, std::uint8_t allocation_length = 192);
Cdb cdb_read_capacity10();
Cdb cdb_read10(std::uint32_t lba, std::uint16_t count);
Cdb cdb_write10(std::uint32_t lba, std::uint16_t count);
Cdb cdb_synchronize_cache10();

CommandBlockWrapper make_cbw(std::uint32_t tag, const Cdb& cdb, std::uint32_t data_transfer_length,
                             bool data_in);

inline constexpr std::size_t kInquiryLength = 36;
inline constexpr std::size_t kSenseLength = 18;
inline constexpr std::size_t kReadCapacityLength = 8;

}  // namespace usbb::msc
