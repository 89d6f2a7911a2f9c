#include "usbb/msc_protocol.hpp"

#include <cstdio>

#include "usbb/error.hpp"

namespace usbb::msc {

std::string to_string(SenseKey key) {
  switch (key) {
    case SenseKey::kNoSense: return "no-sense";
    case SenseKey::kNotReady: return "not-ready";
    case SenseKey::kMediumError: return "medium-error";
    case SenseKey::kIllegalRequest: return "illegal-request";
    case SenseKey::kUnitAttention: return "unit-attention";
    case SenseKey::kDataProtect: return "data-protect";
  }
  return "sense-" + std::to_string(static_cast<int>(key));
}

std::string describe(const SenseState& sense) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s (key 0x%02x asc 0x%02x ascq 0x%02x)",
                to_string(sense.key).c_str(), static_cast<unsigned>(sense.key), sense.asc,
                sense.ascq);
  return buf;
}

bool CommandBlockWrapper::valid() const {
  return signature == kCbwSignature && (flags & 0x7F) == 0 && (lun & 0xF0) == 0 &&
         cb_length >= 1 && cb_length <= 16;
}

std::array<std::uint8_t, kCbwLength> CommandBlockWrapper::serialize() const {
  std::array<std::uint8_t, kCbwLength> out{};
  store_le32(out, 0, signature);
  store_le32(out, 4, tag);
  store_le32(out, 8, data_transfer_length);
  out[12] = flags;
  out[13] = lun;
  out[14] = cb_length;
  for (std::size_t i = 0; i < command_block.size(); ++i) out[15 + i] = command_block[i];
  return out;
}

CommandBlockWrapper CommandBlockWrapper::parse(ByteSpan b) {
  if (b.size() != kCbwLength) {
    throw Error(ErrorCode::kInvalidCbw, "CBW of " + std::to_string(b.size()) + " bytes");
  }
  CommandBlockWrapper cbw;
  cbw.signature = load_le32(b, 0);
  cbw.tag = load_le32(b, 4);
  cbw.data_transfer_length = load_le32(b, 8);
  cbw.flags = b[12];
  cbw.lun = b[13];
  cbw.cb_length = b[14];
  for (std::size_t i = 0; i < cbw.command_block.size(); ++i) cbw.command_block[i] = b[15 + i];
  return cbw;
}

bool CommandStatusWrapper::valid() const {
  return signature == kCswSignature && static_cast<std::uint8_t>(status) <= 2;
}

std::array<std::uint8_t, kCswLength> CommandStatusWrapper::serialize() const {
  std::array<std::uint8_t, kCswLength> out{};
  store_le32(out, 0, signature);
  store_le32(out, 4, tag);
  store_le32(out, 8, data_residue);
  out[12] = static_cast<std::uint8_t>(status);
  return out;
}

CommandStatusWrapper CommandStatusWrapper::parse(ByteSpan b) {
  if (b.size() != kCswLength) {
    throw Error(ErrorCode::kProtocolError, "CSW of " + std::to_string(b.size()) + " bytes");
  }
  CommandStatusWrapper csw;
  csw.signature = load_le32(b, 0);
  csw.tag = load_le32(b, 4);
  csw.data_residue = load_le32(b, 8);
  csw.status = static_cast<CswStatus>(b[12]);
  return csw;
}

Cdb cdb_test_unit_ready() { return Cdb{{opcode::kTestUnitReady}, 6}; }

Cdb cdb_request_sense(std::uint8_t allocation_length) {
  Cdb c{{opcode::kRequestSense}, 6};
  c.bytes[4] = allocation_length;
  return c;
}

Cdb cdb_inquiry(std::uint16_t allocation_length) {
  Cdb c{{opcode::kInquiry}, 6};
  store_be16(c.bytes, 3, allocation_length);
  return c;
}

Cdb cdb_mode_sense6(std::uint8_t page_code, std::uint8_t allocation_length) {
  Cdb c{{opcode::kModeSense6}, 6};
  c.bytes[2] = page_code & 0x3F;
  c.bytes[4] = allocation_length;
  return c;
}

Cdb cdb_read_capacity10() { return Cdb{{opcode::kReadCapacity10}, 10}; }

Cdb cdb_read10(std::uint32_t lba, std::uint16_t count) {
  Cdb c{{opcode::kRead10}, 10};
  store_be32(c.bytes, 2, lba);
  store_be16(c.bytes, 7, count);
  return c;
}

Cdb cdb_write10(std::uint32_t lba, std::uint16_t count) {
  Cdb c{{opcode::kWrite10}, 10};
  store_be32(c.bytes, 2, lba);
  store_be16(c.bytes, 7, count);
  return c;
}

Cdb cdb_synchronize_cache10() { return Cdb{{opcode::kSynchronizeCache10}, 10}; }

CommandBlockWrapper make_cbw(std::uint32_t tag, const Cdb& cdb, std::uint32_t data_transfer_length,
                             bool data_in) {
  CommandBlockWrapper cbw;
  cbw.tag = tag;
  cbw.data_transfer_length = data_transfer_length;
  cbw.flags = data_in ? kCbwFlagDataIn : 0;
  cbw.cb_length = cdb.length;
  cbw.command_block = cdb.bytes;
  return cbw;
}

}  // namespace usbb::msc
