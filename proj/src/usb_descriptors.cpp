#include "usbb/usb_descriptors.hpp"

#include <cctype>

#include "usbb/error.hpp"

namespace usbb::usb {

std::string_view to_string(Port port) { return port == Port::kA ? "A" : "B"; }

std::optional<Port> parse_port(std::string_view text) {
  if (text.size() != 1) return std::nullopt;
  switch (std::toupper(static_cast<unsigned char>(text[0]))) {
    case 'A': return Port::kA;
    case 'B': return Port::kB;
    default: return std::nullopt;
  }
}

std::string_view to_string(Speed speed) { return speed == Speed::kFull ? "full" : "high"; }

std::uint16_t ConfigurationDescriptor::total_length() const {
  std::size_t total = kConfigurationDescriptorLength;
  for (const auto& itf : interfaces) {
    total += kInterfaceDescriptorLength + itf.endpoints.size() * kEndpointDescriptorLength;
  }
  return static_cast<std::uint16_t>(total);
}

Bytes serialize(const DeviceDescriptor& d) {
  Bytes out(kDeviceDescriptorLength);
  out[0] = kDeviceDescriptorLength;
  out[1] = descriptor_type::kDevice;
  store_le16(out, 2, d.bcd_usb);
  out[4] = d.device_class;
  out[5] = d.device_subclass;
  out[6] = d.device_protocol;
  out[7] = d.max_packet_size0;
  store_le16(out, 8, d.vendor_id);
  store_le16(out, 10, d.product_id);
  store_le16(out, 12, d.bcd_device);
  out[14] = d.manufacturer_index;
  out[15] = d.product_index;
  out[16] = d.serial_index;
  out[17] = d.num_configurations;
  return out;
}

Bytes serialize(const ConfigurationDescriptor& c) {
  Bytes out;
  out.reserve(c.total_length());
  out.resize(kConfigurationDescriptorLength);
  out[0] = kConfigurationDescriptorLength;
  out[1] = descriptor_type::kConfiguration;
  store_le16(out, 2, c.total_length());
  out[4] = static_cast<std::uint8_t>(c.interfaces.size());
  out[5] = c.value;
  out[6] = c.string_index;
  out[7] = c.attributes;
  out[8] = c.max_power;
  for (const auto& itf : c.interfaces) {
    out.push_back(kInterfaceDescriptorLength);
    out.push_back(descriptor_type::kInterface);
    out.push_back(itf.number);
    out.push_back(itf.alternate_setting);
    out.push_back(static_cast<std::uint8_t>(itf.endpoints.size()));
    out.push_back(itf.interface_class);
    out.push_back(itf.interface_subclass);
    out.push_back(itf.interface_protocol);
    out.push_back(itf.string_index);
    for (const auto& ep : itf.endpoints) {
      out.push_back(kEndpointDescriptorLength);
      out.push_back(descriptor_type::kEndpoint);
      out.push_back(ep.address);
      out.push_back(static_cast<std::uint8_t>(ep.type));
      out.push_back(static_cast<std::uint8_t>(ep.max_packet_size));
      out.push_back(static_cast<std::uint8_t>(ep.max_packet_size >> 8));
      out.push_back(ep.interval);
    }
  }
  return out;
}

DeviceDescriptor parse_device_descriptor(ByteSpan b) {
  if (b.size() != kDeviceDescriptorLength || b[0] != kDeviceDescriptorLength ||
      b[1] != descriptor_type::kDevice) {
    throw Error(ErrorCode::kMalformedDescriptor,
                "device descriptor: " + std::to_string(b.size()) + " bytes, bLength " +
                    (b.empty() ? std::string("?") : std::to_string(b[0])));
  }
  DeviceDescriptor d;
  d.bcd_usb = load_le16(b, 2);
  d.device_class = b[4];
  d.device_subclass = b[5];
  d.device_protocol = b[6];
  d.max_packet_size0 = b[7];
  d.vendor_id = load_le16(b, 8);
  d.product_id = load_le16(b, 10);
  d.bcd_device = load_le16(b, 12);
  d.manufacturer_index = b[14];
  d.product_index = b[15];
  d.serial_index = b[16];
  d.num_configurations = b[17];
  return d;
}

ConfigurationDescriptor parse_configuration(ByteSpan b) {
  auto bad = [](const std::string& why) {
    return Error(ErrorCode::kMalformedDescriptor, "configuration: " + why);
  };
  if (b.size() < kConfigurationDescriptorLength || b[0] != kConfigurationDescriptorLength ||
      b[1] != descriptor_type::kConfiguration) {
    throw bad("bad header");
  }
  std::uint16_t total = load_le16(b, 2);
  if (total != b.size()) {
    throw bad("wTotalLength " + std::to_string(total) + " but " + std::to_string(b.size()) +
              " bytes");
  }
  ConfigurationDescriptor c;
  std::uint8_t num_interfaces = b[4];
  c.value = b[5];
  c.string_index = b[6];
  c.attributes = b[7];
  c.max_power = b[8];

  std::size_t off = kConfigurationDescriptorLength;
  InterfaceDescriptor* current = nullptr;
  std::size_t expected_endpoints = 0;
  while (off < b.size()) {
    if (b.size() - off < 2) throw bad("truncated descriptor");
    std::uint8_t len = b[off];
    std::uint8_t type = b[off + 1];
    if (len < 2 || off + len > b.size()) throw bad("descriptor length overruns bundle");
    ByteSpan d = b.subspan(off, len);
    if (type == descriptor_type::kInterface) {
      if (len != kInterfaceDescriptorLength) throw bad("interface bLength " + std::to_string(len));
      if (current && current->endpoints.size() != expected_endpoints) {
        throw bad("interface endpoint count mismatch");
      }
      InterfaceDescriptor itf;
      itf.number = d[2];
      itf.alternate_setting = d[3];
      expected_endpoints = d[4];
      itf.interface_class = d[5];
      itf.interface_subclass = d[6];
      itf.interface_protocol = d[7];
      itf.string_index = d[8];
      c.interfaces.push_back(std::move(itf));
      current = &c.interfaces.back();
    } else if (type == descriptor_type::kEndpoint) {
      if (len != kEndpointDescriptorLength) throw bad("endpoint bLength " + std::to_string(len));
      if (!current) throw bad("endpoint outside interface");
      EndpointDescriptor ep;
      ep.address = d[2];
      ep.type = static_cast<TransferType>(d[3] & 0x03);
      ep.max_packet_size = load_le16(d, 4);
      ep.interval = d[6];
      current->endpoints.push_back(ep);
    } else {
      throw bad("unexpected descriptor type " + std::to_string(type));
    }
    off += len;
  }
  if (current && current->endpoints.size() != expected_endpoints) {
    throw bad("interface endpoint count mismatch");
  }
  if (c.interfaces.size() != num_interfaces) throw bad("bNumInterfaces mismatch");
  return c;
}

Bytes string_descriptor(std::u16string_view text) {
  Bytes out(2 + text.size() * 2);
  out[0] = static_cast<std::uint8_t>(out.size());
  out[1] = descriptor_type::kString;
  for (std::size_t i = 0; i < text.size(); ++i) store_le16(out, 2 + 2 * i, text[i]);
  return out;
}

Bytes language_id_descriptor() { return {4, descriptor_type::kString, 0x09, 0x04}; }

std::array<std::uint8_t, kSetupPacketLength> SetupPacket::serialize() const {
  std::array<std::uint8_t, kSetupPacketLength> out{};
  out[0] = request_type;
  out[1] = request;
  store_le16(out, 2, value);
  store_le16(out, 4, index);
  store_le16(out, 6, length);
  return out;
}

SetupPacket SetupPacket::parse(ByteSpan b) {
  if (b.size() != kSetupPacketLength) {
    throw Error(ErrorCode::kMalformedDescriptor, "setup packet must be 8 bytes");
  }
  return SetupPacket{b[0], b[1], load_le16(b, 2), load_le16(b, 4), load_le16(b, 6)};
}

SetupPacket get_descriptor(std::uint8_t type, std::uint8_t index, std::uint16_t length,
                           std::uint16_t language) {
  return SetupPacket{request_type::kDirIn | request_type::kStandard | request_type::kDevice,
                     request::kGetDescriptor, static_cast<std::uint16_t>((type << 8) | index),
                     language, length};
}

SetupPacket set_address(std::uint8_t address) {
  return SetupPacket{request_type::kStandard | request_type::kDevice, request::kSetAddress, address,
                     0, 0};
}

SetupPacket set_configuration(std::uint8_t value) {
  return SetupPacket{request_type::kStandard | request_type::kDevice, request::kSetConfiguration,
                     value, 0, 0};
}

SetupPacket clear_endpoint_halt(std::uint8_t endpoint) {
  return SetupPacket{request_type::kStandard | request_type::kEndpoint, request::kClearFeature,
                     request::kFeatureEndpointHalt, endpoint, 0};
}

}  // namespace usbb::usb
