#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "usbb/bytes.hpp"

namespace usbb::usb {

enum class Port { kA, kB };
inline constexpr std::array<Port, 2> kPorts{Port::kA, Port::kB};

std::string_view to_string(Port port);
std::optional<Port> parse_port(std::string_view text);
inline std::size_t index_of(Port port) { return port == Port::kA ? 0 : 1; }

enum class Speed { kFull, kHigh };
std::string_view to_string(Speed speed);

// Standard request codes and descriptor types (USB 2.0 chapter 9).
namespace request {
inline constexpr std::uint8_t kGetStatus = 0x00;
inline constexpr std::uint8_t kClearFeature = 0x01;
inline constexpr std::uint8_t kSetFeature = 0x03;
inline constexpr std::uint8_t kSetAddress = 0x05;
inline constexpr std::uint8_t kGetDescriptor = 0x06;
inline constexpr std::uint8_t kGetConfiguration = 0x08;
inline constexpr std::uint8_t kSetConfiguration = 0x09;
inline constexpr std::uint16_t kFeatureEndpointHalt = 0x00;
}  // namespace request

namespace request_type {
inline constexpr std::uint8_t kDirIn = 0x80;
inline constexpr std::uint8_t kTypeMask = 0x60;
inline constexpr std::uint8_t kStandard = 0x00;
inline constexpr std::uint8_t kClass = 0x20;
inline constexpr std::uint8_t kRecipientMask = 0x1F;
inline constexpr std::uint8_t kDevice = 0x00;
inline constexpr std::uint8_t kInterface = 0x01;
inline constexpr std::uint8_t kEndpoint = 0x02;
}  // namespace request_type

namespace descriptor_type {
inline constexpr std::uint8_t kDevice = 1;
inline constexpr std::uint8_t kConfiguration = 2;
inline constexpr std::uint8_t kString = 3;
inline constexpr std::uint8_t kInterface = 4;
inline constexpr std::uint8_t kEndpoint = 5;
}  // namespace descriptor_type

inline constexpr std::size_t kDeviceDescriptorLength = 18;
inline constexpr std::size_t kConfigurationDescriptorLength = 9;
inline constexpr std::size_t kInterfaceDescriptorLength = 9;
inline constexpr std::size_t kEndpointDescriptorLength = 7;
inline constexpr std::size_t kSetupPacketLength = 8;

struct DeviceDescriptor {
  std::uint16_t bcd_usb = 0x0200;
  std::uint8_t device_class = 0;
  std::uint8_t device_subclass = 0;
  std::uint8_t device_protocol = 0;
  std::uint8_t max_packet_size0 = 64;
  std::uint16_t vendor_id = 0;
  std::uint16_t product_id = 0;
  std::uint16_t bcd_device = 0x0100;
  std::uint8_t manufacturer_index = 0;
  std::uint8_t product_index = 0;
  std::uint8_t serial_index = 0;
  std::uint8_t num_configurations = 1;

  bool operator==(const DeviceDescriptor&) const = default;
};

enum class Direction { kOut, kIn };
enum class TransferType : std::uint8_t { kControl = 0, kIsochronous = 1, kBulk = 2, kInterrupt = 3 };

struct EndpointDescriptor {
  std::uint8_t address = 0;  // bit 7 set for IN
  TransferType type = TransferType::kBulk;
  std::uint16_t max_packet_size = 64;
  std::uint8_t interval = 0;

  Direction direction() const { return (address & 0x80) ? Direction::kIn : Direction::kOut; }
  bool operator==(const EndpointDescriptor&) const = default;
};

struct InterfaceDescriptor {
  std::uint8_t number = 0;
  std::uint8_t alternate_setting = 0;
  std::uint8_t interface_class = 0;
  std::uint8_t interface_subclass = 0;
  std::uint8_t interface_protocol = 0;
  std::uint8_t string_index = 0;
  std::vector<EndpointDescriptor> endpoints;

  bool operator==(const InterfaceDescriptor&) const = default;
};

struct ConfigurationDescriptor {
  std::uint8_t value = 1;
  std::uint8_t string_index = 0;
  std::uint8_t attributes = 0x80;  // bus powered
  std::uint8_t max_power = 50;     // units of 2 mA
  std::vector<InterfaceDescriptor> interfaces;

  // Header plus every contained interface and endpoint descriptor.
  std::uint16_t total_length() const;
  bool operator==(const ConfigurationDescriptor&) const = default;
};

struct DescriptorSet {
  DeviceDescriptor device;
  std::vector<ConfigurationDescriptor> configurations;

  bool operator==(const DescriptorSet&) const = default;
};

Bytes serialize(const DeviceDescriptor& d);
// The full configuration bundle as returned by GET_DESCRIPTOR(CONFIGURATION).
Bytes serialize(const ConfigurationDescriptor& c);

// Both parsers throw Error(kMalformedDescriptor) when a length field, type
// byte or the configuration total length disagrees with the bytes present.
DeviceDescriptor parse_device_descriptor(ByteSpan bytes);
ConfigurationDescriptor parse_configuration(ByteSpan bytes);

Bytes string_descriptor(std::u16string_view text);
Bytes language_id_descriptor();

struct SetupPacket {
  std::uint8_t request_type = 0;
  std::uint8_t request = 0;
  std::uint16_t value = 0;
  std::uint16_t index = 0;
  std::uint16_t length = 0;

  bool device_to_host() const { return (request_type & request_type::kDirIn) != 0; }
  std::array<std::uint8_t, kSetupPacketLength> serialize() const;
  static SetupPacket parse(ByteSpan bytes);

  bool operator==(const SetupPacket&) const = default;
};

SetupPacket get_descriptor(std::uint8_t type, std::uint8_t index, std::uint16_t length,
                           std::uint16_t language = 0);
SetupPacket set_address(std::uint8_t address);
SetupPacket set_configuration(std::uint8_t value);
SetupPacket clear_endpoint_halt(std::uint8_t endpoint);

}  // namespace usbb::usb
