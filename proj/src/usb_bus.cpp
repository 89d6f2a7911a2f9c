#include "usbb/usb_bus.hpp"

#include <algorithm>
#include <cstdio>
#include <thread>

#include "usbb/error.hpp"

namespace usbb::usb {

// ---------------------------------------------------------------------------
// UsbFunction

UsbFunction::UsbFunction(DescriptorSet descriptors, std::vector<std::u16string> strings)
    : descriptors_(std::move(descriptors)), strings_(std::move(strings)) {}

std::uint8_t UsbFunction::address() const {
  std::lock_guard lock(mutex_);
  return address_;
}

std::uint8_t UsbFunction::configuration() const {
  std::lock_guard lock(mutex_);
  return configuration_;
}

bool UsbFunction::is_halted(std::uint8_t endpoint) const {
  std::lock_guard lock(mutex_);
  return halted_.contains(endpoint);
}

void UsbFunction::reset_device_state() {
  address_ = 0;
  configuration_ = 0;
  halted_.clear();
}

ControlResult UsbFunction::class_request(const SetupPacket&, ByteSpan) { return stall_control(); }

bool UsbFunction::can_clear_halt(std::uint8_t) const { return true; }

Bytes UsbFunction::descriptor_bytes(std::uint8_t type, std::uint8_t index) const {
  switch (type) {
    case descriptor_type::kDevice:
      return serialize(descriptors_.device);
    case descriptor_type::kConfiguration:
      if (index < descriptors_.configurations.size()) {
        return serialize(descriptors_.configurations[index]);
      }
      return {};
    case descriptor_type::kString:
      if (index == 0) return language_id_descriptor();
      if (index <= strings_.size()) return string_descriptor(strings_[index - 1]);
      return {};
    default:
      return {};
  }
}

bool UsbFunction::has_endpoint(std::uint8_t endpoint) const {
  if (configuration_ == 0) return false;
  for (const auto& cfg : descriptors_.configurations) {
    if (cfg.value != configuration_) continue;
    for (const auto& itf : cfg.interfaces) {
      for (const auto& ep : itf.endpoints) {
        if (ep.address == endpoint) return true;
      }
    }
  }
  return false;
}

ControlResult UsbFunction::standard_request(const SetupPacket& setup) {
  const std::uint8_t recipient = setup.request_type & request_type::kRecipientMask;
  switch (setup.request) {
    case request::kGetDescriptor: {
      Bytes d = descriptor_bytes(static_cast<std::uint8_t>(setup.value >> 8),
                                 static_cast<std::uint8_t>(setup.value & 0xFF));
      if (d.empty()) return stall_control();
      if (d.size() > setup.length) d.resize(setup.length);
      return {TransferStatus::kOk, std::move(d)};
    }
    case request::kSetAddress:
      if (setup.value > 127) return stall_control();
      address_ = static_cast<std::uint8_t>(setup.value);
      return {};
    case request::kSetConfiguration: {
      auto value = static_cast<std::uint8_t>(setup.value);
      if (value == 0) {
        configuration_ = 0;
        return {};
      }
      for (const auto& cfg : descriptors_.configurations) {
        if (cfg.value == value) {
          configuration_ = value;
          halted_.clear();
          return {};
        }
      }
      return stall_control();
    }
    case request::kGetConfiguration:
      return {TransferStatus::kOk, Bytes{configuration_}};
    case request::kGetStatus: {
      std::uint16_t status = 0;
      if (recipient == request_type::kEndpoint) {
        auto ep = static_cast<std::uint8_t>(setup.index);
        if (!has_endpoint(ep)) return stall_control();
        status = halted_.contains(ep) ? 1 : 0;
      }
      Bytes out{static_cast<std::uint8_t>(status), static_cast<std::uint8_t>(status >> 8)};
      return {TransferStatus::kOk, std::move(out)};
    }
    case request::kClearFeature:
    case request::kSetFeature: {
      if (recipient != request_type::kEndpoint || setup.value != request::kFeatureEndpointHalt) {
        return stall_control();
      }
      auto ep = static_cast<std::uint8_t>(setup.index);
      if (!has_endpoint(ep)) return stall_control();
      if (setup.request == request::kSetFeature) {
        set_halt(ep);
      } else if (can_clear_halt(ep)) {
        clear_halt(ep);
      }
      return {};
    }
    default:
      return stall_control();
  }
}

ControlResult UsbFunction::control(const SetupPacket& setup, ByteSpan payload) {
  std::lock_guard lock(mutex_);
  switch (setup.request_type & request_type::kTypeMask) {
    case request_type::kStandard: return standard_request(setup);
    case request_type::kClass: return class_request(setup, payload);
    default: return stall_control();
  }
}

BulkOutResult UsbFunction::bulk_out(std::uint8_t endpoint, ByteSpan data) {
  std::lock_guard lock(mutex_);
  if (!has_endpoint(endpoint) || halted_.contains(endpoint)) {
    return {TransferStatus::kStall, 0};
  }
  return on_bulk_out(endpoint, data);
}

BulkInResult UsbFunction::bulk_in(std::uint8_t endpoint, std::size_t max_len) {
  std::lock_guard lock(mutex_);
  if (!has_endpoint(endpoint) || halted_.contains(endpoint)) {
    return {TransferStatus::kStall, {}};
  }
  return on_bulk_in(endpoint, max_len);
}

// ---------------------------------------------------------------------------
// Bus

Bus::Bus(BusOptions options) : options_(options), epoch_(std::chrono::steady_clock::now()) {}

void Bus::log_event(Port port, std::string_view event, std::uint8_t address) {
  double ts = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_).count();
  char line[96];
  std::snprintf(line, sizeof line, "%.6f port=%s event=%.*s addr=%u", ts,
                std::string(to_string(port)).c_str(), static_cast<int>(event.size()),
                event.data(), static_cast<unsigned>(address));
  events_.emplace_back(line);
}

void Bus::notify(const BusEvent& event) {
  std::vector<Listener> listeners;
  {
    std::lock_guard lock(listener_mutex_);
    for (const auto& [id, l] : listeners_) listeners.push_back(l);
  }
  for (const auto& l : listeners) l(event);
}

int Bus::add_listener(Listener listener) {
  std::lock_guard lock(listener_mutex_);
  int id = next_listener_id_++;
  listeners_.emplace(id, std::move(listener));
  return id;
}

void Bus::remove_listener(int id) {
  std::lock_guard lock(listener_mutex_);
  listeners_.erase(id);
}

void Bus::attach(Port port, std::shared_ptr<DeviceModel> model) {
  {
    std::lock_guard lock(state_mutex_);
    Slot& slot = slots_[index_of(port)];
    if (slot.model) throw Error(ErrorCode::kPortOccupied, std::string(to_string(port)));
    slot.model = model;
    slot.enumerated.reset();
    ++slot.generation;
    log_event(port, "attach", 0);
  }
  model->on_attach();
  notify({BusEventKind::kAttach, port, 0});
}

void Bus::detach(Port port) {
  std::shared_ptr<DeviceModel> model;
  std::uint8_t address = 0;
  {
    std::lock_guard lock(state_mutex_);
    Slot& slot = slots_[index_of(port)];
    if (!slot.model) throw Error(ErrorCode::kPortEmpty, std::string(to_string(port)));
    model = std::move(slot.model);
    if (slot.enumerated) address = slot.enumerated->address;
    slot.model.reset();
    slot.enumerated.reset();
    ++slot.generation;
    log_event(port, "detach", address);
  }
  model->on_detach();
  notify({BusEventKind::kDetach, port, address});
}

bool Bus::occupied(Port port) const {
  std::lock_guard lock(state_mutex_);
  return slots_[index_of(port)].model != nullptr;
}

std::optional<EnumeratedDevice> Bus::device(Port port) const {
  std::lock_guard lock(state_mutex_);
  return slots_[index_of(port)].enumerated;
}

std::vector<std::string> Bus::event_log() const {
  std::lock_guard lock(state_mutex_);
  return events_;
}

std::vector<TransferRecord> Bus::transfer_log() const {
  std::lock_guard lock(state_mutex_);
  return {transfers_.begin(), transfers_.end()};
}

std::size_t Bus::open_transfers() const {
  std::lock_guard lock(state_mutex_);
  return open_transfers_;
}

std::uint64_t Bus::begin_transfer(Port port, std::uint8_t address, TransferKind kind,
                                  std::uint8_t endpoint) {
  std::lock_guard lock(state_mutex_);
  TransferRecord rec;
  rec.id = next_transfer_id_++;
  rec.port = port;
  rec.address = address;
  rec.kind = kind;
  rec.endpoint = endpoint;
  transfers_.push_back(rec);
  while (transfers_.size() > options_.transfer_log_capacity) transfers_.pop_front();
  ++open_transfers_;
  return rec.id;
}

void Bus::end_transfer(std::uint64_t id, std::string outcome) {
  std::lock_guard lock(state_mutex_);
  --open_transfers_;
  for (auto it = transfers_.rbegin(); it != transfers_.rend(); ++it) {
    if (it->id == id) {
      it->completed = true;
      it->outcome = std::move(outcome);
      break;
    }
  }
}

void Bus::check_generation(Port port, std::uint64_t generation) const {
  std::lock_guard lock(state_mutex_);
  if (slots_[index_of(port)].generation != generation) {
    throw Error(ErrorCode::kDeviceGone, "port " + std::string(to_string(port)));
  }
}

void Bus::pace(Speed speed, std::size_t bytes) const {
  if (!options_.pace_transfers || bytes == 0) return;
  double bits_per_second = speed == Speed::kHigh ? 480e6 : 12e6;
  std::this_thread::sleep_for(
      std::chrono::duration<double>(static_cast<double>(bytes) * 8.0 / bits_per_second));
}

Bus::Target Bus::resolve(std::uint8_t address) const {
  std::lock_guard lock(state_mutex_);
  for (Port port : kPorts) {
    const Slot& slot = slots_[index_of(port)];
    if (slot.model && slot.enumerated && slot.enumerated->address == address && address != 0) {
      return Target{port, slot.model, slot.generation, *slot.enumerated};
    }
  }
  throw Error(ErrorCode::kNoSuchDevice, "address " + std::to_string(address));
}

namespace {

// Runs `fn` inside a begin/end transfer bracket so every record resolves.
template <typename Fn>
auto bracketed(Fn&& fn, auto&& end) -> decltype(fn()) {
  try {
    auto result = fn();
    end(std::string("ok"));
    return result;
  } catch (const Error& e) {
    end(std::string(to_string(e.code())));
    throw;
  } catch (...) {
    end(std::string("exception"));
    throw;
  }
}

const EndpointDescriptor* find_endpoint(const EnumeratedDevice& dev, std::uint8_t endpoint) {
  for (const auto& cfg : dev.descriptors.configurations) {
    for (const auto& itf : cfg.interfaces) {
      for (const auto& ep : itf.endpoints) {
        if (ep.address == endpoint) return &ep;
      }
    }
  }
  return nullptr;
}

}  // namespace

ControlResult Bus::raw_control(Port port, const std::shared_ptr<DeviceModel>& model,
                               std::uint64_t generation, const SetupPacket& setup,
                               ByteSpan payload) {
  check_generation(port, generation);
  ControlResult r = model->control(setup, payload);
  check_generation(port, generation);
  if (r.status == TransferStatus::kStall) {
    char what[48];
    std::snprintf(what, sizeof what, "request 0x%02x on port %s", setup.request,
                  port == Port::kA ? "A" : "B");
    throw Error(ErrorCode::kRequestStalled, what);
  }
  if (r.data.size() > setup.length) r.data.resize(setup.length);
  return r;
}

EnumeratedDevice Bus::enumerate(Port port) {
  std::lock_guard port_lock(port_mutex_[index_of(port)]);
  std::shared_ptr<DeviceModel> model;
  std::uint64_t generation = 0;
  {
    std::lock_guard lock(state_mutex_);
    const Slot& slot = slots_[index_of(port)];
    if (!slot.model) throw Error(ErrorCode::kPortEmpty, std::string(to_string(port)));
    if (slot.enumerated) {
      throw Error(ErrorCode::kInvalidArgument,
                  "port " + std::string(to_string(port)) + " already enumerated");
    }
    model = slot.model;
    generation = slot.generation;
  }

  auto control = [&](std::uint8_t address, const SetupPacket& setup) {
    auto id = begin_transfer(port, address, TransferKind::kControl, 0);
    return bracketed([&] { return raw_control(port, model, generation, setup, {}); },
                     [&](std::string outcome) { end_transfer(id, std::move(outcome)); });
  };

  // Default address: read the device descriptor, then assign an address.
  ControlResult first =
      control(0, get_descriptor(descriptor_type::kDevice, 0, 64));
  DeviceDescriptor device = parse_device_descriptor(first.data);

  std::uint8_t address = 0;
  {
    std::lock_guard lock(state_mutex_);
    // Count upwards and wrap after 127, skipping addresses still held.
    for (int tries = 0; tries < 127 && address == 0; ++tries) {
      std::uint8_t candidate = next_address_;
      next_address_ = candidate == 127 ? 1 : candidate + 1;
      bool held = std::any_of(slots_.begin(), slots_.end(), [&](const Slot& s) {
        return s.enumerated && s.enumerated->address == candidate;
      });
      if (!held) address = candidate;
    }
    if (address == 0) throw Error(ErrorCode::kProtocolError, "address space exhausted");
  }
  control(0, set_address(address));

  ControlResult again =
      control(address, get_descriptor(descriptor_type::kDevice, 0, kDeviceDescriptorLength));
  if (parse_device_descriptor(again.data) != device) {
    throw Error(ErrorCode::kMalformedDescriptor, "device descriptor changed between reads");
  }

  DescriptorSet set;
  set.device = device;
  for (std::uint8_t i = 0; i < device.num_configurations; ++i) {
    ControlResult header = control(
        address, get_descriptor(descriptor_type::kConfiguration, i, kConfigurationDescriptorLength));
    if (header.data.size() != kConfigurationDescriptorLength) {
      throw Error(ErrorCode::kMalformedDescriptor, "short configuration header");
    }
    std::uint16_t total = load_le16(header.data, 2);
    ControlResult full =
        control(address, get_descriptor(descriptor_type::kConfiguration, i, total));
    set.configurations.push_back(parse_configuration(full.data));
  }
  if (set.configurations.empty()) {
    throw Error(ErrorCode::kMalformedDescriptor, "device reports no configurations");
  }
  control(address, set_configuration(set.configurations.front().value));

  EnumeratedDevice result{port, address, std::move(set), model->speed()};
  {
    std::lock_guard lock(state_mutex_);
    Slot& slot = slots_[index_of(port)];
    if (slot.generation != generation) {
      throw Error(ErrorCode::kDeviceGone, "port " + std::string(to_string(port)));
    }
    slot.enumerated = result;
    log_event(port, "enumerated", address);
  }
  notify({BusEventKind::kEnumerated, port, address});
  return result;
}

Bytes Bus::control_transfer(std::uint8_t address, const SetupPacket& setup, ByteSpan payload) {
  Target t = resolve(address);
  std::lock_guard port_lock(port_mutex_[index_of(t.port)]);
  auto id = begin_transfer(t.port, address, TransferKind::kControl, 0);
  return bracketed(
      [&] {
        if (!setup.device_to_host() && payload.size() != setup.length) {
          throw Error(ErrorCode::kInvalidArgument, "control payload length != wLength");
        }
        return raw_control(t.port, t.model, t.generation, setup, payload).data;
      },
      [&](std::string outcome) { end_transfer(id, std::move(outcome)); });
}

std::size_t Bus::bulk_out(std::uint8_t address, std::uint8_t endpoint, ByteSpan data) {
  Target t = resolve(address);
  std::lock_guard port_lock(port_mutex_[index_of(t.port)]);
  auto id = begin_transfer(t.port, address, TransferKind::kBulkOut, endpoint);
  return bracketed(
      [&] {
        const EndpointDescriptor* ep = find_endpoint(t.device, endpoint);
        if (!ep || ep->type != TransferType::kBulk || ep->direction() != Direction::kOut) {
          throw Error(ErrorCode::kNoSuchEndpoint, "endpoint " + std::to_string(endpoint));
        }
        check_generation(t.port, t.generation);
        pace(t.device.speed, data.size());
        BulkOutResult r = t.model->bulk_out(endpoint, data);
        check_generation(t.port, t.generation);
        if (r.status == TransferStatus::kStall) {
          throw Error(ErrorCode::kEndpointHalted, "endpoint " + std::to_string(endpoint));
        }
        return r.accepted;
      },
      [&](std::string outcome) { end_transfer(id, std::move(outcome)); });
}

Bytes Bus::bulk_in(std::uint8_t address, std::uint8_t endpoint, std::size_t max_len) {
  Target t = resolve(address);
  std::lock_guard port_lock(port_mutex_[index_of(t.port)]);
  auto id = begin_transfer(t.port, address, TransferKind::kBulkIn, endpoint);
  return bracketed(
      [&] {
        const EndpointDescriptor* ep = find_endpoint(t.device, endpoint);
        if (!ep || ep->type != TransferType::kBulk || ep->direction() != Direction::kIn) {
          throw Error(ErrorCode::kNoSuchEndpoint, "endpoint " + std::to_string(endpoint));
        }
        check_generation(t.port, t.generation);
        BulkInResult r = t.model->bulk_in(endpoint, max_len);
        check_generation(t.port, t.generation);
        if (r.status == TransferStatus::kStall) {
          throw Error(ErrorCode::kEndpointHalted, "endpoint " + std::to_string(endpoint));
        }
        if (r.data.size() > max_len) r.data.resize(max_len);
        pace(t.device.speed, r.data.size());
        return std::move(r.data);
      },
      [&](std::string outcome) { end_transfer(id, std::move(outcome)); });
}

}  // namespace usbb::usb
