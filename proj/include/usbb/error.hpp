#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace usbb {

// Every failure the stack can surface. Names (see to_string) are the stable
// kebab-case identifiers used in CLI messages, trace logs and API bodies.
enum class ErrorCode {
  // blockdev
  kPathExists,
  kSizeOutOfRange,
  kIoFailure,
  kLbaOutOfRange,
  kReadOnlyViolation,
  // usb_bus
  kPortOccupied,
  kPortEmpty,
  kMalformedDescriptor,
  kDeviceGone,
  kNoSuchDevice,
  kNoSuchEndpoint,
  kEndpointHalted,
  kRequestStalled,
  // msc_device / msc_host
  kInvalidCbw,
  kMediumDetached,
  kUnsupportedDevice,
  kNotReadyTimeout,
  kIoFailed,
  kRangeError,
  kProtocolError,
  // fatfs
  kVariantSizeMismatch,
  kBadSignature,
  kUnsupportedVariant,
  kInconsistentBpb,
  kNotFound,
  kNotADirectory,
  kIsADirectory,
  kExistsNoOverwrite,
  kDiskFull,
  kNameInvalid,
  kDirNotEmpty,
  kReadOnlyVolume,
  kCorruptVolume,
  // bridge
  kPortNotReady,
  kSamePort,
  kDestFull,
  kCancelled,
  kUnknownJob,
  kInvalidArgument,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail);
  explicit Error(ErrorCode code);

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace usbb
