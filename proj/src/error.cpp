#include "usbb/error.hpp"

namespace usbb {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kPathExists: return "path-exists";
    case ErrorCode::kSizeOutOfRange: return "size-out-of-range";
    case ErrorCode::kIoFailure: return "io-failure";
    case ErrorCode::kLbaOutOfRange: return "lba-out-of-range";
    case ErrorCode::kReadOnlyViolation: return "read-only-violation";
    case ErrorCode::kPortOccupied: return "port-occupied";
    case ErrorCode::kPortEmpty: return "port-empty";
    case ErrorCode::kMalformedDescriptor: return "malformed-descriptor";
    case ErrorCode::kDeviceGone: return "device-gone";
    case ErrorCode::kNoSuchDevice: return "no-such-device";
    case ErrorCode::kNoSuchEndpoint: return "no-such-endpoint";
    case ErrorCode::kEndpointHalted: return "endpoint-halted";
    case ErrorCode::kRequestStalled: return "request-stalled";
    case ErrorCode::kInvalidCbw: return "invalid-cbw";
    case ErrorCode::kMediumDetached: return "medium-detached";
    case ErrorCode::kUnsupportedDevice: return "unsupported-device";
    case ErrorCode::kNotReadyTimeout: return "not-ready-timeout";
    case ErrorCode::kIoFailed: return "io-failed";
    case ErrorCode::kRangeError: return "range-error";
    case ErrorCode::kProtocolError: return "protocol-error";
    case ErrorCode::kVariantSizeMismatch: return "variant-size-mismatch";
    case ErrorCode::kBadSignature: return "bad-signature";
    case ErrorCode::kUnsupportedVariant: return "unsupported-variant";
    case ErrorCode::kInconsistentBpb: return "inconsistent-bpb";
    case ErrorCode::kNotFound: return "not-found";
    case ErrorCode::kNotADirectory: return "not-a-directory";
    case ErrorCode::kIsADirectory: return "is-a-directory";
    case ErrorCode::kExistsNoOverwrite: return "exists-no-overwrite";
    case ErrorCode::kDiskFull: return "disk-full";
    case ErrorCode::kNameInvalid: return "name-invalid";
    case ErrorCode::kDirNotEmpty: return "dir-not-empty";
    case ErrorCode::kReadOnlyVolume: return "read-only-volume";
    case ErrorCode::kCorruptVolume: return "corrupt-volume";
    case ErrorCode::kPortNotReady: return "port-not-ready";
    case ErrorCode::kSamePort: return "same-port";
    case ErrorCode::kDestFull: return "dest-full";
    case ErrorCode::kCancelled: return "cancelled";
    case ErrorCode::kUnknownJob: return "unknown-job";
    case ErrorCode::kInvalidArgument: return "invalid-argument";
  }
  return "unknown";
}

namespace {
std::string compose(ErrorCode code, const std::string& detail) {
  std::string msg(to_string(code));
  if (!detail.empty()) {
    msg += ": ";
    msg += detail;
  }
  return msg;
}
}  // namespace

Error::Error(ErrorCode code, const std::string& detail)
    : std::runtime_error(compose(code, detail)), code_(code), detail_(detail) {}

Error::Error(ErrorCode code) : Error(code, std::string{}) {}

}  // namespace usbb
