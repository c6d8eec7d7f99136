#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fodiff {

enum class ErrorKind {
  InvalidArgument,
  Contract,
  Usage,
  EmptyMask,
  NoValidVoxels,
  Io,
  BadMagic,
  BadVersion,
  BadDtype,
  PayloadShort,
  Config,
};

/// Machine-readable error class, printed by the CLI on failure.
constexpr std::string_view error_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::Contract: return "contract";
    case ErrorKind::Usage: return "usage";
    case ErrorKind::EmptyMask: return "empty-mask";
    case ErrorKind::NoValidVoxels: return "no-valid-voxels";
    case ErrorKind::Io: return "io";
    case ErrorKind::BadMagic: return "bad-magic";
    case ErrorKind::BadVersion: return "bad-version";
    case ErrorKind::BadDtype: return "bad-dtype";
    case ErrorKind::PayloadShort: return "payload-short";
    case ErrorKind::Config: return "config";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  std::string_view code() const noexcept { return error_code(kind_); }

 private:
  ErrorKind kind_;
};

namespace detail {

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const char* message) {
  if (!condition) fail(kind, message);
}

}  // namespace detail
}  // namespace fodiff
