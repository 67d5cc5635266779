#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gova {

/// Machine-readable failure category. The CLI prints `error[<category>]: msg`.
enum class ErrorKind {
  kGeometry,          // undefined geometry (0/0 IoU)
  kInvalidInstance,   // malformed evaluation instance
  kContract,          // shape / length / argument contract violated
  kConfig,            // bad configuration value
  kParse,             // malformed input file
  kIntegrity,         // dangling reference in a dataset record
  kGeneration,        // scene generator could not satisfy its constraints
  kShortfall,         // not enough instances to balance a split
  kCheckpoint,        // version / config / checksum mismatch
  kNumeric,           // non-finite loss or rank-deficient design matrix
  kIo,
};

inline std::string_view to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::kGeometry: return "geometry";
    case ErrorKind::kInvalidInstance: return "invalid-instance";
    case ErrorKind::kContract: return "contract";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kParse: return "parse";
    case ErrorKind::kIntegrity: return "integrity";
    case ErrorKind::kGeneration: return "generation";
    case ErrorKind::kShortfall: return "shortfall";
    case ErrorKind::kCheckpoint: return "checkpoint";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace gova
