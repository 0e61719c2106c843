#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace evq {

enum class ErrorKind {
  kDimension,       // shape mismatch between operands
  kContract,        // precondition violated by the caller
  kCalibration,     // non-finite values seen by an observer
  kEmptyCalibration,
  kDegenerateBatch,  // not enough pairs to mine or threshold
  kDegenerateVector,
  kLabel,
  kProtocol,  // evaluation protocol cannot be realized
  kSpec,      // invalid dataset or prune spec
  kTraining,  // non-finite loss
  kCheckpoint,
  kDigest,
  kConfig,
  kIo,
};

std::string_view to_string(ErrorKind kind);

/// Every failure raised by the library carries a kind so the CLI can map it to
/// a stable exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension error";
    case ErrorKind::kContract: return "contract error";
    case ErrorKind::kCalibration: return "calibration error";
    case ErrorKind::kEmptyCalibration: return "empty-calibration error";
    case ErrorKind::kDegenerateBatch: return "degenerate-batch error";
    case ErrorKind::kDegenerateVector: return "degenerate-vector error";
    case ErrorKind::kLabel: return "label error";
    case ErrorKind::kProtocol: return "protocol error";
    case ErrorKind::kSpec: return "spec error";
    case ErrorKind::kTraining: return "training error";
    case ErrorKind::kCheckpoint: return "checkpoint error";
    case ErrorKind::kDigest: return "digest error";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kIo: return "io error";
  }
  return "error";
}

}  // namespace evq
