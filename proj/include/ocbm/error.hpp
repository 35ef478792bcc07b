#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ocbm {

enum class ErrorKind {
  ZeroVector,
  DimensionMismatch,
  EmptySelection,
  NumericError,
  UnknownConcept,
  DuplicateName,
  IndexOutOfRange,
  InvalidArgument,
  BadMagic,
  TruncatedPayload,
  NonFiniteValue,
  LabelOutOfRange,
  InconsistentDims,
  IoError,
};

std::string_view to_string(ErrorKind kind);

/// Every failure raised by the library. `row`/`col` are filled for
/// NonFiniteValue and LabelOutOfRange; `epoch` for training failures.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  std::optional<long> row;
  std::optional<long> col;
  std::optional<long> epoch;

 private:
  ErrorKind kind_;
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ZeroVector: return "ZeroVector";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::EmptySelection: return "EmptySelection";
    case ErrorKind::NumericError: return "NumericError";
    case ErrorKind::UnknownConcept: return "UnknownConcept";
    case ErrorKind::DuplicateName: return "DuplicateName";
    case ErrorKind::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::TruncatedPayload: return "TruncatedPayload";
    case ErrorKind::NonFiniteValue: return "NonFiniteValue";
    case ErrorKind::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorKind::InconsistentDims: return "InconsistentDims";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace ocbm
