#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace conllm {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor/vector shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Out-of-range hyperparameter or argument value.
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Caller violated an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Mathematically undefined input (e.g. cosine of a zero vector).
class DomainError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

enum class FormatFault {
  bad_magic,
  bad_version,
  truncated,
  dim_mismatch,
  bad_label,
  bad_presence,
  duplicate_id,
  bad_crc,
  trailing_bytes,
  invalid_bundle,
};

inline const char* to_string(FormatFault f) {
  switch (f) {
    case FormatFault::bad_magic: return "bad magic";
    case FormatFault::bad_version: return "unsupported version";
    case FormatFault::truncated: return "truncated file";
    case FormatFault::dim_mismatch: return "dimension mismatch";
    case FormatFault::bad_label: return "invalid label";
    case FormatFault::bad_presence: return "invalid presence mask";
    case FormatFault::duplicate_id: return "duplicate sample id";
    case FormatFault::bad_crc: return "CRC mismatch";
    case FormatFault::trailing_bytes: return "trailing bytes";
    case FormatFault::invalid_bundle: return "invalid bundle";
  }
  return "format error";
}

// Malformed binary file. `offset` is the byte position where parsing failed.
class FormatError : public Error {
 public:
  FormatError(FormatFault fault, const std::string& what, std::size_t offset)
      : Error(std::string(to_string(fault)) + ": " + what + " (at byte offset " +
              std::to_string(offset) + ")"),
        fault_(fault),
        offset_(offset) {}

  FormatFault fault() const noexcept { return fault_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  FormatFault fault_;
  std::size_t offset_;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Invalid run configuration; `field` names the offending key path.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// Numeric failure during optimization. Epoch/batch are -1 when unknown.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long epoch = -1, long batch = -1)
      : Error(what + (epoch >= 0 ? " [epoch " + std::to_string(epoch) +
                                       ", batch " + std::to_string(batch) + "]"
                                 : std::string{})),
        epoch_(epoch),
        batch_(batch) {}

  long epoch() const noexcept { return epoch_; }
  long batch() const noexcept { return batch_; }

 private:
  long epoch_;
  long batch_;
};

}  // namespace conllm
