#pragma once

#include <stdexcept>
#include <string>

namespace mmoe {

// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/layer shape inconsistencies. Messages name the layer index where known.
struct ShapeError : Error {
  using Error::Error;
};

// Run-configuration problems (bad keys, missing files, invalid values).
struct ConfigError : Error {
  using Error::Error;
};

// Generic file I/O failure (open/read/write).
struct IoError : Error {
  using Error::Error;
};

// IDX parsing: unexpected magic number.
struct BadMagicError : IoError {
  using IoError::IoError;
};

// IDX / archive parsing: file ends before the declared payload.
struct TruncatedError : IoError {
  using IoError::IoError;
};

// IDX parsing: image count differs from label count.
struct CountMismatchError : IoError {
  using IoError::IoError;
};

// Model archive: stored checksum does not match content.
struct ChecksumError : IoError {
  using IoError::IoError;
};

// Model archive: unsupported format version.
struct UnknownVersionError : IoError {
  using IoError::IoError;
};

// Model archive: structurally invalid content (bad tags, missing blobs).
struct ArchiveFormatError : IoError {
  using IoError::IoError;
};

// Superclass partition validation.
struct PartitionError : Error {
  using Error::Error;
};

struct DuplicateFineClassError : PartitionError {
  using PartitionError::PartitionError;
};

struct MissingFineClassError : PartitionError {
  using PartitionError::PartitionError;
};

struct EmptySuperclassError : PartitionError {
  using PartitionError::PartitionError;
};

// Training produced a non-finite loss.
struct DivergedError : Error {
  DivergedError(const std::string& msg, int epoch_index)
      : Error(msg), epoch(epoch_index) {}
  int epoch;
};

}  // namespace mmoe
