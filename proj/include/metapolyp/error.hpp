#pragma once

#include <stdexcept>
#include <string>

namespace metapolyp {

/// Root of every error the library throws.
class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Tensor extents or channel counts that do not fit together.
class DimensionError : public Error {
   public:
    using Error::Error;
};

/// Invalid hyperparameters or configuration values.
class ConfigError : public Error {
   public:
    using Error::Error;
};

/// API misuse (backward on a non-scalar, empty dataset, ...).
class UsageError : public Error {
   public:
    using Error::Error;
};

/// A NaN or Inf appeared in a value that must stay finite.
class NumericError : public Error {
   public:
    using Error::Error;
};

/// Malformed Netpbm input; `offset` is the byte position of the problem.
class ParseError : public Error {
   public:
    ParseError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte " + std::to_string(offset) + ")"), detail_(what), offset_(offset) {}
    std::size_t offset() const noexcept { return offset_; }
    /// Message without the offset suffix.
    const std::string& detail() const noexcept { return detail_; }

   private:
    std::string detail_;
    std::size_t offset_;
};

/// An image without a mask (or the reverse) in a dataset directory.
class PairingError : public Error {
   public:
    using Error::Error;
};

class CheckpointError : public Error {
   public:
    enum class Kind { Io, BadMagic, VersionMismatch, Truncated, Malformed };

    CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

   private:
    Kind kind_;
};

}  // namespace metapolyp
