#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ctseg {

/// Base of every error the library throws for bad data or violated contracts.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Sink or source failure. Carries the byte offset at which the failure happened.
class IoError : public Error {
public:
  IoError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

private:
  std::uint64_t offset_;
};

class FormatError : public Error {
  using Error::Error;
};
class TruncationError : public Error {
  using Error::Error;
};
class RangeError : public Error {
  using Error::Error;
};
class NormalizationError : public Error {
  using Error::Error;
};
class ShapeError : public Error {
  using Error::Error;
};
class EmptyInputError : public Error {
  using Error::Error;
};
/// Operation called on a volume in the wrong unit state (e.g. noise on HU data).
class UnitStateError : public Error {
  using Error::Error;
};
/// Configuration value outside its documented domain.
class ConfigError : public Error {
  using Error::Error;
};

class DegenerateWindowError : public Error {
  using Error::Error;
};
class StatsError : public Error {
  using Error::Error;
};
class NoForegroundError : public Error {
  using Error::Error;
};
class UpsampleRefusedError : public Error {
  using Error::Error;
};
class TooFewSlicesError : public Error {
  using Error::Error;
};

class ManifestError : public Error {
  using Error::Error;
};
class ParseError : public Error {
public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};
class FoldError : public Error {
  using Error::Error;
};

class DivergenceError : public Error {
public:
  DivergenceError(const std::string& what, std::size_t epoch, std::size_t batch)
      : Error(what + " (epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) + ")"),
        epoch_(epoch), batch_(batch) {}
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

private:
  std::size_t epoch_;
  std::size_t batch_;
};

class WeightError : public Error {
  using Error::Error;
};
class GeometryError : public Error {
  using Error::Error;
};

}  // namespace ctseg
