#pragma once

// Binary interchange for volumes, labels and probability maps.
//
// Every file starts with a 48-byte little-endian header:
//
//   offset  size  field
//   0       4     magic ("CTV1", "LBL1" or "PRB1")
//   4       2     format version (u16, currently 1)
//   6       1     unit state (u8, see UnitState; 0 for LBL1/PRB1)
//   7       1     reserved
//   8       12    nx, ny, nz (u32 each)
//   20      12    sx, sy, sz (IEEE 754 single each)
//   32      1     element code (0 = int16 HU, 1 = float32, 2 = u8)
//   33      1     num_classes (LBL1/PRB1; 0 for CTV1)
//   34      14    reserved
//
// followed by the payload. PRB1 payloads are class-major.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "ctseg/volume.hpp"

namespace ctseg {

inline constexpr std::size_t kHeaderSize = 48;
inline constexpr std::uint16_t kFormatVersion = 1;

enum class ElementCode : std::uint8_t { Int16 = 0, Float32 = 1, UInt8 = 2 };

/// Payload size in bytes for the given volume as it would be written.
std::uint64_t payload_size(const CtVolume& volume) noexcept;

/// Each writer returns the number of bytes emitted and throws IoError with
/// the offset of the first failed write.
std::uint64_t write_volume(const CtVolume& volume, std::ostream& out);
std::uint64_t write_labels(const LabelVolume& labels, std::ostream& out);
std::uint64_t write_probmap(const ProbMap& probs, std::ostream& out);

/// Readers consume exactly one header and payload. They throw FormatError
/// on a bad header, TruncationError on a short payload, and the validation
/// errors of the constructed type (RangeError, NormalizationError, ...).
CtVolume read_volume(std::istream& in);
LabelVolume read_labels(std::istream& in);
ProbMap read_probmap(std::istream& in);

std::vector<std::uint8_t> encode(const CtVolume& volume);
std::vector<std::uint8_t> encode(const LabelVolume& labels);
std::vector<std::uint8_t> encode(const ProbMap& probs);
CtVolume decode_volume(std::span<const std::uint8_t> bytes);
LabelVolume decode_labels(std::span<const std::uint8_t> bytes);
ProbMap decode_probmap(std::span<const std::uint8_t> bytes);

/// File helpers. Loaders also reject trailing bytes after the payload.
void save_volume(const CtVolume& volume, const std::filesystem::path& path);
void save_labels(const LabelVolume& labels, const std::filesystem::path& path);
void save_probmap(const ProbMap& probs, const std::filesystem::path& path);
CtVolume load_volume(const std::filesystem::path& path);
LabelVolume load_labels(const std::filesystem::path& path);
ProbMap load_probmap(const std::filesystem::path& path);

}  // namespace ctseg
