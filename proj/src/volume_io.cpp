#include "ctseg/volume_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "ctseg/errors.hpp"

namespace ctseg {

namespace {

constexpr std::size_t kChunkBytes = std::size_t{1} << 20;

class ByteWriter {
public:
  explicit ByteWriter(std::ostream& out) : out_(out) {}

  void bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out_) {
      throw IoError("write failed", offset_);
    }
    offset_ += n;
  }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u16(std::uint16_t v) {
    const std::array<std::uint8_t, 2> b{static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8)};
    bytes(b.data(), b.size());
  }
  void u32(std::uint32_t v) {
    const std::array<std::uint8_t, 4> b{static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                                        static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 24)};
    bytes(b.data(), b.size());
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void zeros(std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) u8(0);
  }

  std::uint64_t offset() const noexcept { return offset_; }

private:
  std::ostream& out_;
  std::uint64_t offset_ = 0;
};

struct Header {
  std::array<char, 4> magic{};
  std::uint16_t version = 0;
  std::uint8_t unit_state = 0;
  Dims dims;
  Spacing spacing;
  std::uint8_t element = 0;
  std::uint8_t num_classes = 0;
};

std::uint32_t le32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
}

void write_header(ByteWriter& w, const char* magic, UnitState state, const Dims& dims, const Spacing& spacing,
                  ElementCode element, std::uint8_t num_classes) {
  w.bytes(magic, 4);
  w.u16(kFormatVersion);
  w.u8(static_cast<std::uint8_t>(state));
  w.u8(0);
  w.u32(dims.nx);
  w.u32(dims.ny);
  w.u32(dims.nz);
  w.f32(spacing.sx);
  w.f32(spacing.sy);
  w.f32(spacing.sz);
  w.u8(static_cast<std::uint8_t>(element));
  w.u8(num_classes);
  w.zeros(14);
}

void read_exact(std::istream& in, std::uint8_t* dst, std::size_t n, const char* what) {
  in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw TruncationError(std::string(what) + ": expected " + std::to_string(n) + " bytes, got " +
                          std::to_string(in.gcount()));
  }
}

Header read_header(std::istream& in, const char* expected_magic) {
  std::array<std::uint8_t, kHeaderSize> raw{};
  read_exact(in, raw.data(), raw.size(), "header");
  Header h;
  std::memcpy(h.magic.data(), raw.data(), 4);
  if (std::memcmp(h.magic.data(), expected_magic, 4) != 0) {
    throw FormatError(std::string("bad magic, expected ") + expected_magic);
  }
  h.version = static_cast<std::uint16_t>(raw[4] | (raw[5] << 8));
  if (h.version != kFormatVersion) {
    throw FormatError("unsupported format version " + std::to_string(h.version));
  }
  h.unit_state = raw[6];
  h.dims = Dims{le32(&raw[8]), le32(&raw[12]), le32(&raw[16])};
  h.spacing = Spacing{std::bit_cast<float>(le32(&raw[20])), std::bit_cast<float>(le32(&raw[24])),
                      std::bit_cast<float>(le32(&raw[28]))};
  h.element = raw[32];
  h.num_classes = raw[33];
  if (h.dims.nx == 0 || h.dims.ny == 0 || h.dims.nz == 0) {
    throw FormatError("zero dimension in header");
  }
  return h;
}

// Reads count elements of width bytes each, growing the buffer chunk by chunk
// so a header that overstates the payload fails on the short read instead of
// on a huge allocation.
std::vector<std::uint8_t> read_payload(std::istream& in, const Dims& dims, std::uint64_t per_voxel) {
  const std::uint64_t a = dims.nx;
  const std::uint64_t b = dims.ny;
  const std::uint64_t c = dims.nz;
  const std::uint64_t limit = std::uint64_t{1} << 40;
  if (a * b > limit || a * b * c > limit || a * b * c * per_voxel > limit) {
    throw TruncationError("declared payload size exceeds any readable input");
  }
  const std::uint64_t total = a * b * c * per_voxel;
  std::vector<std::uint8_t> buf;
  while (buf.size() < total) {
    const std::size_t want = static_cast<std::size_t>(std::min<std::uint64_t>(kChunkBytes, total - buf.size()));
    const std::size_t old = buf.size();
    buf.resize(old + want);
    in.read(reinterpret_cast<char*>(buf.data() + old), static_cast<std::streamsize>(want));
    const auto got = static_cast<std::size_t>(in.gcount());
    if (got != want) {
      throw TruncationError("payload: header declares " + std::to_string(total) + " bytes, stream ended after " +
                            std::to_string(old + got));
    }
  }
  return buf;
}

template <typename T, typename Reader>
T load_file(const std::filesystem::path& path, Reader reader) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open " + path.string(), 0);
  }
  T value = reader(in);
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("trailing bytes after payload in " + path.string());
  }
  return value;
}

template <typename T, typename Writer>
void save_file(const T& value, const std::filesystem::path& path, Writer writer) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot open " + path.string() + " for writing", 0);
  }
  writer(value, out);
  out.flush();
  if (!out) {
    throw IoError("flush failed for " + path.string(), 0);
  }
}

template <typename T, typename Writer>
std::vector<std::uint8_t> encode_with(const T& value, Writer writer) {
  std::ostringstream out(std::ios::binary);
  writer(value, out);
  const std::string s = std::move(out).str();
  return {s.begin(), s.end()};
}

template <typename Reader>
auto decode_with(std::span<const std::uint8_t> bytes, Reader reader) {
  std::istringstream in(std::string(bytes.begin(), bytes.end()), std::ios::binary);
  return reader(in);
}

}  // namespace

std::uint64_t payload_size(const CtVolume& volume) noexcept {
  const std::uint64_t width = volume.unit_state() == UnitState::Hounsfield ? 2 : 4;
  return volume.dims().voxels() * width;
}

std::uint64_t write_volume(const CtVolume& volume, std::ostream& out) {
  ByteWriter w(out);
  const bool hu = volume.unit_state() == UnitState::Hounsfield;
  write_header(w, "CTV1", volume.unit_state(), volume.dims(), volume.spacing(),
               hu ? ElementCode::Int16 : ElementCode::Float32, 0);
  std::vector<std::uint8_t> payload;
  payload.reserve(payload_size(volume));
  for (float v : volume.voxels()) {
    if (hu) {
      const auto raw = static_cast<std::uint16_t>(static_cast<std::int16_t>(v));
      payload.push_back(static_cast<std::uint8_t>(raw));
      payload.push_back(static_cast<std::uint8_t>(raw >> 8));
    } else {
      const auto raw = std::bit_cast<std::uint32_t>(v);
      for (int s = 0; s < 32; s += 8) payload.push_back(static_cast<std::uint8_t>(raw >> s));
    }
  }
  w.bytes(payload.data(), payload.size());
  return w.offset();
}

CtVolume read_volume(std::istream& in) {
  const Header h = read_header(in, "CTV1");
  if (h.unit_state > static_cast<std::uint8_t>(UnitState::Normalized)) {
    throw FormatError("unknown unit state " + std::to_string(h.unit_state));
  }
  const auto state = static_cast<UnitState>(h.unit_state);
  const auto expected = state == UnitState::Hounsfield ? ElementCode::Int16 : ElementCode::Float32;
  if (h.element != static_cast<std::uint8_t>(expected)) {
    throw FormatError("element code " + std::to_string(h.element) + " does not match unit state");
  }
  const std::uint64_t width = expected == ElementCode::Int16 ? 2 : 4;
  const auto raw = read_payload(in, h.dims, width);
  std::vector<float> voxels(h.dims.voxels());
  for (std::size_t i = 0; i < voxels.size(); ++i) {
    const std::uint8_t* p = raw.data() + i * width;
    if (width == 2) {
      voxels[i] = static_cast<float>(static_cast<std::int16_t>(static_cast<std::uint16_t>(p[0] | (p[1] << 8))));
    } else {
      voxels[i] = std::bit_cast<float>(le32(p));
    }
  }
  return CtVolume(h.dims, h.spacing, state, std::move(voxels));
}

std::uint64_t write_labels(const LabelVolume& labels, std::ostream& out) {
  ByteWriter w(out);
  write_header(w, "LBL1", UnitState::Hounsfield, labels.dims(), labels.spacing(), ElementCode::UInt8,
               labels.num_classes());
  w.bytes(labels.labels().data(), labels.labels().size());
  return w.offset();
}

LabelVolume read_labels(std::istream& in) {
  const Header h = read_header(in, "LBL1");
  if (h.element != static_cast<std::uint8_t>(ElementCode::UInt8)) {
    throw FormatError("label file must use element code 2");
  }
  if (h.num_classes < 2) {
    throw FormatError("label file declares fewer than 2 classes");
  }
  auto raw = read_payload(in, h.dims, 1);
  return LabelVolume(h.dims, h.spacing, h.num_classes, std::move(raw));
}

std::uint64_t write_probmap(const ProbMap& probs, std::ostream& out) {
  ByteWriter w(out);
  write_header(w, "PRB1", UnitState::Hounsfield, probs.dims(), probs.spacing(), ElementCode::Float32,
               probs.num_classes());
  std::vector<std::uint8_t> payload;
  payload.reserve(probs.probs().size() * 4);
  for (float v : probs.probs()) {
    const auto raw = std::bit_cast<std::uint32_t>(v);
    for (int s = 0; s < 32; s += 8) payload.push_back(static_cast<std::uint8_t>(raw >> s));
  }
  w.bytes(payload.data(), payload.size());
  return w.offset();
}

ProbMap read_probmap(std::istream& in) {
  const Header h = read_header(in, "PRB1");
  if (h.element != static_cast<std::uint8_t>(ElementCode::Float32)) {
    throw FormatError("probability map must use element code 1");
  }
  if (h.num_classes < 2) {
    throw FormatError("probability map declares fewer than 2 classes");
  }
  const auto raw = read_payload(in, h.dims, std::uint64_t{4} * h.num_classes);
  std::vector<float> probs(raw.size() / 4);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    probs[i] = std::bit_cast<float>(le32(raw.data() + 4 * i));
  }
  return ProbMap(h.dims, h.spacing, h.num_classes, std::move(probs));
}

std::vector<std::uint8_t> encode(const CtVolume& volume) {
  return encode_with(volume, [](const CtVolume& v, std::ostream& o) { return write_volume(v, o); });
}
std::vector<std::uint8_t> encode(const LabelVolume& labels) {
  return encode_with(labels, [](const LabelVolume& v, std::ostream& o) { return write_labels(v, o); });
}
std::vector<std::uint8_t> encode(const ProbMap& probs) {
  return encode_with(probs, [](const ProbMap& v, std::ostream& o) { return write_probmap(v, o); });
}

CtVolume decode_volume(std::span<const std::uint8_t> bytes) {
  return decode_with(bytes, [](std::istream& in) { return read_volume(in); });
}
LabelVolume decode_labels(std::span<const std::uint8_t> bytes) {
  return decode_with(bytes, [](std::istream& in) { return read_labels(in); });
}
ProbMap decode_probmap(std::span<const std::uint8_t> bytes) {
  return decode_with(bytes, [](std::istream& in) { return read_probmap(in); });
}

void save_volume(const CtVolume& volume, const std::filesystem::path& path) {
  save_file(volume, path, [](const CtVolume& v, std::ostream& o) { write_volume(v, o); });
}
void save_labels(const LabelVolume& labels, const std::filesystem::path& path) {
  save_file(labels, path, [](const LabelVolume& v, std::ostream& o) { write_labels(v, o); });
}
void save_probmap(const ProbMap& probs, const std::filesystem::path& path) {
  save_file(probs, path, [](const ProbMap& v, std::ostream& o) { write_probmap(v, o); });
}

CtVolume load_volume(const std::filesystem::path& path) {
  return load_file<CtVolume>(path, [](std::istream& in) { return read_volume(in); });
}
LabelVolume load_labels(const std::filesystem::path& path) {
  return load_file<LabelVolume>(path, [](std::istream& in) { return read_labels(in); });
}
ProbMap load_probmap(const std::filesystem::path& path) {
  return load_file<ProbMap>(path, [](std::istream& in) { return read_probmap(in); });
}

}  // namespace ctseg
