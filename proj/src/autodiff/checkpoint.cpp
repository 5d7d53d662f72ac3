#include "rtp/autodiff/checkpoint.hpp"

#include "rtp/util/binary_io.hpp"
#include "rtp/util/files.hpp"

#include <cstring>

namespace rtp {

namespace {
constexpr char kMagic[4] = {'R', 'T', 'C', 'K'};
}

std::string encode_checkpoint(const std::vector<NamedArray>& tensors) {
  ByteWriter w;
  w.bytes(kMagic, 4);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xFFFF) throw FormatError("tensor name too long: " + t.name.substr(0, 32));
    if (t.shape.size() > 0xFF) throw FormatError("tensor rank too large: " + t.name);
    if (static_cast<std::size_t>(shape_numel(t.shape)) != t.values.size()) {
      throw FormatError("tensor '" + t.name + "' payload does not match its shape");
    }
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (Index d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.values) w.f32(v);
  }
  return w.take();
}

std::vector<NamedArray> decode_checkpoint(const std::string& bytes) {
  ByteReader r(bytes, "checkpoint");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("checkpoint: bad magic (expected RTCK)");
  const std::uint32_t count = r.u32();
  std::vector<NamedArray> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name.resize(r.u16());
    r.bytes(a.name.data(), a.name.size());
    const std::uint8_t rank = r.u8();
    for (std::uint8_t k = 0; k < rank; ++k) a.shape.push_back(static_cast<Index>(r.u32()));
    a.values.resize(static_cast<std::size_t>(shape_numel(a.shape)));
    for (auto& v : a.values) v = r.f32();
    out.push_back(std::move(a));
  }
  if (!r.at_end()) throw FormatError("checkpoint: trailing bytes after last tensor");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& tensors) {
  write_file_atomic(path, encode_checkpoint(tensors));
}

std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace rtp
