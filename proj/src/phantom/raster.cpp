#include "rtp/phantom/raster.hpp"

#include "rtp/util/binary_io.hpp"
#include "rtp/util/files.hpp"

namespace rtp {

namespace {

constexpr char kMagic[4] = {'R', 'T', 'R', '1'};

template <typename A>
void put_header(ByteWriter& w, const A& a, std::uint8_t dtype) {
  w.bytes(kMagic, 4);
  w.u32(static_cast<std::uint32_t>(a.rows()));
  w.u32(static_cast<std::uint32_t>(a.cols()));
  w.u8(dtype);
}

struct Header {
  std::uint32_t height, width;
  std::uint8_t dtype;
};

Header get_header(ByteReader& r, const std::string& source) {
  char magic[4];
  r.bytes(magic, 4);
  if (std::string(magic, 4) != std::string(kMagic, 4)) throw RasterError(source + ": bad magic, not an RTR1 raster");
  Header h{r.u32(), r.u32(), r.u8()};
  if (h.height == 0 || h.width == 0) throw RasterError(source + ": zero raster dimension");
  return h;
}

void expect_payload(const ByteReader& r, std::size_t bytes, const std::string& source) {
  if (r.remaining() < bytes) throw RasterError(source + ": truncated payload");
  if (r.remaining() > bytes) throw RasterError(source + ": trailing bytes after payload");
}

}  // namespace

std::string encode_raster(const Image& img) {
  ByteWriter w;
  put_header(w, img, 0);
  for (Eigen::Index i = 0; i < img.size(); ++i) w.f32(img.data()[i]);
  return w.take();
}

std::string encode_raster(const Mask& mask) {
  ByteWriter w;
  put_header(w, mask, 1);
  w.bytes(mask.data(), static_cast<std::size_t>(mask.size()));
  return w.take();
}

Image decode_image(const std::string& bytes, const std::string& source) {
  ByteReader r(bytes, source);
  const auto h = get_header(r, source);
  if (h.dtype != 0) throw RasterError(source + ": expected f32 raster, found dtype " + std::to_string(h.dtype));
  const std::size_t n = std::size_t{h.height} * h.width;
  expect_payload(r, n * 4, source);
  Image img(h.height, h.width);
  for (std::size_t i = 0; i < n; ++i) img.data()[i] = r.f32();
  return img;
}

Mask decode_mask(const std::string& bytes, const std::string& source) {
  ByteReader r(bytes, source);
  const auto h = get_header(r, source);
  if (h.dtype != 1) throw RasterError(source + ": expected u8 raster, found dtype " + std::to_string(h.dtype));
  const std::size_t n = std::size_t{h.height} * h.width;
  expect_payload(r, n, source);
  Mask m(h.height, h.width);
  r.bytes(m.data(), n);
  return m;
}

void write_raster(const std::filesystem::path& path, const Image& img) { write_file_atomic(path, encode_raster(img)); }
void write_raster(const std::filesystem::path& path, const Mask& mask) {
  write_file_atomic(path, encode_raster(mask));
}

Image read_image(const std::filesystem::path& path) { return decode_image(read_file(path), path.string()); }
Mask read_mask(const std::filesystem::path& path) { return decode_mask(read_file(path), path.string()); }

}  // namespace rtp
