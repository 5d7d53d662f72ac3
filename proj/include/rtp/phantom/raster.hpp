#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

namespace rtp {

using Image = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Mask = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Field = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class RasterError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// RTR1 layout: "RTR1", u32 height, u32 width, u8 dtype (0 = f32, 1 = u8),
/// row-major little-endian payload.
std::string encode_raster(const Image& img);
std::string encode_raster(const Mask& mask);
Image decode_image(const std::string& bytes, const std::string& source);
Mask decode_mask(const std::string& bytes, const std::string& source);

void write_raster(const std::filesystem::path& path, const Image& img);
void write_raster(const std::filesystem::path& path, const Mask& mask);
Image read_image(const std::filesystem::path& path);
Mask read_mask(const std::filesystem::path& path);

}  // namespace rtp
