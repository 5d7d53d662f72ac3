#pragma once

#include "rtp/autodiff/tensor.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace rtp {

/// One entry of an RTCK checkpoint: a name and an f32 tensor payload.
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Serializes to the RTCK layout: "RTCK", u32 count, then per tensor
/// u16 name length, name bytes, u8 rank, u32 dims, f32 payload (all LE).
std::string encode_checkpoint(const std::vector<NamedArray>& tensors);
std::vector<NamedArray> decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& tensors);
std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path);

template <typename Scalar>
NamedArray to_named_array(std::string name, const Tensor<Scalar>& t) {
  NamedArray a{std::move(name), t.shape(), std::vector<float>(static_cast<std::size_t>(t.size()))};
  for (Index i = 0; i < t.size(); ++i) a.values[static_cast<std::size_t>(i)] = static_cast<float>(t.values()[i]);
  return a;
}

template <typename Scalar>
void assign_from(Tensor<Scalar>& t, const NamedArray& a) {
  if (a.shape != t.shape()) {
    throw FormatError("checkpoint tensor '" + a.name + "' has shape " + shape_str(a.shape) + ", expected " +
                      shape_str(t.shape()));
  }
  for (Index i = 0; i < t.size(); ++i) t.values()[i] = static_cast<Scalar>(a.values[static_cast<std::size_t>(i)]);
}

}  // namespace rtp
