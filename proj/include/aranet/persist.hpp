#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "aranet/tensor.hpp"
#include "aranet/volume.hpp"

// Bit-exact on-disk formats, little-endian regardless of host:
//   .dvol / .dmask   one text header line, then a raw row-major body
//   .ackpt           named f32 tensors guarded by a trailing CRC32
// Malformed input raises io_error with a distinct message; readers bound
// every allocation by the declared sizes before touching the body.

namespace aranet {

class io_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// CRC-32 (reflected, polynomial 0xEDB88320), crc32("123456789") == 0xCBF43926
std::uint32_t crc32(const std::uint8_t* data, std::size_t len);

void write_volume(const std::string& path, const Volume& v);
Volume read_volume(const std::string& path);

void write_mask(const std::string& path, const MaskVolume& m);
MaskVolume read_mask(const std::string& path);

using NamedTensors = std::vector<std::pair<std::string, TensorF>>;

void save_checkpoint(const std::string& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::string& path);

}  // namespace aranet
