#pragma once

#include <map>
#include <string>

#include "opc/tensor.hpp"

namespace opc {

// Binary tensor archive. Layout:
//   magic "OPCCKPT\n" (8 bytes)
//   u32 format version (currently 1)
//   u32 metadata length, metadata bytes (creation info, free-form text)
//   u64 tensor count
//   per tensor: u32 name length, name bytes, u32 rank, u64 extents[rank],
//               raw little-endian f64 values
// Round trips are bit-exact.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const std::map<std::string, Tensor>& tensors,
                     const std::string& metadata);

struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  std::string metadata;
};

// Throws std::runtime_error on missing file, bad magic, or version mismatch.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace opc
