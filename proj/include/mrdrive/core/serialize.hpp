#pragma once

#include <iosfwd>
#include <string>

#include "mrdrive/core/tensor.hpp"

namespace mrdrive::core {

// MRT1 tensor block: magic bytes "MRT1", u32 rank, u32 dims[rank], then the
// float32 payload, little-endian, row-major. Used by checkpoints and
// datasets.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void write_u32(std::ostream& os, std::uint32_t v);
std::uint32_t read_u32(std::istream& is);
void write_bytes(std::ostream& os, const std::string& s);
std::string read_bytes(std::istream& is, std::size_t n);

}  // namespace mrdrive::core
