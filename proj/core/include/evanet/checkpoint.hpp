#pragma once

#include <string>
#include <utility>
#include <vector>

#include "evanet/tensor.hpp"

namespace evanet {

// Parameter checkpoint, binary: magic "EVAW", version u16, then repeated
// records of (name length u16, UTF-8 name, rank u8, dims as u32, payload as
// little-endian f64). Values round-trip bit-exactly.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const std::string& path, const NamedTensors& tensors);

// Loaded tensors are plain leaves (no grad tracking). Rejects unknown
// magic/version and truncated files with a ParseError naming the byte offset.
NamedTensors load_checkpoint(const std::string& path);

}  // namespace evanet
