#pragma once

#include <string>
#include <utility>
#include <vector>

#include "gpr/autodiff.hpp"

namespace gpr::ad {

// "GPRW" parameter checkpoint: magic, version u32, count u32, then per tensor
// (name length + UTF-8 name, rank u32, dims u32..., float64 payload). LE.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const std::string& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::string& path);

}  // namespace gpr::ad
