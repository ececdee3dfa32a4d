#pragma once

#include <map>
#include <string>

#include "pointnav/diff/tensor.hpp"

namespace pointnav::diff {

// Versioned binary container of named 64-bit tensors plus a string metadata
// map. Round-trips are exact: payloads are raw doubles.
struct Checkpoint {
  std::map<std::string, std::string> metadata;
  std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace pointnav::diff
