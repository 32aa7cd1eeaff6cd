#pragma once

#include <cstdint>
#include <vector>

namespace cil {

// Global class label as stored in a dataset.
using Label = std::uint32_t;
using LabelList = std::vector<Label>;

}  // namespace cil
