// SPDX-License-Identifier: Apache-2.0
#include "fmch/tensor.hpp"

namespace fmch {

std::string to_string(const Dims3& dims) {
  return "(" + std::to_string(dims.d) + "," + std::to_string(dims.h) + "," + std::to_string(dims.w) + ")";
}

}  // namespace fmch
