#include "cats/volume.hpp"

namespace cats {

std::string to_string(const GridDims& dims) {
  return "(" + std::to_string(dims.d) + "," + std::to_string(dims.h) + "," + std::to_string(dims.w) + ")";
}

void validate(const GridDims& dims, const char* what) {
  if (dims.d <= 0 || dims.h <= 0 || dims.w <= 0) {
    throw PreconditionError(std::string(what) + ": grid extents must be positive, got " + to_string(dims));
  }
}

}  // namespace cats
