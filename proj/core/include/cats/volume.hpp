#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cats/errors.hpp"

namespace cats {

// Extents of a 3D lattice in raster order (d slowest, w fastest).
struct GridDims {
  std::int64_t d = 1;
  std::int64_t h = 1;
  std::int64_t w = 1;

  std::int64_t count() const noexcept { return d * h * w; }
  std::int64_t operator[](int axis) const noexcept { return axis == 0 ? d : axis == 1 ? h : w; }
  std::int64_t& operator[](int axis) noexcept { return axis == 0 ? d : axis == 1 ? h : w; }
  std::int64_t index(std::int64_t i, std::int64_t j, std::int64_t k) const noexcept { return (i * h + j) * w + k; }

  friend bool operator==(const GridDims&, const GridDims&) = default;
};

std::string to_string(const GridDims& dims);

// Throws PreconditionError unless every extent is strictly positive.
void validate(const GridDims& dims, const char* what);

using Extent3 = std::array<std::int64_t, 3>;

// Physical voxel size in millimetres, per axis.
struct Spacing {
  double d = 1.0;
  double h = 1.0;
  double w = 1.0;

  double operator[](int axis) const noexcept { return axis == 0 ? d : axis == 1 ? h : w; }
  friend bool operator==(const Spacing&, const Spacing&) = default;
};

// Dense channel-last volume with physical spacing. Images are Volume<float>,
// label maps are Volume<std::uint8_t> with a single channel.
template <typename T>
struct Volume {
  GridDims dims;
  std::int64_t channels = 1;
  Spacing spacing;
  std::vector<T> voxels;

  Volume() = default;
  Volume(GridDims dims_, std::int64_t channels_, Spacing spacing_ = {})
      : dims(dims_), channels(channels_), spacing(spacing_),
        voxels(static_cast<std::size_t>(dims_.count() * channels_), T{}) {}

  std::int64_t size() const noexcept { return static_cast<std::int64_t>(voxels.size()); }
  T& at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t c = 0) {
    return voxels[static_cast<std::size_t>(dims.index(i, j, k) * channels + c)];
  }
  const T& at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t c = 0) const {
    return voxels[static_cast<std::size_t>(dims.index(i, j, k) * channels + c)];
  }

  friend bool operator==(const Volume&, const Volume&) = default;
};

using ImageVolume = Volume<float>;
using LabelVolume = Volume<std::uint8_t>;

}  // namespace cats
