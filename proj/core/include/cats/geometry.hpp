#pragma once

// Index algebra for the shifted-window transformer path: patch partition,
// window partition and reverse, cyclic shift, padding, shift masks and 2x2x2
// merge neighbourhoods. Every reshuffle is expressed as a RowMap so the
// autograd layer can run it as a single gather with a scatter-add backward.

#include <array>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "cats/volume.hpp"

namespace cats::geometry {

// Additive logit applied to attention pairs that must not interact. Finite so
// that masked rows never produce (-inf) * 0 in downstream arithmetic.
inline constexpr double kMaskedLogit = -10000.0;

using Offset3 = std::array<std::int64_t, 3>;

struct WindowSpec {
  Extent3 window{1, 1, 1};
  Offset3 shift{0, 0, 0};

  static WindowSpec regular(Extent3 window);
  // Shift of floor(window / 2) on every axis.
  static WindowSpec shifted(Extent3 window);

  std::int64_t tokens() const noexcept { return window[0] * window[1] * window[2]; }
  bool is_shifted() const noexcept { return shift[0] != 0 || shift[1] != 0 || shift[2] != 0; }
  // Throws PreconditionError unless window > 0 and 0 <= shift < window.
  void validate() const;

  friend bool operator==(const WindowSpec&, const WindowSpec&) = default;
};

template <typename T>
struct TokenGrid {
  GridDims dims;
  std::int64_t channels = 1;
  std::vector<T> values;

  TokenGrid() = default;
  TokenGrid(GridDims dims_, std::int64_t channels_)
      : dims(dims_), channels(channels_), values(static_cast<std::size_t>(dims_.count() * channels_), T{}) {}

  T& at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t c) {
    return values[static_cast<std::size_t>(dims.index(i, j, k) * channels + c)];
  }
  const T& at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t c) const {
    return values[static_cast<std::size_t>(dims.index(i, j, k) * channels + c)];
  }

  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

template <typename T>
struct WindowBatch {
  std::int64_t num_windows = 0;
  std::int64_t tokens_per_window = 0;
  std::int64_t channels = 0;
  std::vector<T> values;  // (num_windows, tokens_per_window, channels)
  GridDims source;
  WindowSpec spec;
};

struct AttentionMask {
  std::int64_t num_windows = 0;
  std::int64_t tokens = 0;
  std::vector<float> values;  // (num_windows, tokens, tokens), entries 0 or kMaskedLogit

  float at(std::int64_t window, std::int64_t i, std::int64_t j) const {
    return values[static_cast<std::size_t>((window * tokens + i) * tokens + j)];
  }
  bool all_zero() const noexcept;
};

// High-side zero padding applied to reach a multiple of the window extent.
struct PadRecord {
  GridDims original;
  Extent3 pad{0, 0, 0};

  bool empty() const noexcept { return pad[0] == 0 && pad[1] == 0 && pad[2] == 0; }
  GridDims padded() const noexcept { return {original.d + pad[0], original.h + pad[1], original.w + pad[2]}; }
};

// Output row r copies input row map[r]; a negative entry yields a zero row.
using RowMap = std::vector<std::int64_t>;

// Map equivalent to applying `first` and then `second`.
RowMap compose(const RowMap& first, const RowMap& second);

template <typename T>
std::vector<T> gather_rows(std::span<const T> input, std::int64_t row_size, const RowMap& map);

GridDims patch_grid_dims(GridDims volume, Extent3 patch);
PadRecord pad_record(GridDims dims, const WindowSpec& spec);

RowMap patch_partition_map(GridDims volume, Extent3 patch);
RowMap window_partition_map(GridDims dims, const WindowSpec& spec);
RowMap window_reverse_map(GridDims dims, const WindowSpec& spec);
RowMap cyclic_shift_map(GridDims dims, Offset3 shift);
RowMap pad_map(const PadRecord& pad);
RowMap crop_map(const PadRecord& pad);
RowMap merge_map(GridDims dims);

// Region label of every token of the (padded) grid, expressed in the shifted
// frame: per axis the three segments [0, D-w), [D-w, D-s), [D-s, D) (a single
// segment when s = 0), combined across axes; padded tokens get their own label.
std::vector<int> region_ids(const PadRecord& pad, const WindowSpec& spec);

AttentionMask build_shift_mask(GridDims dims, const WindowSpec& spec);
// Mask for a padded grid: also blocks every real/padded token pair.
AttentionMask build_attention_mask(const PadRecord& pad, const WindowSpec& spec);

std::int64_t relative_table_size(Extent3 window);
// (tokens x tokens) index into the relative-position table.
std::vector<std::int64_t> relative_position_index(Extent3 window);

template <typename T>
TokenGrid<T> patch_partition(const Volume<T>& volume, Extent3 patch);
template <typename T>
WindowBatch<T> window_partition(const TokenGrid<T>& grid, const WindowSpec& spec);
template <typename T>
TokenGrid<T> window_reverse(const WindowBatch<T>& batch);
template <typename T>
TokenGrid<T> cyclic_shift(const TokenGrid<T>& grid, Offset3 shift);
template <typename T>
std::pair<TokenGrid<T>, PadRecord> pad_to_window(const TokenGrid<T>& grid, const WindowSpec& spec);
template <typename T>
TokenGrid<T> crop(const TokenGrid<T>& grid, const PadRecord& pad);
template <typename T>
TokenGrid<T> merge_neighborhoods(const TokenGrid<T>& grid);

}  // namespace cats::geometry
