#include "cats/geometry.hpp"

#include <algorithm>
#include <cstring>
#include <string>

namespace cats::geometry {
namespace {

constexpr const char* kAxisName[3] = {"d", "h", "w"};

std::int64_t floor_mod(std::int64_t a, std::int64_t m) {
  const std::int64_t r = a % m;
  return r < 0 ? r + m : r;
}

void require_divisible(GridDims dims, const Extent3& by, const char* what) {
  validate(dims, what);
  for (int a = 0; a < 3; ++a) {
    if (by[a] <= 0) {
      throw PreconditionError(std::string(what) + ": extent along axis " + kAxisName[a] + " must be positive");
    }
    if (dims[a] % by[a] != 0) {
      throw PreconditionError(std::string(what) + ": axis " + kAxisName[a] + " extent " + std::to_string(dims[a]) +
                              " is not divisible by " + std::to_string(by[a]));
    }
  }
}

// Shared layout of patch partition and merge: every output token is the
// raster-order concatenation of a block of input rows.
RowMap block_concat_map(GridDims dims, Extent3 block) {
  const GridDims out{dims.d / block[0], dims.h / block[1], dims.w / block[2]};
  RowMap map;
  map.reserve(static_cast<std::size_t>(dims.count()));
  for (std::int64_t i = 0; i < out.d; ++i)
    for (std::int64_t j = 0; j < out.h; ++j)
      for (std::int64_t k = 0; k < out.w; ++k)
        for (std::int64_t a = 0; a < block[0]; ++a)
          for (std::int64_t b = 0; b < block[1]; ++b)
            for (std::int64_t c = 0; c < block[2]; ++c)
              map.push_back(dims.index(i * block[0] + a, j * block[1] + b, k * block[2] + c));
  return map;
}

AttentionMask mask_from_regions(const std::vector<int>& ids, GridDims dims, const WindowSpec& spec) {
  const RowMap order = window_partition_map(dims, spec);
  const std::int64_t tokens = spec.tokens();
  AttentionMask mask;
  mask.tokens = tokens;
  mask.num_windows = dims.count() / tokens;
  mask.values.assign(static_cast<std::size_t>(mask.num_windows * tokens * tokens), 0.0f);
  for (std::int64_t win = 0; win < mask.num_windows; ++win) {
    const std::int64_t* rows = order.data() + win * tokens;
    for (std::int64_t i = 0; i < tokens; ++i) {
      for (std::int64_t j = 0; j < tokens; ++j) {
        if (ids[static_cast<std::size_t>(rows[i])] != ids[static_cast<std::size_t>(rows[j])]) {
          mask.values[static_cast<std::size_t>((win * tokens + i) * tokens + j)] = static_cast<float>(kMaskedLogit);
        }
      }
    }
  }
  return mask;
}

}  // namespace

WindowSpec WindowSpec::regular(Extent3 window) { return WindowSpec{window, {0, 0, 0}}; }

WindowSpec WindowSpec::shifted(Extent3 window) {
  return WindowSpec{window, {window[0] / 2, window[1] / 2, window[2] / 2}};
}

void WindowSpec::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (window[a] <= 0) {
      throw PreconditionError(std::string("window extent along axis ") + kAxisName[a] + " must be positive");
    }
    if (shift[a] < 0 || shift[a] >= window[a]) {
      throw PreconditionError(std::string("window shift along axis ") + kAxisName[a] + " must lie in [0, " +
                              std::to_string(window[a]) + ")");
    }
  }
}

bool AttentionMask::all_zero() const noexcept {
  return std::all_of(values.begin(), values.end(), [](float v) { return v == 0.0f; });
}

RowMap compose(const RowMap& first, const RowMap& second) {
  RowMap out(second.size());
  for (std::size_t r = 0; r < second.size(); ++r) {
    out[r] = second[r] < 0 ? -1 : first[static_cast<std::size_t>(second[r])];
  }
  return out;
}

template <typename T>
std::vector<T> gather_rows(std::span<const T> input, std::int64_t row_size, const RowMap& map) {
  std::vector<T> out(map.size() * static_cast<std::size_t>(row_size), T{});
  for (std::size_t r = 0; r < map.size(); ++r) {
    if (map[r] < 0) continue;
    std::memcpy(out.data() + r * row_size, input.data() + map[r] * row_size, sizeof(T) * row_size);
  }
  return out;
}

GridDims patch_grid_dims(GridDims volume, Extent3 patch) {
  require_divisible(volume, patch, "patch_partition");
  return {volume.d / patch[0], volume.h / patch[1], volume.w / patch[2]};
}

PadRecord pad_record(GridDims dims, const WindowSpec& spec) {
  validate(dims, "pad_to_window");
  spec.validate();
  PadRecord rec;
  rec.original = dims;
  for (int a = 0; a < 3; ++a) {
    const std::int64_t rem = dims[a] % spec.window[a];
    rec.pad[a] = rem == 0 ? 0 : spec.window[a] - rem;
  }
  return rec;
}

RowMap patch_partition_map(GridDims volume, Extent3 patch) {
  patch_grid_dims(volume, patch);
  return block_concat_map(volume, patch);
}

RowMap window_partition_map(GridDims dims, const WindowSpec& spec) {
  spec.validate();
  require_divisible(dims, spec.window, "window_partition");
  const auto& win = spec.window;
  RowMap map;
  map.reserve(static_cast<std::size_t>(dims.count()));
  for (std::int64_t bi = 0; bi < dims.d / win[0]; ++bi)
    for (std::int64_t bj = 0; bj < dims.h / win[1]; ++bj)
      for (std::int64_t bk = 0; bk < dims.w / win[2]; ++bk)
        for (std::int64_t a = 0; a < win[0]; ++a)
          for (std::int64_t b = 0; b < win[1]; ++b)
            for (std::int64_t c = 0; c < win[2]; ++c)
              map.push_back(dims.index(bi * win[0] + a, bj * win[1] + b, bk * win[2] + c));
  return map;
}

RowMap window_reverse_map(GridDims dims, const WindowSpec& spec) {
  const RowMap forward = window_partition_map(dims, spec);
  RowMap inverse(forward.size());
  for (std::size_t r = 0; r < forward.size(); ++r) inverse[static_cast<std::size_t>(forward[r])] = static_cast<std::int64_t>(r);
  return inverse;
}

RowMap cyclic_shift_map(GridDims dims, Offset3 shift) {
  validate(dims, "cyclic_shift");
  RowMap map;
  map.reserve(static_cast<std::size_t>(dims.count()));
  for (std::int64_t i = 0; i < dims.d; ++i)
    for (std::int64_t j = 0; j < dims.h; ++j)
      for (std::int64_t k = 0; k < dims.w; ++k)
        map.push_back(dims.index(floor_mod(i + shift[0], dims.d), floor_mod(j + shift[1], dims.h),
                                 floor_mod(k + shift[2], dims.w)));
  return map;
}

RowMap pad_map(const PadRecord& pad) {
  const GridDims in = pad.original;
  const GridDims out = pad.padded();
  RowMap map;
  map.reserve(static_cast<std::size_t>(out.count()));
  for (std::int64_t i = 0; i < out.d; ++i)
    for (std::int64_t j = 0; j < out.h; ++j)
      for (std::int64_t k = 0; k < out.w; ++k)
        map.push_back(i < in.d && j < in.h && k < in.w ? in.index(i, j, k) : -1);
  return map;
}

RowMap crop_map(const PadRecord& pad) {
  const GridDims out = pad.original;
  const GridDims in = pad.padded();
  RowMap map;
  map.reserve(static_cast<std::size_t>(out.count()));
  for (std::int64_t i = 0; i < out.d; ++i)
    for (std::int64_t j = 0; j < out.h; ++j)
      for (std::int64_t k = 0; k < out.w; ++k) map.push_back(in.index(i, j, k));
  return map;
}

RowMap merge_map(GridDims dims) {
  validate(dims, "merge_neighborhoods");
  for (int a = 0; a < 3; ++a) {
    if (dims[a] % 2 != 0) {
      throw PreconditionError(std::string("merge_neighborhoods: axis ") + kAxisName[a] + " extent " +
                              std::to_string(dims[a]) + " is odd; pad first");
    }
  }
  return block_concat_map(dims, {2, 2, 2});
}

std::vector<int> region_ids(const PadRecord& pad, const WindowSpec& spec) {
  spec.validate();
  const GridDims dims = pad.padded();
  require_divisible(dims, spec.window, "build_shift_mask");
  auto segment = [&](int axis, std::int64_t x) {
    const std::int64_t s = spec.shift[axis];
    if (s == 0) return 0;
    const std::int64_t n = dims[axis];
    if (x < n - spec.window[axis]) return 0;
    return x < n - s ? 1 : 2;
  };
  constexpr int kPaddedRegion = 27;
  std::vector<int> ids(static_cast<std::size_t>(dims.count()));
  for (std::int64_t i = 0; i < dims.d; ++i)
    for (std::int64_t j = 0; j < dims.h; ++j)
      for (std::int64_t k = 0; k < dims.w; ++k) {
        // Position in the unshifted padded frame of the token now at (i, j, k).
        const bool padded = floor_mod(i + spec.shift[0], dims.d) >= pad.original.d ||
                            floor_mod(j + spec.shift[1], dims.h) >= pad.original.h ||
                            floor_mod(k + spec.shift[2], dims.w) >= pad.original.w;
        ids[static_cast<std::size_t>(dims.index(i, j, k))] =
            padded ? kPaddedRegion : (segment(0, i) * 3 + segment(1, j)) * 3 + segment(2, k);
      }
  return ids;
}

AttentionMask build_shift_mask(GridDims dims, const WindowSpec& spec) {
  spec.validate();
  require_divisible(dims, spec.window, "build_shift_mask");
  PadRecord none;
  none.original = dims;
  return mask_from_regions(region_ids(none, spec), dims, spec);
}

AttentionMask build_attention_mask(const PadRecord& pad, const WindowSpec& spec) {
  return mask_from_regions(region_ids(pad, spec), pad.padded(), spec);
}

std::int64_t relative_table_size(Extent3 window) {
  return (2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[2] - 1);
}

std::vector<std::int64_t> relative_position_index(Extent3 window) {
  const std::int64_t n = window[0] * window[1] * window[2];
  std::vector<std::array<std::int64_t, 3>> coords;
  coords.reserve(static_cast<std::size_t>(n));
  for (std::int64_t a = 0; a < window[0]; ++a)
    for (std::int64_t b = 0; b < window[1]; ++b)
      for (std::int64_t c = 0; c < window[2]; ++c) coords.push_back({a, b, c});
  std::vector<std::int64_t> index(static_cast<std::size_t>(n * n));
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      const auto& p = coords[static_cast<std::size_t>(i)];
      const auto& q = coords[static_cast<std::size_t>(j)];
      index[static_cast<std::size_t>(i * n + j)] =
          ((p[0] - q[0] + window[0] - 1) * (2 * window[1] - 1) + (p[1] - q[1] + window[1] - 1)) * (2 * window[2] - 1) +
          (p[2] - q[2] + window[2] - 1);
    }
  }
  return index;
}

template <typename T>
TokenGrid<T> patch_partition(const Volume<T>& volume, Extent3 patch) {
  TokenGrid<T> out;
  out.dims = patch_grid_dims(volume.dims, patch);
  out.channels = volume.channels * patch[0] * patch[1] * patch[2];
  out.values = gather_rows<T>(volume.voxels, volume.channels, patch_partition_map(volume.dims, patch));
  return out;
}

template <typename T>
WindowBatch<T> window_partition(const TokenGrid<T>& grid, const WindowSpec& spec) {
  WindowBatch<T> batch;
  batch.values = gather_rows<T>(grid.values, grid.channels, window_partition_map(grid.dims, spec));
  batch.tokens_per_window = spec.tokens();
  batch.num_windows = grid.dims.count() / batch.tokens_per_window;
  batch.channels = grid.channels;
  batch.source = grid.dims;
  batch.spec = spec;
  return batch;
}

template <typename T>
TokenGrid<T> window_reverse(const WindowBatch<T>& batch) {
  validate(batch.source, "window_reverse");
  if (batch.tokens_per_window != batch.spec.tokens() ||
      batch.num_windows * batch.tokens_per_window != batch.source.count() ||
      static_cast<std::int64_t>(batch.values.size()) != batch.source.count() * batch.channels) {
    throw PreconditionError("window_reverse: batch shape does not match its provenance " + to_string(batch.source));
  }
  TokenGrid<T> out;
  out.dims = batch.source;
  out.channels = batch.channels;
  out.values = gather_rows<T>(batch.values, batch.channels, window_reverse_map(batch.source, batch.spec));
  return out;
}

template <typename T>
TokenGrid<T> cyclic_shift(const TokenGrid<T>& grid, Offset3 shift) {
  TokenGrid<T> out;
  out.dims = grid.dims;
  out.channels = grid.channels;
  out.values = gather_rows<T>(grid.values, grid.channels, cyclic_shift_map(grid.dims, shift));
  return out;
}

template <typename T>
std::pair<TokenGrid<T>, PadRecord> pad_to_window(const TokenGrid<T>& grid, const WindowSpec& spec) {
  PadRecord rec = pad_record(grid.dims, spec);
  TokenGrid<T> out;
  out.dims = rec.padded();
  out.channels = grid.channels;
  out.values = rec.empty() ? grid.values : gather_rows<T>(grid.values, grid.channels, pad_map(rec));
  return {std::move(out), rec};
}

template <typename T>
TokenGrid<T> crop(const TokenGrid<T>& grid, const PadRecord& pad) {
  if (!(grid.dims == pad.padded())) {
    throw PreconditionError("crop: grid " + to_string(grid.dims) + " does not match padded extent " +
                            to_string(pad.padded()));
  }
  TokenGrid<T> out;
  out.dims = pad.original;
  out.channels = grid.channels;
  out.values = gather_rows<T>(grid.values, grid.channels, crop_map(pad));
  return out;
}

template <typename T>
TokenGrid<T> merge_neighborhoods(const TokenGrid<T>& grid) {
  TokenGrid<T> out;
  const RowMap map = merge_map(grid.dims);
  out.dims = {grid.dims.d / 2, grid.dims.h / 2, grid.dims.w / 2};
  out.channels = grid.channels * 8;
  out.values = gather_rows<T>(grid.values, grid.channels, map);
  return out;
}

#define CATS_GEOMETRY_INSTANTIATE(T)                                                                 \
  template std::vector<T> gather_rows<T>(std::span<const T>, std::int64_t, const RowMap&);         \
  template TokenGrid<T> patch_partition<T>(const Volume<T>&, Extent3);                              \
  template WindowBatch<T> window_partition<T>(const TokenGrid<T>&, const WindowSpec&);              \
  template TokenGrid<T> window_reverse<T>(const WindowBatch<T>&);                                   \
  template TokenGrid<T> cyclic_shift<T>(const TokenGrid<T>&, Offset3);                              \
  template std::pair<TokenGrid<T>, PadRecord> pad_to_window<T>(const TokenGrid<T>&, const WindowSpec&); \
  template TokenGrid<T> crop<T>(const TokenGrid<T>&, const PadRecord&);                             \
  template TokenGrid<T> merge_neighborhoods<T>(const TokenGrid<T>&);

CATS_GEOMETRY_INSTANTIATE(float)
CATS_GEOMETRY_INSTANTIATE(double)
CATS_GEOMETRY_INSTANTIATE(int)

#undef CATS_GEOMETRY_INSTANTIATE

}  // namespace cats::geometry
