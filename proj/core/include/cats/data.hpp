#pragma once

// Synthetic ellipsoid phantoms, intensity normalisation, the CV2V volume file
// format and dataset directories with a split manifest.
//
// CV2V layout (all little-endian):
//   "CV2V" | u16 version | u8 dtype (0 float32, 1 uint8) | u8 ndim |
//   ndim x u32 dims | 3 x f32 spacing (d, h, w) | voxels in raster order.
// ndim is 3 for single-channel volumes and 4 (D, H, W, C) otherwise.

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "cats/kv.hpp"
#include "cats/volume.hpp"

namespace cats::data {

struct SynthSpec {
  std::uint64_t seed = 7;
  GridDims shape{32, 32, 32};
  int num_classes = 3;  // 2: single lesion, 3: nested two-zone organ
  double noise = 0.08;
  std::vector<double> class_means{0.2, 0.55, 0.9};  // background first
  int count = 20;
  Spacing spacing{};

  // Throws ConfigError.
  void validate() const;
  kv::Record to_record() const;
  static SynthSpec from_record(const kv::Record& r);
};

struct Case {
  std::string id;
  ImageVolume image;  // values in [0, 1]
  LabelVolume label;
  std::uint64_t seed = 0;
};

std::string case_id(int index);

// Deterministic in (spec.seed, index).
Case generate_case(const SynthSpec& spec, int index);

// (x - min) / (max - min); a constant volume maps to zeros.
ImageVolume normalize_intensity(ImageVolume volume);

inline constexpr char kVolumeMagic[4] = {'C', 'V', '2', 'V'};
inline constexpr std::uint16_t kVolumeVersion = 1;
inline constexpr std::size_t kVolumeHeaderBytes3d = 32;

enum class DType : std::uint8_t { kFloat32 = 0, kUInt8 = 1 };

void write_volume(const std::string& path, const ImageVolume& volume);
void write_volume(const std::string& path, const LabelVolume& volume);

using AnyVolume = std::variant<ImageVolume, LabelVolume>;
// Throws FormatError with kBadMagic, kBadVersion, kBadHeader, kTruncated or kIo.
AnyVolume read_volume(const std::string& path);
ImageVolume read_image(const std::string& path);
LabelVolume read_label(const std::string& path);

struct SplitRatios {
  int train = 55;
  int val = 20;
  int test = 30;
};

struct Split {
  std::vector<std::string> train, val, test;
  const std::vector<std::string>& named(const std::string& split) const;
};

// Shuffles ids with `seed`, then train = floor(n * train%), val =
// floor(n * val%), test = the remainder. Throws ConfigError on bad ratios.
Split make_split(const std::vector<std::string>& ids, std::uint64_t seed, SplitRatios ratios = {});

struct ManifestEntry {
  std::string id;
  std::string image;  // relative to the dataset directory
  std::string label;
  std::string split;
};

// Tab-separated: header "case_id\timage\tlabel\tsplit", then one row per case.
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

struct Dataset {
  std::string directory;
  std::vector<Case> cases;  // manifest order
  Split split;

  const Case& find(const std::string& id) const;
};

inline constexpr const char* kManifestName = "manifest.tsv";
inline constexpr const char* kSpecName = "dataset.cfg";

// Generates spec.count cases into `directory` (created if needed), writing
// volumes, the manifest and the generating spec.
Dataset generate_dataset(const std::string& directory, const SynthSpec& spec, SplitRatios ratios = {});
Dataset load_dataset(const std::string& directory);

}  // namespace cats::data
