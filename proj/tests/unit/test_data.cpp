#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <unistd.h>

#include "cats/data.hpp"
#include "cats/errors.hpp"
#include "cats/random.hpp"

namespace cats::data {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("cats-data-" + std::to_string(::getpid()) + "-" +
                                                 std::to_string(Rng(std::random_device{}()).next_u64()))) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

SynthSpec small_spec() {
  SynthSpec s;
  s.shape = {16, 16, 16};
  s.count = 6;
  return s;
}

TEST(GenerateCase, Deterministic) {
  const auto a = generate_case(small_spec(), 3);
  const auto b = generate_case(small_spec(), 3);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.label, b.label);
  EXPECT_EQ(a.seed, b.seed);
  EXPECT_NE(generate_case(small_spec(), 4).label, a.label);
}

TEST(GenerateCase, NoiseFreeHistogramHoldsOnlyClassLevels) {
  SynthSpec s = small_spec();
  s.num_classes = 2;
  s.class_means = {0.3, 0.7};
  s.noise = 0.0;
  const auto c = generate_case(s, 0);
  std::set<float> levels(c.image.voxels.begin(), c.image.voxels.end());
  // After normalisation the two means land on the bounds.
  EXPECT_EQ(levels, (std::set<float>{0.0f, 1.0f}));
  for (std::size_t i = 0; i < c.label.voxels.size(); ++i) EXPECT_EQ(c.image.voxels[i], c.label.voxels[i] ? 1.0f : 0.0f);
}

TEST(GenerateCase, InnerZoneIsNestedInOuter) {
  for (int idx = 0; idx < 5; ++idx) {
    const auto c = generate_case(small_spec(), idx);
    const GridDims d = c.label.dims;
    std::int64_t inner = 0;
    for (std::int64_t i = 0; i < d.d; ++i)
      for (std::int64_t j = 0; j < d.h; ++j)
        for (std::int64_t k = 0; k < d.w; ++k) {
          if (c.label.at(i, j, k) != 2) continue;
          ++inner;
          // Every face neighbour of an inner voxel is foreground.
          const std::int64_t off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
          for (const auto& o : off) {
            const std::int64_t a = i + o[0], b = j + o[1], e = k + o[2];
            ASSERT_TRUE(a >= 0 && b >= 0 && e >= 0 && a < d.d && b < d.h && e < d.w);
            EXPECT_NE(c.label.at(a, b, e), 0);
          }
        }
    EXPECT_GT(inner, 0);
  }
}

TEST(GenerateCase, ImageInUnitRangeAndLabelsValid) {
  const SynthSpec s = small_spec();
  for (int idx = 0; idx < 4; ++idx) {
    const auto c = generate_case(s, idx);
    for (float v : c.image.voxels) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
    for (auto l : c.label.voxels) ASSERT_LT(l, s.num_classes);
  }
}

TEST(Normalize, ThreeValues) {
  ImageVolume v({1, 1, 3}, 1);
  v.voxels = {2, 4, 6};
  EXPECT_EQ(normalize_intensity(v).voxels, (std::vector<float>{0.0f, 0.5f, 1.0f}));
}

TEST(Normalize, IdempotentOnUnitBounds) {
  ImageVolume v({1, 2, 2}, 1);
  v.voxels = {0.0f, 0.25f, 1.0f, 0.75f};
  EXPECT_EQ(normalize_intensity(v), v);
}

TEST(Normalize, ConstantVolumeBecomesZeros) {
  ImageVolume v({2, 2, 2}, 1);
  std::fill(v.voxels.begin(), v.voxels.end(), 3.5f);
  const auto n = normalize_intensity(v);
  EXPECT_TRUE(std::all_of(n.voxels.begin(), n.voxels.end(), [](float x) { return x == 0.0f; }));
}

TEST(VolumeFile, HeaderLayoutOfFloatCube) {
  TempDir dir;
  ImageVolume v({4, 4, 4}, 1, {1.0, 2.0, 0.5});
  for (std::size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = static_cast<float>(i);
  write_volume(dir.file("a.cv2v"), v);
  const auto bytes = slurp(dir.file("a.cv2v"));
  ASSERT_EQ(bytes.size(), 32u + 256u);
  EXPECT_EQ(std::memcmp(bytes.data(), "CV2V", 4), 0);
  EXPECT_EQ(bytes[4] | (bytes[5] << 8), 1);
  EXPECT_EQ(bytes[6], 0);  // float32
  EXPECT_EQ(bytes[7], 3);
  for (int a = 0; a < 3; ++a) {
    const std::uint32_t dim = bytes[8 + 4 * a] | (bytes[9 + 4 * a] << 8) | (bytes[10 + 4 * a] << 16) |
                              (static_cast<std::uint32_t>(bytes[11 + 4 * a]) << 24);
    EXPECT_EQ(dim, 4u);
  }
  float sp[3];
  std::memcpy(sp, bytes.data() + 20, 12);
  EXPECT_EQ(sp[0], 1.0f);
  EXPECT_EQ(sp[1], 2.0f);
  EXPECT_EQ(sp[2], 0.5f);
  float first_payload[2];
  std::memcpy(first_payload, bytes.data() + 32, 8);
  EXPECT_EQ(first_payload[1], 1.0f);
}

TEST(VolumeFile, RoundtripsAreBitExact) {
  TempDir dir;
  Rng rng(5);
  ImageVolume img({3, 5, 2}, 1, {0.5, 1.5, 2.0});
  for (auto& v : img.voxels) v = static_cast<float>(rng.normal());
  write_volume(dir.file("img.cv2v"), img);
  EXPECT_EQ(read_image(dir.file("img.cv2v")), img);
  LabelVolume lab({4, 3, 2}, 1);
  for (auto& v : lab.voxels) v = static_cast<std::uint8_t>(rng.below(3));
  write_volume(dir.file("lab.cv2v"), lab);
  EXPECT_EQ(read_label(dir.file("lab.cv2v")), lab);
  EXPECT_TRUE(std::holds_alternative<LabelVolume>(read_volume(dir.file("lab.cv2v"))));
  ImageVolume multi({2, 2, 2}, 3);
  for (auto& v : multi.voxels) v = static_cast<float>(rng.uniform());
  write_volume(dir.file("multi.cv2v"), multi);
  EXPECT_EQ(read_image(dir.file("multi.cv2v")), multi);
  EXPECT_THROW(read_label(dir.file("img.cv2v")), FormatError);
}

FormatErrorKind kind_of(const std::string& path) {
  try {
    read_volume(path);
  } catch (const FormatError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error for " << path;
  return FormatErrorKind::kIo;
}

TEST(VolumeFile, DistinctErrorKinds) {
  TempDir dir;
  ImageVolume v({4, 4, 4}, 1);
  const std::string path = dir.file("v.cv2v");
  write_volume(path, v);
  const auto good = slurp(path);

  auto bad = good;
  bad[0] = 'X';
  spit(dir.file("magic.cv2v"), bad);
  EXPECT_EQ(kind_of(dir.file("magic.cv2v")), FormatErrorKind::kBadMagic);

  bad = good;
  bad[4] = 9;
  spit(dir.file("version.cv2v"), bad);
  EXPECT_EQ(kind_of(dir.file("version.cv2v")), FormatErrorKind::kBadVersion);

  bad.assign(good.begin(), good.end() - 1);
  spit(dir.file("short.cv2v"), bad);
  EXPECT_EQ(kind_of(dir.file("short.cv2v")), FormatErrorKind::kTruncated);

  bad.assign(good.begin(), good.begin() + 10);
  spit(dir.file("header.cv2v"), bad);
  EXPECT_EQ(kind_of(dir.file("header.cv2v")), FormatErrorKind::kTruncated);

  bad = good;
  bad[6] = 7;
  spit(dir.file("dtype.cv2v"), bad);
  EXPECT_EQ(kind_of(dir.file("dtype.cv2v")), FormatErrorKind::kBadHeader);

  EXPECT_EQ(kind_of(dir.file("absent.cv2v")), FormatErrorKind::kIo);
}

std::vector<std::string> twenty_ids() {
  std::vector<std::string> ids;
  for (int i = 0; i < 20; ++i) ids.push_back(case_id(i));
  return ids;
}

TEST(Split, TwentyCasesGiveElevenFourFive) {
  const auto s = make_split(twenty_ids(), 7);
  EXPECT_EQ(s.train.size(), 11u);
  EXPECT_EQ(s.val.size(), 4u);
  EXPECT_EQ(s.test.size(), 5u);
}

TEST(Split, DisjointAndExhaustive) {
  const auto s = make_split(twenty_ids(), 9);
  std::set<std::string> all;
  for (const auto* part : {&s.train, &s.val, &s.test})
    for (const auto& id : *part) EXPECT_TRUE(all.insert(id).second) << id;
  const auto ids = twenty_ids();
  EXPECT_EQ(all, std::set<std::string>(ids.begin(), ids.end()));
}

TEST(Split, SameSeedSameSplit) {
  const auto a = make_split(twenty_ids(), 3);
  const auto b = make_split(twenty_ids(), 3);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.val, b.val);
  EXPECT_EQ(a.test, b.test);
  const auto c = make_split(twenty_ids(), 4);
  EXPECT_NE(a.train, c.train);
}

TEST(Split, BadRatiosAreRejected) {
  EXPECT_THROW(make_split(twenty_ids(), 1, {0, 50, 50}), ConfigError);
  EXPECT_THROW(make_split(twenty_ids(), 1, {80, 30, 10}), ConfigError);
  EXPECT_THROW(make_split(twenty_ids(), 1, {50, -1, 30}), ConfigError);
  EXPECT_THROW(make_split({"only"}, 1, {50, 20, 30}), ConfigError);
}

TEST(Manifest, Roundtrip) {
  TempDir dir;
  std::vector<ManifestEntry> entries{{"case_000", "images/case_000.cv2v", "labels/case_000.cv2v", "train"},
                                     {"case_001", "images/case_001.cv2v", "labels/case_001.cv2v", "test"}};
  write_manifest(dir.file("manifest.tsv"), entries);
  const auto back = read_manifest(dir.file("manifest.tsv"));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].id, "case_001");
  EXPECT_EQ(back[1].label, "labels/case_001.cv2v");
  EXPECT_EQ(back[1].split, "test");
}

TEST(Dataset, GenerateThenLoad) {
  TempDir dir;
  const auto root = dir.file("ds");
  const auto made = generate_dataset(root, small_spec());
  EXPECT_TRUE(fs::exists(root + "/manifest.tsv"));
  EXPECT_TRUE(fs::exists(root + "/dataset.cfg"));
  const auto loaded = load_dataset(root);
  ASSERT_EQ(loaded.cases.size(), 6u);
  EXPECT_EQ(loaded.split.train, made.split.train);
  EXPECT_EQ(loaded.split.test, made.split.test);
  for (const auto& c : made.cases) {
    EXPECT_EQ(loaded.find(c.id).image, c.image);
    EXPECT_EQ(loaded.find(c.id).label, c.label);
  }
  EXPECT_THROW(loaded.find("case_999"), Error);
}

TEST(SynthSpec, RecordRoundtripAndValidation) {
  SynthSpec s = small_spec();
  s.num_classes = 2;
  s.class_means = {0.1, 0.9};
  s.spacing = {1.0, 1.0, 2.0};
  const auto back = SynthSpec::from_record(s.to_record());
  EXPECT_EQ(back.to_record(), s.to_record());
  s.num_classes = 4;
  EXPECT_THROW(s.validate(), ConfigError);
}

}  // namespace
}  // namespace cats::data
