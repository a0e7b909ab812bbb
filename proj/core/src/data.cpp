#include "cats/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "cats/binary_io.hpp"
#include "cats/random.hpp"

namespace cats::data {

namespace fs = std::filesystem;

void SynthSpec::validate() const {
  cats::validate(shape, "synthetic volume shape");
  if (num_classes != 2 && num_classes != 3) throw ConfigError("synth: num_classes must be 2 or 3");
  if (noise < 0.0) throw ConfigError("synth: noise must be non-negative");
  if (static_cast<int>(class_means.size()) != num_classes) {
    throw ConfigError("synth: class_means needs one value per class (" + std::to_string(num_classes) + ")");
  }
  if (count <= 0) throw ConfigError("synth: count must be positive");
  if (spacing.d <= 0 || spacing.h <= 0 || spacing.w <= 0) throw ConfigError("synth: spacing must be positive");
}

kv::Record SynthSpec::to_record() const {
  kv::Record r;
  r["synth_seed"] = std::to_string(seed);
  r["synth_shape"] = kv::join(Extent3{shape.d, shape.h, shape.w});
  r["synth_classes"] = std::to_string(num_classes);
  r["synth_noise"] = kv::format_double(noise);
  std::string means;
  for (std::size_t i = 0; i < class_means.size(); ++i) means += (i ? "," : "") + kv::format_double(class_means[i]);
  r["synth_means"] = means;
  r["synth_count"] = std::to_string(count);
  r["synth_spacing"] = kv::format_double(spacing.d) + "," + kv::format_double(spacing.h) + "," +
                       kv::format_double(spacing.w);
  return r;
}

namespace {

std::vector<double> parse_doubles(const std::string& text, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': '" + item + "' is not a number");
    }
  }
  return out;
}

}  // namespace

SynthSpec SynthSpec::from_record(const kv::Record& r) {
  SynthSpec s;
  s.seed = static_cast<std::uint64_t>(kv::get_int(r, "synth_seed", static_cast<std::int64_t>(s.seed)));
  const Extent3 e = kv::get_extent(r, "synth_shape", {s.shape.d, s.shape.h, s.shape.w});
  s.shape = {e[0], e[1], e[2]};
  s.num_classes = static_cast<int>(kv::get_int(r, "synth_classes", s.num_classes));
  s.noise = kv::get_double(r, "synth_noise", s.noise);
  if (r.count("synth_means")) {
    s.class_means = parse_doubles(r.at("synth_means"), "synth_means");
  } else if (s.num_classes == 2) {
    s.class_means = {0.2, 0.8};
  }
  s.count = static_cast<int>(kv::get_int(r, "synth_count", s.count));
  if (r.count("synth_spacing")) {
    auto v = parse_doubles(r.at("synth_spacing"), "synth_spacing");
    if (v.size() == 1) v = {v[0], v[0], v[0]};
    if (v.size() != 3) throw ConfigError("config key 'synth_spacing' needs one or three values");
    s.spacing = {v[0], v[1], v[2]};
  }
  s.validate();
  return s;
}

std::string case_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%03d", index);
  return buf;
}

Case generate_case(const SynthSpec& spec, int index) {
  spec.validate();
  Case c;
  c.id = case_id(index);
  c.seed = derive_seed(spec.seed, c.id);
  Rng rng(c.seed);
  const GridDims g = spec.shape;
  std::array<double, 3> center{}, radii{};
  for (int a = 0; a < 3; ++a) {
    const double n = static_cast<double>(g[a]);
    center[a] = (n - 1.0) / 2.0 + rng.uniform(-0.1, 0.1) * n;
    radii[a] = rng.uniform(0.22, 0.34) * n;
  }
  const double ax = rng.uniform(0.0, std::numbers::pi);
  const double ay = rng.uniform(0.0, std::numbers::pi);
  const double az = rng.uniform(0.0, std::numbers::pi);
  const double cx = std::cos(ax), sx = std::sin(ax), cy = std::cos(ay), sy = std::sin(ay);
  const double cz = std::cos(az), sz = std::sin(az);
  // Rows of R = Rz * Ry * Rx.
  const double rot[3][3] = {{cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx},
                            {sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx},
                            {-sy, cy * sx, cy * cx}};
  constexpr double kInnerScale = 0.55;

  c.label = LabelVolume(g, 1, spec.spacing);
  c.image = ImageVolume(g, 1, spec.spacing);
  for (std::int64_t i = 0; i < g.d; ++i)
    for (std::int64_t j = 0; j < g.h; ++j)
      for (std::int64_t k = 0; k < g.w; ++k) {
        const double p[3] = {static_cast<double>(i) - center[0], static_cast<double>(j) - center[1],
                             static_cast<double>(k) - center[2]};
        double r2 = 0.0;
        for (int a = 0; a < 3; ++a) {
          // Body-frame coordinate: (R^T p)_a.
          const double q = rot[0][a] * p[0] + rot[1][a] * p[1] + rot[2][a] * p[2];
          r2 += (q / radii[a]) * (q / radii[a]);
        }
        std::uint8_t label = 0;
        if (r2 <= 1.0) label = 1;
        if (spec.num_classes == 3 && r2 <= kInnerScale * kInnerScale) label = 2;
        c.label.at(i, j, k) = label;
      }
  for (std::size_t v = 0; v < c.image.voxels.size(); ++v) {
    const double mean = spec.class_means[c.label.voxels[v]];
    c.image.voxels[v] = static_cast<float>(spec.noise > 0.0 ? mean + spec.noise * rng.normal() : mean);
  }
  c.image = normalize_intensity(std::move(c.image));
  return c;
}

ImageVolume normalize_intensity(ImageVolume volume) {
  if (volume.voxels.empty()) return volume;
  const auto [lo_it, hi_it] = std::minmax_element(volume.voxels.begin(), volume.voxels.end());
  const float lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) {
    std::fill(volume.voxels.begin(), volume.voxels.end(), 0.0f);
    return volume;
  }
  const float range = hi - lo;
  for (auto& v : volume.voxels) v = std::clamp((v - lo) / range, 0.0f, 1.0f);
  return volume;
}

namespace {

template <typename T>
void write_any(const std::string& path, const Volume<T>& volume, DType dtype) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot open " + path + " for writing");
  out.write(kVolumeMagic, 4);
  io::write_le<std::uint16_t>(out, kVolumeVersion);
  io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(dtype));
  const bool multi = volume.channels != 1;
  io::write_le<std::uint8_t>(out, multi ? 4 : 3);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(volume.dims.d));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(volume.dims.h));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(volume.dims.w));
  if (multi) io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(volume.channels));
  io::write_f32(out, static_cast<float>(volume.spacing.d));
  io::write_f32(out, static_cast<float>(volume.spacing.h));
  io::write_f32(out, static_cast<float>(volume.spacing.w));
  if constexpr (std::is_same_v<T, float>) {
    for (float v : volume.voxels) io::write_f32(out, v);
  } else {
    out.write(reinterpret_cast<const char*>(volume.voxels.data()), static_cast<std::streamsize>(volume.voxels.size()));
  }
  if (!out) throw FormatError(FormatErrorKind::kIo, "write failed for " + path);
}

}  // namespace

void write_volume(const std::string& path, const ImageVolume& volume) { write_any(path, volume, DType::kFloat32); }
void write_volume(const std::string& path, const LabelVolume& volume) { write_any(path, volume, DType::kUInt8); }

AnyVolume read_volume(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open volume " + path);
  char magic[4];
  io::read_exact(in, magic, 4, "volume magic");
  if (std::memcmp(magic, kVolumeMagic, 4) != 0) throw FormatError(FormatErrorKind::kBadMagic, "bad magic in " + path);
  const auto version = io::read_le<std::uint16_t>(in, "volume version");
  if (version != kVolumeVersion) {
    throw FormatError(FormatErrorKind::kBadVersion, "unsupported volume version " + std::to_string(version));
  }
  const auto dtype = io::read_le<std::uint8_t>(in, "volume dtype");
  const auto ndim = io::read_le<std::uint8_t>(in, "volume ndim");
  if (dtype > 1) throw FormatError(FormatErrorKind::kBadHeader, "unknown dtype code " + std::to_string(dtype));
  if (ndim != 3 && ndim != 4) throw FormatError(FormatErrorKind::kBadHeader, "ndim must be 3 or 4");
  std::int64_t dims[4] = {1, 1, 1, 1};
  for (int a = 0; a < ndim; ++a) {
    dims[a] = io::read_le<std::uint32_t>(in, "volume dims");
    if (dims[a] == 0) throw FormatError(FormatErrorKind::kBadHeader, "zero extent in " + path);
  }
  Spacing spacing;
  spacing.d = io::read_f32(in, "volume spacing");
  spacing.h = io::read_f32(in, "volume spacing");
  spacing.w = io::read_f32(in, "volume spacing");
  const GridDims g{dims[0], dims[1], dims[2]};
  if (dtype == static_cast<std::uint8_t>(DType::kFloat32)) {
    ImageVolume v(g, dims[3], spacing);
    for (auto& x : v.voxels) x = io::read_f32(in, "volume payload");
    return v;
  }
  LabelVolume v(g, dims[3], spacing);
  io::read_exact(in, reinterpret_cast<char*>(v.voxels.data()), v.voxels.size(), "volume payload");
  return v;
}

ImageVolume read_image(const std::string& path) {
  auto v = read_volume(path);
  if (auto* img = std::get_if<ImageVolume>(&v)) return std::move(*img);
  throw FormatError(FormatErrorKind::kBadHeader, path + " holds uint8 labels, expected a float32 image");
}

LabelVolume read_label(const std::string& path) {
  auto v = read_volume(path);
  if (auto* lab = std::get_if<LabelVolume>(&v)) return std::move(*lab);
  throw FormatError(FormatErrorKind::kBadHeader, path + " holds a float32 image, expected uint8 labels");
}

const std::vector<std::string>& Split::named(const std::string& split) const {
  if (split == "train") return train;
  if (split == "val") return val;
  if (split == "test") return test;
  throw ConfigError("unknown split '" + split + "' (expected train, val or test)");
}

Split make_split(const std::vector<std::string>& ids, std::uint64_t seed, SplitRatios ratios) {
  if (ratios.train <= 0 || ratios.val < 0 || ratios.test < 0 || ratios.train + ratios.val > 100) {
    throw ConfigError("split ratios need train > 0, val >= 0, test >= 0 and train + val <= 100");
  }
  const std::size_t n = ids.size();
  const std::size_t n_train = n * static_cast<std::size_t>(ratios.train) / 100;
  const std::size_t n_val = n * static_cast<std::size_t>(ratios.val) / 100;
  if (n_train == 0) throw ConfigError("split leaves no training cases");
  std::vector<std::string> order = ids;
  Rng rng(derive_seed(seed, "split"));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  Split s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
               order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  for (auto* part : {&s.train, &s.val, &s.test}) std::sort(part->begin(), part->end());
  return s;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot open " + path + " for writing");
  out << "case_id\timage\tlabel\tsplit\n";
  for (const auto& e : entries) out << e.id << '\t' << e.image << '\t' << e.label << '\t' << e.split << '\n';
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open manifest " + path);
  std::string line;
  if (!std::getline(in, line) || line != "case_id\timage\tlabel\tsplit") {
    throw FormatError(FormatErrorKind::kBadHeader, "manifest " + path + " lacks the expected header");
  }
  std::vector<ManifestEntry> entries;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::stringstream ss(line);
    ManifestEntry e;
    if (!std::getline(ss, e.id, '\t') || !std::getline(ss, e.image, '\t') || !std::getline(ss, e.label, '\t') ||
        !std::getline(ss, e.split)) {
      throw FormatError(FormatErrorKind::kBadHeader, "manifest row " + std::to_string(row) + " needs four fields");
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

const Case& Dataset::find(const std::string& id) const {
  for (const auto& c : cases)
    if (c.id == id) return c;
  throw ConfigError("dataset has no case '" + id + "'");
}

Dataset generate_dataset(const std::string& directory, const SynthSpec& spec, SplitRatios ratios) {
  spec.validate();
  fs::create_directories(fs::path(directory) / "images");
  fs::create_directories(fs::path(directory) / "labels");
  Dataset ds;
  ds.directory = directory;
  std::vector<std::string> ids;
  for (int i = 0; i < spec.count; ++i) {
    ds.cases.push_back(generate_case(spec, i));
    ids.push_back(ds.cases.back().id);
  }
  ds.split = make_split(ids, spec.seed, ratios);
  std::vector<ManifestEntry> entries;
  for (const auto& c : ds.cases) {
    ManifestEntry e{c.id, "images/" + c.id + ".cv2v", "labels/" + c.id + ".cv2v", "train"};
    if (std::binary_search(ds.split.val.begin(), ds.split.val.end(), c.id)) e.split = "val";
    if (std::binary_search(ds.split.test.begin(), ds.split.test.end(), c.id)) e.split = "test";
    write_volume((fs::path(directory) / e.image).string(), c.image);
    write_volume((fs::path(directory) / e.label).string(), c.label);
    entries.push_back(std::move(e));
  }
  write_manifest((fs::path(directory) / kManifestName).string(), entries);
  kv::Record rec = spec.to_record();
  rec["split_train"] = std::to_string(ratios.train);
  rec["split_val"] = std::to_string(ratios.val);
  rec["split_test"] = std::to_string(ratios.test);
  std::ofstream((fs::path(directory) / kSpecName).string()) << kv::format(rec);
  return ds;
}

Dataset load_dataset(const std::string& directory) {
  const auto entries = read_manifest((fs::path(directory) / kManifestName).string());
  Dataset ds;
  ds.directory = directory;
  for (const auto& e : entries) {
    Case c;
    c.id = e.id;
    c.image = read_image((fs::path(directory) / e.image).string());
    c.label = read_label((fs::path(directory) / e.label).string());
    if (!(c.image.dims == c.label.dims)) {
      throw FormatError(FormatErrorKind::kBadHeader, "case " + e.id + ": image and label extents differ");
    }
    std::vector<std::string>* part = nullptr;
    if (e.split == "train") part = &ds.split.train;
    else if (e.split == "val") part = &ds.split.val;
    else if (e.split == "test") part = &ds.split.test;
    else throw FormatError(FormatErrorKind::kBadHeader, "case " + e.id + " has unknown split '" + e.split + "'");
    part->push_back(e.id);
    ds.cases.push_back(std::move(c));
  }
  for (auto* part : {&ds.split.train, &ds.split.val, &ds.split.test}) std::sort(part->begin(), part->end());
  return ds;
}

}  // namespace cats::data
