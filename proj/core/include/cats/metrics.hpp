#pragma once

// Volumetric overlap and surface-distance metrics with mean (std) reporting.
//
// Surfaces use 6-connectivity: a foreground voxel is on the surface when any
// face neighbour is background or lies outside the grid. Distances are between
// voxel centres, sqrt((di*sd)^2 + (dj*sh)^2 + (dk*sw)^2) for integer index
// offsets (di, dj, dk), evaluated in that order.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cats/volume.hpp"

namespace cats::metrics {

// Any nonzero voxel is foreground.
using Mask = LabelVolume;

struct SurfaceSet {
  GridDims dims;
  Spacing spacing;
  std::vector<Extent3> voxels;  // raster order

  std::size_t size() const noexcept { return voxels.size(); }
  bool empty() const noexcept { return voxels.empty(); }
  // Physical centre of voxel i in millimetres.
  std::array<double, 3> point(std::size_t i) const;
};

// Binary mask of label `k`.
Mask class_mask(const LabelVolume& labels, std::uint8_t k);

// 2|A n B| / (|A| + |B|) on class k; 1 when both are empty.
double dice(const LabelVolume& pred, const LabelVolume& gt, std::uint8_t k);

SurfaceSet extract_surface(const Mask& mask, Spacing spacing);

double voxel_distance(std::int64_t di, std::int64_t dj, std::int64_t dk, Spacing spacing) noexcept;

// Nearest-surface distance from every voxel of `from` (raster order) to `to`.
std::vector<double> directed_distances(const SurfaceSet& from, const SurfaceSet& to);

// Pooled bidirectional distances: pred->gt in pred raster order, then gt->pred.
// Empty when either surface is empty.
std::vector<double> surface_distances(const Mask& pred, const Mask& gt, Spacing spacing);

// Both return nullopt ("undefined") when either mask is empty.
std::optional<double> asd(const Mask& pred, const Mask& gt, Spacing spacing);
std::optional<double> hd95(const Mask& pred, const Mask& gt, Spacing spacing);

// Linear interpolation between closest ranks over the sorted values: position
// (n - 1) * p / 100, lower rank plus fraction times the gap. Requires n >= 1.
double percentile(std::vector<double> values, int p);

struct ClassMetrics {
  double dice = 0.0;
  std::optional<double> asd_mm;
  std::optional<double> hd95_mm;
};

struct CaseMetrics {
  std::string case_id;
  std::vector<ClassMetrics> classes;  // foreground classes 1..K-1
};

// Evaluates every foreground class; spacing comes from `gt`.
CaseMetrics evaluate_case(const std::string& case_id, const LabelVolume& pred, const LabelVolume& gt,
                          int num_classes);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population
  int count = 0;
  int excluded = 0;  // undefined values left out
};

struct ClassSummary {
  Summary dice, asd_mm, hd95_mm;
};

struct MetricsReport {
  int num_classes = 2;
  std::vector<CaseMetrics> cases;
  std::vector<std::string> errors;  // "case_id: message" for cases that could not be scored
  std::vector<ClassSummary> per_class;
  // Per case the mean over foreground classes (defined values only), then
  // summarised across cases.
  ClassSummary overall;

  double mean_dice() const noexcept { return overall.dice.mean; }
};

Summary summarize(const std::vector<std::optional<double>>& values);

// Throws PreconditionError on an empty case list.
MetricsReport aggregate(std::vector<CaseMetrics> cases, int num_classes, std::vector<std::string> errors = {});

// "0.886 (0.076)" for Dice, two decimals for distances.
std::string format_mean_std(const Summary& s, int decimals);

// Human-readable summary, one line per class plus an overall line.
std::string render_summary(const MetricsReport& report);

// Machine-readable table. Columns: case_id,class,dice,asd_mm,hd95_mm with
// "nan" for undefined distances; one row per case and foreground class.
std::string render_csv(const MetricsReport& report);

}  // namespace cats::metrics
