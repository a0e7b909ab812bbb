#include "cats/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace cats::metrics {

namespace {

void require_same_dims(const GridDims& a, const GridDims& b, const char* what) {
  if (!(a == b)) {
    throw PreconditionError(std::string(what) + ": dims " + to_string(a) + " and " + to_string(b) + " differ");
  }
}

bool foreground(const Mask& m, std::int64_t i, std::int64_t j, std::int64_t k) {
  if (i < 0 || j < 0 || k < 0 || i >= m.dims.d || j >= m.dims.h || k >= m.dims.w) return false;
  return m.at(i, j, k) != 0;
}

}  // namespace

std::array<double, 3> SurfaceSet::point(std::size_t i) const {
  const auto& v = voxels[i];
  return {static_cast<double>(v[0]) * spacing.d, static_cast<double>(v[1]) * spacing.h,
          static_cast<double>(v[2]) * spacing.w};
}

Mask class_mask(const LabelVolume& labels, std::uint8_t k) {
  Mask m(labels.dims, 1, labels.spacing);
  std::transform(labels.voxels.begin(), labels.voxels.end(), m.voxels.begin(),
                 [k](std::uint8_t v) { return static_cast<std::uint8_t>(v == k); });
  return m;
}

double dice(const LabelVolume& pred, const LabelVolume& gt, std::uint8_t k) {
  require_same_dims(pred.dims, gt.dims, "dice");
  std::int64_t a = 0, b = 0, both = 0;
  for (std::size_t v = 0; v < pred.voxels.size(); ++v) {
    const bool p = pred.voxels[v] == k;
    const bool g = gt.voxels[v] == k;
    a += p;
    b += g;
    both += p && g;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

SurfaceSet extract_surface(const Mask& mask, Spacing spacing) {
  SurfaceSet s;
  s.dims = mask.dims;
  s.spacing = spacing;
  for (std::int64_t i = 0; i < mask.dims.d; ++i)
    for (std::int64_t j = 0; j < mask.dims.h; ++j)
      for (std::int64_t k = 0; k < mask.dims.w; ++k) {
        if (!foreground(mask, i, j, k)) continue;
        const bool interior = foreground(mask, i - 1, j, k) && foreground(mask, i + 1, j, k) &&
                              foreground(mask, i, j - 1, k) && foreground(mask, i, j + 1, k) &&
                              foreground(mask, i, j, k - 1) && foreground(mask, i, j, k + 1);
        if (!interior) s.voxels.push_back({i, j, k});
      }
  return s;
}

double voxel_distance(std::int64_t di, std::int64_t dj, std::int64_t dk, Spacing spacing) noexcept {
  const double a = static_cast<double>(di) * spacing.d;
  const double b = static_cast<double>(dj) * spacing.h;
  const double c = static_cast<double>(dk) * spacing.w;
  return std::sqrt(a * a + b * b + c * c);
}

std::vector<double> directed_distances(const SurfaceSet& from, const SurfaceSet& to) {
  require_same_dims(from.dims, to.dims, "directed_distances");
  std::vector<double> out;
  if (from.empty() || to.empty()) return out;
  const GridDims g = to.dims;
  std::vector<std::uint8_t> occupied(static_cast<std::size_t>(g.count()), 0);
  for (const auto& v : to.voxels) occupied[static_cast<std::size_t>(g.index(v[0], v[1], v[2]))] = 1;
  const Spacing sp = to.spacing;
  const double min_spacing = std::min({sp.d, sp.h, sp.w});
  const std::int64_t max_radius = std::max({g.d, g.h, g.w});
  out.reserve(from.size());
  // Expanding Chebyshev shells; every voxel beyond shell r is at least
  // (r + 1) * min_spacing away, which bounds the search.
  for (const auto& q : from.voxels) {
    double best = std::numeric_limits<double>::infinity();
    for (std::int64_t r = 0; r <= max_radius; ++r) {
      for (std::int64_t di = -r; di <= r; ++di) {
        const std::int64_t i = q[0] + di;
        if (i < 0 || i >= g.d) continue;
        for (std::int64_t dj = -r; dj <= r; ++dj) {
          const std::int64_t j = q[1] + dj;
          if (j < 0 || j >= g.h) continue;
          const bool face = std::abs(di) == r || std::abs(dj) == r;
          const std::int64_t step = face ? 1 : std::max<std::int64_t>(2 * r, 1);
          for (std::int64_t dk = -r; dk <= r; dk += step) {
            const std::int64_t k = q[2] + dk;
            if (k < 0 || k >= g.w || !occupied[static_cast<std::size_t>(g.index(i, j, k))]) continue;
            best = std::min(best, voxel_distance(di, dj, dk, sp));
          }
        }
      }
      if (best <= static_cast<double>(r + 1) * min_spacing) break;
    }
    out.push_back(best);
  }
  return out;
}

std::vector<double> surface_distances(const Mask& pred, const Mask& gt, Spacing spacing) {
  require_same_dims(pred.dims, gt.dims, "surface_distances");
  const auto sp = extract_surface(pred, spacing);
  const auto sg = extract_surface(gt, spacing);
  if (sp.empty() || sg.empty()) return {};
  auto pooled = directed_distances(sp, sg);
  const auto back = directed_distances(sg, sp);
  pooled.insert(pooled.end(), back.begin(), back.end());
  return pooled;
}

namespace {

// Each direction is summed on its own so that swapping pred and gt only swaps
// the two partial sums.
double pooled_mean(const std::vector<double>& d, std::size_t forward) {
  double a = 0.0, b = 0.0;
  for (std::size_t i = 0; i < forward; ++i) a += d[i];
  for (std::size_t i = forward; i < d.size(); ++i) b += d[i];
  return (a + b) / static_cast<double>(d.size());
}

}  // namespace

std::optional<double> asd(const Mask& pred, const Mask& gt, Spacing spacing) {
  const auto d = surface_distances(pred, gt, spacing);
  if (d.empty()) return std::nullopt;
  return pooled_mean(d, extract_surface(pred, spacing).size());
}

std::optional<double> hd95(const Mask& pred, const Mask& gt, Spacing spacing) {
  auto d = surface_distances(pred, gt, spacing);
  if (d.empty()) return std::nullopt;
  return percentile(std::move(d), 95);
}

double percentile(std::vector<double> values, int p) {
  if (values.empty()) throw PreconditionError("percentile: no values");
  if (p < 0 || p > 100) throw PreconditionError("percentile: p must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const std::int64_t scaled = static_cast<std::int64_t>(values.size() - 1) * p;
  const std::size_t lo = static_cast<std::size_t>(scaled / 100);
  const double frac = static_cast<double>(scaled % 100) / 100.0;
  if (lo + 1 >= values.size()) return values[lo];
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

CaseMetrics evaluate_case(const std::string& case_id, const LabelVolume& pred, const LabelVolume& gt,
                          int num_classes) {
  require_same_dims(pred.dims, gt.dims, "evaluate_case");
  CaseMetrics c;
  c.case_id = case_id;
  for (int k = 1; k < num_classes; ++k) {
    const auto label = static_cast<std::uint8_t>(k);
    const Mask p = class_mask(pred, label);
    const Mask g = class_mask(gt, label);
    ClassMetrics m;
    m.dice = dice(pred, gt, label);
    auto d = surface_distances(p, g, gt.spacing);
    if (!d.empty()) {
      m.asd_mm = pooled_mean(d, extract_surface(p, gt.spacing).size());
      m.hd95_mm = percentile(std::move(d), 95);
    }
    c.classes.push_back(m);
  }
  return c;
}

Summary summarize(const std::vector<std::optional<double>>& values) {
  Summary s;
  double total = 0.0;
  for (const auto& v : values) {
    if (!v) {
      ++s.excluded;
      continue;
    }
    total += *v;
    ++s.count;
  }
  if (s.count == 0) return s;
  s.mean = total / s.count;
  double sq = 0.0;
  for (const auto& v : values)
    if (v) sq += (*v - s.mean) * (*v - s.mean);
  s.std = std::sqrt(sq / s.count);
  return s;
}

MetricsReport aggregate(std::vector<CaseMetrics> cases, int num_classes, std::vector<std::string> errors) {
  if (cases.empty()) throw PreconditionError("aggregate: no cases to summarise");
  MetricsReport r;
  r.num_classes = num_classes;
  r.cases = std::move(cases);
  r.errors = std::move(errors);
  const std::size_t fg = static_cast<std::size_t>(num_classes - 1);
  for (const auto& c : r.cases) {
    if (c.classes.size() != fg) {
      throw PreconditionError("aggregate: case " + c.case_id + " has " + std::to_string(c.classes.size()) +
                              " class rows, expected " + std::to_string(fg));
    }
  }
  std::vector<std::optional<double>> od, oa, oh;
  for (std::size_t k = 0; k < fg; ++k) {
    std::vector<std::optional<double>> d, a, h;
    for (const auto& c : r.cases) {
      d.push_back(c.classes[k].dice);
      a.push_back(c.classes[k].asd_mm);
      h.push_back(c.classes[k].hd95_mm);
    }
    r.per_class.push_back({summarize(d), summarize(a), summarize(h)});
  }
  auto case_mean = [](const std::vector<std::optional<double>>& v) -> std::optional<double> {
    const Summary s = summarize(v);
    if (s.count == 0) return std::nullopt;
    return s.mean;
  };
  for (const auto& c : r.cases) {
    std::vector<std::optional<double>> d, a, h;
    for (const auto& m : c.classes) {
      d.push_back(m.dice);
      a.push_back(m.asd_mm);
      h.push_back(m.hd95_mm);
    }
    od.push_back(case_mean(d));
    oa.push_back(case_mean(a));
    oh.push_back(case_mean(h));
  }
  r.overall = {summarize(od), summarize(oa), summarize(oh)};
  return r;
}

std::string format_mean_std(const Summary& s, int decimals) {
  if (s.count == 0) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f (%.*f)", decimals, s.mean, decimals, s.std);
  return buf;
}

std::string render_summary(const MetricsReport& report) {
  std::ostringstream out;
  auto line = [&](const std::string& name, const ClassSummary& s) {
    out << name << "  dice " << format_mean_std(s.dice, 3) << "  asd_mm " << format_mean_std(s.asd_mm, 2)
        << "  hd95_mm " << format_mean_std(s.hd95_mm, 2);
    if (s.asd_mm.excluded > 0) out << "  (" << s.asd_mm.excluded << " undefined)";
    out << "\n";
  };
  for (std::size_t k = 0; k < report.per_class.size(); ++k) line("class " + std::to_string(k + 1), report.per_class[k]);
  line("overall", report.overall);
  out << "cases " << report.cases.size() << "  errors " << report.errors.size() << "\n";
  for (const auto& e : report.errors) out << "error " << e << "\n";
  return out.str();
}

std::string render_csv(const MetricsReport& report) {
  std::ostringstream out;
  out << "case_id,class,dice,asd_mm,hd95_mm\n";
  char buf[64];
  auto num = [&](std::optional<double> v) -> std::string {
    if (!v) return "nan";
    std::snprintf(buf, sizeof buf, "%.17g", *v);
    return buf;
  };
  for (const auto& c : report.cases)
    for (std::size_t k = 0; k < c.classes.size(); ++k)
      out << c.case_id << "," << k + 1 << "," << num(c.classes[k].dice) << "," << num(c.classes[k].asd_mm) << ","
          << num(c.classes[k].hd95_mm) << "\n";
  return out.str();
}

}  // namespace cats::metrics
