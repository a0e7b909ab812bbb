#include "cats/oracles/checks.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>

#include "cats/data.hpp"
#include "cats/init.hpp"
#include "cats/oracles/oracles.hpp"
#include "cats/random.hpp"

namespace cats::checks {

namespace fs = std::filesystem;
namespace geo = cats::geometry;

bool SuiteReport::passed() const {
  return std::all_of(lines.begin(), lines.end(), [](const CheckLine& l) { return l.passed; });
}

ModelConfig micro_model_config() {
  ModelConfig c;
  c.input = {8, 8, 8};
  c.num_classes = 3;
  c.swin.patch = {1, 1, 1};
  c.swin.embed_dim = 4;
  c.swin.heads = {1, 2, 2, 4};
  c.swin.window = {2, 2, 2};
  c.swin.mlp_ratio = 2.0;
  c.cnn.levels = 4;
  c.cnn.base_channels = 4;
  c.seed = 5;
  c.finalize();
  return c;
}

namespace {

using Clock = std::chrono::steady_clock;

double elapsed(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

template <typename T>
Tensor<T> random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(scale * rng.normal());
  return t;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

geo::TokenGrid<int> iota_grid(GridDims dims, std::int64_t channels) {
  geo::TokenGrid<int> g(dims, channels);
  std::iota(g.values.begin(), g.values.end(), 0);
  return g;
}

// ---------------------------------------------------------------- geometry

SuiteReport geometry_suite(const SuiteOptions& opt) {
  SuiteReport r{"geometry", {}, 0.0};
  const auto start = Clock::now();
  Rng rng(derive_seed(opt.seed, "geometry"));

  constexpr int kRoundtrips = 120;
  int round_ok = 0, oracle_ok = 0;
  std::string round_fail;
  for (int n = 0; n < kRoundtrips; ++n) {
    Extent3 w{};
    GridDims dims;
    for (int a = 0; a < 3; ++a) {
      w[a] = 1 + static_cast<std::int64_t>(rng.below(4));
      dims[a] = 1 + static_cast<std::int64_t>(rng.below(12));
    }
    const auto spec = rng.below(2) ? geo::WindowSpec::shifted(w) : geo::WindowSpec::regular(w);
    const std::int64_t c = 1 + static_cast<std::int64_t>(rng.below(3));
    const auto grid = iota_grid(dims, c);
    const auto plan = swin::make_block_plan(dims, spec);
    const auto windows = geo::gather_rows<int>(grid.values, c, plan.to_windows);
    const auto back = geo::gather_rows<int>(windows, c, plan.from_windows);
    if (back == grid.values) {
      ++round_ok;
    } else if (round_fail.empty()) {
      round_fail = " first failure at dims " + to_string(dims);
    }

    GridDims exact;
    geo::Offset3 shift{};
    for (int a = 0; a < 3; ++a) {
      exact[a] = w[a] * (1 + static_cast<std::int64_t>(rng.below(3)));
      shift[a] = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(exact[a])));
    }
    const auto g2 = iota_grid(exact, c);
    const auto batch = geo::window_partition(g2, geo::WindowSpec::regular(w));
    const auto shifted = geo::cyclic_shift(g2, shift);
    const bool agree = batch.values == oracles::window_partition(g2, w) && geo::window_reverse(batch) == g2 &&
                       shifted == oracles::cyclic_shift(g2, shift) &&
                       geo::cyclic_shift(shifted, {-shift[0], -shift[1], -shift[2]}) == g2;
    oracle_ok += agree;
  }
  r.lines.push_back({"partition_roundtrip", round_ok == kRoundtrips,
                     std::to_string(round_ok) + "/" + std::to_string(kRoundtrips) +
                         " random (dims, window, shift) configs restore the grid exactly (padding included)" + round_fail});
  r.lines.push_back({"partition_vs_reference", oracle_ok == kRoundtrips,
                     std::to_string(oracle_ok) + "/" + std::to_string(kRoundtrips) +
                         " partitions, reverses and cyclic shifts equal the coordinate reference"});

  constexpr int kMasks = 60;
  int mask_ok = 0;
  bool anchor_ok = false;
  std::string mask_fail;
  const int fault = opt.inject_fault ? 1 : 0;
  for (int n = 0; n < kMasks; ++n) {
    Extent3 w{2, 2, 2};
    GridDims dims{4, 4, 4};
    if (n > 0) {
      for (int a = 0; a < 3; ++a) {
        w[a] = 1 + static_cast<std::int64_t>(rng.below(4));
        dims[a] = w[a] * (1 + static_cast<std::int64_t>(rng.below(4)));
      }
    }
    const auto spec = geo::WindowSpec::shifted(w);
    const auto got = geo::build_shift_mask(dims, spec);
    const auto want = oracles::shift_mask(dims, spec, fault);
    const bool equal = got.num_windows == want.num_windows && got.tokens == want.tokens && got.values == want.values;
    mask_ok += equal;
    if (n == 0) anchor_ok = equal;
    if (!equal && mask_fail.empty()) {
      mask_fail = "; first mismatch at dims " + to_string(dims) + " window " + std::to_string(w[0]) + "," +
                  std::to_string(w[1]) + "," + std::to_string(w[2]);
    }
  }
  r.lines.push_back({"shift_mask_vs_bruteforce", mask_ok == kMasks && anchor_ok,
                     std::to_string(mask_ok) + "/" + std::to_string(kMasks) +
                         " configs equal the wrap-flag oracle entry for entry, (4,4,4)/(2,2,2)/(1,1,1) " +
                         (anchor_ok ? "included" : "FAILED") + mask_fail});

  int pad_ok = 0;
  constexpr int kPadded = 20;
  for (int n = 0; n < kPadded; ++n) {
    Extent3 w{};
    GridDims dims;
    for (int a = 0; a < 3; ++a) {
      w[a] = 2 + static_cast<std::int64_t>(rng.below(3));
      dims[a] = 1 + static_cast<std::int64_t>(rng.below(9));
    }
    const auto spec = geo::WindowSpec::shifted(w);
    const auto pad = geo::pad_record(dims, spec);
    const auto mask = geo::build_attention_mask(pad, spec);
    // Every real/padded pair must be blocked.
    const GridDims p = pad.padded();
    std::vector<int> is_pad(static_cast<std::size_t>(p.count()));
    for (std::int64_t i = 0; i < p.d; ++i)
      for (std::int64_t j = 0; j < p.h; ++j)
        for (std::int64_t k = 0; k < p.w; ++k)
          is_pad[static_cast<std::size_t>(p.index(i, j, k))] =
              (i + spec.shift[0]) % p.d >= dims.d || (j + spec.shift[1]) % p.h >= dims.h ||
              (k + spec.shift[2]) % p.w >= dims.w;
    geo::TokenGrid<int> flags(p, 1);
    flags.values = is_pad;
    const auto per_window = oracles::window_partition(flags, spec.window);
    bool ok = true;
    const std::int64_t t = spec.tokens();
    for (std::int64_t win = 0; win < mask.num_windows; ++win)
      for (std::int64_t a = 0; a < t; ++a)
        for (std::int64_t b = 0; b < t; ++b)
          if (per_window[static_cast<std::size_t>(win * t + a)] != per_window[static_cast<std::size_t>(win * t + b)] &&
              mask.at(win, a, b) != static_cast<float>(geo::kMaskedLogit))
            ok = false;
    pad_ok += ok;
  }
  r.lines.push_back({"padded_tokens_isolated", pad_ok == kPadded,
                     std::to_string(pad_ok) + "/" + std::to_string(kPadded) + " padded grids block every real/padded pair"});

  r.seconds = elapsed(start);
  r.lines.push_back({"runtime", r.seconds < 30.0, fmt(r.seconds) + " s (limit 30 s)"});
  return r;
}

// --------------------------------------------------------------- attention

SuiteReport attention_suite(const SuiteOptions& opt) {
  SuiteReport r{"attention", {}, 0.0};
  const auto start = Clock::now();
  Rng rng(derive_seed(opt.seed, "attention"));

  double worst_row = 0.0, worst_masked = 0.0, worst_ref = 0.0;
  int masked_pairs = 0, windows_seen = 0;
  for (int n = 0; n < 12; ++n) {
    Extent3 w{};
    GridDims dims;
    for (int a = 0; a < 3; ++a) {
      w[a] = 1 + static_cast<std::int64_t>(rng.below(3));
      dims[a] = w[a] * (1 + static_cast<std::int64_t>(rng.below(2)));
    }
    const auto spec = geo::WindowSpec::shifted(w);
    const auto mask = geo::build_shift_mask(dims, spec);
    const auto rel = geo::relative_position_index(w);
    const std::int64_t heads = 1 + static_cast<std::int64_t>(rng.below(3));
    const std::int64_t c = heads * (1 + static_cast<std::int64_t>(rng.below(4)));
    const std::int64_t nw = mask.num_windows, t = mask.tokens;
    windows_seen += static_cast<int>(nw);

    auto qkv_d = random_tensor<double>(rng, {nw, t, 3 * c}, 2.0);
    auto table_d = random_tensor<double>(rng, {geo::relative_table_size(w), heads});
    Tensor<float> probs;
    ag::window_attention_core<float>(nullptr, ag::constant(qkv_d.cast<float>()), ag::constant(table_d.cast<float>()), rel,
                                     &mask, heads, &probs);
    for (std::int64_t win = 0; win < nw; ++win)
      for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t i = 0; i < t; ++i) {
          double total = 0.0;
          for (std::int64_t j = 0; j < t; ++j) {
            const double p = probs[((win * heads + h) * t + i) * t + j];
            total += p;
            if (mask.at(win, i, j) != 0.0f) {
              worst_masked = std::max(worst_masked, p);
              ++masked_pairs;
            }
          }
          worst_row = std::max(worst_row, std::abs(total - 1.0));
        }

    const auto out = ag::window_attention_core<double>(nullptr, ag::constant(qkv_d), ag::constant(table_d), rel, &mask,
                                                       heads);
    for (std::int64_t win = 0; win < nw; ++win) {
      Tensor<double> one(Shape{t, 3 * c}, std::vector<double>(qkv_d.data() + win * t * 3 * c,
                                                              qkv_d.data() + (win + 1) * t * 3 * c));
      std::vector<double> m(mask.values.begin() + win * t * t, mask.values.begin() + (win + 1) * t * t);
      const auto ref = oracles::attention(one, table_d, w, m, heads);
      worst_ref = std::max(worst_ref, max_abs_diff(ref.values(), std::span<const double>(out->value.data() + win * t * c,
                                                                                         static_cast<std::size_t>(t * c))));
    }
  }
  r.lines.push_back({"softmax_rows", worst_row < 1e-5, "max |row sum - 1| = " + fmt(worst_row) + " (limit 1e-5)"});
  r.lines.push_back({"masked_weights", worst_masked < 1e-8 && masked_pairs > 0,
                     "max weight on " + std::to_string(masked_pairs) + " masked pairs = " + fmt(worst_masked) +
                         " (limit 1e-8)"});
  r.lines.push_back({"matches_reference", worst_ref < 1e-10,
                     "max |attention - explicit reference| = " + fmt(worst_ref) + " over " +
                         std::to_string(windows_seen) + " windows (double)"});

  // Permutation equivariance with bias and mask off.
  const std::int64_t heads = 2, c = 8, t = 8, nw = 24;
  ag::ParameterSet<float> params;
  const auto weights = swin::make_block_weights(params, "perm", c, heads, {2, 2, 2}, 2.0, false, opt.seed);
  for (const auto& [name, v] : params.items())
    for (auto& x : v->value.values()) x += static_cast<float>(0.3 * rng.normal());
  auto x = random_tensor<float>(rng, {nw, t, c});
  std::vector<std::int64_t> perm(static_cast<std::size_t>(nw * t));
  Tensor<float> xp(x.shape());
  for (std::int64_t win = 0; win < nw; ++win) {
    std::vector<std::int64_t> p(static_cast<std::size_t>(t));
    std::iota(p.begin(), p.end(), 0);
    for (std::size_t i = p.size(); i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
    for (std::int64_t i = 0; i < t; ++i) {
      perm[static_cast<std::size_t>(win * t + i)] = win * t + p[static_cast<std::size_t>(i)];
      std::copy_n(x.data() + (win * t + p[static_cast<std::size_t>(i)]) * c, c, xp.data() + (win * t + i) * c);
    }
  }
  const auto y = swin::window_attention<float>(nullptr, ag::constant(x), nullptr, weights, heads, {});
  const auto yp = swin::window_attention<float>(nullptr, ag::constant(xp), nullptr, weights, heads, {});
  double worst_perm = 0.0;
  for (std::int64_t row = 0; row < nw * t; ++row)
    for (std::int64_t ch = 0; ch < c; ++ch)
      worst_perm = std::max(worst_perm, std::abs(static_cast<double>(yp->value[row * c + ch]) -
                                                 y->value[perm[static_cast<std::size_t>(row)] * c + ch]));
  r.lines.push_back({"permutation_equivariance", worst_perm < 1e-6,
                     "max |f(Px) - P f(x)| = " + fmt(worst_perm) + " on " + std::to_string(nw) +
                         " windows (limit 1e-6)"});
  r.seconds = elapsed(start);
  return r;
}

// ----------------------------------------------------------------- kernels

SuiteReport kernels_suite(const SuiteOptions& opt) {
  SuiteReport r{"kernels", {}, 0.0};
  const auto start = Clock::now();
  Rng rng(derive_seed(opt.seed, "kernels"));
  double conv = 0.0, tconv = 0.0, merge = 0.0;
  for (int n = 0; n < 8; ++n) {
    const std::int64_t D = 2 + rng.below(4), H = 2 + rng.below(4), W = 2 + rng.below(4);
    const std::int64_t cin = 1 + rng.below(3), cout = 1 + rng.below(3);
    const std::int64_t k = 1 + 2 * static_cast<std::int64_t>(rng.below(3));
    auto x = random_tensor<double>(rng, {D, H, W, cin});
    auto w = random_tensor<double>(rng, {k * k * k * cin, cout});
    auto b = random_tensor<double>(rng, {cout});
    auto y = ag::conv3d<double>(nullptr, ag::constant(x), ag::constant(w), ag::constant(b), k);
    conv = std::max(conv, max_abs_diff(y->value.values(), oracles::conv3d(x, w, b, k).values()));

    auto wt = random_tensor<double>(rng, {cin, 8 * cout});
    auto yt = ag::conv_transpose2<double>(nullptr, ag::constant(x), ag::constant(wt), ag::constant(b));
    tconv = std::max(tconv, max_abs_diff(yt->value.values(), oracles::conv_transpose2(x, wt, b).values()));
    tconv = std::max(tconv, max_abs_diff(yt->value.values(), oracles::conv_transpose2_zero_stuffed(x, wt, b).values()));

    auto xm = random_tensor<double>(rng, {2 * D, 2 * H, 2 * W, cin});
    auto wm = random_tensor<double>(rng, {8 * cin, 2 * cin});
    auto ym = swin::patch_merge_reduce<double>(nullptr, ag::constant(xm), ag::constant(wm));
    merge = std::max(merge, max_abs_diff(ym->value.values(), oracles::patch_merge(xm, wm).values()));
  }
  r.lines.push_back({"conv3d", conv < 1e-6, "max |conv - direct sum| = " + fmt(conv) + " (limit 1e-6)"});
  r.lines.push_back({"conv_transpose2", tconv < 1e-6, "max |transposed conv - scatter and zero-insertion references| = " + fmt(tconv)});
  r.lines.push_back({"patch_merge", merge < 1e-6, "max |merge + reduce - explicit concat| = " + fmt(merge)});
  r.seconds = elapsed(start);
  return r;
}

// --------------------------------------------------------------- gradients

SuiteReport gradients_suite(const SuiteOptions& opt) {
  SuiteReport r{"gradients", {}, 0.0};
  const auto start = Clock::now();
  Rng rng(derive_seed(opt.seed, "gradients"));
  constexpr int kSamples = 60;
  constexpr double kLimit = 1e-4;

  {
    ag::ParameterSet<double> params;
    const std::int64_t c = 6, heads = 2;
    const GridDims dims{4, 4, 4};
    const auto spec = geo::WindowSpec::shifted({2, 2, 2});
    const auto weights = swin::make_block_weights(params, "block", c, heads, spec.window, 2.0, true, opt.seed);
    auto input = params.add("input", random_tensor<double>(rng, {dims.d, dims.h, dims.w, c}));
    for (const auto& [name, v] : params.items())
      if (name != "input")
        for (auto& x : v->value.values()) x += 0.2 * rng.normal();
    const auto plan = swin::make_block_plan(dims, spec);
    auto readout = ag::constant(random_tensor<double>(rng, {c, 1}));
    auto loss = [&](ag::Tape<double>* tape) {
      auto y = swin::swin_block(tape, input, plan, weights, heads);
      return ag::sum(tape, ag::linear(tape, y, readout, ag::Var<double>{}));
    };
    const auto g = oracles::check_gradients(params, loss, kSamples, opt.seed);
    r.lines.push_back({"micro_swin_block", g.max_relative_error < kLimit && g.sampled >= 50,
                       "max rel error " + fmt(g.max_relative_error) + " over " + std::to_string(g.sampled) +
                           " parameters (limit 1e-4), worst " + g.worst});
  }
  {
    CatsModel<double> model(micro_model_config());
    for (const auto& [name, v] : model.parameters().items())
      for (auto& x : v->value.values()) x += 0.05 * rng.normal();
    ImageVolume volume({8, 8, 8}, 1);
    for (auto& v : volume.voxels) v = static_cast<float>(rng.uniform());
    LabelVolume labels({8, 8, 8}, 1);
    for (auto& v : labels.voxels) v = static_cast<std::uint8_t>(rng.below(3));
    const auto input = volume_variable<double>(volume);
    auto loss_fn = [&](ag::Tape<double>* tape) { return loss(tape, model.forward(tape, input), labels); };
    const auto g = oracles::check_gradients(model.parameters(), loss_fn, kSamples, opt.seed + 1);
    r.lines.push_back({"micro_model", g.max_relative_error < kLimit && g.sampled >= 50,
                       "max rel error " + fmt(g.max_relative_error) + " over " + std::to_string(g.sampled) +
                           " parameters, " + std::to_string(g.replaced) + " non-smooth samples redrawn, worst " + g.worst});
  }
  r.seconds = elapsed(start);
  r.lines.push_back({"runtime", r.seconds < 300.0, fmt(r.seconds) + " s (limit 300 s)"});
  return r;
}

// ----------------------------------------------------------------- metrics

metrics::Mask random_mask(Rng& rng, GridDims dims) {
  metrics::Mask m(dims, 1);
  const int blobs = static_cast<int>(rng.below(3));
  for (int b = 0; b < blobs; ++b) {
    double c[3], rad[3];
    for (int a = 0; a < 3; ++a) {
      c[a] = rng.uniform(0.0, static_cast<double>(dims[a]));
      rad[a] = rng.uniform(0.5, std::max(1.0, dims[a] / 2.0));
    }
    for (std::int64_t i = 0; i < dims.d; ++i)
      for (std::int64_t j = 0; j < dims.h; ++j)
        for (std::int64_t k = 0; k < dims.w; ++k) {
          const double q = std::pow((i - c[0]) / rad[0], 2) + std::pow((j - c[1]) / rad[1], 2) +
                           std::pow((k - c[2]) / rad[2], 2);
          if (q <= 1.0) m.at(i, j, k) = 1;
        }
  }
  const std::uint64_t speckle = rng.below(6);
  for (std::uint64_t s = 0; s < speckle; ++s)
    m.voxels[rng.below(m.voxels.size())] = 1;
  return m;
}

SuiteReport metrics_suite(const SuiteOptions& opt) {
  SuiteReport r{"metrics", {}, 0.0};
  const auto start = Clock::now();
  Rng rng(derive_seed(opt.seed, "metrics"));
  const double spacings[] = {0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 2.5};
  constexpr int kPairs = 60;
  int equal = 0, defined = 0, law = 0;
  std::string fail;
  for (int n = 0; n < kPairs; ++n) {
    GridDims dims;
    for (int a = 0; a < 3; ++a) dims[a] = 2 + static_cast<std::int64_t>(rng.below(15));
    const Spacing sp{spacings[rng.below(7)], spacings[rng.below(7)], spacings[rng.below(7)]};
    const auto p = random_mask(rng, dims);
    const auto g = random_mask(rng, dims);
    const auto a1 = metrics::asd(p, g, sp), a2 = oracles::asd(p, g, sp);
    const auto h1 = metrics::hd95(p, g, sp), h2 = oracles::hd95(p, g, sp);
    const bool same = metrics::dice(p, g, 1) == oracles::dice(p, g, 1) && a1 == a2 && h1 == h2;
    equal += same;
    defined += a1.has_value();
    if (!same && fail.empty()) fail = "; first mismatch at dims " + to_string(dims);

    for (double c : {2.0, 0.5, 4.0}) {
      const Spacing scaled{sp.d * c, sp.h * c, sp.w * c};
      const auto as = metrics::asd(p, g, scaled), hs = metrics::hd95(p, g, scaled);
      const bool ok = (!a1 || (as && *as == c * *a1)) && (!h1 || (hs && *hs == c * *h1)) &&
                      metrics::dice(p, g, 1) == metrics::dice(p, g, 1);
      law += ok;
    }
  }
  r.lines.push_back({"bruteforce_equality", equal == kPairs,
                     std::to_string(equal) + "/" + std::to_string(kPairs) + " random mask pairs (<=16^3, " +
                         std::to_string(defined) + " with both surfaces) give identical Dice, ASD and HD95" + fail});
  r.lines.push_back({"spacing_law", law == 3 * kPairs,
                     std::to_string(law) + "/" + std::to_string(3 * kPairs) +
                         " rescalings by 2, 0.5 and 4 scale ASD and HD95 exactly and keep Dice"});
  r.seconds = elapsed(start);
  r.lines.push_back({"runtime", r.seconds < 60.0, fmt(r.seconds) + " s (limit 60 s)"});
  return r;
}

// ---------------------------------------------------------------------- io

template <typename F>
bool throws_kind(F&& f, FormatErrorKind kind) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.kind() == kind;
  } catch (...) {
    return false;
  }
  return false;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary | std::ios::trunc).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

SuiteReport io_suite(const SuiteOptions& opt) {
  SuiteReport r{"io", {}, 0.0};
  const auto start = Clock::now();
  Rng rng(derive_seed(opt.seed, "io"));
  const fs::path dir = fs::temp_directory_path() / ("catsv2-io-" + std::to_string(rng.next_u64()));
  fs::create_directories(dir);

  ImageVolume img({4, 4, 4}, 1, {1.0, 1.5, 2.5});
  for (auto& v : img.voxels) v = static_cast<float>(rng.normal());
  const fs::path ip = dir / "image.cv2v";
  data::write_volume(ip.string(), img);
  const std::string bytes = read_bytes(ip);
  bool header = bytes.size() == 32 + 256 && bytes.compare(0, 4, "CV2V") == 0 && bytes[4] == 1 && bytes[5] == 0 &&
                bytes[6] == 0 && bytes[7] == 3 && bytes[8] == 4 && bytes[12] == 4 && bytes[16] == 4;
  float sp0 = 0;
  std::memcpy(&sp0, bytes.data() + 24, 4);
  header = header && sp0 == 1.5f;
  const auto back = data::read_image(ip.string());
  const bool image_rt = back.dims == img.dims && back.spacing == img.spacing &&
                        std::memcmp(back.voxels.data(), img.voxels.data(), img.voxels.size() * sizeof(float)) == 0;
  r.lines.push_back({"cv2v_header", header, "(4,4,4) float volume: 32-byte header + 256 payload bytes, file " +
                                                std::to_string(bytes.size()) + " bytes"});

  LabelVolume lab({3, 5, 2}, 1, {0.5, 0.5, 3.0});
  for (auto& v : lab.voxels) v = static_cast<std::uint8_t>(rng.below(3));
  data::write_volume((dir / "label.cv2v").string(), lab);
  ImageVolume multi({2, 3, 4}, 2);
  for (auto& v : multi.voxels) v = static_cast<float>(rng.uniform());
  data::write_volume((dir / "multi.cv2v").string(), multi);
  const bool others = data::read_label((dir / "label.cv2v").string()) == lab &&
                      data::read_image((dir / "multi.cv2v").string()) == multi;
  r.lines.push_back({"cv2v_roundtrip", image_rt && others, "float, uint8 and 4-D volumes read back bit-identical"});

  std::string bad = bytes;
  bad[0] = 'X';
  write_bytes(dir / "magic.cv2v", bad);
  bad = bytes;
  bad[4] = 9;
  write_bytes(dir / "version.cv2v", bad);
  write_bytes(dir / "short.cv2v", bytes.substr(0, bytes.size() - 5));
  const bool kinds =
      throws_kind([&] { data::read_volume((dir / "magic.cv2v").string()); }, FormatErrorKind::kBadMagic) &&
      throws_kind([&] { data::read_volume((dir / "version.cv2v").string()); }, FormatErrorKind::kBadVersion) &&
      throws_kind([&] { data::read_volume((dir / "short.cv2v").string()); }, FormatErrorKind::kTruncated);
  r.lines.push_back({"cv2v_error_kinds", kinds, "bad magic, bad version and truncation raise distinct error kinds"});

  CatsModel<float> model(micro_model_config());
  for (const auto& [name, v] : model.parameters().items())
    for (auto& x : v->value.values()) x += static_cast<float>(0.05 * rng.normal());
  ImageVolume vol({8, 8, 8}, 1);
  for (auto& v : vol.voxels) v = static_cast<float>(rng.uniform());
  const auto ckpt_path = (dir / "model.ckpt").string();
  write_checkpoint(ckpt_path, make_checkpoint(model, 17, {{"note", "io-suite"}}));
  const auto loaded = read_checkpoint(ckpt_path);
  CatsModel<float> copy(loaded.config);
  load_weights(copy, loaded);
  const auto a = model.forward(nullptr, vol);
  const auto b = copy.forward(nullptr, vol);
  const bool ckpt = loaded.step == 17 && loaded.config.to_record() == model.config().to_record() &&
                    loaded.metadata.count("note") && a->value == b->value;
  r.lines.push_back({"checkpoint_roundtrip", ckpt, "save -> load -> forward reproduces logits bit for bit"});

  fs::remove_all(dir);
  r.seconds = elapsed(start);
  return r;
}

// ------------------------------------------------------------------- model

SuiteReport model_suite(const SuiteOptions& opt) {
  SuiteReport r{"model", {}, 0.0};
  const auto start = Clock::now();
  Rng rng(derive_seed(opt.seed, "model"));
  ModelConfig hc;
  hc.input = {16, 16, 16};
  hc.num_classes = 3;
  hc.swin.embed_dim = 6;
  hc.swin.heads = {1, 2, 3, 6};
  hc.swin.window = {2, 2, 2};
  hc.cnn.levels = 4;
  hc.cnn.base_channels = 4;
  hc.seed = opt.seed;
  ModelConfig cc = hc;
  cc.mode = ModelMode::kCnnOnly;
  CatsModel<float> hybrid(hc);
  CatsModel<float> cnn_only(cc);
  for (const auto& [name, v] : hybrid.parameters().items())
    if (name.rfind("swin.", 0) == 0 || name.rfind("fuse.", 0) == 0) v->value.fill(0.0f);
  ImageVolume vol(hc.input, 1);
  for (auto& v : vol.voxels) v = static_cast<float>(rng.uniform());
  const auto a = hybrid.forward(nullptr, vol);
  const auto b = cnn_only.forward(nullptr, vol);
  const bool bit_equal = a->value.shape() == b->value.shape() &&
                         std::memcmp(a->value.data(), b->value.data(), sizeof(float) * a->value.size()) == 0;
  r.lines.push_back({"zero_tap_equivalence", bit_equal,
                     "hybrid with zeroed transformer path and projections vs cnn_only: " +
                         std::string(bit_equal ? "bit-equal" : "differs")});
  const auto again = hybrid.forward(nullptr, vol);
  r.lines.push_back({"deterministic_forward", again->value == a->value, "repeated forward gives identical logits"});
  r.seconds = elapsed(start);
  return r;
}

}  // namespace

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = {"geometry", "attention", "kernels", "gradients",
                                                 "metrics",  "io",        "model"};
  return names;
}

SuiteReport run_suite(const std::string& name, const SuiteOptions& options) {
  static const std::map<std::string, std::function<SuiteReport(const SuiteOptions&)>> suites = {
      {"geometry", geometry_suite}, {"attention", attention_suite}, {"kernels", kernels_suite},
      {"gradients", gradients_suite}, {"metrics", metrics_suite},   {"io", io_suite},
      {"model", model_suite}};
  const auto it = suites.find(name);
  if (it == suites.end()) {
    std::string known;
    for (const auto& n : suite_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown check suite '" + name + "' (expected one of " + known + ")");
  }
  return it->second(options);
}

std::string render(const SuiteReport& report) {
  std::ostringstream out;
  for (const auto& l : report.lines) {
    out << (l.passed ? "PASS " : "FAIL ") << report.suite << "." << l.name << ": " << l.detail << "\n";
  }
  return out.str();
}

}  // namespace cats::checks
