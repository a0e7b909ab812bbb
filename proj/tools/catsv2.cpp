// catsv2: dataset generation, training, evaluation, ablation, prediction and
// oracle checks from the command line.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "cats/data.hpp"
#include "cats/harness.hpp"
#include "cats/oracles/checks.hpp"

namespace fs = std::filesystem;
using namespace cats;

namespace {

// Exit codes: 0 success, 1 runtime or check failure, 2 usage error.
constexpr int kFailure = 1;
constexpr int kUsage = 2;

std::string error_kind(const std::exception& e) {
  if (const auto* f = dynamic_cast<const FormatError*>(&e)) {
    switch (f->kind()) {
      case FormatErrorKind::kBadMagic: return "bad_magic";
      case FormatErrorKind::kBadVersion: return "bad_version";
      case FormatErrorKind::kBadHeader: return "bad_header";
      case FormatErrorKind::kTruncated: return "truncated";
      case FormatErrorKind::kIo: return "io";
    }
  }
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const DivergenceError*>(&e)) return "divergence";
  if (dynamic_cast<const PreconditionError*>(&e)) return "precondition";
  if (dynamic_cast<const std::filesystem::filesystem_error*>(&e)) return "io";
  return "internal";
}

// Single machine-parseable line on stderr.
void report_error(const std::string& command, const std::string& kind, const std::string& message) {
  std::string flat = message;
  for (auto& ch : flat)
    if (ch == '\n' || ch == '\t') ch = ' ';
  std::cerr << "catsv2: error\tcommand=" << command << "\tkind=" << kind << "\tmessage=" << flat << "\n";
}

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;

  harness::RunConfig load() const {
    kv::Record rec = path.empty() ? kv::Record{} : kv::read_file(path);
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
      rec[o.substr(0, eq)] = o.substr(eq + 1);
    }
    return harness::RunConfig::from_record(rec);
  }
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("-c,--config", args.path, "key=value run configuration file")->check(CLI::ExistingFile);
  cmd->add_option("-s,--set", args.overrides, "override one config key (key=value), repeatable");
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot write " + path.string());
  out << text;
}

harness::TrainOptions progress_options(int every) {
  harness::TrainOptions opt;
  opt.on_step = [every](const harness::StepRecord& s) {
    if (every > 0 && s.step % every == 0) {
      std::printf("step %d loss %.6f dice_loss %.6f ce %.6f\n", s.step, s.loss, s.dice_loss, s.cross_entropy);
      std::fflush(stdout);
    }
  };
  opt.on_eval = [](const harness::EvalRecord& e) {
    std::printf("eval step %d mean dice %.4f\n", e.step, e.report.mean_dice());
    std::fflush(stdout);
  };
  return opt;
}

int cmd_generate(const ConfigArgs& args, const std::string& out) {
  const auto cfg = args.load();
  const std::string dir = out.empty() ? (fs::path(cfg.output_dir) / "data").string() : out;
  const auto ds = data::generate_dataset(dir, cfg.synth, cfg.split);
  std::printf("generated %zu cases in %s (train %zu, val %zu, test %zu)\n", ds.cases.size(), dir.c_str(),
              ds.split.train.size(), ds.split.val.size(), ds.split.test.size());
  return 0;
}

int cmd_train(const ConfigArgs& args, int log_every) {
  const auto cfg = args.load();
  const auto ds = harness::prepare_dataset(cfg);
  const auto result = harness::train(cfg, ds, progress_options(log_every));
  const double final_loss = result.log.steps.empty() ? 0.0 : result.log.steps.back().loss;
  std::printf("final loss %.9g after %d steps (%.1f s)\n", final_loss, cfg.max_steps, result.log.seconds);
  std::printf("best step %d val mean dice %.4f\n", result.log.best_step, result.log.best_val_dice);
  std::printf("checkpoints in %s\n", cfg.output_dir.c_str());
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset, const std::string& split,
             const std::string& csv) {
  const auto ckpt = read_checkpoint(checkpoint);
  const auto ds = data::load_dataset(dataset);
  const auto report = harness::evaluate(ckpt, ds, ds.split.named(split));
  std::cout << "split " << split << " checkpoint step " << ckpt.step << "\n" << metrics::render_summary(report);
  if (!csv.empty()) write_file(csv, metrics::render_csv(report));
  return 0;
}

int cmd_ablate(const ConfigArgs& args, const std::string& split, int log_every) {
  const auto cfg = args.load();
  const auto ds = harness::prepare_dataset(cfg);
  const auto report = harness::ablate(cfg, ds, split, progress_options(log_every));
  const std::string text = harness::render_ablation(report);
  write_file(fs::path(cfg.output_dir) / "ablation.txt", text);
  std::cout << text;
  return 0;
}

int cmd_predict(const std::string& checkpoint, const std::string& image, const std::string& out) {
  const auto ckpt = read_checkpoint(checkpoint);
  CatsModel<float> model(ckpt.config);
  load_weights(model, ckpt);
  const auto labels = predict(model, data::read_image(image));
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  data::write_volume(out, labels);
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_check(const std::vector<std::string>& suites, bool inject_fault, std::uint64_t seed) {
  std::vector<std::string> names = suites;
  if (names.empty() || (names.size() == 1 && names[0] == "all")) names = checks::suite_names();
  bool ok = true;
  for (const auto& name : names) {
    checks::SuiteOptions opt;
    opt.seed = seed;
    opt.inject_fault = inject_fault;
    const auto report = checks::run_suite(name, opt);
    std::cout << checks::render(report);
    ok = ok && report.passed();
  }
  std::cout << (ok ? "checks passed\n" : "checks FAILED\n");
  return ok ? 0 : kFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"catsv2: hybrid CNN / shifted-window transformer 3D segmentation"};
  app.require_subcommand(1);

  ConfigArgs gen_args, train_args, ablate_args;
  std::string gen_out, ckpt, dataset, split = "test", csv, image, out;
  std::vector<std::string> suites;
  bool inject_fault = false;
  std::uint64_t check_seed = 2024;
  int log_every = 10;

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset directory with a manifest");
  add_config_options(gen, gen_args);
  gen->add_option("-o,--out", gen_out, "dataset directory (default: <output_dir>/data)");

  auto* tr = app.add_subcommand("train", "train a model and save final and best checkpoints");
  add_config_options(tr, train_args);
  tr->add_option("--log-every", log_every, "print the loss every N steps (0: never)");

  auto* ev = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  ev->add_option("--checkpoint", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--dataset", dataset, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--split", split, "train, val or test");
  ev->add_option("--csv", csv, "also write the per-case table here");

  auto* ab = app.add_subcommand("ablate", "train hybrid, cnn_only and swin_only and compare");
  add_config_options(ab, ablate_args);
  ab->add_option("--split", split, "split used for the comparison");
  ab->add_option("--log-every", log_every, "print the loss every N steps (0: never)");

  auto* pr = app.add_subcommand("predict", "write the label map predicted for one CV2V image");
  pr->add_option("--checkpoint", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  pr->add_option("--image", image, "CV2V float image")->required()->check(CLI::ExistingFile);
  pr->add_option("--out", out, "output CV2V label volume")->required();

  auto* ck = app.add_subcommand("check", "run oracle suites (default: all)");
  ck->add_option("suites", suites, "geometry, attention, kernels, gradients, metrics, io, model or all");
  ck->add_flag("--inject-fault", inject_fault, "perturb the mask oracle by one token; the geometry suite must fail");
  ck->add_option("--seed", check_seed, "suite seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error(app.get_subcommands().empty() ? "catsv2" : app.get_subcommands().front()->get_name(), "usage",
                 e.what());
    return kUsage;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (name == "generate") return cmd_generate(gen_args, gen_out);
    if (name == "train") return cmd_train(train_args, log_every);
    if (name == "eval") return cmd_eval(ckpt, dataset, split, csv);
    if (name == "ablate") return cmd_ablate(ablate_args, split, log_every);
    if (name == "predict") return cmd_predict(ckpt, image, out);
    if (name == "check") {
      for (const auto& s : suites) {
        if (s == "all") continue;
        const auto& known = checks::suite_names();
        if (std::find(known.begin(), known.end(), s) == known.end()) {
          report_error(name, "usage", "unknown check suite '" + s + "'");
          return kUsage;
        }
      }
      const int rc = cmd_check(suites, inject_fault, check_seed);
      if (rc != 0) report_error(name, "check_failed", "one or more oracle checks failed");
      return rc;
    }
  } catch (const std::exception& e) {
    report_error(name, error_kind(e), e.what());
    return kFailure;
  }
  return kFailure;
}
