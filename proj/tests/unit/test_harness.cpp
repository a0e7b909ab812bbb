#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <unistd.h>

#include "cats/errors.hpp"
#include "cats/harness.hpp"
#include "cats/oracles/checks.hpp"
#include "cats/random.hpp"

namespace cats::harness {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("cats-harness-" + std::to_string(::getpid()) + "-" +
                                                 std::to_string(Rng(std::random_device{}()).next_u64()))) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string sub(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

kv::Record micro_record(const std::string& out) {
  return {{"input_shape", "8"},    {"patch", "1"},         {"embed_dim", "4"},  {"heads", "1,2,2,4"},
          {"window", "2"},         {"mlp_ratio", "2"},     {"cnn_levels", "4"}, {"base_channels", "4"},
          {"synth_shape", "8"},    {"synth_count", "6"},   {"max_steps", "5"},  {"batch_size", "2"},
          {"eval_every", "0"},     {"learning_rate", "0.001"}, {"output_dir", out}};
}

TEST(RunConfig, DefaultsFollowTheSyntheticData) {
  const auto c = RunConfig::from_record({}, false);
  EXPECT_EQ(c.learning_rate, 1e-4);
  EXPECT_EQ(c.batch_size, 2);
  EXPECT_EQ(c.model.input, (GridDims{32, 32, 32}));
  EXPECT_EQ(c.model.num_classes, 3);
  EXPECT_EQ(c.model.mode, ModelMode::kHybrid);
}

TEST(RunConfig, UnknownKeyIsRejected) {
  EXPECT_THROW(RunConfig::from_record({{"learning_rat", "0.1"}}, false), ConfigError);
  EXPECT_THROW(RunConfig::from_record({{"learning_rate", "-1"}}, false), ConfigError);
  EXPECT_THROW(RunConfig::from_record({{"batch_size", "0"}}, false), ConfigError);
}

TEST(RunConfig, ParsesFileAndRoundtripsRecord) {
  TempDir dir;
  const std::string path = dir.sub("run.cfg");
  {
    std::ofstream out(path);
    out << "# micro run\nmode = cnn_only\nlearning_rate = 0.0003\n\nsynth_classes = 2\nmax_steps = 7\n";
  }
  const auto c = RunConfig::load(path, false);
  EXPECT_EQ(c.model.mode, ModelMode::kCnnOnly);
  EXPECT_EQ(c.learning_rate, 3e-4);
  EXPECT_EQ(c.model.num_classes, 2);
  EXPECT_EQ(c.max_steps, 7);
  const auto again = RunConfig::from_record(c.to_record(), false);
  EXPECT_EQ(again.to_record(), c.to_record());
}

TEST(RunConfig, EveryRecordedKeyIsDocumented) {
  std::set<std::string> documented;
  for (const auto& [k, v] : documented_keys()) {
    documented.insert(k);
    EXPECT_FALSE(v.empty()) << k;
  }
  for (const auto& [k, v] : RunConfig{}.to_record()) EXPECT_TRUE(documented.count(k)) << k;
}

TEST(RunConfig, OutputDirectoryEnvironmentOverride) {
  ::setenv(kOutputDirEnv, "/tmp/overridden", 1);
  EXPECT_EQ(RunConfig::from_record({{"output_dir", "runs/x"}}).output_dir, "/tmp/overridden");
  EXPECT_EQ(RunConfig::from_record({{"output_dir", "runs/x"}}, false).output_dir, "runs/x");
  ::unsetenv(kOutputDirEnv);
  EXPECT_EQ(RunConfig::from_record({{"output_dir", "runs/x"}}).output_dir, "runs/x");
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  ag::ParameterSet<double> params;
  auto w = params.add("w", Tensor<double>(Shape{3}, std::vector<double>{1.0, -2.0, 0.5}));
  w->grad_buffer();
  w->grad[0] = 0.3;
  w->grad[1] = -4.0;
  w->grad[2] = 0.0;
  auto frozen = params.add("frozen", Tensor<double>(Shape{1}, 9.0));
  Adam<double> opt(params, 0.01);
  opt.step();
  EXPECT_NEAR(w->value[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(w->value[1], -2.0 + 0.01, 1e-9);
  EXPECT_EQ(w->value[2], 0.5);
  EXPECT_EQ(frozen->value[0], 9.0);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(Adam, ConvergesOnAQuadratic) {
  ag::ParameterSet<double> params;
  auto w = params.add("w", Tensor<double>(Shape{2}, std::vector<double>{3.0, -1.0}));
  Adam<double> opt(params, 0.05);
  for (int i = 0; i < 500; ++i) {
    // Gradient of sum(w * w).
    w->grad_buffer();
    for (int k = 0; k < 2; ++k) w->grad[k] = 2.0 * w->value[k];
    opt.step();
  }
  EXPECT_LT(std::abs(w->value[0]), 1e-2);
  EXPECT_LT(std::abs(w->value[1]), 1e-2);
}

struct MicroRun {
  TempDir dir;
  RunConfig config;
  data::Dataset dataset;

  MicroRun() {
    config = RunConfig::from_record(micro_record(dir.sub("run")), false);
    dataset = prepare_dataset(config);
  }
};

TEST(Train, MicroRunWritesLoadableCheckpoint) {
  MicroRun run;
  const auto result = train(run.config, run.dataset);
  ASSERT_EQ(result.log.steps.size(), 5u);
  for (std::size_t i = 0; i < result.log.steps.size(); ++i) {
    EXPECT_EQ(result.log.steps[i].step, static_cast<int>(i) + 1);
    EXPECT_TRUE(std::isfinite(result.log.steps[i].loss));
  }
  ASSERT_EQ(result.log.evals.size(), 1u);
  EXPECT_EQ(result.log.evals[0].step, 5);
  for (const char* f : {"final.ckpt", "best.ckpt", "run.cfg", "loss.csv", "evals.csv"})
    EXPECT_TRUE(fs::exists(run.dir.sub("run") + "/" + f)) << f;
  const auto ckpt = read_checkpoint(run.dir.sub("run/final.ckpt"));
  EXPECT_EQ(ckpt.step, 5u);
  CatsModel<float> model(ckpt.config);
  load_weights(model, ckpt);
  const auto& img = run.dataset.cases.front().image;
  CatsModel<float> direct(result.final_checkpoint.config);
  load_weights(direct, result.final_checkpoint);
  EXPECT_EQ(model.forward(nullptr, img)->value, direct.forward(nullptr, img)->value);
}

TEST(Train, IdenticalSeedsGiveIdenticalLossBits) {
  MicroRun run;
  TrainOptions quiet;
  quiet.write_outputs = false;
  const auto a = train(run.config, run.dataset, quiet);
  const auto b = train(run.config, run.dataset, quiet);
  ASSERT_EQ(a.log.steps.size(), b.log.steps.size());
  for (std::size_t i = 0; i < a.log.steps.size(); ++i) {
    const double la = a.log.steps[i].loss, lb = b.log.steps[i].loss;
    EXPECT_EQ(std::memcmp(&la, &lb, sizeof la), 0) << i;
  }
  ASSERT_EQ(a.final_checkpoint.weights.size(), b.final_checkpoint.weights.size());
  for (std::size_t i = 0; i < a.final_checkpoint.weights.size(); ++i)
    EXPECT_EQ(a.final_checkpoint.weights[i].second, b.final_checkpoint.weights[i].second);
}

TEST(Train, CallbacksSeeEveryStep) {
  MicroRun run;
  TrainOptions opts;
  opts.write_outputs = false;
  int steps = 0, evals = 0;
  opts.on_step = [&](const StepRecord&) { ++steps; };
  opts.on_eval = [&](const EvalRecord&) { ++evals; };
  run.config.eval_every = 2;
  train(run.config, run.dataset, opts);
  EXPECT_EQ(steps, 5);
  EXPECT_EQ(evals, 3);  // steps 2, 4 and the last
}

TEST(Evaluate, ReloadedCheckpointGivesIdenticalReport) {
  MicroRun run;
  TrainOptions quiet;
  quiet.write_outputs = false;
  const auto result = train(run.config, run.dataset, quiet);
  const std::string path = run.dir.sub("reload.ckpt");
  write_checkpoint(path, result.final_checkpoint);
  const auto& ids = run.dataset.split.test;
  const auto a = evaluate(result.final_checkpoint, run.dataset, ids);
  const auto b = evaluate(read_checkpoint(path), run.dataset, ids);
  EXPECT_EQ(metrics::render_csv(a), metrics::render_csv(b));
  EXPECT_EQ(metrics::render_summary(a), metrics::render_summary(b));
}

TEST(Evaluate, PerCaseErrorsAreRecordedAndSkipped) {
  MicroRun run;
  CatsModel<float> model(run.config.model);
  data::Dataset ds = run.dataset;
  data::Case odd = ds.cases.front();
  odd.id = "case_odd";
  odd.image = ImageVolume({16, 8, 8}, 1);
  odd.label = LabelVolume({16, 8, 8}, 1);
  ds.cases.push_back(odd);
  std::vector<std::string> ids = ds.split.test;
  ids.push_back("case_odd");
  const auto report = evaluate(model, ds, ids);
  ASSERT_EQ(report.errors.size(), 1u);
  EXPECT_EQ(report.errors[0].rfind("case_odd", 0), 0u);
  EXPECT_EQ(report.cases.size(), ids.size() - report.errors.size());
}

TEST(Evaluate, MeanStdRendering) {
  MicroRun run;
  CatsModel<float> model(run.config.model);
  const auto report = evaluate(model, run.dataset, run.dataset.split.val);
  const std::string text = metrics::render_summary(report);
  EXPECT_NE(text.find("dice"), std::string::npos) << text;
  EXPECT_NE(text.find(" ("), std::string::npos) << text;
}

TEST(Ablate, ThreeComparableReportsAndReproducibleBaseline) {
  MicroRun run;
  run.config.max_steps = 2;
  TrainOptions quiet;
  quiet.write_outputs = false;
  const auto a = ablate(run.config, run.dataset, "test", quiet);
  ASSERT_EQ(a.entries.size(), 3u);
  EXPECT_EQ(a.entries[0].mode, ModelMode::kHybrid);
  EXPECT_EQ(a.entries[1].mode, ModelMode::kCnnOnly);
  EXPECT_EQ(a.entries[2].mode, ModelMode::kSwinOnly);
  for (const auto& e : a.entries) EXPECT_EQ(e.report.cases.size(), run.dataset.split.test.size());
  const double delta = a.dice_delta(ModelMode::kCnnOnly, 0);
  EXPECT_DOUBLE_EQ(delta, a.entries[0].report.per_class[0].dice.mean - a.entries[1].report.per_class[0].dice.mean);
  const std::string text = render_ablation(a);
  EXPECT_NE(text.find("cnn_only"), std::string::npos) << text;
  EXPECT_NE(text.find("swin_only"), std::string::npos) << text;
  const auto b = ablate(run.config, run.dataset, "test", quiet);
  EXPECT_EQ(metrics::render_csv(a.entries[1].report), metrics::render_csv(b.entries[1].report));
}

TEST(PrepareDataset, ReusesMatchingDirectory) {
  MicroRun run;
  const auto stamp = fs::last_write_time(run.dir.sub("run/data/manifest.tsv"));
  const auto again = prepare_dataset(run.config);
  EXPECT_EQ(fs::last_write_time(run.dir.sub("run/data/manifest.tsv")), stamp);
  EXPECT_EQ(again.split.train, run.dataset.split.train);
}

TEST(Checks, EverySuiteIsRegistered) {
  const auto& names = checks::suite_names();
  for (const char* n : {"geometry", "attention", "gradients", "metrics", "io"})
    EXPECT_NE(std::find(names.begin(), names.end(), n), names.end()) << n;
  EXPECT_THROW(checks::run_suite("nosuch"), ConfigError);
}

}  // namespace
}  // namespace cats::harness
