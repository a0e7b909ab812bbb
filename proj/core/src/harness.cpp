#include "cats/harness.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cats/random.hpp"

namespace cats::harness {

namespace fs = std::filesystem;

const std::vector<std::pair<std::string, std::string>>& documented_keys() {
  static const std::vector<std::pair<std::string, std::string>> keys = {
      {"mode", "hybrid | cnn_only | swin_only"},
      {"input_shape", "model input extents, one value or d,h,w (default: synth_shape)"},
      {"in_channels", "image channels (1)"},
      {"num_classes", "K including background (default: synth_classes)"},
      {"patch", "transformer patch size (2)"},
      {"embed_dim", "transformer stage-0 channels (24)"},
      {"heads", "attention heads per stage (3,6,12,24)"},
      {"window", "attention window (4)"},
      {"mlp_ratio", "transformer MLP expansion (4)"},
      {"relative_bias", "learned relative position bias (true)"},
      {"cnn_levels", "CNN pyramid levels (5)"},
      {"base_channels", "CNN level-0 channels (16)"},
      {"kernel", "CNN convolution kernel (3)"},
      {"norm", "CNN normalisation (instance)"},
      {"activation", "CNN activation (leaky_relu)"},
      {"seed", "initialisation and batch-order seed (1)"},
      {"learning_rate", "constant Adam step size (0.0001)"},
      {"beta1", "Adam first-moment decay (0.9)"},
      {"beta2", "Adam second-moment decay (0.999)"},
      {"adam_epsilon", "Adam denominator epsilon (1e-8)"},
      {"batch_size", "cases per step (2)"},
      {"max_steps", "optimisation steps (200)"},
      {"eval_every", "validation cadence in steps, 0 = end only (50)"},
      {"output_dir", "run directory (runs/default); overridden by CATS_OUTPUT_DIR"},
      {"dataset_dir", "existing dataset directory; empty generates one under output_dir/data"},
      {"split_train", "train percentage (55)"},
      {"split_val", "validation percentage (20)"},
      {"split_test", "test percentage (30); test receives the remainder"},
      {"synth_seed", "dataset seed (7)"},
      {"synth_shape", "synthetic volume extents (32)"},
      {"synth_classes", "2 (single lesion) or 3 (nested zones) (3)"},
      {"synth_noise", "Gaussian noise sigma before normalisation (0.08)"},
      {"synth_means", "per-class mean intensity, background first (0.2,0.55,0.9)"},
      {"synth_count", "number of cases (20)"},
      {"synth_spacing", "voxel spacing in mm, one value or d,h,w (1)"},
  };
  return keys;
}

void RunConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (max_steps < 0) throw ConfigError("max_steps must be non-negative");
  if (eval_every < 0) throw ConfigError("eval_every must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_epsilon > 0.0)) throw ConfigError("adam_epsilon must be positive");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  synth.validate();
}

kv::Record RunConfig::to_record() const {
  kv::Record r = model.to_record();
  for (const auto& [k, v] : synth.to_record()) r[k] = v;
  r["split_train"] = std::to_string(split.train);
  r["split_val"] = std::to_string(split.val);
  r["split_test"] = std::to_string(split.test);
  r["dataset_dir"] = dataset_dir;
  r["learning_rate"] = kv::format_double(learning_rate);
  r["beta1"] = kv::format_double(beta1);
  r["beta2"] = kv::format_double(beta2);
  r["adam_epsilon"] = kv::format_double(adam_epsilon);
  r["batch_size"] = std::to_string(batch_size);
  r["max_steps"] = std::to_string(max_steps);
  r["eval_every"] = std::to_string(eval_every);
  r["seed"] = std::to_string(seed);
  r["output_dir"] = output_dir;
  return r;
}

RunConfig RunConfig::from_record(const kv::Record& record, bool apply_env) {
  std::set<std::string> known;
  for (const auto& [k, _] : documented_keys()) known.insert(k);
  for (const auto& [k, _] : record) {
    if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  RunConfig c;
  c.synth = data::SynthSpec::from_record(record);
  kv::Record model_rec = record;
  if (!model_rec.count("input_shape")) {
    model_rec["input_shape"] = kv::join(Extent3{c.synth.shape.d, c.synth.shape.h, c.synth.shape.w});
  }
  if (!model_rec.count("num_classes")) model_rec["num_classes"] = std::to_string(c.synth.num_classes);
  c.model = ModelConfig::from_record(model_rec);
  c.split.train = static_cast<int>(kv::get_int(record, "split_train", c.split.train));
  c.split.val = static_cast<int>(kv::get_int(record, "split_val", c.split.val));
  c.split.test = static_cast<int>(kv::get_int(record, "split_test", c.split.test));
  c.dataset_dir = kv::get(record, "dataset_dir", "");
  c.learning_rate = kv::get_double(record, "learning_rate", c.learning_rate);
  c.beta1 = kv::get_double(record, "beta1", c.beta1);
  c.beta2 = kv::get_double(record, "beta2", c.beta2);
  c.adam_epsilon = kv::get_double(record, "adam_epsilon", c.adam_epsilon);
  c.batch_size = static_cast<int>(kv::get_int(record, "batch_size", c.batch_size));
  c.max_steps = static_cast<int>(kv::get_int(record, "max_steps", c.max_steps));
  c.eval_every = static_cast<int>(kv::get_int(record, "eval_every", c.eval_every));
  c.seed = c.model.seed;
  c.output_dir = kv::get(record, "output_dir", c.output_dir);
  if (apply_env) {
    if (const char* env = std::getenv(kOutputDirEnv); env != nullptr && *env != '\0') c.output_dir = env;
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path, bool apply_env) {
  return from_record(kv::read_file(path), apply_env);
}

template <typename T>
Adam<T>::Adam(ag::ParameterSet<T>& params, double lr, double beta1, double beta2, double epsilon)
    : params_(params), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(epsilon) {
  for (const auto& [name, var] : params_.items()) {
    m_.emplace_back(var->value.shape());
    v_.emplace_back(var->value.shape());
  }
}

template <typename T>
void Adam<T>::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto& items = params_.items();
  for (std::size_t p = 0; p < items.size(); ++p) {
    auto& var = *items[p].second;
    if (var.grad.shape() != var.value.shape()) continue;
    T* w = var.value.data();
    const T* g = var.grad.data();
    T* m = m_[p].data();
    T* v = v_[p].data();
    for (std::int64_t i = 0; i < var.value.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = beta1_ * static_cast<double>(m[i]) + (1.0 - beta1_) * gi;
      const double vi = beta2_ * static_cast<double>(v[i]) + (1.0 - beta2_) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      w[i] = static_cast<T>(static_cast<double>(w[i]) - lr_ * (mi / c1) / (std::sqrt(vi / c2) + eps_));
    }
  }
}

template class Adam<float>;
template class Adam<double>;

namespace {

std::vector<const data::Case*> cases_for(const data::Dataset& dataset, const std::vector<std::string>& ids) {
  std::vector<const data::Case*> out;
  for (const auto& id : ids) out.push_back(&dataset.find(id));
  return out;
}

// Visits every training case once per epoch in a seeded random order.
class BatchSampler {
 public:
  BatchSampler(std::vector<const data::Case*> cases, std::uint64_t seed)
      : cases_(std::move(cases)), rng_(derive_seed(seed, "batches")) {}

  std::vector<const data::Case*> next(int batch) {
    std::vector<const data::Case*> out;
    const std::size_t n = std::min(static_cast<std::size_t>(batch), cases_.size());
    for (std::size_t b = 0; b < n; ++b) {
      if (cursor_ == order_.size()) reshuffle();
      out.push_back(cases_[order_[cursor_++]]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(cases_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
    cursor_ = 0;
  }

  std::vector<const data::Case*> cases_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot write " + path.string());
  out << text;
}

std::string render_eval_log(const RunLog& log) {
  std::ostringstream out;
  out << "step,mean_dice,mean_asd_mm,mean_hd95_mm\n";
  out.precision(17);
  for (const auto& e : log.evals) {
    out << e.step << "," << e.report.overall.dice.mean << "," << e.report.overall.asd_mm.mean << ","
        << e.report.overall.hd95_mm.mean << "\n";
  }
  return out.str();
}

}  // namespace

std::string render_loss_log(const RunLog& log) {
  std::ostringstream out;
  out << "step,loss,dice_loss,cross_entropy\n";
  out.precision(17);
  for (const auto& s : log.steps) out << s.step << "," << s.loss << "," << s.dice_loss << "," << s.cross_entropy << "\n";
  return out.str();
}

TrainResult train(const RunConfig& config, const data::Dataset& dataset, const TrainOptions& options) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  if (dataset.split.train.empty()) throw ConfigError("train: the dataset has no training cases");
  ModelConfig mc = config.model;
  mc.seed = config.seed;
  CatsModel<float> model(mc);
  Adam<float> optimizer(model.parameters(), config.learning_rate, config.beta1, config.beta2, config.adam_epsilon);
  BatchSampler sampler(cases_for(dataset, dataset.split.train), config.seed);

  TrainResult result;
  result.log.config = config.to_record();
  result.best_checkpoint = make_checkpoint(model, 0);
  const auto& val = dataset.split.val;

  for (int step = 1; step <= config.max_steps; ++step) {
    model.parameters().zero_grad();
    const auto batch = sampler.next(config.batch_size);
    const float weight = 1.0f / static_cast<float>(batch.size());
    StepRecord rec;
    rec.step = step;
    for (const auto* c : batch) {
      ag::Tape<float> tape;
      ag::LossParts parts;
      auto logits = model.forward(&tape, c->image);
      auto l = loss(&tape, logits, c->label, &parts);
      if (!std::isfinite(parts.total)) {
        throw DivergenceError("non-finite loss at step " + std::to_string(step) + " on " + c->id + " (dice " +
                              std::to_string(parts.dice) + ", cross-entropy " + std::to_string(parts.cross_entropy) +
                              ")");
      }
      tape.backward(l, weight);
      rec.loss += parts.total / static_cast<double>(batch.size());
      rec.dice_loss += parts.dice / static_cast<double>(batch.size());
      rec.cross_entropy += parts.cross_entropy / static_cast<double>(batch.size());
    }
    optimizer.step();
    result.log.steps.push_back(rec);
    if (options.on_step) options.on_step(rec);

    const bool eval_now = step == config.max_steps || (config.eval_every > 0 && step % config.eval_every == 0);
    if (eval_now && !val.empty()) {
      EvalRecord e{step, evaluate(model, dataset, val)};
      const double score = e.report.mean_dice();
      if (score > result.log.best_val_dice) {
        result.log.best_val_dice = score;
        result.log.best_step = step;
        result.best_checkpoint = make_checkpoint(model, static_cast<std::uint64_t>(step));
      }
      if (options.on_eval) options.on_eval(e);
      result.log.evals.push_back(std::move(e));
    }
  }
  result.final_checkpoint = make_checkpoint(model, static_cast<std::uint64_t>(config.max_steps));
  if (val.empty()) {
    result.best_checkpoint = result.final_checkpoint;
    result.log.best_step = config.max_steps;
  }
  result.log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (options.write_outputs) {
    const fs::path dir(config.output_dir);
    fs::create_directories(dir);
    write_checkpoint((dir / "final.ckpt").string(), result.final_checkpoint);
    write_checkpoint((dir / "best.ckpt").string(), result.best_checkpoint);
    write_text(dir / "run.cfg", kv::format(result.log.config));
    write_text(dir / "loss.csv", render_loss_log(result.log));
    write_text(dir / "evals.csv", render_eval_log(result.log));
  }
  return result;
}

metrics::MetricsReport evaluate(const CatsModel<float>& model, const data::Dataset& dataset,
                                const std::vector<std::string>& ids) {
  const int k = static_cast<int>(model.config().num_classes);
  std::vector<metrics::CaseMetrics> cases;
  std::vector<std::string> errors;
  for (const auto& id : ids) {
    try {
      const auto& c = dataset.find(id);
      cases.push_back(metrics::evaluate_case(id, predict(model, c.image), c.label, k));
    } catch (const Error& e) {
      errors.push_back(id + ": " + e.what());
    }
  }
  if (cases.empty()) throw PreconditionError("evaluate: no case could be scored" + (errors.empty() ? std::string{} : " (" + errors.front() + ")"));
  return metrics::aggregate(std::move(cases), k, std::move(errors));
}

metrics::MetricsReport evaluate(const Checkpoint& checkpoint, const data::Dataset& dataset,
                                const std::vector<std::string>& ids) {
  CatsModel<float> model(checkpoint.config);
  load_weights(model, checkpoint);
  return evaluate(model, dataset, ids);
}

double mean_dice(const CatsModel<float>& model, const data::Dataset& dataset, const std::vector<std::string>& ids) {
  if (ids.empty()) throw PreconditionError("mean_dice: no cases");
  const int k = static_cast<int>(model.config().num_classes);
  double total = 0.0;
  for (const auto& id : ids) {
    const auto& c = dataset.find(id);
    const auto pred = predict(model, c.image);
    double per_case = 0.0;
    for (int cls = 1; cls < k; ++cls) per_case += metrics::dice(pred, c.label, static_cast<std::uint8_t>(cls));
    total += per_case / (k - 1);
  }
  return total / static_cast<double>(ids.size());
}

double AblationReport::dice_delta(ModelMode mode, int k) const {
  const AblationEntry* hybrid = nullptr;
  const AblationEntry* other = nullptr;
  for (const auto& e : entries) {
    if (e.mode == ModelMode::kHybrid) hybrid = &e;
    if (e.mode == mode) other = &e;
  }
  if (!hybrid || !other) throw PreconditionError("dice_delta: ablation report lacks the requested modes");
  if (k < 0) return hybrid->report.overall.dice.mean - other->report.overall.dice.mean;
  return hybrid->report.per_class.at(static_cast<std::size_t>(k)).dice.mean -
         other->report.per_class.at(static_cast<std::size_t>(k)).dice.mean;
}

AblationReport ablate(const RunConfig& config, const data::Dataset& dataset, const std::string& split,
                      const TrainOptions& options) {
  AblationReport report;
  report.split = split;
  const auto& ids = dataset.split.named(split);
  for (ModelMode mode : {ModelMode::kHybrid, ModelMode::kCnnOnly, ModelMode::kSwinOnly}) {
    RunConfig c = config;
    c.model.mode = mode;
    c.output_dir = (fs::path(config.output_dir) / to_string(mode)).string();
    auto result = train(c, dataset, options);
    report.entries.push_back({mode, evaluate(result.best_checkpoint, dataset, ids), std::move(result.log)});
  }
  return report;
}

std::string render_ablation(const AblationReport& report) {
  std::ostringstream out;
  for (const auto& e : report.entries) {
    out << "== " << to_string(e.mode) << " (" << report.split << ", best step " << e.log.best_step << ")\n";
    out << metrics::render_summary(e.report);
  }
  char buf[128];
  for (ModelMode mode : {ModelMode::kCnnOnly, ModelMode::kSwinOnly}) {
    out << "delta hybrid-" << to_string(mode) << " dice:";
    const std::size_t classes = report.entries.front().report.per_class.size();
    for (std::size_t k = 0; k < classes; ++k) {
      std::snprintf(buf, sizeof buf, " class%zu %+.3f", k + 1, report.dice_delta(mode, static_cast<int>(k)));
      out << buf;
    }
    std::snprintf(buf, sizeof buf, " overall %+.3f\n", report.dice_delta(mode, -1));
    out << buf;
  }
  return out.str();
}

data::Dataset prepare_dataset(const RunConfig& config) {
  if (!config.dataset_dir.empty()) return data::load_dataset(config.dataset_dir);
  const fs::path dir = fs::path(config.output_dir) / "data";
  if (fs::exists(dir / data::kManifestName) && fs::exists(dir / data::kSpecName)) {
    kv::Record want = config.synth.to_record();
    want["split_train"] = std::to_string(config.split.train);
    want["split_val"] = std::to_string(config.split.val);
    want["split_test"] = std::to_string(config.split.test);
    if (kv::read_file((dir / data::kSpecName).string()) == want) return data::load_dataset(dir.string());
  }
  return data::generate_dataset(dir.string(), config.synth, config.split);
}

}  // namespace cats::harness
