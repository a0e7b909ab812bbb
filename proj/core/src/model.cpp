#include "cats/model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "cats/binary_io.hpp"

namespace cats {

using ag::Tape;
using ag::Var;

std::string to_string(ModelMode mode) {
  switch (mode) {
    case ModelMode::kHybrid:
      return "hybrid";
    case ModelMode::kCnnOnly:
      return "cnn_only";
    case ModelMode::kSwinOnly:
      return "swin_only";
  }
  return "hybrid";
}

ModelMode parse_mode(const std::string& text) {
  if (text == "hybrid") return ModelMode::kHybrid;
  if (text == "cnn_only") return ModelMode::kCnnOnly;
  if (text == "swin_only") return ModelMode::kSwinOnly;
  throw ConfigError("unknown model mode '" + text + "' (expected hybrid, cnn_only or swin_only)");
}

void ModelConfig::finalize() {
  if (num_classes < 2 || num_classes > 255) throw ConfigError("model: num_classes must lie in [2, 255]");
  if (input_channels <= 0) throw ConfigError("model: input_channels must be positive");
  validate(input, "model input");
  swin.in_channels = input_channels;
  cnn.in_channels = input_channels;
  cnn.num_classes = num_classes;
  cnn.validate();
  const std::int64_t step = std::int64_t{1} << (cnn.levels - 1);
  for (int a = 0; a < 3; ++a) {
    if (input[a] % step != 0) {
      throw ConfigError("model: input extent " + std::to_string(input[a]) + " is not divisible by 2^(levels-1) = " +
                        std::to_string(step));
    }
  }
  if (mode == ModelMode::kCnnOnly) return;
  swin.validate();
  // Dry run of the tap-to-level mapping on a scratch parameter set.
  ag::ParameterSet<float> scratch;
  const auto fusion = cnn::make_fusion(scratch, cnn, swin, seed);
  if (mode == ModelMode::kSwinOnly) {
    for (int l = 1; l < cnn.levels; ++l) {
      if (fusion.tap_for_level[l] < 0) {
        throw ConfigError("model: swin_only needs a transformer tap at every pyramid level >= 1; level " +
                          std::to_string(l) + " has none");
      }
    }
  }
  for (int a = 0; a < 3; ++a) {
    const std::int64_t need = swin.patch[a] << (swin::kStages - 1);
    if (input[a] % need != 0) {
      throw ConfigError("model: input extent " + std::to_string(input[a]) + " is not divisible by patch*2^3 = " +
                        std::to_string(need));
    }
  }
}

kv::Record ModelConfig::to_record() const {
  kv::Record r;
  r["mode"] = to_string(mode);
  r["input_shape"] = kv::join(Extent3{input.d, input.h, input.w});
  r["in_channels"] = std::to_string(input_channels);
  r["num_classes"] = std::to_string(num_classes);
  r["patch"] = kv::join(swin.patch);
  r["embed_dim"] = std::to_string(swin.embed_dim);
  r["heads"] = kv::join(std::vector<std::int64_t>(swin.heads.begin(), swin.heads.end()));
  r["window"] = kv::join(swin.window);
  r["mlp_ratio"] = kv::format_double(swin.mlp_ratio);
  r["relative_bias"] = swin.use_relative_bias ? "true" : "false";
  r["cnn_levels"] = std::to_string(cnn.levels);
  r["base_channels"] = std::to_string(cnn.base_channels);
  r["kernel"] = std::to_string(cnn.kernel);
  r["norm"] = cnn.norm;
  r["activation"] = cnn.activation;
  r["seed"] = std::to_string(seed);
  return r;
}

ModelConfig ModelConfig::from_record(const kv::Record& r) {
  ModelConfig c;
  c.mode = parse_mode(kv::get(r, "mode", "hybrid"));
  const Extent3 in = kv::get_extent(r, "input_shape", {32, 32, 32});
  c.input = {in[0], in[1], in[2]};
  c.input_channels = kv::get_int(r, "in_channels", 1);
  c.num_classes = kv::get_int(r, "num_classes", 2);
  c.swin.patch = kv::get_extent(r, "patch", c.swin.patch);
  c.swin.embed_dim = kv::get_int(r, "embed_dim", c.swin.embed_dim);
  const auto heads = kv::get_ints(r, "heads", {c.swin.heads.begin(), c.swin.heads.end()});
  if (heads.size() != swin::kStages) throw ConfigError("config key 'heads' needs four values");
  std::copy(heads.begin(), heads.end(), c.swin.heads.begin());
  c.swin.window = kv::get_extent(r, "window", c.swin.window);
  c.swin.mlp_ratio = kv::get_double(r, "mlp_ratio", c.swin.mlp_ratio);
  c.swin.use_relative_bias = kv::get_bool(r, "relative_bias", c.swin.use_relative_bias);
  c.cnn.levels = static_cast<int>(kv::get_int(r, "cnn_levels", c.cnn.levels));
  c.cnn.base_channels = kv::get_int(r, "base_channels", c.cnn.base_channels);
  c.cnn.kernel = kv::get_int(r, "kernel", c.cnn.kernel);
  c.cnn.norm = kv::get(r, "norm", c.cnn.norm);
  c.cnn.activation = kv::get(r, "activation", c.cnn.activation);
  c.seed = static_cast<std::uint64_t>(kv::get_int(r, "seed", 1));
  c.finalize();
  return c;
}

template <typename T>
CatsModel<T>::CatsModel(ModelConfig config) : config_(std::move(config)) {
  config_.finalize();
  const bool uses_swin = config_.mode != ModelMode::kCnnOnly;
  const int enc_levels = config_.mode == ModelMode::kSwinOnly ? 1 : config_.cnn.levels;
  cnn_ = std::make_unique<cnn::CnnBackbone<T>>(config_.cnn, params_, config_.seed, enc_levels);
  if (uses_swin) {
    swin_ = std::make_unique<swin::SwinEncoder<T>>(config_.swin, config_.input, params_, config_.seed);
    fusion_ = cnn::make_fusion(params_, config_.cnn, config_.swin, config_.seed);
  }
}

template <typename T>
cnn::FeaturePyramid<T> CatsModel<T>::fused_pyramid(Tape<T>* tape, const Var<T>& volume) const {
  const Shape& s = volume->value.shape();
  if (s.size() != 4 || !(GridDims{s[0], s[1], s[2]} == config_.input) || s[3] != config_.input_channels) {
    throw PreconditionError("model: input " + to_string(s) + " does not match configured extent " +
                            to_string(config_.input) + " x " + std::to_string(config_.input_channels));
  }
  auto pyramid = cnn_->encode(tape, volume);
  if (!swin_) return pyramid;
  const auto taps = swin_->forward(tape, volume);
  return cnn::fuse_taps(tape, pyramid, taps, fusion_,
                        config_.mode == ModelMode::kSwinOnly ? cnn::FusionMode::kReplace : cnn::FusionMode::kAdd);
}

template <typename T>
Var<T> CatsModel<T>::forward(Tape<T>* tape, const Var<T>& volume) const {
  return cnn_->decode(tape, fused_pyramid(tape, volume));
}

template <typename T>
Var<T> CatsModel<T>::forward(Tape<T>* tape, const ImageVolume& volume) const {
  return forward(tape, volume_variable<T>(volume));
}

template <typename T>
Tensor<T> CatsModel<T>::forward_batch(std::span<const ImageVolume> batch) const {
  const GridDims d = config_.input;
  const std::int64_t k = config_.num_classes;
  Tensor<T> out(Shape{static_cast<std::int64_t>(batch.size()), d.d, d.h, d.w, k});
  const std::int64_t per = d.count() * k;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto logits = forward(nullptr, batch[b]);
    std::copy(logits->value.values().begin(), logits->value.values().end(), out.data() + static_cast<std::int64_t>(b) * per);
  }
  return out;
}

template <typename T>
Var<T> volume_variable(const ImageVolume& volume) {
  std::vector<T> values(volume.voxels.begin(), volume.voxels.end());
  return ag::constant(Tensor<T>(Shape{volume.dims.d, volume.dims.h, volume.dims.w, volume.channels}, std::move(values)));
}

template <typename T>
Var<T> loss(Tape<T>* tape, const Var<T>& logits, const LabelVolume& labels, ag::LossParts* parts) {
  return ag::segmentation_loss(tape, logits, std::span<const std::uint8_t>(labels.voxels), parts);
}

template <typename T>
LabelVolume argmax_labels(const Tensor<T>& logits, GridDims dims, Spacing spacing) {
  const std::int64_t k = logits.dim(-1);
  if (logits.size() != dims.count() * k) {
    throw PreconditionError("argmax_labels: logits " + to_string(logits.shape()) + " do not cover " + to_string(dims));
  }
  LabelVolume out(dims, 1, spacing);
  for (std::int64_t v = 0; v < dims.count(); ++v) {
    const T* z = logits.data() + v * k;
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < k; ++j)
      if (z[j] > z[best]) best = j;
    out.voxels[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

template <typename T>
LabelVolume predict(const CatsModel<T>& model, const ImageVolume& volume) {
  const auto logits = model.forward(nullptr, volume);
  return argmax_labels(logits->value, volume.dims, volume.spacing);
}

template <typename T>
Checkpoint make_checkpoint(const CatsModel<T>& model, std::uint64_t step, kv::Record metadata) {
  Checkpoint c;
  c.config = model.config();
  c.step = step;
  c.seed = model.config().seed;
  c.metadata = std::move(metadata);
  for (const auto& [name, var] : model.parameters().items()) c.weights.emplace_back(name, var->value.template cast<float>());
  return c;
}

void write_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot open " + path + " for writing");
  kv::Record meta = checkpoint.metadata;
  meta["step"] = std::to_string(checkpoint.step);
  meta["seed"] = std::to_string(checkpoint.seed);
  const std::string config = kv::format(checkpoint.config.to_record());
  const std::string metadata = kv::format(meta);
  out.write(kCheckpointMagic, 4);
  io::write_le<std::uint16_t>(out, kCheckpointVersion);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(config.size()));
  out.write(config.data(), static_cast<std::streamsize>(config.size()));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(metadata.size()));
  out.write(metadata.data(), static_cast<std::streamsize>(metadata.size()));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(checkpoint.weights.size()));
  for (const auto& [name, tensor] : checkpoint.weights) {
    io::write_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.rank()));
    for (auto e : tensor.shape()) io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    for (float v : tensor.values()) io::write_f32(out, v);
  }
  if (!out) throw FormatError(FormatErrorKind::kIo, "write failed for " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open checkpoint " + path);
  char magic[4];
  io::read_exact(in, magic, 4, "checkpoint magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw FormatError(FormatErrorKind::kBadMagic, "bad magic: " + path + " is not a checkpoint");
  }
  const auto version = io::read_le<std::uint16_t>(in, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw FormatError(FormatErrorKind::kBadVersion, "unsupported checkpoint version " + std::to_string(version));
  }
  auto read_text = [&](const char* what) {
    const auto n = io::read_le<std::uint32_t>(in, what);
    std::string s(n, '\0');
    io::read_exact(in, s.data(), n, what);
    return s;
  };
  Checkpoint c;
  c.config = ModelConfig::from_record(kv::parse(read_text("checkpoint config")));
  c.metadata = kv::parse(read_text("checkpoint metadata"));
  c.step = static_cast<std::uint64_t>(kv::get_int(c.metadata, "step", 0));
  c.seed = static_cast<std::uint64_t>(kv::get_int(c.metadata, "seed", 0));
  const auto count = io::read_le<std::uint32_t>(in, "checkpoint array count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = io::read_le<std::uint16_t>(in, "array name");
    std::string name(name_len, '\0');
    io::read_exact(in, name.data(), name_len, "array name");
    const auto rank = io::read_le<std::uint8_t>(in, "array rank");
    Shape shape;
    for (int d = 0; d < rank; ++d) shape.push_back(io::read_le<std::uint32_t>(in, "array shape"));
    Tensor<float> t(shape);
    for (auto& v : t.values()) v = io::read_f32(in, "array " + name);
    c.weights.emplace_back(std::move(name), std::move(t));
  }
  return c;
}

template <typename T>
void load_weights(CatsModel<T>& model, const Checkpoint& checkpoint) {
  auto& params = model.parameters();
  if (params.items().size() != checkpoint.weights.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(checkpoint.weights.size()) + " arrays, model expects " +
                      std::to_string(params.items().size()));
  }
  for (const auto& [name, tensor] : checkpoint.weights) {
    auto var = params.find(name);
    if (!var) throw ConfigError("checkpoint array '" + name + "' has no matching parameter");
    if (var->value.shape() != tensor.shape()) {
      throw ConfigError("checkpoint array '" + name + "' has shape " + to_string(tensor.shape()) + ", model expects " +
                        to_string(var->value.shape()));
    }
    var->value = tensor.template cast<T>();
  }
}

#define CATS_MODEL_INSTANTIATE(T)                                                                   \
  template class CatsModel<T>;                                                                      \
  template Var<T> volume_variable<T>(const ImageVolume&);                                           \
  template Var<T> loss<T>(Tape<T>*, const Var<T>&, const LabelVolume&, ag::LossParts*);             \
  template LabelVolume argmax_labels<T>(const Tensor<T>&, GridDims, Spacing);                       \
  template LabelVolume predict<T>(const CatsModel<T>&, const ImageVolume&);                         \
  template Checkpoint make_checkpoint<T>(const CatsModel<T>&, std::uint64_t, kv::Record);           \
  template void load_weights<T>(CatsModel<T>&, const Checkpoint&);

CATS_MODEL_INSTANTIATE(float)
CATS_MODEL_INSTANTIATE(double)

#undef CATS_MODEL_INSTANTIATE

}  // namespace cats
