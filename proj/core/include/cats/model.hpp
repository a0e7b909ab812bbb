#pragma once

// The hybrid segmentation network: CNN and shifted-window transformer
// encoders run in parallel on the same volume, transformer taps are added to
// the CNN pyramid at matching scales and the fused pyramid is decoded by the
// CNN decoder. Single-encoder ablations share the same assembly.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cats/cnn.hpp"
#include "cats/kv.hpp"
#include "cats/swin.hpp"
#include "cats/volume.hpp"

namespace cats {

enum class ModelMode { kHybrid, kCnnOnly, kSwinOnly };

std::string to_string(ModelMode mode);
ModelMode parse_mode(const std::string& text);

struct ModelConfig {
  swin::SwinConfig swin;
  cnn::CnnConfig cnn;
  std::int64_t num_classes = 2;
  std::int64_t input_channels = 1;
  GridDims input{32, 32, 32};
  ModelMode mode = ModelMode::kHybrid;
  std::uint64_t seed = 1;

  // Copies the shared fields (channels, classes) into the sub-configs and
  // checks every cross-module law. Throws ConfigError.
  void finalize();

  kv::Record to_record() const;
  // Unspecified keys keep their defaults.
  static ModelConfig from_record(const kv::Record& record);
};

template <typename T>
class CatsModel {
 public:
  explicit CatsModel(ModelConfig config);

  CatsModel(const CatsModel&) = delete;
  CatsModel& operator=(const CatsModel&) = delete;

  // (D, H, W, K) logits for one (D, H, W, C) volume.
  ag::Var<T> forward(ag::Tape<T>* tape, const ag::Var<T>& volume) const;
  ag::Var<T> forward(ag::Tape<T>* tape, const ImageVolume& volume) const;

  // Inference over a batch: (B, D, H, W, K).
  Tensor<T> forward_batch(std::span<const ImageVolume> batch) const;

  // Exposed for fusion tests and ablation bookkeeping.
  cnn::FeaturePyramid<T> fused_pyramid(ag::Tape<T>* tape, const ag::Var<T>& volume) const;

  const ModelConfig& config() const noexcept { return config_; }
  ag::ParameterSet<T>& parameters() noexcept { return params_; }
  const ag::ParameterSet<T>& parameters() const noexcept { return params_; }
  const swin::SwinEncoder<T>* swin() const noexcept { return swin_.get(); }

 private:
  ModelConfig config_;
  ag::ParameterSet<T> params_;
  std::unique_ptr<cnn::CnnBackbone<T>> cnn_;
  std::unique_ptr<swin::SwinEncoder<T>> swin_;
  cnn::FusionWeights<T> fusion_;
};

template <typename T>
ag::Var<T> volume_variable(const ImageVolume& volume);

// Mean of soft-Dice and cross-entropy; see ag::segmentation_loss.
template <typename T>
ag::Var<T> loss(ag::Tape<T>* tape, const ag::Var<T>& logits, const LabelVolume& labels, ag::LossParts* parts = nullptr);

// Per-voxel argmax; ties resolve to the lowest class index.
template <typename T>
LabelVolume argmax_labels(const Tensor<T>& logits, GridDims dims, Spacing spacing);

template <typename T>
LabelVolume predict(const CatsModel<T>& model, const ImageVolume& volume);

// Self-describing checkpoint: config record, named float32 arrays and metadata.
struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor<float>>> weights;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  kv::Record metadata;
};

inline constexpr char kCheckpointMagic[4] = {'C', 'V', '2', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

template <typename T>
Checkpoint make_checkpoint(const CatsModel<T>& model, std::uint64_t step, kv::Record metadata = {});
void write_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::string& path);

// Copies checkpoint weights into a model built from the same config.
template <typename T>
void load_weights(CatsModel<T>& model, const Checkpoint& checkpoint);

}  // namespace cats
