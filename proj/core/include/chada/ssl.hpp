#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "chada/baselines.hpp"
#include "chada/image.hpp"
#include "chada/optim.hpp"
#include "chada/random.hpp"
#include "chada/tensor.hpp"

namespace chada {

/// Channel-consistent view sampling: one crop and flip pair per view shared
/// by all channels, then an independent gain/offset per channel.
struct AugmentationPolicy {
  double min_crop_scale = 0.4;  // fraction of the image area
  double max_crop_scale = 1.0;
  bool horizontal_flip = true;
  bool vertical_flip = true;
  double intensity_jitter = 0.2;
};

struct ViewTransform {
  std::size_t crop_y = 0, crop_x = 0, crop_side = 0;
  bool hflip = false, vflip = false;
  std::vector<float> gain, offset;  // per channel
};

ViewTransform sample_view(const AugmentationPolicy& policy, std::size_t channels, std::size_t side,
                          Rng& rng);
/// Crop, resize back to the input side, flip. Identical for every channel.
MultiChannelImage apply_geometry(const MultiChannelImage& image, const ViewTransform& t);
/// Geometry followed by the per-channel intensity jitter, clamped to [0, 1].
MultiChannelImage apply_view(const MultiChannelImage& image, const ViewTransform& t);

struct DinoConfig {
  std::size_t head_hidden = 256;
  std::size_t head_bottleneck = 64;
  std::size_t out_dim = 256;
  double student_temp = 0.1;
  double teacher_temp = 0.04;
  double center_momentum = 0.9;
  double teacher_momentum_start = 0.996;
  double teacher_momentum_end = 1.0;
  std::size_t steps = 300;
  std::size_t batch_size = 32;
  double base_lr = 1e-4;
  double final_lr = 1e-6;
  double weight_decay = 0.04;
  double clip_grad = 3.0;  // 0 disables
  std::uint64_t seed = 0;
  AugmentationPolicy augmentation;

  /// Throws std::invalid_argument on out-of-range values.
  void validate() const;
};

/// Learning-rate default for an architecture: the one-channel baseline uses
/// the larger rate it needs to train stably.
double default_base_lr(Arch arch);

/// Three-layer MLP to an L2-normalised bottleneck, then a bias-free layer
/// whose prototype columns are normalised to unit length.
template <typename T>
struct DinoHead {
  Tensor<T> w1, b1, w2, b2, w3, b3;
  Tensor<T> prototypes;  // [bottleneck, out]

  static DinoHead init(std::size_t in, std::size_t hidden, std::size_t bottleneck, std::size_t out, Rng& rng);
  void append_parameters(ParamList<T>& out, const std::string& prefix) const;
  Tensor<T> forward(const Tensor<T>& x) const;
};

/// Mean over ordered view pairs (i != j) of the cross-entropy between the
/// centred, sharpened teacher distribution of view j and the student
/// distribution of view i. Logits are [views * batch, K], view-major.
/// Teacher logits are treated as constants. Throws NumericalError on
/// non-finite logits.
template <typename T>
Tensor<T> dino_loss(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits,
                    std::span<const T> center, std::size_t views, double student_temp,
                    double teacher_temp);

/// t <- m t + (1 - m) s for every entry; shapes must agree.
template <typename T>
void ema_update(ParamList<T>& teacher, const ParamList<T>& student, double momentum);

/// final + (base - final) (1 + cos(pi step / total)) / 2.
double cosine_schedule(std::size_t step, std::size_t total, double base, double final_value);

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

/// Student, EMA teacher, optimizer and centre for one DINO run. Single
/// precision throughout.
class DinoTrainer {
 public:
  DinoTrainer(Arch arch, const EncoderConfig& encoder, const DinoConfig& dino);

  /// One optimisation step on `images` (two views each).
  StepRecord train_step(std::span<const MultiChannelImage> images);
  /// Draws a batch from `pool` with the trainer's RNG and trains on it.
  StepRecord train_step_from(const std::vector<MultiChannelImage>& pool);

  /// Runs until `dino.steps`, appending JSON lines to `log_path` (if not
  /// empty) and checkpointing every `checkpoint_every` steps to
  /// `checkpoint_prefix`-<step> (if positive).
  std::vector<StepRecord> run(const std::vector<MultiChannelImage>& pool, const std::string& log_path = "",
                              std::size_t checkpoint_every = 0, const std::string& checkpoint_prefix = "");

  void save(const std::string& path) const;
  void load(const std::string& path);

  /// The per-architecture training pool: images as given, or every channel
  /// as its own single-channel image for the one-channel baseline.
  static std::vector<MultiChannelImage> training_pool(Arch arch, std::span<const MultiChannelImage> images);

  std::size_t step() const { return step_; }
  const Model<float>& student() const { return student_; }
  const Model<float>& teacher() const { return teacher_; }
  ParamList<float> student_parameters() const;
  ParamList<float> teacher_parameters() const;
  const std::vector<float>& center() const { return center_; }
  const DinoConfig& config() const { return dino_; }
  std::string config_json() const;

 private:
  Arch arch_;
  EncoderConfig encoder_;
  DinoConfig dino_;
  Model<float> student_, teacher_;
  DinoHead<float> student_head_, teacher_head_;
  AdamW<float> optimizer_;
  std::vector<float> center_;
  std::size_t step_ = 0;
  Rng rng_;
};

/// Deep copy of every learnable tensor.
template <typename T>
Model<T> clone_model(const Model<T>& model);

}  // namespace chada
