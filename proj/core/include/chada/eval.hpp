#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chada/baselines.hpp"
#include "chada/image.hpp"
#include "chada/random.hpp"
#include "chada/tensor.hpp"

namespace chada {

/// Row-major N x width block of embeddings.
struct Embeddings {
  std::size_t rows = 0;
  std::size_t width = 0;
  std::vector<double> values;

  Embeddings() = default;
  Embeddings(std::size_t rows, std::size_t width) : rows(rows), width(width), values(rows * width, 0.0) {}
  static Embeddings from_tensor(const Tensor<float>& t);
  static Embeddings from_tensor(const Tensor<double>& t);

  std::span<const double> row(std::size_t i) const { return {values.data() + i * width, width}; }
  std::span<double> row(std::size_t i) { return {values.data() + i * width, width}; }
  Embeddings select(std::span<const std::size_t> indices) const;
};

/// Raised when embeddings of different widths are combined.
class WidthMismatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Embeds `images` in batches of `batch` with a frozen model.
Embeddings embed_images(const Model<float>& model, std::span<const MultiChannelImage> images,
                        std::size_t batch = 32);

// ---------------------------------------------------------------- metrics

enum class MetricKind { Top1, R2, Mse, Mae };
MetricKind parse_metric(const std::string& name);
std::string to_string(MetricKind kind);

/// top1 compares rounded values as labels; r2 is 1 - SS_res / SS_tot and
/// throws std::domain_error for a constant target.
double compute_metric(MetricKind kind, std::span<const double> pred, std::span<const double> target);

struct SeedSummary {
  double mean = 0.0;
  double std = 0.0;  // sample deviation, 0 for one value
};
SeedSummary aggregate_seeds(std::span<const double> values);

struct EvalReport {
  std::string task;
  MetricKind metric = MetricKind::Top1;
  std::vector<std::uint64_t> seeds;
  std::vector<double> values;
  SeedSummary summary;

  static EvalReport make(std::string task, MetricKind metric, std::vector<std::uint64_t> seeds,
                         std::vector<double> values);
  /// Report scaling: R2 as 0-100, accuracy as a percentage, errors as is.
  double display_scale() const;
  nlohmann::ordered_json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  /// "77.00 ± 0.38" in display units.
  std::string formatted() const;
};

// ---------------------------------------------------------------- splits

/// Stratified per-class prefix of a seed-determined shuffle, so smaller
/// fractions are subsets of larger ones. At least one index per class.
/// Returned indices are ascending.
std::vector<std::size_t> low_data_split(std::span<const int> labels, double fraction, std::uint64_t seed);

// ---------------------------------------------------------------- probe

struct ProbeConfig {
  std::size_t epochs = 100;
  double lr = 0.1;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  double fraction = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Softmax-linear classifier on standardised features.
struct LinearProbe {
  std::size_t width = 0;
  std::size_t classes = 0;
  std::vector<double> feature_mean, feature_scale;  // x' = (x - mean) * scale
  std::vector<double> weight;                       // classes x width
  std::vector<double> bias;

  std::vector<double> logits(std::span<const double> x) const;
  int predict(std::span<const double> x) const;
  std::vector<int> predict(const Embeddings& x) const;
};

/// Trains only the linear layer (plain SGD with momentum and a cosine
/// schedule). Labels must lie in [0, classes) with at least two distinct
/// values. `config.fraction` is ignored here; see probe_accuracy.
LinearProbe train_linear_probe(const Embeddings& x, std::span<const int> labels, const ProbeConfig& config);

double accuracy(std::span<const int> predicted, std::span<const int> labels);

/// low_data_split on the training labels, probe training, test top-1.
double probe_accuracy(const Embeddings& train_x, std::span<const int> train_y, const Embeddings& test_x,
                      std::span<const int> test_y, const ProbeConfig& config);

// ---------------------------------------------------------------- knn

/// Cosine-distance majority vote. Ties go to the smallest summed distance,
/// then the lowest label. Throws std::invalid_argument if k is 0 or exceeds
/// the training set.
std::vector<int> knn_predict(const Embeddings& train_x, std::span<const int> train_y, const Embeddings& test_x,
                             std::size_t k);
double knn_eval(const Embeddings& train_x, std::span<const int> train_y, const Embeddings& test_x,
                std::span<const int> test_y, std::size_t k = 20);

// ---------------------------------------------------------------- pca

struct PcaResult {
  std::size_t width = 0;
  std::size_t components = 0;
  std::vector<double> mean;             // width
  std::vector<double> basis;            // width x components, column j is component j
  Embeddings projected;                 // rows x components
  std::vector<double> explained_ratio;  // components, non-increasing

  double component(std::size_t row, std::size_t j) const { return basis[row * components + j]; }
  Embeddings project(const Embeddings& x) const;
};

/// Mean-centred SVD. Each component's largest-magnitude entry is positive.
/// Throws std::invalid_argument on fewer than two rows, too many components
/// or zero total variance.
PcaResult pca_fit_project(const Embeddings& x, std::size_t components);

struct JointSpaceResult {
  PcaResult pca;
  double pc1_accuracy = 0.0;  // best single threshold on PC1 for dataset identity
  double pc1_threshold = 0.0;
  bool a_above = true;        // dataset A lies above the threshold
};

/// PCA on the union of two embedding sets; throws WidthMismatchError if the
/// widths differ.
JointSpaceResult joint_space_analysis(const Embeddings& a, const Embeddings& b, std::size_t components = 2);

/// CSV with columns dataset,label,pc1..pcK; rows of A first.
std::string joint_space_csv(const JointSpaceResult& result, const std::string& name_a, std::span<const int> labels_a,
                            const std::string& name_b, std::span<const int> labels_b);

// ---------------------------------------------------------------- decoder

struct DecoderConfig {
  std::size_t input_dim = 192;
  std::size_t output_side = 224;     // divisible by 32
  std::size_t hidden = 0;            // 0: solve for parameter_budget
  std::size_t parameter_budget = 5'200'000;

  std::size_t seed_side() const { return output_side / 32; }
  std::size_t resolved_hidden() const;
  void validate() const;
};

/// Parameter count of the decoder described by `config`.
std::size_t decoder_parameter_count(const DecoderConfig& config);

/// Embedding -> FC -> GELU -> FC -> [64, s, s] -> five (2x upsample, 3x3
/// conv) stages 64-64-32-16-8-1 with GELU between them -> sigmoid.
template <typename T>
struct ChannelDecoder {
  DecoderConfig config;
  Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;
  std::vector<Tensor<T>> conv_w, conv_b;

  static ChannelDecoder init(const DecoderConfig& config, Rng& rng);
  ParamList<T> parameters() const;
  /// [B, input_dim] -> [B, 1, side, side].
  Tensor<T> forward(const Tensor<T>& embeddings) const;
};

struct DecoderTrainConfig {
  std::size_t steps = 500;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct ReconstructionResult {
  ChannelDecoder<float> decoder;
  std::vector<double> loss_history;
  std::uint64_t encoder_checksum_before = 0;
  std::uint64_t encoder_checksum_after = 0;
};

/// The image without `target_channel` as encoder input, the target channel
/// resized to the decoder side as the label.
MultiChannelImage drop_channel(const MultiChannelImage& image, std::size_t target_channel);
std::vector<float> target_plane(const MultiChannelImage& image, std::size_t target_channel, std::size_t side);

/// Trains a decoder with Adam on per-pixel MSE; the encoder is only read.
/// Throws std::invalid_argument for single-channel images or a bad target.
ReconstructionResult train_channel_decoder(const Model<float>& encoder, std::span<const MultiChannelImage> images,
                                           std::size_t target_channel, const DecoderConfig& decoder_config,
                                           const DecoderTrainConfig& train);

/// Decoder predictions for `images`, flattened image by image.
std::vector<double> predict_channel(const Model<float>& encoder, const ChannelDecoder<float>& decoder,
                                    std::span<const MultiChannelImage> images, std::size_t target_channel);

// ---------------------------------------------------------------- baseline

/// Logistic regression on one channel's raw pixels, returning test accuracy.
double single_channel_logistic_accuracy(std::span<const MultiChannelImage> train, std::span<const int> train_y,
                                        std::span<const MultiChannelImage> test, std::span<const int> test_y,
                                        std::size_t channel, const ProbeConfig& config);

}  // namespace chada
