#pragma once

#include <cstddef>
#include <vector>

#include "chada/tensor.hpp"

namespace chada {

/// Plain gradient descent with decoupled weight decay.
template <typename T>
void sgd_step(ParamList<T>& params, double lr, double weight_decay = 0.0);

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.04;
};

/// AdamW with bias-corrected moments. Weight decay skips rank-1 tensors
/// (biases, norm offsets/scales, the CLS vector).
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWOptions options = {}) : options_(options) {}

  /// Applies one update using the gradients currently stored in params.
  /// Throws NumericalError naming the first parameter with a non-finite gradient.
  void step(ParamList<T>& params, double lr);

  std::size_t steps() const { return steps_; }
  const AdamWOptions& options() const { return options_; }

  // Moment buffers, exposed for checkpointing. Empty until the first step.
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  void set_steps(std::size_t steps) { steps_ = steps; }

 private:
  AdamWOptions options_;
  std::size_t steps_ = 0;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
};

/// Global L2 norm over all gradient buffers.
template <typename T>
double grad_norm(const ParamList<T>& params);

}  // namespace chada
