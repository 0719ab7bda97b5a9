#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

#include "chada/tensor.hpp"

namespace chada {

class NonDeterministicError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckOptions {
  double eps = 1e-5;
  /// Coordinates sampled per parameter tensor; tensors smaller than this are
  /// checked exhaustively.
  std::size_t coords_per_tensor = 100;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coords_checked = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
};

/// Compares tape gradients of loss_fn against central differences
/// (f(x + eps) - f(x - eps)) / (2 eps) on sampled coordinates of every tensor in
/// params. Relative error is |ga - gc| / max(1e-8, |ga| + |gc|).
///
/// loss_fn must build its graph from the tensors in params and be
/// deterministic; a mismatch between two plain evaluations raises
/// NonDeterministicError.
template <typename T>
GradCheckResult finite_diff_check(const std::function<Tensor<T>()>& loss_fn, ParamList<T>& params,
                                  const GradCheckOptions& options = {});

/// Single-tensor convenience overload.
template <typename T>
GradCheckResult finite_diff_check(const std::function<Tensor<T>()>& loss_fn, Tensor<T>& theta,
                                  const GradCheckOptions& options = {});

}  // namespace chada
