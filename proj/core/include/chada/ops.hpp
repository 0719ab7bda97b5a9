#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "chada/tensor.hpp"

// Differentiable primitives. Every op records a backward closure on the active
// tape when at least one input requires gradients. Accumulation order inside
// each kernel is fixed, so results are bitwise reproducible on one thread.
namespace chada::ops {

/// Batched matrix product over the last two axes.
///
/// Batch axes must either match exactly or be absent on one side (the 2-D
/// operand is then shared across the batch).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Elementwise with suffix broadcasting: b's shape must equal a's shape or a
// trailing suffix of it (e.g. a bias row added to every token).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);
/// Mean over the last axis; drops it.
template <typename T>
Tensor<T> mean_lastdim(const Tensor<T>& a);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);
/// out.shape[i] = a.shape[perm[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm);
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a);

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);
template <typename T>
Tensor<T> log_softmax_lastdim(const Tensor<T>& x);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

/// Exact x * Phi(x) with the Gaussian CDF computed through erf.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// Sets scores[b, ..., k] to -inf wherever keep[b * Tk + k] == 0.
///
/// scores has shape [B, ..., Tk]; keep has B * Tk entries. Excluded entries
/// receive no gradient.
template <typename T>
Tensor<T> mask_keys(const Tensor<T>& scores, std::span<const std::uint8_t> keep);

/// out[r] = table[rows[r]] for a 2-D table; backward scatter-adds.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> rows);

/// Concatenation along axis 0; trailing extents must agree.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);

/// 2-D cross-correlation over [B, C, H, W] with weight [O, C, k, k] and bias [O].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding);

/// Nearest-neighbour 2x upsampling of [B, C, H, W].
template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x);

/// x / max(||x||, eps) over the last axis.
template <typename T>
Tensor<T> l2_normalize_lastdim(const Tensor<T>& x, T eps = T(1e-12));

/// Affine map over the last axis: x[..., in] * w[in, out] + b[out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return add(matmul(x, weight), bias);
}

}  // namespace chada::ops
