#include "chada/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace chada::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
using NodePtr = std::shared_ptr<detail::TensorNode<T>>;

template <typename T>
Tensor<T> make_output(Shape shape, bool recording) {
  return Tensor<T>(std::move(shape), T(0), recording);
}

template <typename T>
void check_finite([[maybe_unused]] const Tensor<T>& t, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  for (T v : t.values()) {
    if (!std::isfinite(v)) throw NumericalError(std::string(op) + " produced a non-finite value");
  }
#endif
}

/// Gradient buffer of an input, or an empty span when it takes no gradient.
template <typename T>
std::span<T> grad_of(const NodePtr<T>& n) {
  if (!n->requires_grad) return {};
  return n->ensure_grad();
}

template <typename T>
bool has_upstream(const NodePtr<T>& out) {
  return out->grad.size() == out->data.size();
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

template <typename T>
void check_broadcast(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(b.shape()) + " onto " +
                     to_string(a.shape()));
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k) {
    throw ShapeError("matmul inner extents differ: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);

  // Shared B folds all of A's batch into the row axis: one GEMM.
  const bool fold = b_batch.empty();
  const bool share_a = !fold && a_batch.empty();
  if (!fold && !share_a && a_batch != b_batch) {
    throw ShapeError("matmul batch extents are not broadcast-compatible: " + to_string(a.shape()) +
                     " x " + to_string(b.shape()));
  }
  Shape out_shape = fold || !share_a ? a_batch : b_batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  const std::size_t batches = fold ? 1 : numel(share_a ? b_batch : a_batch);
  const std::size_t rows = fold ? numel(a_batch) * m : m;
  const std::size_t a_step = share_a ? 0 : rows * k;
  const std::size_t b_step = fold ? 0 : k * n;

  const bool rec = should_record<T>({&a, &b});
  auto out = make_output<T>(out_shape, rec);
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  T* pc = out.mutable_values().data();
  for (std::size_t i = 0; i < batches; ++i) {
    ConstMatMap<T> A(pa + i * a_step, rows, k);
    ConstMatMap<T> B(pb + i * b_step, k, n);
    MatMap<T> C(pc + i * rows * n, rows, n);
    C.noalias() = A * B;
  }
  check_finite(out, "matmul");
  if (rec) {
    Tape<T>::active()->record([an = a.node(), bn = b.node(), on = out.node(), batches, rows, k, n,
                               a_step, b_step]() {
      if (!has_upstream(on)) return;
      auto ga = grad_of(an);
      auto gb = grad_of(bn);
      for (std::size_t i = 0; i < batches; ++i) {
        ConstMatMap<T> dC(on->grad.data() + i * rows * n, rows, n);
        if (!ga.empty()) {
          ConstMatMap<T> B(bn->data.data() + i * b_step, k, n);
          MatMap<T> dA(ga.data() + i * a_step, rows, k);
          dA.noalias() += dC * B.transpose();
        }
        if (!gb.empty()) {
          ConstMatMap<T> A(an->data.data() + i * a_step, rows, k);
          MatMap<T> dB(gb.data() + i * b_step, k, n);
          dB.noalias() += A.transpose() * dC;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast(a, b, "add");
  const bool rec = should_record<T>({&a, &b});
  auto out = make_output<T>(a.shape(), rec);
  const std::size_t inner = b.size();
  const auto va = a.values();
  const auto vb = b.values();
  auto vo = out.mutable_values();
  for (std::size_t i = 0; i < va.size(); i += inner) {
    for (std::size_t j = 0; j < inner; ++j) vo[i + j] = va[i + j] + vb[j];
  }
  check_finite(out, "add");
  if (rec) {
    Tape<T>::active()->record([an = a.node(), bn = b.node(), on = out.node(), inner]() {
      if (!has_upstream(on)) return;
      const auto& g = on->grad;
      if (auto ga = grad_of(an); !ga.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (auto gb = grad_of(bn); !gb.empty()) {
        for (std::size_t i = 0; i < g.size(); i += inner) {
          for (std::size_t j = 0; j < inner; ++j) gb[j] += g[i + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast(a, b, "sub");
  const bool rec = should_record<T>({&a, &b});
  auto out = make_output<T>(a.shape(), rec);
  const std::size_t inner = b.size();
  const auto va = a.values();
  const auto vb = b.values();
  auto vo = out.mutable_values();
  for (std::size_t i = 0; i < va.size(); i += inner) {
    for (std::size_t j = 0; j < inner; ++j) vo[i + j] = va[i + j] - vb[j];
  }
  check_finite(out, "sub");
  if (rec) {
    Tape<T>::active()->record([an = a.node(), bn = b.node(), on = out.node(), inner]() {
      if (!has_upstream(on)) return;
      const auto& g = on->grad;
      if (auto ga = grad_of(an); !ga.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (auto gb = grad_of(bn); !gb.empty()) {
        for (std::size_t i = 0; i < g.size(); i += inner) {
          for (std::size_t j = 0; j < inner; ++j) gb[j] -= g[i + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast(a, b, "mul");
  const bool rec = should_record<T>({&a, &b});
  auto out = make_output<T>(a.shape(), rec);
  const std::size_t inner = b.size();
  const auto va = a.values();
  const auto vb = b.values();
  auto vo = out.mutable_values();
  for (std::size_t i = 0; i < va.size(); i += inner) {
    for (std::size_t j = 0; j < inner; ++j) vo[i + j] = va[i + j] * vb[j];
  }
  check_finite(out, "mul");
  if (rec) {
    Tape<T>::active()->record([an = a.node(), bn = b.node(), on = out.node(), inner]() {
      if (!has_upstream(on)) return;
      const auto& g = on->grad;
      if (auto ga = grad_of(an); !ga.empty()) {
        for (std::size_t i = 0; i < g.size(); i += inner) {
          for (std::size_t j = 0; j < inner; ++j) ga[i + j] += g[i + j] * bn->data[j];
        }
      }
      if (auto gb = grad_of(bn); !gb.empty()) {
        for (std::size_t i = 0; i < g.size(); i += inner) {
          for (std::size_t j = 0; j < inner; ++j) gb[j] += g[i + j] * an->data[i + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  const bool rec = should_record<T>({&a});
  auto out = make_output<T>(a.shape(), rec);
  const auto va = a.values();
  auto vo = out.mutable_values();
  for (std::size_t i = 0; i < va.size(); ++i) vo[i] = va[i] * factor;
  check_finite(out, "scale");
  if (rec) {
    Tape<T>::active()->record([an = a.node(), on = out.node(), factor]() {
      if (!has_upstream(on)) return;
      if (auto ga = grad_of(an); !ga.empty()) {
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += on->grad[i] * factor;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  const bool rec = should_record<T>({&a});
  auto out = make_output<T>(Shape{}, rec);
  T acc = 0;
  for (T v : a.values()) acc += v;
  out.mutable_values()[0] = acc;
  check_finite(out, "sum");
  if (rec) {
    Tape<T>::active()->record([an = a.node(), on = out.node()]() {
      if (!has_upstream(on)) return;
      if (auto ga = grad_of(an); !ga.empty()) {
        const T g = on->grad[0];
        for (auto& x : ga) x += g;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <typename T>
Tensor<T> mean_lastdim(const Tensor<T>& a) {
  if (a.rank() == 0) throw ShapeError("mean_lastdim on a scalar");
  const std::size_t len = a.dim(-1);
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  const bool rec = should_record<T>({&a});
  auto out = make_output<T>(shape, rec);
  const auto va = a.values();
  auto vo = out.mutable_values();
  const T inv = T(1) / static_cast<T>(len);
  for (std::size_t r = 0; r < vo.size(); ++r) {
    T acc = 0;
    for (std::size_t j = 0; j < len; ++j) acc += va[r * len + j];
    vo[r] = acc * inv;
  }
  if (rec) {
    Tape<T>::active()->record([an = a.node(), on = out.node(), len, inv]() {
      if (!has_upstream(on)) return;
      if (auto ga = grad_of(an); !ga.empty()) {
        for (std::size_t r = 0; r < on->grad.size(); ++r) {
          const T g = on->grad[r] * inv;
          for (std::size_t j = 0; j < len; ++j) ga[r * len + j] += g;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  const bool rec = should_record<T>({&a});
  Tensor<T> out(std::move(shape), std::vector<T>(a.values().begin(), a.values().end()), rec);
  if (rec) {
    Tape<T>::active()->record([an = a.node(), on = out.node()]() {
      if (!has_upstream(on)) return;
      if (auto ga = grad_of(an); !ga.empty()) {
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += on->grad[i];
      }
    });
  }
  return out;
}

namespace {
// Calls fn(out_index, in_index) for every element of the permuted layout.
template <typename Fn>
void for_each_permuted(const Shape& in_shape, const std::vector<std::size_t>& perm, Fn&& fn) {
  const std::size_t r = in_shape.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
  std::vector<std::size_t> out_shape(r), step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[perm[i]];
    step[i] = in_stride[perm[i]];
  }
  const std::size_t total = numel(in_shape);
  std::vector<std::size_t> counter(r, 0);
  std::size_t in_idx = 0;
  for (std::size_t out_idx = 0; out_idx < total; ++out_idx) {
    fn(out_idx, in_idx);
    for (std::size_t ax = r; ax-- > 0;) {
      if (++counter[ax] < out_shape[ax]) {
        in_idx += step[ax];
        break;
      }
      in_idx -= step[ax] * (out_shape[ax] - 1);
      counter[ax] = 0;
    }
  }
}
}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  if (perm.size() != r) throw ShapeError("permute: axis list does not match rank");
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid axis permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.dim(static_cast<int>(perm[i]));
  const bool rec = should_record<T>({&a});
  auto out = make_output<T>(out_shape, rec);
  const auto va = a.values();
  auto vo = out.mutable_values();
  for_each_permuted(a.shape(), perm, [&](std::size_t o, std::size_t i) { vo[o] = va[i]; });
  if (rec) {
    Tape<T>::active()->record([an = a.node(), on = out.node(), perm]() {
      if (!has_upstream(on)) return;
      if (auto ga = grad_of(an); !ga.empty()) {
        for_each_permuted(an->shape, perm,
                          [&](std::size_t o, std::size_t i) { ga[i] += on->grad[o]; });
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  if (a.rank() < 2) throw ShapeError("transpose_last2 needs rank >= 2");
  std::vector<std::size_t> perm(a.rank());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(a, perm);
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() == 0) throw ShapeError("softmax_lastdim on a scalar");
  const std::size_t len = x.dim(-1);
  const bool rec = should_record<T>({&x});
  auto out = make_output<T>(x.shape(), rec);
  const auto vx = x.values();
  auto vo = out.mutable_values();
  for (std::size_t r = 0; r < vx.size(); r += len) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, vx[r + j]);
    if (!std::isfinite(mx)) throw NumericalError("softmax row has no finite entry");
    T total = 0;
    for (std::size_t j = 0; j < len; ++j) {
      vo[r + j] = std::exp(vx[r + j] - mx);
      total += vo[r + j];
    }
    const T inv = T(1) / total;
    for (std::size_t j = 0; j < len; ++j) vo[r + j] *= inv;
  }
  if (rec) {
    Tape<T>::active()->record([xn = x.node(), on = out.node(), len]() {
      if (!has_upstream(on)) return;
      auto gx = grad_of(xn);
      if (gx.empty()) return;
      const auto& y = on->data;
      const auto& g = on->grad;
      for (std::size_t r = 0; r < y.size(); r += len) {
        T dot = 0;
        for (std::size_t j = 0; j < len; ++j) dot += g[r + j] * y[r + j];
        for (std::size_t j = 0; j < len; ++j) gx[r + j] += y[r + j] * (g[r + j] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> log_softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() == 0) throw ShapeError("log_softmax_lastdim on a scalar");
  const std::size_t len = x.dim(-1);
  const bool rec = should_record<T>({&x});
  auto out = make_output<T>(x.shape(), rec);
  const auto vx = x.values();
  auto vo = out.mutable_values();
  for (std::size_t r = 0; r < vx.size(); r += len) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, vx[r + j]);
    if (!std::isfinite(mx)) throw NumericalError("log_softmax row has no finite entry");
    T total = 0;
    for (std::size_t j = 0; j < len; ++j) total += std::exp(vx[r + j] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < len; ++j) vo[r + j] = vx[r + j] - lse;
  }
  if (rec) {
    Tape<T>::active()->record([xn = x.node(), on = out.node(), len]() {
      if (!has_upstream(on)) return;
      auto gx = grad_of(xn);
      if (gx.empty()) return;
      const auto& y = on->data;
      const auto& g = on->grad;
      for (std::size_t r = 0; r < y.size(); r += len) {
        T total = 0;
        for (std::size_t j = 0; j < len; ++j) total += g[r + j];
        for (std::size_t j = 0; j < len; ++j) gx[r + j] += g[r + j] - std::exp(y[r + j]) * total;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm on a scalar");
  const std::size_t len = x.dim(-1);
  if (gamma.shape() != Shape{len} || beta.shape() != Shape{len}) {
    throw ShapeError("layer_norm affine shapes " + to_string(gamma.shape()) + "/" +
                     to_string(beta.shape()) + " do not match input " + to_string(x.shape()));
  }
  const bool rec = should_record<T>({&x, &gamma, &beta});
  auto out = make_output<T>(x.shape(), rec);
  const std::size_t rows = x.size() / len;
  std::vector<T> xhat(x.size());
  std::vector<T> rstd(rows);
  const auto vx = x.values();
  const auto vg = gamma.values();
  const auto vb = beta.values();
  auto vo = out.mutable_values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = vx.data() + r * len;
    T mu = 0;
    for (std::size_t j = 0; j < len; ++j) mu += row[j];
    mu /= static_cast<T>(len);
    T var = 0;
    for (std::size_t j = 0; j < len; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(len);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < len; ++j) {
      const T h = (row[j] - mu) * rs;
      xhat[r * len + j] = h;
      vo[r * len + j] = h * vg[j] + vb[j];
    }
  }
  check_finite(out, "layer_norm");
  if (rec) {
    Tape<T>::active()->record([xn = x.node(), gn = gamma.node(), bn = beta.node(),
                               on = out.node(), xhat = std::move(xhat), rstd = std::move(rstd),
                               len, rows]() {
      if (!has_upstream(on)) return;
      const auto& g = on->grad;
      auto gx = grad_of(xn);
      auto gg = grad_of(gn);
      auto gb = grad_of(bn);
      const T inv_len = T(1) / static_cast<T>(len);
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t o = r * len;
        if (!gg.empty()) {
          for (std::size_t j = 0; j < len; ++j) gg[j] += g[o + j] * xhat[o + j];
        }
        if (!gb.empty()) {
          for (std::size_t j = 0; j < len; ++j) gb[j] += g[o + j];
        }
        if (!gx.empty()) {
          T sum_d = 0, sum_dh = 0;
          for (std::size_t j = 0; j < len; ++j) {
            const T d = g[o + j] * gn->data[j];
            sum_d += d;
            sum_dh += d * xhat[o + j];
          }
          for (std::size_t j = 0; j < len; ++j) {
            const T d = g[o + j] * gn->data[j];
            gx[o + j] += rstd[r] * (d - inv_len * sum_d - xhat[o + j] * inv_len * sum_dh);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const bool rec = should_record<T>({&x});
  auto out = make_output<T>(x.shape(), rec);
  const auto vx = x.values();
  auto vo = out.mutable_values();
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < vx.size(); ++i) {
    vo[i] = T(0.5) * vx[i] * (T(1) + std::erf(vx[i] * inv_sqrt2));
  }
  check_finite(out, "gelu");
  if (rec) {
    Tape<T>::active()->record([xn = x.node(), on = out.node(), inv_sqrt2]() {
      if (!has_upstream(on)) return;
      auto gx = grad_of(xn);
      if (gx.empty()) return;
      const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const T v = xn->data[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        gx[i] += on->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  const bool rec = should_record<T>({&x});
  auto out = make_output<T>(x.shape(), rec);
  const auto vx = x.values();
  auto vo = out.mutable_values();
  for (std::size_t i = 0; i < vx.size(); ++i) vo[i] = vx[i] > T(0) ? vx[i] : T(0);
  if (rec) {
    Tape<T>::active()->record([xn = x.node(), on = out.node()]() {
      if (!has_upstream(on)) return;
      auto gx = grad_of(xn);
      if (gx.empty()) return;
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (xn->data[i] > T(0)) gx[i] += on->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  const bool rec = should_record<T>({&x});
  auto out = make_output<T>(x.shape(), rec);
  const auto vx = x.values();
  auto vo = out.mutable_values();
  for (std::size_t i = 0; i < vx.size(); ++i) {
    // Branch keeps exp() from overflowing for large |x|.
    if (vx[i] >= T(0)) {
      vo[i] = T(1) / (T(1) + std::exp(-vx[i]));
    } else {
      const T e = std::exp(vx[i]);
      vo[i] = e / (T(1) + e);
    }
  }
  if (rec) {
    Tape<T>::active()->record([xn = x.node(), on = out.node()]() {
      if (!has_upstream(on)) return;
      auto gx = grad_of(xn);
      if (gx.empty()) return;
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const T y = on->data[i];
        gx[i] += on->grad[i] * y * (T(1) - y);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mask_keys(const Tensor<T>& scores, std::span<const std::uint8_t> keep) {
  if (scores.rank() < 2) throw ShapeError("mask_keys needs [B, ..., Tk] scores");
  const std::size_t batch = scores.dim(0);
  const std::size_t keys = scores.dim(-1);
  if (keep.size() != batch * keys) {
    throw ShapeError("mask_keys: mask has " + std::to_string(keep.size()) +
                     " entries, scores " + to_string(scores.shape()) + " need " +
                     std::to_string(batch * keys));
  }
  const bool rec = should_record<T>({&scores});
  auto out = make_output<T>(scores.shape(), rec);
  const std::size_t per_batch = scores.size() / batch;
  const auto vs = scores.values();
  auto vo = out.mutable_values();
  constexpr T kNegInf = -std::numeric_limits<T>::infinity();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::uint8_t* kb = keep.data() + b * keys;
    const std::size_t base = b * per_batch;
    for (std::size_t i = 0; i < per_batch; i += keys) {
      for (std::size_t j = 0; j < keys; ++j) {
        vo[base + i + j] = kb[j] ? vs[base + i + j] : kNegInf;
      }
    }
  }
  if (rec) {
    std::vector<std::uint8_t> kept(keep.begin(), keep.end());
    Tape<T>::active()->record([sn = scores.node(), on = out.node(), kept = std::move(kept), keys,
                               per_batch, batch]() {
      if (!has_upstream(on)) return;
      auto gs = grad_of(sn);
      if (gs.empty()) return;
      for (std::size_t b = 0; b < batch; ++b) {
        const std::uint8_t* kb = kept.data() + b * keys;
        const std::size_t base = b * per_batch;
        for (std::size_t i = 0; i < per_batch; i += keys) {
          for (std::size_t j = 0; j < keys; ++j) {
            if (kb[j]) gs[base + i + j] += on->grad[base + i + j];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> rows) {
  if (table.rank() != 2) throw ShapeError("gather_rows needs a 2-D table, got " +
                                          to_string(table.shape()));
  if (rows.empty()) throw ShapeError("gather_rows with no rows");
  const std::size_t n = table.dim(0), width = table.dim(1);
  for (auto r : rows) {
    if (r >= n) {
      throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range for table " +
                       to_string(table.shape()));
    }
  }
  const bool rec = should_record<T>({&table});
  auto out = make_output<T>(Shape{rows.size(), width}, rec);
  const auto vt = table.values();
  auto vo = out.mutable_values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(vt.data() + rows[i] * width, width, vo.data() + i * width);
  }
  if (rec) {
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    Tape<T>::active()->record([tn = table.node(), on = out.node(), idx = std::move(idx), width]() {
      if (!has_upstream(on)) return;
      auto gt = grad_of(tn);
      if (gt.empty()) return;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t j = 0; j < width; ++j) gt[idx[i] * width + j] += on->grad[i * width + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows with no inputs");
  const Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t total_rows = 0;
  bool rec = false;
  for (const auto& p : parts) {
    if (p.rank() == 0 || Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw ShapeError("concat_rows: incompatible part " + to_string(p.shape()) + " vs " +
                       to_string(parts[0].shape()));
    }
    total_rows += p.dim(0);
    rec = rec || should_record<T>({&p});
  }
  Shape shape = parts[0].shape();
  shape[0] = total_rows;
  auto out = make_output<T>(shape, rec);
  auto vo = out.mutable_values();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(), vo.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.size();
  }
  if (rec) {
    std::vector<NodePtr<T>> nodes;
    nodes.reserve(parts.size());
    for (const auto& p : parts) nodes.push_back(p.node());
    Tape<T>::active()->record([nodes = std::move(nodes), on = out.node()]() {
      if (!has_upstream(on)) return;
      std::size_t off = 0;
      for (const auto& n : nodes) {
        if (auto g = grad_of(n); !g.empty()) {
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[off + i];
        }
        off += n->data.size();
      }
    });
  }
  return out;
}

namespace {
struct ConvGeometry {
  std::size_t batch, channels, height, width, out_channels, kernel, stride, padding, out_h, out_w;
  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t positions() const { return out_h * out_w; }
};

// cols[(b * positions + y * out_w + x), (c * k + ky) * k + kx]
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  const std::size_t pk = g.patch();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        T* row = cols + ((b * g.out_h + oy) * g.out_w + ox) * pk;
        for (std::size_t c = 0; c < g.channels; ++c) {
          const T* plane = x + (b * g.channels + c) * g.height * g.width;
          for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.padding);
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                              static_cast<std::ptrdiff_t>(g.padding);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                  ix < static_cast<std::ptrdiff_t>(g.width);
              *row++ = inside ? plane[static_cast<std::size_t>(iy) * g.width +
                                      static_cast<std::size_t>(ix)]
                              : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* cols, std::span<T> dx) {
  const std::size_t pk = g.patch();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        const T* row = cols + ((b * g.out_h + oy) * g.out_w + ox) * pk;
        for (std::size_t c = 0; c < g.channels; ++c) {
          T* plane = dx.data() + (b * g.channels + c) * g.height * g.width;
          for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.padding);
            for (std::size_t kx = 0; kx < g.kernel; ++kx, ++row) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                              static_cast<std::ptrdiff_t>(g.padding);
              if (iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                  ix < static_cast<std::ptrdiff_t>(g.width)) {
                plane[static_cast<std::size_t>(iy) * g.width + static_cast<std::size_t>(ix)] += *row;
              }
            }
          }
        }
      }
    }
  }
}
}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(2) != weight.dim(3) ||
      weight.dim(1) != x.dim(1) || bias.shape() != Shape{weight.dim(0)} || stride == 0) {
    throw ShapeError("conv2d: input " + to_string(x.shape()) + ", weight " +
                     to_string(weight.shape()) + ", bias " + to_string(bias.shape()));
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2),
                 stride, padding, 0, 0};
  if (g.height + 2 * padding < g.kernel || g.width + 2 * padding < g.kernel) {
    throw ShapeError("conv2d: kernel larger than padded input " + to_string(x.shape()));
  }
  g.out_h = (g.height + 2 * padding - g.kernel) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kernel) / stride + 1;

  const std::size_t rows = g.batch * g.positions();
  std::vector<T> cols(rows * g.patch());
  im2col(g, x.values().data(), cols.data());
  RowMat<T> result(rows, g.out_channels);
  {
    ConstMatMap<T> C(cols.data(), rows, g.patch());
    ConstMatMap<T> W(weight.values().data(), g.out_channels, g.patch());
    result.noalias() = C * W.transpose();
  }
  const bool rec = should_record<T>({&x, &weight, &bias});
  auto out = make_output<T>(Shape{g.batch, g.out_channels, g.out_h, g.out_w}, rec);
  auto vo = out.mutable_values();
  const auto vb = bias.values();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      T* plane = vo.data() + (b * g.out_channels + o) * g.positions();
      for (std::size_t p = 0; p < g.positions(); ++p) {
        plane[p] = result(static_cast<Eigen::Index>(b * g.positions() + p),
                          static_cast<Eigen::Index>(o)) + vb[o];
      }
    }
  }
  check_finite(out, "conv2d");
  if (rec) {
    Tape<T>::active()->record([xn = x.node(), wn = weight.node(), bn = bias.node(),
                               on = out.node(), cols = std::move(cols), g, rows]() {
      if (!has_upstream(on)) return;
      RowMat<T> d_rows(rows, g.out_channels);
      for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t o = 0; o < g.out_channels; ++o) {
          const T* plane = on->grad.data() + (b * g.out_channels + o) * g.positions();
          for (std::size_t p = 0; p < g.positions(); ++p) {
            d_rows(static_cast<Eigen::Index>(b * g.positions() + p), static_cast<Eigen::Index>(o)) =
                plane[p];
          }
        }
      }
      if (auto gw = grad_of(wn); !gw.empty()) {
        ConstMatMap<T> C(cols.data(), rows, g.patch());
        MatMap<T> dW(gw.data(), g.out_channels, g.patch());
        dW.noalias() += d_rows.transpose() * C;
      }
      if (auto gb = grad_of(bn); !gb.empty()) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t o = 0; o < g.out_channels; ++o) {
            gb[o] += d_rows(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(o));
          }
        }
      }
      if (auto gx = grad_of(xn); !gx.empty()) {
        ConstMatMap<T> W(wn->data.data(), g.out_channels, g.patch());
        RowMat<T> d_cols = d_rows * W;
        col2im_add(g, d_cols.data(), gx);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("upsample_nearest2x needs [B,C,H,W], got " +
                                      to_string(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const bool rec = should_record<T>({&x});
  auto out = make_output<T>(Shape{x.dim(0), x.dim(1), 2 * h, 2 * w}, rec);
  const auto vx = x.values();
  auto vo = out.mutable_values();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t c = 0; c < 2 * w; ++c) {
        vo[(p * 2 * h + y) * 2 * w + c] = vx[(p * h + y / 2) * w + c / 2];
      }
    }
  }
  if (rec) {
    Tape<T>::active()->record([xn = x.node(), on = out.node(), planes, h, w]() {
      if (!has_upstream(on)) return;
      auto gx = grad_of(xn);
      if (gx.empty()) return;
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t y = 0; y < 2 * h; ++y) {
          for (std::size_t c = 0; c < 2 * w; ++c) {
            gx[(p * h + y / 2) * w + c / 2] += on->grad[(p * 2 * h + y) * 2 * w + c];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> l2_normalize_lastdim(const Tensor<T>& x, T eps) {
  if (x.rank() == 0) throw ShapeError("l2_normalize_lastdim on a scalar");
  const std::size_t len = x.dim(-1), rows = x.size() / len;
  const bool rec = should_record<T>({&x});
  auto out = make_output<T>(x.shape(), rec);
  const auto vx = x.values();
  auto vo = out.mutable_values();
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < len; ++j) ss += vx[r * len + j] * vx[r * len + j];
    norms[r] = std::max(std::sqrt(ss), eps);
    for (std::size_t j = 0; j < len; ++j) vo[r * len + j] = vx[r * len + j] / norms[r];
  }
  if (rec) {
    Tape<T>::active()->record([xn = x.node(), on = out.node(), len, norms = std::move(norms), eps]() {
      if (!has_upstream(on)) return;
      auto gx = grad_of(xn);
      if (gx.empty()) return;
      const auto& y = on->data;
      const auto& g = on->grad;
      for (std::size_t r = 0; r < norms.size(); ++r) {
        const T inv = T(1) / norms[r];
        if (norms[r] == eps) {  // clamped: y = x / eps
          for (std::size_t j = 0; j < len; ++j) gx[r * len + j] += g[r * len + j] * inv;
          continue;
        }
        T dot = 0;
        for (std::size_t j = 0; j < len; ++j) dot += g[r * len + j] * y[r * len + j];
        for (std::size_t j = 0; j < len; ++j) gx[r * len + j] += (g[r * len + j] - y[r * len + j] * dot) * inv;
      }
    });
  }
  return out;
}

#define CHADA_INSTANTIATE_OPS(T)                                                               \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                   \
  template Tensor<T> mean_lastdim(const Tensor<T>&);                                           \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);               \
  template Tensor<T> transpose_last2(const Tensor<T>&);                                        \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                                        \
  template Tensor<T> log_softmax_lastdim(const Tensor<T>&);                                    \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);      \
  template Tensor<T> gelu(const Tensor<T>&);                                                   \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> mask_keys(const Tensor<T>&, std::span<const std::uint8_t>);               \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);              \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                               \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, \
                            std::size_t);                                                      \
  template Tensor<T> upsample_nearest2x(const Tensor<T>&);                                     \
  template Tensor<T> l2_normalize_lastdim(const Tensor<T>&, T);

CHADA_INSTANTIATE_OPS(float)
CHADA_INSTANTIATE_OPS(double)

}  // namespace chada::ops
