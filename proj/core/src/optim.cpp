#include "chada/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace chada {
namespace {

template <typename T>
void require_finite_grads(const ParamList<T>& params) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
}

}  // namespace

template <typename T>
void sgd_step(ParamList<T>& params, double lr, double weight_decay) {
  if (!(lr >= 0.0)) throw std::invalid_argument("sgd_step: learning rate must be >= 0");
  require_finite_grads(params);
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    auto w = p.tensor.mutable_values();
    auto g = p.tensor.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double decayed = static_cast<double>(w[i]) * (1.0 - lr * weight_decay);
      w[i] = static_cast<T>(decayed - lr * static_cast<double>(g[i]));
    }
  }
}

template <typename T>
void AdamW<T>::step(ParamList<T>& params, double lr) {
  if (!(lr >= 0.0)) throw std::invalid_argument("AdamW: learning rate must be >= 0");
  require_finite_grads(params);
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].tensor.size(), T(0));
      v_[i].assign(params[i].tensor.size(), T(0));
    }
  }
  if (m_.size() != params.size()) {
    throw std::invalid_argument("AdamW: parameter list changed size between steps");
  }
  ++steps_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (m_[i].size() != p.tensor.size()) {
      throw std::invalid_argument("AdamW: moment size mismatch for '" + p.name + "'");
    }
    if (!p.tensor.has_grad()) continue;
    const double wd = p.tensor.rank() >= 2 ? options_.weight_decay : 0.0;
    auto w = p.tensor.mutable_values();
    auto g = p.tensor.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = (mj / bc1) / (std::sqrt(vj / bc2) + options_.eps);
      w[j] = static_cast<T>(static_cast<double>(w[j]) * (1.0 - lr * wd) - lr * update);
    }
  }
}

template <typename T>
double grad_norm(const ParamList<T>& params) {
  double acc = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) acc += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(acc);
}

template void sgd_step(ParamList<float>&, double, double);
template void sgd_step(ParamList<double>&, double, double);
template class AdamW<float>;
template class AdamW<double>;
template double grad_norm(const ParamList<float>&);
template double grad_norm(const ParamList<double>&);

}  // namespace chada
