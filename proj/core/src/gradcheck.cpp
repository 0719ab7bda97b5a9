#include "chada/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "chada/random.hpp"

namespace chada {

template <typename T>
GradCheckResult finite_diff_check(const std::function<Tensor<T>()>& loss_fn, ParamList<T>& params,
                                  const GradCheckOptions& options) {
  std::vector<bool> previous(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    previous[i] = params[i].tensor.requires_grad();
    params[i].tensor.set_requires_grad(true);
    params[i].tensor.zero_grad();
  }

  {
    Tape<T> tape;
    Tensor<T> loss;
    {
      typename Tape<T>::Recording rec(tape);
      loss = loss_fn();
    }
    tape.backward(loss);
  }

  auto evaluate = [&loss_fn]() { return static_cast<double>(loss_fn().item()); };
  const double base = evaluate();
  if (evaluate() != base) {
    throw NonDeterministicError("finite_diff_check: loss function is not deterministic");
  }

  GradCheckResult result;
  Rng rng(options.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    const std::vector<T> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    std::vector<std::size_t> coords(p.tensor.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > options.coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.coords_per_tensor);
    }
    auto values = p.tensor.mutable_values();
    for (auto c : coords) {
      const T original = values[c];
      values[c] = static_cast<T>(original + options.eps);
      const double plus = evaluate();
      values[c] = static_cast<T>(original - options.eps);
      const double minus = evaluate();
      values[c] = original;
      const double central = (plus - minus) / (2.0 * options.eps);
      const double ga = analytic[c];
      const double abs_err = std::abs(ga - central);
      const double rel_err = abs_err / std::max(1e-8, std::abs(ga) + std::abs(central));
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      if (rel_err > result.max_rel_error || result.coords_checked == 0) {
        result.max_rel_error = std::max(result.max_rel_error, rel_err);
        result.worst_param = p.name;
        result.worst_index = c;
      }
      ++result.coords_checked;
    }
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].tensor.set_requires_grad(previous[i]);
  }
  return result;
}

template <typename T>
GradCheckResult finite_diff_check(const std::function<Tensor<T>()>& loss_fn, Tensor<T>& theta,
                                  const GradCheckOptions& options) {
  ParamList<T> params{{"theta", theta}};
  return finite_diff_check(loss_fn, params, options);
}

template GradCheckResult finite_diff_check(const std::function<Tensor<float>()>&,
                                           ParamList<float>&, const GradCheckOptions&);
template GradCheckResult finite_diff_check(const std::function<Tensor<double>()>&,
                                           ParamList<double>&, const GradCheckOptions&);
template GradCheckResult finite_diff_check(const std::function<Tensor<float>()>&, Tensor<float>&,
                                           const GradCheckOptions&);
template GradCheckResult finite_diff_check(const std::function<Tensor<double>()>&,
                                           Tensor<double>&, const GradCheckOptions&);

}  // namespace chada
