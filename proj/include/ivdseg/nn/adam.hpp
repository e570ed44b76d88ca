#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ivdseg/error.hpp"
#include "ivdseg/nn/tensor.hpp"

namespace ivdseg::nn {

template <typename S>
struct AdamState {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t t = 0;
  std::vector<std::vector<S>> m, v;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One bias-corrected Adam update. Gradients are checked for finiteness before
/// any parameter is touched.
template <typename S>
void adam_step(const std::vector<Tensor<S>*>& params, AdamState<S>& st) {
  if (st.m.empty() && st.v.empty()) {
    for (auto* p : params) {
      st.m.emplace_back(p->size(), S(0));
      st.v.emplace_back(p->size(), S(0));
    }
  }
  if (st.m.size() != params.size() || st.v.size() != params.size())
    throw ShapeError("adam: state holds " + std::to_string(st.m.size()) + " arrays for " +
                     std::to_string(params.size()) + " parameters");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto* p = params[k];
    if (st.m[k].size() != p->size() || st.v[k].size() != p->size() || p->grad().size() != p->size())
      throw ShapeError("adam: moment/gradient size mismatch for parameter " + std::to_string(k));
    for (auto g : p->grad())
      if (!std::isfinite(g)) throw OptimizerError("adam: non-finite gradient in parameter " + std::to_string(k));
  }
  ++st.t;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k]->values();
    const auto g = params[k]->grad();
    auto& m = st.m[k];
    auto& v = st.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = st.beta1 * m[i] + (1.0 - st.beta1) * gi;
      const double vi = st.beta2 * v[i] + (1.0 - st.beta2) * gi * gi;
      m[i] = static_cast<S>(mi);
      v[i] = static_cast<S>(vi);
      w[i] = static_cast<S>(w[i] - st.lr * (mi / c1) / (std::sqrt(vi / c2) + st.epsilon));
    }
  }
}

}  // namespace ivdseg::nn
