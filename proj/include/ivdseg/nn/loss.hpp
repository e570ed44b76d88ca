#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ivdseg/error.hpp"

namespace ivdseg::nn {

template <typename S>
struct DiceResult {
  double coefficient = 0.0;  // E; training minimizes 1 - E
  std::vector<S> grad;       // dE/dP
};

/// Smoothed Dice coefficient E = (2 sum(P*T) + s) / (sum(T) + sum(P) + s) over
/// all elements. Sums accumulate in double.
template <typename S>
DiceResult<S> dice_coefficient(std::span<const S> p, std::span<const S> t, double smooth = 1.0) {
  if (p.size() != t.size())
    throw ShapeError("dice: prediction has " + std::to_string(p.size()) + " elements, target " +
                     std::to_string(t.size()));
  double inter = 0, sp = 0, st = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += static_cast<double>(p[i]) * t[i];
    sp += p[i];
    st += t[i];
  }
  const double num = 2.0 * inter + smooth;
  const double den = st + sp + smooth;
  DiceResult<S> r;
  r.coefficient = num / den;
  r.grad.resize(p.size());
  const double a = 2.0 / den, b = num / (den * den);
  for (std::size_t i = 0; i < p.size(); ++i) r.grad[i] = static_cast<S>(a * t[i] - b);
  return r;
}

/// Loss 1 - E with its gradient with respect to P.
template <typename S>
DiceResult<S> dice_loss(std::span<const S> p, std::span<const S> t, double smooth = 1.0) {
  auto r = dice_coefficient(p, t, smooth);
  r.coefficient = 1.0 - r.coefficient;
  for (auto& g : r.grad) g = -g;
  return r;
}

}  // namespace ivdseg::nn
