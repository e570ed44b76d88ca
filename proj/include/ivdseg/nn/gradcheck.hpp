#pragma once

// Central finite-difference verification of Network::backward. The scalar
// probed is L = sum_i r_i * y_i with a fixed random projection r.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ivdseg/nn/network.hpp"
#include "ivdseg/rng.hpp"

namespace ivdseg::nn {

struct GradCheckOptions {
  double h = 1e-5;
  double floor = 1e-6;          // denominator floor for relative error
  std::size_t max_per_array = 64;  // entries probed per parameter array / input
  std::uint64_t seed = 1;
  ForwardContext ctx{};
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // where the worst error occurred
  std::size_t checked = 0;
};

template <typename S>
GradCheckResult check_gradients(Network<S>& net, const Tensor<S>& input, const GradCheckOptions& opt = {}) {
  net.freeze_dropout(true);
  SplitMix64 rng(opt.seed);
  const auto out_shape = net.output_shape(input.dims());
  std::vector<S> proj(shape_size(out_shape));
  for (auto& r : proj) r = static_cast<S>(rng.uniform(-1.0, 1.0));

  auto loss = [&](const Tensor<S>& x) {
    const auto& y = net.forward(x, opt.ctx);
    double l = 0;
    for (std::size_t i = 0; i < y.size(); ++i) l += static_cast<double>(proj[i]) * y[i];
    return l;
  };

  net.zero_grad();
  loss(input);
  net.backward(proj, true);
  const std::vector<S> gin(net.input_grad().begin(), net.input_grad().end());
  std::vector<std::vector<S>> gparams;
  for (auto* p : net.parameters()) gparams.emplace_back(p->grad().begin(), p->grad().end());

  GradCheckResult res;
  auto record = [&](double analytic, double numeric, const std::string& where) {
    const double err = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), opt.floor});
    ++res.checked;
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst = where + " analytic=" + std::to_string(analytic) + " numeric=" + std::to_string(numeric);
    }
  };
  auto probe = [&](std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (n > opt.max_per_array) {
      for (std::size_t i = 0; i < opt.max_per_array; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
      idx.resize(opt.max_per_array);
    }
    return idx;
  };

  Tensor<S> x = input;
  for (auto i : probe(x.size())) {
    const S orig = x[i];
    x[i] = static_cast<S>(orig + opt.h);
    const double lp = loss(x);
    x[i] = static_cast<S>(orig - opt.h);
    const double lm = loss(x);
    x[i] = orig;
    record(gin[i], (lp - lm) / (2 * opt.h), "input[" + std::to_string(i) + "]");
  }
  auto params = net.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto* p = params[k];
    for (auto i : probe(p->size())) {
      const S orig = (*p)[i];
      (*p)[i] = static_cast<S>(orig + opt.h);
      const double lp = loss(input);
      (*p)[i] = static_cast<S>(orig - opt.h);
      const double lm = loss(input);
      (*p)[i] = orig;
      record(gparams[k][i], (lp - lm) / (2 * opt.h),
             "param" + std::to_string(k) + "[" + std::to_string(i) + "]");
    }
  }
  net.freeze_dropout(false);
  return res;
}

}  // namespace ivdseg::nn
