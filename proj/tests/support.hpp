#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "ffx/autograd.hpp"
#include "ffx/ops.hpp"
#include "ffx/tensor.hpp"

namespace ffx::testing {

inline Tensor uniform(Shape shape, Rng& rng, bool requires_grad = true, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<real>(dist(rng));
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Like uniform() but keeps every entry at least `gap` away from zero, so
// relu-style kinks are not straddled by a finite-difference probe.
inline Tensor uniform_away_from_zero(Shape shape, Rng& rng, double gap = 0.05, bool requires_grad = true) {
  Tensor t = uniform(std::move(shape), rng, requires_grad);
  for (auto& x : t.mutable_data())
    if (std::abs(x) < gap) x = x < 0 ? -gap - std::abs(x) : gap + x;
  return t;
}

inline double rel_err(double a, double b, double floor = 1e-4) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Max relative error between analytic gradients (one backward pass through
// the tape) and central differences. `probes` limits how many entries of
// each parameter are checked; 0 checks all of them.
inline double grad_check(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& params, double h = 1e-5,
                         std::size_t probes = 0, unsigned seed = 1) {
  for (Tensor p : params) p.clear_grad();
  Tape::current().clear();
  backward(loss_fn());
  double worst = 0;
  std::mt19937_64 pick(seed);
  for (Tensor p : params) {
    std::vector<real> analytic(p.numel(), real{0});
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    std::vector<std::size_t> idx(p.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (probes && probes < idx.size()) {
      std::shuffle(idx.begin(), idx.end(), pick);
      idx.resize(probes);
    }
    for (std::size_t i : idx) {
      auto data = p.mutable_data();
      const real saved = data[i];
      double plus, minus;
      {
        NoGradGuard guard;
        data[i] = saved + static_cast<real>(h);
        plus = loss_fn().item();
        data[i] = saved - static_cast<real>(h);
        minus = loss_fn().item();
      }
      data[i] = saved;
      worst = std::max(worst, rel_err(analytic[i], (plus - minus) / (2 * h)));
    }
  }
  for (Tensor p : params) p.clear_grad();
  return worst;
}

// Contracts an arbitrary output with a fixed random tensor so every output
// entry contributes a distinct weight to the scalar loss.
inline Tensor probe_loss(const Tensor& y, const Tensor& weights) { return sum(mul(y, weights)); }

}  // namespace ffx::testing
