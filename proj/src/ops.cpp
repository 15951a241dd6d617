#include "ffx/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ffx/autograd.hpp"
#include "ffx/counters.hpp"
#include "ffx/error.hpp"

namespace ffx {

namespace {

using RowMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using Stride = Eigen::OuterStride<>;
using ConstStrided = Eigen::Map<const RowMat, 0, Stride>;
using MutStrided = Eigen::Map<RowMat, 0, Stride>;

ConstMap as_matrix(std::span<const real> s, std::size_t r, std::size_t c) {
  return ConstMap(s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MutMap as_matrix(std::span<real> s, std::size_t r, std::size_t c) {
  return MutMap(s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

Tensor make_out(Shape shape, std::vector<real> data, bool grad) {
  return Tensor::from(std::move(shape), std::move(data), grad);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

void require_2d(const Tensor& a, const char* op) {
  if (a.ndim() != 2) throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(a.shape()));
}

// Accumulates into t's gradient only when t participates in differentiation.
template <class F>
void accumulate(const Tensor& t, F&& f) {
  if (t.requires_grad()) f(t.mutable_grad());
}

template <class Fwd, class Bwd>
Tensor unary(const Tensor& a, const char* name, Fwd fwd, Bwd bwd) {
  auto in = a.data();
  std::vector<real> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  const bool grad = needs_grad({&a});
  Tensor y = make_out(a.shape(), std::move(out), grad);
  if (grad) {
    Tape::current().record(name, [a, y, bwd]() mutable {
      if (!y.has_grad()) return;
      accumulate(a, [&](std::span<real> ga) {
        auto x = a.data();
        auto yv = y.data();
        auto gy = y.grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bwd(x[i], yv[i]);
      });
    });
  }
  return y;
}

}  // namespace

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<real> out(m * n);
  as_matrix(std::span<real>(out), m, n).noalias() = as_matrix(a.data(), m, k) * as_matrix(b.data(), k, n);
  count_macs(static_cast<std::uint64_t>(m) * k * n);
  const bool grad = needs_grad({&a, &b});
  Tensor y = make_out({m, n}, std::move(out), grad);
  if (grad) {
    Tape::current().record("matmul", [a, b, y, m, k, n]() mutable {
      if (!y.has_grad()) return;
      auto gy = as_matrix(y.grad(), m, n);
      accumulate(a, [&](std::span<real> g) { as_matrix(g, m, k).noalias() += gy * as_matrix(b.data(), k, n).transpose(); });
      accumulate(b, [&](std::span<real> g) { as_matrix(g, k, n).noalias() += as_matrix(a.data(), m, k).transpose() * gy; });
    });
  }
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w) {
  require_2d(x, "linear");
  require_2d(w, "linear");
  const std::size_t n = x.dim(0), in = x.dim(1), out_f = w.dim(0);
  if (w.dim(1) != in)
    throw DimensionError("linear: input width " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  std::vector<real> out(n * out_f);
  as_matrix(std::span<real>(out), n, out_f).noalias() =
      as_matrix(x.data(), n, in) * as_matrix(w.data(), out_f, in).transpose();
  count_macs(static_cast<std::uint64_t>(n) * in * out_f);
  const bool grad = needs_grad({&x, &w});
  Tensor y = make_out({n, out_f}, std::move(out), grad);
  if (grad) {
    Tape::current().record("linear", [x, w, y, n, in, out_f]() mutable {
      if (!y.has_grad()) return;
      auto gy = as_matrix(y.grad(), n, out_f);
      accumulate(x, [&](std::span<real> g) { as_matrix(g, n, in).noalias() += gy * as_matrix(w.data(), out_f, in); });
      accumulate(w, [&](std::span<real> g) { as_matrix(g, out_f, in).noalias() += gy.transpose() * as_matrix(x.data(), n, in); });
    });
  }
  return y;
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  const std::size_t n = x.rows(), d = x.cols();
  if (b.numel() != d)
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match rows of " + shape_str(x.shape()));
  std::vector<real> out(x.data().begin(), x.data().end());
  auto bv = b.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += bv[c];
  const bool grad = needs_grad({&x, &b});
  Tensor y = make_out(x.shape(), std::move(out), grad);
  if (grad) {
    Tape::current().record("add_bias", [x, b, y, n, d]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      accumulate(x, [&](std::span<real> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
      });
      accumulate(b, [&](std::span<real> g) {
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < d; ++c) g[c] += gy[r * d + c];
      });
    });
  }
  return y;
}

// ---------------------------------------------------------------- elementwise

namespace {

template <class Fwd, class GradA, class GradB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, GradA ga_fn, GradB gb_fn) {
  require_same_shape(a, b, name);
  auto av = a.data();
  auto bv = b.data();
  std::vector<real> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);
  const bool grad = needs_grad({&a, &b});
  Tensor y = make_out(a.shape(), std::move(out), grad);
  if (grad) {
    Tape::current().record(name, [a, b, y, ga_fn, gb_fn]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto av = a.data();
      auto bv = b.data();
      accumulate(a, [&](std::span<real> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * ga_fn(av[i], bv[i]);
      });
      accumulate(b, [&](std::span<real> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * gb_fn(av[i], bv[i]);
      });
    });
  }
  return y;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](real x, real y) { return x + y; }, [](real, real) { return real{1}; },
      [](real, real) { return real{1}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](real x, real y) { return x - y; }, [](real, real) { return real{1}; },
      [](real, real) { return real{-1}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](real x, real y) { return x * y; }, [](real, real y) { return y; },
      [](real x, real) { return x; });
}

Tensor scale(const Tensor& a, real c) {
  return unary(a, "scale", [c](real x) { return c * x; }, [c](real, real) { return c; });
}

Tensor add_scalar(const Tensor& a, real c) {
  return unary(a, "add_scalar", [c](real x) { return x + c; }, [](real, real) { return real{1}; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](real x) { return x > 0 ? x : real{0}; }, [](real x, real) { return x > 0 ? real{1} : real{0}; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](real x) {
        if (x >= 0) return real{1} / (real{1} + std::exp(-x));
        const real e = std::exp(x);
        return e / (real{1} + e);
      },
      [](real, real y) { return y * (real{1} - y); });
}

Tensor softplus(const Tensor& a) {
  return unary(
      a, "softplus", [](real x) { return std::max(x, real{0}) + std::log1p(std::exp(-std::abs(x))); },
      [](real x, real) {
        if (x >= 0) return real{1} / (real{1} + std::exp(-x));
        const real e = std::exp(x);
        return e / (real{1} + e);
      });
}

Tensor exp(const Tensor& a) {
  return unary(a, "exp", [](real x) { return std::exp(x); }, [](real, real y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, "log", [](real x) { return std::log(x); }, [](real x, real) { return real{1} / x; });
}

Tensor mask_mul(const Tensor& a, std::vector<real> mask) {
  if (mask.size() != a.numel())
    throw DimensionError("mask_mul: mask of " + std::to_string(mask.size()) + " entries for tensor " +
                         shape_str(a.shape()));
  auto av = a.data();
  std::vector<real> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * mask[i];
  const bool grad = needs_grad({&a});
  Tensor y = make_out(a.shape(), std::move(out), grad);
  if (grad) {
    Tape::current().record("mask_mul", [a, y, mask = std::move(mask)]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      accumulate(a, [&](std::span<real> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * mask[i];
      });
    });
  }
  return y;
}

Tensor dropout(const Tensor& a, real p, Rng& rng) {
  if (p <= 0) return a;
  if (p >= 1) throw ArgumentError("dropout rate must be below 1");
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  const real inv = real{1} / (real{1} - p);
  std::vector<real> mask(a.numel());
  for (auto& m : mask) m = keep(rng) ? inv : real{0};
  return mask_mul(a, std::move(mask));
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
  auto av = a.data();
  real s = 0;
  for (real x : av) s += x;
  const bool grad = needs_grad({&a});
  Tensor y = make_out({}, {s}, grad);
  if (grad) {
    Tape::current().record("sum", [a, y]() mutable {
      if (!y.has_grad()) return;
      const real gy = y.grad()[0];
      accumulate(a, [&](std::span<real> g) {
        for (auto& v : g) v += gy;
      });
    });
  }
  return y;
}

Tensor mean(const Tensor& a) { return scale(sum(a), real{1} / static_cast<real>(a.numel())); }

Tensor sum_axis(const Tensor& a, int axis) {
  if (axis != 0 && axis != 1) throw ArgumentError("sum_axis: axis must be 0 or 1");
  const std::size_t n = a.rows(), d = a.cols();
  auto av = a.data();
  std::vector<real> out(axis == 0 ? d : n, real{0});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[axis == 0 ? c : r] += av[r * d + c];
  const bool grad = needs_grad({&a});
  const std::size_t len = out.size();
  Tensor y = make_out({len}, std::move(out), grad);
  if (grad) {
    Tape::current().record("sum_axis", [a, y, n, d, axis]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      accumulate(a, [&](std::span<real> g) {
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < d; ++c) g[r * d + c] += gy[axis == 0 ? c : r];
      });
    });
  }
  return y;
}

Tensor mean_axis(const Tensor& a, int axis) {
  const std::size_t count = axis == 0 ? a.rows() : a.cols();
  return scale(sum_axis(a, axis), real{1} / static_cast<real>(count));
}

Tensor softmax_rows(const Tensor& a) {
  const std::size_t n = a.rows(), d = a.cols();
  auto av = a.data();
  std::vector<real> out(av.size());
  for (std::size_t r = 0; r < n; ++r) {
    const real* x = av.data() + r * d;
    real* y = out.data() + r * d;
    const real mx = *std::max_element(x, x + d);
    real z = 0;
    for (std::size_t c = 0; c < d; ++c) z += (y[c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < d; ++c) y[c] /= z;
  }
  const bool grad = needs_grad({&a});
  Tensor y = make_out(a.shape(), std::move(out), grad);
  if (grad) {
    Tape::current().record("softmax_rows", [a, y, n, d]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto yv = y.data();
      accumulate(a, [&](std::span<real> g) {
        for (std::size_t r = 0; r < n; ++r) {
          real dot = 0;
          for (std::size_t c = 0; c < d; ++c) dot += gy[r * d + c] * yv[r * d + c];
          for (std::size_t c = 0; c < d; ++c) g[r * d + c] += yv[r * d + c] * (gy[r * d + c] - dot);
        }
      });
    });
  }
  return y;
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps) {
  const std::size_t n = x.rows(), d = x.cols();
  if (gain.numel() != d || bias.numel() != d)
    throw DimensionError("layernorm: gain/bias of width " + std::to_string(gain.numel()) + " for input " +
                         shape_str(x.shape()));
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  std::vector<real> out(xv.size()), xhat(xv.size()), inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    const real* row = xv.data() + r * d;
    real mu = 0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<real>(d);
    real var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<real>(d);
    inv_std[r] = real{1} / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (row[c] - mu) * inv_std[r];
      out[r * d + c] = xhat[r * d + c] * gv[c] + bv[c];
    }
  }
  const bool grad = needs_grad({&x, &gain, &bias});
  Tensor y = make_out(x.shape(), std::move(out), grad);
  if (grad) {
    Tape::current().record("layernorm", [x, gain, bias, y, n, d, xhat = std::move(xhat),
                                          inv_std = std::move(inv_std)]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto gv = gain.data();
      accumulate(gain, [&](std::span<real> g) {
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < d; ++c) g[c] += gy[r * d + c] * xhat[r * d + c];
      });
      accumulate(bias, [&](std::span<real> g) {
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < d; ++c) g[c] += gy[r * d + c];
      });
      accumulate(x, [&](std::span<real> g) {
        const real inv_d = real{1} / static_cast<real>(d);
        for (std::size_t r = 0; r < n; ++r) {
          real mean_dxhat = 0, mean_dxhat_xhat = 0;
          for (std::size_t c = 0; c < d; ++c) {
            const real dxh = gy[r * d + c] * gv[c];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[r * d + c];
          }
          mean_dxhat *= inv_d;
          mean_dxhat_xhat *= inv_d;
          for (std::size_t c = 0; c < d; ++c) {
            const real dxh = gy[r * d + c] * gv[c];
            g[r * d + c] += inv_std[r] * (dxh - mean_dxhat - xhat[r * d + c] * mean_dxhat_xhat);
          }
        }
      });
    });
  }
  return y;
}

Tensor normalize_rows(const Tensor& a) {
  const std::size_t n = a.rows(), d = a.cols();
  auto av = a.data();
  std::vector<real> out(av.size()), sums(n);
  for (std::size_t r = 0; r < n; ++r) {
    real s = 0;
    for (std::size_t c = 0; c < d; ++c) s += av[r * d + c];
    sums[r] = s;
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = s != 0 ? av[r * d + c] / s : real{1} / static_cast<real>(d);
  }
  const bool grad = needs_grad({&a});
  Tensor y = make_out(a.shape(), std::move(out), grad);
  if (grad) {
    Tape::current().record("normalize_rows", [a, y, n, d, sums = std::move(sums)]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto yv = y.data();
      accumulate(a, [&](std::span<real> g) {
        for (std::size_t r = 0; r < n; ++r) {
          if (sums[r] == 0) continue;
          real dot = 0;
          for (std::size_t c = 0; c < d; ++c) dot += gy[r * d + c] * yv[r * d + c];
          for (std::size_t c = 0; c < d; ++c) g[r * d + c] += (gy[r * d + c] - dot) / sums[r];
        }
      });
    });
  }
  return y;
}

Tensor cv_squared(const Tensor& v, real eps) {
  auto vv = v.data();
  const real n = static_cast<real>(vv.size());
  real mu = 0;
  for (real x : vv) mu += x;
  mu /= n;
  real var = 0;
  for (real x : vv) var += (x - mu) * (x - mu);
  var /= n;
  const real denom = mu * mu + eps;
  const bool grad = needs_grad({&v});
  Tensor y = make_out({}, {var / denom}, grad);
  if (grad) {
    Tape::current().record("cv_squared", [v, y, mu, var, denom, n]() mutable {
      if (!y.has_grad()) return;
      const real gy = y.grad()[0];
      auto vv = v.data();
      accumulate(v, [&](std::span<real> g) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          const real dvar = real{2} * (vv[i] - mu) / n;
          const real dmu = real{1} / n;
          g[i] += gy * (dvar / denom - var * real{2} * mu * dmu / (denom * denom));
        }
      });
    });
  }
  return y;
}

// ---------------------------------------------------------------- indexing

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  const bool grad = needs_grad({&a});
  Tensor y = make_out(std::move(shape), a.to_vector(), grad);
  if (grad) {
    Tape::current().record("reshape", [a, y]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      accumulate(a, [&](std::span<real> g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
      });
    });
  }
  return y;
}

Tensor gather_rows(const Tensor& a, const IndexList& idx) {
  const std::size_t r = a.rows(), d = a.cols();
  for (std::size_t i : idx)
    if (i >= r) throw ArgumentError("gather_rows: index " + std::to_string(i) + " out of range " + std::to_string(r));
  auto av = a.data();
  std::vector<real> out(idx.size() * d);
  for (std::size_t j = 0; j < idx.size(); ++j) std::copy_n(av.data() + idx[j] * d, d, out.data() + j * d);
  Shape shape = a.shape();
  if (shape.empty()) shape = {1};
  shape[0] = idx.size();
  const bool grad = needs_grad({&a});
  Tensor y = make_out(std::move(shape), std::move(out), grad);
  if (grad) {
    Tape::current().record("gather_rows", [a, y, idx, d]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      accumulate(a, [&](std::span<real> g) {
        for (std::size_t j = 0; j < idx.size(); ++j)
          for (std::size_t c = 0; c < d; ++c) g[idx[j] * d + c] += gy[j * d + c];
      });
    });
  }
  return y;
}

Tensor embedding(const Tensor& table, const IndexList& ids) { return gather_rows(table, ids); }

Tensor scatter_add_rows(const Tensor& a, const IndexList& idx, std::size_t n_rows) {
  const std::size_t d = a.cols();
  if (idx.size() != a.rows())
    throw DimensionError("scatter_add_rows: " + std::to_string(idx.size()) + " indices for " + shape_str(a.shape()));
  for (std::size_t i : idx)
    if (i >= n_rows) throw ArgumentError("scatter_add_rows: index " + std::to_string(i) + " out of range");
  auto av = a.data();
  std::vector<real> out(n_rows * d, real{0});
  for (std::size_t j = 0; j < idx.size(); ++j)
    for (std::size_t c = 0; c < d; ++c) out[idx[j] * d + c] += av[j * d + c];
  const bool grad = needs_grad({&a});
  Tensor y = make_out({n_rows, d}, std::move(out), grad);
  if (grad) {
    Tape::current().record("scatter_add_rows", [a, y, idx, d]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      accumulate(a, [&](std::span<real> g) {
        for (std::size_t j = 0; j < idx.size(); ++j)
          for (std::size_t c = 0; c < d; ++c) g[j * d + c] += gy[idx[j] * d + c];
      });
    });
  }
  return y;
}

Tensor gather_cols(const Tensor& a, const IndexList& idx, std::size_t k) {
  const std::size_t n = a.rows(), c = a.cols();
  if (idx.size() != n * k)
    throw DimensionError("gather_cols: expected " + std::to_string(n * k) + " indices, got " +
                         std::to_string(idx.size()));
  auto av = a.data();
  std::vector<real> out(n * k);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t col = idx[r * k + j];
      if (col >= c) throw ArgumentError("gather_cols: column " + std::to_string(col) + " out of range");
      out[r * k + j] = av[r * c + col];
    }
  const bool grad = needs_grad({&a});
  Tensor y = make_out({n, k}, std::move(out), grad);
  if (grad) {
    Tape::current().record("gather_cols", [a, y, idx, n, k, c]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      accumulate(a, [&](std::span<real> g) {
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < k; ++j) g[r * c + idx[r * k + j]] += gy[r * k + j];
      });
    });
  }
  return y;
}

Tensor scatter_cols(const Tensor& a, const IndexList& idx, std::size_t c) {
  const std::size_t n = a.rows(), k = a.cols();
  if (idx.size() != n * k) throw DimensionError("scatter_cols: index count does not match " + shape_str(a.shape()));
  auto av = a.data();
  std::vector<real> out(n * c, real{0});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t col = idx[r * k + j];
      if (col >= c) throw ArgumentError("scatter_cols: column " + std::to_string(col) + " out of range");
      out[r * c + col] += av[r * k + j];
    }
  const bool grad = needs_grad({&a});
  Tensor y = make_out({n, c}, std::move(out), grad);
  if (grad) {
    Tape::current().record("scatter_cols", [a, y, idx, n, k, c]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      accumulate(a, [&](std::span<real> g) {
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < k; ++j) g[r * k + j] += gy[r * c + idx[r * k + j]];
      });
    });
  }
  return y;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ArgumentError("concat_cols: no inputs");
  const std::size_t n = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  bool grad = false;
  for (const Tensor& p : parts) {
    if (p.rows() != n) throw DimensionError("concat_cols: row counts differ, " + shape_str(p.shape()));
    widths.push_back(p.cols());
    total += p.cols();
    grad = grad || needs_grad({&p});
  }
  std::vector<real> out(n * total);
  std::size_t off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    auto pv = parts[i].data();
    for (std::size_t r = 0; r < n; ++r) std::copy_n(pv.data() + r * widths[i], widths[i], out.data() + r * total + off);
    off += widths[i];
  }
  Tensor y = make_out({n, total}, std::move(out), grad);
  if (grad) {
    Tape::current().record("concat_cols", [parts, y, widths, n, total]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      std::size_t off = 0;
      for (std::size_t i = 0; i < parts.size(); ++i) {
        accumulate(parts[i], [&](std::span<real> g) {
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < widths[i]; ++c) g[r * widths[i] + c] += gy[r * total + off + c];
        });
        off += widths[i];
      }
    });
  }
  return y;
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  const std::size_t n = a.rows(), d = a.cols();
  if (begin >= end || end > d)
    throw ArgumentError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                        ") invalid for width " + std::to_string(d));
  const std::size_t w = end - begin;
  auto av = a.data();
  std::vector<real> out(n * w);
  for (std::size_t r = 0; r < n; ++r) std::copy_n(av.data() + r * d + begin, w, out.data() + r * w);
  const bool grad = needs_grad({&a});
  Tensor y = make_out({n, w}, std::move(out), grad);
  if (grad) {
    Tape::current().record("slice_cols", [a, y, n, d, w, begin]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      accumulate(a, [&](std::span<real> g) {
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < w; ++c) g[r * d + begin + c] += gy[r * w + c];
      });
    });
  }
  return y;
}

std::vector<Tensor> split_cols(const Tensor& a, const std::vector<std::size_t>& widths) {
  std::size_t total = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
  if (total != a.cols()) throw DimensionError("split_cols: widths do not sum to " + std::to_string(a.cols()));
  std::vector<Tensor> out;
  std::size_t off = 0;
  for (std::size_t w : widths) {
    out.push_back(slice_cols(a, off, off + w));
    off += w;
  }
  return out;
}

Tensor mul_rows(const Tensor& a, const Tensor& s) {
  const std::size_t n = a.rows(), d = a.cols();
  if (s.numel() != n)
    throw DimensionError("mul_rows: " + std::to_string(s.numel()) + " scales for " + shape_str(a.shape()));
  auto av = a.data();
  auto sv = s.data();
  std::vector<real> out(av.size());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = av[r * d + c] * sv[r];
  const bool grad = needs_grad({&a, &s});
  Tensor y = make_out(a.shape(), std::move(out), grad);
  if (grad) {
    Tape::current().record("mul_rows", [a, s, y, n, d]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto av = a.data();
      auto sv = s.data();
      accumulate(a, [&](std::span<real> g) {
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < d; ++c) g[r * d + c] += gy[r * d + c] * sv[r];
      });
      accumulate(s, [&](std::span<real> g) {
        for (std::size_t r = 0; r < n; ++r) {
          real dot = 0;
          for (std::size_t c = 0; c < d; ++c) dot += gy[r * d + c] * av[r * d + c];
          g[r] += dot;
        }
      });
    });
  }
  return y;
}

Tensor embedding_bag(const Tensor& table, const IndexList& idx, const Tensor& w) {
  const std::size_t rows = table.rows(), d = table.cols();
  const std::size_t n = w.rows(), k = w.cols();
  if (idx.size() != n * k) throw DimensionError("embedding_bag: index count does not match weights " + shape_str(w.shape()));
  for (std::size_t i : idx)
    if (i >= rows) throw ArgumentError("embedding_bag: row " + std::to_string(i) + " out of range");
  auto tv = table.data();
  auto wv = w.data();
  std::vector<real> out(n * d, real{0});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < k; ++j) {
      const real weight = wv[r * k + j];
      const real* src = tv.data() + idx[r * k + j] * d;
      for (std::size_t c = 0; c < d; ++c) out[r * d + c] += weight * src[c];
    }
  count_macs(static_cast<std::uint64_t>(n) * k * d);
  const bool grad = needs_grad({&table, &w});
  Tensor y = make_out({n, d}, std::move(out), grad);
  if (grad) {
    Tape::current().record("embedding_bag", [table, w, y, idx, n, k, d]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto tv = table.data();
      auto wv = w.data();
      accumulate(table, [&](std::span<real> g) {
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < k; ++j) {
            real* dst = g.data() + idx[r * k + j] * d;
            for (std::size_t c = 0; c < d; ++c) dst[c] += wv[r * k + j] * gy[r * d + c];
          }
      });
      accumulate(w, [&](std::span<real> g) {
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < k; ++j) {
            const real* src = tv.data() + idx[r * k + j] * d;
            real dot = 0;
            for (std::size_t c = 0; c < d; ++c) dot += src[c] * gy[r * d + c];
            g[r * k + j] += dot;
          }
      });
    });
  }
  return y;
}

// ---------------------------------------------------------------- losses / attention

Tensor cross_entropy(const Tensor& logits, const IndexList& targets) {
  const std::size_t n = logits.rows(), v = logits.cols();
  if (targets.size() != n)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
  auto lv = logits.data();
  std::vector<real> probs(lv.size());
  real total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] >= v) throw ArgumentError("cross_entropy: target " + std::to_string(targets[r]) + " out of range");
    const real* x = lv.data() + r * v;
    const real mx = *std::max_element(x, x + v);
    real z = 0;
    for (std::size_t c = 0; c < v; ++c) z += (probs[r * v + c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < v; ++c) probs[r * v + c] /= z;
    total += std::log(z) + mx - x[targets[r]];
  }
  const bool grad = needs_grad({&logits});
  Tensor y = make_out({}, {total / static_cast<real>(n)}, grad);
  if (grad) {
    Tape::current().record("cross_entropy", [logits, y, targets, n, v, probs = std::move(probs)]() mutable {
      if (!y.has_grad()) return;
      const real gy = y.grad()[0] / static_cast<real>(n);
      accumulate(logits, [&](std::span<real> g) {
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < v; ++c) g[r * v + c] += gy * probs[r * v + c];
          g[r * v + targets[r]] -= gy;
        }
      });
    });
  }
  return y;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& dims,
                        real dropout_p, Rng* rng) {
  const std::size_t B = dims.batch, T = dims.time, H = dims.heads, D = dims.head_size;
  const std::size_t width = H * D;
  for (const Tensor* t : {&q, &k, &v})
    if (t->rows() != B * T || t->cols() != width)
      throw DimensionError("causal_attention: expected [" + std::to_string(B * T) + "x" + std::to_string(width) +
                           "], got " + shape_str(t->shape()));
  const real scale_f = real{1} / std::sqrt(static_cast<real>(D));
  const bool use_dropout = rng != nullptr && dropout_p > 0;
  const real keep_scale = use_dropout ? real{1} / (real{1} - dropout_p) : real{1};

  // probs holds the softmax output per (b,h); masks the dropout multipliers.
  std::vector<real> probs(B * H * T * T, real{0});
  std::vector<real> masks;
  if (use_dropout) {
    masks.resize(probs.size());
    std::bernoulli_distribution keep(1.0 - static_cast<double>(dropout_p));
    for (auto& m : masks) m = keep(*rng) ? keep_scale : real{0};
  }
  std::vector<real> out(B * T * width, real{0});
  const Eigen::Index Ti = static_cast<Eigen::Index>(T), Di = static_cast<Eigen::Index>(D);
  const Stride ld(static_cast<Eigen::Index>(width));
  RowMat scores(Ti, Ti), weights(Ti, Ti);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = b * T * width + h * D;
      ConstStrided Q(q.data().data() + off, Ti, Di, ld);
      ConstStrided K(k.data().data() + off, Ti, Di, ld);
      ConstStrided V(v.data().data() + off, Ti, Di, ld);
      scores.noalias() = Q * K.transpose();
      MutMap P(probs.data() + (b * H + h) * T * T, Ti, Ti);
      for (std::size_t i = 0; i < T; ++i) {
        real mx = -std::numeric_limits<real>::infinity();
        for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, scores(i, j) * scale_f);
        real z = 0;
        for (std::size_t j = 0; j <= i; ++j) z += (P(i, j) = std::exp(scores(i, j) * scale_f - mx));
        for (std::size_t j = 0; j <= i; ++j) P(i, j) /= z;
      }
      if (use_dropout) {
        ConstMap M(masks.data() + (b * H + h) * T * T, Ti, Ti);
        weights = P.cwiseProduct(M);
      } else {
        weights = P;
      }
      MutStrided O(out.data() + off, Ti, Di, ld);
      O.noalias() = weights * V;
    }
  count_macs(static_cast<std::uint64_t>(2) * B * H * T * T * D);
  const bool grad = needs_grad({&q, &k, &v});
  Tensor y = make_out({B * T, width}, std::move(out), grad);
  if (grad) {
    Tape::current().record("causal_attention", [q, k, v, y, B, T, H, D, width, scale_f, use_dropout,
                                                 probs = std::move(probs), masks = std::move(masks)]() mutable {
      if (!y.has_grad()) return;
      const Eigen::Index Ti = static_cast<Eigen::Index>(T), Di = static_cast<Eigen::Index>(D);
      const Stride ld(static_cast<Eigen::Index>(width));
      std::vector<real> dq(B * T * width, real{0}), dk(B * T * width, real{0}), dv(B * T * width, real{0});
      RowMat weights(Ti, Ti), dweights(Ti, Ti), dscores(Ti, Ti);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; ++h) {
          const std::size_t off = b * T * width + h * D;
          ConstStrided Q(q.data().data() + off, Ti, Di, ld);
          ConstStrided K(k.data().data() + off, Ti, Di, ld);
          ConstStrided V(v.data().data() + off, Ti, Di, ld);
          ConstStrided dO(y.grad().data() + off, Ti, Di, ld);
          ConstMap P(probs.data() + (b * H + h) * T * T, Ti, Ti);
          if (use_dropout) {
            ConstMap M(masks.data() + (b * H + h) * T * T, Ti, Ti);
            weights = P.cwiseProduct(M);
          } else {
            weights = P;
          }
          MutStrided dV(dv.data() + off, Ti, Di, ld);
          dV.noalias() += weights.transpose() * dO;
          dweights.noalias() = dO * V.transpose();
          if (use_dropout) {
            ConstMap M(masks.data() + (b * H + h) * T * T, Ti, Ti);
            dweights = dweights.cwiseProduct(M);
          }
          dscores.setZero();
          for (std::size_t i = 0; i < T; ++i) {
            real dot = 0;
            for (std::size_t j = 0; j <= i; ++j) dot += dweights(i, j) * P(i, j);
            for (std::size_t j = 0; j <= i; ++j) dscores(i, j) = P(i, j) * (dweights(i, j) - dot) * scale_f;
          }
          MutStrided dQ(dq.data() + off, Ti, Di, ld);
          MutStrided dK(dk.data() + off, Ti, Di, ld);
          dQ.noalias() += dscores * K;
          dK.noalias() += dscores.transpose() * Q;
        }
      auto add_into = [](const Tensor& t, const std::vector<real>& src) {
        accumulate(t, [&](std::span<real> g) {
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
        });
      };
      add_into(q, dq);
      add_into(k, dk);
      add_into(v, dv);
    });
  }
  return y;
}

// ---------------------------------------------------------------- initialization

Tensor randn(Shape shape, real stddev, Rng& rng, bool requires_grad) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  for (auto& v : t.mutable_data()) v = static_cast<real>(dist(rng));
  return t;
}

// ---------------------------------------------------------------- selection

IndexList argtopk(std::span<const real> values, std::size_t k) {
  if (k == 0 || k > values.size())
    throw ArgumentError("argtopk: K=" + std::to_string(k) + " outside [1, " + std::to_string(values.size()) + "]");
  IndexList idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (values[a] != values[b]) return values[a] > values[b];
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

IndexList argtopk_rows(const Tensor& a, std::size_t k) {
  const std::size_t n = a.rows(), c = a.cols();
  IndexList out;
  out.reserve(n * k);
  auto av = a.data();
  for (std::size_t r = 0; r < n; ++r) {
    IndexList row = argtopk(av.subspan(r * c, c), k);
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

}  // namespace ffx
