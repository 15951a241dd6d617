#include "ffx/cvmm.hpp"

#include <algorithm>

#include "ffx/autograd.hpp"
#include "ffx/counters.hpp"
#include "ffx/error.hpp"
#include "ffx/parallel.hpp"

namespace ffx {

namespace {

struct Dims {
  std::size_t n, m, l, k;
};

Dims validate(const Tensor& input, std::span<const std::size_t> selection, const Tensor& matrices,
              const RoutingPlan& plan) {
  if (input.ndim() != 2) throw DimensionError("cvmm: input must be [N, M], got " + shape_str(input.shape()));
  if (matrices.ndim() != 3) throw DimensionError("cvmm: matrices must be [K, M, L], got " + shape_str(matrices.shape()));
  Dims d{input.dim(0), input.dim(1), matrices.dim(2), matrices.dim(0)};
  if (matrices.dim(1) != d.m)
    throw DimensionError("cvmm: input " + shape_str(input.shape()) + " incompatible with matrices " +
                         shape_str(matrices.shape()));
  if (selection.size() != d.n || plan.n_rows() != d.n)
    throw ConsistencyError("cvmm: plan covers " + std::to_string(plan.n_rows()) + " rows, selection has " +
                           std::to_string(selection.size()) + ", input has " + std::to_string(d.n));
  if (plan.n_matrices() != d.k || plan.offsets.size() != d.k + 1 || plan.offsets.back() != d.n)
    throw ConsistencyError("cvmm: plan built for " + std::to_string(plan.n_matrices()) + " matrices, got " +
                           std::to_string(d.k));
  // Spot-check that the plan was built from this selection.
  const std::size_t probes = std::min<std::size_t>(d.n, 32);
  std::size_t group = 0;
  for (std::size_t p = 0; p < probes; ++p) {
    const std::size_t pos = probes == 1 ? 0 : p * (d.n - 1) / (probes - 1);
    while (plan.offsets[group + 1] <= pos) ++group;
    const std::size_t row = plan.order[pos];
    if (row >= d.n || selection[row] != group)
      throw ConsistencyError("cvmm: routing plan does not match the selection at position " + std::to_string(pos));
  }
  return d;
}

// The group kernels below accumulate every output element in a fixed order
// that depends only on that row, never on which other rows share the group.
// This keeps results bit-identical when a batch is split or permuted.

// out[r, :] = x[r, :] * w for the rows listed in `rows`; w is [m x l].
void group_forward(const real* in, const real* w, const std::size_t* rows, std::size_t count, std::size_t m,
                   std::size_t l, real* out) {
  constexpr std::size_t kBlock = 4;
  std::vector<real> acc(kBlock * l);
  for (std::size_t base = 0; base < count; base += kBlock) {
    const std::size_t nb = std::min(kBlock, count - base);
    std::fill(acc.begin(), acc.end(), real{0});
    for (std::size_t i = 0; i < m; ++i) {
      const real* __restrict wrow = w + i * l;
      for (std::size_t b = 0; b < nb; ++b) {
        const real xv = in[rows[base + b] * m + i];
        real* __restrict a = acc.data() + b * l;
        for (std::size_t c = 0; c < l; ++c) a[c] += xv * wrow[c];
      }
    }
    for (std::size_t b = 0; b < nb; ++b) std::copy_n(acc.data() + b * l, l, out + rows[base + b] * l);
  }
}

// d_in[r, :] = g[r, :] * w^T and d_w += x[r, :]^T g[r, :], rows taken in plan
// order.
void group_backward(const real* in, const real* go, const real* w, const std::size_t* rows, std::size_t count,
                    std::size_t m, std::size_t l, real* d_in, real* d_w) {
  for (std::size_t j = 0; j < count; ++j) {
    const std::size_t r = rows[j];
    const real* __restrict g = go + r * l;
    const real* __restrict x = in + r * m;
    real* __restrict dx = d_in + r * m;
    for (std::size_t i = 0; i < m; ++i) {
      const real* __restrict wrow = w + i * l;
      real dot = 0;
      for (std::size_t c = 0; c < l; ++c) dot += g[c] * wrow[c];
      dx[i] = dot;
    }
    for (std::size_t i = 0; i < m; ++i) {
      const real xv = x[i];
      real* __restrict dwrow = d_w + i * l;
      for (std::size_t c = 0; c < l; ++c) dwrow[c] += xv * g[c];
    }
  }
}

}  // namespace

RoutingPlan plan_routing(std::span<const std::size_t> selection, std::size_t n_matrices) {
  if (n_matrices == 0) throw ArgumentError("plan_routing: need at least one matrix");
  RoutingPlan plan;
  plan.counts.assign(n_matrices, 0);
  for (std::size_t s : selection) {
    if (s >= n_matrices)
      throw ArgumentError("plan_routing: index " + std::to_string(s) + " >= " + std::to_string(n_matrices));
    ++plan.counts[s];
  }
  plan.offsets.assign(n_matrices + 1, 0);
  for (std::size_t e = 0; e < n_matrices; ++e) plan.offsets[e + 1] = plan.offsets[e] + plan.counts[e];
  plan.order.resize(selection.size());
  std::vector<std::size_t> cursor(plan.offsets.begin(), plan.offsets.end() - 1);
  for (std::size_t row = 0; row < selection.size(); ++row) plan.order[cursor[selection[row]]++] = row;
  return plan;
}

Tensor cvmm(const Tensor& input, std::span<const std::size_t> selection, const Tensor& matrices,
            const RoutingPlan& plan) {
  const Dims d = validate(input, selection, matrices, plan);
  std::vector<real> out(d.n * d.l, real{0});
  const real* in = input.data().data();
  const real* mats = matrices.data().data();
  parallel_for(d.k, [&](std::size_t e) {
    const std::size_t count = plan.counts[e];
    if (count == 0) return;
    group_forward(in, mats + e * d.m * d.l, plan.order.data() + plan.offsets[e], count, d.m, d.l, out.data());
  });
  count_macs(static_cast<std::uint64_t>(d.n) * d.m * d.l);

  const bool grad = needs_grad({&input, &matrices});
  Tensor y = Tensor::from({d.n, d.l}, std::move(out), grad);
  if (grad) {
    IndexList sel(selection.begin(), selection.end());
    Tape::current().record("cvmm", [input, matrices, y, sel = std::move(sel), plan]() mutable {
      if (!y.has_grad()) return;
      Tensor d_out = Tensor::from(y.shape(), std::vector<real>(y.grad().begin(), y.grad().end()));
      CvmmGrads g = cvmm_backward(d_out, input, sel, matrices, plan);
      if (input.requires_grad()) {
        auto dst = input.mutable_grad();
        auto src = g.d_input.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
      if (matrices.requires_grad()) {
        auto dst = matrices.mutable_grad();
        auto src = g.d_matrices.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    });
  }
  return y;
}

CvmmGrads cvmm_backward(const Tensor& d_out, const Tensor& input, std::span<const std::size_t> selection,
                        const Tensor& matrices, const RoutingPlan& plan) {
  const Dims d = validate(input, selection, matrices, plan);
  if (d_out.ndim() != 2 || d_out.dim(0) != d.n || d_out.dim(1) != d.l)
    throw DimensionError("cvmm_backward: d_out " + shape_str(d_out.shape()) + " does not match [" +
                         std::to_string(d.n) + "x" + std::to_string(d.l) + "]");
  std::vector<real> d_in(d.n * d.m, real{0});
  std::vector<real> d_mats(d.k * d.m * d.l, real{0});
  const real* in = input.data().data();
  const real* go = d_out.data().data();
  const real* mats = matrices.data().data();
  parallel_for(d.k, [&](std::size_t e) {
    const std::size_t count = plan.counts[e];
    if (count == 0) return;
    group_backward(in, go, mats + e * d.m * d.l, plan.order.data() + plan.offsets[e], count, d.m, d.l, d_in.data(),
                   d_mats.data() + e * d.m * d.l);
  });
  return {Tensor::from({d.n, d.m}, std::move(d_in)), Tensor::from(matrices.shape(), std::move(d_mats))};
}

}  // namespace ffx
