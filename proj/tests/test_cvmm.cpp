#include <numeric>

#include "doctest.h"
#include "ffx/cvmm.hpp"
#include "ffx/error.hpp"
#include "support.hpp"

using namespace ffx;
using namespace ffx::testing;

namespace {

IndexList random_selection(std::size_t n, std::size_t k, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, k - 1);
  IndexList s(n);
  for (auto& v : s) v = pick(rng);
  return s;
}

// Per-row reference of out[n,l] = sum_m V[n,m] M[S[n],m,l].
std::vector<double> naive_cvmm(const Tensor& v, const IndexList& s, const Tensor& m) {
  const std::size_t n = v.dim(0), mm = v.dim(1), l = m.dim(2);
  std::vector<double> out(n * l, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < l; ++c) {
      double acc = 0;
      for (std::size_t i = 0; i < mm; ++i) acc += v.at(r * mm + i) * m.at((s[r] * mm + i) * l + c);
      out[r * l + c] = acc;
    }
  return out;
}

}  // namespace

TEST_CASE("plan_routing examples") {
  RoutingPlan p = plan_routing(IndexList{2, 0, 2, 1}, 3);
  CHECK(p.order == IndexList{1, 3, 0, 2});
  CHECK(p.counts == std::vector<std::size_t>{1, 1, 2});
  CHECK(p.offsets == std::vector<std::size_t>{0, 1, 2, 4});

  RoutingPlan z = plan_routing(IndexList(5, 0), 1);
  CHECK(z.order == IndexList{0, 1, 2, 3, 4});
  CHECK(z.offsets == std::vector<std::size_t>{0, 5});

  CHECK_THROWS_AS(plan_routing(IndexList{0, 3}, 3), ArgumentError);
}

TEST_CASE("plan_routing invariants against a counting oracle") {
  Rng rng(29);
  const IndexList s = random_selection(1000, 16, rng);
  RoutingPlan p = plan_routing(s, 16);

  IndexList sorted = p.order;
  std::sort(sorted.begin(), sorted.end());
  IndexList iota(1000);
  std::iota(iota.begin(), iota.end(), 0);
  CHECK(sorted == iota);

  std::vector<std::size_t> counts(16, 0);
  for (auto e : s) ++counts[e];
  CHECK(p.counts == counts);
  CHECK(p.offsets.back() == 1000);
  for (std::size_t k = 0; k < 16; ++k) CHECK(p.offsets[k + 1] - p.offsets[k] == p.counts[k]);
  for (std::size_t i = 1; i < 1000; ++i) {
    CHECK(s[p.order[i - 1]] <= s[p.order[i]]);
    if (s[p.order[i - 1]] == s[p.order[i]]) CHECK(p.order[i - 1] < p.order[i]);
  }
}

TEST_CASE("cvmm degenerate cases") {
  Rng rng(31);
  Tensor v = uniform({6, 4}, rng, false);
  Tensor m = uniform({1, 4, 3}, rng, false);
  IndexList s(6, 0);
  Tensor out = cvmm(v, s, m, plan_routing(s, 1));
  Tensor ref = matmul(v, reshape(m, {4, 3}));
  CHECK(out.to_vector() == ref.to_vector());

  Tensor row = uniform({1, 4}, rng, false);
  Tensor mats = uniform({3, 4, 3}, rng, false);
  IndexList one{2};
  Tensor r = cvmm(row, one, mats, plan_routing(one, 3));
  auto expect = naive_cvmm(row, one, mats);
  for (std::size_t c = 0; c < 3; ++c) CHECK(r.at(c) == doctest::Approx(expect[c]).epsilon(1e-14));
}

TEST_CASE("cvmm matches the per-row oracle") {
  Rng rng(37);
  const std::size_t n = 256, mm = 64, l = 64, k = 8;
  Tensor v = uniform({n, mm}, rng, false);
  Tensor m = uniform({k, mm, l}, rng, false);
  IndexList s = random_selection(n, k, rng);
  Tensor out = cvmm(v, s, m, plan_routing(s, k));
  auto ref = naive_cvmm(v, s, m);
  double worst = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, rel_err(out.at(i), ref[i], 1e-300));
  CHECK(worst < 1e-12);
}

TEST_CASE("cvmm rejects inconsistent inputs") {
  Rng rng(41);
  Tensor v = uniform({4, 3}, rng, false);
  Tensor m = uniform({2, 3, 5}, rng, false);
  IndexList s{0, 1, 1, 0};
  RoutingPlan p = plan_routing(s, 2);
  IndexList other{1, 1, 1, 0};
  CHECK_THROWS_AS(cvmm(v, other, m, p), ConsistencyError);
  CHECK_THROWS_AS(cvmm(v, IndexList{0, 1, 1}, m, p), ConsistencyError);
  CHECK_THROWS_AS(cvmm(v, s, uniform({2, 4, 5}, rng, false), p), DimensionError);
}

TEST_CASE("cvmm is permutation equivariant and batch-splittable") {
  Rng rng(43);
  const std::size_t n = 40, k = 5;
  Tensor v = uniform({n, 6}, rng, false);
  Tensor m = uniform({k, 6, 7}, rng, false);
  IndexList s = random_selection(n, k, rng);
  Tensor out = cvmm(v, s, m, plan_routing(s, k));

  IndexList perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  IndexList ps(n);
  for (std::size_t i = 0; i < n; ++i) ps[i] = s[perm[i]];
  Tensor pv = gather_rows(v, perm);
  Tensor pout = cvmm(pv, ps, m, plan_routing(ps, k));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 7; ++c) CHECK(pout.at(i, c) == out.at(perm[i], c));

  IndexList s1(s.begin(), s.begin() + n / 2), s2(s.begin() + n / 2, s.end());
  Tensor v1 = slice_cols(reshape(v, {1, n * 6}), 0, n / 2 * 6);
  Tensor v2 = slice_cols(reshape(v, {1, n * 6}), n / 2 * 6, n * 6);
  Tensor o1 = cvmm(reshape(v1, {n / 2, 6}), s1, m, plan_routing(s1, k));
  Tensor o2 = cvmm(reshape(v2, {n / 2, 6}), s2, m, plan_routing(s2, k));
  std::vector<real> joined = o1.to_vector();
  for (real x : o2.data()) joined.push_back(x);
  CHECK(joined == out.to_vector());
}

TEST_CASE("cvmm backward") {
  Rng rng(47);
  const std::size_t n = 30, k = 4, mm = 5, l = 6;
  Tensor v = uniform({n, mm}, rng);
  Tensor m = uniform({k, mm, l}, rng);
  IndexList s = random_selection(n, k, rng);
  s[0] = 3;  // leave expert 2 possibly empty, but make sure 3 is used
  RoutingPlan plan = plan_routing(s, k);

  SUBCASE("zero upstream gradient") {
    CvmmGrads g = cvmm_backward(Tensor::zeros({n, l}), v, s, m, plan);
    for (real x : g.d_input.data()) CHECK(x == 0);
    for (real x : g.d_matrices.data()) CHECK(x == 0);
  }

  SUBCASE("single expert equals matmul backward") {
    IndexList s0(n, 0);
    Tensor m0 = uniform({1, mm, l}, rng);
    Tensor d = uniform({n, l}, rng, false);
    CvmmGrads g = cvmm_backward(d, v, s0, m0, plan_routing(s0, 1));
    Tensor dv = matmul(d, Tensor::from({l, mm}, [&] {
                         std::vector<real> t(l * mm);
                         for (std::size_t i = 0; i < mm; ++i)
                           for (std::size_t j = 0; j < l; ++j) t[j * mm + i] = m0.at(i * l + j);
                         return t;
                       }()));
    for (std::size_t i = 0; i < dv.numel(); ++i) CHECK(rel_err(g.d_input.at(i), dv.at(i), 1e-300) < 1e-12);
  }

  SUBCASE("finite differences on inputs and matrices") {
    Tensor w = uniform({n, l}, rng, false);
    CHECK(grad_check([&] { return probe_loss(cvmm(v, s, m, plan), w); }, {v, m}) < 1e-6);
  }

  SUBCASE("directional derivative identity") {
    Tensor w = uniform({n, l}, rng, false);
    Tensor dir = uniform({k, mm, l}, rng, false);
    CvmmGrads g = cvmm_backward(w, v, s, m, plan);
    double analytic = 0;
    for (std::size_t i = 0; i < dir.numel(); ++i) analytic += g.d_matrices.at(i) * dir.at(i);
    const double h = 1e-5;
    auto eval = [&](double t) {
      std::vector<real> shifted(m.numel());
      for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] = m.at(i) + t * dir.at(i);
      NoGradGuard guard;
      return probe_loss(cvmm(v, s, Tensor::from(m.shape(), shifted), plan), w).item();
    };
    CHECK(rel_err(analytic, (eval(h) - eval(-h)) / (2 * h)) < 1e-6);
  }
}
