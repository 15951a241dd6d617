#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "ffx/tensor.hpp"

namespace ffx {

using Rng = std::mt19937_64;
using IndexList = std::vector<std::size_t>;

// Primitive differentiable ops. Every op records its gradient rule on the
// current tape when any input requires gradients. Ops that take a "rows"
// view treat a tensor of shape [n, ...] as an n x (numel / n) matrix, and a
// 1-D tensor as a single row.

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);   // [m,k] x [k,n] -> [m,n]
Tensor linear(const Tensor& x, const Tensor& w);   // x [n,in], w [out,in] -> x * w^T
Tensor add_bias(const Tensor& x, const Tensor& b);  // x [n,d] + b [d] per row

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real c);
Tensor add_scalar(const Tensor& a, real c);
Tensor relu(const Tensor& a);  // d/dx at exactly 0 is 0
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
// Multiplies by a constant mask; no gradient flows into the mask.
Tensor mask_mul(const Tensor& a, std::vector<real> mask);
// Inverted dropout with keep-probability 1-p. p == 0 returns `a` unchanged.
Tensor dropout(const Tensor& a, real p, Rng& rng);

// ---- reductions / normalization ----
Tensor sum(const Tensor& a);   // scalar
Tensor mean(const Tensor& a);  // scalar
// axis 0 reduces over rows -> [cols]; axis 1 reduces over columns -> [rows].
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean_axis(const Tensor& a, int axis);
Tensor softmax_rows(const Tensor& a);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps = real(1e-5));
// Divides each row by its sum. A row summing to exactly zero becomes uniform
// and passes no gradient.
Tensor normalize_rows(const Tensor& a);
// Squared coefficient of variation var(v) / (mean(v)^2 + eps) of a vector,
// population variance.
Tensor cv_squared(const Tensor& v, real eps = real(1e-10));

// ---- indexing ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor embedding(const Tensor& table, const IndexList& ids);   // alias of gather_rows
Tensor gather_rows(const Tensor& a, const IndexList& idx);     // [r,d] -> [idx.size(), d]
Tensor scatter_add_rows(const Tensor& a, const IndexList& idx, std::size_t n_rows);
// Row-wise gather along the last axis: a [n,c], idx holds n*k column ids -> [n,k].
Tensor gather_cols(const Tensor& a, const IndexList& idx, std::size_t k);
// Inverse of gather_cols: a [n,k] -> [n,c] with a[r,j] added at column idx[r*k+j].
Tensor scatter_cols(const Tensor& a, const IndexList& idx, std::size_t c);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
std::vector<Tensor> split_cols(const Tensor& a, const std::vector<std::size_t>& widths);
// Scales row r of a [n,d] by s[r]; s has n elements.
Tensor mul_rows(const Tensor& a, const Tensor& s);
// out[n] = sum_j w[n,j] * table[idx[n*k+j]]; table [r,d], w [n,k].
Tensor embedding_bag(const Tensor& table, const IndexList& idx, const Tensor& w);

// ---- losses / attention ----
// Mean token cross-entropy of logits [n,v] against integer targets.
Tensor cross_entropy(const Tensor& logits, const IndexList& targets);

struct AttentionShape {
  std::size_t batch;
  std::size_t time;
  std::size_t heads;
  std::size_t head_size;
};
// Causal multi-head scaled dot-product attention. q, k, v are
// [batch*time, heads*head_size] with rows ordered batch-major. Attention
// probabilities are dropped out with rate `dropout_p` when rng is non-null.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& dims,
                        real dropout_p = 0, Rng* rng = nullptr);

// ---- initialization ----
// Tensor of i.i.d. N(0, stddev^2) draws.
Tensor randn(Shape shape, real stddev, Rng& rng, bool requires_grad = false);

// ---- selection (no gradient) ----
// Indices of the k largest values ordered by decreasing value; equal values
// are ordered by increasing index.
IndexList argtopk(std::span<const real> values, std::size_t k);
// argtopk over every row of a [n,c]; returns n*k indices row by row.
IndexList argtopk_rows(const Tensor& a, std::size_t k);

}  // namespace ffx
