// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tensor.hpp"

namespace rexmoe {

// Differentiable primitives. Each op records itself on the active Tape when
// any input requires a gradient. Reductions always accumulate sequentially in
// index order, so results are bitwise reproducible.

// [m x k] . [k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [m x k] . [n x k]^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor sum(const Tensor& x);
// Scalar sum(x .* weights) with constant weights.
Tensor dot_const(const Tensor& x, std::span<const double> weights);

Tensor silu(const Tensor& x);

// Softmax over the last dimension. With a non-empty `keep` (one flag per
// last-dimension slot), the distribution is restricted to kept slots and
// dropped slots are exactly zero.
Tensor softmax(const Tensor& x, std::span<const std::uint8_t> keep = {});

Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps);

// Mean over rows of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets);

// table [V x d] indexed by ids -> [ids x d]
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids);

// Rotary embedding on [rows x heads*head_dim]; position = row % seq_len.
// Rotates the pair (i, i + head_dim/2) of each head by pos * base^(-2i/head_dim).
Tensor rope(const Tensor& x, std::int64_t heads, std::int64_t head_dim, std::int64_t seq_len,
            double base);

struct AttentionShape {
  std::int64_t batch = 1;
  std::int64_t seq_len = 1;
  std::int64_t q_heads = 1;
  std::int64_t kv_heads = 1;
  std::int64_t head_dim = 1;
};

// Causal scaled dot-product attention with grouped KV heads.
// q: [batch*seq x q_heads*head_dim], k, v: [batch*seq x kv_heads*head_dim].
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& s);

// Rows of x [n x d] selected by `rows` -> [rows.size() x d].
Tensor gather_rows(const Tensor& x, std::span<const std::int32_t> rows);
// x[rows[i], cols[i]] for a 2-D x -> [rows.size()].
Tensor gather_elements(const Tensor& x, std::span<const std::int32_t> rows,
                       std::span<const std::int32_t> cols);
// Row i of x [n x d] multiplied by s[i]; s has shape [n].
Tensor scale_rows(const Tensor& x, const Tensor& s);
// [out_rows x d] zeros, then part j's row r is added into row index[j][r],
// parts in order.
Tensor scatter_add_rows(std::int64_t out_rows, std::int64_t d, const std::vector<Tensor>& parts,
                        const std::vector<std::vector<std::int32_t>>& index);

namespace kernels {
// C[m x n] = A[m x k] . B[k x n]; accumulates per output element in k order.
void gemm_nn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate);
// C[k x n] (+)= A[m x k]^T . B[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate);
// C[m x n] (+)= A[m x k] . B[n x k]^T
void gemm_nt(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate);
}  // namespace kernels

}  // namespace rexmoe
