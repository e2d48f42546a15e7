#pragma once

#include <span>
#include <vector>

#include "cavl/tape.hpp"

namespace cavl {

// Elementwise / broadcast ------------------------------------------------

Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double c);

/// x [N x D] plus a bias row [D], broadcast over rows.
Var add_bias_rows(Tape& t, Var x, Var bias);

/// Natural log, elementwise. Inputs must be strictly positive.
Var log_elem(Tape& t, Var x);

/// Exact Gaussian-error-function GELU: x * Phi(x).
Var gelu(Tape& t, Var x);

/// log(1 + exp(x)), elementwise, overflow-safe. Strictly positive.
Var softplus(Tape& t, Var x);

// Linear algebra ----------------------------------------------------------

Var matmul(Tape& t, Var a, Var b);
Var transpose(Tape& t, Var a);

// Normalization -----------------------------------------------------------

/// Softmax over the last axis with max-subtraction.
Var softmax(Tape& t, Var x);

/// Per-slice standardization over the last axis, then scale/shift.
Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps);

/// Rows scaled to unit L2 norm. Rows must be nonzero.
Var l2_normalize_rows(Tape& t, Var x);

// Gather / assembly -------------------------------------------------------

/// Row gather from a [V x D] table; repeated ids accumulate gradient.
Var embedding_lookup(Tape& t, Var table, std::span<const Index> ids);

/// Same gather semantics for arbitrary row selections.
Var gather_rows(Tape& t, Var x, std::span<const Index> rows);

Var concat_rows(Tape& t, std::span<const Var> parts);
Var concat_cols(Tape& t, Var a, Var b);
Var slice_rows(Tape& t, Var x, std::size_t begin, std::size_t count);

// Reductions --------------------------------------------------------------

Var sum_all(Tape& t, Var x);
Var diag_sum(Tape& t, Var x);

// Fused model kernels -------------------------------------------------------

/// Multi-head scaled dot-product self-attention over a batch of equal-length
/// sequences packed as [B*T x D]. `key_bias` is [B*T]: 0 for attendable keys,
/// a large negative number for padding.
Var attention_core(Tape& t, Var q, Var k, Var v, const Tensor& key_bias,
                   std::size_t batch, std::size_t seq, std::size_t heads);

/// Mean cross-entropy of logits [N x C] against integer targets, with
/// log-sum-exp stabilization.
Var cross_entropy_mean(Tape& t, Var logits, std::span<const Index> targets);

// Raw kernels shared by ops and evaluation code ---------------------------

namespace detail {
/// c += a.b for row-major a [M x K], b [K x N].
void matmul_nn(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n);
/// c += a.b^T for row-major a [M x K], b [N x K].
void matmul_nt(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n);
std::vector<double> transposed(const double* src, std::size_t rows, std::size_t cols);
}  // namespace detail

}  // namespace cavl
