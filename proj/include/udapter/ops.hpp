// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "udapter/tensor.hpp"

// Differentiable tensor ops. Shapes either match exactly or one operand is a
// single-element scalar; anything else is a DimensionError.
namespace udapter {

Tensor matmul(const Tensor& a, const Tensor& b);

// x[..., in] * weight[out, in]^T + bias[out]. `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
// Tanh approximation of GELU.
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);

// Normalizes over the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Mean negative log-likelihood of `labels` under softmax(logits[n, C]).
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

// Row lookup into table[V, h]; result has shape [ids.size(), h].
Tensor embedding(const Tensor& table, std::span<const std::uint32_t> ids);

// Treats x as [N, last-dim] and returns the selected rows.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

// Bidirectional multi-head scaled dot-product attention over q, k, v of shape
// [batch, seq, hidden]. key_mask is [batch * seq] with nonzero for keys that
// may be attended; empty means every key is valid.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::span<const std::uint8_t> key_mask = {});

// Mean over the sequence axis of x[batch, seq, hidden], restricted to valid
// positions of mask (empty = all valid). Result is [batch, hidden].
Tensor masked_mean(const Tensor& x, std::span<const std::uint8_t> mask = {});

}  // namespace udapter
