#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "caft/engine/tensor.hpp"

namespace caft::engine {

using TokenId = std::int32_t;

// a: (..., k), b: (k, n) -> (..., n).
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise sum. `b` may also be a trailing-shape suffix of `a` (e.g. a
// bias of shape (n) added to (batch, seq, n)); it is then repeated over a's
// leading dimensions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
// sum_i weights[i] * scalars[i]; every input must hold one value.
Tensor weighted_sum(std::span<const Tensor> scalars, std::span<const double> weights);

// tanh-approximated GELU.
Tensor gelu(const Tensor& x);

// Normalizes over the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Rows of `table` (vocab, d) gathered by `ids`; result shape is
// `index_shape` + (d).
Tensor embedding(const Tensor& table, std::span<const TokenId> ids, const Shape& index_shape);

// Multi-head causal self-attention over packed projections.
// qkv: (batch, seq, 3*d) laid out [q | k | v]; returns (batch, seq, d).
Tensor causal_self_attention(const Tensor& qkv, std::size_t n_heads);

// Softmax along `axis`, max-subtracted. Throws NumericError on NaN/Inf.
Tensor softmax(const Tensor& logits, std::size_t axis);

// Mean of -log softmax(logits)[target] over cells with mask != 0.
// logits: (..., vocab); targets/mask have one entry per row. With no
// unmasked cell the result is exactly 0 and contributes no gradient.
Tensor masked_cross_entropy(const Tensor& logits, std::span<const TokenId> targets,
                            std::span<const std::uint8_t> mask);

// -log p[target] for an explicit probability vector (inspection helper,
// not differentiable).
double cross_entropy(const Tensor& probabilities, TokenId target);

// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

}  // namespace caft::engine
