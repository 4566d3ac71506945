#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "attnbench/random.hpp"
#include "attnbench/tensor.hpp"

// Differentiable tensor operations. Each one records its backward rule on the
// active tape when any input requires a gradient.
namespace attnbench {

using TokenId = std::int32_t;

/// a[..., k] · b[k, n] -> [..., n]; leading dimensions of `a` are flattened into rows.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Batched product over equal leading dimensions: a[..., m, k] · b[..., k, n].
/// With transpose_b, b is read as [..., n, k].
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

// Elementwise arithmetic with right-aligned broadcasting (extents equal or 1).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);

/// Numerically stabilized softmax along `axis` (negative counts from the end).
/// Entries equal to -inf map to exactly 0. Throws MaskingError if a whole
/// slice is -inf.
Tensor softmax(const Tensor& x, int axis = -1);

/// Gated linear unit over the last dimension: first half * sigmoid(second half).
Tensor glu(const Tensor& x);

/// Inverted dropout. Identity (same storage) when !training or p == 0.
Tensor dropout(const Tensor& x, double p, bool training, Rng& rng);

/// Row gather from table[V, d]; result has shape index_shape + [d].
Tensor embedding_lookup(const Tensor& table, std::span<const TokenId> ids, const Shape& index_shape);

/// Mean negative log-likelihood of `targets` under softmax(logits[..., V]),
/// skipping positions whose target equals ignore_id.
Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets, TokenId ignore_id);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
/// Drops `axis`, keeping position `index` along it.
Tensor select(const Tensor& x, int axis, std::size_t index);
Tensor stack(const std::vector<Tensor>& parts, int axis);

/// x[B, T, d] -> [B, d] taking time step steps[b] for row b.
Tensor gather_steps(const Tensor& x, std::span<const std::size_t> steps);

/// Row-wise choice between two [B, ...] tensors: row b comes from `when_true`
/// if keep[b], else from `when_false`. Values are copied exactly.
Tensor where_rows(const std::vector<bool>& keep, const Tensor& when_true, const Tensor& when_false);

/// Layer normalization over the last dimension with learned gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// x[B, T, C] -> [B, T', kernel*C] sliding windows with zero padding, where
/// T' = T + pad_left + pad_right - kernel + 1. Column j*C + c of window t is
/// x[b, t + j - pad_left, c].
Tensor unfold_time(const Tensor& x, std::size_t kernel, std::size_t pad_left, std::size_t pad_right);

} // namespace attnbench
