#pragma once

#include <optional>
#include <vector>

#include "sgdiff/tape.hpp"

namespace sgdiff {

// Differentiable operations on tape values. All are templated on the scalar
// type and instantiated for float and double. Shape violations raise
// DimensionError naming the offending shapes.

template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> mul(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> scale(const Var<S>& a, S factor);
/// Multiplies example n (leading axis) by `factors[n]`.
template <typename S> Var<S> scale_examples(const Var<S>& a, const std::vector<S>& factors);

template <typename S> Var<S> sum(const Var<S>& a);
template <typename S> Var<S> mean(const Var<S>& a);
/// Mean squared difference over all elements.
template <typename S> Var<S> mse(const Var<S>& a, const Var<S>& b);
/// Euclidean norm of each row of a [R x F] view; result [R]. The gradient at a zero row is zero.
template <typename S> Var<S> row_norms(const Var<S>& a);
/// Rows rescaled to unit length.
template <typename S> Var<S> normalize_rows(const Var<S>& a, S eps = S(1e-12));

template <typename S> Var<S> silu(const Var<S>& a);
template <typename S> Var<S> relu(const Var<S>& a);

/// [m x k] . [k x n]
template <typename S> Var<S> matmul(const Var<S>& a, const Var<S>& b);
/// x[..., in] . w[in x out] + b[out]; `bias` may be an invalid Var.
template <typename S> Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias);
/// Numerically stabilised softmax along `axis`.
template <typename S> Var<S> softmax(const Var<S>& x, int axis);

/// Multi-head scaled dot-product attention.
/// q [N x Lq x D], k [N x Lk x D], v [N x Lk x D] -> [N x Lq x D].
template <typename S> Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, int heads);
/// Attention probabilities [N x heads x Lq x Lk] (inspection only, not recorded).
template <typename S>
Tensor<S> attention_weights(const Tensor<S>& q, const Tensor<S>& k, int heads);

/// Cross-correlation. input [N x Cin x H x W] or [Cin x H x W], kernels
/// [Cout x Cin x k x k] with k odd; `bias` may be an invalid Var.
template <typename S>
Var<S> conv2d(const Var<S>& input, const Var<S>& kernels, const Var<S>& bias, int stride, int padding);

template <typename S>
Var<S> group_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, int groups, S eps = S(1e-5));
template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-5));

/// x [N x C x H x W] + b [N x C] broadcast over space.
template <typename S> Var<S> add_channel_bias(const Var<S>& x, const Var<S>& b);
/// x [N x L x D] + b [L x D] broadcast over the leading axis.
template <typename S> Var<S> add_broadcast(const Var<S>& x, const Var<S>& b);
/// Rows of `table` [V x D] selected by `ids`; result shape `ids_shape` + [D].
template <typename S>
Var<S> embedding(const std::vector<int>& ids, const Shape& ids_shape, const Var<S>& table);

template <typename S> Var<S> concat(const Var<S>& a, const Var<S>& b, int axis);
template <typename S> Var<S> slice(const Var<S>& x, int axis, Index start, Index length);
template <typename S> Var<S> reshape(const Var<S>& x, Shape shape);
/// Swaps the two trailing axes.
template <typename S> Var<S> transpose_last2(const Var<S>& x);

template <typename S> Var<S> upsample_nearest2(const Var<S>& x);
template <typename S> Var<S> avg_pool2(const Var<S>& x);

/// Mean negative log-likelihood of `labels` under row-wise softmax of logits [B x C].
template <typename S> Var<S> softmax_cross_entropy(const Var<S>& logits, const std::vector<int>& labels);

}  // namespace sgdiff
