#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "varformer/tensor.hpp"

// Differentiable operations. Each records itself on the active tape when one
// of its inputs requires a gradient. Shapes must match exactly; the only
// broadcast is add_row_bias.
namespace varformer::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// Same values under a new shape with the same element count.
Tensor reshape(const Tensor& x, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// x[N x d] + bias[d] on every row.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

Tensor scale(const Tensor& x, double factor);
Tensor div_scalar(const Tensor& x, double divisor);
Tensor add_scalar(const Tensor& x, double value);
Tensor reciprocal(const Tensor& x);

Tensor relu(const Tensor& x);
/// log(1 + exp(x)), evaluated without overflow.
Tensor softplus(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor sqrt(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Softmax along `axis` of a matrix (0 = down columns, 1 = along rows), or of a vector.
Tensor softmax(const Tensor& x, std::size_t axis);
/// Row-wise log-softmax of a matrix.
Tensor log_softmax(const Tensor& x);

/// Normalizes every row of x[N x d] to zero mean and unit variance, then applies gain/bias[d].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);

/// Rows of `table` selected by `ids` (embedding lookup).
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
/// out[r] = x[r, ids[r]].
Tensor pick(const Tensor& x, std::span<const int> ids);

/// 3x3 convolution over x[C_in x H x W] with weights [C_out x C_in x 3 x 3] and bias [C_out].
/// Stride 2 on both spatial axes with one row/column of zero padding on the leading
/// edge only, so each spatial size n becomes floor(n / 2).
Tensor conv3x3_s2(const Tensor& x, const Tensor& weight, const Tensor& bias);
/// [C x T x F] -> [T x (C * F)], channel-major within each frame.
Tensor channels_to_frames(const Tensor& x);

}  // namespace varformer::ops
