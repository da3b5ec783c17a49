#pragma once

#include <span>

#include "cdlm/graph.hpp"

// Differentiable operations over Graph variables. Every op validates shapes
// up front and throws cdlm::Error instead of broadcasting silently; every
// forward result is checked for NaN/Inf.
namespace cdlm::ops {

/// NumPy-style broadcast of two shapes; throws ErrorKind::Dimension.
Shape broadcast_shape(const Shape& a, const Shape& b);

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> broadcast_to(Var<T> x, const Shape& shape);

template <typename T> Var<T> scale(Var<T> x, double factor);
template <typename T> Var<T> add_scalar(Var<T> x, double value);
template <typename T> Var<T> exp(Var<T> x);
/// Throws ErrorKind::Domain on non-positive input.
template <typename T> Var<T> log(Var<T> x);
/// Output is kept strictly inside (0, 1) even where the float sigmoid saturates.
template <typename T> Var<T> sigmoid(Var<T> x);
template <typename T> Var<T> tanh(Var<T> x);
template <typename T> Var<T> leaky_relu(Var<T> x, double slope);
template <typename T> Var<T> square(Var<T> x);
/// Throws ErrorKind::Domain on non-positive input.
template <typename T> Var<T> sqrt(Var<T> x);

template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> mean(Var<T> x);
/// Mean over the leading axis: [n, ...] -> [...].
template <typename T> Var<T> mean_rows(Var<T> x);

template <typename T> Var<T> reshape(Var<T> x, const Shape& shape);
/// [n, ...] -> [n, prod(...)].
template <typename T> Var<T> flatten(Var<T> x);
/// Constant copy with no path back to `x`.
template <typename T> Var<T> detach(Var<T> x);

/// [m, k] x [k, n] -> [m, n].
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// x [n, in] * w [in, out] + b [out].
template <typename T> Var<T> linear(Var<T> x, Var<T> w, Var<T> b);

/// Cross-correlation. input [n, c, h, w], kernel [o, c, kh, kw] -> [n, o, ho, wo].
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, int stride, int padding);
/// Adds a per-channel bias to an NCHW tensor.
template <typename T> Var<T> add_channel_bias(Var<T> x, Var<T> bias);
/// Adjoint of conv2d. input [n, c, h, w], kernel [c, o, kh, kw] ->
/// [n, o, (h-1)*stride - 2*padding + kh, ...].
template <typename T>
Var<T> conv_transpose2d(Var<T> input, Var<T> kernel, int stride, int padding);

/// Identity forward; backward multiplies the adjoint by -scale.
template <typename T> Var<T> grad_reverse(Var<T> x, double scale);

/// Mean softmax cross-entropy of logits [n, k] against integer labels.
template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const int> labels);

}  // namespace cdlm::ops
