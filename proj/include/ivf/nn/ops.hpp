#pragma once

#include <vector>

#include "ivf/nn/tape.hpp"

namespace ivf::nn {

// Elementwise and reductions.
template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> scale(const Var<T>& a, T factor);
// x [..., C] + b [C] broadcast over leading dimensions.
template <class T> Var<T> add_bias(const Var<T>& x, const Var<T>& bias);
template <class T> Var<T> relu(const Var<T>& a);
template <class T> Var<T> gelu(const Var<T>& a);
template <class T> Var<T> sum(const Var<T>& a);
template <class T> Var<T> mean(const Var<T>& a);
// mean |a - target|, target treated as a constant.
template <class T> Var<T> mean_abs_diff(const Var<T>& a, const Tensor<T>& target);

// Structural.
template <class T> Var<T> reshape(const Var<T>& a, Shape shape);
template <class T> Var<T> permute(const Var<T>& a, const std::vector<int>& perm);
template <class T> Var<T> concat(const std::vector<Var<T>>& parts, int axis);
template <class T> Var<T> narrow(const Var<T>& a, int axis, int start, int length);

// x[..., in] -> x W^T + b, W [out, in], b [out].
template <class T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);
// Batched product a[B, n, k] * b[B, k, m] (or b[B, m, k] transposed when transpose_b).
template <class T> Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_b = false);
// Softmax over the last dimension with max subtraction.
template <class T> Var<T> softmax_rows(const Var<T>& x);
// Normalisation over the last dimension with learned scale and shift.
template <class T> Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

// x [C, H, W], weight [Co, C, k, k], bias [Co]; stride 1, zero padding (k - 1) / 2, cross-correlation.
template <class T> Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

// [C, H, W] -> [C r^2, H / r, W / r]; channel c r^2 + (y mod r) r + (x mod r).
template <class T> Var<T> pixel_unshuffle(const Var<T>& x, int r = 2);
template <class T> Var<T> pixel_shuffle(const Var<T>& x, int r = 2);

// [C, H, W] -> [nW, w*w, C] with windows and in-window pixels both row-major.
// shift applies a cyclic roll by (w/2, w/2) first.
template <class T> Var<T> window_partition(const Var<T>& x, int window, bool shift);
template <class T> Var<T> window_merge(const Var<T>& tokens, int channels, int height, int width, int window,
                                      bool shift);

// Plain tensor helpers shared with the ops.
template <class T> Tensor<T> pixel_unshuffle(const Tensor<T>& x, int r = 2);
template <class T> Tensor<T> pixel_shuffle(const Tensor<T>& x, int r = 2);
template <class T> Tensor<T> window_partition(const Tensor<T>& x, int window, bool shift);
template <class T> Tensor<T> window_merge(const Tensor<T>& tokens, int channels, int height, int width, int window,
                                         bool shift);
template <class T> Tensor<T> softmax_rows(const Tensor<T>& x);

}  // namespace ivf::nn
