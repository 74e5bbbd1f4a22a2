#pragma once

#include <utility>
#include <vector>

#include "dpn/tensor.hpp"

namespace dpn {

// Forward operations with reverse-mode gradients. Every op allocates a fresh
// output tensor and, when a tape is active, records a backward rule. All
// element loops run in a fixed row-major order, so results are deterministic.
//
// Instantiated for float (training/inference) and double (gradient checking).

// Grouped 2-D convolution, no bias. weight is Cout x (Cin/G) x Kh x Kw.
// Output extents follow floor((H + 2p - K) / s) + 1 and must be positive.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight,
                  std::pair<int, int> stride, std::pair<int, int> padding,
                  int groups = 1);

template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight, int stride,
                  int padding, int groups = 1) {
  return conv2d(input, weight, {stride, stride}, {padding, padding}, groups);
}

// Batch normalization over N,H,W per channel. Train mode normalizes by batch
// statistics (population variance) and folds them into the running buffers
// with `new = momentum * old + (1 - momentum) * batch`; eval mode normalizes
// by the running buffers. Accepts N x C x H x W or N x C input.
template <typename T>
TensorT<T> batch_norm(const TensorT<T>& input, const TensorT<T>& gamma,
                      const TensorT<T>& beta, TensorT<T>& running_mean,
                      TensorT<T>& running_var, bool training, T epsilon,
                      T momentum);

// Stat-less variant: always normalizes by batch statistics, touches nothing.
template <typename T>
TensorT<T> batch_norm_batch_stats(const TensorT<T>& input, const TensorT<T>& gamma,
                                  const TensorT<T>& beta, T epsilon);

template <typename T>
TensorT<T> relu(const TensorT<T>& input);

// Max pooling with implicit -inf padding. Ties route gradient to the first
// maximum in row-major scan order.
template <typename T>
TensorT<T> max_pool2d(const TensorT<T>& input, int kernel, int stride,
                      int padding);

// pad = (kernel - 1) / 2, which keeps the Table-1 extent chain exact
// (e.g. 3x3 stride-2 pooling maps 112 -> 56).
template <typename T>
TensorT<T> max_pool2d(const TensorT<T>& input, int kernel, int stride) {
  return max_pool2d(input, kernel, stride, (kernel - 1) / 2);
}

// Average pooling, windows clipped at the borders and averaged over the
// elements actually covered (count-excluding padding).
template <typename T>
TensorT<T> avg_pool2d(const TensorT<T>& input, int kernel, int stride,
                      int padding = 0);

template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& input);  // N x C x H x W -> N x C

template <typename T>
TensorT<T> global_max_pool(const TensorT<T>& input);  // N x C x H x W -> N x C

// Channel-dimension concat/slice (dim 1); slice bounds are [from, to).
// slice_channels(concat_channels(a, b), 0, Ca) reproduces a bit-exactly.
template <typename T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b);

template <typename T>
TensorT<T> slice_channels(const TensorT<T>& t, int from, int to);

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);

template <typename T>
TensorT<T> scale(const TensorT<T>& t, T factor);

// input N x C, weight K x C, bias K -> N x K.
template <typename T>
TensorT<T> linear(const TensorT<T>& input, const TensorT<T>& weight,
                  const TensorT<T>& bias);

// Mean over the batch of -log softmax probability of the true class.
template <typename T>
TensorT<T> softmax_cross_entropy(const TensorT<T>& logits,
                                 const std::vector<int>& labels);

// Row-wise softmax probabilities of an N x K value matrix (no grad; used for
// inspecting predictions).
template <typename T>
std::vector<T> softmax_values(const TensorT<T>& logits);

// Test-time pooling: exactly 0.5 * (global average + global max) per channel.
template <typename T>
TensorT<T> mean_max_pool(const TensorT<T>& features) {
  return scale(add(global_avg_pool(features), global_max_pool(features)), T(0.5));
}

// Partial-product ops for the two-path realization of a joint-state
// projection: each applies the input-channel slice [offset, offset + C) of a
// full weight, and gradients land in that slice of the full tensor. Summing
// the per-path results reproduces the op on the concatenated state up to
// floating-point grouping.

// 1x1 convolution by weight columns [offset, offset + Cin). weight is
// Cout x CinFull x 1 x 1.
template <typename T>
TensorT<T> conv2d_input_slice(const TensorT<T>& input, const TensorT<T>& weight,
                              int in_offset, int stride = 1);

// Batch normalization of a channel block: gamma/beta are the full vectors,
// rows [offset, offset + C) apply. Always normalizes by batch statistics.
template <typename T>
TensorT<T> batch_norm_channels(const TensorT<T>& input, const TensorT<T>& gamma,
                               const TensorT<T>& beta, int offset, T epsilon);

// input N x C against weight columns [offset, offset + C); bias (optional,
// pass undefined to skip) is added once on whichever path carries it.
template <typename T>
TensorT<T> linear_input_slice(const TensorT<T>& input, const TensorT<T>& weight,
                              int in_offset, const TensorT<T>& bias);

}  // namespace dpn
