#pragma once

// Differentiable primitives.  Every function returns a fresh tensor, checks
// the result for NaN/Inf, and records itself on the active GradTape when any
// input requires a gradient.
//
// Broadcasting is deliberately narrow:
//  - matmul broadcasts leading batch extents that are equal or 1;
//  - add/sub/mul accept a right operand whose shape is a suffix of the left
//    operand's shape (bias vectors, [n_q, n_k] attention masks);
//  - expand replicates extent-1 axes explicitly.

#include <cstdint>
#include <span>
#include <vector>

#include "reformer/tensor.hpp"

namespace reformer::ops {

// [..., m, k] x [..., k, n] -> [..., m, n]
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// [..., m, k] x ([..., n, k])^T -> [..., m, n]
template <typename T>
BasicTensor<T> matmul_transposed(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int axis);

inline constexpr double kLayerNormEps = 1e-5;

// Normalizes over the last axis, then applies gain and bias of extent e.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);

// out.shape[i] = x.shape[axes[i]]
template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, std::vector<std::size_t> axes);

// Replicates extent-1 axes of x up to `shape` (same rank).
template <typename T>
BasicTensor<T> expand(const BasicTensor<T>& x, Shape shape);

template <typename T>
BasicTensor<T> concat(std::span<const BasicTensor<T>> parts, int axis);

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, int axis, std::size_t start, std::size_t length);

// Rows of table [V, e] selected by ids -> [n, e].
template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const int> ids);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);

// Sums over one axis and drops it.
template <typename T>
BasicTensor<T> sum_axis(const BasicTensor<T>& x, int axis);

enum class LossReduction { mean, sum };

// Token-level cross-entropy of logits [n, V] against gold ids.  Positions with
// counted[i] == 0 are ignored.  With label smoothing s, the target is
// (1 - s) on gold plus s/V spread uniformly.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> gold,
                             std::span<const std::uint8_t> counted = {}, double label_smoothing = 0.0,
                             LossReduction reduction = LossReduction::mean);

}  // namespace reformer::ops
