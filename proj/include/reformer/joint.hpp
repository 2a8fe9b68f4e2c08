#pragma once

// The joint S x T x e representation: input construction, separable
// attention along one temporal axis, the reduction head, the four-sublayer
// trunk layer and its incremental decoding cache.

#include <span>
#include <vector>

#include "reformer/nn.hpp"
#include "reformer/tensor.hpp"

namespace reformer {

template <typename T>
struct JointTensor {
  BasicTensor<T> value;  // [..., S, T, e]; leading extents are batch

  std::size_t src_len() const { return value.dim(-3); }
  std::size_t tgt_len() const { return value.dim(-2); }
  std::size_t width() const { return value.dim(-1); }
};

enum class JointAxis { source, target };

// value[..., i, j] = (src_repr[..., i] + tgt_embed[..., j] + pos_i + pos_(tgt_offset + j)) * sqrt(e),
// followed by unshared dropout in training mode.  src_repr [..., S, e],
// tgt_embed [..., T, e] with equal leading extents.
template <typename T>
JointTensor<T> build_joint_input(const BasicTensor<T>& src_repr, const BasicTensor<T>& tgt_embed,
                                 const ForwardContext& ctx = {}, std::size_t tgt_offset = 0);

// Additive [n, n] mask: 0 where key <= query, kBlocked above the diagonal.
template <typename T>
BasicTensor<T> future_mask(std::size_t n);

// Attention along `axis` with the other temporal axis treated as batch.
template <typename T>
JointTensor<T> separable_attention(const JointTensor<T>& x, JointAxis axis,
                                   const AttentionParams<T>& p, const BasicTensor<T>* mask,
                                   const ForwardContext& ctx = {}, int layer = 0);

template <typename T>
struct ReductionParams {
  LayerNormParams<T> pre_norm;
  BasicTensor<T> w;  // [e, e]; row i scores feature i
  LayerNormParams<T> post_norm;

  static ReductionParams init(std::size_t e, Rng& rng);
  void collect(const std::string& prefix, ParamRefs<T>& out);
};

// head_i = softmax_S(x W_i^T) . x[:, i] for x [..., S, e] -> [..., e].
// When `weights` is non-null it receives the [..., S, e] softmax weights.
template <typename T>
BasicTensor<T> reduction_raw(const BasicTensor<T>& x, const BasicTensor<T>& w,
                             BasicTensor<T>* weights = nullptr);

// post_norm(reduction_raw(pre_norm(x), W)).
template <typename T>
BasicTensor<T> reduction(const BasicTensor<T>& x, const ReductionParams<T>& p);

template <typename T>
struct ReformerLayerParams {
  LayerNormParams<T> target_norm;
  AttentionParams<T> target_attn;
  LayerNormParams<T> ffn1_norm;
  FfnParams<T> ffn1;
  LayerNormParams<T> source_norm;
  AttentionParams<T> source_attn;
  LayerNormParams<T> ffn2_norm;
  FfnParams<T> ffn2;

  static ReformerLayerParams init(std::size_t e, int width, int heads, Rng& rng);
  void collect(const std::string& prefix, ParamRefs<T>& out);
};

// Target attention -> FFN -> source attention -> FFN, each a residual
// sublayer.  Dropout shares noise along S after target attention, along T
// after source attention and along both after each FFN.
template <typename T>
JointTensor<T> reformer_layer(const JointTensor<T>& x, const ReformerLayerParams<T>& p,
                              const ForwardContext& ctx = {}, int layer = 0);

// Layer inputs of every completed target position, one [..., S, t_done, e]
// tensor per layer.
template <typename T>
struct DecodeCache {
  std::vector<BasicTensor<T>> layer_inputs;
  std::size_t t_done = 0;
};

// Runs the trunk on a single new target column [..., S, 1, e].  Target attention
// queries the new column only, with keys/values over the cached columns plus
// the new one.  Returns the top layer's output column and extends the cache.
template <typename T>
BasicTensor<T> step_decode(DecodeCache<T>& cache, const BasicTensor<T>& column,
                           std::span<const ReformerLayerParams<T>> layers,
                           const ForwardContext& ctx = {});

}  // namespace reformer
