#include "reformer/joint.hpp"

#include <cmath>

#include "reformer/ops.hpp"

namespace reformer {

namespace {

Shape leading(const Shape& s, std::size_t keep) { return Shape(s.begin(), s.end() - keep); }

Shape with(Shape lead, std::initializer_list<std::size_t> tail) {
  lead.insert(lead.end(), tail);
  return lead;
}

}  // namespace

template <typename T>
JointTensor<T> build_joint_input(const BasicTensor<T>& src_repr, const BasicTensor<T>& tgt_embed,
                                 const ForwardContext& ctx, std::size_t tgt_offset) {
  if (src_repr.rank() < 2 || tgt_embed.rank() != src_repr.rank() ||
      src_repr.dim(-1) != tgt_embed.dim(-1) ||
      leading(src_repr.shape(), 2) != leading(tgt_embed.shape(), 2)) {
    throw ShapeError("build_joint_input: source " + to_string(src_repr.shape()) + " and target " +
                     to_string(tgt_embed.shape()) + " need matching [..., n, e] shapes");
  }
  const std::size_t s = src_repr.dim(-2), t = tgt_embed.dim(-2), e = src_repr.dim(-1);
  if (s == 0 || t == 0) throw ShapeError("build_joint_input: empty sequence");
  const Shape lead = leading(src_repr.shape(), 2);
  const Shape full = with(lead, {s, t, e});
  auto src = ops::add(src_repr, sinusoidal_positions<T>(s, e));
  auto tgt = ops::add(tgt_embed, sinusoidal_positions<T>(t, e, tgt_offset));
  auto grid = ops::add(ops::expand(ops::reshape(src, with(lead, {s, 1, e})), full),
                       ops::expand(ops::reshape(tgt, with(lead, {1, t, e})), full));
  auto value = ops::scale(grid, static_cast<T>(std::sqrt(static_cast<double>(e))));
  value = structured_dropout(value, ctx.dropout, {}, ctx.rng, ctx.training);
  return {value};
}

template <typename T>
BasicTensor<T> future_mask(std::size_t n) {
  std::vector<T> m(n * n, T(0));
  for (std::size_t q = 0; q < n; ++q) {
    for (std::size_t k = q + 1; k < n; ++k) m[q * n + k] = static_cast<T>(kBlocked);
  }
  return BasicTensor<T>({n, n}, std::move(m));
}

template <typename T>
JointTensor<T> separable_attention(const JointTensor<T>& x, JointAxis axis,
                                   const AttentionParams<T>& p, const BasicTensor<T>* mask,
                                   const ForwardContext& ctx, int layer) {
  const std::size_t r = x.value.rank();
  if (r < 3) {
    throw ShapeError("separable_attention: expected [..., S, T, e], got " +
                     to_string(x.value.shape()));
  }
  if (axis == JointAxis::target) {
    const std::size_t t = x.tgt_len();
    if (mask && mask->shape() != Shape{t, t}) {
      throw ShapeError("target attention mask must be [T, T], got " + to_string(mask->shape()));
    }
    return {multi_head_attention<T>(x.value, x.value, p, mask, ctx,
                                 AttentionTag{layer, AttentionKind::target})};
  }
  if (axis != JointAxis::source) throw ConfigError("separable_attention: unknown axis");
  if (mask) throw ConfigError("source attention sees every source position; no mask allowed");
  std::vector<std::size_t> swap(r);
  for (std::size_t i = 0; i < r; ++i) swap[i] = i;
  std::swap(swap[r - 3], swap[r - 2]);
  auto columns = ops::permute(x.value, swap);  // [..., T, S, e]
  auto out = multi_head_attention<T>(columns, columns, p, nullptr, ctx,
                                     AttentionTag{layer, AttentionKind::source});
  return {ops::permute(out, swap)};
}

template <typename T>
ReductionParams<T> ReductionParams<T>::init(std::size_t e, Rng& rng) {
  ReductionParams p;
  p.pre_norm = LayerNormParams<T>::init(e);
  p.w = xavier_uniform<T>(e, e, rng);
  p.post_norm = LayerNormParams<T>::init(e);
  return p;
}

template <typename T>
void ReductionParams<T>::collect(const std::string& prefix, ParamRefs<T>& out) {
  pre_norm.collect(prefix + ".pre_norm", out);
  w.set_name(prefix + ".w");
  out.push_back({prefix + ".w", &w});
  post_norm.collect(prefix + ".post_norm", out);
}

template <typename T>
BasicTensor<T> reduction_raw(const BasicTensor<T>& x, const BasicTensor<T>& w,
                             BasicTensor<T>* weights) {
  if (x.rank() < 2 || w.rank() != 2 || w.dim(0) != w.dim(1) || w.dim(1) != x.dim(-1)) {
    throw ShapeError("reduction: input " + to_string(x.shape()) + " and weight " +
                     to_string(w.shape()) + " are incompatible");
  }
  // scores[s, i] = W_i . x_s
  auto attn = ops::softmax(ops::matmul_transposed(x, w), -2);
  if (weights) *weights = attn;
  return ops::sum_axis(ops::mul(attn, x), -2);
}

template <typename T>
BasicTensor<T> reduction(const BasicTensor<T>& x, const ReductionParams<T>& p) {
  auto normed = ops::layer_norm(x, p.pre_norm.gain, p.pre_norm.bias);
  auto raw = reduction_raw(normed, p.w);
  return ops::layer_norm(raw, p.post_norm.gain, p.post_norm.bias);
}

template <typename T>
ReformerLayerParams<T> ReformerLayerParams<T>::init(std::size_t e, int width, int heads, Rng& rng) {
  ReformerLayerParams p;
  p.target_norm = LayerNormParams<T>::init(e);
  p.target_attn = AttentionParams<T>::init(e, heads, rng);
  p.ffn1_norm = LayerNormParams<T>::init(e);
  p.ffn1 = FfnParams<T>::init(e, width, rng);
  p.source_norm = LayerNormParams<T>::init(e);
  p.source_attn = AttentionParams<T>::init(e, heads, rng);
  p.ffn2_norm = LayerNormParams<T>::init(e);
  p.ffn2 = FfnParams<T>::init(e, width, rng);
  return p;
}

template <typename T>
void ReformerLayerParams<T>::collect(const std::string& prefix, ParamRefs<T>& out) {
  target_norm.collect(prefix + ".target_norm", out);
  target_attn.collect(prefix + ".target_attn", out);
  ffn1_norm.collect(prefix + ".ffn1_norm", out);
  ffn1.collect(prefix + ".ffn1", out);
  source_norm.collect(prefix + ".source_norm", out);
  source_attn.collect(prefix + ".source_attn", out);
  ffn2_norm.collect(prefix + ".ffn2_norm", out);
  ffn2.collect(prefix + ".ffn2", out);
}

namespace {

// Dropout sharing patterns on [..., S, T, e].
std::set<std::size_t> share_s(std::size_t rank) { return {rank - 3}; }
std::set<std::size_t> share_t(std::size_t rank) { return {rank - 2}; }
std::set<std::size_t> share_st(std::size_t rank) { return {rank - 3, rank - 2}; }

// FFN and source-attention halves of a layer; both are column-local in T.
template <typename T>
BasicTensor<T> upper_sublayers(const BasicTensor<T>& x, const ReformerLayerParams<T>& p,
                               const ForwardContext& ctx, int layer) {
  auto h = sublayer<T>(
      x, p.ffn1_norm, [&](const BasicTensor<T>& y) { return ffn(y, p.ffn1); },
      {ctx.dropout, share_st(x.rank())}, ctx);
  h = sublayer<T>(
      h, p.source_norm,
      [&](const BasicTensor<T>& y) {
        return separable_attention<T>({y}, JointAxis::source, p.source_attn, nullptr, ctx, layer)
            .value;
      },
      {ctx.dropout, share_t(x.rank())}, ctx);
  return sublayer<T>(
      h, p.ffn2_norm, [&](const BasicTensor<T>& y) { return ffn(y, p.ffn2); },
      {ctx.dropout, share_st(x.rank())}, ctx);
}

}  // namespace

template <typename T>
JointTensor<T> reformer_layer(const JointTensor<T>& x, const ReformerLayerParams<T>& p,
                              const ForwardContext& ctx, int layer) {
  const auto mask = future_mask<T>(x.tgt_len());
  auto h = sublayer<T>(
      x.value, p.target_norm,
      [&](const BasicTensor<T>& y) {
        return separable_attention<T>({y}, JointAxis::target, p.target_attn, &mask, ctx, layer)
            .value;
      },
      {ctx.dropout, share_s(x.value.rank())}, ctx);
  return {upper_sublayers(h, p, ctx, layer)};
}

template <typename T>
BasicTensor<T> step_decode(DecodeCache<T>& cache, const BasicTensor<T>& column,
                           std::span<const ReformerLayerParams<T>> layers,
                           const ForwardContext& ctx) {
  if (column.rank() < 3 || column.dim(-2) != 1) {
    throw ShapeError("step_decode: expected a [..., S, 1, e] column, got " +
                     to_string(column.shape()));
  }
  if (cache.t_done == 0 && cache.layer_inputs.empty()) cache.layer_inputs.resize(layers.size());
  if (cache.layer_inputs.size() != layers.size()) {
    throw ConfigError("decode cache holds " + std::to_string(cache.layer_inputs.size()) +
                      " layers but the model has " + std::to_string(layers.size()));
  }
  auto x = column;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& p = layers[k];
    auto& stored = cache.layer_inputs[k];
    if (cache.t_done == 0) {
      stored = x;
    } else {
      if (leading(stored.shape(), 2) != leading(x.shape(), 2) || stored.dim(-2) != cache.t_done) {
        throw ShapeError("step_decode: cache layer " + std::to_string(k) + " has shape " +
                         to_string(stored.shape()) + " for column " + to_string(x.shape()));
      }
      const BasicTensor<T> parts[] = {stored, x};
      stored = ops::concat<T>(parts, -2);
    }
    const auto keys = ops::layer_norm(stored, p.target_norm.gain, p.target_norm.bias);
    auto h = sublayer<T>(
        x, p.target_norm,
        [&](const BasicTensor<T>& query) {
          return multi_head_attention<T>(query, keys, p.target_attn, nullptr, ctx,
                                      AttentionTag{static_cast<int>(k), AttentionKind::target});
        },
        {ctx.dropout, share_s(x.rank())}, ctx);
    x = upper_sublayers(h, p, ctx, static_cast<int>(k));
  }
  ++cache.t_done;
  return x;
}

#define REFORMER_INSTANTIATE_JOINT(T)                                                           \
  template struct ReductionParams<T>;                                                           \
  template struct ReformerLayerParams<T>;                                                       \
  template JointTensor<T> build_joint_input(const BasicTensor<T>&, const BasicTensor<T>&,       \
                                            const ForwardContext&, std::size_t);                \
  template BasicTensor<T> future_mask<T>(std::size_t);                                          \
  template JointTensor<T> separable_attention(const JointTensor<T>&, JointAxis,                 \
                                              const AttentionParams<T>&, const BasicTensor<T>*, \
                                              const ForwardContext&, int);                      \
  template BasicTensor<T> reduction_raw(const BasicTensor<T>&, const BasicTensor<T>&,           \
                                        BasicTensor<T>*);                                       \
  template BasicTensor<T> reduction(const BasicTensor<T>&, const ReductionParams<T>&);          \
  template JointTensor<T> reformer_layer(const JointTensor<T>&, const ReformerLayerParams<T>&,  \
                                         const ForwardContext&, int);                           \
  template BasicTensor<T> step_decode(DecodeCache<T>&, const BasicTensor<T>&,                   \
                                      std::span<const ReformerLayerParams<T>>,                  \
                                      const ForwardContext&);

REFORMER_INSTANTIATE_JOINT(float)
REFORMER_INSTANTIATE_JOINT(double)

#undef REFORMER_INSTANTIATE_JOINT

}  // namespace reformer
